//! Teachers for distillation: a co-occurrence Markov chain and a decoder
//! trained with the sequence-shifting objective, plus Top-K teacher lists.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, SplitDataset};
use crate::error::{Error, IoContext, Result};
use crate::evalkit::{csv_io, mean_ndcg, recommend, Scorer, State, Strategy};
use crate::nnet::{decode_checkpoint, save_checkpoint, LossSpec, ModelConfig, ModelParams};
use crate::seqcodec::{encode_history_only, Layout};
use crate::training::{fit, TrainConfig, TrainOutcome};

pub const DEFAULT_BETA: f64 = 0.6;

/// Counts `c(a -> b)` of item `b` occurring anywhere after `a` within a
/// training sequence, normalised per row into `p(b | a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTeacher {
    pub num_items: usize,
    pub beta: f64,
    /// `rows[a]`: `(b, c(a -> b))` sorted by `b`, zero counts omitted.
    rows: Vec<Vec<(ItemId, u64)>>,
    row_totals: Vec<u64>,
    /// Training frequency, used to order candidates whose score is `-inf`.
    freq: Vec<f64>,
}

/// Above this catalog size pair counts are accumulated sparsely.
const DENSE_COUNT_LIMIT: usize = 4096;

impl MarkovTeacher {
    pub fn fit(train_sequences: &[Vec<ItemId>], num_items: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!(
                "decay beta = {beta} must lie in (0, 1)"
            )));
        }
        let total: usize = train_sequences.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = train_sequences.iter().flatten().find(|&&i| i >= num_items) {
            return Err(Error::InvalidInput(format!(
                "item {bad} outside catalog of {num_items}"
            )));
        }
        let mut counts = vec![0u64; num_items];
        for &i in train_sequences.iter().flatten() {
            counts[i] += 1;
        }
        let freq = counts.iter().map(|&c| c as f64 / total as f64).collect();

        let rows: Vec<Vec<(ItemId, u64)>> = if num_items <= DENSE_COUNT_LIMIT {
            let mut dense = vec![0u64; num_items * num_items];
            for seq in train_sequences {
                for (i, &a) in seq.iter().enumerate() {
                    let row = &mut dense[a * num_items..(a + 1) * num_items];
                    for &b in &seq[i + 1..] {
                        row[b] += 1;
                    }
                }
            }
            dense
                .chunks(num_items)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(b, &c)| (b, c))
                        .collect()
                })
                .collect()
        } else {
            let mut sparse: Vec<HashMap<ItemId, u64>> = vec![HashMap::new(); num_items];
            for seq in train_sequences {
                for (i, &a) in seq.iter().enumerate() {
                    for &b in &seq[i + 1..] {
                        *sparse[a].entry(b).or_default() += 1;
                    }
                }
            }
            sparse
                .into_iter()
                .map(|m| {
                    let mut row: Vec<(ItemId, u64)> = m.into_iter().collect();
                    row.sort_unstable();
                    row
                })
                .collect()
        };
        let row_totals = rows
            .iter()
            .map(|r| r.iter().map(|&(_, c)| c).sum())
            .collect();
        Ok(Self {
            num_items,
            beta,
            rows,
            row_totals,
            freq,
        })
    }

    /// Empirical `p(b | a)`; 0 for an empty row.
    pub fn probability(&self, a: ItemId, b: ItemId) -> f64 {
        let total = self.row_totals[a];
        if total == 0 {
            return 0.0;
        }
        match self.rows[a].binary_search_by_key(&b, |&(i, _)| i) {
            Ok(pos) => self.rows[a][pos].1 as f64 / total as f64,
            Err(_) => 0.0,
        }
    }

    /// `s(g) = sum_{j=1..n} beta^j ln p(g | h_{n-j+1})`: the most recent item
    /// gets weight `beta`. A zero probability makes the score `-inf`.
    pub fn score(&self, history: &[ItemId], candidate: ItemId) -> f64 {
        let mut s = 0.0;
        let mut w = 1.0;
        for &h in history.iter().rev() {
            w *= self.beta;
            let p = self.probability(h, candidate);
            if p == 0.0 {
                return f64::NEG_INFINITY;
            }
            s += w * p.ln();
        }
        s
    }

    /// Scores of every catalog item for `history`.
    pub fn scores(&self, history: &[ItemId]) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_items];
        let mut term = vec![f64::NEG_INFINITY; self.num_items];
        let mut w = 1.0;
        for &h in history.iter().rev() {
            w *= self.beta;
            term.fill(f64::NEG_INFINITY);
            let total = self.row_totals[h] as f64;
            for &(b, c) in &self.rows[h] {
                term[b] = (c as f64 / total).ln();
            }
            for (s, &t) in scores.iter_mut().zip(&term) {
                // -inf stays -inf even when the weight underflows to zero
                *s = if t == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    *s + w * t
                };
            }
        }
        scores
    }

    /// Scores with every `-inf` replaced by a key below all finite scores that
    /// orders those candidates by descending training frequency.
    pub fn ranking_keys(&self, history: &[ItemId]) -> Vec<f64> {
        let mut keys = self.scores(history);
        let floor = keys
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::min);
        for (k, &f) in keys.iter_mut().zip(&self.freq) {
            if !k.is_finite() {
                // freq lies in [0, 1], so these keys fall in [floor - 2, floor - 1]
                *k = floor - 2.0 + f;
            }
        }
        keys
    }
}

/// The Markov teacher ignores the generated prefix: Top-K and Next-K agree.
impl Scorer for MarkovTeacher {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_states(&self, states: &[State<'_>]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|s| {
                if s.history.is_empty() {
                    return Err(Error::InvalidInput("history must not be empty".into()));
                }
                Ok(self.ranking_keys(s.history))
            })
            .collect()
    }
}

/// Trains a decoder in the history-only layout to predict each next item
/// with softmax cross-entropy, stopping early on validation NDCG@10 (Top-K).
pub fn fit_shifting_teacher(
    split: &SplitDataset,
    model: &ModelConfig,
    train: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut config = model.clone();
    config.layout = Layout::HistoryOnly;
    config.num_items = split.num_items;
    let validation = split.validation_cases();
    if validation.is_empty() {
        return Err(Error::Config(
            "shifting training needs validation users for early stopping".into(),
        ));
    }
    let sequences: Vec<&Vec<ItemId>> = split
        .users
        .iter()
        .map(|u| &u.train)
        .filter(|t| t.len() >= 2)
        .collect();
    let init = ModelParams::init(&config, train.seed)?;
    let vocab = config.vocab();
    fit(
        init,
        sequences.len(),
        train,
        |idx| {
            let mut encodings = Vec::with_capacity(idx.len());
            let mut next_items = Vec::with_capacity(idx.len());
            for &i in idx {
                let seq = sequences[i];
                let n = seq.len();
                encodings.push(encode_history_only(
                    &seq[..n - 1],
                    config.n_max,
                    config.k,
                    vocab,
                )?);
                next_items.push(seq[n - 1]);
            }
            Ok((encodings, LossSpec::ShiftingCe { next_items }))
        },
        |p| mean_ndcg(p, &validation, 10.min(split.num_items), Strategy::TopK),
        log,
    )
}

/// A fitted teacher as stored on disk: Markov teachers as JSON, decoder
/// teachers as checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    Markov(MarkovTeacher),
    Model(ModelParams),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TeacherFile {
    Markov(MarkovTeacher),
}

impl Teacher {
    pub fn scorer(&self) -> &dyn Scorer {
        match self {
            Teacher::Markov(m) => m,
            Teacher::Model(p) => p,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Teacher::Markov(m) => {
                let body = serde_json::to_vec(&TeacherFile::Markov(m.clone()))?;
                crate::nnet::write_atomic(path, &body)
            }
            Teacher::Model(p) => save_checkpoint(p, path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        if bytes.starts_with(crate::nnet::MAGIC) {
            return Ok(Teacher::Model(decode_checkpoint(&bytes)?));
        }
        let TeacherFile::Markov(m) = serde_json::from_slice(&bytes)?;
        Ok(Teacher::Markov(m))
    }
}

/// Top-K list of a teacher, ties by ascending item id.
pub fn teacher_topk(
    teacher: &dyn Scorer,
    history: &[ItemId],
    k: usize,
    exclude_history: bool,
) -> Result<Vec<ItemId>> {
    Ok(recommend(teacher, &[history], k, Strategy::TopK, exclude_history)?.remove(0))
}

/// One ranked teacher list per training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherLists {
    pub k: usize,
    /// `(user_id, list)` in dataset user order.
    pub lists: Vec<(String, Vec<ItemId>)>,
}

impl TeacherLists {
    pub fn by_user(&self) -> HashMap<&str, &[ItemId]> {
        self.lists
            .iter()
            .map(|(u, l)| (u.as_str(), l.as_slice()))
            .collect()
    }
}

/// Teacher Top-K lists for every user's training prefix.
pub fn generate_teacher_lists(
    teacher: &dyn Scorer,
    split: &SplitDataset,
    k: usize,
    exclude_history: bool,
) -> Result<TeacherLists> {
    let histories: Vec<&[ItemId]> = split.users.iter().map(|u| u.train.as_slice()).collect();
    let lists = recommend(teacher, &histories, k, Strategy::TopK, exclude_history)?;
    Ok(TeacherLists {
        k,
        lists: split
            .users
            .iter()
            .map(|u| u.user_id.clone())
            .zip(lists)
            .collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct ListRow {
    user_id: String,
    rank: usize,
    item_id: u64,
}

/// CSV `user_id,rank,item_id` with original item labels, rank from 1.
pub fn write_teacher_lists(lists: &TeacherLists, item_labels: &[u64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for (user_id, list) in &lists.lists {
        for (r, &item) in list.iter().enumerate() {
            w.serialize(ListRow {
                user_id: user_id.clone(),
                rank: r + 1,
                item_id: item_labels[item],
            })?;
        }
    }
    w.flush().at(path)
}

pub fn read_teacher_lists(path: &Path, label_index: &HashMap<u64, ItemId>) -> Result<TeacherLists> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(e, path))?;
    let mut lists: Vec<(String, Vec<ItemId>)> = Vec::new();
    for (n, row) in r.deserialize::<ListRow>().enumerate() {
        let row = row?;
        let line = n + 1;
        let &item = label_index.get(&row.item_id).ok_or_else(|| Error::Parse {
            line,
            message: format!("item {} is not in the dataset", row.item_id),
        })?;
        match lists.last_mut() {
            Some((user, list)) if *user == row.user_id => {
                if row.rank != list.len() + 1 {
                    return Err(Error::Parse {
                        line,
                        message: format!("rank {} follows rank {}", row.rank, list.len()),
                    });
                }
                list.push(item);
            }
            _ => {
                if row.rank != 1 {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "list of user {} starts at rank {}",
                            row.user_id, row.rank
                        ),
                    });
                }
                lists.push((row.user_id, vec![item]));
            }
        }
    }
    let k = lists
        .first()
        .map(|(_, l)| l.len())
        .ok_or(Error::EmptyDataset)?;
    let mut seen = HashSet::new();
    for (user, list) in &lists {
        if list.len() != k {
            return Err(Error::InvalidInput(format!(
                "user {user} has {} teacher items, expected {k}",
                list.len()
            )));
        }
        if !seen.insert(user.as_str()) {
            return Err(Error::InvalidInput(format!(
                "user {user} appears in two separate blocks"
            )));
        }
        let distinct: HashSet<_> = list.iter().collect();
        if distinct.len() != k {
            return Err(Error::InvalidInput(format!(
                "teacher list of user {user} repeats an item"
            )));
        }
    }
    Ok(TeacherLists { k, lists })
}
