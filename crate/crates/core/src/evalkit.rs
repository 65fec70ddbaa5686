//! Inference strategies, evaluation metrics, greedy re-ranking baselines and
//! the sweep experiments built from them.
//!
//! Every recommender is reached through [`Scorer`], which maps a state
//! (history plus the items already placed) to one score per catalog item.
//! Top-K scores the empty state once; Next-K re-scores after each placement.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, EvalCase, ItemId};
use crate::error::{Error, IoContext, Result};
use crate::nnet::{next_item_logits, ModelParams};
use crate::reward::{dcg_at_k, relevance_labels};
use crate::seqcodec::{encode_history_only, encode_state, Layout, SequenceEncoding};

/// Users scored together in one batched forward pass.
const EVAL_CHUNK: usize = 128;

/// A partially built recommendation list for one user.
#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub history: &'a [ItemId],
    pub generated: &'a [ItemId],
}

pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    /// One score vector per state; higher means more recommendable.
    fn score_states(&self, states: &[State<'_>]) -> Result<Vec<Vec<f64>>>;

    /// Longest list the scorer can build with Next-K.
    fn max_list_len(&self) -> usize {
        usize::MAX
    }
}

/// Decoder models: generative checkpoints condition on the generated prefix
/// through the separator layout, shifting checkpoints by appending it to the
/// history.
impl Scorer for ModelParams {
    fn num_items(&self) -> usize {
        self.config.num_items
    }

    fn score_states(&self, states: &[State<'_>]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let vocab = cfg.vocab();
        let encodings = states
            .iter()
            .map(|s| match cfg.layout {
                Layout::Generative => encode_state(s.history, s.generated, cfg.n_max, cfg.k, vocab),
                Layout::HistoryOnly => {
                    let mut items = s.history.to_vec();
                    items.extend_from_slice(s.generated);
                    encode_history_only(&items, cfg.n_max, cfg.k, vocab)
                }
            })
            .collect::<Result<Vec<SequenceEncoding>>>()?;
        let logits = next_item_logits(self, &encodings)?;
        Ok(logits.outer_iter().map(|r| r.to_vec()).collect())
    }

    fn max_list_len(&self) -> usize {
        match self.config.layout {
            Layout::Generative => self.config.k,
            Layout::HistoryOnly => usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    TopK,
    NextK,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TopK => "topk",
            Strategy::NextK => "nextk",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Strategy::TopK),
            "nextk" => Ok(Strategy::NextK),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (topk or nextk)"
            ))),
        }
    }
}

/// Descending score, ascending item id.
fn rank_cmp(scores: &[f64], a: ItemId, b: ItemId) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` best items not in `excluded`, best first.
pub fn top_k_items(scores: &[f64], k: usize, excluded: &[ItemId]) -> Result<Vec<ItemId>> {
    let mut blocked = vec![false; scores.len()];
    for &e in excluded {
        if e < blocked.len() {
            blocked[e] = true;
        }
    }
    let mut candidates: Vec<ItemId> = (0..scores.len()).filter(|&i| !blocked[i]).collect();
    if candidates.len() < k {
        return Err(Error::InvalidInput(format!(
            "cannot pick {k} items from {} candidates",
            candidates.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    Ok(candidates)
}

fn recommend_chunk(
    scorer: &dyn Scorer,
    histories: &[&[ItemId]],
    k: usize,
    strategy: Strategy,
    exclude_history: bool,
) -> Result<Vec<Vec<ItemId>>> {
    let excluded = |h: &[ItemId], g: &[ItemId]| -> Vec<ItemId> {
        let mut e = g.to_vec();
        if exclude_history {
            e.extend_from_slice(h);
        }
        e
    };
    match strategy {
        Strategy::TopK => {
            let states: Vec<State> = histories
                .iter()
                .map(|h| State {
                    history: h,
                    generated: &[],
                })
                .collect();
            let scores = scorer.score_states(&states)?;
            histories
                .iter()
                .zip(&scores)
                .map(|(h, s)| top_k_items(s, k, &excluded(h, &[])))
                .collect()
        }
        Strategy::NextK => {
            let mut lists: Vec<Vec<ItemId>> = vec![Vec::with_capacity(k); histories.len()];
            for _ in 0..k {
                let states: Vec<State> = histories
                    .iter()
                    .zip(&lists)
                    .map(|(h, g)| State {
                        history: h,
                        generated: g,
                    })
                    .collect();
                let scores = scorer.score_states(&states)?;
                for ((list, s), h) in lists.iter_mut().zip(&scores).zip(histories) {
                    let pick = top_k_items(s, 1, &excluded(h, list))?[0];
                    list.push(pick);
                }
            }
            Ok(lists)
        }
    }
}

/// Recommendation lists of length `k` for every history.
pub fn recommend(
    scorer: &dyn Scorer,
    histories: &[&[ItemId]],
    k: usize,
    strategy: Strategy,
    exclude_history: bool,
) -> Result<Vec<Vec<ItemId>>> {
    if k > scorer.num_items() {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds the catalog size {}",
            scorer.num_items()
        )));
    }
    if strategy == Strategy::NextK && k > scorer.max_list_len() {
        return Err(Error::InvalidInput(format!(
            "this model generates at most {} items, K = {k} requested",
            scorer.max_list_len()
        )));
    }
    let chunks: Vec<Vec<Vec<ItemId>>> = histories
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| recommend_chunk(scorer, chunk, k, strategy, exclude_history))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Score-and-rank: one scoring pass, the `k` highest-scored items.
pub fn recommend_topk(scorer: &dyn Scorer, history: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
    Ok(recommend(scorer, &[history], k, Strategy::TopK, false)?.remove(0))
}

/// Greedy autoregressive generation, masking items already placed.
pub fn recommend_nextk(scorer: &dyn Scorer, history: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
    Ok(recommend(scorer, &[history], k, Strategy::NextK, false)?.remove(0))
}

pub fn case_histories(cases: &[EvalCase]) -> Vec<&[ItemId]> {
    cases.iter().map(|c| c.history.as_slice()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub ndcg: f64,
    pub recall: f64,
    pub ild: Option<f64>,
    pub pcount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Standard error of the mean, `sigma / sqrt(n)`.
    pub se: f64,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self { mean: 0.0, se: 0.0 };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub num_users: usize,
    pub ndcg: Aggregate,
    pub recall: Aggregate,
    /// Absent when the catalog has no genre vectors.
    pub ild: Option<Aggregate>,
    pub pcount: Aggregate,
    #[serde(skip)]
    pub users: Vec<UserMetrics>,
}

/// Intra-list distance: mean cosine distance over unordered pairs, so a fully
/// diverse list scores 1. The diversity reward uses `1 / (K (K - 1))` over
/// the same pairs and therefore totals half of this value at `lambda = 1`.
pub fn ild(list: &[ItemId], catalog: &Catalog) -> f64 {
    let k = list.len();
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += catalog.cos_dist(list[i], list[j]);
        }
    }
    2.0 * sum / (k * (k - 1)) as f64
}

pub fn pcount(list: &[ItemId], catalog: &Catalog) -> f64 {
    list.iter().map(|&i| catalog.freq[i]).sum::<f64>() / list.len() as f64
}

/// NDCG@K, Recall@K, ILD@K and PCOUNT@K per user and on average. The single
/// held-out item makes the ideal DCG equal to 1.
pub fn metrics(
    lists: &[Vec<ItemId>],
    cases: &[EvalCase],
    catalog: &Catalog,
    k: usize,
) -> Result<MetricReport> {
    if lists.len() != cases.len() {
        return Err(Error::Shape(format!(
            "{} lists for {} users",
            lists.len(),
            cases.len()
        )));
    }
    let mut users = Vec::with_capacity(cases.len());
    for (list, case) in lists.iter().zip(cases) {
        if list.len() < k {
            return Err(Error::InvalidInput(format!(
                "list for user {} has {} items, K = {k}",
                case.user_id,
                list.len()
            )));
        }
        let list = &list[..k];
        if let Some(&bad) = list.iter().find(|&&i| i >= catalog.num_items) {
            return Err(Error::InvalidInput(format!("item {bad} outside catalog")));
        }
        let y = relevance_labels(case.holdout, list);
        users.push(UserMetrics {
            user_id: case.user_id.clone(),
            ndcg: dcg_at_k(&y),
            recall: f64::from(y.contains(&1)),
            ild: catalog.has_genres.then(|| ild(list, catalog)),
            pcount: pcount(list, catalog),
        });
    }
    Ok(MetricReport {
        k,
        num_users: users.len(),
        ndcg: Aggregate::of(users.iter().map(|u| u.ndcg)),
        recall: Aggregate::of(users.iter().map(|u| u.recall)),
        ild: catalog
            .has_genres
            .then(|| Aggregate::of(users.iter().map(|u| u.ild.unwrap_or(0.0)))),
        pcount: Aggregate::of(users.iter().map(|u| u.pcount)),
        users,
    })
}

impl MetricReport {
    /// Per-user CSV: `user_id,ndcg@K,recall@K,ild@K,pcount@K`.
    pub fn write_user_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        let k = self.k;
        w.write_record([
            "user_id".to_string(),
            format!("ndcg@{k}"),
            format!("recall@{k}"),
            format!("ild@{k}"),
            format!("pcount@{k}"),
        ])?;
        for u in &self.users {
            w.write_record([
                u.user_id.clone(),
                u.ndcg.to_string(),
                u.recall.to_string(),
                u.ild.map(|v| v.to_string()).unwrap_or_default(),
                u.pcount.to_string(),
            ])?;
        }
        w.flush().at(path)
    }

    pub fn write_summary_json(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut summary = serde_json::to_value(self)?;
        if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
            obj.extend(more);
        }
        fs::write(path, serde_json::to_vec_pretty(&summary)?).at(path)
    }
}

pub(crate) fn csv_io(e: csv::Error, path: &Path) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Csv(e)
    }
}

/// PCOUNT relative to the popularity baseline on the same users and cutoff.
pub fn npcount(report: &MetricReport, baseline: &MetricReport) -> Result<f64> {
    if report.k != baseline.k {
        return Err(Error::InvalidInput(format!(
            "reports use different cutoffs ({} vs {})",
            report.k, baseline.k
        )));
    }
    if report.num_users != baseline.num_users {
        return Err(Error::InvalidInput(format!(
            "reports cover different users ({} vs {})",
            report.num_users, baseline.num_users
        )));
    }
    if baseline.pcount.mean == 0.0 {
        return Err(Error::InvalidInput("baseline PCOUNT is zero".into()));
    }
    Ok(report.pcount.mean / baseline.pcount.mean)
}

/// The `k` most frequent training items, ties by ascending id.
pub fn popularity_baseline(catalog: &Catalog, k: usize) -> Result<Vec<ItemId>> {
    top_k_items(&catalog.freq, k, &[])
}

/// Metrics of the popularity list served to every user.
pub fn popularity_report(cases: &[EvalCase], catalog: &Catalog, k: usize) -> Result<MetricReport> {
    let list = popularity_baseline(catalog, k)?;
    metrics(&vec![list; cases.len()], cases, catalog, k)
}

/// Maximal marginal relevance: after the best-scored item, each pick
/// maximises `score(x) + lambda * min_s CosDist(x, s)` over the selected `s`.
pub fn mmr_rerank(scores: &[f64], catalog: &Catalog, k: usize, lambda: f64) -> Result<Vec<ItemId>> {
    let n = scores.len();
    if k > n {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds the {n} candidates"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be >= 0")));
    }
    let mut selected: Vec<ItemId> = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    // running min distance of every candidate to the selection
    let mut min_dist = vec![f64::INFINITY; n];
    for _ in 0..k {
        let mut best: Option<(ItemId, f64)> = None;
        for x in 0..n {
            if taken[x] {
                continue;
            }
            let bonus = if selected.is_empty() {
                0.0
            } else {
                lambda * min_dist[x]
            };
            let value = scores[x] + bonus;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((x, value));
            }
        }
        let (pick, _) = best.expect("k <= n leaves a candidate");
        taken[pick] = true;
        selected.push(pick);
        for x in 0..n {
            if !taken[x] {
                min_dist[x] = min_dist[x].min(catalog.cos_dist(x, pick));
            }
        }
    }
    Ok(selected)
}

/// Ranks by `score(x) - lambda * freq(x)`, ties by ascending id.
pub fn popularity_penalty_rerank(
    scores: &[f64],
    catalog: &Catalog,
    k: usize,
    lambda: f64,
) -> Result<Vec<ItemId>> {
    if scores.len() != catalog.num_items {
        return Err(Error::Shape(format!(
            "{} scores for a catalog of {}",
            scores.len(),
            catalog.num_items
        )));
    }
    let adjusted: Vec<f64> = scores
        .iter()
        .zip(&catalog.freq)
        .map(|(s, f)| s - lambda * f)
        .collect();
    top_k_items(&adjusted, k, &[])
}

/// Numerically stable log-softmax, used to turn model logits into base scores
/// for re-ranking.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Evaluates lists produced by `strategy` on `cases`.
pub fn evaluate(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    catalog: &Catalog,
    k: usize,
    strategy: Strategy,
    exclude_history: bool,
) -> Result<MetricReport> {
    let lists = recommend(scorer, &case_histories(cases), k, strategy, exclude_history)?;
    metrics(&lists, cases, catalog, k)
}

/// Mean NDCG@K of `strategy` lists on `cases`; needs no catalog.
pub fn mean_ndcg(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    k: usize,
    strategy: Strategy,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let lists = recommend(scorer, &case_histories(cases), k, strategy, false)?;
    let total: f64 = lists
        .iter()
        .zip(cases)
        .map(|(l, c)| dcg_at_k(&relevance_labels(c.holdout, l)))
        .sum();
    Ok(total / cases.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffRow {
    pub k: usize,
    pub strategy: Strategy,
    pub ndcg: f64,
    pub ndcg_se: f64,
}

/// NDCG@K for `K = 1..=k_max` under both strategies. Greedy lists are
/// prefix-consistent, so each strategy runs once at `k_max`.
pub fn cutoff_sweep(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    k_max: usize,
    exclude_history: bool,
) -> Result<Vec<CutoffRow>> {
    let histories = case_histories(cases);
    let mut rows = Vec::with_capacity(2 * k_max);
    for strategy in [Strategy::TopK, Strategy::NextK] {
        let lists = recommend(scorer, &histories, k_max, strategy, exclude_history)?;
        for k in 1..=k_max {
            let agg = Aggregate::of(
                lists
                    .iter()
                    .zip(cases)
                    .map(|(l, c)| dcg_at_k(&relevance_labels(c.holdout, &l[..k]))),
            );
            rows.push(CutoffRow {
                k,
                strategy,
                ndcg: agg.mean,
                ndcg_se: agg.se,
            });
        }
    }
    rows.sort_by_key(|r| (r.k, r.strategy == Strategy::NextK));
    Ok(rows)
}

pub fn write_cutoff_csv(rows: &[CutoffRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    w.write_record(["k", "strategy", "ndcg", "ndcg_se"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.strategy.as_str().to_string(),
            r.ndcg.to_string(),
            r.ndcg_se.to_string(),
        ])?;
    }
    w.flush().at(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reranker {
    Mmr,
    PopRerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub lambda: f64,
    pub ndcg: Aggregate,
    pub ild: Option<Aggregate>,
    pub pcount: Aggregate,
    pub npcount: f64,
}

impl TradeoffRow {
    fn from_report(lambda: f64, report: &MetricReport, baseline: &MetricReport) -> Result<Self> {
        Ok(Self {
            lambda,
            ndcg: report.ndcg,
            ild: report.ild,
            pcount: report.pcount,
            npcount: npcount(report, baseline)?,
        })
    }
}

pub const DEFAULT_ILD_LAMBDAS: [f64; 4] = [0.0, 0.2, 1.0, 3.0];
pub const DEFAULT_PCOUNT_LAMBDAS: [f64; 3] = [0.0, 3.0, 6.0];

/// Re-ranks the base scorer's first-step log-probabilities with MMR or the
/// popularity penalty for every `lambda`.
pub fn rerank_tradeoff(
    base: &dyn Scorer,
    cases: &[EvalCase],
    catalog: &Catalog,
    k: usize,
    lambdas: &[f64],
    reranker: Reranker,
) -> Result<Vec<TradeoffRow>> {
    if reranker == Reranker::Mmr {
        catalog.require_genres()?;
    }
    let baseline = popularity_report(cases, catalog, k)?;
    let histories = case_histories(cases);
    let base_scores: Vec<Vec<f64>> = histories
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let states: Vec<State> = chunk
                .iter()
                .map(|h| State {
                    history: h,
                    generated: &[],
                })
                .collect();
            base.score_states(&states)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .map(|s| log_softmax(&s))
        .collect();
    lambdas
        .iter()
        .map(|&lambda| {
            let lists = base_scores
                .par_iter()
                .map(|s| match reranker {
                    Reranker::Mmr => mmr_rerank(s, catalog, k, lambda),
                    Reranker::PopRerank => popularity_penalty_rerank(s, catalog, k, lambda),
                })
                .collect::<Result<Vec<_>>>()?;
            TradeoffRow::from_report(lambda, &metrics(&lists, cases, catalog, k)?, &baseline)
        })
        .collect()
}

/// One row per fine-tuned model, evaluated with Next-K.
pub fn model_tradeoff(
    models: &[(f64, &dyn Scorer)],
    cases: &[EvalCase],
    catalog: &Catalog,
    k: usize,
) -> Result<Vec<TradeoffRow>> {
    let baseline = popularity_report(cases, catalog, k)?;
    models
        .iter()
        .map(|&(lambda, model)| {
            let report = evaluate(model, cases, catalog, k, Strategy::NextK, false)?;
            TradeoffRow::from_report(lambda, &report, &baseline)
        })
        .collect()
}

pub fn write_tradeoff_csv(rows: &[TradeoffRow], k: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    w.write_record([
        "lambda".to_string(),
        format!("ndcg@{k}"),
        "ndcg_se".into(),
        format!("ild@{k}"),
        "ild_se".into(),
        format!("pcount@{k}"),
        "pcount_se".into(),
        format!("npcount@{k}"),
    ])?;
    for r in rows {
        let (ild, ild_se) = r
            .ild
            .map(|a| (a.mean.to_string(), a.se.to_string()))
            .unwrap_or_default();
        w.write_record([
            r.lambda.to_string(),
            r.ndcg.mean.to_string(),
            r.ndcg.se.to_string(),
            ild,
            ild_se,
            r.pcount.mean.to_string(),
            r.pcount.se.to_string(),
            r.npcount.to_string(),
        ])?;
    }
    w.flush().at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scores that ignore the generated prefix.
    struct Fixed(Vec<f64>);
    impl Scorer for Fixed {
        fn num_items(&self) -> usize {
            self.0.len()
        }
        fn score_states(&self, states: &[State<'_>]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); states.len()])
        }
    }

    fn two_cluster_catalog(n: usize) -> Catalog {
        let genres = (0..n)
            .flat_map(|i| if i < n / 2 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        Catalog {
            num_items: n,
            freq: vec![1.0 / n as f64; n],
            genre_dim: 2,
            genres,
            has_genres: true,
        }
    }

    fn case(holdout: ItemId) -> EvalCase {
        EvalCase {
            user_id: "u".into(),
            history: vec![0],
            holdout,
        }
    }

    #[test]
    fn topk_argsort_and_ties() {
        let s = Fixed(vec![0.2, 0.9, 0.5]);
        assert_eq!(recommend_topk(&s, &[0], 2).unwrap(), vec![1, 2]);
        assert_eq!(recommend_topk(&s, &[0], 1).unwrap(), vec![1]);
        let tie = Fixed(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(recommend_topk(&tie, &[0], 2).unwrap(), vec![4, 7]);
        let s10 = recommend_topk(&tie, &[0], 8).unwrap();
        assert_eq!(s10[..5], recommend_topk(&tie, &[0], 5).unwrap()[..]);
    }

    #[test]
    fn context_free_scorer_gives_equal_strategies() {
        let s = Fixed(vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.4]);
        for k in 1..=6 {
            assert_eq!(
                recommend_topk(&s, &[1], k).unwrap(),
                recommend_nextk(&s, &[1], k).unwrap()
            );
        }
    }

    #[test]
    fn exclude_history_flag() {
        let s = Fixed(vec![0.3, 0.1, 0.7, 0.2]);
        let l = recommend(&s, &[&[2]], 2, Strategy::NextK, true).unwrap();
        assert_eq!(l[0], vec![0, 3]);
    }

    #[test]
    fn model_strategies_agree_at_k1_and_lists_are_distinct() {
        let cfg = ModelConfig {
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ff_dim: 8,
            ..ModelConfig::desk(15, 6, 4)
        };
        let mut p = ModelParams::init(&cfg, 5).unwrap();
        p.policy_w.mapv_inplace(|v| v * 40.0);
        let histories: Vec<Vec<ItemId>> = (0..15)
            .map(|i| vec![i, (i * 7) % 15, (i + 3) % 15])
            .collect();
        let hs: Vec<&[ItemId]> = histories.iter().map(Vec::as_slice).collect();
        let top = recommend(&p, &hs, 1, Strategy::TopK, false).unwrap();
        let next = recommend(&p, &hs, 1, Strategy::NextK, false).unwrap();
        assert_eq!(top, next);
        for l in recommend(&p, &hs, 4, Strategy::NextK, false).unwrap() {
            let mut d = l.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 4);
        }
        assert!(recommend(&p, &hs, 5, Strategy::NextK, false).is_err());
    }

    #[test]
    fn metric_values() {
        let cat = two_cluster_catalog(6);
        let r = metrics(&[vec![4, 0, 1]], &[case(4)], &cat, 3).unwrap();
        assert_eq!((r.ndcg.mean, r.recall.mean), (1.0, 1.0));
        let r = metrics(&[vec![0, 1, 2]], &[case(2)], &cat, 3).unwrap();
        assert_eq!(r.ild.unwrap().mean, 0.0);
        assert_eq!(r.ndcg.mean, 0.5);
        let r = metrics(&[vec![0, 3]], &[case(5)], &cat, 2).unwrap();
        assert_eq!(
            (r.ild.unwrap().mean, r.recall.mean, r.ndcg.mean),
            (1.0, 0.0, 0.0)
        );
        assert!((r.pcount.mean - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn npcount_identity_half_and_mismatch() {
        let mut cat = two_cluster_catalog(4);
        cat.freq = vec![0.4, 0.3, 0.2, 0.1];
        let cases = vec![case(0), case(1)];
        let base = popularity_report(&cases, &cat, 2).unwrap();
        assert_eq!(npcount(&base, &base).unwrap(), 1.0);
        let half = metrics(&vec![vec![2, 3]; 2], &cases, &cat, 2).unwrap();
        // (0.2 + 0.1) / (0.4 + 0.3)
        assert!((npcount(&half, &base).unwrap() - 0.3 / 0.7).abs() < 1e-12);
        let k3 = popularity_report(&cases, &cat, 3).unwrap();
        assert!(npcount(&k3, &base).is_err());
    }

    #[test]
    fn popularity_baseline_order() {
        let mut cat = two_cluster_catalog(3);
        cat.freq = vec![0.5, 0.3, 0.2];
        assert_eq!(popularity_baseline(&cat, 2).unwrap(), vec![0, 1]);
        let mut all = popularity_baseline(&cat, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn mmr_toy_instance() {
        let cat = two_cluster_catalog(4);
        let scores = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(mmr_rerank(&scores, &cat, 2, 10.0).unwrap(), vec![0, 2]);
        assert_eq!(mmr_rerank(&scores, &cat, 3, 0.0).unwrap(), vec![0, 1, 2]);
        assert!(mmr_rerank(&scores, &cat, 5, 1.0).is_err());
    }

    #[test]
    fn pop_penalty_prefers_rare_item_on_tie() {
        let mut cat = two_cluster_catalog(2);
        cat.freq = vec![0.5, 0.1];
        assert_eq!(
            popularity_penalty_rerank(&[1.0, 1.0], &cat, 1, 0.01).unwrap(),
            vec![1]
        );
        assert_eq!(
            popularity_penalty_rerank(&[1.0, 1.0], &cat, 1, 0.0).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn cutoff_sweep_covers_every_k() {
        let s = Fixed(vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.4]);
        let cases = vec![case(2), case(5)];
        let rows = cutoff_sweep(&s, &cases, 4, false).unwrap();
        assert_eq!(rows.len(), 8);
        let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(rows[0].ndcg, rows[1].ndcg);
    }

    #[test]
    fn rerank_tradeoff_lambda_zero_is_plain_topk() {
        let s = Fixed(vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.4]);
        let cat = two_cluster_catalog(6);
        let cases = vec![case(2), case(5), case(4)];
        let rows = rerank_tradeoff(&s, &cases, &cat, 3, &[0.0], Reranker::Mmr).unwrap();
        let plain = evaluate(&s, &cases, &cat, 3, Strategy::TopK, false).unwrap();
        assert_eq!(rows[0].ndcg, plain.ndcg);
        assert_eq!(rows[0].ild, plain.ild);
    }

    /// Step-by-step greedy MMR written independently of `mmr_rerank`.
    fn mmr_oracle(scores: &[f64], cat: &Catalog, k: usize, lambda: f64) -> Vec<ItemId> {
        let mut sel: Vec<ItemId> = Vec::new();
        while sel.len() < k {
            let value = |x: ItemId| {
                let d = sel
                    .iter()
                    .map(|&s| cat.cos_dist(x, s))
                    .fold(f64::INFINITY, f64::min);
                scores[x] + if sel.is_empty() { 0.0 } else { lambda * d }
            };
            let pick = (0..scores.len())
                .filter(|x| !sel.contains(x))
                .fold(None, |best: Option<ItemId>, x| match best {
                    Some(b) if value(b) >= value(x) => Some(b),
                    _ => Some(x),
                })
                .unwrap();
            sel.push(pick);
        }
        sel
    }

    #[test]
    fn mmr_matches_greedy_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(2..12);
            let dim = 3;
            let genres: Vec<f64> = (0..n * dim)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect();
            let cat = Catalog {
                num_items: n,
                freq: vec![1.0 / n as f64; n],
                genre_dim: dim,
                genres,
                has_genres: true,
            };
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..5u8)) / 4.0)
                .collect();
            let k = rng.random_range(1..=n);
            let lambda = [0.0, 0.3, 1.0, 5.0][rng.random_range(0..4)];
            assert_eq!(
                mmr_rerank(&scores, &cat, k, lambda).unwrap(),
                mmr_oracle(&scores, &cat, k, lambda)
            );
        }
    }

    mod props {
        use super::{ild, pcount, top_k_items, Catalog, ItemId};
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn ild_and_pcount_ranges(list in Just((0..8).collect::<Vec<ItemId>>()).prop_shuffle(), k in 2usize..8, seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let genres: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let cat = Catalog { num_items: 8, freq: raw.iter().map(|v| v / total).collect(), genre_dim: 3, genres, has_genres: true };
                let l = &list[..k];
                let v = ild(l, &cat);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                let p = pcount(l, &cat);
                let max = cat.freq.iter().copied().fold(0.0, f64::max);
                prop_assert!(p >= 0.0 && p <= max + 1e-15);
            }

            #[test]
            fn topk_is_scale_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 3..12), c in 0.01f64..100.0) {
                let k = scores.len() / 2;
                let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
                prop_assert_eq!(top_k_items(&scores, k, &[]).unwrap(), top_k_items(&scaled, k, &[]).unwrap());
            }
        }
    }
}
