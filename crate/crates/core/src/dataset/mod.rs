//! Interaction logs, the item catalog and the leave-one-out split.

mod synth;

pub use synth::{generate_synthetic, SynthConfig, SyntheticData};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Dense item index in `[0, num_items)`.
pub type ItemId = usize;

pub const CSV_HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user_id,item_id[,timestamp]` with a header line.
    CsvWithHeader,
    /// Whitespace separated `user item` per line; row order is time order.
    SasrecPairs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: ItemId,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<ItemId>,
}

/// Per-user chronological sequences with densified item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: Vec<UserSequence>,
    /// Original integer label of each dense item id.
    pub item_labels: Vec<u64>,
}

impl InteractionLog {
    pub fn num_items(&self) -> usize {
        self.item_labels.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Flattened view, one row per interaction with its position as timestamp.
    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.users.iter().flat_map(|u| {
            u.items
                .iter()
                .enumerate()
                .map(move |(t, &item_id)| Interaction {
                    user_id: u.user_id.clone(),
                    item_id,
                    timestamp: t as i64,
                })
        })
    }

    pub fn label_index(&self) -> HashMap<u64, ItemId> {
        self.item_labels
            .iter()
            .enumerate()
            .map(|(id, &label)| (label, id))
            .collect()
    }

    /// Writes the log as `user_id,item_id,timestamp` using original item labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{}", CSV_HEADER.join(",")).expect("in-memory write");
        for user in &self.users {
            for (t, &item) in user.items.iter().enumerate() {
                writeln!(out, "{},{},{}", user.user_id, self.item_labels[item], t)
                    .expect("in-memory write");
            }
        }
        fs::write(path, out).at(path)
    }
}

struct RawRow {
    user: String,
    item: u64,
    timestamp: i64,
    order: usize,
}

/// Reads an interaction file, groups rows per user, orders them by timestamp
/// (ties by file order) and densifies item labels in ascending numeric order.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).at(path)?;
    let rows = match format {
        InputFormat::CsvWithHeader => parse_csv(&text)?,
        InputFormat::SasrecPairs => parse_pairs(&text)?,
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(group_rows(rows))
}

fn parse_csv(text: &str) -> Result<Vec<RawRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    if header.len() < 2 || header[..] != CSV_HEADER[..header.len().min(3)] {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let record = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Parse {
                line: record,
                message: format!("expected 2 or 3 fields, found {}", fields.len()),
            });
        }
        let item = parse_item(fields[1], record)?;
        let timestamp = match fields.get(2) {
            Some(ts) => ts.parse::<i64>().map_err(|_| Error::Parse {
                line: record,
                message: format!("timestamp `{ts}` is not an integer"),
            })?,
            None => idx as i64,
        };
        rows.push(RawRow {
            user: fields[0].to_string(),
            item,
            timestamp,
            order: idx,
        });
    }
    Ok(rows)
}

fn parse_pairs(text: &str) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected `user item`, found {} fields", fields.len()),
            });
        }
        rows.push(RawRow {
            user: fields[0].to_string(),
            item: parse_item(fields[1], idx + 1)?,
            timestamp: idx as i64,
            order: idx,
        });
    }
    Ok(rows)
}

fn parse_item(field: &str, line: usize) -> Result<u64> {
    field.parse::<u64>().map_err(|_| Error::Parse {
        line,
        message: format!("item id `{field}` is not a non-negative integer"),
    })
}

fn user_sort_key(id: &str) -> (u8, u64, &str) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, id),
        Err(_) => (1, 0, id),
    }
}

fn group_rows(rows: Vec<RawRow>) -> InteractionLog {
    let mut labels: Vec<u64> = rows.iter().map(|r| r.item).collect();
    labels.sort_unstable();
    labels.dedup();
    let dense: HashMap<u64, ItemId> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();

    let mut per_user: HashMap<String, Vec<RawRow>> = HashMap::new();
    for row in rows {
        per_user.entry(row.user.clone()).or_default().push(row);
    }
    let mut users: Vec<UserSequence> = per_user
        .into_iter()
        .map(|(user_id, mut rows)| {
            rows.sort_by_key(|r| (r.timestamp, r.order));
            UserSequence {
                user_id,
                items: rows.iter().map(|r| dense[&r.item]).collect(),
            }
        })
        .collect();
    users.sort_by(|a, b| user_sort_key(&a.user_id).cmp(&user_sort_key(&b.user_id)));
    InteractionLog {
        users,
        item_labels: labels,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user_id: String,
    pub train: Vec<ItemId>,
    pub validation: Option<ItemId>,
    pub test: ItemId,
}

impl SplitUser {
    /// History used to predict the test item: train prefix plus the
    /// validation item when this user was held out for validation.
    pub fn test_history(&self) -> Vec<ItemId> {
        let mut h = self.train.clone();
        h.extend(self.validation);
        h
    }
}

/// Leave-one-out split: last item is the test target, second-to-last the
/// validation target for a sampled subset of users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<SplitUser>,
    pub num_items: usize,
    pub validation_user_ids: Vec<String>,
    pub dropped_users: usize,
}

/// One evaluation case: a history and the single relevant held-out item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user_id: String,
    pub history: Vec<ItemId>,
    pub holdout: ItemId,
}

impl SplitDataset {
    pub fn train_sequences(&self) -> Vec<Vec<ItemId>> {
        self.users.iter().map(|u| u.train.clone()).collect()
    }

    pub fn test_cases(&self) -> Vec<EvalCase> {
        self.users
            .iter()
            .map(|u| EvalCase {
                user_id: u.user_id.clone(),
                history: u.test_history(),
                holdout: u.test,
            })
            .collect()
    }

    pub fn validation_cases(&self) -> Vec<EvalCase> {
        self.users
            .iter()
            .filter_map(|u| {
                u.validation.map(|v| EvalCase {
                    user_id: u.user_id.clone(),
                    history: u.train.clone(),
                    holdout: v,
                })
            })
            .collect()
    }
}

pub fn leave_one_out_split(
    log: &InteractionLog,
    n_validation_users: usize,
    seed: u64,
) -> Result<SplitDataset> {
    let kept: Vec<&UserSequence> = log.users.iter().filter(|u| u.items.len() >= 2).collect();
    let dropped = log.users.len() - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} users with fewer than 2 interactions");
    }
    if n_validation_users > kept.len() {
        return Err(Error::InvalidInput(format!(
            "{n_validation_users} validation users requested but only {} users are usable",
            kept.len()
        )));
    }
    let eligible: Vec<usize> = (0..kept.len())
        .filter(|&i| kept[i].items.len() >= 3)
        .collect();
    if n_validation_users > eligible.len() {
        return Err(Error::InvalidInput(format!(
            "{n_validation_users} validation users requested but only {} users have 3+ interactions",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; kept.len()];
    for pick in index::sample(&mut rng, eligible.len(), n_validation_users) {
        chosen[eligible[pick]] = true;
    }

    let mut users = Vec::with_capacity(kept.len());
    let mut validation_user_ids = Vec::with_capacity(n_validation_users);
    for (u, seq) in kept.iter().enumerate() {
        let n = seq.items.len();
        let test = seq.items[n - 1];
        let (train, validation) = if chosen[u] {
            validation_user_ids.push(seq.user_id.clone());
            (seq.items[..n - 2].to_vec(), Some(seq.items[n - 2]))
        } else {
            (seq.items[..n - 1].to_vec(), None)
        };
        users.push(SplitUser {
            user_id: seq.user_id.clone(),
            train,
            validation,
            test,
        });
    }
    Ok(SplitDataset {
        users,
        num_items: log.num_items(),
        validation_user_ids,
        dropped_users: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub num_items: usize,
    /// Share of training interactions per item; sums to 1.
    pub freq: Vec<f64>,
    pub genre_dim: usize,
    /// Row-major `num_items x genre_dim`.
    pub genres: Vec<f64>,
    /// False when no genre file was supplied; diversity objectives are rejected.
    pub has_genres: bool,
}

impl Catalog {
    pub fn genre(&self, item: ItemId) -> &[f64] {
        &self.genres[item * self.genre_dim..(item + 1) * self.genre_dim]
    }

    /// Cosine distance between genre vectors; 1 if either vector is all-zero.
    pub fn cos_dist(&self, a: ItemId, b: ItemId) -> f64 {
        cosine_distance(self.genre(a), self.genre(b))
    }

    pub fn require_genres(&self) -> Result<()> {
        if self.has_genres {
            Ok(())
        } else {
            Err(Error::Config(
                "diversity objectives need item genre vectors, but no genre file was given".into(),
            ))
        }
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Genre vectors keyed by original item label.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreTable {
    pub dim: usize,
    pub rows: BTreeMap<u64, Vec<f64>>,
}

pub fn load_genres(path: &Path) -> Result<GenreTable> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"item_id") || cols.len() < 2 {
        return Err(Error::Parse {
            line: 0,
            message: "expected header `item_id,genre_0,...`".into(),
        });
    }
    let dim = cols.len() - 1;
    let mut rows = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let record = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: record,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        let item = parse_item(fields[0], record)?;
        let vec = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| Error::Parse {
                        line: record,
                        message: format!("genre entry `{f}` is not a non-negative number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.insert(item, vec);
    }
    Ok(GenreTable { dim, rows })
}

pub fn write_genres(table: &GenreTable, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header: Vec<String> = std::iter::once("item_id".to_string())
        .chain((0..table.dim).map(|g| format!("genre_{g}")))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("in-memory write");
    for (item, vec) in &table.rows {
        let vals: Vec<String> = vec.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{item},{}", vals.join(",")).expect("in-memory write");
    }
    fs::write(path, out).at(path)
}

/// Builds item frequencies from the training sequences only and attaches
/// genre vectors (translated from original labels to dense ids).
pub fn build_catalog(
    train_sequences: &[Vec<ItemId>],
    item_labels: &[u64],
    genres: Option<&GenreTable>,
) -> Result<Catalog> {
    let num_items = item_labels.len();
    let mut counts = vec![0u64; num_items];
    for seq in train_sequences {
        for &item in seq {
            if item >= num_items {
                return Err(Error::InvalidInput(format!(
                    "item {item} outside catalog of {num_items}"
                )));
            }
            counts[item] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let freq = counts.iter().map(|&c| c as f64 / total as f64).collect();

    let (genre_dim, genre_values, has_genres) = match genres {
        None => (1, vec![0.0; num_items], false),
        Some(table) => {
            let index: HashMap<u64, ItemId> = item_labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (l, i))
                .collect();
            let mut values = vec![0.0; num_items * table.dim];
            let mut covered = vec![false; num_items];
            for (label, vec) in &table.rows {
                let &item = index.get(label).ok_or_else(|| {
                    Error::InvalidInput(format!("genre file references unknown item {label}"))
                })?;
                values[item * table.dim..(item + 1) * table.dim].copy_from_slice(vec);
                covered[item] = true;
            }
            if let Some(missing) = covered.iter().position(|c| !c) {
                return Err(Error::InvalidInput(format!(
                    "genre file has no row for item {}",
                    item_labels[missing]
                )));
            }
            (table.dim, values, true)
        }
    };
    Ok(Catalog {
        num_items,
        freq,
        genre_dim,
        genres: genre_values,
        has_genres,
    })
}

/// Paths of a dataset directory as written by `generate_synthetic` / the CLI.
pub fn interactions_path(dir: &Path) -> std::path::PathBuf {
    dir.join("interactions.csv")
}

pub fn genres_path(dir: &Path) -> std::path::PathBuf {
    dir.join("genres.csv")
}

/// A dataset directory loaded, split and summarised.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub log: InteractionLog,
    pub split: SplitDataset,
    pub catalog: Catalog,
}

/// Loads `interactions.csv` (and `genres.csv` when present) from `dir`, splits
/// it leave-one-out and builds the catalog from the training prefixes.
pub fn prepare_dataset(
    dir: &Path,
    n_validation_users: usize,
    split_seed: u64,
) -> Result<PreparedData> {
    let log = load_interactions(&interactions_path(dir), InputFormat::CsvWithHeader)?;
    let genre_file = genres_path(dir);
    let genres = if genre_file.exists() {
        Some(load_genres(&genre_file)?)
    } else {
        None
    };
    let split = leave_one_out_split(&log, n_validation_users, split_seed)?;
    let catalog = build_catalog(&split.train_sequences(), &log.item_labels, genres.as_ref())?;
    Ok(PreparedData {
        log,
        split,
        catalog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn log_of(seqs: &[&[ItemId]]) -> InteractionLog {
        let n = seqs
            .iter()
            .flat_map(|s| s.iter())
            .max()
            .map_or(0, |m| m + 1);
        InteractionLog {
            users: seqs
                .iter()
                .enumerate()
                .map(|(u, s)| UserSequence {
                    user_id: u.to_string(),
                    items: s.to_vec(),
                })
                .collect(),
            item_labels: (0..n as u64).collect(),
        }
    }

    #[test]
    fn densifies_items_and_groups_users() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "i.csv",
            "user_id,item_id,timestamp\nu1,10,1\nu1,20,2\nu2,10,1\n",
        );
        let log = load_interactions(&p, InputFormat::CsvWithHeader).unwrap();
        assert_eq!(log.users.len(), 2);
        assert_eq!(log.item_labels, vec![10, 20]);
        assert_eq!(log.users[0].items, vec![0, 1]);
        assert_eq!(log.users[1].items, vec![0]);
    }

    #[test]
    fn sorts_by_timestamp_with_file_order_ties() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "i.csv",
            "user_id,item_id,timestamp\nu,3,5\nu,1,2\nu,2,5\n",
        );
        let log = load_interactions(&p, InputFormat::CsvWithHeader).unwrap();
        // labels 1,2,3 -> 0,1,2; order by ts: 1 (ts2), 3 (ts5, first), 2 (ts5)
        assert_eq!(log.users[0].items, vec![0, 2, 1]);
    }

    #[test]
    fn two_column_csv_uses_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "i.csv", "user_id,item_id\nu,5\nu,4\n");
        let log = load_interactions(&p, InputFormat::CsvWithHeader).unwrap();
        assert_eq!(log.users[0].items, vec![1, 0]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "i.csv", "user_id,item_id\nu1,notanitem\n");
        match load_interactions(&p, InputFormat::CsvWithHeader) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "i.txt", "");
        assert!(matches!(
            load_interactions(&p, InputFormat::SasrecPairs),
            Err(Error::EmptyDataset)
        ));
        let p = write(&dir, "i.csv", "user_id,item_id,timestamp\n");
        assert!(matches!(
            load_interactions(&p, InputFormat::CsvWithHeader),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn sasrec_pairs_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "i.txt", "1 7\n1 3\n2 7\n");
        let log = load_interactions(&p, InputFormat::SasrecPairs).unwrap();
        assert_eq!(log.users[0].items, vec![1, 0]);
        assert_eq!(log.num_interactions(), 3);
        let bad = write(&dir, "b.txt", "1 7\n1\n");
        assert!(matches!(
            load_interactions(&bad, InputFormat::SasrecPairs),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_without_validation() {
        let split = leave_one_out_split(&log_of(&[&[0, 1, 2]]), 0, 1).unwrap();
        assert_eq!(split.users[0].train, vec![0, 1]);
        assert_eq!(split.users[0].test, 2);
        assert_eq!(split.users[0].validation, None);
    }

    #[test]
    fn split_with_validation() {
        let split = leave_one_out_split(&log_of(&[&[0, 1, 2, 3]]), 1, 1).unwrap();
        let u = &split.users[0];
        assert_eq!(
            (u.train.clone(), u.validation, u.test),
            (vec![0, 1], Some(2), 3)
        );
        assert_eq!(split.validation_user_ids, vec!["0".to_string()]);
        assert_eq!(split.validation_cases()[0].history, vec![0, 1]);
        assert_eq!(split.test_cases()[0].history, vec![0, 1, 2]);
    }

    #[test]
    fn short_users_dropped_and_oversized_validation_rejected() {
        let log = log_of(&[&[0], &[0, 1], &[1, 0, 1]]);
        let split = leave_one_out_split(&log, 1, 3).unwrap();
        assert_eq!(split.users.len(), 2);
        assert_eq!(split.dropped_users, 1);
        assert_eq!(split.validation_user_ids, vec!["2".to_string()]);
        assert!(leave_one_out_split(&log, 3, 3).is_err());
        // only one user has 3+ interactions
        assert!(leave_one_out_split(&log, 2, 3).is_err());
    }

    #[test]
    fn catalog_frequencies() {
        let cat = build_catalog(&[vec![0, 1], vec![0]], &[0, 1], None).unwrap();
        assert!((cat.freq[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((cat.freq[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(!cat.has_genres);
        assert!(cat.require_genres().is_err());
    }

    #[test]
    fn genre_file_must_match_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "g.csv", "item_id,genre_0,genre_1\n10,1,0\n20,0,1\n");
        let table = load_genres(&p).unwrap();
        let cat = build_catalog(&[vec![0, 1]], &[10, 20], Some(&table)).unwrap();
        assert_eq!(cat.genre_dim, 2);
        assert_eq!(cat.genre(1), &[0.0, 1.0]);
        assert_eq!(cat.cos_dist(0, 1), 1.0);
        assert!(build_catalog(&[vec![0]], &[10], Some(&table)).is_err());
        assert!(build_catalog(&[vec![0, 1, 2]], &[10, 20, 30], Some(&table)).is_err());
    }

    #[test]
    fn zero_genre_vector_distance_is_one() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert!(cosine_distance(&[1.0, 1.0], &[2.0, 2.0]).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn split_partitions_each_sequence(
            seqs in prop::collection::vec(prop::collection::vec(0usize..9, 2..12), 1..20),
            seed in any::<u64>(),
        ) {
            let refs: Vec<&[ItemId]> = seqs.iter().map(|s| s.as_slice()).collect();
            let log = log_of(&refs);
            let eligible = seqs.iter().filter(|s| s.len() >= 3).count();
            let split = leave_one_out_split(&log, eligible / 2, seed).unwrap();
            prop_assert_eq!(split.validation_user_ids.len(), eligible / 2);
            for (u, seq) in split.users.iter().zip(&seqs) {
                let mut rebuilt = u.train.clone();
                rebuilt.extend(u.validation);
                rebuilt.push(u.test);
                prop_assert_eq!(&rebuilt, seq);
            }
            let again = leave_one_out_split(&log, eligible / 2, seed).unwrap();
            prop_assert_eq!(again, split);
        }

        #[test]
        fn freq_ignores_user_order(
            mut seqs in prop::collection::vec(prop::collection::vec(0usize..6, 1..8), 1..10),
        ) {
            let labels: Vec<u64> = (0..6).collect();
            let a = build_catalog(&seqs, &labels, None).unwrap();
            seqs.reverse();
            let b = build_catalog(&seqs, &labels, None).unwrap();
            prop_assert_eq!(&a.freq, &b.freq);
            prop_assert!((a.freq.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn csv_round_trip(
            seqs in prop::collection::vec(prop::collection::vec(0usize..30, 1..10), 1..10),
        ) {
            let refs: Vec<&[ItemId]> = seqs.iter().map(|s| s.as_slice()).collect();
            let mut log = log_of(&refs);
            // relabel sparsely so densification is exercised
            log.item_labels = log.item_labels.iter().map(|l| l * 7 + 3).collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("i.csv");
            log.write_csv(&p).unwrap();
            let back = load_interactions(&p, InputFormat::CsvWithHeader).unwrap();
            for (a, b) in log.users.iter().zip(&back.users) {
                let la: Vec<u64> = a.items.iter().map(|&i| log.item_labels[i]).collect();
                let lb: Vec<u64> = b.items.iter().map(|&i| back.item_labels[i]).collect();
                prop_assert_eq!(la, lb);
            }
        }
    }
}
