//! Seeded planted-Markov interaction generator for desk-scale experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    genres_path, interactions_path, write_genres, GenreTable, InteractionLog, UserSequence,
};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_genres: usize,
    /// Only first-order chains are generated.
    pub markov_order: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Strong successors per item, drawn inside the item's genre block.
    pub preferred_successors: usize,
    /// Probability mass on the preferred successors.
    pub p_preferred: f64,
    /// Remaining mass split between the item's own genre block and the rest.
    pub p_same_genre: f64,
    /// Zipf exponent of the item attractiveness weights (popularity skew).
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 50,
            num_genres: 2,
            markov_order: 1,
            seed: 7,
            min_len: 8,
            max_len: 24,
            preferred_successors: 3,
            p_preferred: 0.6,
            p_same_genre: 0.3,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_items < 10 {
            return bad("synthetic data needs at least 10 items");
        }
        if self.num_genres == 0 || self.num_genres > self.num_items {
            return bad("num_genres must be in 1..=num_items");
        }
        if self.markov_order != 1 {
            return bad("only markov_order = 1 is supported");
        }
        if self.num_users == 0 || self.min_len < 3 || self.max_len < self.min_len {
            return bad("need num_users > 0 and 3 <= min_len <= max_len");
        }
        let block = self.num_items / self.num_genres;
        if self.preferred_successors + 1 > block {
            return bad("preferred_successors must be smaller than the genre block size");
        }
        let p = [self.p_preferred, self.p_same_genre];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || p.iter().sum::<f64>() > 1.0 {
            return bad("p_preferred and p_same_genre must be probabilities summing to <= 1");
        }
        Ok(())
    }

    pub fn genre_of(&self, item: usize) -> usize {
        item * self.num_genres / self.num_items
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub genres: GenreTable,
    /// Row-stochastic item transition matrix the sequences were drawn from.
    pub transition: Vec<Vec<f64>>,
}

impl SyntheticData {
    /// Writes `interactions.csv` and `genres.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.log.write_csv(&interactions_path(dir))?;
        write_genres(&self.genres, &genres_path(dir))
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.num_items;

    // Attractiveness: Zipf weights over a random permutation of the items.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut weight = vec![0.0; n];
    for (rank, &item) in order.iter().enumerate() {
        weight[item] = 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);
    }

    let blocks: Vec<Vec<usize>> = (0..config.num_genres)
        .map(|g| (0..n).filter(|&i| config.genre_of(i) == g).collect())
        .collect();

    let mut transition = vec![vec![0.0; n]; n];
    for a in 0..n {
        let own = &blocks[config.genre_of(a)];
        let others: Vec<usize> = (0..n)
            .filter(|&j| config.genre_of(j) != config.genre_of(a))
            .collect();

        let mut candidates: Vec<usize> = own.iter().copied().filter(|&j| j != a).collect();
        let mut preferred = Vec::with_capacity(config.preferred_successors);
        for _ in 0..config.preferred_successors {
            let w: Vec<f64> = candidates.iter().map(|&j| weight[j]).collect();
            let pick = WeightedIndex::new(&w)
                .expect("positive weights")
                .sample(&mut rng);
            preferred.push(candidates.swap_remove(pick));
        }
        // geometric split of the preferred mass: 1/2, 1/4, ... renormalized
        let geo: Vec<f64> = (0..preferred.len())
            .map(|k| 0.5f64.powi(k as i32))
            .collect();
        let geo_total: f64 = geo.iter().sum();
        for (&j, g) in preferred.iter().zip(&geo) {
            transition[a][j] += config.p_preferred * g / geo_total;
        }

        let p_other = if others.is_empty() {
            0.0
        } else {
            1.0 - config.p_preferred - config.p_same_genre
        };
        let p_same = 1.0 - config.p_preferred - p_other;
        spread(&mut transition[a], &candidates, &weight, p_same);
        spread(&mut transition[a], &others, &weight, p_other);
        let total: f64 = transition[a].iter().sum();
        for p in &mut transition[a] {
            *p /= total;
        }
    }

    let start = WeightedIndex::new(&weight).expect("positive weights");
    let rows: Vec<WeightedIndex<f64>> = transition
        .iter()
        .map(|row| WeightedIndex::new(row).expect("stochastic row"))
        .collect();
    let mut users = Vec::with_capacity(config.num_users);
    for u in 0..config.num_users {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut items = Vec::with_capacity(len);
        let mut cur = start.sample(&mut rng);
        items.push(cur);
        while items.len() < len {
            cur = rows[cur].sample(&mut rng);
            items.push(cur);
        }
        users.push(UserSequence {
            user_id: u.to_string(),
            items,
        });
    }

    let genres = GenreTable {
        dim: config.num_genres,
        rows: (0..n)
            .map(|i| {
                let mut v = vec![0.0; config.num_genres];
                v[config.genre_of(i)] = 1.0;
                (i as u64, v)
            })
            .collect::<BTreeMap<_, _>>(),
    };
    Ok(SyntheticData {
        log: InteractionLog {
            users,
            item_labels: (0..n as u64).collect(),
        },
        genres,
        transition,
    })
}

fn spread(row: &mut [f64], items: &[usize], weight: &[f64], mass: f64) {
    if items.is_empty() || mass <= 0.0 {
        return;
    }
    let total: f64 = items.iter().map(|&j| weight[j]).sum();
    for &j in items {
        row[j] += mass * weight[j] / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_genres, load_interactions, InputFormat};

    fn small() -> SynthConfig {
        SynthConfig {
            num_users: 40,
            num_items: 50,
            num_genres: 2,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small())
            .unwrap()
            .write(a.path())
            .unwrap();
        generate_synthetic(&small())
            .unwrap()
            .write(b.path())
            .unwrap();
        for name in ["interactions.csv", "genres.csv"] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }

    #[test]
    fn genres_are_one_hot() {
        let data = generate_synthetic(&small()).unwrap();
        assert_eq!(data.genres.dim, 2);
        for v in data.genres.rows.values() {
            assert_eq!(v.iter().sum::<f64>(), 1.0);
            assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let data = generate_synthetic(&small()).unwrap();
        for row in &data.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small()).unwrap();
        data.write(dir.path()).unwrap();
        let log = load_interactions(
            &dir.path().join("interactions.csv"),
            InputFormat::CsvWithHeader,
        )
        .unwrap();
        let genres = load_genres(&dir.path().join("genres.csv")).unwrap();
        assert_eq!(genres, data.genres);
        for (a, b) in data.log.users.iter().zip(&log.users) {
            let la: Vec<u64> = a.items.iter().map(|&i| data.log.item_labels[i]).collect();
            let lb: Vec<u64> = b.items.iter().map(|&i| log.item_labels[i]).collect();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn rejects_tiny_catalog() {
        let cfg = SynthConfig {
            num_items: 9,
            ..small()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
