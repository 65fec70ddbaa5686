//! List-level effectiveness measures and their per-position decompositions.
//!
//! Every objective is a sum over list positions of an immediate reward, so
//! the reward of an episode is known step by step while the list is being
//! generated.

use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, ItemId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `sum_i y_i / log2(i + 1)`.
    Ndcg,
    /// NDCG plus `lambda / (K (K - 1))` times the genre distance of each item
    /// to the items placed before it.
    NdcgPlusDiversity,
    /// NDCG minus `lambda` times the training frequency of each item.
    NdcgMinusPcount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub lambda: f64,
    pub k: usize,
    /// Pay the whole list reward at the last position instead of per step.
    #[serde(default)]
    pub delayed: bool,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, lambda: f64, k: usize) -> Self {
        Self {
            kind,
            lambda,
            k,
            delayed: false,
        }
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("reward K must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.kind == RewardKind::NdcgPlusDiversity {
            if self.k < 2 {
                return Err(Error::Config("the diversity reward needs K >= 2".into()));
            }
            catalog.require_genres()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    pub r: Vec<f64>,
    pub total: f64,
}

impl StepRewards {
    fn from_steps(r: Vec<f64>) -> Self {
        let total = r.iter().sum();
        Self { r, total }
    }
}

/// `y_i = 1` iff `g_i` is the held-out item.
pub fn relevance_labels(held_out: ItemId, g: &[ItemId]) -> Vec<u8> {
    g.iter().map(|&x| u8::from(x == held_out)).collect()
}

/// `y_i / log2(i + 1)` for 1-based position `i`.
pub fn ndcg_immediate(y: &[u8], i: usize) -> f64 {
    f64::from(y[i - 1]) / ((i + 1) as f64).log2()
}

pub fn dcg_at_k(y: &[u8]) -> f64 {
    (1..=y.len()).map(|i| ndcg_immediate(y, i)).sum()
}

/// Genre-distance term of position `i` (1-based) before weighting by lambda.
fn diversity_term(g: &[ItemId], i: usize, catalog: &Catalog, k: usize) -> f64 {
    let gi = g[i - 1];
    let sum: f64 = g[..i - 1].iter().map(|&gj| catalog.cos_dist(gi, gj)).sum();
    sum / (k * (k - 1)) as f64
}

pub fn diversity_immediate(
    g: &[ItemId],
    i: usize,
    catalog: &Catalog,
    k: usize,
    lambda: f64,
    y: &[u8],
) -> f64 {
    ndcg_immediate(y, i) + lambda * diversity_term(g, i, catalog, k)
}

pub fn pcount_immediate(g: &[ItemId], i: usize, catalog: &Catalog, lambda: f64, y: &[u8]) -> f64 {
    ndcg_immediate(y, i) - lambda * catalog.freq[g[i - 1]]
}

fn check_list(g: &[ItemId], k: usize, catalog: &Catalog) -> Result<()> {
    if g.len() != k {
        return Err(Error::InvalidInput(format!(
            "list has {} items, expected {k}",
            g.len()
        )));
    }
    if let Some(&x) = g.iter().find(|&&x| x >= catalog.num_items) {
        return Err(Error::InvalidInput(format!("item {x} outside catalog")));
    }
    Ok(())
}

/// Immediate rewards for a complete list under `spec`.
pub fn episode_rewards(
    spec: &RewardSpec,
    held_out: ItemId,
    g: &[ItemId],
    catalog: &Catalog,
) -> Result<StepRewards> {
    check_list(g, spec.k, catalog)?;
    let y = relevance_labels(held_out, g);
    let r: Vec<f64> = (1..=spec.k)
        .map(|i| match spec.kind {
            RewardKind::Ndcg => ndcg_immediate(&y, i),
            RewardKind::NdcgPlusDiversity => {
                diversity_immediate(g, i, catalog, spec.k, spec.lambda, &y)
            }
            RewardKind::NdcgMinusPcount => pcount_immediate(g, i, catalog, spec.lambda, &y),
        })
        .collect();
    if spec.delayed {
        let total: f64 = r.iter().sum();
        let mut delayed = vec![0.0; spec.k];
        delayed[spec.k - 1] = total;
        return Ok(StepRewards { r: delayed, total });
    }
    Ok(StepRewards::from_steps(r))
}

/// The list metric computed directly, without the per-position split.
pub fn list_metric(
    spec: &RewardSpec,
    held_out: ItemId,
    g: &[ItemId],
    catalog: &Catalog,
) -> Result<f64> {
    check_list(g, spec.k, catalog)?;
    let dcg = dcg_at_k(&relevance_labels(held_out, g));
    Ok(match spec.kind {
        RewardKind::Ndcg => dcg,
        RewardKind::NdcgPlusDiversity => dcg + spec.lambda * secondary_term(spec, g, catalog),
        RewardKind::NdcgMinusPcount => dcg - spec.lambda * secondary_term(spec, g, catalog),
    })
}

/// The unweighted secondary component: pairwise distance sum over `K (K - 1)`
/// for diversity, frequency sum for popularity, 0 for pure NDCG.
pub fn secondary_term(spec: &RewardSpec, g: &[ItemId], catalog: &Catalog) -> f64 {
    match spec.kind {
        RewardKind::Ndcg => 0.0,
        RewardKind::NdcgPlusDiversity => {
            let mut pairs = 0.0;
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    pairs += catalog.cos_dist(g[i], g[j]);
                }
            }
            pairs / (spec.k * (spec.k - 1)) as f64
        }
        RewardKind::NdcgMinusPcount => g.iter().map(|&x| catalog.freq[x]).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog() -> Catalog {
        // items 0..6; genres: 0-2 in genre A, 3-5 in genre B
        let genres = (0..6)
            .flat_map(|i| if i < 3 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        Catalog {
            num_items: 6,
            freq: vec![0.3, 0.2, 0.1, 0.2, 0.1, 0.1],
            genre_dim: 2,
            genres,
            has_genres: true,
        }
    }

    #[test]
    fn labels() {
        assert_eq!(relevance_labels(7, &[3, 7, 1]), vec![0, 1, 0]);
        assert_eq!(relevance_labels(9, &[3, 7, 1]), vec![0, 0, 0]);
        assert_eq!(relevance_labels(3, &[3, 7, 1]), vec![1, 0, 0]);
    }

    #[test]
    fn ndcg_steps() {
        assert_eq!(ndcg_immediate(&[1, 0, 0], 1), 1.0);
        assert_eq!(ndcg_immediate(&[0, 0, 1], 3), 0.5);
        assert_eq!(ndcg_immediate(&[0, 0, 1], 2), 0.0);
    }

    #[test]
    fn diversity_steps() {
        let cat = catalog();
        let g = [0, 3, 1, 2, 4, 5, 0, 1, 2, 3];
        let y = relevance_labels(99, &g);
        assert_eq!(diversity_immediate(&g, 1, &cat, 10, 1.0, &y), 0.0);
        let r = diversity_immediate(&g, 2, &cat, 10, 1.0, &y);
        assert!((r - 1.0 / 90.0).abs() < 1e-15, "{r}");
        // item 2 vs items 0,3,1: distances 0,1,0
        assert!((diversity_immediate(&g, 4, &cat, 10, 1.0, &y) - 1.0 / 90.0).abs() < 1e-15);
        let same = [0, 1];
        assert_eq!(diversity_immediate(&same, 2, &cat, 2, 1.0, &[0, 0]), 0.0);
    }

    #[test]
    fn pcount_steps() {
        let cat = catalog();
        let g = [0, 2];
        assert_eq!(pcount_immediate(&g, 1, &cat, 0.0, &[1, 0]), 1.0);
        assert!((pcount_immediate(&g, 2, &cat, 3.0, &[0, 0]) + 0.3).abs() < 1e-15);
        let mut zero = cat.clone();
        zero.freq[2] = 0.0;
        assert_eq!(pcount_immediate(&g, 2, &zero, 3.0, &[0, 0]), 0.0);
    }

    #[test]
    fn delayed_mode_keeps_total() {
        let cat = catalog();
        let mut spec = RewardSpec::new(RewardKind::NdcgMinusPcount, 2.0, 3);
        let eager = episode_rewards(&spec, 1, &[0, 1, 5], &cat).unwrap();
        spec.delayed = true;
        let delayed = episode_rewards(&spec, 1, &[0, 1, 5], &cat).unwrap();
        assert_eq!(delayed.r[..2], [0.0, 0.0]);
        assert_eq!(delayed.total, eager.total);
        assert_eq!(delayed.r[2], eager.total);
    }

    #[test]
    fn diversity_without_genres_rejected() {
        let mut cat = catalog();
        cat.has_genres = false;
        assert!(RewardSpec::new(RewardKind::NdcgPlusDiversity, 1.0, 10)
            .validate(&cat)
            .is_err());
        assert!(RewardSpec::new(RewardKind::NdcgMinusPcount, 1.0, 10)
            .validate(&cat)
            .is_ok());
    }

    fn arb_list() -> impl Strategy<Value = Vec<ItemId>> {
        Just((0..6).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(|v| v[..4].to_vec())
    }

    proptest! {
        #[test]
        fn steps_sum_to_list_metric(g in arb_list(), held in 0usize..8, lambda in 0.0f64..5.0, kind in 0usize..3) {
            let kind = [RewardKind::Ndcg, RewardKind::NdcgPlusDiversity, RewardKind::NdcgMinusPcount][kind];
            let spec = RewardSpec::new(kind, lambda, 4);
            let cat = catalog();
            let steps = episode_rewards(&spec, held, &g, &cat).unwrap();
            prop_assert!((steps.total - list_metric(&spec, held, &g, &cat).unwrap()).abs() < 1e-12);
            prop_assert_eq!(steps.total, steps.r.iter().sum::<f64>());
        }

        #[test]
        fn earlier_hit_never_lowers_ndcg(g in arb_list(), pos in 1usize..4) {
            let spec = RewardSpec::new(RewardKind::Ndcg, 0.0, 4);
            let cat = catalog();
            let held = g[pos];
            let mut moved = g.clone();
            moved.swap(pos, pos - 1);
            let later = episode_rewards(&spec, held, &g, &cat).unwrap().total;
            let earlier = episode_rewards(&spec, held, &moved, &cat).unwrap().total;
            prop_assert!(earlier >= later);
        }

        #[test]
        fn total_is_affine_in_lambda(g in arb_list(), held in 0usize..8, lambda in 0.0f64..5.0, div in any::<bool>()) {
            let kind = if div { RewardKind::NdcgPlusDiversity } else { RewardKind::NdcgMinusPcount };
            let cat = catalog();
            let at = |l: f64| episode_rewards(&RewardSpec::new(kind, l, 4), held, &g, &cat).unwrap().total;
            let slope = at(1.0) - at(0.0);
            prop_assert!((at(lambda) - (at(0.0) + lambda * slope)).abs() < 1e-12);
        }
    }
}
