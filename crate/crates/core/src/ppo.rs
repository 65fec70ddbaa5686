//! Stage two: PPO with generalised advantage estimation on list-generation
//! episodes. One episode places K items; after each placement the reward
//! decomposition pays the marginal change of the list metric.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::nnet::{
    backward, episode_values, masked_log_softmax, next_item_logits, optimizer_step, AdamState,
    LossSpec, ModelParams,
};
use crate::reward::{episode_rewards, RewardSpec, StepRewards};
use crate::seqcodec::{encode_state, Layout, SequenceEncoding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub history: Vec<ItemId>,
    pub held_out: ItemId,
    pub generated: Vec<ItemId>,
    /// `log pi_old(g_i | h, g_<i)` under the masked sampling distribution.
    pub old_logprobs: Vec<f64>,
    pub rewards: StepRewards,
    /// `V(h, g_<i)` before each action.
    pub values: Vec<f64>,
    pub policy_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub total_steps: usize,
    /// Global gradient-norm clip applied to each model; `None` disables it.
    pub max_grad_norm: Option<f64>,
    /// Normalise advantages to mean 0, std 1 over each batch.
    pub normalize_advantages: bool,
    /// Consecutive skipped minibatches (non-finite loss) before aborting.
    pub max_consecutive_failures: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            epochs_per_batch: 2,
            minibatch_size: 32,
            lr_policy: 1e-4,
            lr_value: 1e-4,
            total_steps: 64_000,
            max_grad_norm: Some(1.0),
            normalize_advantages: true,
            max_consecutive_failures: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} must lie in (0, 1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::Config(format!(
                "lambda_gae {} must lie in [0, 1]",
                self.lambda_gae
            )));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config(format!(
                "clip epsilon {} must be positive",
                self.clip_eps
            )));
        }
        if self.epochs_per_batch == 0 || self.minibatch_size == 0 {
            return Err(Error::Config(
                "epochs_per_batch and minibatch_size must be positive".into(),
            ));
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One fine-tuning episode source: a training prefix and the item after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCase {
    pub history: Vec<ItemId>,
    pub held_out: ItemId,
}

/// Fine-tuning episodes hold out the last item of each training prefix, so
/// test (and validation) targets never reach the reward.
pub fn finetune_cases(split: &SplitDataset) -> Vec<EpisodeCase> {
    split
        .users
        .iter()
        .filter(|u| u.train.len() >= 2)
        .map(|u| EpisodeCase {
            history: u.train[..u.train.len() - 1].to_vec(),
            held_out: u.train[u.train.len() - 1],
        })
        .collect()
}

fn check_models(policy: &ModelParams, value: &ModelParams, spec: &RewardSpec) -> Result<()> {
    let (p, v) = (&policy.config, &value.config);
    if p.layout != Layout::Generative || v.layout != Layout::Generative {
        return Err(Error::Config(
            "policy and value models must use the generative layout".into(),
        ));
    }
    if p.k != spec.k || v.k != spec.k || p.n_max != v.n_max || p.num_items != v.num_items {
        return Err(Error::Config(format!(
            "policy (K {}, n_max {}), value (K {}, n_max {}) and reward (K {}) disagree",
            p.k, p.n_max, v.k, v.n_max, spec.k
        )));
    }
    if p.num_items < spec.k {
        return Err(Error::InvalidInput(format!(
            "cannot sample {} distinct items from a catalog of {}",
            spec.k, p.num_items
        )));
    }
    Ok(())
}

/// Draws an index from `exp(logp)` by inverse CDF; masked entries are -inf.
fn sample_index(logp: &[f64], rng: &mut ChaCha8Rng) -> ItemId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass
    last.expect("at least one unmasked item")
}

/// Samples one episode per case, all advancing one step at a time so each
/// step is a single batched forward pass. Values come from one full pass of
/// the value model over the finished lists.
pub fn sample_trajectories(
    policy: &ModelParams,
    value: &ModelParams,
    spec: &RewardSpec,
    catalog: &Catalog,
    cases: &[&EpisodeCase],
    policy_version: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    check_models(policy, value, spec)?;
    let cfg = &policy.config;
    let vocab = cfg.vocab();
    let k = cfg.k;
    let mut generated: Vec<Vec<ItemId>> = vec![Vec::with_capacity(k); cases.len()];
    let mut logprobs: Vec<Vec<f64>> = vec![Vec::with_capacity(k); cases.len()];
    for _ in 0..k {
        let encodings = cases
            .iter()
            .zip(&generated)
            .map(|(c, g)| encode_state(&c.history, g, cfg.n_max, k, vocab))
            .collect::<Result<Vec<_>>>()?;
        let logits = next_item_logits(policy, &encodings)?;
        for (b, g) in generated.iter_mut().enumerate() {
            let logp = masked_log_softmax(logits.row(b), g);
            let pick = sample_index(logp.as_slice().expect("contiguous"), rng);
            logprobs[b].push(logp[pick]);
            g.push(pick);
        }
    }
    let full = full_encodings(
        cases.iter().map(|c| c.history.as_slice()),
        &generated,
        policy,
    )?;
    let values = episode_values(value, &full)?;
    cases
        .iter()
        .zip(generated)
        .zip(logprobs)
        .zip(values)
        .map(|(((case, g), lp), v)| {
            Ok(Trajectory {
                rewards: episode_rewards(spec, case.held_out, &g, catalog)?,
                history: case.history.clone(),
                held_out: case.held_out,
                generated: g,
                old_logprobs: lp,
                values: v,
                policy_version,
            })
        })
        .collect()
}

pub fn sample_trajectory(
    policy: &ModelParams,
    value: &ModelParams,
    spec: &RewardSpec,
    catalog: &Catalog,
    case: &EpisodeCase,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    Ok(sample_trajectories(policy, value, spec, catalog, &[case], 0, rng)?.remove(0))
}

fn full_encodings<'a>(
    histories: impl Iterator<Item = &'a [ItemId]>,
    generated: &[Vec<ItemId>],
    model: &ModelParams,
) -> Result<Vec<SequenceEncoding>> {
    let cfg = &model.config;
    histories
        .zip(generated)
        .map(|(h, g)| encode_state(h, g, cfg.n_max, cfg.k, cfg.vocab()))
        .collect()
}

/// `delta_i = r_i + gamma V_{i+1} - V_i` with `V_{K+1} = 0`, and
/// `A_i = sum_l (gamma lambda)^l delta_{i+l}` to the end of the episode.
/// Returns the advantages and the value targets `A_i + V_i`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda_gae: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let k = rewards.len();
    let mut advantages = vec![0.0; k];
    let mut running = 0.0;
    for i in (0..k).rev() {
        let next_value = if i + 1 < k { values[i + 1] } else { 0.0 };
        let delta = rewards[i] + gamma * next_value - values[i];
        running = delta + gamma * lambda_gae * running;
        advantages[i] = running;
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, targets))
}

/// `-sum_i min(rho_i A_i, clip(rho_i, 1 - eps, 1 + eps) A_i)` with
/// `rho_i = exp(new_i - old_i)`.
pub fn clip_loss(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<f64> {
    if new_logprobs.len() != old_logprobs.len() || old_logprobs.len() != advantages.len() {
        return Err(Error::Shape("clip loss inputs differ in length".into()));
    }
    let mut total = 0.0;
    for ((n, o), a) in new_logprobs.iter().zip(old_logprobs).zip(advantages) {
        let rho = (n - o).exp();
        if !rho.is_finite() {
            return Err(Error::NonFinite(format!(
                "probability ratio (new {n}, old {o})"
            )));
        }
        total -= (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a);
    }
    Ok(total)
}

/// Sum of squared errors.
pub fn value_mse_loss(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.len() != targets.len() {
        return Err(Error::Shape("value loss inputs differ in length".into()));
    }
    Ok(predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum())
}

/// Adam states of the two models, carried across updates.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    pub policy: AdamState,
    pub value: AdamState,
}

impl PpoOptimizer {
    pub fn new(policy: &ModelParams, value: &ModelParams) -> Self {
        Self {
            policy: AdamState::new(policy),
            value: AdamState::new(value),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_total_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub ratio_mean: f64,
    /// Ratio mean of the first minibatch, before any parameter change.
    pub initial_ratio_mean: f64,
    pub minibatches: usize,
    pub skipped_minibatches: usize,
}

/// Advantages (optionally normalised over the batch) and value targets.
pub fn batch_advantages(
    batch: &[Trajectory],
    config: &PpoConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut advantages = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let (a, v) = compute_gae(&t.rewards.r, &t.values, config.gamma, config.lambda_gae)?;
        advantages.push(a);
        targets.push(v);
    }
    if config.normalize_advantages {
        let n = advantages.iter().map(Vec::len).sum::<usize>() as f64;
        let mean = advantages.iter().flatten().sum::<f64>() / n;
        let var = advantages
            .iter()
            .flatten()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-8);
        for a in advantages.iter_mut().flatten() {
            *a = (*a - mean) / std;
        }
    }
    Ok((advantages, targets))
}

/// Several epochs of clipped-surrogate steps on the policy and squared-error
/// steps on the value model over shuffled minibatches of `batch`. No entropy
/// bonus is used. A minibatch with a non-finite loss or gradient is skipped.
pub fn ppo_update(
    policy: &mut ModelParams,
    value: &mut ModelParams,
    optimizer: &mut PpoOptimizer,
    batch: &[Trajectory],
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty trajectory batch".into()));
    }
    let (advantages, targets) = batch_advantages(batch, config)?;
    let generated: Vec<Vec<ItemId>> = batch.iter().map(|t| t.generated.clone()).collect();
    let encodings = full_encodings(
        batch.iter().map(|t| t.history.as_slice()),
        &generated,
        policy,
    )?;

    let mut stats = UpdateStats {
        mean_total_reward: batch.iter().map(|t| t.rewards.total).sum::<f64>() / batch.len() as f64,
        ..UpdateStats::default()
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut consecutive_failures = 0;
    let mut first = true;
    for _ in 0..config.epochs_per_batch {
        order.shuffle(rng);
        for idx in order.chunks(config.minibatch_size) {
            let encs: Vec<SequenceEncoding> = idx.iter().map(|&i| encodings[i].clone()).collect();
            let clip = LossSpec::PpoClip {
                old_logprobs: idx.iter().map(|&i| batch[i].old_logprobs.clone()).collect(),
                advantages: idx.iter().map(|&i| advantages[i].clone()).collect(),
                clip_eps: config.clip_eps,
            };
            let mse = LossSpec::ValueMse {
                targets: idx.iter().map(|&i| targets[i].clone()).collect(),
            };
            match minibatch_step(policy, value, optimizer, &encs, &clip, &mse, config) {
                Ok((p, v)) => {
                    consecutive_failures = 0;
                    if first {
                        stats.initial_ratio_mean = p.stats.ratio_mean;
                        first = false;
                    }
                    stats.minibatches += 1;
                    stats.policy_loss += p.loss;
                    stats.value_loss += v;
                    stats.clip_fraction += p.stats.clip_fraction;
                    stats.ratio_mean += p.stats.ratio_mean;
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!("skipping minibatch: non-finite {what}");
                    stats.skipped_minibatches += 1;
                    consecutive_failures += 1;
                    if consecutive_failures >= config.max_consecutive_failures {
                        return Err(Error::Diverged(format!(
                            "{consecutive_failures} consecutive minibatches were non-finite (last: {what})"
                        )));
                    }
                }
                Err(other) => return Err(other),
            }
        }
    }
    if stats.minibatches > 0 {
        let n = stats.minibatches as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.clip_fraction /= n;
        stats.ratio_mean /= n;
    }
    Ok(stats)
}

/// Computes both gradients first so a failure leaves both models untouched.
fn minibatch_step(
    policy: &mut ModelParams,
    value: &mut ModelParams,
    optimizer: &mut PpoOptimizer,
    encodings: &[SequenceEncoding],
    clip: &LossSpec,
    mse: &LossSpec,
    config: &PpoConfig,
) -> Result<(crate::nnet::LossOutput, f64)> {
    let mut p = backward(policy, encodings, clip, 1.0, None)?;
    let mut v = backward(value, encodings, mse, 1.0, None)?;
    for (name, g) in [("policy", &p.grads), ("value", &v.grads)] {
        if let Some(t) = g.first_non_finite() {
            return Err(Error::NonFinite(format!("{name} gradient of {t}")));
        }
    }
    if let Some(max) = config.max_grad_norm {
        p.grads.clip_norm(max);
        v.grads.clip_norm(max);
    }
    optimizer_step(policy, &p.grads, &mut optimizer.policy, config.lr_policy)?;
    optimizer_step(value, &v.grads, &mut optimizer.value, config.lr_value)?;
    Ok((p, v.loss))
}

/// Log-probabilities of the stored actions under `policy`, recomputed from
/// one full-sequence pass per trajectory.
pub fn recompute_logprobs(policy: &ModelParams, batch: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    let generated: Vec<Vec<ItemId>> = batch.iter().map(|t| t.generated.clone()).collect();
    let encodings = full_encodings(
        batch.iter().map(|t| t.history.as_slice()),
        &generated,
        policy,
    )?;
    let spec = LossSpec::PpoClip {
        old_logprobs: batch.iter().map(|t| t.old_logprobs.clone()).collect(),
        advantages: batch.iter().map(|t| vec![0.0; t.generated.len()]).collect(),
        clip_eps: 0.2,
    };
    Ok(backward(policy, &encodings, &spec, 1.0, None)?
        .stats
        .logprobs)
}
