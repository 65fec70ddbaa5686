//! Scalar training losses and their exact gradients.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::forward::{self, Forward};
use super::params::{Gradients, ModelParams};
use crate::dataset::ItemId;
use crate::error::{Error, Result};
use crate::seqcodec::{Layout, SequenceEncoding};

/// Which loss to differentiate, with the auxiliary inputs it needs.
///
/// Every variant reduces to a mean over the sequences (or, for the shifting
/// loss, over all target slots) of the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `-sum_i log pi(g_i | g_<i, h)` over the K generation slots. The
    /// encodings carry the teacher list in their generated part.
    Lm,
    /// Softmax cross-entropy of every history slot against its successor
    /// (history-only layout). `next_items[b]` is the target of the last slot.
    ShiftingCe { next_items: Vec<ItemId> },
    /// Clipped surrogate. Log-probabilities are taken under the distribution
    /// with earlier generated items masked out, as in sampling.
    PpoClip {
        old_logprobs: Vec<Vec<f64>>,
        advantages: Vec<Vec<f64>>,
        clip_eps: f64,
    },
    /// `sum_i (V(h, g_<i) - target_i)^2` over the K states of each episode.
    ValueMse { targets: Vec<Vec<f64>> },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Lm => "lm_loss",
            LossSpec::ShiftingCe { .. } => "shifting_ce_loss",
            LossSpec::PpoClip { .. } => "ppo_clip_loss",
            LossSpec::ValueMse { .. } => "value_mse_loss",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossStats {
    /// Fraction of PPO terms whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    pub ratio_mean: f64,
    /// Per-sequence log-probabilities of the generated items (PPO only).
    pub logprobs: Vec<Vec<f64>>,
    /// Per-sequence value predictions (value loss only).
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub stats: LossStats,
}

/// Loss value only; no gradient buffers are allocated.
pub fn loss_value(
    params: &ModelParams,
    encodings: &[SequenceEncoding],
    spec: &LossSpec,
) -> Result<f64> {
    let fwd = forward::forward(params, encodings, None)?;
    Ok(head_loss(params, &fwd, encodings, spec, 1.0, false)?.loss)
}

/// Exact gradients of `scale * loss` with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    encodings: &[SequenceEncoding],
    spec: &LossSpec,
    scale: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossOutput> {
    let fwd = forward::forward(params, encodings, dropout)?;
    let head = head_loss(params, &fwd, encodings, spec, scale, true)?;
    let mut grads = head.grads.expect("requested");
    forward::backward(params, &fwd, &head.dhidden.expect("requested"), &mut grads);
    Ok(LossOutput {
        loss: head.loss,
        grads,
        stats: head.stats,
    })
}

struct HeadLoss {
    loss: f64,
    stats: LossStats,
    grads: Option<Gradients>,
    dhidden: Option<Array2<f64>>,
}

fn require_layout(encodings: &[SequenceEncoding], layout: Layout, spec: &LossSpec) -> Result<()> {
    if encodings.iter().any(|e| e.layout != layout) {
        return Err(Error::InvalidInput(format!(
            "{} needs {layout:?} encodings",
            spec.name()
        )));
    }
    Ok(())
}

fn require_full_lists(encodings: &[SequenceEncoding], spec: &LossSpec) -> Result<()> {
    if let Some(b) = encodings.iter().position(|e| e.generated_len != e.k) {
        return Err(Error::InvalidInput(format!(
            "{}: sequence {b} has {} of {} generated items",
            spec.name(),
            encodings[b].generated_len,
            encodings[b].k
        )));
    }
    Ok(())
}

fn per_seq<T>(v: &[T], batch: usize, what: &str) -> Result<()> {
    if v.len() != batch {
        return Err(Error::Shape(format!(
            "{what}: {} entries for a batch of {batch}",
            v.len()
        )));
    }
    Ok(())
}

/// Log-softmax restricted to items not in `masked`; masked entries are -inf.
pub fn masked_log_softmax(logits: ndarray::ArrayView1<f64>, masked: &[ItemId]) -> Array1<f64> {
    let mut out = logits.to_owned();
    for &m in masked {
        out[m] = f64::NEG_INFINITY;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    out.mapv_inplace(|v| v - lse);
    out
}

fn head_loss(
    params: &ModelParams,
    fwd: &Forward,
    encodings: &[SequenceEncoding],
    spec: &LossSpec,
    scale: f64,
    with_grad: bool,
) -> Result<HeadLoss> {
    let batch = fwd.batch;
    let num_items = params.config.num_items;
    let mut grads = with_grad.then(|| Gradients::zeros_like(params));
    let mut dhidden = with_grad.then(|| Array2::zeros(fwd.hidden.dim()));
    let mut stats = LossStats::default();

    let loss = match spec {
        LossSpec::Lm | LossSpec::ShiftingCe { .. } => {
            // (row, target) pairs plus the normalizer of the batch mean
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            let norm;
            if let LossSpec::ShiftingCe { next_items } = spec {
                require_layout(encodings, Layout::HistoryOnly, spec)?;
                per_seq(next_items, batch, "next_items")?;
                for (b, e) in encodings.iter().enumerate() {
                    for s in 0..e.len() {
                        if e.attention_mask[s] == 0 {
                            continue;
                        }
                        let target = if s + 1 < e.len() {
                            e.token_ids[s + 1]
                        } else {
                            next_items[b]
                        };
                        rows.push(fwd.row(b, s));
                        targets.push(target);
                    }
                }
                norm = rows.len() as f64;
            } else {
                require_layout(encodings, Layout::Generative, spec)?;
                require_full_lists(encodings, spec)?;
                for (b, e) in encodings.iter().enumerate() {
                    for i in 0..e.k {
                        rows.push(fwd.row(b, e.n_max + i));
                        targets.push(e.token_ids[e.n_max + 1 + i]);
                    }
                }
                norm = batch as f64;
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= num_items) {
                return Err(Error::InvalidInput(format!(
                    "{}: target {t} is not a catalog item",
                    spec.name()
                )));
            }
            let logits = forward::policy_head(params, &fwd.hidden, &rows);
            let mut total = 0.0;
            let mut dlogits = Array2::zeros(logits.dim());
            for (j, &t) in targets.iter().enumerate() {
                let logp = masked_log_softmax(logits.row(j), &[]);
                let term = -logp[t];
                if !term.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} term at hidden row {}",
                        spec.name(),
                        rows[j]
                    )));
                }
                total += term;
                if with_grad {
                    let mut drow = dlogits.row_mut(j);
                    for (dst, lp) in drow.iter_mut().zip(logp.iter()) {
                        *dst = lp.exp() * scale / norm;
                    }
                    drow[t] -= scale / norm;
                }
            }
            if let (Some(g), Some(dh)) = (grads.as_mut(), dhidden.as_mut()) {
                forward::policy_head_backward(params, &fwd.hidden, &rows, &dlogits, g, dh);
            }
            total / norm
        }
        LossSpec::PpoClip {
            old_logprobs,
            advantages,
            clip_eps,
        } => {
            require_layout(encodings, Layout::Generative, spec)?;
            require_full_lists(encodings, spec)?;
            per_seq(old_logprobs, batch, "old_logprobs")?;
            per_seq(advantages, batch, "advantages")?;
            let k = params.config.k;
            let mut rows = Vec::with_capacity(batch * k);
            for (b, e) in encodings.iter().enumerate() {
                if old_logprobs[b].len() != k || advantages[b].len() != k {
                    return Err(Error::Shape(format!(
                        "{}: sequence {b} needs {k} entries",
                        spec.name()
                    )));
                }
                rows.extend((0..k).map(|i| fwd.row(b, e.n_max + i)));
            }
            let logits = forward::policy_head(params, &fwd.hidden, &rows);
            let mut dlogits = Array2::zeros(logits.dim());
            let (lo, hi) = (1.0 - clip_eps, 1.0 + clip_eps);
            let mut total = 0.0;
            let mut clipped = 0usize;
            let mut ratio_sum = 0.0;
            for (b, e) in encodings.iter().enumerate() {
                let generated = &e.token_ids[e.n_max + 1..e.n_max + 1 + k];
                let mut seq_logprobs = Vec::with_capacity(k);
                for i in 0..k {
                    let j = b * k + i;
                    let action = generated[i];
                    let logp = masked_log_softmax(logits.row(j), &generated[..i]);
                    let new = logp[action];
                    let ratio = (new - old_logprobs[b][i]).exp();
                    if !ratio.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "ppo ratio at sequence {b} step {i} (new logprob {new}, old {})",
                            old_logprobs[b][i]
                        )));
                    }
                    let adv = advantages[b][i];
                    let unclipped = ratio * adv;
                    let clipped_term = ratio.clamp(lo, hi) * adv;
                    total -= unclipped.min(clipped_term);
                    if ratio < lo || ratio > hi {
                        clipped += 1;
                    }
                    ratio_sum += ratio;
                    seq_logprobs.push(new);
                    // d(-min)/d(logp): the unclipped branch is active unless the
                    // clip bound binds on the side that caps the objective
                    let active = if adv >= 0.0 { ratio <= hi } else { ratio >= lo };
                    if with_grad && active {
                        let dlogp = -adv * ratio * scale / batch as f64;
                        let mut drow = dlogits.row_mut(j);
                        for (dst, lp) in drow.iter_mut().zip(logp.iter()) {
                            *dst = -dlogp * lp.exp();
                        }
                        drow[action] += dlogp;
                    }
                }
                stats.logprobs.push(seq_logprobs);
            }
            let n = (batch * k) as f64;
            stats.clip_fraction = clipped as f64 / n;
            stats.ratio_mean = ratio_sum / n;
            if let (Some(g), Some(dh)) = (grads.as_mut(), dhidden.as_mut()) {
                forward::policy_head_backward(params, &fwd.hidden, &rows, &dlogits, g, dh);
            }
            total / batch as f64
        }
        LossSpec::ValueMse { targets } => {
            require_layout(encodings, Layout::Generative, spec)?;
            per_seq(targets, batch, "value targets")?;
            let k = params.config.k;
            let mut rows = Vec::with_capacity(batch * k);
            for (b, e) in encodings.iter().enumerate() {
                if targets[b].len() != k {
                    return Err(Error::Shape(format!(
                        "{}: sequence {b} needs {k} targets",
                        spec.name()
                    )));
                }
                rows.extend((0..k).map(|i| fwd.row(b, e.n_max + i)));
            }
            let (values, cache) = forward::value_head(params, &fwd.hidden, &rows);
            let mut total = 0.0;
            let mut dvalues = Array1::zeros(rows.len());
            for b in 0..batch {
                for i in 0..k {
                    let j = b * k + i;
                    let err = values[j] - targets[b][i];
                    if !err.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "value error at sequence {b} step {i}"
                        )));
                    }
                    total += err * err;
                    dvalues[j] = 2.0 * err * scale / batch as f64;
                }
                stats
                    .values
                    .push(values.slice(ndarray::s![b * k..(b + 1) * k]).to_vec());
            }
            if let (Some(g), Some(dh)) = (grads.as_mut(), dhidden.as_mut()) {
                forward::value_head_backward(params, &cache, &rows, &dvalues, g, dh);
            }
            total / batch as f64
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} = {loss}", spec.name())));
    }
    Ok(HeadLoss {
        loss: loss * scale,
        stats,
        grads,
        dhidden,
    })
}
