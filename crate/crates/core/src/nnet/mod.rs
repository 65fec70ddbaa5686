//! Causal transformer decoder with a policy head (item logits) and a value
//! head (scalar), hand-written backpropagation and Adam.
//!
//! Blocks are pre-norm (GPT-2 style) with GELU feed-forward layers. Slot `t`
//! attends to slots `<= t`; padded keys receive an additive `-1e9` score.

mod adam;
mod checkpoint;
mod forward;
mod loss;
mod params;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    write_atomic, Manifest, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use loss::{backward, loss_value, masked_log_softmax, LossOutput, LossSpec, LossStats};
pub use params::{BlockParams, Gradients, ModelConfig, ModelParams};

use ndarray::Array2;

use crate::error::Result;
use crate::seqcodec::{decode_next_position, SequenceEncoding};

/// Policy logits at every slot: `seq_len x num_items`.
pub fn forward_policy(params: &ModelParams, encoding: &SequenceEncoding) -> Result<Array2<f64>> {
    let fwd = forward::forward(params, std::slice::from_ref(encoding), None)?;
    let rows: Vec<usize> = (0..fwd.seq_len).collect();
    Ok(forward::policy_head(params, &fwd.hidden, &rows))
}

/// Value head output at the slot that predicts the next generated item.
pub fn forward_value(params: &ModelParams, encoding: &SequenceEncoding) -> Result<f64> {
    let slot = decode_next_position(encoding)?;
    let fwd = forward::forward(params, std::slice::from_ref(encoding), None)?;
    let (values, _) = forward::value_head(params, &fwd.hidden, &[slot]);
    Ok(values[0])
}

/// Next-item logits for a batch of partial states, one row per encoding.
pub fn next_item_logits(
    params: &ModelParams,
    encodings: &[SequenceEncoding],
) -> Result<Array2<f64>> {
    let slots = encodings
        .iter()
        .map(decode_next_position)
        .collect::<Result<Vec<_>>>()?;
    let fwd = forward::forward(params, encodings, None)?;
    let rows: Vec<usize> = slots
        .iter()
        .enumerate()
        .map(|(b, &s)| fwd.row(b, s))
        .collect();
    Ok(forward::policy_head(params, &fwd.hidden, &rows))
}

/// Values `V(h, g_<i)` for `i = 1..K` of complete episodes, read from one
/// full-sequence pass (causality makes each equal to the stepwise value).
pub fn episode_values(
    params: &ModelParams,
    encodings: &[SequenceEncoding],
) -> Result<Vec<Vec<f64>>> {
    let fwd = forward::forward(params, encodings, None)?;
    let k = params.config.k;
    let rows: Vec<usize> = encodings
        .iter()
        .enumerate()
        .flat_map(|(b, e)| (0..k).map(move |i| (b, e.n_max + i)))
        .map(|(b, s)| fwd.row(b, s))
        .collect();
    let (values, _) = forward::value_head(params, &fwd.hidden, &rows);
    Ok(values
        .as_slice()
        .expect("contiguous")
        .chunks(k)
        .map(<[f64]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcodec::{encode_history_only, encode_state, Layout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layout: Layout) -> ModelConfig {
        ModelConfig {
            num_items: 20,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ff_dim: 16,
            n_max: 5,
            k: 3,
            dropout_rate: 0.0,
            layout,
        }
    }

    /// Init plus broad noise so every nonlinearity is exercised.
    fn noisy(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, mut t) in p.named_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        p
    }

    fn enc(history: &[usize], generated: &[usize], cfg: &ModelConfig) -> SequenceEncoding {
        encode_state(history, generated, cfg.n_max, cfg.k, cfg.vocab()).unwrap()
    }

    fn coordinates(p: &ModelParams) -> Vec<(usize, usize)> {
        p.named()
            .iter()
            .enumerate()
            .flat_map(|(t, (_, v))| (0..v.len()).map(move |i| (t, i)))
            .collect()
    }

    fn get(p: &ModelParams, (t, i): (usize, usize)) -> f64 {
        p.named()[t].1.iter().nth(i).copied().unwrap()
    }

    fn set(p: &mut ModelParams, (t, i): (usize, usize), v: f64) {
        *p.named_mut()[t].1.iter_mut().nth(i).unwrap() = v;
    }

    /// Central differences against the analytic gradient on random coordinates.
    fn grad_check(p: &ModelParams, encs: &[SequenceEncoding], spec: &LossSpec, samples: usize) {
        let out = backward(p, encs, spec, 1.0, None).unwrap();
        let coords = coordinates(p);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-4;
        for _ in 0..samples {
            let c = coords[rng.random_range(0..coords.len())];
            let mut plus = p.clone();
            set(&mut plus, c, get(p, c) + h);
            let mut minus = p.clone();
            set(&mut minus, c, get(p, c) - h);
            let numeric = (loss_value(&plus, encs, spec).unwrap()
                - loss_value(&minus, encs, spec).unwrap())
                / (2.0 * h);
            let analytic = get(&out.grads, c);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                rel < 1e-3,
                "{}: {} [{}] analytic {analytic} numeric {numeric}",
                spec.name(),
                p.named()[c.0].0,
                c.1
            );
        }
    }

    #[test]
    fn gradient_check_lm_loss() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 1);
        let encs = vec![
            enc(&[1, 2, 3], &[4, 5, 6], &cfg),
            enc(&[7], &[8, 0, 19], &cfg),
        ];
        grad_check(&p, &encs, &LossSpec::Lm, 60);
    }

    #[test]
    fn gradient_check_shifting_loss() {
        let cfg = tiny_config(Layout::HistoryOnly);
        let p = noisy(&cfg, 2);
        let encs = vec![
            encode_history_only(&[1, 2, 3, 4], cfg.n_max, cfg.k, cfg.vocab()).unwrap(),
            encode_history_only(&[9, 3], cfg.n_max, cfg.k, cfg.vocab()).unwrap(),
        ];
        let spec = LossSpec::ShiftingCe {
            next_items: vec![5, 10],
        };
        grad_check(&p, &encs, &spec, 60);
    }

    #[test]
    fn gradient_check_ppo_and_value_losses() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 3);
        let encs = vec![
            enc(&[1, 2], &[3, 4, 5], &cfg),
            enc(&[6, 7, 8, 9], &[10, 11, 12], &cfg),
        ];
        let current = backward(
            &p,
            &encs,
            &LossSpec::PpoClip {
                old_logprobs: vec![vec![0.0; 3]; 2],
                advantages: vec![vec![0.0; 3]; 2],
                clip_eps: 0.2,
            },
            1.0,
            None,
        )
        .unwrap()
        .stats
        .logprobs;
        // offsets put ratios well inside and well outside the clip range
        let offsets = [[0.05, -0.6, 0.6], [-0.05, 0.4, -0.45]];
        let old: Vec<Vec<f64>> = current
            .iter()
            .zip(offsets)
            .map(|(lp, off)| lp.iter().zip(off).map(|(l, o)| l - o).collect())
            .collect();
        let spec = LossSpec::PpoClip {
            old_logprobs: old,
            advantages: vec![vec![1.5, -0.7, 0.9], vec![-1.2, 0.8, -0.3]],
            clip_eps: 0.2,
        };
        grad_check(&p, &encs, &spec, 60);
        let spec = LossSpec::ValueMse {
            targets: vec![vec![0.5, -1.0, 2.0], vec![0.0, 0.3, 1.0]],
        };
        grad_check(&p, &encs, &spec, 60);
    }

    #[test]
    fn loss_independent_parameters_get_zero_gradient() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 4);
        let encs = vec![enc(&[1, 2], &[3, 4, 5], &cfg)];
        let lm = backward(&p, &encs, &LossSpec::Lm, 1.0, None).unwrap();
        for (name, t) in lm.grads.named() {
            if name.starts_with("value_head") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let vm = backward(
            &p,
            &encs,
            &LossSpec::ValueMse {
                targets: vec![vec![1.0; 3]],
            },
            1.0,
            None,
        )
        .unwrap();
        for (name, t) in vm.grads.named() {
            if name.starts_with("policy_head") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gradients_scale_linearly() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 5);
        let encs = vec![enc(&[1, 2], &[3, 4, 5], &cfg)];
        let one = backward(&p, &encs, &LossSpec::Lm, 1.0, None).unwrap();
        let two = backward(&p, &encs, &LossSpec::Lm, 2.0, None).unwrap();
        assert!((two.loss - 2.0 * one.loss).abs() < 1e-12);
        for ((_, a), (_, b)) in one.grads.named().iter().zip(two.grads.named()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 6);
        let logits = forward_policy(&p, &enc(&[3, 1], &[2], &cfg)).unwrap();
        assert_eq!(logits.ncols(), 20);
        for row in logits.rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_heads_give_uniform_policy_and_zero_value() {
        let cfg = tiny_config(Layout::Generative);
        let mut p = noisy(&cfg, 7);
        p.policy_w.fill(0.0);
        p.policy_b.fill(0.0);
        p.value_w1.fill(0.0);
        p.value_b1.fill(0.0);
        p.value_w2.fill(0.0);
        p.value_b2.fill(0.0);
        let e = enc(&[1, 5, 9], &[], &cfg);
        let logits = next_item_logits(&p, std::slice::from_ref(&e)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(forward_value(&p, &e).unwrap(), 0.0);
    }

    #[test]
    fn padded_slots_do_not_leak() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 8);
        let a = enc(&[4, 7], &[1], &cfg);
        let mut b = a.clone();
        for s in 0..b.len() {
            if b.attention_mask[s] == 0 {
                b.token_ids[s] = (s * 7) % 20;
                b.position_ids[s] = (s * 3) % cfg.positions();
            }
        }
        let la = forward_policy(&p, &a).unwrap();
        let lb = forward_policy(&p, &b).unwrap();
        for s in (0..a.len()).filter(|&s| a.attention_mask[s] == 1) {
            assert_eq!(la.row(s), lb.row(s), "slot {s}");
        }
        assert_eq!(
            forward_value(&p, &a).unwrap(),
            forward_value(&p, &b).unwrap()
        );
    }

    #[test]
    fn attention_is_causal() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 9);
        let base = enc(&[1, 2, 3, 4], &[5, 6, 7], &cfg);
        let logits = forward_policy(&p, &base).unwrap();
        for t in 1..base.len() {
            let mut changed = base.clone();
            changed.token_ids[t] = (changed.token_ids[t] + 1) % 20;
            changed.attention_mask[t] = 1;
            let other = forward_policy(&p, &changed).unwrap();
            for s in 0..t {
                assert_eq!(logits.row(s), other.row(s), "slot {t} leaked into {s}");
            }
        }
    }

    #[test]
    fn value_model_copies_backbone_by_value() {
        let cfg = tiny_config(Layout::Generative);
        let student = noisy(&cfg, 10);
        let mut value = ModelParams::value_from_policy(&student, 11).unwrap();
        for ((name, a), (_, b)) in student.named().iter().zip(value.named()) {
            if ModelParams::is_backbone(name) {
                assert_eq!(a, &b, "{name}");
            }
        }
        let other = ModelParams::value_from_policy(&student, 12).unwrap();
        assert_ne!(value.value_w1, other.value_w1);
        let snapshot = student.clone();
        value.blocks[0].qkv_w.fill(1.0);
        assert_eq!(student, snapshot);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config(Layout::Generative);
        assert_eq!(
            ModelParams::init(&cfg, 5).unwrap(),
            ModelParams::init(&cfg, 5).unwrap()
        );
        assert_ne!(
            ModelParams::init(&cfg, 5).unwrap(),
            ModelParams::init(&cfg, 6).unwrap()
        );
    }

    #[test]
    fn mismatched_encoding_is_rejected() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 1);
        let wrong = encode_state(&[1], &[], 4, 3, cfg.vocab()).unwrap();
        assert!(forward_policy(&p, &wrong).is_err());
        let shifting = encode_history_only(&[1], cfg.n_max, cfg.k, cfg.vocab()).unwrap();
        assert!(forward_policy(&p, &shifting).is_err());
    }

    #[test]
    fn episode_values_match_stepwise_values() {
        let cfg = tiny_config(Layout::Generative);
        let p = noisy(&cfg, 13);
        let full = enc(&[2, 3], &[4, 5, 6], &cfg);
        let batch = episode_values(&p, std::slice::from_ref(&full)).unwrap();
        for i in 0..cfg.k {
            let partial = enc(&[2, 3], &[4, 5, 6][..i], &cfg);
            let v = forward_value(&p, &partial).unwrap();
            assert!((batch[0][i] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_when_enabled() {
        let mut cfg = tiny_config(Layout::Generative);
        let encs = vec![enc(&[1, 2], &[3, 4, 5], &cfg)];
        let p = noisy(&cfg, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = backward(&p, &encs, &LossSpec::Lm, 1.0, Some(&mut rng)).unwrap();
        assert_eq!(a.loss, loss_value(&p, &encs, &LossSpec::Lm).unwrap());
        cfg.dropout_rate = 0.5;
        let mut p2 = p.clone();
        p2.config = cfg;
        let b = backward(&p2, &encs, &LossSpec::Lm, 1.0, Some(&mut rng)).unwrap();
        assert_ne!(b.loss, a.loss);
        assert!(b.loss.is_finite());
    }
}
