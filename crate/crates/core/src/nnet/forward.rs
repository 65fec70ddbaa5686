//! Batched decoder forward pass with a cache for the hand-written backward.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{BlockParams, ModelParams};
use crate::error::{Error, Result};
use crate::seqcodec::{window_len, SequenceEncoding};

const LN_EPS: f64 = 1e-5;
/// Additive score for padded keys.
const MASKED_SCORE: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row).and(xh).for_each(|g, &x| {
            *g = r * (*g - mean_d - x * mean_dx);
        });
    }
    dx
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    /// One `T x T` matrix per (sequence, head), row-major in that order.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    drop_ff: Option<Array2<f64>>,
}

/// Activations of one batched forward pass. Row `b * seq_len + t` of
/// `hidden` is the final-layer state of slot `t` in sequence `b`.
pub(crate) struct Forward {
    pub batch: usize,
    pub seq_len: usize,
    tokens: Vec<usize>,
    positions: Vec<usize>,
    drop_emb: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    pub hidden: Array2<f64>,
}

impl Forward {
    pub fn row(&self, seq: usize, slot: usize) -> usize {
        seq * self.seq_len + slot
    }
}

pub(crate) fn check_encodings(params: &ModelParams, encodings: &[SequenceEncoding]) -> Result<()> {
    let cfg = &params.config;
    let want = window_len(cfg.n_max, cfg.k);
    let vocab = cfg.vocab().size();
    let positions = cfg.positions();
    if encodings.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for (b, e) in encodings.iter().enumerate() {
        if e.len() != want || e.n_max != cfg.n_max || e.k != cfg.k {
            return Err(Error::Shape(format!(
                "sequence {b}: window {} (n_max {}, k {}) does not match model window {want} (n_max {}, k {})",
                e.len(),
                e.n_max,
                e.k,
                cfg.n_max,
                cfg.k
            )));
        }
        if e.layout != cfg.layout {
            return Err(Error::Shape(format!(
                "sequence {b}: {:?} layout fed to a {:?} model",
                e.layout, cfg.layout
            )));
        }
        if e.position_ids.len() != want || e.attention_mask.len() != want {
            return Err(Error::Shape(format!("sequence {b}: ragged encoding")));
        }
        if let Some(t) = e.token_ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!(
                "sequence {b}: token {t} outside vocabulary {vocab}"
            )));
        }
        if let Some(p) = e.position_ids.iter().find(|&&p| p >= positions) {
            return Err(Error::Shape(format!(
                "sequence {b}: position id {p} outside table of {positions}"
            )));
        }
    }
    Ok(())
}

/// Runs the backbone. Dropout is applied only when `dropout` carries an rng
/// and the configured rate is positive.
pub(crate) fn forward(
    params: &ModelParams,
    encodings: &[SequenceEncoding],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    check_encodings(params, encodings)?;
    let cfg = &params.config;
    let rate = cfg.dropout_rate;
    let batch = encodings.len();
    let seq_len = encodings[0].len();
    let bt = batch * seq_len;
    let d = cfg.embed_dim;

    let tokens: Vec<usize> = encodings
        .iter()
        .flat_map(|e| e.token_ids.iter().copied())
        .collect();
    let positions: Vec<usize> = encodings
        .iter()
        .flat_map(|e| e.position_ids.iter().copied())
        .collect();
    let mask: Vec<u8> = encodings
        .iter()
        .flat_map(|e| e.attention_mask.iter().copied())
        .collect();

    let mut x = Array2::zeros((bt, d));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&params.token_embedding.row(tokens[r]));
        row += &params.position_embedding.row(positions[r]);
    }
    let mut drop_emb = None;
    if rate > 0.0 {
        if let Some(rng) = dropout.as_deref_mut() {
            let m = dropout_mask(rng, (bt, d), rate);
            x *= &m;
            drop_emb = Some(m);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for blk in &params.blocks {
        let (cache, out) = block_forward(
            blk,
            x,
            &mask,
            batch,
            seq_len,
            cfg.num_heads,
            rate,
            dropout.as_deref_mut(),
        );
        blocks.push(cache);
        x = out;
    }
    let (hidden, final_ln) = layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias);
    Ok(Forward {
        batch,
        seq_len,
        tokens,
        positions,
        drop_emb,
        blocks,
        final_ln,
        hidden,
    })
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    blk: &BlockParams,
    mut x: Array2<f64>,
    mask: &[u8],
    batch: usize,
    seq_len: usize,
    heads: usize,
    rate: f64,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> (BlockCache, Array2<f64>) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, ln1) = layer_norm(&x, &blk.ln1_gain, &blk.ln1_bias);
    let qkv = h1.dot(&blk.qkv_w) + &blk.qkv_b;
    let mut attn = Array2::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let r0 = b * seq_len;
        let rows = r0..r0 + seq_len;
        let key_mask = &mask[rows.clone()];
        for h in 0..heads {
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for (t, mut row) in p.rows_mut().into_iter().enumerate() {
                let mut max = f64::NEG_INFINITY;
                for u in 0..=t {
                    row[u] = row[u] * scale + if key_mask[u] == 0 { MASKED_SCORE } else { 0.0 };
                    max = max.max(row[u]);
                }
                let mut sum = 0.0;
                for u in 0..=t {
                    row[u] = (row[u] - max).exp();
                    sum += row[u];
                }
                for u in 0..=t {
                    row[u] /= sum;
                }
                for u in t + 1..seq_len {
                    row[u] = 0.0;
                }
            }
            attn.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                .assign(&p.dot(&v));
            probs.push(p);
        }
    }
    let mut proj = attn.dot(&blk.out_w) + &blk.out_b;
    let mut drop_attn = None;
    if rate > 0.0 {
        if let Some(rng) = dropout.as_deref_mut() {
            let m = dropout_mask(rng, proj.dim(), rate);
            proj *= &m;
            drop_attn = Some(m);
        }
    }
    x += &proj;

    let (h2, ln2) = layer_norm(&x, &blk.ln2_gain, &blk.ln2_bias);
    let ff_pre = h2.dot(&blk.ff1_w) + &blk.ff1_b;
    let ff_act = ff_pre.mapv(gelu);
    let mut ff_out = ff_act.dot(&blk.ff2_w) + &blk.ff2_b;
    let mut drop_ff = None;
    if rate > 0.0 {
        if let Some(rng) = dropout {
            let m = dropout_mask(rng, ff_out.dim(), rate);
            ff_out *= &m;
            drop_ff = Some(m);
        }
    }
    x += &ff_out;
    (
        BlockCache {
            ln1,
            h1,
            qkv,
            probs,
            attn,
            drop_attn,
            ln2,
            h2,
            ff_pre,
            ff_act,
            drop_ff,
        },
        x,
    )
}

/// Backpropagates `dhidden` (gradient w.r.t. `fwd.hidden`) through the
/// backbone, accumulating into `grads`.
pub(crate) fn backward(
    params: &ModelParams,
    fwd: &Forward,
    dhidden: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let seq_len = fwd.seq_len;

    let mut dx = layer_norm_backward(
        dhidden,
        &fwd.final_ln,
        &params.final_ln_gain,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );

    for ((blk, cache), g) in params
        .blocks
        .iter()
        .zip(&fwd.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        // x_out = x_mid + dropout(ff(ln2(x_mid)))
        let mut dff_out = dx.clone();
        if let Some(m) = &cache.drop_ff {
            dff_out *= m;
        }
        g.ff2_w += &cache.ff_act.t().dot(&dff_out);
        g.ff2_b += &dff_out.sum_axis(Axis(0));
        let mut dff_pre = dff_out.dot(&blk.ff2_w.t());
        Zip::from(&mut dff_pre)
            .and(&cache.ff_pre)
            .for_each(|gr, &x| *gr *= gelu_grad(x));
        g.ff1_w += &cache.h2.t().dot(&dff_pre);
        g.ff1_b += &dff_pre.sum_axis(Axis(0));
        let dh2 = dff_pre.dot(&blk.ff1_w.t());
        dx += &layer_norm_backward(
            &dh2,
            &cache.ln2,
            &blk.ln2_gain,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
        );

        // x_mid = x_in + dropout(attn(ln1(x_in)) W_o + b_o)
        let mut dproj = dx.clone();
        if let Some(m) = &cache.drop_attn {
            dproj *= m;
        }
        g.out_w += &cache.attn.t().dot(&dproj);
        g.out_b += &dproj.sum_axis(Axis(0));
        let dattn = dproj.dot(&blk.out_w.t());

        let mut dqkv = Array2::zeros(cache.qkv.dim());
        for b in 0..fwd.batch {
            let r0 = b * seq_len;
            let rows = r0..r0 + seq_len;
            for h in 0..heads {
                let p = &cache.probs[b * heads + h];
                let qc = h * dh..(h + 1) * dh;
                let kc = d + h * dh..d + (h + 1) * dh;
                let vc = 2 * d + h * dh..2 * d + (h + 1) * dh;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let d_out = dattn.slice(s![rows.clone(), qc.clone()]);
                let mut ds = d_out.dot(&v.t());
                let dv = p.t().dot(&d_out);
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                    Zip::from(&mut row)
                        .and(prow)
                        .for_each(|gr, &pp| *gr = pp * (*gr - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), qc]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), kc]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), vc]).assign(&dv);
            }
        }
        g.qkv_w += &cache.h1.t().dot(&dqkv);
        g.qkv_b += &dqkv.sum_axis(Axis(0));
        let dh1 = dqkv.dot(&blk.qkv_w.t());
        dx += &layer_norm_backward(
            &dh1,
            &cache.ln1,
            &blk.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        );
    }

    if let Some(m) = &fwd.drop_emb {
        dx *= m;
    }
    for (r, row) in dx.rows().into_iter().enumerate() {
        let mut t = grads.token_embedding.row_mut(fwd.tokens[r]);
        t += &row;
        let mut p = grads.position_embedding.row_mut(fwd.positions[r]);
        p += &row;
    }
}

/// Policy logits for selected hidden rows: `rows x num_items`.
pub(crate) fn policy_head(
    params: &ModelParams,
    hidden: &Array2<f64>,
    rows: &[usize],
) -> Array2<f64> {
    let gathered = hidden.select(Axis(0), rows);
    gathered.dot(&params.policy_w) + &params.policy_b
}

pub(crate) struct ValueHeadCache {
    gathered: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn value_head(
    params: &ModelParams,
    hidden: &Array2<f64>,
    rows: &[usize],
) -> (Array1<f64>, ValueHeadCache) {
    let gathered = hidden.select(Axis(0), rows);
    let pre = gathered.dot(&params.value_w1) + &params.value_b1;
    let act = pre.mapv(gelu);
    let out = act.dot(&params.value_w2).column(0).to_owned() + params.value_b2[0];
    (out, ValueHeadCache { gathered, pre, act })
}

/// Accumulates policy head gradients and scatters `dlogits` back into a
/// `dhidden` buffer.
pub(crate) fn policy_head_backward(
    params: &ModelParams,
    hidden: &Array2<f64>,
    rows: &[usize],
    dlogits: &Array2<f64>,
    grads: &mut ModelParams,
    dhidden: &mut Array2<f64>,
) {
    let gathered = hidden.select(Axis(0), rows);
    grads.policy_w += &gathered.t().dot(dlogits);
    grads.policy_b += &dlogits.sum_axis(Axis(0));
    let dg = dlogits.dot(&params.policy_w.t());
    for (i, &r) in rows.iter().enumerate() {
        let mut row = dhidden.row_mut(r);
        row += &dg.row(i);
    }
}

pub(crate) fn value_head_backward(
    params: &ModelParams,
    cache: &ValueHeadCache,
    rows: &[usize],
    dvalues: &Array1<f64>,
    grads: &mut ModelParams,
    dhidden: &mut Array2<f64>,
) {
    let dv = dvalues.view().insert_axis(Axis(1));
    grads.value_w2 += &cache.act.t().dot(&dv);
    grads.value_b2[0] += dvalues.sum();
    let mut dpre = dv.dot(&params.value_w2.t());
    Zip::from(&mut dpre)
        .and(&cache.pre)
        .for_each(|gr, &x| *gr *= gelu_grad(x));
    grads.value_w1 += &cache.gathered.t().dot(&dpre);
    grads.value_b1 += &dpre.sum_axis(Axis(0));
    let dg = dpre.dot(&params.value_w1.t());
    for (i, &r) in rows.iter().enumerate() {
        let mut row = dhidden.row_mut(r);
        row += &dg.row(i);
    }
}
