use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcodec::{position_table_len, Layout, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Maximum history length kept in the encoding.
    pub n_max: usize,
    /// Length of the generated list.
    pub k: usize,
    pub dropout_rate: f64,
    pub layout: Layout,
}

impl ModelConfig {
    /// Desk-scale defaults: d = 64, three blocks.
    pub fn desk(num_items: usize, n_max: usize, k: usize) -> Self {
        Self {
            num_items,
            embed_dim: 64,
            num_blocks: 3,
            num_heads: 4,
            ff_dim: 256,
            n_max,
            k,
            dropout_rate: 0.0,
            layout: Layout::Generative,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_items)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn positions(&self) -> usize {
        position_table_len(self.n_max, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_items < 2 {
            return bad("catalog needs at least 2 items".into());
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.k == 0 || self.n_max == 0 || self.ff_dim == 0 {
            return bad("k, n_max and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// `d x 3d`, columns ordered query | key | value.
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub ff1_w: Array2<f64>,
    pub ff1_b: Array1<f64>,
    pub ff2_w: Array2<f64>,
    pub ff2_b: Array1<f64>,
}

/// Decoder backbone plus both heads. A policy model and a value model are
/// two separate instances; each only trains the head its loss touches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: Array1<f64>,
    pub final_ln_bias: Array1<f64>,
    pub policy_w: Array2<f64>,
    pub policy_b: Array1<f64>,
    pub value_w1: Array2<f64>,
    pub value_b1: Array1<f64>,
    /// `d x 1`.
    pub value_w2: Array2<f64>,
    pub value_b2: Array1<f64>,
}

const INIT_STD: f64 = 0.02;

/// Truncated normal (two standard deviations), rounded to f32 precision.
fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            break x as f32 as f64;
        }
    })
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let ff = config.ff_dim;
        let token_embedding = trunc_normal(&mut rng, config.vocab().size(), d);
        let position_embedding = trunc_normal(&mut rng, config.positions(), d);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                qkv_w: trunc_normal(&mut rng, d, 3 * d),
                qkv_b: Array1::zeros(3 * d),
                out_w: trunc_normal(&mut rng, d, d),
                out_b: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                ff1_w: trunc_normal(&mut rng, d, ff),
                ff1_b: Array1::zeros(ff),
                ff2_w: trunc_normal(&mut rng, ff, d),
                ff2_b: Array1::zeros(d),
            })
            .collect();
        let policy_w = trunc_normal(&mut rng, d, config.num_items);
        let value_w1 = trunc_normal(&mut rng, d, d);
        let value_w2 = trunc_normal(&mut rng, d, 1);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            final_ln_gain: Array1::ones(d),
            final_ln_bias: Array1::zeros(d),
            policy_w,
            policy_b: Array1::zeros(config.num_items),
            value_w1,
            value_b1: Array1::zeros(d),
            value_w2,
            value_b2: Array1::zeros(1),
        })
    }

    /// All-zero tensors with the layout of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let ff = config.ff_dim;
        Self {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab().size(), d)),
            position_embedding: Array2::zeros((config.positions(), d)),
            blocks: (0..config.num_blocks)
                .map(|_| BlockParams {
                    ln1_gain: Array1::zeros(d),
                    ln1_bias: Array1::zeros(d),
                    qkv_w: Array2::zeros((d, 3 * d)),
                    qkv_b: Array1::zeros(3 * d),
                    out_w: Array2::zeros((d, d)),
                    out_b: Array1::zeros(d),
                    ln2_gain: Array1::zeros(d),
                    ln2_bias: Array1::zeros(d),
                    ff1_w: Array2::zeros((d, ff)),
                    ff1_b: Array1::zeros(ff),
                    ff2_w: Array2::zeros((ff, d)),
                    ff2_b: Array1::zeros(d),
                })
                .collect(),
            final_ln_gain: Array1::zeros(d),
            final_ln_bias: Array1::zeros(d),
            policy_w: Array2::zeros((d, config.num_items)),
            policy_b: Array1::zeros(config.num_items),
            value_w1: Array2::zeros((d, d)),
            value_b1: Array1::zeros(d),
            value_w2: Array2::zeros((d, 1)),
            value_b2: Array1::zeros(1),
        }
    }

    /// Value model for fine-tuning: backbone copied from `student`, value
    /// head freshly initialized from `seed`.
    pub fn value_from_policy(student: &ModelParams, seed: u64) -> Result<Self> {
        let fresh = ModelParams::init(&student.config, seed)?;
        let mut value = student.clone();
        value.value_w1 = fresh.value_w1;
        value.value_b1 = fresh.value_b1;
        value.value_w2 = fresh.value_w2;
        value.value_b2 = fresh.value_b2;
        Ok(value)
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            (
                "token_embedding".into(),
                self.token_embedding.view().into_dyn(),
            ),
            (
                "position_embedding".into(),
                self.position_embedding.view().into_dyn(),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1.gain"), b.ln1_gain.view().into_dyn()));
            out.push((p("ln1.bias"), b.ln1_bias.view().into_dyn()));
            out.push((p("attn.qkv.weight"), b.qkv_w.view().into_dyn()));
            out.push((p("attn.qkv.bias"), b.qkv_b.view().into_dyn()));
            out.push((p("attn.out.weight"), b.out_w.view().into_dyn()));
            out.push((p("attn.out.bias"), b.out_b.view().into_dyn()));
            out.push((p("ln2.gain"), b.ln2_gain.view().into_dyn()));
            out.push((p("ln2.bias"), b.ln2_bias.view().into_dyn()));
            out.push((p("ff1.weight"), b.ff1_w.view().into_dyn()));
            out.push((p("ff1.bias"), b.ff1_b.view().into_dyn()));
            out.push((p("ff2.weight"), b.ff2_w.view().into_dyn()));
            out.push((p("ff2.bias"), b.ff2_b.view().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln_gain.view().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln_bias.view().into_dyn()));
        out.push(("policy_head.weight".into(), self.policy_w.view().into_dyn()));
        out.push(("policy_head.bias".into(), self.policy_b.view().into_dyn()));
        out.push(("value_head.w1".into(), self.value_w1.view().into_dyn()));
        out.push(("value_head.b1".into(), self.value_b1.view().into_dyn()));
        out.push(("value_head.w2".into(), self.value_w2.view().into_dyn()));
        out.push(("value_head.b2".into(), self.value_b2.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            (
                "token_embedding".into(),
                self.token_embedding.view_mut().into_dyn(),
            ),
            (
                "position_embedding".into(),
                self.position_embedding.view_mut().into_dyn(),
            ),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1.gain"), b.ln1_gain.view_mut().into_dyn()));
            out.push((p("ln1.bias"), b.ln1_bias.view_mut().into_dyn()));
            out.push((p("attn.qkv.weight"), b.qkv_w.view_mut().into_dyn()));
            out.push((p("attn.qkv.bias"), b.qkv_b.view_mut().into_dyn()));
            out.push((p("attn.out.weight"), b.out_w.view_mut().into_dyn()));
            out.push((p("attn.out.bias"), b.out_b.view_mut().into_dyn()));
            out.push((p("ln2.gain"), b.ln2_gain.view_mut().into_dyn()));
            out.push((p("ln2.bias"), b.ln2_bias.view_mut().into_dyn()));
            out.push((p("ff1.weight"), b.ff1_w.view_mut().into_dyn()));
            out.push((p("ff1.bias"), b.ff1_b.view_mut().into_dyn()));
            out.push((p("ff2.weight"), b.ff2_w.view_mut().into_dyn()));
            out.push((p("ff2.bias"), b.ff2_b.view_mut().into_dyn()));
        }
        out.push((
            "final_ln.gain".into(),
            self.final_ln_gain.view_mut().into_dyn(),
        ));
        out.push((
            "final_ln.bias".into(),
            self.final_ln_bias.view_mut().into_dyn(),
        ));
        out.push((
            "policy_head.weight".into(),
            self.policy_w.view_mut().into_dyn(),
        ));
        out.push((
            "policy_head.bias".into(),
            self.policy_b.view_mut().into_dyn(),
        ));
        out.push(("value_head.w1".into(), self.value_w1.view_mut().into_dyn()));
        out.push(("value_head.b1".into(), self.value_b1.view_mut().into_dyn()));
        out.push(("value_head.w2".into(), self.value_w2.view_mut().into_dyn()));
        out.push(("value_head.b2".into(), self.value_b2.view_mut().into_dyn()));
        out
    }

    pub fn is_backbone(name: &str) -> bool {
        !(name.starts_with("policy_head") || name.starts_with("value_head"))
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients share the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(ModelParams::zeros(&params.config))
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.0.named_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, mut a), (_, b)) in self.0.named_mut().into_iter().zip(other.0.named()) {
            a += &b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .named()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v * v).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.0
            .named()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

impl std::ops::Deref for Gradients {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl std::ops::DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}
