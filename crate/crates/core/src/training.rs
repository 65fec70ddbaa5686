//! Mini-batch supervised training with early stopping on a validation score.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evalkit::csv_io;
use crate::nnet::{backward, optimizer_step, AdamState, LossSpec, ModelParams};
use crate::seqcodec::SequenceEncoding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            max_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg10: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains `init` over `num_examples` examples. `make_batch` turns example
/// indices into encodings and a loss; `validate` scores a parameter set
/// (higher is better). One CSV row `epoch,train_loss,val_ndcg10` is
/// appended to `log` per epoch.
pub(crate) fn fit<F, V>(
    init: ModelParams,
    num_examples: usize,
    config: &TrainConfig,
    mut make_batch: F,
    mut validate: V,
    log: Option<&Path>,
) -> Result<TrainOutcome>
where
    F: FnMut(&[usize]) -> Result<(Vec<SequenceEncoding>, LossSpec)>,
    V: FnMut(&ModelParams) -> Result<f64>,
{
    config.validate()?;
    if num_examples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut writer = match log {
        Some(path) => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
            w.write_record(["epoch", "train_loss", "val_ndcg10"])?;
            w.flush().at(path)?;
            Some((w, path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD50F);
    let use_dropout = init.config.dropout_rate > 0.0;
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..num_examples).collect();

    let mut best = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (encodings, spec) = make_batch(chunk)?;
            let dropout = use_dropout.then_some(&mut dropout_rng);
            let mut out =
                backward(&params, &encodings, &spec, 1.0, dropout).map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::Diverged(format!("epoch {epoch}, batch {b}: {what}"))
                    }
                    other => other,
                })?;
            if let Some(max) = config.max_grad_norm {
                out.grads.clip_norm(max);
            }
            optimizer_step(&mut params, &out.grads, &mut adam, config.learning_rate)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += out.loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val = validate(&params)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_ndcg10: val,
        };
        log::info!("epoch {epoch}: train loss {train_loss:.5}, validation NDCG@10 {val:.5}");
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(record)?;
            w.flush().at(*path)?;
        }
        epochs.push(record);
        // a tie refreshes the kept parameters (later epochs have trained
        // longer) but does not reset the patience counter
        if val >= best_val {
            best = params.clone();
            best_epoch = epoch;
        }
        if val > best_val {
            best_val = val;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        epochs,
        stopped_early,
    })
}
