//! Stage one: train the generative student to reproduce teacher lists with
//! the language-modelling loss.

use std::path::Path;

use crate::dataset::{ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::evalkit::{mean_ndcg, Strategy};
use crate::nnet::{loss_value, LossSpec, ModelParams};
use crate::seqcodec::{encode_state, Layout};
use crate::teacher::TeacherLists;
use crate::training::{fit, TrainConfig, TrainOutcome};

/// `-sum_i log pi(g_i | h, g_<i)` over the teacher list, from one
/// full-sequence pass with the list placed in the generation slots.
pub fn lm_loss(params: &ModelParams, history: &[ItemId], teacher_list: &[ItemId]) -> Result<f64> {
    let cfg = &params.config;
    if teacher_list.len() != cfg.k {
        return Err(Error::InvalidInput(format!(
            "teacher list has {} items, the model generates {}",
            teacher_list.len(),
            cfg.k
        )));
    }
    let enc = encode_state(history, teacher_list, cfg.n_max, cfg.k, cfg.vocab())?;
    loss_value(params, &[enc], &LossSpec::Lm)
}

/// Trains `init` on the teacher list of every user's training prefix and
/// keeps the epoch with the best validation NDCG@10 under Next-K.
pub fn pretrain_student(
    init: ModelParams,
    lists: &TeacherLists,
    split: &SplitDataset,
    config: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = init.config.clone();
    if cfg.layout != Layout::Generative {
        return Err(Error::Config(
            "the student must use the generative layout".into(),
        ));
    }
    if cfg.num_items != split.num_items {
        return Err(Error::Config(format!(
            "model has {} items, dataset has {}",
            cfg.num_items, split.num_items
        )));
    }
    if lists.k != cfg.k {
        return Err(Error::Config(format!(
            "teacher lists have length {}, the model generates {}",
            lists.k, cfg.k
        )));
    }
    let by_user = lists.by_user();
    let examples: Vec<(&[ItemId], &[ItemId])> = split
        .users
        .iter()
        .map(|u| {
            by_user
                .get(u.user_id.as_str())
                .map(|&l| (u.train.as_slice(), l))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("no teacher list for user {}", u.user_id))
                })
        })
        .collect::<Result<_>>()?;
    let validation = split.validation_cases();
    if validation.is_empty() {
        return Err(Error::Config(
            "distillation needs validation users for model selection".into(),
        ));
    }
    let vocab = cfg.vocab();
    let eval_k = 10.min(cfg.k);
    fit(
        init,
        examples.len(),
        config,
        |idx| {
            let encodings = idx
                .iter()
                .map(|&i| encode_state(examples[i].0, examples[i].1, cfg.n_max, cfg.k, vocab))
                .collect::<Result<Vec<_>>>()?;
            Ok((encodings, LossSpec::Lm))
        },
        |p| mean_ndcg(p, &validation, eval_k, Strategy::NextK),
        log,
    )
}
