//! Input sequence layout: token ids, position ids and attention mask.
//!
//! The generative layout occupies a window of `n_max + 1 + K` slots:
//!
//! ```text
//! [PAD .. PAD, h1 .. hn, SEP, g1 .. gi, PAD .. PAD]
//!  pos 0       n .. 1    0    n_max+1 .. n_max+i
//! ```
//!
//! History is right-aligned against the separator, which always sits at slot
//! `n_max`; the generated item of rank `r` always sits at slot `n_max + r`.
//! A generation step therefore fills exactly one more slot and never moves
//! anything already placed.
//!
//! The history-only layout is used by the shifting-trained baseline: items
//! are right-aligned in the same window and each slot's position id is its
//! slot index.

use serde::{Deserialize, Serialize};

use crate::dataset::ItemId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub num_items: usize,
}

impl Vocab {
    pub fn new(num_items: usize) -> Self {
        Self { num_items }
    }

    pub fn pad(&self) -> usize {
        self.num_items
    }

    pub fn sep(&self) -> usize {
        self.num_items + 1
    }

    pub fn size(&self) -> usize {
        self.num_items + 2
    }
}

/// Which of the two sequence layouts a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// History, separator, generated list (the Next-K student and policy).
    Generative,
    /// History only, trained to predict each successor (shifting baseline).
    HistoryOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEncoding {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub history_len: usize,
    pub generated_len: usize,
    pub n_max: usize,
    pub k: usize,
    pub layout: Layout,
}

pub fn window_len(n_max: usize, k: usize) -> usize {
    n_max + 1 + k
}

/// Number of distinct position ids the window can carry.
pub fn position_table_len(n_max: usize, k: usize) -> usize {
    n_max + k + 1
}

impl SequenceEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn sep_slot(&self) -> usize {
        self.n_max
    }

    /// Slot holding the generated item of 1-based rank `rank`.
    pub fn generated_slot(&self, rank: usize) -> usize {
        self.n_max + rank
    }

    /// Slots whose outputs predict `g_1 .. g_K` (SEP, then each generated item).
    pub fn prediction_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).map(move |i| self.n_max + i)
    }
}

/// Encodes `(history, generated)` in the generative layout. History longer
/// than `n_max` is truncated to its most recent `n_max` items.
pub fn encode_state(
    history: &[ItemId],
    generated: &[ItemId],
    n_max: usize,
    k: usize,
    vocab: Vocab,
) -> Result<SequenceEncoding> {
    if history.is_empty() {
        return Err(Error::InvalidInput("history must not be empty".into()));
    }
    if generated.len() > k {
        return Err(Error::InvalidInput(format!(
            "generated list has {} items but K = {k}",
            generated.len()
        )));
    }
    check_items(history.iter().chain(generated), vocab)?;
    let history = &history[history.len().saturating_sub(n_max)..];
    let n = history.len();
    let len = window_len(n_max, k);
    let mut token_ids = vec![vocab.pad(); len];
    let mut position_ids = vec![0; len];
    let mut attention_mask = vec![0u8; len];

    let start = n_max - n;
    for (j, &item) in history.iter().enumerate() {
        let slot = start + j;
        token_ids[slot] = item;
        position_ids[slot] = n - j;
        attention_mask[slot] = 1;
    }
    token_ids[n_max] = vocab.sep();
    attention_mask[n_max] = 1;
    for (r, &item) in generated.iter().enumerate() {
        let slot = n_max + 1 + r;
        token_ids[slot] = item;
        position_ids[slot] = n_max + 1 + r;
        attention_mask[slot] = 1;
    }
    Ok(SequenceEncoding {
        token_ids,
        position_ids,
        attention_mask,
        history_len: n,
        generated_len: generated.len(),
        n_max,
        k,
        layout: Layout::Generative,
    })
}

/// Slot whose output distribution predicts the next generated item.
pub fn decode_next_position(encoding: &SequenceEncoding) -> Result<usize> {
    match encoding.layout {
        Layout::Generative => {
            if encoding.generated_len >= encoding.k {
                return Err(Error::InvalidInput(format!(
                    "episode complete: {} of {} items generated",
                    encoding.generated_len, encoding.k
                )));
            }
            Ok(encoding.n_max + encoding.generated_len)
        }
        Layout::HistoryOnly => Ok(encoding.len() - 1),
    }
}

/// Encodes a plain item sequence right-aligned in the window. Position ids
/// count from the first kept item (0, 1, ...), so under causal attention a
/// prefix is processed exactly as it was inside a longer training sequence.
/// The sequence is truncated to the window from the left.
pub fn encode_history_only(
    items: &[ItemId],
    n_max: usize,
    k: usize,
    vocab: Vocab,
) -> Result<SequenceEncoding> {
    if items.is_empty() {
        return Err(Error::InvalidInput("history must not be empty".into()));
    }
    check_items(items.iter(), vocab)?;
    let len = window_len(n_max, k);
    let items = &items[items.len().saturating_sub(len)..];
    let start = len - items.len();
    let mut token_ids = vec![vocab.pad(); len];
    let mut position_ids = vec![0; len];
    let mut attention_mask = vec![0u8; len];
    for (j, &item) in items.iter().enumerate() {
        token_ids[start + j] = item;
        position_ids[start + j] = j;
        attention_mask[start + j] = 1;
    }
    Ok(SequenceEncoding {
        token_ids,
        position_ids,
        attention_mask,
        history_len: items.len(),
        generated_len: 0,
        n_max,
        k,
        layout: Layout::HistoryOnly,
    })
}

fn check_items<'a>(items: impl Iterator<Item = &'a ItemId>, vocab: Vocab) -> Result<()> {
    for &item in items {
        if item >= vocab.num_items {
            return Err(Error::InvalidInput(format!(
                "item {item} outside catalog of {}",
                vocab.num_items
            )));
        }
    }
    Ok(())
}
