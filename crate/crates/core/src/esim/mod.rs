//! ESIM sequence matcher with character-composed word representations.
//!
//! A token is represented by its (possibly zero) word vector joined with the
//! final states of a character BiLSTM. Context and response are encoded by a
//! shared BiLSTM, soft-aligned through co-attention, enriched with
//! difference and product features, re-encoded by an aggregation BiLSTM, and
//! pooled into `[max_a; max_b; last_a; last_b]` for a two-layer classifier.

mod checkpoint;
mod model;
mod score;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::embed::EmbedError;
use crate::tensor::{ArchiveError, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use model::{
    aggregate_and_pool, attend, char_compose, char_compose_batch, embedding_matrix, enrich, forward,
    loss, predict, represent, Attention, Batch, EsimModel, EsimParams, EsimVars, Forward, Pooled,
    Side,
};
pub use score::{
    ensemble_score, ensemble_score_groups, score, score_groups, score_pairs, token_signal_strength,
    SignalStrength,
};
pub use train::{learning_rate, train, Adam, TrainLogLine, TrainOptions, TrainOutcome};

/// The 68 recognised characters; anything else maps to the unknown row.
/// Uppercase ASCII letters are folded to lowercase first.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
pub const CHAR_ALPHABET_SIZE: usize = 69;
pub const UNKNOWN_CHAR: usize = CHAR_ALPHABET_SIZE - 1;

pub fn char_id(c: char) -> usize {
    let c = c.to_ascii_lowercase();
    if !c.is_ascii() {
        return UNKNOWN_CHAR;
    }
    ALPHABET
        .bytes()
        .position(|b| b == c as u8)
        .unwrap_or(UNKNOWN_CHAR)
}

/// Character ids of `token`, keeping at most `max_chars`.
pub fn char_ids(token: &str, max_chars: usize) -> Vec<usize> {
    token.chars().take(max_chars).map(char_id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsimConfig {
    /// Width of the word-vector part; must match the embedding table.
    pub word_dim: usize,
    pub char_hidden: usize,
    pub ctx_hidden: usize,
    pub mlp_hidden: usize,
    pub char_alphabet_size: usize,
    /// Characters read per token; longer tokens are cut.
    pub max_token_chars: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Context tokens kept (the last ones).
    pub max_context: usize,
    /// Response tokens kept (the first ones).
    pub max_response: usize,
    pub trainable_word_embeddings: bool,
    pub seed: u64,
}

impl Default for EsimConfig {
    fn default() -> Self {
        EsimConfig {
            word_dim: 400,
            char_hidden: 40,
            ctx_hidden: 200,
            mlp_hidden: 256,
            char_alphabet_size: CHAR_ALPHABET_SIZE,
            max_token_chars: 20,
            batch_size: 128,
            epochs: 10,
            initial_lr: 0.001,
            lr_decay_rate: 0.96,
            lr_decay_steps: 5000,
            grad_clip: Some(10.0),
            max_context: 160,
            max_response: 40,
            trainable_word_embeddings: false,
            seed: 0,
        }
    }
}

impl EsimConfig {
    pub fn validate(&self) -> Result<(), EsimError> {
        let extents = [
            ("word_dim", self.word_dim),
            ("char_hidden", self.char_hidden),
            ("ctx_hidden", self.ctx_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("max_token_chars", self.max_token_chars),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_context", self.max_context),
            ("max_response", self.max_response),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(EsimError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.char_alphabet_size != CHAR_ALPHABET_SIZE {
            return Err(EsimError::Config(format!(
                "char_alphabet_size must be {CHAR_ALPHABET_SIZE}, got {}",
                self.char_alphabet_size
            )));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(EsimError::Config("initial_lr must be a positive number".into()));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate.is_finite()) {
            return Err(EsimError::Config("lr_decay_rate must be a positive number".into()));
        }
        if self.lr_decay_steps == 0 {
            return Err(EsimError::Config("lr_decay_steps must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(EsimError::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn pooled_dim(&self) -> usize {
        8 * self.ctx_hidden
    }

    /// Width of a token representation.
    pub fn token_dim(&self) -> usize {
        self.word_dim + 2 * self.char_hidden
    }
}

#[derive(Debug, Error)]
pub enum EsimError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("example {index}: {side} is empty")]
    EmptySequence { index: usize, side: &'static str },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at step {step}: loss {loss}, lr {lr}, gradient norm {grad_norm}")]
    Diverged { step: u64, loss: f64, lr: f64, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no models given for the ensemble")]
    EmptyEnsemble,
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_has_68_distinct_characters() {
        assert_eq!(ALPHABET.chars().count(), 68);
        let mut ids: Vec<usize> = ALPHABET.chars().map(char_id).collect();
        ids.dedup();
        assert_eq!(ids, (0..68).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_and_uppercase_characters() {
        assert_eq!(char_id('A'), char_id('a'));
        assert_eq!(char_id('é'), UNKNOWN_CHAR);
        assert_eq!(char_id(' '), UNKNOWN_CHAR);
        assert_eq!(char_ids("abcdef", 3), [0, 1, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(EsimConfig::default().validate().is_ok());
        let bad = EsimConfig { char_alphabet_size: 70, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EsimConfig { ctx_hidden: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(EsimConfig::default().pooled_dim(), 1600);
    }
}
