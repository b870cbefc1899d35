//! Next-utterance selection toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: dialogue file parsing, tokenization, vocabularies and corpus statistics.
//! - [`embed`]: word vector tables, a skip-gram trainer, the pretrained/task-trained
//!   vector combination and coverage reports.
//! - [`tensor`]: a small reverse-mode autodiff engine with LSTM building blocks.
//! - [`esim`]: the ESIM matching model with character-composed word vectors.
//! - [`baseline`]: average-of-word-vectors cosine ranking.
//! - [`metrics`]: R@k, P@1, MRR and MAP over ranking groups.

pub mod baseline;
pub mod corpus;
pub mod embed;
pub mod esim;
pub mod metrics;
pub mod tensor;
