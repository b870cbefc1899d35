//! Word vector tables: loading, skip-gram training, combination and coverage.

mod table;
mod word2vec;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_tag, DialogueExample, Vocabulary};

pub use table::{
    load_table, load_vectors, read_vectors, save_table, write_table, EmbeddingTable, LoadReport,
    Provenance, VectorFormat,
};
pub use word2vec::{train_word2vec, Word2vecConfig};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("vector file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("{bad} of {total} vector lines have the wrong number of values")]
    TooManyMalformed { bad: usize, total: usize },
    #[error("vector has {got} components, table dim is {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding dimension must be >= 1, got {0}")]
    InvalidDim(usize),
    #[error("invalid word2vec config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

/// Concatenates pretrained vectors `U` (dim d1) with task-trained vectors `V`
/// (dim d2) over the keys `(S ∩ P) ∪ T`, where `S` and `T` are the key sets of
/// the two tables and `P` the task vocabulary. A side that lacks the word
/// contributes zeros.
///
/// Pretrained keys come first (in pretrained order), then trained-only keys.
/// Task words found in neither table are left out; the model gives them zero rows.
pub fn combine_embeddings(
    pretrained: &EmbeddingTable,
    trained: &EmbeddingTable,
    task_vocab: &Vocabulary,
) -> Result<EmbeddingTable, EmbedError> {
    let (d1, d2) = (pretrained.dim(), trained.dim());
    if d1 == 0 || d2 == 0 {
        return Err(EmbedError::InvalidDim(0));
    }
    let mut out = EmbeddingTable::new(d1 + d2, Provenance::Combined)?;
    let mut row = vec![0f32; d1 + d2];
    for (word, u) in pretrained.iter() {
        if !task_vocab.contains(word) {
            continue;
        }
        row[..d1].copy_from_slice(u);
        match trained.get(word) {
            Some(v) => row[d1..].copy_from_slice(v),
            None => row[d1..].iter_mut().for_each(|x| *x = 0.0),
        }
        out.insert(word, &row)?;
    }
    row[..d1].iter_mut().for_each(|x| *x = 0.0);
    for (word, v) in trained.iter() {
        if out.contains(word) {
            continue;
        }
        row[d1..].copy_from_slice(v);
        out.insert(word, &row)?;
    }
    Ok(out)
}

/// How much of a corpus a table's key set covers, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub pct_unique_tokens_covered: f64,
    pub pct_token_occurrences_covered: f64,
    /// Share of all occurrences that are `__eou__` / `__eot__`.
    pub tag_occurrence_pct: f64,
}

pub fn coverage<'a>(
    table: &EmbeddingTable,
    examples: impl IntoIterator<Item = &'a DialogueExample>,
) -> Result<CoverageReport, EmbedError> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for ex in examples {
        for t in ex.context.iter().chain(&ex.response) {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(EmbedError::EmptyInput("corpus has no tokens"));
    }
    let (mut covered_types, mut covered_occ, mut total_occ, mut tag_occ) = (0u64, 0u64, 0u64, 0u64);
    for (&tok, &n) in &freq {
        total_occ += n;
        if table.contains(tok) {
            covered_types += 1;
            covered_occ += n;
        }
        if is_tag(tok) {
            tag_occ += n;
        }
    }
    let pct = |a: u64, b: u64| 100.0 * a as f64 / b as f64;
    Ok(CoverageReport {
        pct_unique_tokens_covered: pct(covered_types, freq.len() as u64),
        pct_token_occurrences_covered: pct(covered_occ, total_occ),
        tag_occurrence_pct: pct(tag_occ, total_occ),
    })
}

/// Text table with one row per named table plus the tag share row.
pub fn format_coverage_table(rows: &[(&str, CoverageReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once("__eou__ and __eot__".len()))
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>16}  {:>12}", "", "% unique tokens", "% tokens");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>16.2}  {:>12.2}",
            name, r.pct_unique_tokens_covered, r.pct_token_occurrences_covered
        );
    }
    if let Some((_, r)) = rows.first() {
        let _ = writeln!(s, "{:<width$}  {:>16}  {:>12.2}", "__eou__ and __eot__", "-", r.tag_occurrence_pct);
    }
    s
}
