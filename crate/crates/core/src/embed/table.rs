use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexSet;
use log::warn;

use super::EmbedError;

/// Where a table's vectors came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    Trained,
    Combined,
}

/// Token-keyed vectors of a fixed dimension, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    keys: IndexSet<String>,
    vectors: Vec<f32>,
    provenance: Provenance,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provenance: Provenance) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidDim(0));
        }
        Ok(EmbeddingTable {
            dim,
            keys: IndexSet::new(),
            vectors: Vec::new(),
            provenance,
        })
    }

    /// Adds `token`. Returns `Ok(false)` without modifying the table when the
    /// token is already present.
    pub fn insert(&mut self, token: impl Into<String>, vector: &[f32]) -> Result<bool, EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if !self.keys.insert(token.into()) {
            return Ok(false);
        }
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.keys
            .get_index_of(token)
            .map(|i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.keys.contains(token)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .zip(self.vectors.chunks_exact(self.dim))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Zeroes every vector in place.
    pub fn zeroed(mut self) -> Self {
        self.vectors.iter_mut().for_each(|x| *x = 0.0);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    /// `token f1 f2 ...` per line.
    GloveText,
    /// `count dim` header line, then the GloVe body.
    Word2vecText,
}

/// Lines skipped while loading a vector file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub body_lines: usize,
    pub wrong_arity: usize,
    pub unparseable: usize,
    pub duplicates: usize,
}

/// Rejected-arity lines tolerated before loading fails, as a fraction of body lines.
const ARITY_TOLERANCE: f64 = 0.01;

pub fn load_vectors(path: impl AsRef<Path>, format: VectorFormat) -> Result<(EmbeddingTable, LoadReport), EmbedError> {
    read_vectors(BufReader::new(File::open(path)?), format, Provenance::Pretrained)
}

pub fn read_vectors<R: BufRead>(
    r: R,
    format: VectorFormat,
    provenance: Provenance,
) -> Result<(EmbeddingTable, LoadReport), EmbedError> {
    let mut lines = r.lines().enumerate();
    let mut header_dim = None;
    if format == VectorFormat::Word2vecText {
        let (_, line) = lines.next().ok_or(EmbedError::Format {
            line: 1,
            reason: "missing header".into(),
        })?;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [n, d] => n.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
            _ => None,
        };
        let (_, d) = parsed.ok_or(EmbedError::Format {
            line: 1,
            reason: format!("expected \"count dim\" header, got {line:?}"),
        })?;
        header_dim = Some(d);
    }

    let mut report = LoadReport::default();
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.body_lines += 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        let dim = match &table {
            Some(t) => t.dim(),
            None => {
                let d = values.len();
                if let Some(h) = header_dim {
                    if h != d {
                        return Err(EmbedError::Format {
                            line: i + 1,
                            reason: format!("header dim {h} but first vector has {d} values"),
                        });
                    }
                }
                table = Some(EmbeddingTable::new(d, provenance).map_err(|_| EmbedError::Format {
                    line: i + 1,
                    reason: "first vector has no values".into(),
                })?);
                d
            }
        };
        if values.len() != dim {
            report.wrong_arity += 1;
            continue;
        }
        let parsed: Result<Vec<f32>, _> = values.iter().map(|v| v.parse::<f32>()).collect();
        let Ok(vector) = parsed else {
            report.unparseable += 1;
            continue;
        };
        let t = table.as_mut().expect("table initialised above");
        if !t.insert(token, &vector)? {
            report.duplicates += 1;
        }
    }

    if report.wrong_arity as f64 > ARITY_TOLERANCE * report.body_lines as f64 {
        return Err(EmbedError::TooManyMalformed {
            bad: report.wrong_arity,
            total: report.body_lines,
        });
    }
    if report.wrong_arity + report.unparseable + report.duplicates > 0 {
        warn!(
            "vector file: {} wrong-arity, {} unparseable, {} duplicate lines skipped",
            report.wrong_arity, report.unparseable, report.duplicates
        );
    }
    let table = match (table, header_dim) {
        (Some(t), _) => t,
        (None, Some(d)) => EmbeddingTable::new(d, provenance)?,
        (None, None) => {
            return Err(EmbedError::Format {
                line: 0,
                reason: "no vectors".into(),
            })
        }
    };
    Ok((table, report))
}

/// Writes `table` as word2vec text. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_table<W: Write>(mut w: W, table: &EmbeddingTable) -> Result<(), EmbedError> {
    writeln!(w, "{} {}", table.len(), table.dim())?;
    for (token, v) in table.iter() {
        w.write_all(token.as_bytes())?;
        for x in v {
            write!(w, " {x}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), EmbedError> {
    write_table(BufWriter::new(File::create(path)?), table)
}

pub fn load_table(path: impl AsRef<Path>, provenance: Provenance) -> Result<EmbeddingTable, EmbedError> {
    let (t, _) = read_vectors(
        BufReader::new(File::open(path)?),
        VectorFormat::Word2vecText,
        provenance,
    )?;
    Ok(t)
}
