//! Named-tensor archive.
//!
//! Layout: a UTF-8 manifest followed by a little-endian `f32` payload.
//!
//! ```text
//! NTAR1 <count>\n
//! <name>\t<dim,dim,...>\t<byte offset>\n      (count lines)
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Scalars have an empty shape field.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use super::Tensor;

const MAGIC: &str = "NTAR1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed archive manifest at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("invalid tensor name {0:?}")]
    BadName(String),
    #[error("payload too short for tensor {0}")]
    Truncated(String),
}

pub fn write_archive<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<(), ArchiveError> {
    writeln!(w, "{MAGIC} {}", tensors.len())?;
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['\t', '\n', '\r']) {
            return Err(ArchiveError::BadName(name.clone()));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name}\t{}\t{offset}", dims.join(","))?;
        offset += t.numel() * 4;
    }
    for (_, t) in tensors {
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive<R: BufRead>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, ArchiveError> {
    let bad = |line: usize, reason: &str| ArchiveError::Manifest {
        line,
        reason: reason.to_string(),
    };
    let mut header = String::new();
    r.read_line(&mut header)?;
    let count: usize = header
        .trim_end()
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(1, "missing NTAR1 header"))?;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad(i + 2, "unexpected end of manifest"));
        }
        let fields: Vec<&str> = line.trim_end_matches(['\n', '\r']).split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(i + 2, "expected name, shape, offset"));
        }
        let shape = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(i + 2, "bad shape"))?
        };
        let offset: usize = fields[2].parse().map_err(|_| bad(i + 2, "bad offset"))?;
        entries.push((fields[0].to_string(), shape, offset));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    entries
        .into_iter()
        .map(|(name, shape, offset)| {
            let numel: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + numel * 4)
                .ok_or_else(|| ArchiveError::Truncated(name.clone()))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ArchiveError::Manifest {
                line: 0,
                reason: e.to_string(),
            })?;
            Ok((name, t))
        })
        .collect()
}
