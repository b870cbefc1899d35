use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};

use nextutt::corpus::{parse_pair_file, parse_ranking_file, DialogueExample, RankingGroup};
use nextutt::embed::{read_vectors, EmbeddingTable, Provenance, VectorFormat};
use nextutt::metrics::GroupScores;

use crate::config::{CorpusConfig, VectorFormatName};

pub fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

pub fn read_pairs(path: &Path, corpus: &CorpusConfig) -> Result<Vec<DialogueExample>> {
    open(path)?;
    parse_pair_file(path, corpus.pair_options())?
        .collect::<Result<_, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn read_groups(path: &Path, corpus: &CorpusConfig) -> Result<Vec<RankingGroup>> {
    open(path)?;
    parse_ranking_file(path, corpus.layout(), corpus.pair_options())?
        .collect::<Result<_, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn looks_like_word2vec(first_line: &str) -> bool {
    let fields: Vec<&str> = first_line.split_whitespace().collect();
    fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok())
}

pub fn read_table(path: &Path, format: VectorFormatName, provenance: Provenance) -> Result<EmbeddingTable> {
    let mut r = BufReader::new(open(path)?);
    let format = match format {
        VectorFormatName::Glove => VectorFormat::GloveText,
        VectorFormatName::Word2vec => VectorFormat::Word2vecText,
        VectorFormatName::Auto => {
            let first = r.fill_buf()?;
            let end = first.iter().position(|&b| b == b'\n').unwrap_or(first.len());
            if looks_like_word2vec(&String::from_utf8_lossy(&first[..end])) {
                VectorFormat::Word2vecText
            } else {
                VectorFormat::GloveText
            }
        }
    };
    let (table, report) = read_vectors(r, format, provenance).with_context(|| format!("reading {}", path.display()))?;
    log::info!(
        "{}: {} vectors of dim {} ({} wrong arity, {} unparseable, {} duplicates skipped)",
        path.display(),
        table.len(),
        table.dim(),
        report.wrong_arity,
        report.unparseable,
        report.duplicates
    );
    Ok(table)
}

/// `name=path` pairs; a bare path is named by its file stem.
pub fn named_path(spec: &str) -> (String, &Path) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), Path::new(path)),
        _ => {
            let p = Path::new(spec);
            (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.into()), p)
        }
    }
}

const SCORE_HEADER: [&str; 4] = ["group", "candidate", "label", "score"];

/// Long-form scores; floats use the shortest text that reads back to the same bits.
pub fn write_scores(path: &Path, groups: &[GroupScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(SCORE_HEADER)?;
    for (g, s) in groups.iter().enumerate() {
        for (c, (label, score)) in s.labels.iter().zip(&s.scores).enumerate() {
            w.write_record([g.to_string(), c.to_string(), label.to_string(), score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
#[error("score file line {line}: {reason}")]
pub struct ScoreFileError {
    pub line: u64,
    pub reason: String,
}

pub fn read_scores(path: &Path) -> Result<Vec<GroupScores>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    if r.headers()?.iter().collect::<Vec<_>>() != SCORE_HEADER {
        bail!(ScoreFileError { line: 1, reason: format!("header must be {}", SCORE_HEADER.join(",")) });
    }
    let mut out: Vec<GroupScores> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| ScoreFileError { line, reason };
        if rec.len() != 4 {
            bail!(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        let g: usize = rec[0].parse().map_err(|_| bad(format!("bad group {:?}", &rec[0])))?;
        let c: usize = rec[1].parse().map_err(|_| bad(format!("bad candidate {:?}", &rec[1])))?;
        let label: u8 = match &rec[2] {
            "0" => 0,
            "1" => 1,
            other => bail!(bad(format!("bad label {other:?}"))),
        };
        let score: f64 = rec[3].parse().map_err(|_| bad(format!("bad score {:?}", &rec[3])))?;
        if g == out.len() {
            out.push(GroupScores::new(Vec::new(), Vec::new()));
        }
        if g + 1 != out.len() {
            bail!(bad("groups must be numbered 0, 1, 2, ... in order".into()));
        }
        let group = &mut out[g];
        if c != group.labels.len() {
            bail!(bad("candidates must be numbered 0, 1, 2, ... in order".into()));
        }
        group.labels.push(label);
        group.scores.push(score);
    }
    Ok(out)
}
