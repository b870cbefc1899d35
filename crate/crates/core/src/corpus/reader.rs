use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{tokenize, Candidate, CorpusError, DialogueExample, RankingGroup, TokenizeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Csv,
    Tsv,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Csv => b',',
            Delimiter::Tsv => b'\t',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairFileOptions {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub tokenize: TokenizeOptions,
}

impl Default for PairFileOptions {
    fn default() -> Self {
        PairFileOptions {
            delimiter: Delimiter::Csv,
            has_header: true,
            tokenize: TokenizeOptions::default(),
        }
    }
}

/// How candidates are laid out in a ranking file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingLayout {
    /// One record per group: context, ground-truth response, then distractors.
    Grouped,
    /// `group_size` consecutive (context, response, label) records sharing a context.
    Triples { group_size: usize },
}

fn csv_reader<R: Read>(r: R, opts: &PairFileOptions) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(opts.delimiter.byte())
        .has_headers(opts.has_header)
        .flexible(true)
        .from_reader(r)
}

fn parse_label(field: &str, line: u64) -> Result<u8, CorpusError> {
    match field.trim() {
        "1" | "1.0" => Ok(1),
        "0" | "0.0" => Ok(0),
        other => Err(CorpusError::Malformed {
            line,
            reason: format!("label must be 0 or 1, got {other:?}"),
        }),
    }
}

fn tokens_of(field: &str, opts: TokenizeOptions, line: u64, what: &str) -> Result<Vec<String>, CorpusError> {
    let toks = tokenize(field, opts);
    if toks.is_empty() {
        return Err(CorpusError::Malformed {
            line,
            reason: format!("empty {what} after tokenization"),
        });
    }
    Ok(toks)
}

fn triple(record: &csv::StringRecord, opts: &PairFileOptions) -> Result<(u64, DialogueExample), CorpusError> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    if record.len() != 3 {
        return Err(CorpusError::Malformed {
            line,
            reason: format!("expected 3 fields, got {}", record.len()),
        });
    }
    let label = parse_label(&record[2], line)?;
    Ok((
        line,
        DialogueExample {
            context: tokens_of(&record[0], opts.tokenize, line, "context")?,
            response: tokens_of(&record[1], opts.tokenize, line, "response")?,
            label,
        },
    ))
}

/// Streaming reader of (context, response, label) records.
pub struct PairReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    opts: PairFileOptions,
}

impl<R: Read> Iterator for PairReader<R> {
    type Item = Result<DialogueExample, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        Some(
            record
                .map_err(CorpusError::from)
                .and_then(|r| triple(&r, &self.opts).map(|(_, ex)| ex)),
        )
    }
}

pub fn read_pairs<R: Read>(r: R, opts: PairFileOptions) -> PairReader<R> {
    PairReader {
        records: csv_reader(r, &opts).into_records(),
        opts,
    }
}

pub fn parse_pair_file(path: impl AsRef<Path>, opts: PairFileOptions) -> Result<PairReader<File>, CorpusError> {
    Ok(read_pairs(File::open(path)?, opts))
}

/// Writes examples back as delimited triples. Tokens are joined by single spaces.
pub fn write_pair_file<'a, W: Write>(
    w: W,
    examples: impl IntoIterator<Item = &'a DialogueExample>,
    delimiter: Delimiter,
    header: bool,
) -> Result<(), CorpusError> {
    let mut out = csv::WriterBuilder::new()
        .delimiter(delimiter.byte())
        .from_writer(w);
    if header {
        out.write_record(["Context", "Utterance", "Label"])?;
    }
    for ex in examples {
        out.write_record([
            ex.context.join(" "),
            ex.response.join(" "),
            ex.label.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader of ranking groups.
pub struct RankingReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    opts: PairFileOptions,
    layout: RankingLayout,
    pending: Option<(u64, DialogueExample)>,
    failed: bool,
}

impl<R: Read> RankingReader<R> {
    fn next_grouped(&mut self) -> Option<Result<RankingGroup, CorpusError>> {
        let record = match self.records.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e.into())),
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 3 {
            return Some(Err(CorpusError::BadGroup {
                line,
                reason: format!("{} candidates, need at least 2", record.len().saturating_sub(1)),
            }));
        }
        let tok = self.opts.tokenize;
        let build = || -> Result<RankingGroup, CorpusError> {
            let context = tokens_of(&record[0], tok, line, "context")?;
            let candidates = (1..record.len())
                .map(|i| {
                    Ok(Candidate {
                        response: tokens_of(&record[i], tok, line, "candidate")?,
                        label: u8::from(i == 1),
                    })
                })
                .collect::<Result<Vec<_>, CorpusError>>()?;
            Ok(RankingGroup { context, candidates })
        };
        Some(build())
    }

    fn next_triple(&mut self) -> Option<Result<(u64, DialogueExample), CorpusError>> {
        if let Some(p) = self.pending.take() {
            return Some(Ok(p));
        }
        let record = self.records.next()?;
        Some(record.map_err(CorpusError::from).and_then(|r| triple(&r, &self.opts)))
    }

    fn next_from_triples(&mut self, group_size: usize) -> Option<Result<RankingGroup, CorpusError>> {
        let (start_line, first) = match self.next_triple()? {
            Ok(t) => t,
            Err(e) => return Some(Err(e)),
        };
        let context = first.context;
        let mut candidates = vec![Candidate {
            response: first.response,
            label: first.label,
        }];
        while candidates.len() < group_size {
            match self.next_triple() {
                None => break,
                Some(Err(e)) => return Some(Err(e)),
                Some(Ok((line, ex))) => {
                    if ex.context != context {
                        self.pending = Some((line, ex));
                        return Some(Err(CorpusError::BadGroup {
                            line: start_line,
                            reason: format!(
                                "context changed after {} of {group_size} candidates",
                                candidates.len()
                            ),
                        }));
                    }
                    candidates.push(Candidate {
                        response: ex.response,
                        label: ex.label,
                    });
                }
            }
        }
        if candidates.len() < group_size.max(2) {
            return Some(Err(CorpusError::BadGroup {
                line: start_line,
                reason: format!("incomplete group: {} of {group_size} candidates", candidates.len()),
            }));
        }
        Some(Ok(RankingGroup { context, candidates }))
    }
}

impl<R: Read> Iterator for RankingReader<R> {
    type Item = Result<RankingGroup, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = match self.layout {
            RankingLayout::Grouped => self.next_grouped(),
            RankingLayout::Triples { group_size } => self.next_from_triples(group_size),
        };
        // group boundaries are unrecoverable after a triple-mode error
        if matches!(item, Some(Err(_))) && matches!(self.layout, RankingLayout::Triples { .. }) {
            self.failed = true;
        }
        item
    }
}

pub fn read_ranking<R: Read>(r: R, layout: RankingLayout, opts: PairFileOptions) -> RankingReader<R> {
    RankingReader {
        records: csv_reader(r, &opts).into_records(),
        opts,
        layout,
        pending: None,
        failed: false,
    }
}

pub fn parse_ranking_file(
    path: impl AsRef<Path>,
    layout: RankingLayout,
    opts: PairFileOptions,
) -> Result<RankingReader<File>, CorpusError> {
    Ok(read_ranking(File::open(path)?, layout, opts))
}
