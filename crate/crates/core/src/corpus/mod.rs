//! Dialogue corpora: tokenization, labeled pairs, ranking groups, vocabularies.

mod reader;
mod stats;
mod vocab;

use std::io;

use thiserror::Error;

pub use reader::{
    parse_pair_file, parse_ranking_file, read_pairs, read_ranking, write_pair_file, Delimiter,
    PairFileOptions, RankingLayout,
};
pub use stats::{compute_stats, CorpusStats};
pub use vocab::{build_vocabulary, TokenCounts, Vocabulary, PAD_ID, UNK_ID};

/// End-of-utterance marker.
pub const EOU: &str = "__eou__";
/// End-of-turn marker.
pub const EOT: &str = "__eot__";

pub fn is_tag(token: &str) -> bool {
    token == EOU || token == EOT
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("ranking group at line {line}: {reason}")]
    BadGroup { line: u64, reason: String },
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabulary { line: usize, reason: String },
}

impl From<csv::Error> for CorpusError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CorpusError::Io(io),
            other => CorpusError::Malformed {
                line,
                reason: format!("{other:?}"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizeOptions {
    /// Lowercase every token except the turn/utterance tags.
    pub lowercase: bool,
    /// Drop `__eou__` and `__eot__`.
    pub strip_tags: bool,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        TokenizeOptions {
            lowercase: true,
            strip_tags: false,
        }
    }
}

/// Splits pre-tokenized text on whitespace.
pub fn tokenize(text: &str, opts: TokenizeOptions) -> Vec<String> {
    text.split_whitespace()
        .filter(|t| !(opts.strip_tags && is_tag(t)))
        .map(|t| {
            if opts.lowercase && !is_tag(t) {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// A labeled (context, response) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub context: Vec<String>,
    pub response: Vec<String>,
    pub label: u8,
}

impl DialogueExample {
    /// Keeps the last `max_context` context tokens and the first `max_response`
    /// response tokens.
    pub fn truncate(&self, max_context: usize, max_response: usize) -> DialogueExample {
        truncate(self, max_context, max_response)
    }
}

pub fn truncate(example: &DialogueExample, max_context: usize, max_response: usize) -> DialogueExample {
    let ctx = &example.context;
    let start = ctx.len().saturating_sub(max_context.max(1));
    DialogueExample {
        context: ctx[start..].to_vec(),
        response: example.response[..example.response.len().min(max_response.max(1))].to_vec(),
        label: example.label,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub response: Vec<String>,
    pub label: u8,
}

/// One context with its scored candidates, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingGroup {
    pub context: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl RankingGroup {
    pub fn labels(&self) -> Vec<u8> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }

    /// The group flattened into (context, candidate) pairs.
    pub fn examples(&self) -> impl Iterator<Item = DialogueExample> + '_ {
        self.candidates.iter().map(move |c| DialogueExample {
            context: self.context.clone(),
            response: c.response.clone(),
            label: c.label,
        })
    }

    /// Applies `f` to the context and every candidate response.
    pub fn map_tokens(&self, f: impl Fn(&[String]) -> Vec<String>) -> RankingGroup {
        RankingGroup {
            context: f(&self.context),
            candidates: self
                .candidates
                .iter()
                .map(|c| Candidate {
                    response: f(&c.response),
                    label: c.label,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenize_lowercases_but_keeps_tags() {
        let opts = TokenizeOptions { lowercase: true, strip_tags: false };
        assert_eq!(tokenize("Fix SSH __eou__ __eot__", opts), toks("fix ssh __eou__ __eot__"));
        let opts = TokenizeOptions { lowercase: true, strip_tags: true };
        assert_eq!(tokenize("Fix SSH __eou__ __eot__", opts), toks("fix ssh"));
        assert!(tokenize("", opts).is_empty());
        assert!(tokenize("  \t\n ", TokenizeOptions::default()).is_empty());
    }

    #[test]
    fn tokenize_without_lowercasing_preserves_case() {
        let opts = TokenizeOptions { lowercase: false, strip_tags: false };
        assert_eq!(tokenize("Fix  SSH\t__EOU__", opts), toks("Fix SSH __EOU__"));
    }

    #[test]
    fn truncate_keeps_recent_context_and_leading_response() {
        let ex = DialogueExample {
            context: (0..200).map(|i| i.to_string()).collect(),
            response: toks("a b c"),
            label: 1,
        };
        let t = truncate(&ex, 160, 2);
        assert_eq!(t.context.len(), 160);
        assert_eq!(t.context[0], "40");
        assert_eq!(t.context[159], "199");
        assert_eq!(t.response, toks("a b"));

        let short = DialogueExample { context: toks("x y"), response: toks("z"), label: 0 };
        assert_eq!(truncate(&short, 160, 40), short);
    }

    proptest! {
        #[test]
        fn strip_tags_equals_deleting_tags(words in proptest::collection::vec(
            prop_oneof![Just("__eou__".to_string()), Just("__eot__".to_string()), "[A-Za-z]{1,5}"],
            0..20,
        )) {
            let text = words.join(" ");
            let kept = TokenizeOptions { lowercase: true, strip_tags: false };
            let stripped = TokenizeOptions { lowercase: true, strip_tags: true };
            let expected: Vec<String> = tokenize(&text, kept).into_iter().filter(|t| !is_tag(t)).collect();
            prop_assert_eq!(tokenize(&text, stripped), expected);
        }

        #[test]
        fn truncate_is_idempotent(m in 1usize..30, n in 1usize..30, mc in 1usize..20, mr in 1usize..20) {
            let ex = DialogueExample {
                context: (0..m).map(|i| format!("c{i}")).collect(),
                response: (0..n).map(|i| format!("r{i}")).collect(),
                label: 0,
            };
            let once = truncate(&ex, mc, mr);
            prop_assert_eq!(truncate(&once, mc, mr), once);
        }
    }
}
