use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{CorpusError, DialogueExample};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token frequencies, mergeable across shards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenCounts {
    counts: HashMap<String, u64>,
}

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tokens<'a>(&mut self, tokens: impl IntoIterator<Item = &'a String>) {
        for t in tokens {
            *self.counts.entry(t.clone()).or_insert(0) += 1;
        }
    }

    pub fn add_example(&mut self, ex: &DialogueExample) {
        self.add_tokens(&ex.context);
        self.add_tokens(&ex.response);
    }

    pub fn merge(&mut self, other: TokenCounts) {
        for (t, c) in other.counts {
            *self.counts.entry(t).or_insert(0) += c;
        }
    }

    pub fn get(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(t, &c)| (t.as_str(), c))
    }

    /// Tokens with count >= `min_count`, ordered by descending count then lexicographically.
    pub fn into_vocabulary(self, min_count: u64) -> Vocabulary {
        let mut kept: Vec<(String, u64)> = self
            .counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_sorted(kept)
    }
}

/// Token <-> id mapping. Id 0 is padding, id 1 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_sorted(Vec::new())
    }
}

impl Vocabulary {
    fn from_sorted(entries: Vec<(String, u64)>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = vec![0, 0];
        let mut index = HashMap::with_capacity(entries.len());
        for (t, c) in entries {
            index.insert(t.clone(), tokens.len() as u32);
            tokens.push(t);
            counts.push(c);
        }
        Vocabulary {
            tokens,
            counts,
            index,
        }
    }

    /// Number of ids, including padding and unknown.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved ids exist.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Regular (non-reserved) tokens in id order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[2..].iter().map(String::as_str)
    }

    /// One `token<TAB>count` line per regular token, in id order.
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, c) in self.tokens[2..].iter().zip(&self.counts[2..]) {
            writeln!(w, "{t}\t{c}")?;
        }
        w.flush()
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |reason: &str| CorpusError::BadVocabulary {
                line: i + 1,
                reason: reason.into(),
            };
            let (tok, count) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(bad("token empty or contains whitespace"));
            }
            let count = count.trim().parse::<u64>().map_err(|_| bad("bad count"))?;
            entries.push((tok.to_string(), count));
        }
        let vocab = Self::from_sorted(entries);
        if vocab.index.len() + 2 != vocab.tokens.len() {
            return Err(CorpusError::BadVocabulary {
                line: 0,
                reason: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

/// Vocabulary over every context and response token of `examples`.
pub fn build_vocabulary<'a>(
    examples: impl IntoIterator<Item = &'a DialogueExample>,
    min_count: u64,
) -> Vocabulary {
    let mut counts = TokenCounts::new();
    for ex in examples {
        counts.add_example(ex);
    }
    counts.into_vocabulary(min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(ctx: &str, resp: &str) -> DialogueExample {
        DialogueExample {
            context: ctx.split_whitespace().map(String::from).collect(),
            response: resp.split_whitespace().map(String::from).collect(),
            label: 1,
        }
    }

    #[test]
    fn ids_follow_frequency_then_lexicographic_order() {
        let ex = [example("a a", "b")];
        let v = build_vocabulary(&ex, 1);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("zzz"), UNK_ID);
        let v = build_vocabulary(&ex, 2);
        assert!(!v.contains("b"));
        assert_eq!(v.len(), 3);

        let ex = [example("c b", "a")];
        let v = build_vocabulary(&ex, 1);
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_stream_has_only_reserved_ids() {
        let v = build_vocabulary(&[], 1);
        assert_eq!(v.len(), 2);
        assert!(v.is_empty());
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
    }

    #[test]
    fn toy_corpus_sizes_match_hand_count() {
        // types and counts counted by hand:
        // the:4 __eou__:3 cat:2 dog:2 mat:2 on:2 sat:2 a:1 log:1 ran:1
        let corpus = [
            example("the cat sat", "on the mat"),
            example("the dog ran", "__eou__"),
            example("a dog sat on", "the log"),
            example("cat __eou__", "mat __eou__"),
        ];
        let v1 = build_vocabulary(&corpus, 1);
        assert_eq!(v1.len(), 2 + 10);
        assert_eq!(v1.count(v1.id("the")), 4);
        assert_eq!(v1.id("the"), 2);
        assert_eq!(v1.id("__eou__"), 3);
        let v2 = build_vocabulary(&corpus, 2);
        assert_eq!(v2.len(), 2 + 7);
        let v3 = build_vocabulary(&corpus, 3);
        assert_eq!(v3.len(), 2 + 2);
    }

    #[test]
    fn shard_merge_is_order_independent() {
        let shards = [example("a b c", "a"), example("b b", "d"), example("e", "a c")];
        let mut forward = TokenCounts::new();
        let mut backward = TokenCounts::new();
        for s in &shards {
            let mut c = TokenCounts::new();
            c.add_example(s);
            forward.merge(c);
        }
        for s in shards.iter().rev() {
            let mut c = TokenCounts::new();
            c.add_example(s);
            backward.merge(c);
        }
        assert_eq!(forward.into_vocabulary(1), backward.into_vocabulary(1));
    }

    proptest! {
        #[test]
        fn save_load_round_trip(words in proptest::collection::vec("[a-z_]{1,6}", 0..40)) {
            let ex = DialogueExample { context: words.clone(), response: vec!["x".into()], label: 0 };
            let v = build_vocabulary([&ex], 1);
            let mut buf = Vec::new();
            v.save(&mut buf).unwrap();
            let back = Vocabulary::load(&buf[..]).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
