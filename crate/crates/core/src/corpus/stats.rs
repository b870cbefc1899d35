use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DialogueExample;

/// Pair counts and length medians of a labeled corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_positive_pairs: u64,
    pub n_negative_pairs: u64,
    pub n_contexts: u64,
    pub median_context_tokens: usize,
    pub median_response_tokens: usize,
}

/// Lower median (element `(n-1)/2` of the sorted values); 0 when empty.
fn lower_median(mut v: Vec<usize>) -> usize {
    if v.is_empty() {
        return 0;
    }
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable(mid).1
}

/// Statistics over untruncated examples. Contexts are counted by distinct token sequence.
pub fn compute_stats<'a>(examples: impl IntoIterator<Item = &'a DialogueExample>) -> CorpusStats {
    let mut pos = 0;
    let mut neg = 0;
    let mut contexts: HashSet<&[String]> = HashSet::new();
    let mut ctx_lens = Vec::new();
    let mut resp_lens = Vec::new();
    for ex in examples {
        if ex.label == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        contexts.insert(&ex.context);
        ctx_lens.push(ex.context.len());
        resp_lens.push(ex.response.len());
    }
    CorpusStats {
        n_positive_pairs: pos,
        n_negative_pairs: neg,
        n_contexts: contexts.len() as u64,
        median_context_tokens: lower_median(ctx_lens),
        median_response_tokens: lower_median(resp_lens),
    }
}

impl fmt::Display for CorpusStats {
    /// Flat `key: value` report.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "positive_pairs: {}", self.n_positive_pairs)?;
        writeln!(f, "negative_pairs: {}", self.n_negative_pairs)?;
        writeln!(f, "contexts: {}", self.n_contexts)?;
        writeln!(f, "median_context_tokens: {}", self.median_context_tokens)?;
        writeln!(f, "median_response_tokens: {}", self.median_response_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(ctx_len: usize, resp_len: usize, label: u8, ctx_id: usize) -> DialogueExample {
        DialogueExample {
            context: (0..ctx_len).map(|i| format!("c{ctx_id}_{i}")).collect(),
            response: (0..resp_len).map(|i| format!("r{i}")).collect(),
            label,
        }
    }

    #[test]
    fn even_count_uses_lower_median() {
        let s = compute_stats(&[ex(3, 1, 1, 0), ex(5, 2, 0, 1)]);
        assert_eq!(s.median_context_tokens, 3);
        assert_eq!(s.median_response_tokens, 1);
    }

    #[test]
    fn six_examples_match_brute_force() {
        let set = vec![
            ex(7, 2, 1, 0),
            ex(7, 4, 0, 0),
            ex(2, 9, 1, 1),
            ex(11, 1, 0, 2),
            ex(4, 3, 0, 3),
            ex(4, 5, 1, 3),
        ];
        let s = compute_stats(&set);

        // brute force: sort and pick index (n-1)/2; count distinct contexts pairwise
        let mut c: Vec<usize> = set.iter().map(|e| e.context.len()).collect();
        let mut r: Vec<usize> = set.iter().map(|e| e.response.len()).collect();
        c.sort();
        r.sort();
        let distinct = (0..set.len())
            .filter(|&i| (0..i).all(|j| set[j].context != set[i].context))
            .count();
        assert_eq!(s.median_context_tokens, c[2]);
        assert_eq!(s.median_response_tokens, r[2]);
        assert_eq!(s.n_contexts as usize, distinct);
        assert_eq!(s.n_positive_pairs, 3);
        assert_eq!(s.n_negative_pairs, 3);
        assert_eq!((s.median_context_tokens, s.median_response_tokens, s.n_contexts), (4, 3, 4));
    }

    #[test]
    fn empty_corpus_is_all_zero() {
        let s = compute_stats(&[]);
        assert_eq!(s.n_contexts, 0);
        assert_eq!(s.median_context_tokens, 0);
    }

    #[test]
    fn report_formats() {
        let s = compute_stats(&[ex(3, 1, 1, 0)]);
        assert!(s.to_string().contains("median_context_tokens: 3"));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<CorpusStats>(&json).unwrap(), s);
    }
}
