//! Average-of-word-vectors ranking: a document is the mean of its known
//! tokens' vectors and candidates are ranked by cosine to the context.

use std::fmt::Write as _;

use crate::corpus::RankingGroup;
use crate::embed::EmbeddingTable;
use crate::metrics::{self, GroupScores, MetricsError, MetricsReport};

/// Mean of the known tokens' vectors. OOV tokens are skipped, not averaged in as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct DocVector {
    sum: Vec<f64>,
    pub n_known: usize,
}

impl DocVector {
    /// The averaged vector; all zeros when no token was known.
    pub fn vector(&self) -> Vec<f64> {
        let n = self.n_known.max(1) as f64;
        self.sum.iter().map(|x| x / n).collect()
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }
}

pub fn embed_doc<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> DocVector {
    let mut sum = vec![0f64; table.dim()];
    let mut n_known = 0;
    for t in tokens {
        if let Some(v) = table.get(t.as_ref()) {
            n_known += 1;
            for (s, &x) in sum.iter_mut().zip(v) {
                *s += f64::from(x);
            }
        }
    }
    DocVector { sum, n_known }
}

/// Cosine similarity, 0 when either side is the zero vector.
pub fn cosine(a: &DocVector, b: &DocVector) -> f64 {
    // The unnormalized sum points the same way as the mean, and using it keeps
    // scores independent of how many zero-vector tokens were counted.
    cosine_raw(&a.sum, &b.sum)
}

fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Candidate scores in candidate order.
pub fn cosine_scores(context: &DocVector, candidates: &[DocVector]) -> Vec<f64> {
    candidates.iter().map(|c| cosine(context, c)).collect()
}

/// `(candidate index, score)` by descending score; ties keep candidate order.
pub fn rank_by_cosine(context: &DocVector, candidates: &[DocVector]) -> Vec<(usize, f64)> {
    let scores = cosine_scores(context, candidates);
    metrics::rank_order(&scores)
        .into_iter()
        .map(|i| (i, scores[i]))
        .collect()
}

pub fn score_group(group: &RankingGroup, table: &EmbeddingTable) -> GroupScores {
    let ctx = embed_doc(&group.context, table);
    let cands: Vec<DocVector> = group.candidates.iter().map(|c| embed_doc(&c.response, table)).collect();
    GroupScores::new(group.labels(), cosine_scores(&ctx, &cands))
}

pub fn evaluate_table(
    groups: &[RankingGroup],
    table: &EmbeddingTable,
    filter_degenerate: bool,
) -> Result<MetricsReport, MetricsError> {
    metrics::evaluate(groups.iter().map(|g| score_group(g, table)), filter_degenerate)
}

/// Metric values per named table, as an aligned text table.
pub fn comparison_table(rows: &[(&str, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}", "table");
    if let Some((_, r)) = rows.first() {
        for (name, _) in r.values() {
            let _ = write!(s, "{name:>8}");
        }
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "{name:<width$}");
        for (_, v) in r.values() {
            let _ = write!(s, "{v:>8.4}");
        }
        s.push('\n');
    }
    s
}

/// Long-form `table,metric,value` CSV for plotting.
pub fn comparison_csv(rows: &[(&str, MetricsReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "metric", "value"]).expect("in-memory write");
    for (name, r) in rows {
        for (metric, v) in r.values() {
            w.write_record([*name, metric, &v.to_string()]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Provenance;
    use proptest::prelude::*;

    fn table(rows: &[(&str, &[f32])]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(rows[0].1.len(), Provenance::Pretrained).unwrap();
        for (k, v) in rows {
            t.insert(*k, v).unwrap();
        }
        t
    }

    #[test]
    fn doc_vector_is_mean_of_known_tokens() {
        let t = table(&[("x", &[1., 0.]), ("y", &[0., 1.])]);
        assert_eq!(embed_doc(&["x"], &t).vector(), [1.0, 0.0]);
        let d = embed_doc(&["x", "oov", "y"], &t);
        assert_eq!(d.vector(), [0.5, 0.5]);
        assert_eq!(d.n_known, 2);
        let d = embed_doc(&["oov"], &t);
        assert_eq!((d.vector(), d.n_known), (vec![0.0, 0.0], 0));
    }

    #[test]
    fn cosine_edge_cases() {
        let t = table(&[("x", &[1., 2.]), ("y", &[-2., 1.])]);
        let x = embed_doc(&["x"], &t);
        let ranked = rank_by_cosine(&x, &[embed_doc(&["y"], &t), embed_doc(&["x"], &t), embed_doc(&["zz"], &t)]);
        assert_eq!(ranked[0].0, 1);
        assert!((ranked[0].1 - 1.0).abs() < 1e-15);
        // orthogonal and zero candidates both score 0 and keep their order
        assert_eq!(ranked[1], (0, 0.0));
        assert_eq!(ranked[2], (2, 0.0));
    }

    #[test]
    fn comparison_outputs_name_every_metric() {
        let r = MetricsReport { r_at_1: 0.5, r_at_2: 0.6, r_at_5: 0.9, p_at_1: 0.5, mrr: 0.6, map: 0.6, n_groups_scored: 4, n_groups_skipped: 0 };
        let text = comparison_table(&[("pretrained", r), ("combined", r)]);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("MAP"));
        let csv = comparison_csv(&[("pretrained", r)]);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("pretrained,R@5,0.9"));
    }

    fn arb_vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), n)
    }

    fn doc(v: &[f32]) -> DocVector {
        DocVector { sum: v.iter().map(|&x| f64::from(x)).collect(), n_known: 1 }
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force_sort(ctx in arb_vecs(1), cands in arb_vecs(10)) {
            let c = doc(&ctx[0]);
            let ds: Vec<DocVector> = cands.iter().map(|v| doc(v)).collect();
            let got = rank_by_cosine(&c, &ds);
            // oracle: score independently, then selection by (score desc, index asc)
            let mut remaining: Vec<(usize, f64)> = ds.iter().enumerate().map(|(i, d)| {
                let a: Vec<f64> = ctx[0].iter().map(|&x| x as f64).collect();
                let b = d.vector();
                (i, cosine_raw(&a, &b))
            }).collect();
            let mut want = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for k in 1..remaining.len() {
                    if remaining[k].1 > remaining[best].1 { best = k; }
                }
                want.push(remaining.remove(best));
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn positive_scaling_keeps_scores(ctx in arb_vecs(1), cands in arb_vecs(5), k in 0usize..5, lambda in 0.01f64..100.0) {
            let c = doc(&ctx[0]);
            let mut ds: Vec<DocVector> = cands.iter().map(|v| doc(v)).collect();
            let before = cosine_scores(&c, &ds);
            ds[k].sum.iter_mut().for_each(|x| *x *= lambda);
            let after = cosine_scores(&c, &ds);
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_candidates_permutes_results(ctx in arb_vecs(1), cands in arb_vecs(6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let c = doc(&ctx[0]);
            let ds: Vec<DocVector> = cands.iter().map(|v| doc(v)).collect();
            let permuted: Vec<DocVector> = perm.iter().map(|&i| ds[i].clone()).collect();
            let a = cosine_scores(&c, &ds);
            let b = cosine_scores(&c, &permuted);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a[i], b[j]);
            }
        }
    }
}
