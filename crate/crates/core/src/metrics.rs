//! Ranking metrics over scored candidate groups.
//!
//! Candidates are ordered by descending score; equal scores keep their
//! original order, so a positive listed first wins a tie. R@k counts a hit
//! when any positive lands in the top k. MAP uses standard average precision.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("group {group}: {labels} labels but {scores} scores")]
    Arity { group: usize, labels: usize, scores: usize },
    #[error("group {group}: score {index} is not finite")]
    NonFinite { group: usize, index: usize },
    #[error("group {group} has no candidates")]
    Empty { group: usize },
}

/// Candidate labels (1 = relevant) with model scores, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

impl GroupScores {
    pub fn new(labels: Vec<u8>, scores: Vec<f64>) -> Self {
        GroupScores { labels, scores }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    pub p_at_1: f64,
    pub mrr: f64,
    pub map: f64,
    pub n_groups_scored: usize,
    pub n_groups_skipped: usize,
}

impl MetricsReport {
    /// `(name, value)` for the six metrics, in report column order.
    pub fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("R@1", self.r_at_1),
            ("R@2", self.r_at_2),
            ("R@5", self.r_at_5),
            ("P@1", self.p_at_1),
            ("MRR", self.mrr),
            ("MAP", self.map),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, _) in self.values() {
            write!(f, "{name:>8}")?;
        }
        writeln!(f, "{:>10}{:>10}", "groups", "skipped")?;
        for (_, v) in self.values() {
            write!(f, "{v:>8.4}")?;
        }
        writeln!(f, "{:>10}{:>10}", self.n_groups_scored, self.n_groups_skipped)
    }
}

/// Candidate indices sorted by descending score, ties by index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Per-group outcome: 1-based rank of the first positive and average precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupOutcome {
    pub first_positive_rank: Option<usize>,
    pub average_precision: f64,
}

pub fn group_outcome(labels: &[u8], scores: &[f64]) -> GroupOutcome {
    let order = rank_order(scores);
    let mut first = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos + 1);
        }
    }
    GroupOutcome {
        first_positive_rank: first,
        average_precision: if hits == 0 { 0.0 } else { precision_sum / hits as f64 },
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Totals {
    hits: [u64; 3],
    p1: u64,
    rr: f64,
    ap: f64,
    scored: usize,
    skipped: usize,
}

/// Aggregates every group. With `filter_degenerate`, groups whose candidates
/// are all positive or all negative are skipped; otherwise a group without a
/// positive contributes 0 to every metric.
pub fn evaluate<G: Borrow<GroupScores>>(
    groups: impl IntoIterator<Item = G>,
    filter_degenerate: bool,
) -> Result<MetricsReport, MetricsError> {
    let mut t = Totals::default();
    for (gi, g) in groups.into_iter().enumerate() {
        let g = g.borrow();
        if g.labels.len() != g.scores.len() {
            return Err(MetricsError::Arity {
                group: gi,
                labels: g.labels.len(),
                scores: g.scores.len(),
            });
        }
        if g.labels.is_empty() {
            return Err(MetricsError::Empty { group: gi });
        }
        if let Some(index) = g.scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite { group: gi, index });
        }
        let n_pos = g.labels.iter().filter(|&&l| l == 1).count();
        if filter_degenerate && (n_pos == 0 || n_pos == g.labels.len()) {
            t.skipped += 1;
            continue;
        }
        t.scored += 1;
        let o = group_outcome(&g.labels, &g.scores);
        if let Some(r) = o.first_positive_rank {
            for (h, k) in t.hits.iter_mut().zip([1, 2, 5]) {
                if r <= k {
                    *h += 1;
                }
            }
            if r == 1 {
                t.p1 += 1;
            }
            t.rr += 1.0 / r as f64;
        }
        t.ap += o.average_precision;
    }
    let n = t.scored.max(1) as f64;
    Ok(MetricsReport {
        r_at_1: t.hits[0] as f64 / n,
        r_at_2: t.hits[1] as f64 / n,
        r_at_5: t.hits[2] as f64 / n,
        p_at_1: t.p1 as f64 / n,
        mrr: t.rr / n,
        map: t.ap / n,
        n_groups_scored: t.scored,
        n_groups_skipped: t.skipped,
    })
}

/// Per-metric comparison of two reports (`b - a`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedReport {
    pub rows: Vec<(&'static str, f64, f64, f64)>,
    pub warning: Option<String>,
}

pub fn paired_report(a: &MetricsReport, b: &MetricsReport) -> PairedReport {
    let rows = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&(name, x), (_, y))| (name, x, y, y - x))
        .collect();
    let warning = (a.n_groups_scored != b.n_groups_scored).then(|| {
        format!(
            "warning: reports scored different group counts ({} vs {})",
            a.n_groups_scored, b.n_groups_scored
        )
    });
    PairedReport { rows, warning }
}

impl fmt::Display for PairedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6}{:>10}{:>10}{:>10}", "metric", "a", "b", "delta")?;
        for (name, a, b, d) in &self.rows {
            writeln!(f, "{name:<6}{a:>10.4}{b:>10.4}{d:>+10.4}")?;
        }
        if let Some(w) = &self.warning {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_positive_at(rank: usize) -> GroupScores {
        // candidate 0 is positive; scores put it at `rank` (1-based)
        let mut scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        scores[0] = 10.5 - rank as f64;
        let mut labels = vec![0; 10];
        labels[0] = 1;
        GroupScores::new(labels, scores)
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let r = evaluate([one_positive_at(1)], false).unwrap();
        for (_, v) in r.values() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn positive_third_matches_analytic_values() {
        let r = evaluate([one_positive_at(3)], false).unwrap();
        assert_eq!((r.r_at_1, r.r_at_2, r.r_at_5), (0.0, 0.0, 1.0));
        assert!((r.mrr - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_keep_original_order() {
        let g = GroupScores::new(vec![0, 1, 0], vec![0.5, 0.5, 0.5]);
        assert_eq!(group_outcome(&g.labels, &g.scores).first_positive_rank, Some(2));
        assert_eq!(rank_order(&[1.0, 3.0, 3.0, 2.0]), [1, 2, 3, 0]);
    }

    #[test]
    fn multiple_positives_use_average_precision() {
        // ranked: pos, neg, pos -> AP = (1/1 + 2/3) / 2
        let g = GroupScores::new(vec![1, 0, 1], vec![0.9, 0.8, 0.7]);
        let r = evaluate([g], false).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn degenerate_groups_are_filtered_on_request() {
        let groups = vec![
            one_positive_at(2),
            GroupScores::new(vec![0, 0], vec![0.1, 0.2]),
            GroupScores::new(vec![1, 1], vec![0.1, 0.2]),
        ];
        let r = evaluate(&groups, true).unwrap();
        assert_eq!((r.n_groups_scored, r.n_groups_skipped), (1, 2));
        assert_eq!(r.r_at_2, 1.0);
        let r = evaluate(&groups, false).unwrap();
        assert_eq!((r.n_groups_scored, r.n_groups_skipped), (3, 0));
        assert!((r.r_at_1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bad_groups_are_rejected() {
        let g = GroupScores::new(vec![1, 0], vec![0.5]);
        assert!(matches!(evaluate([g], false), Err(MetricsError::Arity { .. })));
        let g = GroupScores::new(vec![1, 0], vec![0.5, f64::NAN]);
        assert_eq!(evaluate([g], false), Err(MetricsError::NonFinite { group: 0, index: 1 }));
    }

    #[test]
    fn paired_deltas_are_b_minus_a() {
        let a = MetricsReport { r_at_1: 0.717, r_at_2: 0.839, r_at_5: 0.964, p_at_1: 0.717, mrr: 0.818, map: 0.818, n_groups_scored: 10, n_groups_skipped: 0 };
        let b = MetricsReport { r_at_1: 0.683, n_groups_scored: 9, ..a };
        let p = paired_report(&a, &b);
        assert!((p.rows[0].3 - -0.034).abs() < 1e-12);
        assert!(p.rows[1..].iter().all(|r| r.3 == 0.0));
        let s = p.to_string();
        assert!(s.contains("-0.0340") && s.contains("+0.0000"));
        assert!(p.warning.is_some());
        assert!(paired_report(&a, &a).warning.is_none());
    }

    #[test]
    fn report_renders_text_and_json() {
        let r = evaluate([one_positive_at(2)], false).unwrap();
        assert!(r.to_string().contains("R@1"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn arb_group() -> impl Strategy<Value = GroupScores> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(-3i32..4, n),
            )
                .prop_map(|(labels, s)| GroupScores::new(labels, s.into_iter().map(f64::from).collect()))
        })
    }

    proptest! {
        #[test]
        fn strictly_increasing_transform_leaves_metrics_unchanged(groups in proptest::collection::vec(arb_group(), 1..20)) {
            let moved: Vec<GroupScores> = groups
                .iter()
                .map(|g| GroupScores::new(g.labels.clone(), g.scores.iter().map(|s| (s * 0.5).exp() + 3.0).collect()))
                .collect();
            prop_assert_eq!(evaluate(&groups, false).unwrap(), evaluate(&moved, false).unwrap());
        }

        #[test]
        fn group_order_does_not_matter(groups in proptest::collection::vec(arb_group(), 1..20), filter in any::<bool>()) {
            let a = evaluate(&groups, filter).unwrap();
            let b = evaluate(groups.iter().rev(), filter).unwrap();
            for ((_, x), (_, y)) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn report_invariants_hold(groups in proptest::collection::vec(arb_group(), 0..20), filter in any::<bool>()) {
            let r = evaluate(&groups, filter).unwrap();
            prop_assert!(r.values().iter().all(|(_, v)| (0.0..=1.0).contains(v)));
            prop_assert!(r.r_at_1 <= r.r_at_2 && r.r_at_2 <= r.r_at_5);
            prop_assert_eq!(r.n_groups_scored + r.n_groups_skipped, groups.len());
        }

        #[test]
        fn adding_a_top_ranked_group_never_hurts(groups in proptest::collection::vec(arb_group(), 1..20)) {
            let before = evaluate(&groups, false).unwrap();
            let mut more = groups.clone();
            more.push(one_positive_at(1));
            let after = evaluate(&more, false).unwrap();
            for ((_, x), (_, y)) in before.values().iter().zip(after.values()) {
                prop_assert!(y >= x - 1e-12);
            }
        }
    }
}
