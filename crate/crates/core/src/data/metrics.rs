use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EntitySpan;

/// Precision, recall and F1 together with the counts behind them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "mEP")]
    pub precision: f64,
    #[serde(rename = "mER")]
    pub recall: f64,
    #[serde(rename = "mEF")]
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// Counts to scores. With nothing predicted, precision is 1 if there was
    /// also nothing to find and 0 otherwise; recall mirrors this.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(correct, predicted, gold);
        let recall = ratio(correct, gold, predicted);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub per_entity: BTreeMap<String, Prf>,
    pub overall_micro: Prf,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Plain-text table with one row per entity and a final overall row.
    pub fn table(&self) -> String {
        let width = self
            .per_entity
            .keys()
            .map(String::len)
            .chain(["overall".len()])
            .max()
            .unwrap_or(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "entity", "mEP", "mER", "mEF", "gold");
        let mut row = |name: &str, m: &Prf| {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6}",
                name,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                m.gold
            );
        };
        for (name, m) in &self.per_entity {
            row(name, m);
        }
        row("overall", &self.overall_micro);
        s
    }
}

/// Entity-level scores. A prediction is correct when a not-yet-matched gold
/// span of the same document has the same entity and exactly the same text.
/// Segment indices do not take part in matching.
pub fn compute_metrics(predicted: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> MetricsReport {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    let docs = predicted.len().max(gold.len());
    let empty = Vec::new();
    for d in 0..docs {
        let p = predicted.get(d).unwrap_or(&empty);
        let g = gold.get(d).unwrap_or(&empty);
        let mut pool: HashMap<(&str, &str), usize> = HashMap::new();
        for s in g {
            *pool.entry((&s.entity, &s.text)).or_default() += 1;
            counts.entry(s.entity.clone()).or_default()[2] += 1;
        }
        for s in p {
            let c = counts.entry(s.entity.clone()).or_default();
            c[1] += 1;
            if let Some(n) = pool.get_mut(&(s.entity.as_str(), s.text.as_str())) {
                if *n > 0 {
                    *n -= 1;
                    c[0] += 1;
                }
            }
        }
    }
    let per_entity: BTreeMap<String, Prf> = counts
        .iter()
        .map(|(e, c)| (e.clone(), Prf::from_counts(c[0], c[1], c[2])))
        .collect();
    let total = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    MetricsReport {
        format: super::FORMAT_VERSION.to_string(),
        per_entity,
        overall_micro: Prf::from_counts(total[0], total[1], total[2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(e: &str, t: &str) -> EntitySpan {
        EntitySpan {
            entity: e.into(),
            text: t.into(),
            segment_index: 0,
        }
    }

    #[test]
    fn identical_is_perfect() {
        let g = vec![vec![span("A", "x"), span("B", "y")], vec![span("A", "z")]];
        let m = compute_metrics(&g, &g);
        assert_eq!((m.overall_micro.precision, m.overall_micro.recall, m.overall_micro.f1), (1.0, 1.0, 1.0));
        assert!(m.per_entity.values().all(|p| p.f1 == 1.0));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let g = vec![vec![span("A", "x")]];
        let m = compute_metrics(&[vec![]], &g);
        assert_eq!((m.overall_micro.precision, m.overall_micro.recall, m.overall_micro.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_correct() {
        // gold {A:x, A:y}; predicted {A:x, A:w}: one match out of two on either side
        let g = vec![vec![span("A", "x"), span("A", "y")]];
        let p = vec![vec![span("A", "x"), span("A", "w")]];
        let m = compute_metrics(&p, &g).overall_micro;
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn gold_matched_at_most_once() {
        let g = vec![vec![span("A", "x")]];
        let p = vec![vec![span("A", "x"), span("A", "x")]];
        let m = compute_metrics(&p, &g).overall_micro;
        assert_eq!((m.correct, m.predicted, m.gold), (1, 2, 1));
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn matching_is_per_document() {
        let g = vec![vec![span("A", "x")], vec![]];
        let p = vec![vec![], vec![span("A", "x")]];
        assert_eq!(compute_metrics(&p, &g).overall_micro.correct, 0);
    }

    #[test]
    fn wrong_entity_does_not_match() {
        let m = compute_metrics(&[vec![span("B", "x")]], &[vec![span("A", "x")]]);
        assert_eq!(m.per_entity["A"].recall, 0.0);
        assert_eq!(m.per_entity["B"].precision, 0.0);
    }

    #[test]
    fn table_lists_every_entity() {
        let g = vec![vec![span("DATE", "x"), span("TOTAL", "y")]];
        let t = compute_metrics(&g, &g).table();
        assert!(t.contains("DATE") && t.contains("TOTAL") && t.contains("overall"));
        assert!(t.contains("100.00"));
    }
}
