//! Score grid and the review summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Allowed scores: `min`, `min + step`, ..., `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for ScoreGrid {
    fn default() -> Self {
        ScoreGrid {
            min: 1.0,
            max: 5.0,
            step: 0.5,
        }
    }
}

impl ScoreGrid {
    pub fn is_valid(&self) -> bool {
        self.step > 0.0 && self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    pub fn contains(&self, score: f64) -> bool {
        if !score.is_finite() || score < self.min - 1e-9 || score > self.max + 1e-9 {
            return false;
        }
        let k = (score - self.min) / self.step;
        (k - k.round()).abs() < 1e-9
    }

    pub fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step).round() as usize;
        (0..=n).map(|k| self.min + k as f64 * self.step).collect()
    }
}

pub const DEFAULT_VALIDITY_THRESHOLD: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grade {
    pub reviewer_id: String,
    pub patient_id: String,
    pub slice_index: u32,
    pub score: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerStats {
    pub graded: usize,
    pub mean_score: f64,
    /// Count per score, keyed by the score printed with one decimal.
    pub distribution: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub validity_threshold: f64,
    pub graded_records: usize,
    pub graded_slices: usize,
    /// Share of grade records at or above the threshold, in percent.
    pub percent_valid: f64,
    pub per_reviewer: BTreeMap<String, ReviewerStats>,
    /// Slices graded by at least two reviewers.
    pub double_graded_slices: usize,
    pub inter_observer_mean_diff: Option<f64>,
    pub inter_observer_std_diff: Option<f64>,
}

/// Summary document; `empty` is set when nothing has been graded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub empty: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<ReviewSummary>,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Summarizes the current grades. Returns `None` when there are none.
///
/// Each slice graded by two or more reviewers contributes |s1 - s2| for
/// every reviewer pair.
pub fn summarize(grades: &[Grade], threshold: f64) -> Option<ReviewSummary> {
    if grades.is_empty() {
        return None;
    }
    let valid = grades.iter().filter(|g| g.score >= threshold).count();

    let mut by_reviewer: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_slice: BTreeMap<(&str, u32), BTreeMap<&str, f64>> = BTreeMap::new();
    for g in grades {
        by_reviewer.entry(&g.reviewer_id).or_default().push(g.score);
        by_slice
            .entry((&g.patient_id, g.slice_index))
            .or_default()
            .insert(&g.reviewer_id, g.score);
    }

    let per_reviewer = by_reviewer
        .into_iter()
        .map(|(id, scores)| {
            let mut distribution = BTreeMap::new();
            for s in &scores {
                *distribution.entry(format!("{s:.1}")).or_insert(0) += 1;
            }
            let stats = ReviewerStats {
                graded: scores.len(),
                mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
                distribution,
            };
            (id.to_string(), stats)
        })
        .collect();

    let mut diffs = Vec::new();
    let mut double_graded = 0;
    for scores in by_slice.values() {
        let s: Vec<f64> = scores.values().copied().collect();
        if s.len() >= 2 {
            double_graded += 1;
        }
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                diffs.push((s[i] - s[j]).abs());
            }
        }
    }
    let inter = mean_std(&diffs);

    Some(ReviewSummary {
        validity_threshold: threshold,
        graded_records: grades.len(),
        graded_slices: by_slice.len(),
        percent_valid: 100.0 * valid as f64 / grades.len() as f64,
        per_reviewer,
        double_graded_slices: double_graded,
        inter_observer_mean_diff: inter.map(|m| m.0),
        inter_observer_std_diff: inter.map(|m| m.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(r: &str, p: &str, s: u32, score: f64) -> Grade {
        Grade {
            reviewer_id: r.into(),
            patient_id: p.into(),
            slice_index: s,
            score,
            timestamp_ms: 0,
        }
    }

    #[test]
    fn grid_membership() {
        let grid = ScoreGrid::default();
        assert!(grid.contains(4.5) && grid.contains(1.0) && grid.contains(5.0));
        assert!(!grid.contains(3.25) && !grid.contains(0.5) && !grid.contains(5.5) && !grid.contains(f64::NAN));
        assert_eq!(grid.values().len(), 9);
    }

    #[test]
    fn swapped_scores_differ_by_one() {
        let grades = [g("a", "p", 0, 4.0), g("a", "p", 1, 5.0), g("b", "p", 0, 5.0), g("b", "p", 1, 4.0)];
        let s = summarize(&grades, 3.5).unwrap();
        assert_eq!(s.inter_observer_mean_diff, Some(1.0));
        assert_eq!(s.inter_observer_std_diff, Some(0.0));
        assert_eq!(s.double_graded_slices, 2);
    }

    #[test]
    fn two_of_three_valid() {
        let grades = [g("a", "p", 0, 3.0), g("a", "p", 1, 3.5), g("a", "p", 2, 4.0)];
        let s = summarize(&grades, 3.5).unwrap();
        assert!((s.percent_valid - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.inter_observer_mean_diff, None);
        assert_eq!(s.per_reviewer["a"].distribution["3.5"], 1);
    }

    #[test]
    fn nothing_graded() {
        assert!(summarize(&[], 3.5).is_none());
    }
}
