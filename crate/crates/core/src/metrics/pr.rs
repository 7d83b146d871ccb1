use serde::{Deserialize, Serialize};

use super::{MatchKind, MatchRecord};

/// One operating point of the precision-recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall at every distinct score, highest first.
///
/// Precision with no predictions is 1; recall with no ground truth is 0.
pub fn pr_curve(records: &[MatchRecord], total_gt: usize) -> Vec<PRPoint> {
    let mut sorted: Vec<&MatchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            match sorted[i].kind {
                MatchKind::TruePositive => tp += 1,
                MatchKind::FalsePositive => fp += 1,
            }
            i += 1;
        }
        curve.push(PRPoint {
            threshold,
            precision: ratio_or(tp, tp + fp, 1.0),
            recall: ratio_or(tp, total_gt, 0.0),
        });
    }
    curve
}

fn ratio_or(num: usize, den: usize, fallback: f64) -> f64 {
    if den == 0 {
        fallback
    } else {
        num as f64 / den as f64
    }
}

/// All-points interpolated AP: the sum over recall increments of the increment
/// times the best precision achieved at that recall or beyond.
pub fn average_precision(curve: &[PRPoint]) -> f64 {
    let mut points: Vec<PRPoint> = curve.to_vec();
    points.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &interp) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * interp;
        prev_recall = p.recall;
    }
    ap
}
