use serde::{Deserialize, Serialize};

use super::{mask_iou, MetricsError};
use crate::engine::Detection;
use crate::types::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchKind {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FP")]
    FalsePositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub scan_id: String,
    /// Index into the prediction list as supplied.
    pub prediction_index: usize,
    pub score: f64,
    pub matched_gt_index: Option<usize>,
    /// IoU with the matched instance for TPs; best IoU against any instance
    /// for FPs.
    pub iou: f64,
    pub kind: MatchKind,
}

/// Matching outcome for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub scan_id: String,
    pub records: Vec<MatchRecord>,
    pub num_ground_truth: usize,
    pub false_negatives: usize,
}

impl ImageMatches {
    pub fn true_positives(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.kind == MatchKind::TruePositive)
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.records.len() - self.true_positives()
    }
}

/// Greedy matching on mask IoU. Predictions are visited by descending score
/// (stable); each claims the unclaimed ground truth with the highest IoU when
/// that IoU is strictly above `iou_threshold`.
pub fn match_detections(
    scan_id: &str,
    predictions: &[Detection],
    ground_truth: &[Mask],
    iou_threshold: f64,
) -> Result<ImageMatches, MetricsError> {
    let masks: Vec<&Mask> = predictions.iter().map(|d| &d.mask).collect();
    let scores: Vec<f64> = predictions.iter().map(|d| d.score).collect();
    match_masks(scan_id, &masks, &scores, ground_truth, iou_threshold)
}

pub(crate) fn match_masks(
    scan_id: &str,
    masks: &[&Mask],
    scores: &[f64],
    ground_truth: &[Mask],
    iou_threshold: f64,
) -> Result<ImageMatches, MetricsError> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut claimed = vec![false; ground_truth.len()];
    let mut records = Vec::with_capacity(masks.len());
    for idx in order {
        let ious = ground_truth
            .iter()
            .map(|gt| mask_iou(masks[idx], gt))
            .collect::<Result<Vec<_>, _>>()?;
        let best_any = ious.iter().copied().fold(0.0, f64::max);
        let best_free = ious.iter().enumerate().filter(|(g, _)| !claimed[*g]).fold(
            None,
            |best: Option<(usize, f64)>, (g, &iou)| match best {
                Some((_, b)) if b >= iou => best,
                _ => Some((g, iou)),
            },
        );
        let record = match best_free {
            Some((g, iou)) if iou > iou_threshold => {
                claimed[g] = true;
                MatchRecord {
                    scan_id: scan_id.to_string(),
                    prediction_index: idx,
                    score: scores[idx],
                    matched_gt_index: Some(g),
                    iou,
                    kind: MatchKind::TruePositive,
                }
            }
            _ => MatchRecord {
                scan_id: scan_id.to_string(),
                prediction_index: idx,
                score: scores[idx],
                matched_gt_index: None,
                iou: best_any,
                kind: MatchKind::FalsePositive,
            },
        };
        records.push(record);
    }
    Ok(ImageMatches {
        scan_id: scan_id.to_string(),
        num_ground_truth: ground_truth.len(),
        false_negatives: claimed.iter().filter(|c| !**c).count(),
        records,
    })
}
