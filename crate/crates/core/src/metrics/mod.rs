//! Evaluation mathematics: IoU, greedy matching, precision-recall, AP and
//! mean IoU, plus whole-dataset evaluation reports.
//!
//! Matching is done on mask IoU with a strict `>` threshold. AP is reported at
//! a single IoU threshold (0.5 by default) with all-points interpolation; with
//! one foreground class, mAP and AP coincide.

mod iou;
mod matching;
mod pr;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::engine::{EngineError, ModelConfig, Segmenter};
use crate::types::{BBox, Mask};

pub use iou::{box_iou, box_iou_unchecked, mask_iou};
pub use matching::{match_detections, ImageMatches, MatchKind, MatchRecord};
pub use pr::{average_precision, pr_curve, PRPoint};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("scan {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub value: f64,
    /// Set when there was nothing to average.
    pub empty: bool,
}

/// Arithmetic mean of per-instance best-match IoUs; `None` (unmatched) counts
/// as 0.
pub fn mean_iou(per_instance: &[Option<f64>]) -> MeanIou {
    if per_instance.is_empty() {
        return MeanIou {
            value: 0.0,
            empty: true,
        };
    }
    let sum: f64 = per_instance.iter().map(|v| v.unwrap_or(0.0)).sum();
    MeanIou {
        value: sum / per_instance.len() as f64,
        empty: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Mask IoU a prediction must exceed to count as a true positive.
    pub match_iou_threshold: f64,
    /// Predictions below this score are ignored for mean IoU (but still ranked
    /// for the PR curve).
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_iou_threshold: 0.5,
            score_threshold: 0.5,
        }
    }
}

impl From<&ModelConfig> for EvalConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            match_iou_threshold: c.roi_iou_threshold,
            score_threshold: c.detection_score_threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    #[serde(flatten)]
    pub matches: ImageMatches,
    /// Best mask IoU reached by any above-threshold prediction, per ground
    /// truth instance.
    pub best_iou_per_instance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub mean_iou_empty: bool,
    /// AP at `config.match_iou_threshold`; equals mAP for one class.
    pub ap: f64,
    pub config: EvalConfig,
    pub counts: Counts,
    pub pr_curve: Vec<PRPoint>,
    pub per_image: Vec<ImageEvaluation>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Predicts every scan, matches against ground truth and assembles the report.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    test_set: &Dataset,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    for scan in test_set {
        if scan.ground_truth().is_none() {
            return Err(MetricsError::MissingGroundTruth(scan.scan_id.clone()));
        }
    }
    let mut per_image = Vec::with_capacity(test_set.len());
    let mut all_records = Vec::new();
    let mut per_instance = Vec::new();
    let mut counts = Counts::default();
    for scan in test_set {
        let gt = scan.ground_truth().expect("checked above");
        let detections = model.predict(scan.image())?;
        let matches = match_detections(
            &scan.scan_id,
            &detections,
            gt.masks(),
            config.match_iou_threshold,
        )?;

        let confident: Vec<&Mask> = detections
            .iter()
            .filter(|d| d.score >= config.score_threshold)
            .map(|d| &d.mask)
            .collect();
        let mut best = Vec::with_capacity(gt.masks().len());
        for gt_mask in gt.masks() {
            let mut top = 0.0f64;
            for m in &confident {
                top = top.max(mask_iou(m, gt_mask)?);
            }
            best.push(top);
        }
        per_instance.extend(best.iter().map(|&v| Some(v)));

        counts.tp += matches.true_positives();
        counts.fp += matches.false_positives();
        counts.fn_ += matches.false_negatives;
        all_records.extend(matches.records.iter().cloned());
        per_image.push(ImageEvaluation {
            matches,
            best_iou_per_instance: best,
        });
    }
    let total_gt = counts.tp + counts.fn_;
    let curve = pr_curve(&all_records, total_gt);
    let miou = mean_iou(&per_instance);
    Ok(EvalReport {
        mean_iou: miou.value,
        mean_iou_empty: miou.empty,
        ap: average_precision(&curve),
        config: *config,
        counts,
        pr_curve: curve,
        per_image,
    })
}
