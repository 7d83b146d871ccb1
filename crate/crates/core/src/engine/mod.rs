//! Transfer-learned instance segmentation: model construction, training with
//! per-epoch checkpoints, inference and the yes/no diagnosis rule.
//!
//! Everything runs on the CPU in `f32`, single-threaded, so a fixed seed and
//! input order reproduce a run exactly.

mod backbone;
mod boxes;
mod config;
mod model;
pub mod nn;
mod roi_align;
mod train;
mod weights;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Label};
use crate::types::{BBox, Image, Mask};

pub use backbone::{
    backbone_spec, known_backbones, prepare_image, pretrain_backbone, save_backbone, Backbone,
    BackboneSpec, Normalization, Prepared, PretrainOptions, FEATURE_STRIDE,
};
pub use boxes::{
    decode_box, encode_box, filter_region_indices, filter_regions_by_iou, generate_anchors, nms,
};
pub use config::{ModelConfig, TrainLayers};
pub use model::{build_model, LossParts, Mode, SegmentationModel};
pub use roi_align::RoiAlignPlan;
pub use train::{
    checkpoint_path, list_checkpoints, load_inference_model, load_run, read_checkpoint,
    read_run_config, train, Checkpoint, EpochRecord, TrainingHistory, CONFIG_FILE, HISTORY_FILE,
    PARTIAL_RUN_MARKER,
};
pub use weights::{read_tensors, save_pretrained, write_tensors, TensorMap, WeightsManifest};

/// One tensor that did not match what the model expects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMismatch {
    pub name: String,
    pub expected: Vec<usize>,
    /// `None` when the tensor is absent.
    pub found: Option<Vec<usize>>,
}

impl fmt::Display for TensorMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.found {
            Some(shape) => write!(
                f,
                "{}: expected {:?}, found {:?}",
                self.name, self.expected, shape
            ),
            None => write!(f, "{}: expected {:?}, missing", self.name, self.expected),
        }
    }
}

fn list_mismatches(m: &[TensorMismatch]) -> String {
    m.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weights do not match the model ({} tensor(s)): {}", .0.len(), list_mismatches(.0))]
    ShapeMismatch(Vec<TensorMismatch>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("checkpoint is incompatible: config digest is {expected} but the checkpoint was written for {found}")]
    Incompatible { expected: String, found: String },
    #[error("run directory {0} already contains checkpoints")]
    RunDirInUse(PathBuf),
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("model is not in inference mode")]
    NotInferenceMode,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Tumor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Integer-aligned, half-open, in original image pixels.
    pub bbox: BBox,
    pub class_label: ClassLabel,
    pub score: f64,
    /// Image-sized; foreground lies inside `bbox`.
    pub mask: Mask,
}

/// Anything that turns an image into scored detections.
pub trait Segmenter {
    fn predict(&self, image: &Image) -> Result<Vec<Detection>, EngineError>;
}

impl<T: Segmenter + ?Sized> Segmenter for &T {
    fn predict(&self, image: &Image) -> Result<Vec<Detection>, EngineError> {
        (**self).predict(image)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub label: Label,
    pub confidence: f64,
    /// Detections at or above the threshold.
    pub detections: Vec<Detection>,
}

/// Tumor when any detection reaches `threshold`; confidence is then the top
/// score. Otherwise no tumor with confidence `1 - best sub-threshold score`
/// (1.0 when there were no candidates). `threshold` is clamped to `[0, 1]`.
pub fn diagnose(detections: &[Detection], threshold: f64) -> Diagnosis {
    let threshold = threshold.clamp(0.0, 1.0);
    let mut kept: Vec<Detection> = detections
        .iter()
        .filter(|d| d.score >= threshold)
        .cloned()
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    let best = detections
        .iter()
        .map(|d| d.score)
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    match (kept.first(), best) {
        (Some(top), _) => Diagnosis {
            label: Label::Tumor,
            confidence: top.score,
            detections: kept,
        },
        (None, Some(b)) => Diagnosis {
            label: Label::NoTumor,
            confidence: 1.0 - b,
            detections: kept,
        },
        (None, None) => Diagnosis {
            label: Label::NoTumor,
            confidence: 1.0,
            detections: kept,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            class_label: ClassLabel::Tumor,
            score,
            mask: Mask::new(2, 2),
        }
    }

    #[test]
    fn diagnosis_rule() {
        let d = diagnose(&[], 0.5);
        assert_eq!((d.label, d.confidence), (Label::NoTumor, 1.0));
        let d = diagnose(&[det(0.8)], 0.5);
        assert_eq!((d.label, d.confidence), (Label::Tumor, 0.8));
        let d = diagnose(&[det(0.4), det(0.3)], 0.5);
        assert_eq!(d.label, Label::NoTumor);
        assert!((d.confidence - 0.6).abs() < 1e-12);
        assert!(d.detections.is_empty());
        let d = diagnose(&[det(0.3), det(0.9), det(0.5)], 0.5);
        assert_eq!(
            d.detections.iter().map(|d| d.score).collect::<Vec<_>>(),
            vec![0.9, 0.5]
        );
    }

    #[test]
    fn mismatch_lists_tensors_in_order() {
        let e = EngineError::ShapeMismatch(vec![
            TensorMismatch {
                name: "a".into(),
                expected: vec![1],
                found: Some(vec![2]),
            },
            TensorMismatch {
                name: "b".into(),
                expected: vec![3],
                found: None,
            },
        ]);
        let s = e.to_string();
        assert!(
            s.find("a: expected [1], found [2]").unwrap()
                < s.find("b: expected [3], missing").unwrap()
        );
    }
}
