//! MRI scan datasets: records, loading, splitting, synthesis, and the
//! patient-ID side channel.

mod annotation;
mod loader;
mod masks;
mod patient;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BBox, Image, Mask};

pub use annotation::{rasterize_polygon, Rle};
pub use loader::{
    load_dataset, read_manifest, save_annotation_json, save_mask_dirs, write_manifest, Layout,
    ManifestRow,
};
pub use masks::{connected_components, derive_boxes_from_mask};
pub use patient::{
    reattach_patient_id, reattach_patient_ids, strip_patient_ids, PatientIdMap, PatientTagged,
};
pub use split::{split_dataset, DatasetSplit, SplitRatios};
pub use synth::{generate_synthetic_dataset, SynthParams};

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no scans found under {0}")]
    NoScans(PathBuf),
    #[error("failed to load {} item(s):\n{}", .0.len(), format_issues(.0))]
    Load(Vec<LoadIssue>),
    #[error("scan {scan_id}: {message}")]
    Validation { scan_id: String, message: String },
    #[error("duplicate scan_id {0}")]
    DuplicateScanId(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown scan_id {0}")]
    UnknownScanId(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One file-level failure found while loading a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub reason: String,
}

impl fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.reason)
    }
}

fn format_issues(issues: &[LoadIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Tumor,
    NoTumor,
}

impl Label {
    /// Manifest spelling: `yes` / `no`.
    pub fn manifest_str(self) -> &'static str {
        match self {
            Label::Tumor => "yes",
            Label::NoTumor => "no",
        }
    }

    pub fn parse_manifest(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "tumor" | "1" => Some(Label::Tumor),
            "no" | "no_tumor" | "0" => Some(Label::NoTumor),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Tumor => "tumor",
            Label::NoTumor => "no_tumor",
        })
    }
}

/// Label plus instance masks and their tight boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    label: Label,
    masks: Vec<Mask>,
    boxes: Vec<BBox>,
}

impl GroundTruth {
    /// Validates the label/mask invariants and derives one box per mask.
    pub fn new(label: Label, masks: Vec<Mask>) -> Result<Self, DataError> {
        if label == Label::NoTumor && !masks.is_empty() {
            return Err(DataError::Config(
                "a no_tumor scan cannot carry instance masks".into(),
            ));
        }
        let boxes = masks
            .iter()
            .map(derive_boxes_from_mask)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            label,
            masks,
            boxes,
        })
    }

    pub fn no_tumor() -> Self {
        Self {
            label: Label::NoTumor,
            masks: Vec::new(),
            boxes: Vec::new(),
        }
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }
}

/// One MRI image with optional ground truth and optional patient ID.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: Option<String>,
    image: Image,
    ground_truth: Option<GroundTruth>,
}

impl ScanRecord {
    pub fn new(
        scan_id: impl Into<String>,
        patient_id: Option<String>,
        image: Image,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self, DataError> {
        let scan_id = scan_id.into();
        let invalid = |message: String| DataError::Validation {
            scan_id: scan_id.clone(),
            message,
        };
        if scan_id.is_empty() {
            return Err(invalid("scan_id must not be empty".into()));
        }
        if image.height() < MIN_IMAGE_SIDE || image.width() < MIN_IMAGE_SIDE {
            return Err(invalid(format!(
                "image is {}x{}, minimum side is {MIN_IMAGE_SIDE}",
                image.height(),
                image.width()
            )));
        }
        if let Some(gt) = &ground_truth {
            for (k, m) in gt.masks().iter().enumerate() {
                if m.shape() != (image.height(), image.width()) {
                    return Err(invalid(format!(
                        "mask {k} is {}x{} but image is {}x{}",
                        m.height(),
                        m.width(),
                        image.height(),
                        image.width()
                    )));
                }
            }
        }
        Ok(Self {
            scan_id,
            patient_id,
            image,
            ground_truth,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn label(&self) -> Option<Label> {
        self.ground_truth.as_ref().map(GroundTruth::label)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tumor: usize,
    pub no_tumor: usize,
    pub unlabeled: usize,
}

/// An immutable collection of scans with unique IDs, ordered by `scan_id`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    scans: Vec<ScanRecord>,
}

impl Dataset {
    pub fn new(mut scans: Vec<ScanRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for s in &scans {
            if !seen.insert(s.scan_id.clone()) {
                return Err(DataError::DuplicateScanId(s.scan_id.clone()));
            }
        }
        scans.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
        Ok(Self { scans })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scans(&self) -> &[ScanRecord] {
        &self.scans
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScanRecord> {
        self.scans.iter()
    }

    pub fn get(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.scans
            .binary_search_by(|s| s.scan_id.as_str().cmp(scan_id))
            .ok()
            .map(|i| &self.scans[i])
    }

    pub fn into_scans(self) -> Vec<ScanRecord> {
        self.scans
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for s in &self.scans {
            match s.label() {
                Some(Label::Tumor) => counts.tumor += 1,
                Some(Label::NoTumor) => counts.no_tumor += 1,
                None => counts.unlabeled += 1,
            }
        }
        counts
    }

    /// The scans named by `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset, DataError> {
        let mut picked = BTreeMap::new();
        for id in ids {
            let scan = self
                .get(id)
                .ok_or_else(|| DataError::UnknownScanId(id.clone()))?;
            picked.insert(id.clone(), scan.clone());
        }
        Ok(Dataset {
            scans: picked.into_values().collect(),
        })
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a ScanRecord;
    type IntoIter = std::slice::Iter<'a, ScanRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.scans.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> Image {
        Image::filled(h, w, 1, 0).unwrap()
    }

    #[test]
    fn no_tumor_with_masks_is_rejected() {
        let mut m = Mask::new(16, 16);
        m.set(1, 1, true);
        assert!(GroundTruth::new(Label::NoTumor, vec![m]).is_err());
    }

    #[test]
    fn empty_instance_mask_is_rejected() {
        assert!(matches!(
            GroundTruth::new(Label::Tumor, vec![Mask::new(16, 16)]),
            Err(DataError::EmptyMask)
        ));
    }

    #[test]
    fn small_images_are_rejected() {
        let err = ScanRecord::new("s", None, gray(15, 40), None).unwrap_err();
        assert!(err.to_string().contains("minimum side"));
    }

    #[test]
    fn mask_shape_mismatch_names_the_scan() {
        let mut m = Mask::new(20, 16);
        m.set(0, 0, true);
        let gt = GroundTruth::new(Label::Tumor, vec![m]).unwrap();
        let err = ScanRecord::new("scan_x", None, gray(16, 16), Some(gt)).unwrap_err();
        assert!(err.to_string().contains("scan_x"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let a = ScanRecord::new("a", None, gray(16, 16), None).unwrap();
        assert!(matches!(
            Dataset::new(vec![a.clone(), a]),
            Err(DataError::DuplicateScanId(_))
        ));
    }
}
