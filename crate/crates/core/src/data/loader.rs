//! On-disk dataset layouts.
//!
//! `mask_dirs`:
//! ```text
//! root/images/<scan_id>.png|.jpg
//! root/masks/<scan_id>.png        one connected component per instance, or
//! root/masks/<scan_id>_<k>.png    one file per instance
//! root/manifest.csv               scan_id,patient_id,label   (label: yes|no)
//! ```
//!
//! `annotation_json`: `root/annotations.json` holding an array of
//! `{scan_id, patient_id, label, instances: [{polygon} | {rle}]}` with images
//! under `root/images/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotation::{rasterize_polygon, Rle};
use super::masks::connected_components;
use super::{DataError, Dataset, GroundTruth, Label, LoadIssue, ScanRecord};
use crate::types::{Image, Mask};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ANNOTATION_FILE: &str = "annotations.json";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    MaskDirs,
    AnnotationJson,
}

impl Layout {
    /// `annotation_json` when `annotations.json` is present, else `mask_dirs`.
    pub fn detect(root: &Path) -> Layout {
        if root.join(ANNOTATION_FILE).is_file() {
            Layout::AnnotationJson
        } else {
            Layout::MaskDirs
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scan_id: String,
    pub patient_id: Option<String>,
    pub label: Option<String>,
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<Dataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::Load(vec![LoadIssue {
            path: root.to_path_buf(),
            reason: "dataset root is not a directory".into(),
        }]));
    }
    let dataset = match layout {
        Layout::MaskDirs => load_mask_dirs(root)?,
        Layout::AnnotationJson => load_annotation_json(root)?,
    };
    let counts = dataset.class_counts();
    tracing::info!(
        root = %root.display(),
        scans = dataset.len(),
        tumor = counts.tumor,
        no_tumor = counts.no_tumor,
        unlabeled = counts.unlabeled,
        "loaded dataset"
    );
    Ok(dataset)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let issue = |reason: String| {
        DataError::Load(vec![LoadIssue {
            path: path.to_path_buf(),
            reason,
        }])
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| issue(e.to_string()))?;
    let headers = reader.headers().map_err(|e| issue(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["scan_id", "patient_id", "label"] {
        return Err(issue(format!(
            "expected header `scan_id,patient_id,label`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let mut row = row.map_err(|e| issue(format!("row {}: {e}", line + 2)))?;
        row.patient_id = row.patient_id.filter(|p| !p.is_empty());
        row.label = row.label.filter(|l| !l.is_empty());
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `scan_id,patient_id,label` for every scan, in dataset order.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    for scan in dataset {
        writer
            .serialize(ManifestRow {
                scan_id: scan.scan_id.clone(),
                patient_id: scan.patient_id.clone(),
                label: scan.label().map(|l| l.manifest_str().to_string()),
            })
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(std::io::Error::other(e.to_string()))
}

/// Writes the `mask_dirs` layout: PNG images, one mask PNG per instance
/// (`<scan_id>_<k>.png`), and the manifest.
pub fn save_mask_dirs(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for scan in dataset {
        save_png(scan.image(), &images.join(format!("{}.png", scan.scan_id)))?;
        if let Some(gt) = scan.ground_truth() {
            for (k, m) in gt.masks().iter().enumerate() {
                save_png(
                    &m.to_image(),
                    &masks.join(format!("{}_{k}.png", scan.scan_id)),
                )?;
            }
        }
    }
    write_manifest(dataset, &root.join(MANIFEST_FILE))
}

fn save_png(image: &Image, path: &Path) -> Result<(), DataError> {
    image.save_png(path).map_err(|e| match e {
        crate::types::ImageError::Io(io) => DataError::Io(io),
        other => DataError::Io(std::io::Error::other(other.to_string())),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    scan_id: String,
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default)]
    instances: Vec<Instance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Instance {
    Polygon { polygon: Vec<[f64; 2]> },
    Rle { rle: Rle },
}

/// Writes the `annotation_json` layout with RLE-encoded instances.
pub fn save_annotation_json(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let images = root.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::new();
    for scan in dataset {
        save_png(scan.image(), &images.join(format!("{}.png", scan.scan_id)))?;
        records.push(AnnotationRecord {
            scan_id: scan.scan_id.clone(),
            patient_id: scan.patient_id.clone(),
            label: scan.label().map(|l| l.manifest_str().to_string()),
            image: None,
            instances: scan
                .ground_truth()
                .map(|gt| {
                    gt.masks()
                        .iter()
                        .map(|m| Instance::Rle {
                            rle: Rle::encode(m),
                        })
                        .collect()
                })
                .unwrap_or_default(),
        });
    }
    let json =
        serde_json::to_vec_pretty(&records).map_err(|e| DataError::Io(std::io::Error::other(e)))?;
    fs::write(root.join(ANNOTATION_FILE), json)?;
    Ok(())
}

fn list_images(
    dir: &Path,
    issues: &mut Vec<LoadIssue>,
) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
        else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem, path.clone()) {
            issues.push(LoadIssue {
                path,
                reason: format!("duplicate image stem (also {})", prev.display()),
            });
        }
    }
    Ok(out)
}

fn parse_label(raw: Option<&str>, scan_id: &str) -> Result<Option<Label>, DataError> {
    match raw {
        None => Ok(None),
        Some(s) => Label::parse_manifest(s)
            .map(Some)
            .ok_or_else(|| DataError::Validation {
                scan_id: scan_id.to_string(),
                message: format!("unknown label `{s}` (expected yes or no)"),
            }),
    }
}

fn build_record(
    scan_id: &str,
    patient_id: Option<String>,
    image: Image,
    label: Option<Label>,
    masks: Vec<Mask>,
) -> Result<ScanRecord, DataError> {
    let invalid = |message: String| DataError::Validation {
        scan_id: scan_id.to_string(),
        message,
    };
    for (k, m) in masks.iter().enumerate() {
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
    let ground_truth = match label {
        None if !masks.is_empty() => {
            return Err(invalid("masks present but label is missing".into()))
        }
        None => None,
        Some(label) => Some(GroundTruth::new(label, masks).map_err(|e| invalid(e.to_string()))?),
    };
    ScanRecord::new(scan_id, patient_id, image, ground_truth)
}

fn load_mask_dirs(root: &Path) -> Result<Dataset, DataError> {
    let mut issues = Vec::new();
    let images = list_images(&root.join("images"), &mut issues)?;
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        if images.is_empty() {
            return Err(DataError::NoScans(root.to_path_buf()));
        }
        return Err(DataError::Load(vec![LoadIssue {
            path: manifest_path,
            reason: "manifest.csv is missing".into(),
        }]));
    }
    let rows = read_manifest(&manifest_path)?;
    if rows.is_empty() && images.is_empty() {
        return Err(DataError::NoScans(root.to_path_buf()));
    }
    let ids: BTreeSet<&str> = rows.iter().map(|r| r.scan_id.as_str()).collect();
    if ids.len() != rows.len() {
        let mut seen = BTreeSet::new();
        let dup = rows
            .iter()
            .find(|r| !seen.insert(r.scan_id.as_str()))
            .expect("a duplicate exists");
        return Err(DataError::DuplicateScanId(dup.scan_id.clone()));
    }

    // Mask files, grouped by owning scan.
    let mut whole: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut parts: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    let masks_dir = root.join("masks");
    if masks_dir.is_dir() {
        for entry in fs::read_dir(&masks_dir)? {
            let path = entry?.path();
            if path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
                != Some("png")
            {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if ids.contains(stem.as_str()) {
                whole.insert(stem, path);
                continue;
            }
            let owner = stem
                .rsplit_once('_')
                .filter(|(id, k)| {
                    ids.contains(id) && !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit())
                })
                .and_then(|(id, k)| k.parse::<usize>().ok().map(|k| (id.to_string(), k)));
            match owner {
                Some((id, k)) => {
                    parts.entry(id).or_default().insert(k, path);
                }
                None => issues.push(LoadIssue {
                    path,
                    reason: "mask file does not belong to any manifest scan".into(),
                }),
            }
        }
    }

    for (stem, path) in &images {
        if !ids.contains(stem.as_str()) {
            issues.push(LoadIssue {
                path: path.clone(),
                reason: "image has no manifest row".into(),
            });
        }
    }

    let mut scans = Vec::with_capacity(rows.len());
    for row in rows {
        let Some(image_path) = images.get(&row.scan_id) else {
            issues.push(LoadIssue {
                path: root.join("images").join(format!("{}.png", row.scan_id)),
                reason: "image file is missing".into(),
            });
            continue;
        };
        let image = match Image::load(image_path) {
            Ok(img) => img,
            Err(e) => {
                issues.push(LoadIssue {
                    path: image_path.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let label = parse_label(row.label.as_deref(), &row.scan_id)?;
        let whole_file = whole.get(&row.scan_id);
        let part_files = parts.get(&row.scan_id);
        if whole_file.is_some() && part_files.is_some() {
            issues.push(LoadIssue {
                path: masks_dir.join(format!("{}.png", row.scan_id)),
                reason: "both a combined mask and per-instance masks are present".into(),
            });
            continue;
        }
        let mut masks = Vec::new();
        let mut failed = false;
        if let Some(path) = whole_file {
            match Mask::load_png(path) {
                Ok(m) if m.shape() != (image.height(), image.width()) => masks.push(m),
                Ok(m) => masks.extend(connected_components(&m)),
                Err(e) => {
                    issues.push(LoadIssue {
                        path: path.clone(),
                        reason: e.to_string(),
                    });
                    failed = true;
                }
            }
        }
        for (k, path) in part_files.into_iter().flatten() {
            match Mask::load_png(path) {
                Ok(m) if m.is_empty() => {
                    return Err(DataError::Validation {
                        scan_id: row.scan_id.clone(),
                        message: format!("instance mask {k} has no foreground pixels"),
                    })
                }
                Ok(m) => masks.push(m),
                Err(e) => {
                    issues.push(LoadIssue {
                        path: path.clone(),
                        reason: e.to_string(),
                    });
                    failed = true;
                }
            }
        }
        if failed {
            continue;
        }
        scans.push(build_record(
            &row.scan_id,
            row.patient_id,
            image,
            label,
            masks,
        )?);
    }

    if !issues.is_empty() {
        return Err(DataError::Load(issues));
    }
    Dataset::new(scans)
}

fn load_annotation_json(root: &Path) -> Result<Dataset, DataError> {
    let path = root.join(ANNOTATION_FILE);
    let bytes = fs::read(&path).map_err(|e| {
        DataError::Load(vec![LoadIssue {
            path: path.clone(),
            reason: e.to_string(),
        }])
    })?;
    let records: Vec<AnnotationRecord> = serde_json::from_slice(&bytes).map_err(|e| {
        DataError::Load(vec![LoadIssue {
            path: path.clone(),
            reason: e.to_string(),
        }])
    })?;
    let mut issues = Vec::new();
    let images = list_images(&root.join("images"), &mut issues)?;
    if records.is_empty() && images.is_empty() {
        return Err(DataError::NoScans(root.to_path_buf()));
    }

    let mut referenced = BTreeSet::new();
    let mut scans = Vec::with_capacity(records.len());
    for record in records {
        let image_path = match &record.image {
            Some(rel) => Some(root.join(rel)),
            None => images.get(&record.scan_id).cloned(),
        };
        let Some(image_path) = image_path.filter(|p| p.is_file()) else {
            issues.push(LoadIssue {
                path: root.join("images").join(format!("{}.png", record.scan_id)),
                reason: "image file is missing".into(),
            });
            continue;
        };
        referenced.insert(fs::canonicalize(&image_path)?);
        let image = match Image::load(&image_path) {
            Ok(img) => img,
            Err(e) => {
                issues.push(LoadIssue {
                    path: image_path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let label = parse_label(record.label.as_deref(), &record.scan_id)?;
        let mut masks = Vec::with_capacity(record.instances.len());
        for (k, inst) in record.instances.iter().enumerate() {
            let mask = match inst {
                Instance::Polygon { polygon } => {
                    rasterize_polygon(image.height(), image.width(), polygon)
                }
                Instance::Rle { rle } => rle.decode().ok_or_else(|| DataError::Validation {
                    scan_id: record.scan_id.clone(),
                    message: format!(
                        "instance {k}: RLE counts do not cover {}x{}",
                        rle.size[0], rle.size[1]
                    ),
                })?,
            };
            if mask.is_empty() {
                return Err(DataError::Validation {
                    scan_id: record.scan_id.clone(),
                    message: format!("instance {k} has no foreground pixels"),
                });
            }
            masks.push(mask);
        }
        scans.push(build_record(
            &record.scan_id,
            record.patient_id.filter(|p| !p.is_empty()),
            image,
            label,
            masks,
        )?);
    }

    for path in images.values() {
        if !referenced.contains(&fs::canonicalize(path)?) {
            issues.push(LoadIssue {
                path: path.clone(),
                reason: "image has no annotation record".into(),
            });
        }
    }
    if !issues.is_empty() {
        return Err(DataError::Load(issues));
    }
    Dataset::new(scans)
}
