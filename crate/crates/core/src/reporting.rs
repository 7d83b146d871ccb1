//! File artifacts for people: segmentation overlays, PR-curve CSV and the
//! loss-per-epoch series.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::engine::{Detection, EngineError, EpochRecord, TrainingHistory};
use crate::metrics::PRPoint;
use crate::types::{Image, ImageError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("detection {index} mask is {mask:?} but the image is {image:?}")]
    ShapeMismatch {
        index: usize,
        mask: (usize, usize),
        image: (usize, usize),
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        ReportError::Io(std::io::Error::other(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayOptions {
    pub alpha: f64,
    pub draw_boxes: bool,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            draw_boxes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegendEntry {
    pub rank: usize,
    pub color: [u8; 3],
    pub score: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayArtifact {
    pub scan_id: String,
    pub image: Image,
    /// Set once written to disk.
    pub image_ref: Option<PathBuf>,
    pub legend: Vec<LegendEntry>,
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
];

/// Color for the detection at `rank` (0 = highest score). The first ten are
/// fixed; later ranks walk the hue circle by the golden angle.
pub fn palette_color(rank: usize) -> [u8; 3] {
    if let Some(c) = PALETTE.get(rank) {
        return *c;
    }
    let hue = (rank as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [
        (r * 220.0) as u8 + 20,
        (g * 220.0) as u8 + 20,
        (b * 220.0) as u8 + 20,
    ]
}

/// Alpha-blends each mask over the image in its rank color and optionally
/// outlines its box. With no detections the image is returned unchanged.
pub fn render_overlay(
    scan_id: &str,
    image: &Image,
    detections: &[Detection],
    options: &OverlayOptions,
) -> Result<OverlayArtifact, ReportError> {
    if !(0.0..=1.0).contains(&options.alpha) {
        return Err(ReportError::Alpha(options.alpha));
    }
    let shape = (image.height(), image.width());
    for (index, d) in detections.iter().enumerate() {
        if d.mask.shape() != shape {
            return Err(ReportError::ShapeMismatch {
                index,
                mask: d.mask.shape(),
                image: shape,
            });
        }
    }
    if detections.is_empty() {
        return Ok(OverlayArtifact {
            scan_id: scan_id.to_string(),
            image: image.clone(),
            image_ref: None,
            legend: Vec::new(),
        });
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut out = image.to_rgb();
    let a = options.alpha;
    let mut legend = Vec::with_capacity(order.len());
    // lowest rank last so the best detection ends up on top
    for (rank, &idx) in order.iter().enumerate().rev() {
        let d = &detections[idx];
        let color = palette_color(rank);
        for (r, c) in d.mask.iter_foreground() {
            for (k, &ck) in color.iter().enumerate() {
                let v = (1.0 - a) * out.get(r, c, k) as f64 + a * ck as f64;
                out.set(r, c, k, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        if options.draw_boxes {
            let r0 = d.bbox.r0.max(0.0) as usize;
            let c0 = d.bbox.c0.max(0.0) as usize;
            let r1 = (d.bbox.r1.ceil() as usize).min(shape.0);
            let c1 = (d.bbox.c1.ceil() as usize).min(shape.1);
            if r1 > r0 && c1 > c0 {
                for r in r0..r1 {
                    for c in c0..c1 {
                        if r == r0 || r + 1 == r1 || c == c0 || c + 1 == c1 {
                            for (k, &ck) in color.iter().enumerate() {
                                out.set(r, c, k, ck);
                            }
                        }
                    }
                }
            }
        }
        legend.push(LegendEntry {
            rank,
            color,
            score: d.score,
            label: "tumor".into(),
        });
    }
    legend.reverse();
    Ok(OverlayArtifact {
        scan_id: scan_id.to_string(),
        image: out,
        image_ref: None,
        legend,
    })
}

pub fn overlay_file_name(scan_id: &str) -> String {
    format!("{scan_id}_overlay.png")
}

/// Writes `<dir>/<scan_id>_overlay.png` and records the path.
pub fn write_overlay(artifact: &mut OverlayArtifact, dir: &Path) -> Result<PathBuf, ReportError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(overlay_file_name(&artifact.scan_id));
    artifact.image.save_png(&path)?;
    artifact.image_ref = Some(path.clone());
    Ok(path)
}

fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}

/// `threshold,precision,recall`, one row per point, six decimals.
pub fn export_pr_csv(curve: &[PRPoint], path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for p in curve {
        w.write_record([fixed6(p.threshold), fixed6(p.precision), fixed6(p.recall)])?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, ReportError> {
    let parse_err = |message: String| ReportError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(parse_err(format!(
            "expected header {header:?}, found {found:?}"
        )));
    }
    r.records()
        .map(|row| row.map_err(|e| parse_err(e.to_string())))
        .collect()
}

fn parse_f64(path: &Path, s: &str) -> Result<f64, ReportError> {
    s.parse().map_err(|_| ReportError::Parse {
        path: path.to_path_buf(),
        message: format!("not a number: {s:?}"),
    })
}

pub fn parse_pr_csv(path: &Path) -> Result<Vec<PRPoint>, ReportError> {
    read_rows(path, &["threshold", "precision", "recall"])?
        .iter()
        .map(|row| {
            Ok(PRPoint {
                threshold: parse_f64(path, &row[0])?,
                precision: parse_f64(path, &row[1])?,
                recall: parse_f64(path, &row[2])?,
            })
        })
        .collect()
}

/// `epoch,train_loss,val_loss` ordered by epoch, six decimals; a missing
/// validation loss is left empty.
pub fn export_loss_series(history: &TrainingHistory, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in history.records() {
        w.write_record([
            r.epoch_index.to_string(),
            fixed6(r.train_loss),
            r.val_loss.map(fixed6).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_loss_series(path: &Path) -> Result<TrainingHistory, ReportError> {
    let records = read_rows(path, &["epoch", "train_loss", "val_loss"])?
        .iter()
        .map(|row| {
            Ok(EpochRecord {
                epoch_index: row[0].parse().map_err(|_| ReportError::Parse {
                    path: path.to_path_buf(),
                    message: format!("bad epoch {:?}", &row[0]),
                })?,
                train_loss: parse_f64(path, &row[1])?,
                val_loss: if row[2].is_empty() {
                    None
                } else {
                    Some(parse_f64(path, &row[2])?)
                },
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    TrainingHistory::from_records(records).map_err(|e: EngineError| ReportError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
