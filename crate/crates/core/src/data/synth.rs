//! Desk-scale synthetic brain scans with exact instance masks.
//!
//! Every scan is a grayscale slice: dark background, a textured elliptical
//! "brain" region, and for tumor scans one or two bright, non-touching
//! elliptical blobs. A blob's mask is the same pixel predicate that paints it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, GroundTruth, Label, ScanRecord, MIN_IMAGE_SIDE};
use crate::types::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    /// Blob semi-axis range in pixels.
    pub semi_axis: (f64, f64),
    /// Blob intensity range.
    pub tumor_intensity: (u8, u8),
    /// Mean intensity range of the brain region.
    pub tissue_intensity: (u8, u8),
    pub max_blobs: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            semi_axis: (4.0, 9.0),
            tumor_intensity: (185, 235),
            tissue_intensity: (75, 110),
            max_blobs: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    /// Pixel-centre membership.
    fn contains(&self, r: usize, c: usize) -> bool {
        self.level(r as f64 + 0.5, c as f64 + 0.5) <= 1.0
    }

    fn level(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn rasterize(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |r, c| self.contains(r, c))
    }
}

fn dilate(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Mask::from_fn(h, w, |r, c| {
        (r.saturating_sub(1)..=(r + 1).min(h - 1))
            .any(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).any(|cc| mask.get(rr, cc)))
    })
}

pub fn generate_synthetic_dataset(
    n: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Config(
            "synthetic dataset size must be at least 1".into(),
        ));
    }
    if params.height < MIN_IMAGE_SIDE || params.width < MIN_IMAGE_SIDE {
        return Err(DataError::Config(format!(
            "synthetic images must be at least {MIN_IMAGE_SIDE}px per side"
        )));
    }
    if !(params.semi_axis.0 >= 1.0 && params.semi_axis.1 >= params.semi_axis.0)
        || params.max_blobs == 0
    {
        return Err(DataError::Config("invalid blob parameters".into()));
    }
    if params.tumor_intensity.0 > params.tumor_intensity.1
        || params.tissue_intensity.0 > params.tissue_intensity.1
    {
        return Err(DataError::Config("intensity ranges must be ordered".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tumor = n / 2
        + if n % 2 == 1 {
            rng.random_range(0..2)
        } else {
            0
        };
    let mut labels: Vec<Label> = (0..n)
        .map(|i| {
            if i < n_tumor {
                Label::Tumor
            } else {
                Label::NoTumor
            }
        })
        .collect();
    labels.shuffle(&mut rng);

    let scans = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let (image, masks) = paint_scan(&mut rng, params, label);
            ScanRecord::new(
                format!("scan_{i:04}"),
                Some(format!("P-{:04}", i + 1)),
                image,
                Some(GroundTruth::new(label, masks)?),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(scans)
}

fn paint_scan(rng: &mut ChaCha8Rng, p: &SynthParams, label: Label) -> (Image, Vec<Mask>) {
    let (h, w) = (p.height, p.width);
    let (hf, wf) = (h as f64, w as f64);
    let brain = Ellipse {
        cy: hf / 2.0 + rng.random_range(-0.04..0.04) * hf,
        cx: wf / 2.0 + rng.random_range(-0.04..0.04) * wf,
        ry: hf * rng.random_range(0.36..0.44),
        rx: wf * rng.random_range(0.32..0.40),
        theta: rng.random_range(-0.2..0.2),
    };
    let tissue = rng.random_range(p.tissue_intensity.0 as f64..=p.tissue_intensity.1 as f64);
    let (fy, fx) = (rng.random_range(0.1..0.35), rng.random_range(0.1..0.35));
    let (py, px) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );

    let mut pixels = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = if brain.contains(r, c) {
                let texture = 9.0 * (fy * r as f64 + py).sin() * (fx * c as f64 + px).cos();
                tissue + texture + rng.random_range(-8.0..8.0)
            } else {
                14.0 + rng.random_range(0.0..12.0)
            };
            pixels[r * w + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    let mut masks: Vec<Mask> = Vec::new();
    if label == Label::Tumor {
        let wanted = rng.random_range(1..=p.max_blobs);
        let mut occupied = Mask::new(h, w);
        let mut attempts = 0;
        while masks.len() < wanted && attempts < 200 {
            attempts += 1;
            let ry = rng.random_range(p.semi_axis.0..=p.semi_axis.1);
            let rx = rng.random_range(p.semi_axis.0..=p.semi_axis.1);
            let reach = ry.max(rx);
            let blob = Ellipse {
                cy: brain.cy + rng.random_range(-0.55..0.55) * (brain.ry - reach).max(0.0),
                cx: brain.cx + rng.random_range(-0.55..0.55) * (brain.rx - reach).max(0.0),
                ry,
                rx,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let mask = blob.rasterize(h, w);
            if mask.is_empty()
                || mask
                    .iter_foreground()
                    .any(|(r, c)| occupied.get(r, c) || !brain.contains(r, c))
            {
                continue;
            }
            for (r, c) in dilate(&mask).iter_foreground() {
                occupied.set(r, c, true);
            }
            masks.push(mask);
        }
        // Fallback keeps the label honest even for cramped parameter choices.
        if masks.is_empty() {
            let blob = Ellipse {
                cy: brain.cy,
                cx: brain.cx,
                ry: p.semi_axis.0,
                rx: p.semi_axis.0,
                theta: 0.0,
            };
            masks.push(blob.rasterize(h, w));
        }
        for mask in &masks {
            let level = rng.random_range(p.tumor_intensity.0 as f64..=p.tumor_intensity.1 as f64);
            for (r, c) in mask.iter_foreground() {
                let v = level + rng.random_range(-10.0..10.0);
                pixels[r * w + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    (
        Image::new(h, w, 1, pixels).expect("valid synthetic geometry"),
        masks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_boxes_from_mask;

    #[test]
    fn rerun_is_pixel_identical() {
        let a = generate_synthetic_dataset(1, 7, &SynthParams::default()).unwrap();
        let b = generate_synthetic_dataset(1, 7, &SynthParams::default()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn balance_within_one() {
        for seed in 0..5 {
            let ds = generate_synthetic_dataset(40, seed, &SynthParams::default()).unwrap();
            let counts = ds.class_counts();
            assert!((19..=21).contains(&counts.tumor), "{counts:?}");
            assert_eq!(counts.tumor + counts.no_tumor, 40);
        }
    }

    #[test]
    fn zero_scans_is_rejected() {
        assert!(generate_synthetic_dataset(0, 1, &SynthParams::default()).is_err());
    }

    #[test]
    fn tumor_masks_are_bright_disjoint_and_boxed() {
        let ds = generate_synthetic_dataset(30, 11, &SynthParams::default()).unwrap();
        for scan in &ds {
            let gt = scan.ground_truth().unwrap();
            match gt.label() {
                Label::NoTumor => assert!(gt.masks().is_empty()),
                Label::Tumor => {
                    assert!((1..=2).contains(&gt.masks().len()));
                    for (m, b) in gt.masks().iter().zip(gt.boxes()) {
                        assert_eq!(*b, derive_boxes_from_mask(m).unwrap());
                        for (r, c) in m.iter_foreground() {
                            assert!(scan.image().get(r, c, 0) >= 170);
                        }
                    }
                    if let [a, b] = gt.masks() {
                        assert!(a.iter_foreground().all(|(r, c)| !b.get(r, c)));
                    }
                }
            }
        }
    }
}
