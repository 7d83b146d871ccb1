//! RoIAlign as a precomputed sparse bilinear plan, so forward and backward
//! share the exact same sampling weights.

use ndarray::{Array3, Array4, ArrayView3};

use crate::types::BBox;

pub struct RoiAlignPlan {
    rois: usize,
    out: usize,
    /// Per (roi, bin): range into `taps`.
    offsets: Vec<u32>,
    /// `(flat feature index y * w + x, weight)`
    taps: Vec<(u32, f32)>,
}

impl RoiAlignPlan {
    /// `rois` are in feature-map coordinates (image coordinates divided by
    /// the stride), with pixel `k` spanning `[k, k + 1)`.
    pub fn new(rois: &[BBox], feat_h: usize, feat_w: usize, out: usize, sampling: usize) -> Self {
        let mut offsets = Vec::with_capacity(rois.len() * out * out + 1);
        let mut taps = Vec::with_capacity(rois.len() * out * out * sampling * sampling * 4);
        offsets.push(0);
        let norm = 1.0 / (sampling * sampling) as f64;
        for roi in rois {
            let bin_h = roi.height().max(1e-6) / out as f64;
            let bin_w = roi.width().max(1e-6) / out as f64;
            for by in 0..out {
                for bx in 0..out {
                    for sy in 0..sampling {
                        // sample position in continuous coordinates, shifted so
                        // integer values land on pixel centres
                        let y = roi.r0 + (by as f64 + (sy as f64 + 0.5) / sampling as f64) * bin_h
                            - 0.5;
                        for sx in 0..sampling {
                            let x = roi.c0
                                + (bx as f64 + (sx as f64 + 0.5) / sampling as f64) * bin_w
                                - 0.5;
                            push_bilinear(&mut taps, y, x, feat_h, feat_w, norm);
                        }
                    }
                    offsets.push(taps.len() as u32);
                }
            }
        }
        Self {
            rois: rois.len(),
            out,
            offsets,
            taps,
        }
    }

    pub fn len(&self) -> usize {
        self.rois
    }

    pub fn is_empty(&self) -> bool {
        self.rois == 0
    }

    /// `features: (C, H, W)` to `(R, C, out, out)`.
    pub fn forward(&self, features: ArrayView3<f32>) -> Array4<f32> {
        let (c, h, w) = features.dim();
        let feats = features.as_standard_layout();
        let feats = feats.as_slice().expect("standard layout");
        let bins = self.out * self.out;
        let mut out = Array4::<f32>::zeros((self.rois, c, self.out, self.out));
        let dst = out.as_slice_mut().expect("fresh array");
        for r in 0..self.rois {
            for b in 0..bins {
                let taps = &self.taps
                    [self.offsets[r * bins + b] as usize..self.offsets[r * bins + b + 1] as usize];
                for ch in 0..c {
                    let plane = &feats[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0f32;
                    for &(idx, wt) in taps {
                        acc += plane[idx as usize] * wt;
                    }
                    dst[(r * c + ch) * bins + b] = acc;
                }
            }
        }
        out
    }

    /// Scatters `dout: (R, C, out, out)` back into `dfeat: (C, H, W)`.
    pub fn backward(&self, dout: &Array4<f32>, dfeat: &mut Array3<f32>) {
        let (c, h, w) = dfeat.dim();
        let bins = self.out * self.out;
        let src = dout.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let dst = dfeat.as_slice_mut().expect("standard layout");
        for r in 0..self.rois {
            for b in 0..bins {
                let taps = &self.taps
                    [self.offsets[r * bins + b] as usize..self.offsets[r * bins + b + 1] as usize];
                for ch in 0..c {
                    let g = src[(r * c + ch) * bins + b];
                    if g == 0.0 {
                        continue;
                    }
                    let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
                    for &(idx, wt) in taps {
                        plane[idx as usize] += g * wt;
                    }
                }
            }
        }
    }
}

fn push_bilinear(taps: &mut Vec<(u32, f32)>, y: f64, x: f64, h: usize, w: usize, norm: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y0, y1, ly) = corners(y.max(0.0), h);
    let (x0, x1, lx) = corners(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wt) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        if wt > 0.0 {
            taps.push(((yy * w + xx) as u32, (wt * norm) as f32));
        }
    }
}

fn corners(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}
