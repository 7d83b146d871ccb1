//! Convolutional feature extractors, input preprocessing and the proxy task
//! used to pretrain a backbone before transfer.

use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    bce_with_logits, clip_grad_norm, relu_backward, relu_inplace, Adam, Conv2d, ConvCache, Init,
    Param,
};
use super::weights::{save_pretrained, TensorMap, WeightsManifest};
use super::EngineError;
use crate::types::Image;

/// Output resolution relative to the input.
pub const FEATURE_STRIDE: usize = 4;

/// Per-channel `(x / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneSpec {
    pub id: &'static str,
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub normalization: Normalization,
}

const GRAY_NORM: Normalization = Normalization {
    mean: [0.25, 0.25, 0.25],
    std: [0.25, 0.25, 0.25],
};

static BACKBONES: [BackboneSpec; 2] = [
    BackboneSpec {
        id: "tinyconv-s",
        channels: [16, 32, 32, 32],
        strides: [1, 2, 2, 1],
        normalization: GRAY_NORM,
    },
    BackboneSpec {
        id: "tinyconv-m",
        channels: [24, 48, 48, 48],
        strides: [1, 2, 2, 1],
        normalization: GRAY_NORM,
    },
];

pub fn backbone_spec(id: &str) -> Result<&'static BackboneSpec, EngineError> {
    BACKBONES.iter().find(|b| b.id == id).ok_or_else(|| {
        let known: Vec<&str> = BACKBONES.iter().map(|b| b.id).collect();
        EngineError::Config(format!(
            "unknown backbone_id {id:?}; known: {}",
            known.join(", ")
        ))
    })
}

pub fn known_backbones() -> impl Iterator<Item = &'static str> {
    BACKBONES.iter().map(|b| b.id)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub id: String,
    pub convs: Vec<Conv2d>,
}

pub struct BackboneCache {
    steps: Vec<(ConvCache, Array4<f32>)>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, rng: &mut impl Rng) -> Self {
        let mut in_ch = 3;
        let convs = spec
            .channels
            .iter()
            .zip(spec.strides)
            .enumerate()
            .map(|(i, (&out, stride))| {
                let conv = Conv2d::new(
                    &format!("backbone.conv{}", i + 1),
                    in_ch,
                    out,
                    3,
                    stride,
                    1,
                    Init::He,
                    rng,
                );
                in_ch = out;
                conv
            })
            .collect();
        Self {
            id: spec.id.to_string(),
            convs,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().expect("non-empty").out_channels()
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, BackboneCache) {
        let mut steps = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&cur);
            relu_inplace(&mut y);
            steps.push((cache, y.clone()));
            cur = y;
        }
        (cur, BackboneCache { steps })
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = conv.infer(&cur);
            relu_inplace(&mut cur);
        }
        cur
    }

    pub fn backward(&mut self, dy: Array4<f32>, cache: &BackboneCache) {
        let mut grad = dy;
        for (conv, (cc, y)) in self.convs.iter_mut().zip(&cache.steps).rev() {
            relu_backward(&mut grad, y);
            grad = conv.backward(&grad, cc);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// A network-ready image plus the geometry needed to map results back.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `(1, 3, S, S)`
    pub tensor: Array4<f32>,
    /// Input pixels per original pixel.
    pub scale: f64,
    pub orig_height: usize,
    pub orig_width: usize,
}

/// Aspect-preserving resize so the longer side equals `size`, zero padding
/// on the bottom/right, grayscale replicated to three channels, then
/// normalization.
pub fn prepare_image(image: &Image, size: usize, norm: &Normalization) -> Prepared {
    let (h, w) = (image.height(), image.width());
    let scale = size as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let mut raw = Array4::<f32>::zeros((1, 3, size, size));
    let ch = image.channels();
    let sample = |r: usize, c: usize, k: usize| image.get(r, c, if ch == 1 { 0 } else { k }) as f32;
    for i in 0..nh {
        for j in 0..nw {
            if nh == h && nw == w {
                for k in 0..3 {
                    raw[[0, k, i, j]] = sample(i, j, k);
                }
                continue;
            }
            let sy = ((i as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((j as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ly, lx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for k in 0..3 {
                raw[[0, k, i, j]] = sample(y0, x0, k) * (1.0 - ly) * (1.0 - lx)
                    + sample(y0, x1, k) * (1.0 - ly) * lx
                    + sample(y1, x0, k) * ly * (1.0 - lx)
                    + sample(y1, x1, k) * ly * lx;
            }
        }
    }
    for k in 0..3 {
        let (m, s) = (norm.mean[k], norm.std[k]);
        raw.index_axis_mut(ndarray::Axis(1), k)
            .mapv_inplace(|v| (v / 255.0 - m) / s);
    }
    Prepared {
        tensor: raw,
        scale,
        orig_height: h,
        orig_width: w,
    }
}

/// Settings for the proxy pretraining task.
#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub image_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            image_size: 64,
            learning_rate: 2e-3,
            seed: 7,
        }
    }
}

/// Random rectangles, triangles and bars over noise. The target at each
/// stride-4 cell is the fraction of its pixels covered by bright shapes.
fn proxy_sample(size: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<f32>) {
    let mut img: Vec<u8> = (0..size * size)
        .map(|_| rng.random_range(0u8..50))
        .collect();
    let mut bright = vec![false; size * size];
    for _ in 0..rng.random_range(1..=4) {
        let intensity: u8 = rng.random_range(60..=255);
        let r0 = rng.random_range(0..size - 4) as isize;
        let c0 = rng.random_range(0..size - 4) as isize;
        let hh = rng.random_range(3..size as i64 / 2) as isize;
        let ww = rng.random_range(3..size as i64 / 2) as isize;
        let kind = rng.random_range(0..3);
        for r in r0..(r0 + hh).min(size as isize) {
            for c in c0..(c0 + ww).min(size as isize) {
                let inside = match kind {
                    0 => true,
                    1 => (c - c0) * hh <= (r - r0) * ww,
                    _ => (r - r0) % 4 < 2,
                };
                if inside {
                    let idx = r as usize * size + c as usize;
                    img[idx] = intensity;
                    bright[idx] = intensity > 150;
                }
            }
        }
    }
    let f = size / FEATURE_STRIDE;
    let mut target = vec![0.0f32; f * f];
    for (idx, &b) in bright.iter().enumerate() {
        if b {
            let (r, c) = (idx / size, idx % size);
            target[(r / FEATURE_STRIDE) * f + c / FEATURE_STRIDE] +=
                1.0 / (FEATURE_STRIDE * FEATURE_STRIDE) as f32;
        }
    }
    (img, target)
}

/// Trains a fresh backbone on the proxy task. Returns the backbone and the
/// mean loss of the first and last tenth of steps.
pub fn pretrain_backbone(
    backbone_id: &str,
    opts: &PretrainOptions,
) -> Result<(Backbone, f32, f32), EngineError> {
    let spec = backbone_spec(backbone_id)?;
    if opts.steps == 0
        || opts.batch == 0
        || opts.image_size < 16
        || !opts.image_size.is_multiple_of(FEATURE_STRIDE)
    {
        return Err(EngineError::Config(
            "pretraining needs steps, batch >= 1 and a valid image size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut backbone = Backbone::new(spec, &mut rng);
    let mut head = Conv2d::new(
        "proxy",
        backbone.out_channels(),
        1,
        1,
        1,
        0,
        Init::Normal(0.01),
        &mut rng,
    );
    let mut adam = Adam::new(opts.learning_rate);
    let s = opts.image_size;
    let f = s / FEATURE_STRIDE;
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut x = Array4::<f32>::zeros((opts.batch, 3, s, s));
        let mut targets = Vec::with_capacity(opts.batch);
        for b in 0..opts.batch {
            let (img, t) = proxy_sample(s, &mut rng);
            for k in 0..3 {
                let n = &spec.normalization;
                for (idx, &v) in img.iter().enumerate() {
                    x[[b, k, idx / s, idx % s]] = (v as f32 / 255.0 - n.mean[k]) / n.std[k];
                }
            }
            targets.push(t);
        }
        for p in backbone.params_mut() {
            p.zero_grad();
        }
        head.weight.zero_grad();
        head.bias.zero_grad();
        let (feat, cache) = backbone.forward(&x);
        let (logits, hcache) = head.forward(&feat);
        let mut dlogits = Array4::<f32>::zeros(logits.dim());
        let n = (opts.batch * f * f) as f32;
        let mut loss = 0.0;
        for b in 0..opts.batch {
            for i in 0..f {
                for j in 0..f {
                    let (l, d) = bce_with_logits(logits[[b, 0, i, j]], targets[b][i * f + j]);
                    loss += l / n;
                    dlogits[[b, 0, i, j]] = d / n;
                }
            }
        }
        losses.push(loss);
        let dfeat = head.backward(&dlogits, &hcache);
        backbone.backward(dfeat, &cache);
        let mut params = backbone.params_mut();
        params.extend(head.params_mut());
        clip_grad_norm(&mut params, 5.0);
        adam.step(&mut params);
    }
    let tenth = (opts.steps / 10).max(1);
    let first = losses[..tenth].iter().sum::<f32>() / tenth as f32;
    let last = losses[losses.len() - tenth..].iter().sum::<f32>() / tenth as f32;
    Ok((backbone, first, last))
}

pub fn backbone_tensors(backbone: &Backbone) -> TensorMap {
    backbone
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Saves backbone weights and their manifest for later transfer.
pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<WeightsManifest, EngineError> {
    let spec = backbone_spec(&backbone.id)?;
    save_pretrained(
        path,
        &backbone.id,
        spec.normalization,
        &backbone_tensors(backbone),
    )
}
