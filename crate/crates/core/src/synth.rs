//! A synthetic frozen detector: ground truth, backbone-like feature pyramids
//! that encode box extent, and jittered predictions with class
//! distributions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, GtInstance, ImageSize};
use crate::error::{Error, Result};
use crate::geometry::{refine_step, sigmoid, BBox, BoxDelta, DEFAULT_CLAMP_EPS};
use crate::net::{FeaturePyramid, PyramidLevel};
use crate::tensor::Tensor;
use crate::train::TrainSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    /// Square images of this side length in pixels.
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_categories: usize,
    /// Standard deviation of the logit-space box jitter.
    pub jitter: f64,
    /// Expected false positives per ground-truth object.
    pub fp_rate: f64,
    /// Probability that a true positive carries a wrong label.
    pub label_noise: f64,
    pub channels: Vec<usize>,
    pub strides: Vec<u32>,
    /// Signal amplitude over noise standard deviation.
    pub snr: f64,
    pub min_box: f64,
    pub max_box: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 250,
            image_size: 128,
            min_objects: 1,
            max_objects: 6,
            num_categories: 3,
            jitter: 0.1,
            fp_rate: 0.2,
            label_noise: 0.1,
            channels: vec![12; 4],
            strides: vec![4, 8, 16, 32],
            snr: 4.0,
            min_box: 12.0,
            max_box: 64.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_images == 0 || self.image_size == 0 || self.num_categories == 0 {
            return bad("num_images, image_size and num_categories must be positive");
        }
        if self.max_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 0 <= min_objects <= max_objects, max_objects > 0");
        }
        if !(self.jitter >= 0.0 && self.jitter < 0.5) {
            return bad("jitter must lie in [0, 0.5)");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad("fp_rate must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]");
        }
        if self.channels.is_empty()
            || self.channels.len() != self.strides.len()
            || self.channels.contains(&0)
        {
            return bad("channels and strides must be non-empty, positive and of equal length");
        }
        if self.strides.windows(2).any(|w| w[1] <= w[0]) || self.strides[0] == 0 {
            return bad("strides must be positive and strictly increasing");
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad("snr must be positive");
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box)
            || self.max_box > self.image_size as f64
        {
            return bad("need 0 < min_box <= max_box <= image_size");
        }
        Ok(())
    }
}

/// A generated dataset; image ids run from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<TrainSample>,
    pub categories: Vec<u64>,
}

impl SynthDataset {
    pub fn gts(&self) -> Vec<GtInstance> {
        self.samples
            .iter()
            .flat_map(|s| s.gts.iter().cloned())
            .collect()
    }

    pub fn predictions(&self) -> Vec<Detection> {
        self.samples
            .iter()
            .flat_map(|s| s.predictions.iter().cloned())
            .collect()
    }

    /// Splits after the first `n` images.
    pub fn split(mut self, n: usize) -> (SynthDataset, SynthDataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let cats = self.categories.clone();
        (
            self,
            SynthDataset {
                samples: rest,
                categories: cats,
            },
        )
    }
}

fn soft_step(v: f64, tau: f64) -> f64 {
    sigmoid(v / tau)
}

/// Number of distinct channel patterns; channel `c` renders pattern `c % 6`.
pub const NUM_PATTERNS: usize = 6;

/// Value of box pattern `kind` of box `b` at pixel `(x, y)`: a soft box
/// indicator, a center bump whose amplitude grows with the box, and
/// horizontal/vertical ramps across the box.
fn pattern(kind: usize, b: &BBox, x: f64, y: f64, tau: f64, image: f64) -> f64 {
    let inside = soft_step(x - b.x1, tau)
        * soft_step(b.x2 - x, tau)
        * soft_step(y - b.y1, tau)
        * soft_step(b.y2 - y, tau);
    let (cx, cy) = (0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2));
    let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
    match kind {
        0 => inside,
        1 => {
            let amp = 4.0 * (b.width() * b.height()).sqrt() / image;
            let (sx, sy) = (0.5 * hw, 0.5 * hh);
            amp * (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp()
        }
        2 => inside * (x - cx) / hw,
        _ => inside * (y - cy) / hh,
    }
}

fn render(cfg: &SynthConfig, boxes: &[BBox], rng: &mut ChaCha8Rng) -> FeaturePyramid<f32> {
    let size = cfg.image_size as f64;
    let noise = Normal::new(0.0, 1.0 / cfg.snr).expect("positive std");
    let levels = cfg
        .strides
        .iter()
        .zip(&cfg.channels)
        .map(|(&stride, &c)| {
            let s = stride as f64;
            let hw = (size / s).ceil() as usize;
            let tau = 0.25 * s;
            let mut data = vec![0f32; c * hw * hw];
            for ch in 0..c {
                let kind = ch % NUM_PATTERNS;
                for i in 0..hw {
                    let y = (i as f64 + 0.5) * s;
                    for j in 0..hw {
                        let x = (j as f64 + 0.5) * s;
                        // the last two patterns are absolute image coordinates
                        let v: f64 = match kind {
                            4 => x / size - 0.5,
                            5 => y / size - 0.5,
                            _ => boxes
                                .iter()
                                .map(|b| pattern(kind, b, x, y, tau, size))
                                .sum(),
                        };
                        data[(ch * hw + i) * hw + j] = (v + noise.sample(rng)) as f32;
                    }
                }
            }
            PyramidLevel {
                features: Tensor::from_vec(&[c, hw, hw], data).expect("sized"),
                stride,
            }
        })
        .collect();
    FeaturePyramid {
        levels,
        image_width: cfg.image_size,
        image_height: cfg.image_size,
    }
}

fn class_probs(
    cfg: &SynthConfig,
    label: u64,
    confidence: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<u64, f64> {
    let k = cfg.num_categories as u64;
    let mut rest: Vec<f64> = (1..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = rest.iter().sum();
    let spare = 1.0 - confidence;
    rest.iter_mut().for_each(|v| *v *= spare / total.max(1e-12));
    let mut out = BTreeMap::new();
    let mut it = rest.into_iter();
    for c in 1..=k {
        let p = if c == label {
            confidence
        } else {
            it.next().unwrap_or(0.0)
        };
        out.insert(c, p);
    }
    out
}

fn other_category(cfg: &SynthConfig, c: u64, rng: &mut ChaCha8Rng) -> u64 {
    if cfg.num_categories < 2 {
        return c;
    }
    let k = cfg.num_categories as u64;
    let shift = rng.gen_range(1..k);
    (c - 1 + shift) % k + 1
}

/// Generates `cfg.num_images` samples, fully determined by `cfg.seed`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let size = cfg.image_size as f64;
    let image = ImageSize::new(size, size);
    let mut samples = Vec::with_capacity(cfg.num_images);
    let mut ann_id = 1u64;
    for image_id in 1..=cfg.num_images as u64 {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut gts = Vec::with_capacity(n);
        for _ in 0..n {
            let w = rng.gen_range(cfg.min_box..=cfg.max_box);
            let h = rng.gen_range(cfg.min_box..=cfg.max_box);
            let x = rng.gen_range(0.0..=size - w);
            let y = rng.gen_range(0.0..=size - h);
            let cat = rng.gen_range(1..=cfg.num_categories as u64);
            gts.push(GtInstance::new(
                ann_id,
                image_id,
                cat,
                BBox::from_xywh(x, y, w, h)?,
            ));
            ann_id += 1;
        }
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let backbone = render(cfg, &boxes, &mut rng);

        let mut predictions = Vec::new();
        for g in &gts {
            let d = BoxDelta {
                dcx: jitter.sample(&mut rng),
                dcy: jitter.sample(&mut rng),
                dw: jitter.sample(&mut rng),
                dh: jitter.sample(&mut rng),
            };
            let b = image.denormalize(&refine_step(
                &image.normalize(&g.bbox),
                &d,
                DEFAULT_CLAMP_EPS,
            ));
            // quality falls with the jitter magnitude
            let mag = d.to_array().iter().map(|v| v.abs()).sum::<f64>();
            let quality = (-2.0 * mag).exp();
            let confidence = (0.55 + 0.4 * quality + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.99);
            let label = if rng.gen::<f64>() < cfg.label_noise {
                other_category(cfg, g.category_id, &mut rng)
            } else {
                g.category_id
            };
            let probs = class_probs(cfg, label, confidence, &mut rng);
            predictions
                .push(Detection::new(image_id, label, confidence, b).with_class_probs(probs));
        }
        let n_fp = {
            let mut k = 0;
            for _ in 0..gts.len() {
                if rng.gen::<f64>() < cfg.fp_rate.fract() {
                    k += 1;
                }
                k += cfg.fp_rate.trunc() as usize;
            }
            k
        };
        for _ in 0..n_fp {
            let w = rng.gen_range(cfg.min_box..=cfg.max_box);
            let h = rng.gen_range(cfg.min_box..=cfg.max_box);
            let x = rng.gen_range(0.0..=size - w);
            let y = rng.gen_range(0.0..=size - h);
            let label = rng.gen_range(1..=cfg.num_categories as u64);
            let confidence = rng.gen_range(0.05..0.6);
            let probs = class_probs(cfg, label, confidence, &mut rng);
            predictions.push(
                Detection::new(image_id, label, confidence, BBox::from_xywh(x, y, w, h)?)
                    .with_class_probs(probs),
            );
        }
        samples.push(TrainSample {
            image_id,
            image,
            backbone,
            predictions,
            gts,
        });
    }
    Ok(SynthDataset {
        samples,
        categories: (1..=cfg.num_categories as u64).collect(),
    })
}
