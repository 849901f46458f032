//! The refinement network: an FPN head over the frozen backbone pyramid and a
//! stack of refiner stages (ROI Align → bottleneck residual blocks → MLP)
//! emitting logit-space box deltas.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_box, refine_step, BBox, BoxDelta, NormBox, DEFAULT_CLAMP_EPS};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Hyperparameters of the refinement network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// FPN output channels `C`.
    pub model_dim: usize,
    /// Input channels of the 3×3 conv in each bottleneck block.
    pub bottleneck_channels: usize,
    pub num_blocks: usize,
    pub num_refiners: usize,
    pub roi_size: usize,
    pub share_weights: bool,
    pub top_k: usize,
    pub clamp_eps: f64,
    pub sampling_ratio: usize,
    pub norm_groups: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            bottleneck_channels: 64,
            num_blocks: 3,
            num_refiners: 3,
            roi_size: 7,
            share_weights: true,
            top_k: 100,
            clamp_eps: DEFAULT_CLAMP_EPS,
            sampling_ratio: 2,
            norm_groups: 8,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("bottleneck_channels", self.bottleneck_channels),
            ("num_refiners", self.num_refiners),
            ("roi_size", self.roi_size),
            ("sampling_ratio", self.sampling_ratio),
            ("norm_groups", self.norm_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.norm_groups != 0
            || self.bottleneck_channels % self.norm_groups != 0
        {
            return Err(Error::Config(format!(
                "model_dim and bottleneck_channels must be divisible by norm_groups={}",
                self.norm_groups
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// One level of a feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<T: Real = f32> {
    /// `[C, H, W]`.
    pub features: Tensor<T>,
    pub stride: u32,
}

/// Multi-level dense features of one image, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    pub levels: Vec<PyramidLevel<T>>,
    pub image_width: u32,
    pub image_height: u32,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Shape {
                op: "FeaturePyramid",
                detail: "no levels".into(),
            });
        }
        for pair in self.levels.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(Error::Shape {
                    op: "FeaturePyramid",
                    detail: "strides must strictly increase".into(),
                });
            }
        }
        for l in &self.levels {
            let (_, h, w) = l.features.chw("FeaturePyramid")?;
            let eh = (self.image_height as f64 / l.stride as f64).ceil() as usize;
            let ew = (self.image_width as f64 / l.stride as f64).ceil() as usize;
            if h.abs_diff(eh) > 1 || w.abs_diff(ew) > 1 || h == 0 || w == 0 {
                return Err(Error::Shape {
                    op: "FeaturePyramid",
                    detail: format!(
                        "level stride {} is {h}x{w}, expected about {eh}x{ew}",
                        l.stride
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| PyramidLevel {
                    features: l.features.cast(),
                    stride: l.stride,
                })
                .collect(),
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.features.shape()[0]).collect()
    }
}

/// Level index for a box in image pixels:
/// `clamp(floor(k0 + log2(sqrt(area) / 224)), 0, L − 1)` where `k0` is the
/// stride-16 level.
pub fn assign_level<T: Real>(b: &BBox, pyramid: &FeaturePyramid<T>) -> usize {
    let strides: Vec<u32> = pyramid.levels.iter().map(|l| l.stride).collect();
    assign_level_for_strides(b, &strides)
}

pub(crate) fn assign_level_for_strides(b: &BBox, strides: &[u32]) -> usize {
    let last = strides.len().saturating_sub(1);
    // level whose stride is closest to 16 in log scale
    let k0 = strides
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = ((*a.1 as f64).log2() - 4.0).abs();
            let db = ((*b.1 as f64).log2() - 4.0).abs();
            da.total_cmp(&db)
        })
        .map_or(0, |(i, _)| i) as f64;
    let area = b.area();
    if !(area > 0.0) {
        return 0;
    }
    let k = (k0 + (area.sqrt() / 224.0).log2()).floor();
    k.clamp(0.0, last as f64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<T: Real = f32> {
    pub conv1: Conv<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv<T>,
    pub norm2: Norm<T>,
    pub conv3: Conv<T>,
    pub norm3: Norm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerWeights<T: Real = f32> {
    pub blocks: Vec<Bottleneck<T>>,
    pub fc1: Linear<T>,
    /// Emits the four deltas; zero at initialization.
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fpn<T: Real = f32> {
    pub lateral: Vec<Conv<T>>,
    pub output: Vec<Conv<T>>,
}

/// All trainable tensors. With shared weights `refiners` holds one entry
/// used by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams<T: Real = f32> {
    pub fpn: Fpn<T>,
    pub refiners: Vec<RefinerWeights<T>>,
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("sized").with_grad()
}

fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_grad()
}

impl<T: Real> Conv<T> {
    fn init(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: zeros(&[c_out]),
        }
    }
}

impl<T: Real> Norm<T> {
    fn init(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], T::one()).with_grad(),
            beta: zeros(&[c]),
        }
    }
}

impl<T: Real> RefinerWeights<T> {
    fn init(cfg: &RefinerConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.model_dim;
        let b = cfg.bottleneck_channels;
        let blocks = (0..cfg.num_blocks)
            .map(|_| Bottleneck {
                conv1: Conv::init(c, b, 1, rng),
                norm1: Norm::init(b),
                conv2: Conv::init(b, b, 3, rng),
                norm2: Norm::init(b),
                conv3: Conv::init(b, c, 1, rng),
                norm3: Norm::init(c),
            })
            .collect();
        Self {
            blocks,
            fc1: Linear {
                weight: he_uniform(&[c, c], c, rng),
                bias: zeros(&[c]),
            },
            fc2: Linear {
                weight: zeros(&[4, c]),
                bias: zeros(&[4]),
            },
        }
    }
}

impl<T: Real> RefinerParams<T> {
    /// Fresh parameters for a backbone with the given per-level channels.
    pub fn init(cfg: &RefinerConfig, in_channels: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if in_channels.is_empty() {
            return Err(Error::Config(
                "backbone must have at least one level".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.model_dim;
        let lateral = in_channels
            .iter()
            .map(|&ci| Conv::init(ci, c, 1, &mut rng))
            .collect();
        let output = in_channels
            .iter()
            .map(|_| Conv::init(c, c, 3, &mut rng))
            .collect();
        let n_ref = if cfg.share_weights {
            1
        } else {
            cfg.num_refiners
        };
        let refiners = (0..n_ref)
            .map(|_| RefinerWeights::init(cfg, &mut rng))
            .collect();
        Ok(Self {
            fpn: Fpn { lateral, output },
            refiners,
        })
    }

    /// Weights used by refiner stage `stage`.
    pub fn stage(&self, stage: usize) -> &RefinerWeights<T> {
        &self.refiners[stage.min(self.refiners.len() - 1)]
    }

    pub fn in_channels(&self) -> Vec<usize> {
        self.fpn
            .lateral
            .iter()
            .map(|c| c.weight.shape()[1])
            .collect()
    }

    /// Every tensor with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.fpn.lateral.iter().enumerate() {
            out.push((format!("fpn.lateral.{i}.weight"), &c.weight));
            out.push((format!("fpn.lateral.{i}.bias"), &c.bias));
        }
        for (i, c) in self.fpn.output.iter().enumerate() {
            out.push((format!("fpn.output.{i}.weight"), &c.weight));
            out.push((format!("fpn.output.{i}.bias"), &c.bias));
        }
        for (r, rw) in self.refiners.iter().enumerate() {
            for (bi, b) in rw.blocks.iter().enumerate() {
                let p = format!("refiner.{r}.block.{bi}");
                for (n, conv, norm) in [
                    ("1", &b.conv1, &b.norm1),
                    ("2", &b.conv2, &b.norm2),
                    ("3", &b.conv3, &b.norm3),
                ] {
                    out.push((format!("{p}.conv{n}.weight"), &conv.weight));
                    out.push((format!("{p}.conv{n}.bias"), &conv.bias));
                    out.push((format!("{p}.norm{n}.gamma"), &norm.gamma));
                    out.push((format!("{p}.norm{n}.beta"), &norm.beta));
                }
            }
            out.push((format!("refiner.{r}.fc1.weight"), &rw.fc1.weight));
            out.push((format!("refiner.{r}.fc1.bias"), &rw.fc1.bias));
            out.push((format!("refiner.{r}.fc2.weight"), &rw.fc2.weight));
            out.push((format!("refiner.{r}.fc2.bias"), &rw.fc2.bias));
        }
        out
    }

    /// Same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in self
            .fpn
            .lateral
            .iter_mut()
            .chain(self.fpn.output.iter_mut())
        {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for rw in &mut self.refiners {
            for b in &mut rw.blocks {
                for (conv, norm) in [
                    (&mut b.conv1, &mut b.norm1),
                    (&mut b.conv2, &mut b.norm2),
                    (&mut b.conv3, &mut b.norm3),
                ] {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                    out.push(&mut norm.gamma);
                    out.push(&mut norm.beta);
                }
            }
            out.push(&mut rw.fc1.weight);
            out.push(&mut rw.fc1.bias);
            out.push(&mut rw.fc2.weight);
            out.push(&mut rw.fc2.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero tensors of identical structure, used as gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let others = other.named();
        for (t, (_, o)) in self.tensors_mut().into_iter().zip(others) {
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> RefinerParams<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
        };
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        RefinerParams {
            fpn: Fpn {
                lateral: self.fpn.lateral.iter().map(conv).collect(),
                output: self.fpn.output.iter().map(conv).collect(),
            },
            refiners: self
                .refiners
                .iter()
                .map(|r| RefinerWeights {
                    blocks: r
                        .blocks
                        .iter()
                        .map(|b| Bottleneck {
                            conv1: conv(&b.conv1),
                            norm1: norm(&b.norm1),
                            conv2: conv(&b.conv2),
                            norm2: norm(&b.norm2),
                            conv3: conv(&b.conv3),
                            norm3: norm(&b.norm3),
                        })
                        .collect(),
                    fc1: lin(&r.fc1),
                    fc2: lin(&r.fc2),
                })
                .collect(),
        }
    }
}

/// Intermediates of an FPN forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct FpnCache<T: Real> {
    merged: Vec<Tensor<T>>,
}

fn check_levels<T: Real>(backbone: &FeaturePyramid<T>, p: &RefinerParams<T>) -> Result<()> {
    if backbone.levels.len() != p.fpn.lateral.len() {
        return Err(Error::Shape {
            op: "fpn_forward",
            detail: format!(
                "backbone has {} levels, FPN expects {}",
                backbone.levels.len(),
                p.fpn.lateral.len()
            ),
        });
    }
    Ok(())
}

/// Top-down FPN: lateral 1×1 projections, nearest upsampling of the coarser
/// merged map, elementwise sum, then a 3×3 output conv per level. Strides are
/// preserved.
pub fn fpn_forward<T: Real>(
    backbone: &FeaturePyramid<T>,
    p: &RefinerParams<T>,
) -> Result<FeaturePyramid<T>> {
    fpn_forward_cached(backbone, p).map(|(out, _)| out)
}

pub fn fpn_forward_cached<T: Real>(
    backbone: &FeaturePyramid<T>,
    p: &RefinerParams<T>,
) -> Result<(FeaturePyramid<T>, FpnCache<T>)> {
    check_levels(backbone, p)?;
    let n = backbone.levels.len();
    let mut merged: Vec<Option<Tensor<T>>> = vec![None; n];
    for i in (0..n).rev() {
        let lvl = &backbone.levels[i];
        let lat = ops::conv2d(
            &lvl.features,
            &p.fpn.lateral[i].weight,
            &p.fpn.lateral[i].bias,
        )?;
        let m = match &merged.get(i + 1).and_then(|m| m.as_ref()) {
            Some(coarser) => {
                let up = ops::upsample_nearest(coarser, lat.shape()[1], lat.shape()[2])?;
                ops::add(&lat, &up)?
            }
            None => lat,
        };
        merged[i] = Some(m);
    }
    let merged: Vec<Tensor<T>> = merged.into_iter().map(|m| m.expect("filled")).collect();
    let mut levels = Vec::with_capacity(n);
    for (i, m) in merged.iter().enumerate() {
        let out = ops::conv2d(m, &p.fpn.output[i].weight, &p.fpn.output[i].bias)?;
        out.check_finite(&format!("fpn.output.{i}"))?;
        levels.push(PyramidLevel {
            features: out,
            stride: backbone.levels[i].stride,
        });
    }
    Ok((
        FeaturePyramid {
            levels,
            image_width: backbone.image_width,
            image_height: backbone.image_height,
        },
        FpnCache { merged },
    ))
}

/// Backward of the FPN given gradients w.r.t. its output levels. The
/// backbone is frozen, so no input gradient is produced.
pub fn fpn_backward<T: Real>(
    backbone: &FeaturePyramid<T>,
    p: &RefinerParams<T>,
    cache: &FpnCache<T>,
    d_out: &[Tensor<T>],
    grads: &mut RefinerParams<T>,
) -> Result<()> {
    let n = backbone.levels.len();
    let mut d_merged: Vec<Tensor<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let oc = &p.fpn.output[i];
        let g = &mut grads.fpn.output[i];
        // levels no box was routed to carry no gradient into their output conv
        let mut dm = if d_out[i].data().iter().all(|v| *v == T::zero()) {
            Tensor::zeros(cache.merged[i].shape())
        } else {
            ops::conv2d_backward(
                &cache.merged[i],
                &oc.weight,
                &oc.bias,
                &d_out[i],
                g.weight.data_mut(),
                g.bias.data_mut(),
                true,
            )?
            .expect("requested dx")
        };
        if i > 0 {
            let (_, h, w) = cache.merged[i].chw("fpn_backward")?;
            let up = ops::upsample_nearest_backward(&d_merged[i - 1], h, w)?;
            dm = ops::add(&dm, &up)?;
        }
        d_merged.push(dm);
    }
    for i in 0..n {
        let lc = &p.fpn.lateral[i];
        let g = &mut grads.fpn.lateral[i];
        ops::conv2d_backward(
            &backbone.levels[i].features,
            &lc.weight,
            &lc.bias,
            &d_merged[i],
            g.weight.data_mut(),
            g.bias.data_mut(),
            false,
        )?;
    }
    Ok(())
}

/// Per-box intermediates of one refiner stage.
#[derive(Debug, Clone)]
pub struct BoxTrace<T: Real> {
    level: usize,
    taps: Vec<Vec<(usize, f64)>>,
    blocks: Vec<BlockTrace<T>>,
    /// Output of the last block, `[C, R, R]`.
    last: Tensor<T>,
    pooled: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T: Real> {
    input: Tensor<T>,
    r1: Tensor<T>,
    r2: Tensor<T>,
    r3: Tensor<T>,
    n1: ops::GroupNormCache<T>,
    n2: ops::GroupNormCache<T>,
    n3: ops::GroupNormCache<T>,
}

fn box_roi<T: Real>(b: &NormBox, pyramid: &FeaturePyramid<T>) -> (usize, [f64; 4]) {
    let abs = b.to_bbox(pyramid.image_width as f64, pyramid.image_height as f64);
    let level = assign_level(&abs, pyramid);
    let s = pyramid.levels[level].stride as f64;
    (level, [abs.x1 / s, abs.y1 / s, abs.x2 / s, abs.y2 / s])
}

fn refiner_box<T: Real>(
    pyramid: &FeaturePyramid<T>,
    b: &NormBox,
    w: &RefinerWeights<T>,
    cfg: &RefinerConfig,
) -> Result<(BoxDelta, BoxTrace<T>)> {
    let (level, roi) = box_roi(b, pyramid);
    let feat = &pyramid.levels[level].features;
    let (_, fh, fw) = feat.chw("refiner_module")?;
    let taps = ops::roi_align_taps(fh, fw, roi, cfg.roi_size, cfg.sampling_ratio);
    let mut h = ops::roi_align_with_taps(feat, &taps, cfg.roi_size);
    h.check_finite("roi_align")?;

    let mut blocks = Vec::with_capacity(w.blocks.len());
    for (bi, blk) in w.blocks.iter().enumerate() {
        let name = |s: &str| format!("block{bi}.{s}");
        let a1 = ops::conv2d(&h, &blk.conv1.weight, &blk.conv1.bias)?;
        let (z1, n1) = ops::group_norm(&a1, &blk.norm1.gamma, &blk.norm1.beta, cfg.norm_groups)?;
        let r1 = ops::relu(&z1);
        r1.check_finite(&name("conv1"))?;
        let a2 = ops::conv2d(&r1, &blk.conv2.weight, &blk.conv2.bias)?;
        let (z2, n2) = ops::group_norm(&a2, &blk.norm2.gamma, &blk.norm2.beta, cfg.norm_groups)?;
        let r2 = ops::relu(&z2);
        r2.check_finite(&name("conv2"))?;
        let a3 = ops::conv2d(&r2, &blk.conv3.weight, &blk.conv3.bias)?;
        let (z3, n3) = ops::group_norm(&a3, &blk.norm3.gamma, &blk.norm3.beta, cfg.norm_groups)?;
        let r3 = ops::relu(&z3);
        r3.check_finite(&name("conv3"))?;
        let out = ops::add(&h, &r3)?;
        blocks.push(BlockTrace {
            input: h,
            r1,
            r2,
            r3,
            n1,
            n2,
            n3,
        });
        h = out;
    }
    let pooled = ops::global_avg_pool(&h)?;
    let z = ops::linear(&pooled, &w.fc1.weight, &w.fc1.bias)?;
    let hidden: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
    let d = ops::linear(&hidden, &w.fc2.weight, &w.fc2.bias)?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fc2".into()));
    }
    let delta = BoxDelta {
        dcx: d[0].f64(),
        dcy: d[1].f64(),
        dw: d[2].f64(),
        dh: d[3].f64(),
    };
    Ok((
        delta,
        BoxTrace {
            level,
            taps,
            blocks,
            last: h,
            pooled,
            hidden,
        },
    ))
}

/// One refiner stage over a set of boxes: deltas for every box, in order.
pub fn refiner_module<T: Real>(
    pyramid: &FeaturePyramid<T>,
    boxes: &[NormBox],
    w: &RefinerWeights<T>,
    cfg: &RefinerConfig,
) -> Result<Vec<BoxDelta>> {
    boxes
        .iter()
        .map(|b| refiner_box(pyramid, b, w, cfg).map(|(d, _)| d))
        .collect()
}

/// Backward of one box through one refiner stage. `d_delta` is the loss
/// gradient w.r.t. the four deltas; parameter gradients go to `grads`,
/// feature gradients to `d_pyramid` (one buffer per level).
pub fn refiner_box_backward<T: Real>(
    pyramid: &FeaturePyramid<T>,
    trace: &BoxTrace<T>,
    w: &RefinerWeights<T>,
    grads: &mut RefinerWeights<T>,
    cfg: &RefinerConfig,
    d_delta: [f64; 4],
    d_pyramid: &mut [Vec<T>],
) -> Result<()> {
    let dd: Vec<T> = d_delta.iter().map(|&v| T::of(v)).collect();
    let d_hidden = ops::linear_backward(
        &trace.hidden,
        &w.fc2.weight,
        &dd,
        grads.fc2.weight.data_mut(),
        grads.fc2.bias.data_mut(),
    );
    let d_z: Vec<T> = d_hidden
        .iter()
        .zip(&trace.hidden)
        .map(|(&g, &h)| if h > T::zero() { g } else { T::zero() })
        .collect();
    let d_pooled = ops::linear_backward(
        &trace.pooled,
        &w.fc1.weight,
        &d_z,
        grads.fc1.weight.data_mut(),
        grads.fc1.bias.data_mut(),
    );
    let shape = {
        let (c, h, ww) = trace.last.chw("refiner backward")?;
        [c, h, ww]
    };
    let mut dh = ops::global_avg_pool_backward(&d_pooled, shape);

    for (bi, blk) in w.blocks.iter().enumerate().rev() {
        let t = &trace.blocks[bi];
        let g = &mut grads.blocks[bi];
        // out = input + r3
        let d_r3 = dh.clone();
        let dz3 = ops::relu_backward(&t.r3, &d_r3);
        let da3 = ops::group_norm_backward(
            &t.n3,
            &blk.norm3.gamma,
            &dz3,
            g.norm3.gamma.data_mut(),
            g.norm3.beta.data_mut(),
        )?;
        let dr2 = ops::conv2d_backward(
            &t.r2,
            &blk.conv3.weight,
            &blk.conv3.bias,
            &da3,
            g.conv3.weight.data_mut(),
            g.conv3.bias.data_mut(),
            true,
        )?
        .expect("dx");
        let dz2 = ops::relu_backward(&t.r2, &dr2);
        let da2 = ops::group_norm_backward(
            &t.n2,
            &blk.norm2.gamma,
            &dz2,
            g.norm2.gamma.data_mut(),
            g.norm2.beta.data_mut(),
        )?;
        let dr1 = ops::conv2d_backward(
            &t.r1,
            &blk.conv2.weight,
            &blk.conv2.bias,
            &da2,
            g.conv2.weight.data_mut(),
            g.conv2.bias.data_mut(),
            true,
        )?
        .expect("dx");
        let dz1 = ops::relu_backward(&t.r1, &dr1);
        let da1 = ops::group_norm_backward(
            &t.n1,
            &blk.norm1.gamma,
            &dz1,
            g.norm1.gamma.data_mut(),
            g.norm1.beta.data_mut(),
        )?;
        let dx = ops::conv2d_backward(
            &t.input,
            &blk.conv1.weight,
            &blk.conv1.bias,
            &da1,
            g.conv1.weight.data_mut(),
            g.conv1.bias.data_mut(),
            true,
        )?
        .expect("dx");
        dh = ops::add(&dh, &dx)?;
    }

    let feat = &pyramid.levels[trace.level].features;
    let (c, h, ww) = feat.chw("refiner backward")?;
    ops::roi_align_backward_with_taps(
        [c, h, ww],
        &trace.taps,
        cfg.roi_size,
        &dh,
        &mut d_pyramid[trace.level],
    )
}

/// Forward trace of all stages for one image.
#[derive(Debug, Clone)]
pub struct StageTrace<T: Real> {
    /// Input boxes of this stage (clamped).
    pub inputs: Vec<NormBox>,
    pub deltas: Vec<BoxDelta>,
    pub outputs: Vec<NormBox>,
    pub boxes: Vec<BoxTrace<T>>,
}

/// Runs `num_refiners` stages over an already FPN-processed pyramid. Each
/// stage refines the previous stage's output; every stage's boxes are
/// returned (index 0 is the first stage).
pub fn refine_forward<T: Real>(
    pyramid: &FeaturePyramid<T>,
    boxes: &[NormBox],
    params: &RefinerParams<T>,
    cfg: &RefinerConfig,
) -> Result<Vec<Vec<NormBox>>> {
    Ok(refine_forward_traced(pyramid, boxes, params, cfg)?
        .into_iter()
        .map(|s| s.outputs)
        .collect())
}

pub fn refine_forward_traced<T: Real>(
    pyramid: &FeaturePyramid<T>,
    boxes: &[NormBox],
    params: &RefinerParams<T>,
    cfg: &RefinerConfig,
) -> Result<Vec<StageTrace<T>>> {
    let mut stages = Vec::with_capacity(cfg.num_refiners);
    let mut current: Vec<NormBox> = boxes.iter().map(|b| clamp_box(b, cfg.clamp_eps)).collect();
    for s in 0..cfg.num_refiners {
        let w = params.stage(s);
        let mut deltas = Vec::with_capacity(current.len());
        let mut traces = Vec::with_capacity(current.len());
        let mut outputs = Vec::with_capacity(current.len());
        for b in &current {
            let (d, t) = refiner_box(pyramid, b, w, cfg)?;
            outputs.push(refine_step(b, &d, cfg.clamp_eps));
            deltas.push(d);
            traces.push(t);
        }
        stages.push(StageTrace {
            inputs: std::mem::replace(&mut current, outputs.clone()),
            deltas,
            outputs,
            boxes: traces,
        });
    }
    Ok(stages)
}
