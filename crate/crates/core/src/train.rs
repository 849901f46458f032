//! Training of the refinement network over a frozen detector's outputs, and
//! top-K refinement at inference.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{match_image, MatchWeights};
use crate::detection::{Detection, GtInstance, ImageSize};
use crate::error::{Error, Result};
use crate::eval::{coco_eval, EvalSummary};
use crate::geometry::{iou, NormBox};
use crate::net::{
    fpn_backward, fpn_forward, fpn_forward_cached, refine_forward_traced, refiner_box_backward,
    FeaturePyramid, RefinerConfig, RefinerParams, StageTrace,
};
use crate::ops::{box_loss, refine_step_partials};
use crate::tensor::{Real, Tensor};

/// One image of the frozen detector: backbone features, predictions and
/// ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image_id: u64,
    pub image: ImageSize,
    pub backbone: FeaturePyramid<f32>,
    pub predictions: Vec<Detection>,
    pub gts: Vec<GtInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_l1) || !ok(self.w_giou) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.w_l1 == 0.0 && self.w_giou == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// First (1-based) epoch trained at `lr · lr_drop_factor`; 0 never drops.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub loss: LossWeights,
    pub matching: MatchWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            seed: 0,
            lr_drop_epoch: 11,
            lr_drop_factor: 0.1,
            loss: LossWeights::default(),
            matching: MatchWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("lr_drop_factor", self.lr_drop_factor),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        self.loss.validate()?;
        self.matching.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_drop_epoch > 0 && epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// `Σ_stages Σ_boxes [w_l1·‖b − t‖₁ + w_giou·(1 − giou(b, t))] / N`.
/// Zero for an empty target set.
pub fn regression_loss(
    stage_boxes: &[Vec<NormBox>],
    targets: &[NormBox],
    w: &LossWeights,
) -> Result<f64> {
    if targets.is_empty() {
        log::debug!("regression_loss: no targets");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, boxes) in stage_boxes.iter().enumerate() {
        if boxes.len() != targets.len() {
            return Err(Error::Shape {
                op: "regression_loss",
                detail: format!(
                    "stage {s} has {} boxes for {} targets",
                    boxes.len(),
                    targets.len()
                ),
            });
        }
        for (b, t) in boxes.iter().zip(targets) {
            total += box_loss(b.to_array(), t.to_array(), w.w_l1, w.w_giou).0;
        }
    }
    Ok(total / targets.len() as f64)
}

/// Matched prediction indices (ascending) and the normalized boxes of their
/// ground truths. Crowd annotations are never targets.
pub fn build_targets(sample: &TrainSample, w: &MatchWeights) -> Result<(Vec<usize>, Vec<NormBox>)> {
    let gts: Vec<GtInstance> = sample.gts.iter().filter(|g| !g.iscrowd).cloned().collect();
    if gts.is_empty() || sample.predictions.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let a = match_image(&sample.predictions, &gts, sample.image, w)?;
    Ok(a.pairs
        .iter()
        .map(|&(p, g)| (p, sample.image.normalize(&gts[g].bbox)))
        .unzip())
}

/// Summed (unnormalized) regression loss of one image and its gradient,
/// accumulated into `grads`.
///
/// Stage inputs are treated as constants: each stage's loss reaches the
/// parameters through that stage's deltas and sampled features only.
pub fn loss_and_grad<T: Real>(
    backbone: &FeaturePyramid<T>,
    boxes: &[NormBox],
    targets: &[NormBox],
    params: &RefinerParams<T>,
    rcfg: &RefinerConfig,
    w: &LossWeights,
    grads: &mut RefinerParams<T>,
) -> Result<f64> {
    if boxes.len() != targets.len() {
        return Err(Error::Shape {
            op: "loss_and_grad",
            detail: format!("{} boxes for {} targets", boxes.len(), targets.len()),
        });
    }
    if boxes.is_empty() {
        return Ok(0.0);
    }
    let (pyramid, cache) = fpn_forward_cached(backbone, params)?;
    let stages = refine_forward_traced(&pyramid, boxes, params, rcfg)?;
    let mut d_pyr: Vec<Vec<T>> = pyramid
        .levels
        .iter()
        .map(|l| vec![T::zero(); l.features.numel()])
        .collect();
    let mut total = 0.0;
    let n_weights = grads.refiners.len();
    for (s, st) in stages.iter().enumerate() {
        let wts = params.stage(s);
        let g = &mut grads.refiners[s.min(n_weights - 1)];
        for (i, t) in targets.iter().enumerate() {
            let out = st.outputs[i].to_array();
            let (l, d_out) = box_loss(out, t.to_array(), w.w_l1, w.w_giou);
            total += l;
            let inp = st.inputs[i].to_array();
            let d = st.deltas[i].to_array();
            let mut d_delta = [0.0; 4];
            for k in 0..4 {
                d_delta[k] = d_out[k] * refine_step_partials(inp[k], d[k], rcfg.clamp_eps).0;
            }
            refiner_box_backward(&pyramid, &st.boxes[i], wts, g, rcfg, d_delta, &mut d_pyr)?;
        }
    }
    let d_out: Vec<Tensor<T>> = d_pyr
        .into_iter()
        .zip(&pyramid.levels)
        .map(|(g, l)| Tensor::from_vec(l.features.shape(), g))
        .collect::<Result<_>>()?;
    fpn_backward(backbone, params, &cache, &d_out, grads)?;
    Ok(total)
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(p: &RefinerParams<f32>) -> Self {
        let z: Vec<Vec<f32>> = p
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    fn step(&mut self, p: &mut RefinerParams<f32>, g: &RefinerParams<f32>, lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let grads = g.named();
        for (k, t) in p.tensors_mut().into_iter().enumerate() {
            let gd = grads[k].1.data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let gi = gd[i] as f64;
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + wd * *x as f64;
                *x = (*x as f64 - lr * upd) as f32;
            }
        }
    }
}

fn global_norm(g: &RefinerParams<f32>) -> f64 {
    g.named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn scale(g: &mut RefinerParams<f32>, s: f64) {
    for t in g.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v as f64 * s) as f32);
    }
}

/// Held-out quality of a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    /// Matched predictions inside the top-K.
    pub matched: usize,
    /// Mean IoU to ground truth of those predictions before refinement.
    pub baseline_iou: f64,
    /// Same after the last refiner stage.
    pub refined_iou: f64,
    /// Mean IoU after each stage.
    pub stage_iou: Vec<f64>,
    pub baseline: EvalSummary,
    pub refined: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch normalized losses.
    pub train_loss: f64,
    pub matched_boxes: usize,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: RefinerParams<f32>,
    pub history: Vec<EpochMetrics>,
}

struct Prepared<'a> {
    sample: &'a TrainSample,
    boxes: Vec<NormBox>,
    targets: Vec<NormBox>,
}

/// Fits fresh parameters (seeded by `cfg.seed`) on `train_set`.
pub fn train(
    train_set: &[TrainSample],
    val_set: Option<&[TrainSample]>,
    cfg: &TrainConfig,
    rcfg: &RefinerConfig,
) -> Result<TrainOutput> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let params = RefinerParams::init(rcfg, &first.backbone.channels(), cfg.seed)?;
    train_from(params, train_set, val_set, cfg, rcfg)
}

/// Continues training from `params`.
pub fn train_from(
    mut params: RefinerParams<f32>,
    train_set: &[TrainSample],
    val_set: Option<&[TrainSample]>,
    cfg: &TrainConfig,
    rcfg: &RefinerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    rcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let channels = params.in_channels();
    let mut prepared = Vec::with_capacity(train_set.len());
    for s in train_set {
        s.backbone.validate()?;
        if s.backbone.channels() != channels {
            return Err(Error::Shape {
                op: "train",
                detail: format!(
                    "image {} has backbone channels {:?}, expected {:?}",
                    s.image_id,
                    s.backbone.channels(),
                    channels
                ),
            });
        }
        let (sel, targets) = build_targets(s, &cfg.matching)?;
        let boxes = sel
            .iter()
            .map(|&i| s.image.normalize(&s.predictions[i].bbox))
            .collect();
        prepared.push(Prepared {
            sample: s,
            boxes,
            targets,
        });
    }

    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_id = 0usize;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut matched_boxes = 0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, usize, RefinerParams<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let p = &prepared[i];
                    let mut g = params.zeros_like();
                    let l = loss_and_grad(
                        &p.sample.backbone,
                        &p.boxes,
                        &p.targets,
                        &params,
                        rcfg,
                        &cfg.loss,
                        &mut g,
                    )
                    .map_err(|e| {
                        if e.is_numeric() {
                            Error::NonFiniteLoss { batch: batch_id }
                        } else {
                            e
                        }
                    })?;
                    Ok((l, p.targets.len(), g))
                })
                .collect::<Result<_>>()?;
            let n: usize = parts.iter().map(|p| p.1).sum();
            let mut iter = parts.into_iter();
            let (mut loss, _, mut grads) = iter.next().expect("non-empty batch");
            for (l, _, g) in iter {
                loss += l;
                grads.add_assign(&g);
            }
            if n == 0 {
                log::debug!("batch {batch_id}: no matched boxes");
                batch_id += 1;
                continue;
            }
            loss /= n as f64;
            scale(&mut grads, 1.0 / n as f64);
            let norm = global_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_id });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                scale(&mut grads, cfg.clip_norm / norm);
            }
            opt.step(&mut params, &grads, lr, cfg.weight_decay);
            losses.push(loss);
            matched_boxes += n;
            batch_id += 1;
        }
        let train_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let val = match val_set {
            Some(v) => Some(validate(v, &params, rcfg, &cfg.matching)?),
            None => None,
        };
        match &val {
            Some(v) => log::info!(
                "epoch {epoch}: loss {train_loss:.5} lr {lr:.2e} val iou {:.4} -> {:.4} ap {:.4} -> {:.4}",
                v.baseline_iou,
                v.refined_iou,
                v.baseline.ap,
                v.refined.ap
            ),
            None => log::info!("epoch {epoch}: loss {train_loss:.5} lr {lr:.2e}"),
        }
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            matched_boxes,
            val,
        });
    }
    Ok(TrainOutput { params, history })
}

/// Prediction indices sorted by descending score (stable), truncated to `k`.
fn top_k_indices(preds: &[Detection], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    idx.truncate(k);
    idx
}

fn refine_sample(
    sample: &TrainSample,
    params: &RefinerParams<f32>,
    rcfg: &RefinerConfig,
) -> Result<(Vec<usize>, Vec<StageTrace<f32>>)> {
    let top = top_k_indices(&sample.predictions, rcfg.top_k);
    if top.is_empty() {
        return Ok((top, Vec::new()));
    }
    let pyramid = fpn_forward(&sample.backbone, params)?;
    let boxes: Vec<NormBox> = top
        .iter()
        .map(|&i| sample.image.normalize(&sample.predictions[i].bbox))
        .collect();
    let stages = refine_forward_traced(&pyramid, &boxes, params, rcfg)?;
    Ok((top, stages))
}

fn apply_refinement(
    sample: &TrainSample,
    top: &[usize],
    stages: &[StageTrace<f32>],
) -> Vec<Detection> {
    let mut out = sample.predictions.clone();
    let Some(last) = stages.last() else {
        return out;
    };
    for (j, &i) in top.iter().enumerate() {
        // a box no stage moved is returned bit-for-bit
        let untouched = stages.iter().all(|s| s.deltas[j].to_array() == [0.0; 4]);
        if !untouched {
            out[i].bbox = sample.image.denormalize(&last.outputs[j]);
        }
    }
    out
}

/// Refines the `top_k` highest-scoring predictions through every stage and
/// returns all predictions in input order. Only boxes change.
pub fn refine_topk(
    sample: &TrainSample,
    params: &RefinerParams<f32>,
    rcfg: &RefinerConfig,
) -> Result<Vec<Detection>> {
    let (top, stages) = refine_sample(sample, params, rcfg)?;
    Ok(apply_refinement(sample, &top, &stages))
}

fn categories_of(samples: &[TrainSample]) -> Vec<u64> {
    let set: BTreeSet<u64> = samples
        .iter()
        .flat_map(|s| {
            s.gts
                .iter()
                .map(|g| g.category_id)
                .chain(s.predictions.iter().map(|d| d.category_id))
        })
        .collect();
    set.into_iter().collect()
}

/// Mean matched IoU before/after refinement (per stage) and COCO metrics of
/// raw and refined predictions.
pub fn validate(
    samples: &[TrainSample],
    params: &RefinerParams<f32>,
    rcfg: &RefinerConfig,
    w: &MatchWeights,
) -> Result<ValMetrics> {
    struct PerImage {
        refined: Vec<Detection>,
        base: f64,
        stages: Vec<f64>,
        n: usize,
    }
    let per: Vec<PerImage> = samples
        .par_iter()
        .map(|s| {
            let (top, stages) = refine_sample(s, params, rcfg)?;
            let (sel, _) = build_targets(s, w)?;
            let gts: Vec<&GtInstance> = s.gts.iter().filter(|g| !g.iscrowd).collect();
            let assignment = if sel.is_empty() {
                Vec::new()
            } else {
                let owned: Vec<GtInstance> = gts.iter().map(|g| (*g).clone()).collect();
                match_image(&s.predictions, &owned, s.image, w)?.pairs
            };
            let mut base = 0.0;
            let mut st = vec![0.0; stages.len()];
            let mut n = 0;
            for (p, g) in assignment {
                let Some(j) = top.iter().position(|&t| t == p) else {
                    continue;
                };
                let gt = &gts[g].bbox;
                base += iou(&s.predictions[p].bbox, gt);
                let mut moved = false;
                for (k, stage) in stages.iter().enumerate() {
                    moved |= stage.deltas[j].to_array() != [0.0; 4];
                    let b = if moved {
                        s.image.denormalize(&stage.outputs[j])
                    } else {
                        s.predictions[p].bbox
                    };
                    st[k] += iou(&b, gt);
                }
                n += 1;
            }
            Ok(PerImage {
                refined: apply_refinement(s, &top, &stages),
                base,
                stages: st,
                n,
            })
        })
        .collect::<Result<_>>()?;

    let matched: usize = per.iter().map(|p| p.n).sum();
    let denom = matched.max(1) as f64;
    let baseline_iou = per.iter().map(|p| p.base).sum::<f64>() / denom;
    let mut stage_iou = vec![0.0; rcfg.num_refiners];
    for p in &per {
        for (k, v) in p.stages.iter().enumerate() {
            stage_iou[k] += v;
        }
    }
    stage_iou.iter_mut().for_each(|v| *v /= denom);
    let refined_iou = if matched == 0 {
        baseline_iou
    } else {
        *stage_iou.last().unwrap_or(&baseline_iou)
    };

    let cats = categories_of(samples);
    let gts: Vec<GtInstance> = samples.iter().flat_map(|s| s.gts.iter().cloned()).collect();
    let raw: Vec<Detection> = samples
        .iter()
        .flat_map(|s| s.predictions.iter().cloned())
        .collect();
    let refined: Vec<Detection> = per.into_iter().flat_map(|p| p.refined).collect();
    Ok(ValMetrics {
        matched,
        baseline_iou,
        refined_iou,
        stage_iou,
        baseline: coco_eval(&raw, &gts, &cats)?,
        refined: coco_eval(&refined, &gts, &cats)?,
    })
}
