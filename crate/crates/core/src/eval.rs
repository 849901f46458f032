//! COCO-protocol box evaluation and the ideal-performance (error elimination)
//! analysis.
//!
//! The evaluator follows `pycocotools` for `iouType = "bbox"`: per category,
//! area range and detection budget, detections are matched greedily in score
//! order to the best still-unmatched ground truth above each IoU threshold;
//! crowd annotations act as ignore regions, and precision is read off the
//! monotone envelope at 101 recall points.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{match_image, MatchWeights};
use crate::detection::{indices_by_image, Detection, GtInstance, ImageSize};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;
pub const MAX_DETS: [usize; 3] = [1, 10, 100];

/// Area ranges in evaluation order: all, small, medium, large. Both bounds
/// are inclusive, as in the reference tooling.
pub const AREA_RANGES: [(f64, f64); 4] = [
    (0.0, 1e10),
    (0.0, 32.0 * 32.0),
    (32.0 * 32.0, 96.0 * 96.0),
    (96.0 * 96.0, 1e10),
];

/// `n` evenly spaced points rounded the way numpy's `linspace` rounds
/// them; recall and IoU can land exactly on a grid point.
fn linspace<const N: usize>(start: f64, stop: f64) -> [f64; N] {
    let step = (stop - start) / (N - 1) as f64;
    std::array::from_fn(|i| {
        if i == N - 1 {
            stop
        } else {
            start + i as f64 * step
        }
    })
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    linspace(0.5, 0.95)
}

fn recall_points() -> [f64; NUM_RECALL_POINTS] {
    linspace(0.0, 1.0)
}

/// The twelve standard COCO box metrics. `-1` marks a metric with no
/// ground truth to evaluate against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
}

impl EvalSummary {
    pub const UNDEFINED: EvalSummary = EvalSummary {
        ap: -1.0,
        ap50: -1.0,
        ap75: -1.0,
        ap_s: -1.0,
        ap_m: -1.0,
        ap_l: -1.0,
        ar1: -1.0,
        ar10: -1.0,
        ar100: -1.0,
        ar_s: -1.0,
        ar_m: -1.0,
        ar_l: -1.0,
    };

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar1, self.ar10,
            self.ar100, self.ar_s, self.ar_m, self.ar_l,
        ]
    }

    pub fn from_array(v: [f64; 12]) -> Self {
        Self {
            ap: v[0],
            ap50: v[1],
            ap75: v[2],
            ap_s: v[3],
            ap_m: v[4],
            ap_l: v[5],
            ar1: v[6],
            ar10: v[7],
            ar100: v[8],
            ar_s: v[9],
            ar_m: v[10],
            ar_l: v[11],
        }
    }

    pub const METRIC_NAMES: [&'static str; 12] = [
        "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "ar1", "ar10", "ar100", "ar_s", "ar_m",
        "ar_l",
    ];

    /// Fieldwise `self - base`; undefined on either side stays undefined.
    pub fn minus(&self, base: &EvalSummary) -> EvalSummary {
        let a = self.to_array();
        let b = base.to_array();
        EvalSummary::from_array(std::array::from_fn(|i| {
            if a[i] < 0.0 || b[i] < 0.0 {
                -1.0
            } else {
                a[i] - b[i]
            }
        }))
    }
}

/// Per-image matching state for one (image, category, area range) cell.
#[derive(Debug, Clone)]
struct ImageEval {
    /// Scores of detections, sorted descending, truncated to the largest budget.
    dt_scores: Vec<f64>,
    /// `[threshold][det]`: matched to some ground truth.
    dt_matched: Vec<Vec<bool>>,
    /// `[threshold][det]`: excluded from the counts.
    dt_ignore: Vec<Vec<bool>>,
    num_gt_counted: usize,
}

/// Accumulated precision/recall tables.
#[derive(Debug, Clone)]
pub struct CocoEvaluation {
    pub categories: Vec<u64>,
    /// `[t][r][k][a][m]`, `-1` where the cell has no ground truth.
    precision: Vec<f64>,
    /// `[t][k][a][m]`.
    recall: Vec<f64>,
}

impl CocoEvaluation {
    fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.categories.len(),
            AREA_RANGES.len(),
            MAX_DETS.len(),
            NUM_RECALL_POINTS,
        )
    }

    fn p_idx(&self, t: usize, r: usize, k: usize, a: usize, m: usize) -> usize {
        let (nk, na, nm, nr) = self.dims();
        (((t * nr + r) * nk + k) * na + a) * nm + m
    }

    fn r_idx(&self, t: usize, k: usize, a: usize, m: usize) -> usize {
        let (nk, na, nm, _) = self.dims();
        ((t * nk + k) * na + a) * nm + m
    }

    fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
        let (sum, n) = values
            .filter(|v| *v > -1.0)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            -1.0
        } else {
            sum / n as f64
        }
    }

    /// Mean precision over the given threshold indices for an area/budget cell.
    pub fn average_precision(&self, thresholds: &[usize], area: usize, max_det: usize) -> f64 {
        let nk = self.categories.len();
        let it = thresholds.iter().flat_map(|&t| {
            (0..NUM_RECALL_POINTS).flat_map(move |r| {
                (0..nk).map(move |k| self.precision[self.p_idx(t, r, k, area, max_det)])
            })
        });
        Self::mean_defined(it)
    }

    pub fn average_recall(&self, thresholds: &[usize], area: usize, max_det: usize) -> f64 {
        let nk = self.categories.len();
        let it = thresholds
            .iter()
            .flat_map(|&t| (0..nk).map(move |k| self.recall[self.r_idx(t, k, area, max_det)]));
        Self::mean_defined(it)
    }

    /// AP (area all, 100 detections) at a single IoU threshold given in
    /// percent, e.g. `50` or `75`.
    pub fn ap_at(&self, threshold_pct: u32) -> Option<f64> {
        let t = threshold_index(threshold_pct)?;
        Some(self.average_precision(&[t], 0, 2))
    }

    pub fn summary(&self) -> EvalSummary {
        let all: Vec<usize> = (0..NUM_IOU_THRESHOLDS).collect();
        EvalSummary {
            ap: self.average_precision(&all, 0, 2),
            ap50: self.average_precision(&[0], 0, 2),
            ap75: self.average_precision(&[5], 0, 2),
            ap_s: self.average_precision(&all, 1, 2),
            ap_m: self.average_precision(&all, 2, 2),
            ap_l: self.average_precision(&all, 3, 2),
            ar1: self.average_recall(&all, 0, 0),
            ar10: self.average_recall(&all, 0, 1),
            ar100: self.average_recall(&all, 0, 2),
            ar_s: self.average_recall(&all, 1, 2),
            ar_m: self.average_recall(&all, 2, 2),
            ar_l: self.average_recall(&all, 3, 2),
        }
    }
}

/// Index of an IoU threshold given in percent (50, 55, ..., 95).
pub fn threshold_index(pct: u32) -> Option<usize> {
    if (50..=95).contains(&pct) && pct % 5 == 0 {
        Some(((pct - 50) / 5) as usize)
    } else {
        None
    }
}

/// IoU for evaluation: a crowd ground truth is measured against the
/// detection's own area.
fn eval_iou(dt: &BBox, gt: &BBox, crowd: bool) -> f64 {
    let inter = dt.intersection(gt);
    let union = if crowd {
        dt.area()
    } else {
        dt.area() + gt.area() - inter
    };
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Score-descending order with a content tie-break, so results do not
/// depend on input order.
fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x1.total_cmp(&b.bbox.x1))
        .then_with(|| a.bbox.y1.total_cmp(&b.bbox.y1))
        .then_with(|| a.bbox.x2.total_cmp(&b.bbox.x2))
        .then_with(|| a.bbox.y2.total_cmp(&b.bbox.y2))
}

fn evaluate_cell(
    dts: &[&Detection],
    gts: &[&GtInstance],
    area: (f64, f64),
    thresholds: &[f64],
) -> Option<ImageEval> {
    if dts.is_empty() && gts.is_empty() {
        return None;
    }
    let max_det = *MAX_DETS.last().unwrap();

    // non-ignored ground truth first, stable otherwise
    let ignore_of = |g: &GtInstance| g.iscrowd || g.area < area.0 || g.area > area.1;
    let mut gt_sorted: Vec<&GtInstance> = gts.to_vec();
    gt_sorted.sort_by_key(|g| ignore_of(g));
    let gt_ignore: Vec<bool> = gt_sorted.iter().map(|g| ignore_of(g)).collect();

    let mut dt_sorted: Vec<&Detection> = dts.to_vec();
    dt_sorted.sort_by(|a, b| det_order(a, b));
    dt_sorted.truncate(max_det);

    let ious: Vec<Vec<f64>> = dt_sorted
        .iter()
        .map(|d| {
            gt_sorted
                .iter()
                .map(|g| eval_iou(&d.bbox, &g.bbox, g.iscrowd))
                .collect()
        })
        .collect();

    let nt = thresholds.len();
    let nd = dt_sorted.len();
    let mut dt_matched = vec![vec![false; nd]; nt];
    let mut dt_ignore = vec![vec![false; nd]; nt];
    for (ti, &thr) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gt_sorted.len()];
        for di in 0..nd {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..gt_sorted.len() {
                if gt_taken[gi] && !gt_sorted[gi].iscrowd {
                    continue;
                }
                // once matched to a counted gt, stop at the first ignored one
                if let Some(mi) = m {
                    if !gt_ignore[mi] && gt_ignore[gi] {
                        break;
                    }
                }
                if ious[di][gi] < best {
                    continue;
                }
                best = ious[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    dt_matched[ti][di] = true;
                    dt_ignore[ti][di] = gt_ignore[gi];
                    gt_taken[gi] = true;
                }
                None => {
                    let a = dt_sorted[di].bbox.area();
                    dt_ignore[ti][di] = a < area.0 || a > area.1;
                }
            }
        }
    }

    Some(ImageEval {
        dt_scores: dt_sorted.iter().map(|d| d.score).collect(),
        dt_matched,
        dt_ignore,
        num_gt_counted: gt_ignore.iter().filter(|i| !**i).count(),
    })
}

/// Full evaluation over `categories`. Images are the union of those
/// referenced by predictions and ground truth.
pub fn evaluate(
    preds: &[Detection],
    gts: &[GtInstance],
    categories: &[u64],
) -> Result<CocoEvaluation> {
    let cat_set: BTreeSet<u64> = categories.iter().copied().collect();
    if let Some(d) = preds.iter().find(|d| !cat_set.contains(&d.category_id)) {
        return Err(Error::UnknownCategory(d.category_id));
    }
    let cats: Vec<u64> = cat_set.into_iter().collect();
    let cat_index: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let mut image_ids: BTreeSet<u64> = preds.iter().map(|d| d.image_id).collect();
    image_ids.extend(gts.iter().map(|g| g.image_id));
    let image_ids: Vec<u64> = image_ids.into_iter().collect();
    let image_index: BTreeMap<u64, usize> =
        image_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let ni = image_ids.len();
    let nk = cats.len();
    let mut dt_cells: Vec<Vec<&Detection>> = vec![Vec::new(); nk * ni];
    let mut gt_cells: Vec<Vec<&GtInstance>> = vec![Vec::new(); nk * ni];
    for d in preds {
        dt_cells[cat_index[&d.category_id] * ni + image_index[&d.image_id]].push(d);
    }
    for g in gts {
        // ground truth of categories outside the evaluated set is not scored
        if let Some(&k) = cat_index.get(&g.category_id) {
            gt_cells[k * ni + image_index[&g.image_id]].push(g);
        }
    }

    let thresholds = iou_thresholds();
    let na = AREA_RANGES.len();
    // [k][a][i]
    let cells: Vec<Option<ImageEval>> = (0..nk * na * ni)
        .into_par_iter()
        .map(|idx| {
            let k = idx / (na * ni);
            let a = (idx / ni) % na;
            let i = idx % ni;
            evaluate_cell(
                &dt_cells[k * ni + i],
                &gt_cells[k * ni + i],
                AREA_RANGES[a],
                &thresholds,
            )
        })
        .collect();

    let nm = MAX_DETS.len();
    let mut ev = CocoEvaluation {
        categories: cats,
        precision: vec![-1.0; NUM_IOU_THRESHOLDS * NUM_RECALL_POINTS * nk * na * nm],
        recall: vec![-1.0; NUM_IOU_THRESHOLDS * nk * na * nm],
    };
    let rec_pts = recall_points();

    for k in 0..nk {
        for a in 0..na {
            let evals: Vec<&ImageEval> = (0..ni)
                .filter_map(|i| cells[(k * na + a) * ni + i].as_ref())
                .collect();
            let npig: usize = evals.iter().map(|e| e.num_gt_counted).sum();
            if npig == 0 {
                continue;
            }
            for (m, &max_det) in MAX_DETS.iter().enumerate() {
                // (score, image order, det index) sorted by score, stable
                let mut order: Vec<(f64, usize, usize)> = evals
                    .iter()
                    .enumerate()
                    .flat_map(|(ei, e)| {
                        e.dt_scores
                            .iter()
                            .take(max_det)
                            .enumerate()
                            .map(move |(di, s)| (*s, ei, di))
                    })
                    .collect();
                order.sort_by(|x, y| y.0.total_cmp(&x.0));

                for t in 0..NUM_IOU_THRESHOLDS {
                    let mut tp = 0usize;
                    let mut fp = 0usize;
                    let mut rc = Vec::with_capacity(order.len());
                    let mut pr = Vec::with_capacity(order.len());
                    for &(_, ei, di) in &order {
                        let e = evals[ei];
                        if e.dt_ignore[t][di] {
                            // ignored detections still occupy a slot in the
                            // cumulative sums, with no change
                        } else if e.dt_matched[t][di] {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                        rc.push(tp as f64 / npig as f64);
                        pr.push(if tp + fp == 0 {
                            0.0
                        } else {
                            tp as f64 / (tp + fp) as f64
                        });
                    }
                    let ri = ev.r_idx(t, k, a, m);
                    ev.recall[ri] = rc.last().copied().unwrap_or(0.0);

                    for i in (1..pr.len()).rev() {
                        if pr[i] > pr[i - 1] {
                            pr[i - 1] = pr[i];
                        }
                    }
                    for (r, &thr) in rec_pts.iter().enumerate() {
                        // first index with recall >= thr
                        let pi = rc.partition_point(|&x| x < thr);
                        let q = if pi < pr.len() { pr[pi] } else { 0.0 };
                        let idx = ev.p_idx(t, r, k, a, m);
                        ev.precision[idx] = q;
                    }
                }
            }
        }
    }
    Ok(ev)
}

/// The twelve-metric summary of [`evaluate`].
pub fn coco_eval(
    preds: &[Detection],
    gts: &[GtInstance],
    categories: &[u64],
) -> Result<EvalSummary> {
    if gts.is_empty() {
        // still validate the detections
        evaluate(preds, gts, categories)?;
        return Ok(EvalSummary::UNDEFINED);
    }
    Ok(evaluate(preds, gts, categories)?.summary())
}

/// Lookup of image sizes by id.
pub type ImageSizes = BTreeMap<u64, ImageSize>;

fn size_of(images: &ImageSizes, id: u64) -> Result<ImageSize> {
    images
        .get(&id)
        .copied()
        .ok_or_else(|| Error::data(format!("images[{id}]"), "unknown image id"))
}

/// Runs per-image matching and calls `apply(pred, gt)` on every matched pair.
fn for_each_match(
    preds: &[Detection],
    gts: &[GtInstance],
    images: &ImageSizes,
    w: &MatchWeights,
    mut apply: impl FnMut(&mut Detection, &GtInstance),
) -> Result<Vec<Detection>> {
    let mut out = preds.to_vec();
    let pred_groups = indices_by_image(preds, |d| d.image_id);
    let gt_groups = indices_by_image(gts, |g| g.image_id);
    for (image_id, pidx) in &pred_groups {
        let Some(gidx) = gt_groups.get(image_id) else {
            continue;
        };
        let size = size_of(images, *image_id)?;
        let p: Vec<Detection> = pidx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<GtInstance> = gidx.iter().map(|&i| gts[i].clone()).collect();
        let assignment = match_image(&p, &g, size, w)?;
        for (pi, gi) in assignment.pairs {
            apply(&mut out[pidx[pi]], &g[gi]);
        }
    }
    Ok(out)
}

/// Replaces each matched prediction's box with its ground truth's box.
/// Classification fields and unmatched predictions are left as they are.
pub fn ideal_localization(
    preds: &[Detection],
    gts: &[GtInstance],
    images: &ImageSizes,
    w: &MatchWeights,
) -> Result<Vec<Detection>> {
    for_each_match(preds, gts, images, w, |d, g| d.bbox = g.bbox)
}

/// Mean IoU of matched predictions with their ground truth, and the number
/// of matched pairs. Zero when nothing matches.
pub fn mean_matched_iou(
    preds: &[Detection],
    gts: &[GtInstance],
    images: &ImageSizes,
    w: &MatchWeights,
) -> Result<(f64, usize)> {
    let (mut sum, mut n) = (0.0, 0usize);
    for_each_match(preds, gts, images, w, |d, g| {
        sum += crate::geometry::iou(&d.bbox, &g.bbox);
        n += 1;
    })?;
    Ok((if n == 0 { 0.0 } else { sum / n as f64 }, n))
}

/// Score given to a relabeled prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdealScore {
    /// The prediction's largest class probability.
    #[default]
    MaxProb,
    One,
}

/// Replaces each matched prediction's label with its ground truth's label.
/// Boxes and unmatched predictions are left as they are.
pub fn ideal_classification(
    preds: &[Detection],
    gts: &[GtInstance],
    images: &ImageSizes,
    w: &MatchWeights,
    score: IdealScore,
) -> Result<Vec<Detection>> {
    for_each_match(preds, gts, images, w, |d, g| {
        d.category_id = g.category_id;
        d.score = match score {
            IdealScore::MaxProb => d.max_prob(),
            IdealScore::One => 1.0,
        };
    })
}

/// AP at one IoU threshold for each prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub iou: u32,
    pub actual: f64,
    pub ideal_localization: f64,
    pub ideal_classification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealReport {
    pub actual: EvalSummary,
    pub ideal_localization: EvalSummary,
    pub ideal_classification: EvalSummary,
    pub delta_localization: EvalSummary,
    pub delta_classification: EvalSummary,
    pub thresholds: Vec<ThresholdRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub weights: MatchWeights,
    pub score: IdealScore,
    /// Per-threshold breakdown, in percent.
    pub thresholds: Vec<u32>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            weights: MatchWeights::default(),
            score: IdealScore::MaxProb,
            thresholds: vec![50, 75],
        }
    }
}

/// Evaluates the raw predictions and both ideal variants.
pub fn analyze(
    preds: &[Detection],
    gts: &[GtInstance],
    categories: &[u64],
    images: &ImageSizes,
    opts: &AnalyzeOptions,
) -> Result<IdealReport> {
    for &t in &opts.thresholds {
        if threshold_index(t).is_none() {
            return Err(Error::Config(format!(
                "IoU threshold {t} is not one of 50, 55, ..., 95"
            )));
        }
    }
    let loc = ideal_localization(preds, gts, images, &opts.weights)?;
    let cls = ideal_classification(preds, gts, images, &opts.weights, opts.score)?;

    let ev_actual = evaluate(preds, gts, categories)?;
    let ev_loc = evaluate(&loc, gts, categories)?;
    let ev_cls = evaluate(&cls, gts, categories)?;
    let summarize = |ev: &CocoEvaluation| {
        if gts.is_empty() {
            EvalSummary::UNDEFINED
        } else {
            ev.summary()
        }
    };
    let actual = summarize(&ev_actual);
    let ideal_localization = summarize(&ev_loc);
    let ideal_classification = summarize(&ev_cls);

    let thresholds = opts
        .thresholds
        .iter()
        .map(|&t| ThresholdRow {
            iou: t,
            actual: ev_actual.ap_at(t).unwrap_or(-1.0),
            ideal_localization: ev_loc.ap_at(t).unwrap_or(-1.0),
            ideal_classification: ev_cls.ap_at(t).unwrap_or(-1.0),
        })
        .collect();

    Ok(IdealReport {
        delta_localization: ideal_localization.minus(&actual),
        delta_classification: ideal_classification.minus(&actual),
        actual,
        ideal_localization,
        ideal_classification,
        thresholds,
    })
}
