//! One function per acceptance criterion. Each returns whether it passed and
//! a one-line summary of what it measured.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use refinebox::eval::{analyze, coco_eval, AnalyzeOptions, IdealReport, ImageSizes};
use refinebox::geometry::{
    area_bin, clamp_box, giou, iou, refine_step, AreaBin, BBox, BoxDelta, NormBox,
};
use refinebox::io::{decode_ckpt, decode_dump, encode_ckpt, encode_dump, DumpRecord};
use refinebox::net::{RefinerConfig, RefinerParams};
use refinebox::ops;
use refinebox::synth::{gen_synthetic, SynthConfig, SynthDataset};
use refinebox::train::refine_topk;
use refinebox::{hungarian, CostMatrix, Detection, GtInstance};

use super::gradsuite::{self, composite_check, TOL};
use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

// ---------------------------------------------------------------- assignment

pub const ASSIGNMENT_CASES: usize = 500;
pub const TIE_CASES: usize = 50;

fn random_matrix(rng: &mut ChaCha8Rng, quantized: bool) -> Vec<Vec<f64>> {
    let n = rng.gen_range(1..=7);
    let m = rng.gen_range(1..=7);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    let v: f64 = rng.gen_range(-10.0..10.0);
                    if quantized {
                        (v * 64.0).round() / 64.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

/// Matrices with many equal-cost optima: few distinct values, repeated rows
/// or columns, or a constant matrix.
fn tie_matrix(i: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.gen_range(2..=6);
    let m = rng.gen_range(2..=6);
    match i % 4 {
        0 => vec![vec![3.0; m]; n],
        1 => (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(0..2) as f64).collect())
            .collect(),
        2 => {
            let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0..4) as f64).collect();
            vec![row; n]
        }
        _ => {
            let col: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
            col.iter().map(|&v| vec![v; m]).collect()
        }
    }
}

pub fn assignment_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut wrong = 0;
    let mut rect = 0;
    for i in 0..ASSIGNMENT_CASES {
        let c = random_matrix(&mut rng, i % 2 == 0);
        rect += usize::from(c.len() != c[0].len());
        let cm = CostMatrix::from_rows(&c).unwrap();
        let a = hungarian(&cm);
        let (best, _) = brute_force_assignment(&c);
        if a.pairs.len() != c.len().min(c[0].len()) || a.total_cost(&cm) != best {
            wrong += 1;
        }
    }
    let mut tie_wrong = 0;
    for i in 0..TIE_CASES {
        let c = tie_matrix(i, &mut rng);
        let cm = CostMatrix::from_rows(&c).unwrap();
        let (_, lexmin) = brute_force_assignment(&c);
        let a = hungarian(&cm);
        if a.pairs != lexmin || hungarian(&cm) != a {
            tie_wrong += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: wrong == 0 && tie_wrong == 0 && secs < 10.0,
        detail: format!(
            "{wrong}/{ASSIGNMENT_CASES} optimality mismatches ({rect} rectangular), \
             {tie_wrong}/{TIE_CASES} tie-break mismatches, {secs:.2}s"
        ),
    }
}

// ------------------------------------------------------------------ geometry

pub const GEOMETRY_PAIRS: usize = 10_000;

/// `(name, computed, expected)` for the hand-evaluated cases.
pub fn geometry_hand_cases() -> Vec<(&'static str, f64, f64)> {
    let a = bb(0., 0., 2., 2.);
    let b = bb(1., 1., 3., 3.);
    let u = bb(0., 0., 1., 1.);
    vec![
        ("iou identical", iou(&a, &a), 1.0),
        ("iou overlap", iou(&a, &b), 1.0 / 7.0),
        ("iou disjoint", iou(&u, &bb(5., 5., 6., 6.)), 0.0),
        (
            "iou degenerate",
            iou(&bb(1., 1., 1., 1.), &bb(1., 1., 1., 1.)),
            0.0,
        ),
        ("giou identical", giou(&a, &a), 1.0),
        (
            "giou adjacent gap",
            giou(&u, &bb(2., 0., 3., 1.)),
            -1.0 / 3.0,
        ),
        ("giou overlap", giou(&a, &b), 1.0 / 7.0 - 2.0 / 9.0),
        ("giou contained", giou(&a, &u), 0.25),
    ]
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(-50.0..50.0);
    let y = rng.gen_range(-50.0..50.0);
    // one box in twenty is degenerate along one side
    let (w, h) = if rng.gen_range(0..20) == 0 {
        (0.0, rng.gen_range(0.0..40.0))
    } else {
        (rng.gen_range(0.01..40.0), rng.gen_range(0.01..40.0))
    };
    bb(x, y, x + w, y + h)
}

/// Property violations over `GEOMETRY_PAIRS` random pairs.
pub fn geometry_violations() -> usize {
    let mut rng = rng(2);
    let mut bad = 0;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    for i in 0..GEOMETRY_PAIRS {
        let a = random_box(&mut rng);
        // every fourth pair is nested
        let b = if i % 4 == 0 {
            let fx = rng.gen_range(0.0..1.0);
            let fy = rng.gen_range(0.0..1.0);
            let w = a.width() * rng.gen_range(0.0..1.0);
            let h = a.height() * rng.gen_range(0.0..1.0);
            let x = a.x1 + fx * (a.width() - w);
            let y = a.y1 + fy * (a.height() - h);
            bb(x, y, (x + w).min(a.x2), (y + h).min(a.y2))
        } else {
            random_box(&mut rng)
        };
        let (i_ab, g_ab) = (iou(&a, &b), giou(&a, &b));
        let mut ok = (0.0..=1.0).contains(&i_ab)
            && g_ab > -1.0
            && g_ab <= 1.0
            && g_ab <= i_ab
            && i_ab == iou(&b, &a)
            && g_ab == giou(&b, &a);
        if i % 4 == 0 && b.area() > 0.0 {
            ok &= close(g_ab, i_ab);
        }
        let (dx, dy) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let shift = |r: &BBox| bb(r.x1 + dx, r.y1 + dy, r.x2 + dx, r.y2 + dy);
        ok &= close(iou(&shift(&a), &shift(&b)), i_ab) && close(giou(&shift(&a), &shift(&b)), g_ab);
        let s = rng.gen_range(0.1..10.0);
        ok &= close(iou(&a.scale(s, s), &b.scale(s, s)), i_ab)
            && close(giou(&a.scale(s, s), &b.scale(s, s)), g_ab);
        bad += usize::from(!ok);
    }
    bad
}

/// Violations of the normalized-box properties: zero delta is the clamp,
/// `+d` then `−d` recovers the clamped box, pixel round trips, GIoU falls
/// strictly with separation.
pub fn refine_and_convert_violations() -> usize {
    let mut rng = rng(3);
    let eps = 1e-5;
    let mut bad = 0;
    for _ in 0..1000 {
        let b = NormBox::new(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        )
        .unwrap();
        let d = BoxDelta::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        )
        .unwrap();
        let c = clamp_box(&b, eps).to_array();
        let z = refine_step(&b, &BoxDelta::new(0., 0., 0., 0.).unwrap(), eps).to_array();
        let back = refine_step(&refine_step(&b, &d, eps), &d.neg(), eps).to_array();
        for k in 0..4 {
            bad += usize::from((z[k] - c[k]).abs() > 1e-12);
            bad += usize::from((back[k] - c[k]).abs() > 1e-9);
        }
        let (w, h) = (rng.gen_range(1.0..2000.0), rng.gen_range(1.0..2000.0));
        let x1 = rng.gen_range(0.0..w);
        let y1 = rng.gen_range(0.0..h);
        let pix = bb(x1, y1, rng.gen_range(x1..=w), rng.gen_range(y1..=h));
        let rt = NormBox::from_bbox(&pix, w, h).to_bbox(w, h);
        for (p, q) in [
            (pix.x1, rt.x1),
            (pix.y1, rt.y1),
            (pix.x2, rt.x2),
            (pix.y2, rt.y2),
        ] {
            bad += usize::from((p - q).abs() > 1e-9 * w.max(h));
        }
    }
    let mut last = f64::INFINITY;
    for k in 0..200 {
        let gap = k as f64 * 0.5;
        let g = giou(&bb(0., 0., 1., 1.), &bb(1. + gap, 0., 2. + gap, 1.));
        bad += usize::from(!(g < last) && k > 0);
        last = g;
    }
    bad += usize::from(area_bin(&bb(0., 0., 10., 10.)) != AreaBin::Small);
    bad += usize::from(area_bin(&bb(0., 0., 32., 32.)) != AreaBin::Medium);
    bad += usize::from(area_bin(&bb(0., 0., 100., 100.)) != AreaBin::Large);
    bad
}

pub fn geometry_suite() -> Outcome {
    let hand = geometry_hand_cases()
        .iter()
        .map(|(_, v, e)| (v - e).abs())
        .fold(0.0, f64::max);
    let props = geometry_violations();
    let more = refine_and_convert_violations();
    Outcome {
        pass: hand <= 1e-12 && props == 0 && more == 0,
        detail: format!(
            "hand cases max error {hand:.1e}, {props} violations over {GEOMETRY_PAIRS} pairs, \
             {more} refine/convert violations"
        ),
    }
}

// ----------------------------------------------------------------- ROI Align

pub const ROI_CASES: usize = 200;

/// Largest deviation of `ops::roi_align` from the dense oracle, and how many
/// of the cases had a box partly outside the map.
pub fn roi_align_deviation() -> (f64, usize) {
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    let mut outside = 0;
    for _ in 0..ROI_CASES {
        let c = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        let feat = random_tensor(&[c, h, w], 1.0, &mut rng);
        let x1 = rng.gen_range(-4.0..w as f64 + 1.0);
        let y1 = rng.gen_range(-4.0..h as f64 + 1.0);
        let roi = [
            x1,
            y1,
            x1 + rng.gen_range(0.0..12.0),
            y1 + rng.gen_range(0.0..12.0),
        ];
        outside +=
            usize::from(roi[0] < 0.0 || roi[1] < 0.0 || roi[2] > w as f64 || roi[3] > h as f64);
        let out = rng.gen_range(1..8);
        let ratio = rng.gen_range(1..4);
        let got = ops::roi_align(&feat, roi, out, ratio).unwrap();
        let want = roi_align_oracle(&feat, roi, out, ratio);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst, outside)
}

pub fn roi_align_suite() -> Outcome {
    let (dev, outside) = roi_align_deviation();
    Outcome {
        pass: dev <= 1e-6 && outside > 0,
        detail: format!(
            "max abs deviation {dev:.1e} over {ROI_CASES} cases ({outside} partly out of bounds)"
        ),
    }
}

// ------------------------------------------------------------ gradient checks

pub fn gradient_suite() -> Outcome {
    let mut w = gradsuite::all_ops();
    w.insert("composite M=1", composite_check(1, true, 700));
    w.insert("composite M=3 shared", composite_check(3, true, 800));
    w.insert("composite M=3 separate", composite_check(3, false, 900));
    let (name, worst) = w
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap();
    Outcome {
        pass: w.values().all(|e| *e < TOL),
        detail: format!(
            "{} checks x {} instances, worst relative error {worst:.1e} ({name})",
            w.len(),
            gradsuite::INSTANCES
        ),
    }
}

// ------------------------------------------------------------- COCO evaluator

/// Two images, two categories, every GT detected exactly.
pub fn perfect_fixture() -> (Vec<Detection>, Vec<GtInstance>) {
    let boxes = [
        (1, 1, bb(10., 10., 60., 60.)),
        (1, 2, bb(100., 20., 300., 200.)),
        (2, 1, bb(5., 5., 20., 25.)),
        (2, 2, bb(40., 40., 90., 70.)),
        (2, 2, bb(150., 150., 160., 190.)),
    ];
    let gts = boxes
        .iter()
        .enumerate()
        .map(|(i, &(img, cat, b))| GtInstance::new(i as u64 + 1, img, cat, b))
        .collect();
    let preds = boxes
        .iter()
        .enumerate()
        .map(|(i, &(img, cat, b))| Detection::new(img, cat, 0.9 - 0.1 * i as f64, b))
        .collect();
    (preds, gts)
}

/// A random detector over a few images for the invariance checks.
fn random_detections(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GtInstance>) {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 1..=4u64 {
        for _ in 0..rng.gen_range(1..6) {
            let g = random_box(rng);
            let g = bb(g.x1 + 60.0, g.y1 + 60.0, g.x2 + 60.0, g.y2 + 60.0);
            let cat = rng.gen_range(1..=2);
            gts.push(GtInstance::new(gts.len() as u64 + 1, img, cat, g));
            let mut j = |v: f64| v + rng.gen_range(-4.0..4.0);
            let (x1, y1) = (j(g.x1), j(g.y1));
            let p = bb(x1, y1, j(g.x2).max(x1), j(g.y2).max(y1));
            preds.push(Detection::new(img, cat, rng.gen_range(0.01..1.0), p));
        }
        for _ in 0..rng.gen_range(0..3) {
            let p = random_box(rng);
            preds.push(Detection::new(
                img,
                rng.gen_range(1..=2),
                rng.gen_range(0.01..1.0),
                p,
            ));
        }
    }
    (preds, gts)
}

pub fn coco_suite() -> Outcome {
    let (p, g) = perfect_fixture();
    let s = coco_eval(&p, &g, &[1, 2]).unwrap();
    let perfect = s.ap == 1.0 && s.ap50 == 1.0 && s.ap75 == 1.0;

    let gt = [GtInstance::new(1, 1, 1, bb(0., 0., 10., 10.))];
    let single = coco_eval(&[Detection::new(1, 1, 0.5, bb(0., 0., 10., 6.))], &gt, &[1])
        .unwrap()
        .ap;

    let b = bb(0., 0., 40., 40.);
    let dup = coco_eval(
        &[Detection::new(1, 1, 0.9, b), Detection::new(1, 1, 0.8, b)],
        &[GtInstance::new(1, 1, 1, b)],
        &[1],
    )
    .unwrap()
    .ap50;

    let mut rng = rng(5);
    let mut variant = 0;
    for _ in 0..100 {
        let (preds, gts) = random_detections(&mut rng);
        let base = coco_eval(&preds, &gts, &[1, 2]).unwrap();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        let k = rng.gen_range(0.05..1.0);
        let scaled: Vec<Detection> = shuffled
            .iter()
            .map(|d| Detection {
                score: d.score * k,
                ..d.clone()
            })
            .collect();
        variant += usize::from(coco_eval(&shuffled, &gts, &[1, 2]).unwrap() != base);
        variant += usize::from(coco_eval(&scaled, &gts, &[1, 2]).unwrap() != base);
    }
    Outcome {
        pass: perfect && (single - 0.3).abs() <= 1e-9 && dup == 1.0 && variant == 0,
        detail: format!(
            "perfect AP/AP50/AP75 {}/{}/{}, IoU-0.60 AP {single:.12}, duplicate AP50 {dup}, \
             {variant}/200 invariance failures",
            s.ap, s.ap50, s.ap75
        ),
    }
}

// ---------------------------------------------------------- oracle analysis

/// The generator setting shared by the oracle-analysis and identity checks.
pub fn analysis_set() -> SynthDataset {
    gen_synthetic(&SynthConfig {
        num_images: 50,
        jitter: 0.1,
        fp_rate: 0.2,
        seed: 0,
        ..Default::default()
    })
    .unwrap()
}

pub fn image_sizes(ds: &SynthDataset) -> ImageSizes {
    ds.samples.iter().map(|s| (s.image_id, s.image)).collect()
}

pub fn analyze_set(ds: &SynthDataset, preds: &[Detection]) -> IdealReport {
    analyze(
        preds,
        &ds.gts(),
        &ds.categories,
        &image_sizes(ds),
        &AnalyzeOptions::default(),
    )
    .unwrap()
}

// Regression constants, recorded from the first run over `analysis_set`.
pub const PINNED_ACTUAL_AP: f64 = 0.41071670036344315;
pub const PINNED_IDEAL_LOC_AP: f64 = 0.7563037409423136;
pub const PINNED_IDEAL_CLS_AP: f64 = 0.5428620250244558;
pub const PINNED_MEAN_IOU: f64 = 0.7680790021575493;
pub const PINNED_MATCHED: usize = 182;

pub fn oracle_analysis() -> Outcome {
    let ds = analysis_set();
    let r = analyze_set(&ds, &ds.predictions());
    let (act, loc, cls) = (
        r.actual.ap,
        r.ideal_localization.ap,
        r.ideal_classification.ap,
    );
    let pinned = [
        (act, PINNED_ACTUAL_AP),
        (loc, PINNED_IDEAL_LOC_AP),
        (cls, PINNED_IDEAL_CLS_AP),
    ]
    .iter()
    .all(|(v, p)| (v - p).abs() <= 1e-9);
    Outcome {
        pass: loc >= act && cls >= act && loc - act > cls - act && pinned,
        detail: format!(
            "AP actual {act:.6}, ideal localization {loc:.6} (+{:.6}), \
             ideal classification {cls:.6} (+{:.6}), pinned values {}",
            loc - act,
            cls - act,
            if pinned { "match" } else { "differ" }
        ),
    }
}

// --------------------------------------------------------- identity at init

pub fn identity_at_init() -> Outcome {
    let ds = analysis_set();
    let rcfg = RefinerConfig::default();
    let params = RefinerParams::init(&rcfg, &ds.samples[0].backbone.channels(), 0).unwrap();
    let raw = ds.predictions();
    let mut changed = 0;
    let mut same_report = true;
    for k in [0, 1, 3, 100, 10_000] {
        let cfg = RefinerConfig {
            top_k: k,
            ..rcfg.clone()
        };
        let refined: Vec<Detection> = ds
            .samples
            .iter()
            .flat_map(|s| refine_topk(s, &params, &cfg).unwrap())
            .collect();
        changed += refined.iter().zip(&raw).filter(|(a, b)| a != b).count();
        same_report &= analyze_set(&ds, &refined) == analyze_set(&ds, &raw);
    }
    Outcome {
        pass: changed == 0 && same_report,
        detail: format!(
            "{changed} changed detections over K in {{0,1,3,100,10000}}, analysis reports {}",
            if same_report { "identical" } else { "differ" }
        ),
    }
}

// ---------------------------------------------------------- parameter budget

pub const RESNET50_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

pub fn parameter_budget() -> Outcome {
    let n = RefinerParams::<f32>::init(&RefinerConfig::default(), &RESNET50_CHANNELS, 0)
        .unwrap()
        .num_params();
    Outcome {
        pass: (450_000..=550_000).contains(&n),
        detail: format!("{n} trainable parameters"),
    }
}

// --------------------------------------------------------- format robustness

pub const FUZZ_ITERATIONS: usize = 100;

pub fn small_records(rng: &mut ChaCha8Rng) -> Vec<DumpRecord> {
    (0..3)
        .map(|i| {
            let size = rng.gen_range(16..48);
            let p = random_pyramid(&[2, 3, 1, 2], size, rng);
            DumpRecord {
                image_id: 10 + i,
                pyramid: p.cast(),
            }
        })
        .collect()
}

pub fn small_params(rng: &mut ChaCha8Rng) -> (RefinerParams<f32>, RefinerConfig) {
    let cfg = RefinerConfig {
        model_dim: 8,
        bottleneck_channels: 4,
        num_blocks: 1,
        norm_groups: 4,
        ..Default::default()
    };
    let mut p = RefinerParams::<f32>::init(&cfg, &[2, 3, 1, 2], rng.gen()).unwrap();
    randomize(&mut p, 1.0, rng);
    (p, cfg)
}

/// Truncates or flips one bit of `bytes`.
pub fn corrupt(bytes: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = bytes.to_vec();
    if rng.gen_bool(0.5) {
        out.truncate(rng.gen_range(0..bytes.len()));
    } else {
        let i = rng.gen_range(0..out.len());
        out[i] ^= 1 << rng.gen_range(0..8);
    }
    out
}

fn f32_bits(p: &RefinerParams<f32>) -> Vec<u32> {
    p.named()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn dump_bits(r: &[DumpRecord]) -> Vec<u32> {
    r.iter()
        .flat_map(|r| r.pyramid.levels.iter())
        .flat_map(|l| l.features.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// (accepted corruptions, failed round trips)
pub fn format_fuzz() -> (usize, usize) {
    let mut rng = rng(6);
    let mut accepted = 0;
    let mut roundtrip = 0;
    for _ in 0..FUZZ_ITERATIONS {
        let records = small_records(&mut rng);
        let bytes = encode_dump(&records).unwrap();
        let back = decode_dump(&bytes).unwrap();
        if dump_bits(&back) != dump_bits(&records)
            || back != records
            || encode_dump(&back).unwrap() != bytes
        {
            roundtrip += 1;
        }
        accepted += usize::from(decode_dump(&corrupt(&bytes, &mut rng)).is_ok());

        let (params, cfg) = small_params(&mut rng);
        let bytes = encode_ckpt(&params, &cfg).unwrap();
        let (p2, c2) = decode_ckpt(&bytes).unwrap();
        if f32_bits(&p2) != f32_bits(&params)
            || c2 != cfg
            || encode_ckpt(&p2, &c2).unwrap() != bytes
        {
            roundtrip += 1;
        }
        accepted += usize::from(decode_ckpt(&corrupt(&bytes, &mut rng)).is_ok());
    }
    (accepted, roundtrip)
}

pub fn format_suite() -> Outcome {
    let (accepted, roundtrip) = format_fuzz();
    Outcome {
        pass: accepted == 0 && roundtrip == 0,
        detail: format!(
            "{accepted}/{} corruptions accepted, {roundtrip}/{} round trips not bit-exact",
            2 * FUZZ_ITERATIONS,
            2 * FUZZ_ITERATIONS
        ),
    }
}
