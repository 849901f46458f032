//! Finite-difference checks of every differentiable operation and of the
//! composite loss, in f64.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use refinebox::geometry::{clamp_box, refine_step, BoxDelta, NormBox};
use refinebox::net::{fpn_forward, refine_forward, refiner_module, RefinerConfig, RefinerParams};
use refinebox::ops;
use refinebox::tensor::Tensor;
use refinebox::train::{loss_and_grad, regression_loss, LossWeights};

use super::*;

pub const INSTANCES: u64 = 20;
/// Relative-error tolerance of every check.
pub const TOL: f64 = 1e-4;

/// Worst relative error per checked operation.
pub type Worst = BTreeMap<&'static str, f64>;

fn record(worst: &mut Worst, name: &'static str, err: f64) {
    let e = worst.entry(name).or_insert(0.0);
    *e = e.max(err);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

/// Checks every listed input of a tensor op against `L = <r, op(inputs)>`.
fn check_op(
    worst: &mut Worst,
    name: &'static str,
    inputs: &[Tensor<f64>],
    forward: impl Fn(&[Tensor<f64>]) -> Vec<f64>,
    backward: impl Fn(&[Tensor<f64>], &[f64]) -> Vec<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) {
    let out = forward(inputs);
    let r: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = backward(inputs, &r);
    for (k, g) in grads.iter().enumerate() {
        let coords = sample_coords(inputs[k].numel(), 40, rng);
        let err = fd_max_rel(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k] = with(&inputs[k], x);
                dot(&forward(&ins), &r)
            },
            inputs[k].data(),
            g,
            &coords,
        );
        record(worst, name, err);
    }
}

pub fn conv2d_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(seed);
        let k = if seed % 2 == 0 { 3 } else { 1 };
        let (ci, co) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let ins = vec![
            random_tensor(&[ci, h, w], 1.0, &mut rng),
            random_tensor(&[co, ci, k, k], 1.0, &mut rng),
            random_tensor(&[co], 1.0, &mut rng),
        ];
        check_op(
            worst,
            "conv2d",
            &ins,
            |t| ops::conv2d(&t[0], &t[1], &t[2]).unwrap().into_data(),
            |t, r| {
                let dy = with(&ops::conv2d(&t[0], &t[1], &t[2]).unwrap(), r);
                let mut dw = vec![0.0; t[1].numel()];
                let mut db = vec![0.0; t[2].numel()];
                let dx = ops::conv2d_backward(&t[0], &t[1], &t[2], &dy, &mut dw, &mut db, true)
                    .unwrap()
                    .unwrap();
                vec![dx.into_data(), dw, db]
            },
            &mut rng,
        );
    }
}

pub fn group_norm_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(100 + seed);
        let groups = [1, 2, 4][seed as usize % 3];
        let c = groups * rng.gen_range(1..3);
        let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let ins = vec![
            random_tensor(&[c, h, w], 2.0, &mut rng),
            random_tensor(&[c], 1.5, &mut rng),
            random_tensor(&[c], 1.0, &mut rng),
        ];
        check_op(
            worst,
            "group_norm",
            &ins,
            |t| {
                ops::group_norm(&t[0], &t[1], &t[2], groups)
                    .unwrap()
                    .0
                    .into_data()
            },
            |t, r| {
                let (y, cache) = ops::group_norm(&t[0], &t[1], &t[2], groups).unwrap();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let dx = ops::group_norm_backward(&cache, &t[1], &with(&y, r), &mut dg, &mut db)
                    .unwrap();
                vec![dx.into_data(), dg, db]
            },
            &mut rng,
        );
    }
}

pub fn relu_upsample_add_pool_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(200 + seed);
        let (c, h, w) = (
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        // keep entries away from the kink
        let mut x = random_tensor(&[c, h, w], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1f64.copysign(*v);
            }
        }
        check_op(
            worst,
            "relu",
            &[x.clone()],
            |t| ops::relu(&t[0]).into_data(),
            |t, r| {
                let y = ops::relu(&t[0]);
                vec![ops::relu_backward(&y, &with(&y, r)).into_data()]
            },
            &mut rng,
        );
        let (oh, ow) = (h * rng.gen_range(1..4), w * rng.gen_range(1..4));
        check_op(
            worst,
            "upsample_nearest",
            &[x.clone()],
            |t| ops::upsample_nearest(&t[0], oh, ow).unwrap().into_data(),
            |_, r| {
                let dy = Tensor::from_vec(&[c, oh, ow], r.to_vec()).unwrap();
                vec![ops::upsample_nearest_backward(&dy, h, w)
                    .unwrap()
                    .into_data()]
            },
            &mut rng,
        );
        let y = random_tensor(&[c, h, w], 1.0, &mut rng);
        check_op(
            worst,
            "add",
            &[x.clone(), y],
            |t| ops::add(&t[0], &t[1]).unwrap().into_data(),
            |_, r| vec![r.to_vec(), r.to_vec()],
            &mut rng,
        );
        check_op(
            worst,
            "global_avg_pool",
            &[x],
            |t| ops::global_avg_pool(&t[0]).unwrap(),
            |_, r| vec![ops::global_avg_pool_backward(r, [c, h, w]).into_data()],
            &mut rng,
        );
    }
}

pub fn linear_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(300 + seed);
        let (i, o) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let ins = vec![
            random_tensor(&[i], 1.0, &mut rng),
            random_tensor(&[o, i], 1.0, &mut rng),
            random_tensor(&[o], 1.0, &mut rng),
        ];
        check_op(
            worst,
            "linear",
            &ins,
            |t| ops::linear(t[0].data(), &t[1], &t[2]).unwrap(),
            |t, r| {
                let mut dw = vec![0.0; t[1].numel()];
                let mut db = vec![0.0; t[2].numel()];
                let dx = ops::linear_backward(t[0].data(), &t[1], r, &mut dw, &mut db);
                vec![dx, dw, db]
            },
            &mut rng,
        );
    }
}

pub fn roi_align_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(400 + seed);
        let (c, h, w) = (
            rng.gen_range(1..4),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let x1 = rng.gen_range(-2.0..w as f64);
        let y1 = rng.gen_range(-2.0..h as f64);
        let roi = [
            x1,
            y1,
            x1 + rng.gen_range(0.0..6.0),
            y1 + rng.gen_range(0.0..6.0),
        ];
        let out = rng.gen_range(1..5);
        let ratio = rng.gen_range(1..3);
        check_op(
            worst,
            "roi_align",
            &[random_tensor(&[c, h, w], 1.0, &mut rng)],
            |t| ops::roi_align(&t[0], roi, out, ratio).unwrap().into_data(),
            |_, r| {
                let dy = Tensor::from_vec(&[c, out, out], r.to_vec()).unwrap();
                let mut df = vec![0.0; c * h * w];
                ops::roi_align_backward([c, h, w], roi, out, ratio, &dy, &mut df).unwrap();
                vec![df]
            },
            &mut rng,
        );
    }
}

pub fn refine_step_gradients(worst: &mut Worst) {
    let eps = 1e-5;
    for seed in 0..INSTANCES {
        let mut rng = rng(500 + seed);
        let v = rng.gen_range(0.01..0.99);
        let d = rng.gen_range(-2.0..2.0);
        let f = |v: f64, d: f64| {
            let b = refine_step(
                &NormBox::new(v, 0.5, 0.5, 0.5).unwrap(),
                &BoxDelta::new(d, 0.0, 0.0, 0.0).unwrap(),
                eps,
            );
            b.cx
        };
        let (dd, dv) = ops::refine_step_partials(v, d, eps);
        let nd = (f(v, d + FD_STEPS[0]) - f(v, d - FD_STEPS[0])) / (2.0 * FD_STEPS[0]);
        let nv = (f(v + FD_STEPS[0], d) - f(v - FD_STEPS[0], d)) / (2.0 * FD_STEPS[0]);
        record(
            worst,
            "refine_step",
            rel_err(dd, nd, FD_FLOOR).max(rel_err(dv, nv, FD_FLOOR)),
        );
    }
}

pub fn box_loss_gradients(worst: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = rng(600 + seed);
        let mut bx = || {
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ]
        };
        let (p, t) = (bx(), bx());
        let (_, g) = ops::box_loss(p, t, 5.0, 2.0);
        let err = fd_max_rel(
            |x| ops::box_loss([x[0], x[1], x[2], x[3]], t, 5.0, 2.0).0,
            &p,
            &g,
            &[0, 1, 2, 3],
        );
        record(worst, "box_loss", err);
    }
}

fn small_cfg(m: usize) -> RefinerConfig {
    RefinerConfig {
        model_dim: 8,
        bottleneck_channels: 4,
        num_blocks: 2,
        num_refiners: m,
        norm_groups: 4,
        ..Default::default()
    }
}

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<NormBox> {
    (0..n)
        .map(|_| {
            NormBox::new(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.9),
                rng.gen_range(0.05..0.9),
            )
            .unwrap()
        })
        .collect()
}

/// The composite loss with every stage's input boxes held at `inputs`.
fn staged_loss(
    backbone: &refinebox::net::FeaturePyramid<f64>,
    inputs: &[Vec<NormBox>],
    targets: &[NormBox],
    params: &RefinerParams<f64>,
    cfg: &RefinerConfig,
    lw: &LossWeights,
) -> f64 {
    let pyr = fpn_forward(backbone, params).unwrap();
    let mut total = 0.0;
    for (s, inp) in inputs.iter().enumerate() {
        let d = refiner_module(&pyr, inp, params.stage(s), cfg).unwrap();
        for ((b, d), t) in inp.iter().zip(&d).zip(targets) {
            let out = refine_step(b, d, cfg.clamp_eps);
            total += ops::box_loss(out.to_array(), t.to_array(), lw.w_l1, lw.w_giou).0;
        }
    }
    total
}

/// Checks loss_and_grad on `INSTANCES` random networks; returns the worst error.
pub fn composite_check(m: usize, share: bool, seed0: u64) -> f64 {
    let lw = LossWeights::default();
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng(seed0 + seed);
        let cfg = RefinerConfig {
            share_weights: share,
            ..small_cfg(m)
        };
        let backbone = random_pyramid(&[3, 4, 5, 6], 96, &mut rng);
        let mut params = RefinerParams::<f64>::init(&cfg, &[3, 4, 5, 6], seed).unwrap();
        randomize(&mut params, 0.3, &mut rng);
        let n = rng.gen_range(1..4);
        let boxes = random_boxes(n, &mut rng);
        let targets = random_boxes(n, &mut rng);

        let mut grads = params.zeros_like();
        let total =
            loss_and_grad(&backbone, &boxes, &targets, &params, &cfg, &lw, &mut grads).unwrap();
        let pyr = fpn_forward(&backbone, &params).unwrap();
        let stages = refine_forward(&pyr, &boxes, &params, &cfg).unwrap();
        let direct = regression_loss(&stages, &targets, &lw).unwrap() * n as f64;
        assert!((total - direct).abs() <= 1e-9 * direct.abs().max(1.0));

        let mut inputs = vec![boxes
            .iter()
            .map(|b| clamp_box(b, cfg.clamp_eps))
            .collect::<Vec<_>>()];
        inputs.extend(stages.iter().take(m - 1).cloned());
        let x = flatten(&params);
        let g = flatten(&grads);
        let coords = sample_coords(x.len(), 60, &mut rng);
        let mut probe = params.clone();
        let err = fd_max_rel(
            |x| {
                unflatten(&mut probe, x);
                staged_loss(&backbone, &inputs, &targets, &probe, &cfg, &lw)
            },
            &x,
            &g,
            &coords,
        );
        worst = worst.max(err);
    }
    worst
}

/// Runs every per-operation check over `INSTANCES` random instances.
pub fn all_ops() -> Worst {
    let mut w = Worst::new();
    conv2d_gradients(&mut w);
    group_norm_gradients(&mut w);
    relu_upsample_add_pool_gradients(&mut w);
    linear_gradients(&mut w);
    roi_align_gradients(&mut w);
    refine_step_gradients(&mut w);
    box_loss_gradients(&mut w);
    w
}
