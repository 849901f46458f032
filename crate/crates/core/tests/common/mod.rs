//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradsuite;
pub mod suites;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refinebox::net::{FeaturePyramid, PyramidLevel, RefinerParams};
use refinebox::tensor::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Relative error used by every gradient check: `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central-difference steps. A coordinate is scored by the better of the two:
/// a random network can put a ReLU kink within the larger step, and the
/// smaller one loses digits to rounding on large losses.
pub const FD_STEPS: [f64; 2] = [1e-5, 1e-6];
pub const FD_FLOOR: f64 = 1e-5;

pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &mut [f64],
    i: usize,
    h: f64,
) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Largest relative error between `analytic[i]` and the central difference of
/// `f` in coordinate `i`, over `coords`.
pub fn fd_max_rel(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> f64 {
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let err = FD_STEPS
            .iter()
            .map(|&h| {
                rel_err(
                    analytic[i],
                    central_difference(&mut f, &mut xp, i, h),
                    FD_FLOOR,
                )
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

/// Up to `k` distinct coordinates of `0..n`, all of them when `n <= k`.
pub fn sample_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Bilinear read with the border rules of the aligned ROI Align kernel:
/// zero beyond one pixel outside the map, clamped inside that margin.
pub fn bilinear_oracle(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    (1.0 - ly) * (1.0 - lx) * at(y0, x0)
        + (1.0 - ly) * lx * at(y0, x1)
        + ly * (1.0 - lx) * at(y1, x0)
        + ly * lx * at(y1, x1)
}

/// Dense ROI Align: every sample point evaluated directly, no tap tables.
pub fn roi_align_oracle(feat: &Tensor<f64>, roi: [f64; 4], out: usize, ratio: usize) -> Vec<f64> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let [x1, y1, x2, y2] = roi.map(|v| v - 0.5);
    let bw = (x2 - x1) / out as f64;
    let bh = (y2 - y1) / out as f64;
    let mut res = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
        for py in 0..out {
            for px in 0..out {
                let mut acc = 0.0;
                for iy in 0..ratio {
                    for ix in 0..ratio {
                        let y = y1 + bh * (py as f64 + (iy as f64 + 0.5) / ratio as f64);
                        let x = x1 + bw * (px as f64 + (ix as f64 + 0.5) / ratio as f64);
                        acc += bilinear_oracle(plane, h, w, y, x);
                    }
                }
                res.push(acc / (ratio * ratio) as f64);
            }
        }
    }
    res
}

/// Exhaustive assignment oracle: the minimum total cost over all injective
/// maps of the shorter side into the longer one (each total summed in
/// prediction order), and the lexicographically smallest sorted pair list
/// among the minimizers.
pub fn brute_force_assignment(c: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let n = c.len();
    let m = c.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return (0.0, Vec::new());
    }
    let k = n.min(m);
    let mut best = (f64::INFINITY, Vec::new());
    // choose which predictions take part, then which GT each one gets
    fn pick(
        c: &[Vec<f64>],
        k: usize,
        pairs: &mut Vec<(usize, usize)>,
        used: &mut Vec<bool>,
        next_pred: usize,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if pairs.len() == k {
            let total: f64 = pairs.iter().map(|&(p, g)| c[p][g]).sum();
            if total < best.0 || (total == best.0 && *pairs < best.1) {
                *best = (total, pairs.clone());
            }
            return;
        }
        let n = c.len();
        for p in next_pred..n {
            if n - p < k - pairs.len() {
                break;
            }
            for g in 0..used.len() {
                if !used[g] {
                    used[g] = true;
                    pairs.push((p, g));
                    pick(c, k, pairs, used, p + 1, best);
                    pairs.pop();
                    used[g] = false;
                }
            }
        }
    }
    pick(c, k, &mut Vec::new(), &mut vec![false; m], 0, &mut best);
    best
}

/// A random backbone pyramid at strides 4..32 for a square image.
pub fn random_pyramid(channels: &[usize], size: u32, rng: &mut ChaCha8Rng) -> FeaturePyramid<f64> {
    let levels = channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let stride = 4u32 << i;
            let hw = (size as usize).div_ceil(stride as usize);
            PyramidLevel {
                features: random_tensor(&[c, hw, hw], 1.0, rng),
                stride,
            }
        })
        .collect();
    FeaturePyramid {
        levels,
        image_width: size,
        image_height: size,
    }
}

/// Overwrites every parameter with uniform noise in `±scale` (GN gammas
/// around one).
pub fn randomize<T: Real>(p: &mut RefinerParams<T>, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for (t, name) in p.tensors_mut().into_iter().zip(names) {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = T::of(base + rng.gen_range(-scale..scale));
        }
    }
}

/// Flattened parameter vector in `named()` order.
pub fn flatten<T: Real>(p: &RefinerParams<T>) -> Vec<f64> {
    p.named()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.f64()))
        .collect()
}

pub fn unflatten(p: &mut RefinerParams<f64>, flat: &[f64]) {
    let mut k = 0;
    for t in p.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[k..k + n]);
        k += n;
    }
}
