//! Differentiable operators of the refinement network.
//!
//! Each operator has a forward function and a matching backward function
//! (vector-Jacobian product). Backward passes accumulate parameter gradients
//! into caller-provided buffers and return the input gradient.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
fn matmul_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Unfolds zero-padded `k×k` patches: `[C·k·k, H·W]`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, wd) = x.chw("conv2d")?;
    let (c_out, k) = match w.shape()[..] {
        [co, ci, k1, k2] if ci == c_in && k1 == k2 && (k1 == 1 || k1 == 3) => (co, k1),
        _ => {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("weight {:?} for input {:?}", w.shape(), x.shape()),
            })
        }
    };
    b.expect_shape("conv2d bias", &[c_out])?;
    Ok((c_in, h, wd, c_out, k))
}

/// Stride-1 cross-correlation with `k/2` zero padding, `k ∈ {1, 3}`.
/// `x: [C_in, H, W]`, `w: [C_out, C_in, k, k]`, `b: [C_out]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, h, wd, c_out, k) = conv_dims(x, w, b)?;
    let hw = h * wd;
    let mut out = vec![T::zero(); c_out * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v = b.data()[co]);
    }
    if k == 1 {
        matmul_acc(&mut out, w.data(), x.data(), c_out, c_in, hw);
    } else {
        let col = im2col(x.data(), c_in, h, wd, k);
        matmul_acc(&mut out, w.data(), &col, c_out, c_in * k * k, hw);
    }
    Tensor::from_vec(&[c_out, h, wd], out)
}

/// Backward of [`conv2d`]. Accumulates into `dw`/`db`; returns `dx` when
/// `need_dx`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (c_in, h, wd, c_out, k) = conv_dims(x, w, b)?;
    dy.expect_shape("conv2d_backward", &[c_out, h, wd])?;
    let hw = h * wd;
    let kk = c_in * k * k;
    let col_owned;
    let col: &[T] = if k == 1 {
        x.data()
    } else {
        col_owned = im2col(x.data(), c_in, h, wd, k);
        &col_owned
    };
    let dyd = dy.data();
    for co in 0..c_out {
        let g = &dyd[co * hw..(co + 1) * hw];
        db[co] += g.iter().copied().sum::<T>();
        for r in 0..kk {
            dw[co * kk + r] += dot(g, &col[r * hw..(r + 1) * hw]);
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dcol = vec![T::zero(); kk * hw];
    let wd_ = w.data();
    for co in 0..c_out {
        let g = &dyd[co * hw..(co + 1) * hw];
        for r in 0..kk {
            let wv = wd_[co * kk + r];
            if wv == T::zero() {
                continue;
            }
            for (d, &gv) in dcol[r * hw..(r + 1) * hw].iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
    let dx = if k == 1 {
        dcol
    } else {
        col2im(&dcol, c_in, h, wd, k)
    };
    Tensor::from_vec(&[c_in, h, wd], dx).map(Some)
}

/// Saved statistics of a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T: Real> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    shape: [usize; 3],
    groups: usize,
}

pub const GN_EPS: f64 = 1e-5;

/// Group normalization over `[C, H, W]` with per-channel affine.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let (c, h, w) = x.chw("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape {
            op: "group_norm",
            detail: format!("{c} channels not divisible into {groups} groups"),
        });
    }
    gamma.expect_shape("group_norm gamma", &[c])?;
    beta.expect_shape("group_norm beta", &[c])?;
    let hw = h * w;
    let per = c / groups;
    let n = per * hw;
    let mut xhat = vec![T::zero(); c * hw];
    let mut rstd = vec![T::zero(); groups];
    let mut y = vec![T::zero(); c * hw];
    let xd = x.data();
    for g in 0..groups {
        let span = g * n..(g + 1) * n;
        let seg = &xd[span.clone()];
        let mean = seg.iter().copied().sum::<T>() / T::of(n as f64);
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(n as f64);
        let r = T::one() / (var + T::of(GN_EPS)).sqrt();
        rstd[g] = r;
        for (o, &v) in xhat[span].iter_mut().zip(seg) {
            *o = (v - mean) * r;
        }
    }
    for ch in 0..c {
        let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
        for i in ch * hw..(ch + 1) * hw {
            y[i] = ga * xhat[i] + be;
        }
    }
    Ok((
        Tensor::from_vec(&[c, h, w], y)?,
        GroupNormCache {
            xhat,
            rstd,
            shape: [c, h, w],
            groups,
        },
    ))
}

pub fn group_norm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Result<Tensor<T>> {
    let [c, h, w] = cache.shape;
    dy.expect_shape("group_norm_backward", &[c, h, w])?;
    let hw = h * w;
    let per = c / cache.groups;
    let n = per * hw;
    let dyd = dy.data();
    let mut dxhat = vec![T::zero(); c * hw];
    for ch in 0..c {
        let ga = gamma.data()[ch];
        let mut sg = T::zero();
        let mut sb = T::zero();
        for i in ch * hw..(ch + 1) * hw {
            sg += dyd[i] * cache.xhat[i];
            sb += dyd[i];
            dxhat[i] = dyd[i] * ga;
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
    }
    let mut dx = vec![T::zero(); c * hw];
    let nt = T::of(n as f64);
    for g in 0..cache.groups {
        let span = g * n..(g + 1) * n;
        let r = cache.rstd[g];
        let s1: T = dxhat[span.clone()].iter().copied().sum();
        let s2: T = dxhat[span.clone()]
            .iter()
            .zip(&cache.xhat[span.clone()])
            .map(|(&d, &xh)| d * xh)
            .sum();
        for i in span {
            dx[i] = r / nt * (nt * dxhat[i] - s1 - cache.xhat[i] * s2);
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Backward of [`relu`] given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Nearest-neighbor resize of `[C, h, w]` to `[C, out_h, out_w]`
/// (source index `floor(i · h / out_h)`).
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("upsample_nearest")?;
    let mut out = vec![T::zero(); c * out_h * out_w];
    let xd = x.data();
    for ch in 0..c {
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                let sj = j * w / out_w;
                out[(ch * out_h + i) * out_w + j] = xd[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

pub fn upsample_nearest_backward<T: Real>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = dy.chw("upsample_nearest_backward")?;
    let mut dx = vec![T::zero(); c * in_h * in_w];
    let g = dy.data();
    for ch in 0..c {
        for i in 0..out_h {
            let si = i * in_h / out_h;
            for j in 0..out_w {
                let sj = j * in_w / out_w;
                dx[(ch * in_h + si) * in_w + sj] += g[(ch * out_h + i) * out_w + j];
            }
        }
    }
    Tensor::from_vec(&[c, in_h, in_w], dx)
}

/// Elementwise sum of equally shaped tensors.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape("add", a.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Bilinear taps of one ROI: for every output cell, `(flat index, weight)`
/// pairs with the `1/count` averaging folded into the weights.
///
/// Samples follow the continuous (half-pixel) convention: the ROI is shifted
/// by −0.5 and each sub-bin is sampled on a regular `ratio × ratio` grid.
/// Points further than one pixel outside the map contribute zero; points
/// within that margin are clamped to the border.
pub fn roi_align_taps(
    h: usize,
    w: usize,
    roi: [f64; 4],
    output: usize,
    ratio: usize,
) -> Vec<Vec<(usize, f64)>> {
    let [x1, y1, x2, y2] = roi;
    let start_x = x1 - 0.5;
    let start_y = y1 - 0.5;
    let bin_w = (x2 - x1) / output as f64;
    let bin_h = (y2 - y1) / output as f64;
    let count = (ratio * ratio).max(1) as f64;
    let mut taps = vec![Vec::with_capacity(4 * ratio * ratio); output * output];
    for ph in 0..output {
        for pw in 0..output {
            let cell = &mut taps[ph * output + pw];
            for iy in 0..ratio {
                let y = start_y + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ratio as f64;
                for ix in 0..ratio {
                    let x = start_x + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / ratio as f64;
                    bilinear_taps(h, w, y, x, |idx, wt| cell.push((idx, wt / count)));
                }
            }
        }
    }
    taps
}

fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, mut emit: impl FnMut(usize, f64)) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y_lo, y_hi, y) = {
        let lo = y.floor() as usize;
        if lo >= h - 1 {
            (h - 1, h - 1, (h - 1) as f64)
        } else {
            (lo, lo + 1, y)
        }
    };
    let (x_lo, x_hi, x) = {
        let lo = x.floor() as usize;
        if lo >= w - 1 {
            (w - 1, w - 1, (w - 1) as f64)
        } else {
            (lo, lo + 1, x)
        }
    };
    let ly = y - y_lo as f64;
    let lx = x - x_lo as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    emit(y_lo * w + x_lo, hy * hx);
    emit(y_lo * w + x_hi, hy * lx);
    emit(y_hi * w + x_lo, ly * hx);
    emit(y_hi * w + x_hi, ly * lx);
}

/// ROI Align of `feat: [C, H, W]` over `roi = (x1, y1, x2, y2)` given in
/// feature-map coordinates. Output `[C, output, output]`.
pub fn roi_align<T: Real>(
    feat: &Tensor<T>,
    roi: [f64; 4],
    output: usize,
    ratio: usize,
) -> Result<Tensor<T>> {
    let (_, h, w) = feat.chw("roi_align")?;
    if h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "roi_align",
            detail: "empty feature map".into(),
        });
    }
    let taps = roi_align_taps(h, w, roi, output, ratio);
    Ok(roi_align_with_taps(feat, &taps, output))
}

pub(crate) fn roi_align_with_taps<T: Real>(
    feat: &Tensor<T>,
    taps: &[Vec<(usize, f64)>],
    output: usize,
) -> Tensor<T> {
    let [c, h, w] = [feat.shape()[0], feat.shape()[1], feat.shape()[2]];
    let hw = h * w;
    let cells = output * output;
    let mut out = vec![T::zero(); c * cells];
    let fd = feat.data();
    for ch in 0..c {
        let plane = &fd[ch * hw..(ch + 1) * hw];
        for (cell, t) in taps.iter().enumerate() {
            out[ch * cells + cell] = t
                .iter()
                .fold(T::zero(), |s, &(i, wt)| s + plane[i] * T::of(wt));
        }
    }
    Tensor::from_vec(&[c, output, output], out).expect("sized above")
}

/// Accumulates the feature gradient of [`roi_align`] into `dfeat`.
pub fn roi_align_backward<T: Real>(
    feat_shape: [usize; 3],
    roi: [f64; 4],
    output: usize,
    ratio: usize,
    dy: &Tensor<T>,
    dfeat: &mut [T],
) -> Result<()> {
    let [_, h, w] = feat_shape;
    let taps = roi_align_taps(h, w, roi, output, ratio);
    roi_align_backward_with_taps(feat_shape, &taps, output, dy, dfeat)
}

pub(crate) fn roi_align_backward_with_taps<T: Real>(
    feat_shape: [usize; 3],
    taps: &[Vec<(usize, f64)>],
    output: usize,
    dy: &Tensor<T>,
    dfeat: &mut [T],
) -> Result<()> {
    let [c, h, w] = feat_shape;
    dy.expect_shape("roi_align_backward", &[c, output, output])?;
    let hw = h * w;
    let cells = output * output;
    let g = dy.data();
    for ch in 0..c {
        let plane = &mut dfeat[ch * hw..(ch + 1) * hw];
        for (cell, t) in taps.iter().enumerate() {
            let gv = g[ch * cells + cell];
            for &(i, wt) in t {
                plane[i] += gv * T::of(wt);
            }
        }
    }
    Ok(())
}

/// Mean over the spatial axes: `[C, H, W] -> [C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (c, h, w) = x.chw("global_avg_pool")?;
    let hw = h * w;
    let n = T::of(hw as f64);
    Ok((0..c)
        .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / n)
        .collect())
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], shape: [usize; 3]) -> Tensor<T> {
    let [c, h, w] = shape;
    let n = T::of((h * w) as f64);
    let mut dx = Vec::with_capacity(c * h * w);
    for &g in dy.iter().take(c) {
        dx.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::from_vec(&[c, h, w], dx).expect("sized above")
}

/// `y = W x + b` with `W: [out, in]`.
pub fn linear<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
    let (out, inp) = match w.shape()[..] {
        [o, i] if i == x.len() => (o, i),
        _ => {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("weight {:?} for input of {}", w.shape(), x.len()),
            })
        }
    };
    b.expect_shape("linear bias", &[out])?;
    Ok((0..out)
        .map(|o| b.data()[o] + dot(&w.data()[o * inp..(o + 1) * inp], x))
        .collect())
}

pub fn linear_backward<T: Real>(
    x: &[T],
    w: &Tensor<T>,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let inp = x.len();
    let mut dx = vec![T::zero(); inp];
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        let row = &w.data()[o * inp..(o + 1) * inp];
        for i in 0..inp {
            dw[o * inp + i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

/// Jacobian-vector products of one `refine_step` field:
/// `out = sigmoid(logit(clamp(v)) + d)`. Returns `(∂out/∂d, ∂out/∂v)`;
/// the latter is zero where the clamp is active.
pub fn refine_step_partials(v: f64, d: f64, eps: f64) -> (f64, f64) {
    let vc = v.clamp(eps, 1.0 - eps);
    let z = (vc / (1.0 - vc)).ln() + d;
    let out = 1.0 / (1.0 + (-z).exp());
    let dd = out * (1.0 - out);
    let dv = if v > eps && v < 1.0 - eps {
        dd / (vc * (1.0 - vc))
    } else {
        0.0
    };
    (dd, dv)
}

/// Regression loss of one box pair in center form,
/// `w_l1·‖p − t‖₁ + w_giou·(1 − giou(p, t))`, with its gradient w.r.t. `p`.
pub fn box_loss(pred: [f64; 4], target: [f64; 4], w_l1: f64, w_giou: f64) -> (f64, [f64; 4]) {
    let mut grad = [0.0; 4];
    let mut l1 = 0.0;
    for i in 0..4 {
        let d = pred[i] - target[i];
        l1 += d.abs();
        grad[i] = w_l1
            * if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
    }
    let (g, dg_corners) = giou_with_grad(center_to_corners(pred), center_to_corners(target));
    // corners = (cx - w/2, cy - h/2, cx + w/2, cy + h/2)
    let [d1, d2, d3, d4] = dg_corners;
    let dg = [d1 + d3, d2 + d4, 0.5 * (d3 - d1), 0.5 * (d4 - d2)];
    for i in 0..4 {
        grad[i] -= w_giou * dg[i];
    }
    (w_l1 * l1 + w_giou * (1.0 - g), grad)
}

pub fn center_to_corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

/// GIoU of corner-form boxes and its gradient w.r.t. the first box.
pub fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = a;
    let [bx1, by1, bx2, by2] = b;
    let aw = x2 - x1;
    let ah = y2 - y1;
    let area_a = aw * ah;
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw_raw = x2.min(bx2) - x1.max(bx1);
    let ih_raw = y2.min(by2) - y1.max(by1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let cw = x2.max(bx2) - x1.min(bx1);
    let ch = y2.max(by2) - y1.min(by1);
    let hull = cw * ch;
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let g = inter / union - (hull - union) / hull;

    let g_inter = 1.0 / union;
    let g_union = -inter / (union * union) + 1.0 / hull;
    let g_hull = -union / (hull * hull);
    // union = area_a + area_b − inter
    let c_inter = g_inter - g_union;
    let c_area = g_union;

    let d_area = [-ah, -aw, ah, aw];
    let (mut d_iw, mut d_ih) = ([0.0; 4], [0.0; 4]);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > bx1 {
            d_iw[0] = -1.0;
        }
        if x2 < bx2 {
            d_iw[2] = 1.0;
        }
        if y1 > by1 {
            d_ih[1] = -1.0;
        }
        if y2 < by2 {
            d_ih[3] = 1.0;
        }
    }
    let mut d_cw = [0.0; 4];
    let mut d_ch = [0.0; 4];
    if x1 < bx1 {
        d_cw[0] = -1.0;
    }
    if x2 > bx2 {
        d_cw[2] = 1.0;
    }
    if y1 < by1 {
        d_ch[1] = -1.0;
    }
    if y2 > by2 {
        d_ch[3] = 1.0;
    }
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_inter = d_iw[i] * ih + d_ih[i] * iw;
        let d_hull = d_cw[i] * ch + d_ch[i] * cw;
        grad[i] = c_inter * d_inter + c_area * d_area[i] + g_hull * d_hull;
    }
    (g, grad)
}
