//! Minimum-cost bipartite assignment and the set-matching cost that pairs
//! predictions with ground truth.
//!
//! [`hungarian`] solves rectangular problems directly (shortest augmenting
//! paths with row/column potentials, O(n²m)). Among equally cheap
//! assignments it returns the lexicographically smallest pair list, ordered
//! by prediction index and then ground-truth index, so reports are stable
//! under ties.

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, GtInstance, ImageSize};
use crate::error::{Error, Result};
use crate::geometry::giou;

/// Dense `rows × cols` matrix of finite costs. Rows are predictions, columns
/// ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "CostMatrix::new",
                detail: format!("{} entries for {rows}x{cols}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite cost at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape {
                op: "CostMatrix::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(n, m, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Result of an assignment: matched `(pred, gt)` pairs sorted by prediction
/// index, plus the indices left over on each side (ascending).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_preds: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_gts: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Sum of matched costs, accumulated in prediction order.
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, g)| c.get(r, g)).sum()
    }

    /// Ground-truth index paired with prediction `pred`, if any.
    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Coefficients of the set-matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl MatchWeights {
    pub fn new(w_cls: f64, w_l1: f64, w_giou: f64) -> Result<Self> {
        let w = Self {
            w_cls,
            w_l1,
            w_giou,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_l1, self.w_giou];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "match weights must be finite and >= 0".into(),
            ));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("match weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// `w_cls·(−p(gt class)) + w_l1·‖b_pred − b_gt‖₁ + w_giou·(−giou)`, with the L1
/// term on normalized center-form boxes.
pub fn match_cost(
    pred: &Detection,
    gt: &GtInstance,
    image: ImageSize,
    w: &MatchWeights,
) -> Result<f64> {
    let p = pred.prob_of(gt.category_id).ok_or_else(|| {
        Error::MalformedPrediction(format!(
            "prediction on image {} has class_probs without category {}",
            pred.image_id, gt.category_id
        ))
    })?;
    let l1 = image
        .normalize(&pred.bbox)
        .l1_distance(&image.normalize(&gt.bbox));
    let cost = -w.w_cls * p + w.w_l1 * l1 - w.w_giou * giou(&pred.bbox, &gt.bbox);
    if !cost.is_finite() {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    Ok(cost)
}

/// Optimal matching of one image's predictions to its ground truths.
pub fn match_image(
    preds: &[Detection],
    gts: &[GtInstance],
    image: ImageSize,
    w: &MatchWeights,
) -> Result<Assignment> {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for g in gts {
            data.push(match_cost(p, g, image, w)?);
        }
    }
    Ok(hungarian(&CostMatrix::new(preds.len(), gts.len(), data)?))
}

/// Exact minimum-cost assignment of size `min(rows, cols)`.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    if n == 0 || m == 0 {
        return Assignment::from_pairs(Vec::new(), n, m);
    }
    let full = Sub {
        c,
        rows: (0..n).collect(),
        cols: (0..m).collect(),
    };
    let sol = full.solve(true);
    let tol = 1e-12 * (1.0 + c.max_abs() * n.max(m) as f64);
    canonicalize(c, &sol, tol)
}

/// Optimal solution of a (sub)problem in original indices.
struct Solution {
    cost: f64,
    /// Reduced cost `c - u - v` per original `(row, col)`, when requested.
    reduced: Vec<f64>,
}

/// A view of the cost matrix restricted to some rows and columns.
struct Sub<'a> {
    c: &'a CostMatrix,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Sub<'_> {
    fn solve(&self, with_reduced: bool) -> Solution {
        let (nr, nc) = (self.rows.len(), self.cols.len());
        if nr == 0 || nc == 0 {
            return Solution {
                cost: 0.0,
                reduced: Vec::new(),
            };
        }
        // The solver wants the shorter side as its rows.
        let transposed = nr > nc;
        let (a, b) = if transposed { (nc, nr) } else { (nr, nc) };
        let cost = |i: usize, j: usize| {
            if transposed {
                self.c.get(self.rows[j], self.cols[i])
            } else {
                self.c.get(self.rows[i], self.cols[j])
            }
        };
        let (row_to_col, u, v) = shortest_augmenting_path(a, b, cost);

        let total = row_to_col
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                if transposed {
                    (self.rows[j], self.cols[i])
                } else {
                    (self.rows[i], self.cols[j])
                }
            })
            .map(|(r, g)| self.c.get(r, g))
            .sum();

        let mut reduced = Vec::new();
        if with_reduced {
            reduced = vec![0.0; self.c.rows * self.c.cols];
        }
        for i in (0..a).filter(|_| with_reduced) {
            for j in 0..b {
                let (r, g) = if transposed {
                    (self.rows[j], self.cols[i])
                } else {
                    (self.rows[i], self.cols[j])
                };
                reduced[r * self.c.cols + g] = cost(i, j) - u[i] - v[j];
            }
        }
        Solution {
            cost: total,
            reduced,
        }
    }
}

/// Shortest augmenting path assignment for `a ≤ b`. Returns the column of
/// each row and the dual potentials (`u` per row, `v` per column).
fn shortest_augmenting_path(
    a: usize,
    b: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    debug_assert!(a <= b);
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; a];
    let mut v = vec![0.0; b + 1];
    // col_row[j]: row matched to column j; column b is the virtual root
    let mut col_row = vec![NONE; b + 1];
    let mut way = vec![b; b + 1];
    let mut minv = vec![0.0; b + 1];
    let mut used = vec![false; b + 1];

    for i in 0..a {
        col_row[b] = i;
        let mut j0 = b;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 0..b {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=b {
                if used[j] {
                    if col_row[j] != NONE {
                        u[col_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == b {
                break;
            }
        }
    }

    let mut row_to_col = vec![NONE; a];
    for j in 0..b {
        if col_row[j] != NONE {
            row_to_col[col_row[j]] = j;
        }
    }
    v.truncate(b);
    (row_to_col, u, v)
}

/// Picks the lexicographically smallest optimal pair list.
///
/// Predictions are decided in index order: each takes the lowest-index
/// ground truth for which an optimal completion still exists, or stays
/// unmatched when none does. Edges with positive reduced cost can never be
/// part of an optimal assignment and are skipped without a solve.
fn canonicalize(c: &CostMatrix, full: &Solution, tol: f64) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    let size = n.min(m);
    let opt = full.cost;

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(size);
    let mut fixed_cost = 0.0;
    let mut col_taken = vec![false; m];

    for p in 0..n {
        let need = size - fixed.len();
        if need == 0 {
            break;
        }
        let rows_after = n - p - 1;
        let mut chosen = None;
        for g in 0..m {
            if col_taken[g] || full.reduced[p * m + g] > tol * 1e3 {
                continue;
            }
            let cols_left = m - fixed.len() - 1;
            if rows_after.min(cols_left) < need - 1 {
                continue;
            }
            let rest = Sub {
                c,
                rows: (p + 1..n).collect(),
                cols: (0..m).filter(|&j| j != g && !col_taken[j]).collect(),
            }
            .solve(false);
            if fixed_cost + c.get(p, g) + rest.cost <= opt + tol {
                chosen = Some(g);
                break;
            }
        }
        if let Some(g) = chosen {
            fixed.push((p, g));
            fixed_cost += c.get(p, g);
            col_taken[g] = true;
        }
    }
    debug_assert_eq!(fixed.len(), size);
    Assignment::from_pairs(fixed, n, m)
}
