//! Box representations, overlap metrics and the logit-space delta codec.
//!
//! Absolute boxes are corner form ([`BBox`]); detector-space boxes are
//! normalized center form ([`NormBox`]). All geometry is 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-sigmoid clamp used by [`refine_step`] unless configured otherwise.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-5;

/// Axis-aligned box in absolute pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidBox(format!(
                "negative extent in ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative extent w={w} h={h}")));
        }
        Self::new(x, y, x + w, y + h)
    }

    /// `[x, y, w, h]` with `w`, `h` chosen so that [`from_xywh`](Self::from_xywh)
    /// reproduces the corners bit for bit.
    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.x1,
            self.y1,
            exact_extent(self.x1, self.x2),
            exact_extent(self.y1, self.y2),
        ]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

/// Box normalized by image size, center form. Every field lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidBox(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form in normalized units. May leave the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_bbox(&self, img_w: f64, img_h: f64) -> BBox {
        let [x1, y1, x2, y2] = self.corners();
        BBox {
            x1: x1 * img_w,
            y1: y1 * img_h,
            x2: x2 * img_w,
            y2: y2 * img_h,
        }
    }

    /// Normalizes an absolute box. Boxes reaching outside the image are
    /// clipped to it first, so the result is always a valid `NormBox`.
    pub fn from_bbox(b: &BBox, img_w: f64, img_h: f64) -> NormBox {
        let x1 = (b.x1 / img_w).clamp(0.0, 1.0);
        let y1 = (b.y1 / img_h).clamp(0.0, 1.0);
        let x2 = (b.x2 / img_w).clamp(0.0, 1.0);
        let y2 = (b.y2 / img_h).clamp(0.0, 1.0);
        NormBox {
            cx: (0.5 * (x1 + x2)).clamp(0.0, 1.0),
            cy: (0.5 * (y1 + y2)).clamp(0.0, 1.0),
            w: (x2 - x1).clamp(0.0, 1.0),
            h: (y2 - y1).clamp(0.0, 1.0),
        }
    }

    pub fn l1_distance(&self, other: &NormBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// Additive update in inverse-sigmoid space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dcx: f64, dcy: f64, dw: f64, dh: f64) -> Result<Self> {
        if ![dcx, dcy, dw, dh].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite box delta".into()));
        }
        Ok(Self { dcx, dcy, dw, dh })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dcx, self.dcy, self.dw, self.dh]
    }

    pub fn neg(self) -> Self {
        Self {
            dcx: -self.dcx,
            dcy: -self.dcy,
            dw: -self.dw,
            dh: -self.dh,
        }
    }
}

fn exact_extent(lo: f64, hi: f64) -> f64 {
    let mut w = hi - lo;
    for _ in 0..4 {
        let back = lo + w;
        if back == hi {
            break;
        }
        w = if back < hi {
            w.next_up()
        } else {
            w.next_down()
        };
    }
    w
}

/// Intersection over union. Zero for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - |hull \ union| / |hull|`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    if union <= 0.0 || hull <= 0.0 {
        // both degenerate; no overlap information
        return 0.0;
    }
    // rounding can leave hull a hair below union when one box holds the other
    let iou = (inter / union).clamp(0.0, 1.0);
    iou - (hull - union).max(0.0) / hull
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One refinement update: `sigmoid(inverse_sigmoid(clamp(v, eps, 1 - eps)) + d)`
/// applied to each field.
pub fn refine_step(b: &NormBox, d: &BoxDelta, eps: f64) -> NormBox {
    let f = |v: f64, dv: f64| sigmoid(inverse_sigmoid(v.clamp(eps, 1.0 - eps)) + dv);
    NormBox {
        cx: f(b.cx, d.dcx),
        cy: f(b.cy, d.dcy),
        w: f(b.w, d.dw),
        h: f(b.h, d.dh),
    }
}

/// Clamps every field into `[eps, 1 - eps]`, the domain `refine_step` works in.
pub fn clamp_box(b: &NormBox, eps: f64) -> NormBox {
    NormBox {
        cx: b.cx.clamp(eps, 1.0 - eps),
        cy: b.cy.clamp(eps, 1.0 - eps),
        w: b.w.clamp(eps, 1.0 - eps),
        h: b.h.clamp(eps, 1.0 - eps),
    }
}

/// COCO object-size bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaBin {
    Small,
    Medium,
    Large,
}

pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA_MAX: f64 = 96.0 * 96.0;

pub fn area_bin(b: &BBox) -> AreaBin {
    area_bin_of(b.area())
}

pub fn area_bin_of(area: f64) -> AreaBin {
    if area < SMALL_AREA_MAX {
        AreaBin::Small
    } else if area < MEDIUM_AREA_MAX {
        AreaBin::Medium
    } else {
        AreaBin::Large
    }
}
