//! Axis-aligned boxes, IoU-family overlap metrics, and the CIoU loss with its
//! analytic gradient.
//!
//! Coordinates are real pixels. Corner boxes treat `xmax`/`ymax` as the
//! exclusive edge, so `width = xmax - xmin` with no `+1` pixel convention.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FOUR_OVER_PI_SQ: f64 = 4.0 / (PI * PI);

/// Corner-form box. Zero-area boxes are allowed, negative extents are not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;
    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.xmin, r.ymin, r.xmax, r.ymax)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        }
    }
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "box has non-finite coordinate ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        if xmax < xmin || ymax < ymin {
            return Err(Error::invalid(format!(
                "box has negative extent ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn xmin(&self) -> f64 {
        self.xmin
    }
    pub fn ymin(&self) -> f64 {
        self.ymin
    }
    pub fn xmax(&self) -> f64 {
        self.xmax
    }
    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.xmin + self.xmax),
            0.5 * (self.ymin + self.ymax),
        )
    }

    /// Multiplies every coordinate by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {s}")));
        }
        BBox::new(self.xmin * s, self.ymin * s, self.xmax * s, self.ymax * s)
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Self {
            xmin: cx(self.xmin),
            ymin: cy(self.ymin),
            xmax: cx(self.xmax),
            ymax: cy(self.ymax),
        }
    }

    /// Fails for zero-area boxes, which have no center form.
    pub fn to_center(&self) -> Result<CenterBox> {
        let (cx, cy) = self.center();
        CenterBox::new(cx, cy, self.width(), self.height())
    }
}

/// Center-form box `(cx, cy, w, h)` with strictly positive extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCenter", into = "RawCenter")]
pub struct CenterBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCenter {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawCenter> for CenterBox {
    type Error = Error;
    fn try_from(r: RawCenter) -> Result<Self> {
        CenterBox::new(r.cx, r.cy, r.w, r.h)
    }
}

impl From<CenterBox> for RawCenter {
    fn from(b: CenterBox) -> Self {
        RawCenter {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!("non-finite box center ({cx}, {cy})")));
        }
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::invalid(format!(
                "box width and height must be positive, got w={w}, h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_corners(&self) -> BBox {
        BBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }

    /// Parameters as `[cx, cy, w, h]`.
    pub fn params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_params(p: [f64; 4]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3])
    }
}

/// Intersection over union. Two zero-area boxes (empty union) give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    iw * ih
}

fn enclosing(a: &BBox, b: &BBox) -> BBox {
    BBox {
        xmin: a.xmin.min(b.xmin),
        ymin: a.ymin.min(b.ymin),
        xmax: a.xmax.max(b.xmax),
        ymax: a.ymax.max(b.ymax),
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = enclosing(a, b).area();
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// Distance IoU: `iou - center_distance^2 / enclosing_diagonal^2`.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    let hull = enclosing(a, b);
    let diag_sq = hull.width().powi(2) + hull.height().powi(2);
    if diag_sq <= 0.0 {
        return 0.0;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    iou(a, b) - ((ax - bx).powi(2) + (ay - by).powi(2)) / diag_sq
}

/// The individual terms that make up the CIoU loss for one box pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapBreakdown {
    pub iou: f64,
    pub center_distance_sq: f64,
    pub enclosing_diagonal_sq: f64,
    /// Aspect-ratio consistency `v = 4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2`.
    pub aspect_term_v: f64,
    /// Trade-off weight `v / ((1 - iou) + v)`, zero when the denominator is.
    pub tradeoff_alpha: f64,
}

impl OverlapBreakdown {
    /// Distance penalty `rho^2 / c^2`.
    pub fn distance_penalty(&self) -> f64 {
        self.center_distance_sq / self.enclosing_diagonal_sq
    }

    pub fn loss(&self) -> f64 {
        self.loss_with_alpha(self.tradeoff_alpha)
    }

    fn loss_with_alpha(&self, alpha: f64) -> f64 {
        1.0 - self.iou + self.distance_penalty() + alpha * self.aspect_term_v
    }
}

pub fn ciou_breakdown(pred: &CenterBox, gt: &CenterBox) -> OverlapBreakdown {
    let p = pred.to_corners();
    let g = gt.to_corners();
    let iou = iou(&p, &g);
    let center_distance_sq = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let hull = enclosing(&p, &g);
    let enclosing_diagonal_sq = hull.width().powi(2) + hull.height().powi(2);
    let dtheta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let aspect_term_v = FOUR_OVER_PI_SQ * dtheta * dtheta;
    let denom = (1.0 - iou) + aspect_term_v;
    let tradeoff_alpha = if denom > 0.0 {
        aspect_term_v / denom
    } else {
        0.0
    };
    OverlapBreakdown {
        iou,
        center_distance_sq,
        enclosing_diagonal_sq,
        aspect_term_v,
        tradeoff_alpha,
    }
}

/// `1 - IoU + rho^2/c^2 + alpha * v`. Zero exactly when the boxes coincide.
pub fn ciou_loss(pred: &CenterBox, gt: &CenterBox) -> f64 {
    ciou_breakdown(pred, gt).loss()
}

/// CIoU loss with the trade-off weight held at `alpha` instead of being
/// recomputed. This is the function whose derivative [`ciou_loss_gradient`]
/// returns, so finite-difference checks should perturb this one.
pub fn ciou_loss_fixed_alpha(pred: &CenterBox, gt: &CenterBox, alpha: f64) -> f64 {
    ciou_breakdown(pred, gt).loss_with_alpha(alpha)
}

/// Partial derivatives with respect to `(cx, cy, w, h)` of a predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BoxGradient {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGradient {
    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

// Derivative of max(a, b) with respect to a; ties split evenly so that
// coincident edges give the symmetric (zero-at-optimum) subgradient.
#[inline]
fn d_max(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

#[inline]
fn d_min(a: f64, b: f64) -> f64 {
    d_max(b, a)
}

/// Per-axis partials of the intersection extent and enclosing extent with
/// respect to the predicted box's low and high edge.
struct AxisPartials {
    inter: f64,
    d_inter_lo: f64,
    d_inter_hi: f64,
    hull: f64,
    d_hull_lo: f64,
    d_hull_hi: f64,
}

fn axis_partials(lo: f64, hi: f64, glo: f64, ghi: f64) -> AxisPartials {
    let raw = hi.min(ghi) - lo.max(glo);
    let (inter, d_inter_lo, d_inter_hi) = if raw > 0.0 {
        (raw, -d_max(lo, glo), d_min(hi, ghi))
    } else {
        (0.0, 0.0, 0.0)
    };
    AxisPartials {
        inter,
        d_inter_lo,
        d_inter_hi,
        hull: hi.max(ghi) - lo.min(glo),
        d_hull_lo: -d_min(lo, glo),
        d_hull_hi: d_max(hi, ghi),
    }
}

/// Analytic gradient of the CIoU loss with respect to the predicted box.
///
/// The trade-off weight alpha is treated as a constant of the forward pass
/// (no derivative flows through it).
pub fn ciou_loss_gradient(pred: &CenterBox, gt: &CenterBox) -> BoxGradient {
    let p = pred.to_corners();
    let g = gt.to_corners();
    let bd = ciou_breakdown(pred, gt);

    let ax = axis_partials(p.xmin, p.xmax, g.xmin, g.xmax);
    let ay = axis_partials(p.ymin, p.ymax, g.ymin, g.ymax);

    // Edge partials -> (center, size) partials: lo = c - s/2, hi = c + s/2.
    let to_center = |d_lo: f64, d_hi: f64| (d_lo + d_hi, 0.5 * (d_hi - d_lo));

    // Intersection area I = ix * iy.
    let (di_dcx, di_dw) = to_center(ax.d_inter_lo * ay.inter, ax.d_inter_hi * ay.inter);
    let (di_dcy, di_dh) = to_center(ay.d_inter_lo * ax.inter, ay.d_inter_hi * ax.inter);
    let inter = ax.inter * ay.inter;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    // dIoU = (dI (U + I) - I dA) / U^2 with A the predicted area.
    let diou = |di: f64, da: f64| (di * (union + inter) - inter * da) / (union * union);
    let diou_dcx = diou(di_dcx, 0.0);
    let diou_dcy = diou(di_dcy, 0.0);
    let diou_dw = diou(di_dw, pred.h);
    let diou_dh = diou(di_dh, pred.w);

    // Distance penalty D = rho^2 / c^2, c^2 = hx^2 + hy^2.
    let c_sq = bd.enclosing_diagonal_sq;
    let rho_sq = bd.center_distance_sq;
    let (dhx_dcx, dhx_dw) = to_center(ax.d_hull_lo, ax.d_hull_hi);
    let (dhy_dcy, dhy_dh) = to_center(ay.d_hull_lo, ay.d_hull_hi);
    let dc_dcx = 2.0 * ax.hull * dhx_dcx;
    let dc_dw = 2.0 * ax.hull * dhx_dw;
    let dc_dcy = 2.0 * ay.hull * dhy_dcy;
    let dc_dh = 2.0 * ay.hull * dhy_dh;
    let drho_dcx = 2.0 * (pred.cx - gt.cx);
    let drho_dcy = 2.0 * (pred.cy - gt.cy);
    let dd = |drho: f64, dc: f64| (drho * c_sq - rho_sq * dc) / (c_sq * c_sq);

    // Aspect term v = k (atan(wg/hg) - atan(w/h))^2.
    let dtheta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let norm = pred.w * pred.w + pred.h * pred.h;
    let dv_dw = -2.0 * FOUR_OVER_PI_SQ * dtheta * pred.h / norm;
    let dv_dh = 2.0 * FOUR_OVER_PI_SQ * dtheta * pred.w / norm;
    let alpha = bd.tradeoff_alpha;

    BoxGradient {
        cx: -diou_dcx + dd(drho_dcx, dc_dcx),
        cy: -diou_dcy + dd(drho_dcy, dc_dcy),
        w: -diou_dw + dd(0.0, dc_dw) + alpha * dv_dw,
        h: -diou_dh + dd(0.0, dc_dh) + alpha * dv_dh,
    }
}
