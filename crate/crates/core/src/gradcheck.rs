//! Finite-difference verification of the analytic CIoU and Focal gradients.
//!
//! Instances are drawn from seeded streams. CIoU draws whose box edges sit
//! within a few finite-difference steps of each other are redrawn: the loss
//! has kinks there (max/min of edges) and a central difference straddling a
//! kink does not estimate the one-sided derivative.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{ciou_breakdown, ciou_loss_fixed_alpha, ciou_loss_gradient, CenterBox};
use crate::losses::{focal_loss, focal_loss_gradient, FocalParams};
use crate::rng;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Relative CIoU step, multiplied by the smaller predicted extent.
pub const CIOU_REL_STEP: f64 = 1e-4;
pub const FOCAL_STEP: f64 = 1e-6;
/// Denominator floor for relative errors of near-zero derivatives.
pub const REL_ERR_FLOOR: f64 = 1e-6;

const COORD_RANGE: f64 = 512.0;
const SIZE_MIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub seed: u64,
    pub max_rel_err_ciou: f64,
    pub max_rel_err_focal: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub type CiouGradFn = dyn Fn(&CenterBox, &CenterBox) -> [f64; 4] + Sync;
pub type FocalGradFn = dyn Fn(f64, bool, FocalParams) -> Result<f64> + Sync;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error over the four box parameters for one pair.
pub fn ciou_instance_error(pred: &CenterBox, gt: &CenterBox, grad: &CiouGradFn) -> Result<f64> {
    let analytic = grad(pred, gt);
    let alpha = ciou_breakdown(pred, gt).tradeoff_alpha;
    let base = pred.params();
    let step = CIOU_REL_STEP * pred.w().min(pred.h());
    let mut worst = 0.0_f64;
    for (i, an) in analytic.iter().enumerate() {
        let mut up = base;
        let mut dn = base;
        up[i] += step;
        dn[i] -= step;
        let f_up = ciou_loss_fixed_alpha(&CenterBox::from_params(up)?, gt, alpha);
        let f_dn = ciou_loss_fixed_alpha(&CenterBox::from_params(dn)?, gt, alpha);
        worst = worst.max(relative_error(*an, (f_up - f_dn) / (2.0 * step)));
    }
    Ok(worst)
}

pub fn focal_instance_error(
    y_prime: f64,
    positive: bool,
    params: FocalParams,
    grad: &FocalGradFn,
) -> Result<f64> {
    let analytic = grad(y_prime, positive, params)?;
    let up = focal_loss(y_prime + FOCAL_STEP, positive, params)?;
    let dn = focal_loss(y_prime - FOCAL_STEP, positive, params)?;
    Ok(relative_error(analytic, (up - dn) / (2.0 * FOCAL_STEP)))
}

fn edges(b: &CenterBox) -> [f64; 4] {
    let c = b.to_corners();
    [c.xmin(), c.xmax(), c.ymin(), c.ymax()]
}

/// True when no predicted edge lies within `gap` of a target edge on the
/// same axis.
pub fn clear_of_kinks(pred: &CenterBox, gt: &CenterBox, gap: f64) -> bool {
    let p = edges(pred);
    let g = edges(gt);
    [0usize, 2].iter().all(|&o| {
        p[o..o + 2]
            .iter()
            .all(|a| g[o..o + 2].iter().all(|b| (a - b).abs() > gap))
    })
}

/// Draws `n` kink-free CIoU pairs with centers in `[0, 512]` and extents in
/// `[1, 512]`.
pub fn draw_box_pairs(n: usize, seed: u64) -> Vec<(CenterBox, CenterBox)> {
    let mut rng = rng::stream(seed, "gradcheck/ciou");
    let mut out = Vec::with_capacity(n);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        CenterBox::new(
            rng.gen_range(0.0..COORD_RANGE),
            rng.gen_range(0.0..COORD_RANGE),
            rng.gen_range(SIZE_MIN..COORD_RANGE),
            rng.gen_range(SIZE_MIN..COORD_RANGE),
        )
        .expect("sampled extents are positive")
    };
    while out.len() < n {
        let pred = draw(&mut rng);
        let gt = draw(&mut rng);
        let step = CIOU_REL_STEP * pred.w().min(pred.h());
        if clear_of_kinks(&pred, &gt, 4.0 * step) {
            out.push((pred, gt));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FocalDraw {
    pub y_prime: f64,
    pub positive: bool,
    pub params: FocalParams,
}

/// Probabilities in `[0.01, 0.99]`, random branch, `alpha` in `[0.05, 0.95]`,
/// `beta` in `[0, 4]`.
pub fn draw_focal_cases(n: usize, seed: u64) -> Vec<FocalDraw> {
    let mut rng = rng::stream(seed, "gradcheck/focal");
    (0..n)
        .map(|_| FocalDraw {
            y_prime: rng.gen_range(0.01..0.99),
            positive: rng.gen_bool(0.5),
            params: FocalParams::new(rng.gen_range(0.05..0.95), rng.gen_range(0.0..4.0))
                .expect("sampled focal parameters are admissible"),
        })
        .collect()
}

pub fn losscheck(samples: usize, seed: u64) -> Result<GradCheckReport> {
    losscheck_with(samples, seed, &|p, g| ciou_loss_gradient(p, g).as_array(), &focal_loss_gradient)
}

/// As [`losscheck`] but with caller-supplied analytic gradients, so a
/// deliberately broken gradient can be shown to fail.
pub fn losscheck_with(
    samples: usize,
    seed: u64,
    ciou_grad: &CiouGradFn,
    focal_grad: &FocalGradFn,
) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::invalid("losscheck needs at least one sample"));
    }
    let pairs = draw_box_pairs(samples, seed);
    let focal = draw_focal_cases(samples, seed);

    let ciou_errs = exec::map(&pairs, |(p, g)| ciou_instance_error(p, g, ciou_grad));
    let focal_errs = exec::map(&focal, |d| {
        focal_instance_error(d.y_prime, d.positive, d.params, focal_grad)
    });
    let max_of = |errs: Vec<Result<f64>>| -> Result<f64> {
        errs.into_iter()
            .try_fold(0.0_f64, |acc, e| e.map(|e| if e.is_nan() { f64::INFINITY } else { acc.max(e) }))
    };
    let max_rel_err_ciou = max_of(ciou_errs)?;
    let max_rel_err_focal = max_of(focal_errs)?;
    Ok(GradCheckReport {
        samples,
        seed,
        max_rel_err_ciou,
        max_rel_err_focal,
        tolerance: TOLERANCE,
        pass: max_rel_err_ciou < TOLERANCE && max_rel_err_focal < TOLERANCE,
    })
}
