//! Anchor design: K-means over ground-truth box shapes with the `1 - IoU`
//! distance, scored by the Avg-IoU objective.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::exec;
use crate::numeric::{mean, median, stable_sum};

/// Width-height pair of a box placed at a common origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct Shape {
    w: f64,
    h: f64,
}

/// A cluster center.
pub type AnchorShape = Shape;
/// A ground-truth box extent.
pub type ShapeSample = Shape;

impl TryFrom<(f64, f64)> for Shape {
    type Error = Error;
    fn try_from((w, h): (f64, f64)) -> Result<Self> {
        Shape::new(w, h)
    }
}

impl From<Shape> for (f64, f64) {
    fn from(s: Shape) -> Self {
        (s.w, s.h)
    }
}

impl Shape {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::invalid(format!(
                "shape extents must be positive, got ({w}, {h})"
            )));
        }
        Ok(Self { w, h })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Shape::new(self.w * s, self.h * s)
    }
}

/// IoU of two shapes sharing a corner.
pub fn shape_iou(a: &Shape, b: &Shape) -> f64 {
    let overlap = a.w.min(b.w) * a.h.min(b.h);
    overlap / (a.area() + b.area() - overlap)
}

/// Index and IoU of the best-matching center; ties go to the lower index.
fn best_center(sample: &Shape, centers: &[Shape]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let v = shape_iou(sample, c);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Mean over samples of the IoU with their best anchor.
pub fn avg_iou_objective(samples: &[Shape], anchors: &[Shape]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("avg iou needs at least one sample"));
    }
    if anchors.is_empty() {
        return Err(Error::invalid("avg iou needs at least one anchor"));
    }
    let best = exec::map(samples, |s| best_center(s, anchors).1);
    Ok(stable_sum(best) / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CenterUpdate {
    /// Component-wise median of member widths and heights.
    #[default]
    Median,
    /// Component-wise mean, kept for comparison.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    /// Index (modulo the sample count) of the first seeding center.
    pub seed: u64,
    pub max_iter: usize,
    pub center_update: CenterUpdate,
    /// Number of seeding starts tried (`seed`, `seed + 1`, ...); the best
    /// Avg-IoU wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            max_iter: 300,
            center_update: CenterUpdate::Median,
            restarts: 3,
        }
    }
}

/// Clustered anchors, sorted by area ascending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSet {
    pub k: usize,
    pub shapes: Vec<Shape>,
    pub avg_iou: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sort_by_area(shapes: &mut [Shape]) {
    shapes.sort_by(|a, b| {
        a.area()
            .total_cmp(&b.area())
            .then(a.w.total_cmp(&b.w))
            .then(a.h.total_cmp(&b.h))
    });
}

/// Farthest-point seeding under `1 - IoU`, starting from sample
/// `seed % len`. Later centers maximize the distance to the nearest chosen
/// center; ties go to the lower sample index.
pub fn farthest_point_init(samples: &[Shape], k: usize, seed: u64) -> Result<Vec<Shape>> {
    validate(samples, k)?;
    let first = (seed % samples.len() as u64) as usize;
    let mut centers = vec![samples[first]];
    let mut nearest = exec::map(samples, |s| 1.0 - shape_iou(s, &samples[first]));
    while centers.len() < k {
        let idx = argmax(&nearest);
        let c = samples[idx];
        centers.push(c);
        let dist = exec::map(samples, |s| 1.0 - shape_iou(s, &c));
        for (n, d) in nearest.iter_mut().zip(dist) {
            *n = n.min(d);
        }
    }
    Ok(centers)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.total_cmp(&values[best]) == Ordering::Greater {
            best = i;
        }
    }
    best
}

fn validate(samples: &[Shape], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if samples.len() < k {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of samples ({})",
            samples.len()
        )));
    }
    Ok(())
}

/// Lloyd iteration with `1 - IoU` as the distance.
///
/// Each round assigns every sample to its max-IoU center and stops once no
/// assignment changes; otherwise centers move to the member median (or mean).
/// An empty cluster is re-seeded with the sample farthest from its own
/// center, taking samples in descending distance (ties by index).
///
/// `cfg.restarts` runs are seeded from start indices `seed, seed + 1, ...`
/// and the highest Avg-IoU is returned (earliest start on ties). Sets of at
/// most [`POLISH_MAX_SAMPLES`] samples are additionally polished, since
/// median centers of tiny clusters are far from IoU-optimal.
pub fn kmeans_anchors(samples: &[Shape], cfg: &KMeansConfig) -> Result<AnchorSet> {
    validate(samples, cfg.k)?;
    let starts = cfg.restarts.clamp(1, samples.len());
    let mut best: Option<AnchorSet> = None;
    for r in 0..starts as u64 {
        let init = farthest_point_init(samples, cfg.k, cfg.seed.wrapping_add(r))?;
        let run = kmeans_from(samples, init, cfg)?;
        if best.as_ref().map_or(true, |b| run.avg_iou > b.avg_iou) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Lloyd iteration from explicit starting centers (`cfg.k` is ignored in
/// favour of `init.len()`). Falls back to the starting centers if they
/// score higher than where the iteration ends.
pub fn kmeans_from(samples: &[Shape], init: Vec<Shape>, cfg: &KMeansConfig) -> Result<AnchorSet> {
    validate(samples, init.len())?;
    let k = init.len();
    let init_score = score(samples, &init);
    let mut centers = init.clone();
    let mut assignment: Vec<usize> = vec![usize::MAX; samples.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iter {
        iterations += 1;
        let next = exec::map(samples, |s| best_center(s, &centers));
        let changed = next
            .iter()
            .zip(&assignment)
            .filter(|((c, _), prev)| c != *prev)
            .count();
        for (slot, (c, _)) in assignment.iter_mut().zip(&next) {
            *slot = *c;
        }
        if changed == 0 {
            converged = true;
            break;
        }
        centers = update_centers(samples, &assignment, &next, &centers, cfg.center_update);
    }

    if samples.len() <= POLISH_MAX_SAMPLES {
        centers = polish_centers(samples, centers);
    }
    if init_score > score(samples, &centers) {
        centers = init;
    }
    sort_by_area(&mut centers);
    let avg_iou = avg_iou_objective(samples, &centers)?;
    Ok(AnchorSet {
        k,
        shapes: centers,
        avg_iou,
        iterations,
        converged,
    })
}

/// Sample count up to which the clustered centers are polished by
/// coordinate ascent on the Avg-IoU objective. The candidate grid grows
/// quadratically with the sample count.
pub const POLISH_MAX_SAMPLES: usize = 64;
const POLISH_MAX_PASSES: usize = 100;

fn score(samples: &[Shape], centers: &[Shape]) -> f64 {
    stable_sum(samples.iter().map(|s| best_center(s, centers).1)) / samples.len() as f64
}

/// Coordinate ascent on the Avg-IoU objective: each center in turn moves to
/// the best `(w, h)` drawn from the observed sample widths and heights.
fn polish_centers(samples: &[Shape], mut centers: Vec<Shape>) -> Vec<Shape> {
    let mut ws: Vec<f64> = samples.iter().map(|s| s.w).collect();
    let mut hs: Vec<f64> = samples.iter().map(|s| s.h).collect();
    ws.sort_by(f64::total_cmp);
    ws.dedup();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    let mut best = score(samples, &centers);
    for _ in 0..POLISH_MAX_PASSES {
        let mut improved = false;
        for j in 0..centers.len() {
            let keep = centers[j];
            let mut pick = keep;
            for &w in &ws {
                for &h in &hs {
                    centers[j] = Shape { w, h };
                    let v = score(samples, &centers);
                    if v > best {
                        best = v;
                        pick = centers[j];
                        improved = true;
                    }
                }
            }
            centers[j] = pick;
        }
        if !improved {
            break;
        }
    }
    centers
}

fn update_centers(
    samples: &[Shape],
    assignment: &[usize],
    best: &[(usize, f64)],
    old: &[Shape],
    rule: CenterUpdate,
) -> Vec<Shape> {
    let k = old.len();
    let mut ws: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut hs: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (s, &c) in samples.iter().zip(assignment) {
        ws[c].push(s.w);
        hs[c].push(s.h);
    }

    // Farthest samples first, for re-seeding empty clusters.
    let mut far: Vec<usize> = (0..samples.len()).collect();
    far.sort_by(|&a, &b| best[a].1.total_cmp(&best[b].1).then(a.cmp(&b)));
    let mut far = far.into_iter();

    (0..k)
        .map(|c| {
            let center = match rule {
                CenterUpdate::Median => median(&mut ws[c]).zip(median(&mut hs[c])),
                CenterUpdate::Mean => mean(&ws[c]).zip(mean(&hs[c])),
            };
            match center {
                Some((w, h)) => Shape { w, h },
                None => far.next().map(|i| samples[i]).unwrap_or(old[c]),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub avg_iou: f64,
}

/// Avg-IoU as a function of the anchor count.
///
/// Each `k` runs a fresh clustering and a warm start from the previous
/// (smaller) result plus the sample farthest from it; the better of the two
/// is kept.
pub fn anchor_count_sweep(
    samples: &[Shape],
    ks: &[usize],
    base: &KMeansConfig,
) -> Result<Vec<SweepPoint>> {
    if ks.is_empty() {
        return Err(Error::invalid("anchor sweep needs at least one k"));
    }
    let mut order: Vec<usize> = ks.to_vec();
    order.sort_unstable();
    order.dedup();

    let mut prev: Option<AnchorSet> = None;
    let mut results = Vec::with_capacity(order.len());
    for k in order {
        let cfg = KMeansConfig { k, ..*base };
        let mut best = kmeans_anchors(samples, &cfg)?;
        if let Some(p) = prev.as_ref().filter(|p| p.k < k) {
            let warm = kmeans_from(samples, grow(samples, &p.shapes, k), &cfg)?;
            if warm.avg_iou > best.avg_iou {
                best = warm;
            }
        }
        results.push(SweepPoint {
            k,
            avg_iou: best.avg_iou,
        });
        prev = Some(best);
    }
    Ok(results)
}

/// Extends `centers` to `k` shapes by repeated farthest-point picks.
fn grow(samples: &[Shape], centers: &[Shape], k: usize) -> Vec<Shape> {
    let mut out = centers.to_vec();
    let mut nearest = exec::map(samples, |s| 1.0 - best_center(s, &out).1);
    while out.len() < k {
        let c = samples[argmax(&nearest)];
        out.push(c);
        for (n, s) in nearest.iter_mut().zip(samples) {
            *n = n.min(1.0 - shape_iou(s, &c));
        }
    }
    out
}

/// Box extents of every annotated object, in raw annotation pixels and
/// manifest order. Degenerate (zero-width or zero-height) boxes are skipped
/// and counted.
pub fn shape_samples(records: &[ImageRecord]) -> (Vec<Shape>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for o in records.iter().flat_map(|r| &r.objects) {
        match Shape::new(o.bbox.width(), o.bbox.height()) {
            Ok(s) => out.push(s),
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

/// The nine LogoDet-3K anchor centers `(w, h)` reported with Logo-Yolo.
pub const LOGODET3K_PUBLISHED_ANCHORS: [(f64, f64); 9] = [
    (53.0, 35.0),
    (257.0, 151.0),
    (75.0, 104.0),
    (271.0, 248.0),
    (159.0, 118.0),
    (134.0, 220.0),
    (270.0, 73.0),
    (115.0, 46.0),
    (193.0, 58.0),
];

pub fn published_anchors() -> Vec<Shape> {
    LOGODET3K_PUBLISHED_ANCHORS
        .iter()
        .map(|&(w, h)| Shape { w, h })
        .collect()
}
