//! VOC-style detection evaluation.
//!
//! Detections of one class are ranked by score (descending, ties in input
//! order). Within each image a detection takes the unmatched ground truth
//! of highest IoU provided that IoU is at least the threshold; otherwise it
//! is a false positive. AP is the area under the monotone precision
//! envelope; mAP averages AP over classes that have ground truth.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{iou, BBox};

/// A scored box within one image and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    score: f64,
    bbox: BBox,
}

/// One prediction. Serialized flat as
/// `{image_id, category, score, xmin, ymin, xmax, ymax}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLine", into = "RawLine")]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    score: f64,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct RawLine {
    image_id: String,
    category: String,
    score: f64,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl TryFrom<RawLine> for Detection {
    type Error = Error;
    fn try_from(r: RawLine) -> Result<Self> {
        Detection::new(r.image_id, r.category, r.score, BBox::new(r.xmin, r.ymin, r.xmax, r.ymax)?)
    }
}

impl From<Detection> for RawLine {
    fn from(d: Detection) -> Self {
        RawLine {
            image_id: d.image_id,
            category: d.category,
            score: d.score,
            xmin: d.bbox.xmin(),
            ymin: d.bbox.ymin(),
            xmax: d.bbox.xmax(),
            ymax: d.bbox.ymax(),
        }
    }
}

fn check_score(score: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::invalid(format!("detection score must be in [0,1], got {score}")));
    }
    Ok(())
}

impl DetectionBox {
    pub fn new(score: f64, bbox: BBox) -> Result<Self> {
        check_score(score)?;
        Ok(Self { score, bbox })
    }
    pub fn score(&self) -> f64 {
        self.score
    }
    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }
}

impl Detection {
    pub fn new(image_id: impl Into<String>, category: impl Into<String>, score: f64, bbox: BBox) -> Result<Self> {
        check_score(score)?;
        Ok(Self {
            image_id: image_id.into(),
            category: category.into(),
            score,
            bbox,
        })
    }
    pub fn score(&self) -> f64 {
        self.score
    }
    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }
}

pub fn detections_from_jsonl(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("detections line {}", i + 1),
                source,
            })
        })
        .collect()
}

pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detections serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    /// Index into the detections passed in.
    pub detection: usize,
    pub matched_gt: Option<usize>,
}

impl MatchResult {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

/// Indices sorted by score descending; equal scores keep input order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Marks and returns the unmatched ground truth of highest IoU with `b`, if
/// that IoU reaches the threshold. Equal IoUs go to the lower index.
fn claim_best(b: &BBox, gts: &[BBox], taken: &mut [bool], thr: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] {
            continue;
        }
        let o = iou(b, gt);
        if o >= thr && best.map_or(true, |(_, bo)| o > bo) {
            best = Some((g, o));
        }
    }
    let g = best?.0;
    taken[g] = true;
    Some(g)
}

/// Greedy one-to-one matching for a single image and class. Results come
/// back in ranked order.
pub fn match_detections(dets: &[DetectionBox], gts: &[BBox], iou_threshold: f64) -> Vec<MatchResult> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut taken = vec![false; gts.len()];
    rank_by_score(&scores)
        .into_iter()
        .map(|i| MatchResult {
            detection: i,
            matched_gt: claim_best(&dets[i].bbox, gts, &mut taken, iou_threshold),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the full precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

/// Cumulative precision/recall after each ranked detection.
pub fn pr_curve(flags: &[bool], scores: &[f64], num_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&hit, &s))| {
            tp += usize::from(hit);
            PrPoint {
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
                precision: tp as f64 / (i + 1) as f64,
                score_threshold: s,
            }
        })
        .collect()
}

/// AP from TP/FP flags in ranked order. Zero when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize, method: ApMethod) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(flags, &vec![0.0; flags.len()], num_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match method {
        ApMethod::AllPoints => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (p, env) in curve.iter().zip(&envelope) {
                if p.recall > prev_recall {
                    ap += (p.recall - prev_recall) * env;
                    prev_recall = p.recall;
                }
            }
            ap
        }
        ApMethod::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                // envelope is non-increasing, so the first point reaching r holds the max
                sum += curve
                    .iter()
                    .zip(&envelope)
                    .find(|(p, _)| p.recall >= r)
                    .map_or(0.0, |(_, e)| *e);
            }
            sum / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap_method: ApMethod,
    pub map: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub num_gt: BTreeMap<String, usize>,
    pub pr_curves: BTreeMap<String, Vec<PrPoint>>,
    /// Categories that only appear in detections, with their false-positive
    /// counts. Not part of the mAP.
    pub excluded_classes: BTreeMap<String, usize>,
}

impl EvalReport {
    /// `category,rank,score_threshold,recall,precision` rows.
    pub fn pr_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Internal(format!("csv: {e}"));
        w.write_record(["category", "rank", "score_threshold", "recall", "precision"])
            .map_err(to_err)?;
        for (cat, points) in &self.pr_curves {
            for (i, p) in points.iter().enumerate() {
                w.write_record([
                    cat.clone(),
                    (i + 1).to_string(),
                    p.score_threshold.to_string(),
                    p.recall.to_string(),
                    p.precision.to_string(),
                ])
                .map_err(to_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("IoU threshold must be in (0,1), got {t}")));
    }
    Ok(())
}

struct GroundTruth<'a> {
    /// (image, category) → boxes
    boxes: HashMap<(&'a str, &'a str), Vec<BBox>>,
    num_gt: BTreeMap<&'a str, usize>,
}

fn index_ground_truth(gt: &[ImageRecord]) -> Result<GroundTruth<'_>> {
    let mut boxes: HashMap<(&str, &str), Vec<BBox>> = HashMap::new();
    let mut num_gt: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for r in gt {
        if !seen.insert(r.path.as_str()) {
            return Err(Error::invalid(format!("duplicate image `{}` in ground truth", r.path)));
        }
        for o in &r.objects {
            boxes.entry((r.path.as_str(), o.category.as_str())).or_default().push(o.bbox);
            *num_gt.entry(o.category.as_str()).or_default() += 1;
        }
    }
    Ok(GroundTruth { boxes, num_gt })
}

struct ClassResult {
    flags: Vec<bool>,
    scores: Vec<f64>,
}

fn evaluate_class(dets: &[&Detection], gt: &GroundTruth<'_>, category: &str, thr: f64) -> ClassResult {
    // dets arrive in input order; ranking is global, matching per image
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = rank_by_score(&scores);
    let mut taken: HashMap<&str, Vec<bool>> = HashMap::new();
    let empty: Vec<BBox> = Vec::new();
    let mut flags = Vec::with_capacity(order.len());
    for &i in &order {
        let d = dets[i];
        let gts = gt.boxes.get(&(d.image_id.as_str(), category)).unwrap_or(&empty);
        let used = taken.entry(d.image_id.as_str()).or_insert_with(|| vec![false; gts.len()]);
        flags.push(claim_best(&d.bbox, gts, used, thr).is_some());
    }
    ClassResult {
        flags,
        scores: order.iter().map(|&i| scores[i]).collect(),
    }
}

pub fn evaluate(dets: &[Detection], gt: &[ImageRecord], iou_threshold: f64) -> Result<EvalReport> {
    evaluate_with(dets, gt, iou_threshold, ApMethod::AllPoints)
}

pub fn evaluate_with(
    dets: &[Detection],
    gt: &[ImageRecord],
    iou_threshold: f64,
    method: ApMethod,
) -> Result<EvalReport> {
    check_threshold(iou_threshold)?;
    let index = index_ground_truth(gt)?;
    let images: std::collections::HashSet<&str> = gt.iter().map(|r| r.path.as_str()).collect();

    let mut by_class: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        if !images.contains(d.image_id.as_str()) {
            return Err(Error::UnknownImage(d.image_id.clone()));
        }
        by_class.entry(d.category.as_str()).or_default().push(d);
    }

    let classes: Vec<&str> = index.num_gt.keys().copied().collect();
    let no_dets: Vec<&Detection> = Vec::new();
    let results = exec::map(&classes, |c| {
        evaluate_class(by_class.get(c).unwrap_or(&no_dets), &index, c, iou_threshold)
    });

    let mut per_class_ap = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    let mut num_gt = BTreeMap::new();
    for (c, r) in classes.iter().zip(results) {
        let n = index.num_gt[c];
        per_class_ap.insert(c.to_string(), average_precision(&r.flags, n, method));
        pr_curves.insert(c.to_string(), pr_curve(&r.flags, &r.scores, n));
        num_gt.insert(c.to_string(), n);
    }
    let excluded_classes = by_class
        .iter()
        .filter(|(c, _)| !index.num_gt.contains_key(*c))
        .map(|(c, d)| (c.to_string(), d.len()))
        .collect();
    let aps: Vec<f64> = per_class_ap.values().copied().collect();
    let map = crate::numeric::mean(&aps).unwrap_or(0.0);

    Ok(EvalReport {
        iou_threshold,
        ap_method: method,
        map,
        per_class_ap,
        num_gt,
        pr_curves,
        excluded_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub iou_threshold: f64,
    pub map: f64,
}

pub fn threshold_sweep(dets: &[Detection], gt: &[ImageRecord], thresholds: &[f64]) -> Result<Vec<SweepPoint>> {
    threshold_sweep_with(dets, gt, thresholds, ApMethod::AllPoints)
}

pub fn threshold_sweep_with(
    dets: &[Detection],
    gt: &[ImageRecord],
    thresholds: &[f64],
    method: ApMethod,
) -> Result<Vec<SweepPoint>> {
    if thresholds.is_empty() {
        return Err(Error::invalid("empty threshold list"));
    }
    thresholds
        .iter()
        .map(|&t| {
            evaluate_with(dets, gt, t, method).map(|r| SweepPoint {
                iou_threshold: t,
                map: r.map,
            })
        })
        .collect()
}

/// Parses `start:stop:step` with both endpoints included. Values are rounded
/// to 1e-9 so that `0.5:0.8:0.05` yields exactly 0.5, 0.55, ..., 0.8.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::invalid(format!("sweep must be start:stop:step, got `{spec}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    if n > 100_000 {
        return Err(Error::invalid(format!("sweep `{spec}` has too many points")));
    }
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
