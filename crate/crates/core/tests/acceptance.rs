//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Criteria 7 and 8 need the released LogoDet-3K tree (`<super-class>/
//! <category>/*.xml` plus images) under `$LOGODET3K_DIR`; without it they
//! are skipped.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use logodet::anchors::{self, KMeansConfig, Shape};
use logodet::annotations::{self, FilterConfig, ImageRecord, LabeledObject, PerceptualHash, Vocabulary};
use logodet::eval::{self, Detection};
use logodet::geometry::{ciou_loss, BBox, CenterBox};
use logodet::losses::{focal_loss, FocalParams};
use logodet::{exec, gradcheck, stats};
use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Check {
    let (report, took) = timed(|| gradcheck::losscheck(1000, 7));
    let r = report.map_err(|e| e.to_string())?;
    ensure(r.max_rel_err_ciou < 1e-4, || format!("CIoU max rel err {:e}", r.max_rel_err_ciou))?;
    ensure(r.max_rel_err_focal < 1e-4, || format!("Focal max rel err {:e}", r.max_rel_err_focal))?;
    ensure(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!(
        "1000 instances, max rel err ciou {:.2e} focal {:.2e}, {:.2}s",
        r.max_rel_err_ciou,
        r.max_rel_err_focal,
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn random_box(rng: &mut impl Rng) -> CenterBox {
    CenterBox::new(
        rng.gen_range(-500.0..500.0),
        rng.gen_range(-500.0..500.0),
        rng.gen_range(0.01..400.0),
        rng.gen_range(0.01..400.0),
    )
    .unwrap()
}

fn criterion_2() -> Check {
    let mut rng = logodet::rng::stream(2, "acceptance/identities");
    let mut worst_self: f64 = 0.0;
    let mut worst_focal: f64 = 0.0;
    for _ in 0..100 {
        let b = random_box(&mut rng);
        worst_self = worst_self.max(ciou_loss(&b, &b).abs());
        // the probability clamp leaves alpha * eps^beta * -ln(1 - eps) at y' = 1,
        // which is under 1e-9 only for beta above ~0.3; the usual setting is beta = 2
        let params = FocalParams::new(rng.gen_range(0.01..0.99), rng.gen_range(0.5..4.0)).unwrap();
        worst_focal = worst_focal.max(focal_loss(1.0, true, params).unwrap().abs());
    }
    ensure(worst_self <= 1e-9, || format!("ciou(x,x) reached {worst_self:e}"))?;
    ensure(worst_focal <= 1e-9, || format!("focal(y'=1) reached {worst_focal:e}"))?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let l = ciou_loss(&random_box(&mut rng), &random_box(&mut rng));
        ensure(l.is_finite(), || "non-finite loss".into())?;
        lo = lo.min(l);
        hi = hi.max(l);
    }
    ensure(lo >= 0.0 && hi <= 3.0, || format!("loss range [{lo}, {hi}]"))?;
    Ok(format!(
        "max |ciou(x,x)| {worst_self:.1e}, max focal(1) {worst_focal:.1e}; 1e5 pairs in [{lo:.3}, {hi:.3}]"
    ))
}

// ---------------------------------------------------------------- 3

fn iou_wh(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Best achievable Σ IoU of a single free center against `members`:
/// every (observed width, observed height) pair, each refined by a
/// multiplicative pattern search.
fn best_single_center(members: &[(f64, f64)]) -> f64 {
    let total = |c: (f64, f64)| members.iter().map(|&m| iou_wh(m, c)).sum::<f64>();
    let mut best = 0.0f64;
    for &(w, _) in members {
        for &(_, h) in members {
            let mut c = (w, h);
            let mut f = total(c);
            let mut step = 0.25;
            while step > 1e-7 {
                let mut moved = false;
                for (dw, dh) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
                    let cand = (c.0 * (1.0 + dw * step), c.1 * (1.0 + dh * step));
                    let fc = total(cand);
                    if fc > f + 1e-15 {
                        c = cand;
                        f = fc;
                        moved = true;
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
            best = best.max(f);
        }
    }
    best
}

/// Optimal Avg-IoU with at most `k` free centers: best split of the sample
/// set into ≤ k groups, each scored by its best single center.
fn brute_force_optimum(samples: &[(f64, f64)], k: usize) -> f64 {
    let n = samples.len();
    let full = (1usize << n) - 1;
    let group: Vec<f64> = (0..=full)
        .map(|mask| {
            let m: Vec<(f64, f64)> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| samples[i]).collect();
            if m.is_empty() { 0.0 } else { best_single_center(&m) }
        })
        .collect();
    // best[j][mask]: best total over `mask` with at most j groups
    let mut best = vec![vec![f64::NEG_INFINITY; full + 1]; k + 1];
    best[0][0] = 0.0;
    for j in 1..=k {
        for mask in 0..=full {
            let mut v = best[j - 1][mask];
            if mask != 0 {
                let low = mask & mask.wrapping_neg();
                let mut sub = mask;
                while sub != 0 {
                    if sub & low != 0 {
                        v = v.max(group[sub] + best[j - 1][mask ^ sub]);
                    }
                    sub = (sub - 1) & mask;
                }
            } else {
                v = 0.0;
            }
            best[j][mask] = v;
        }
    }
    best[k][full] / n as f64
}

fn criterion_3() -> Check {
    let mut rng = logodet::rng::stream(3, "acceptance/kmeans");
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_consistency = 0.0f64;
    let cases = 60;
    for case in 0..cases {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=3usize.min(n));
        let mut samples: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(5.0f64..300.0).round(), rng.gen_range(5.0f64..300.0).round()))
            .collect();
        if n > 2 && rng.gen_bool(0.3) {
            samples[1] = samples[0];
        }
        let shapes: Vec<Shape> = samples.iter().map(|&(w, h)| Shape::new(w, h).unwrap()).collect();
        let cfg = KMeansConfig { seed: case, ..KMeansConfig::new(k) };
        let set = anchors::kmeans_anchors(&shapes, &cfg).map_err(|e| e.to_string())?;
        let optimum = brute_force_optimum(&samples, k);
        let gap = optimum - set.avg_iou;
        worst_gap = worst_gap.max(gap);
        ensure(gap <= 0.02, || format!("case {case}: avg_iou {} vs optimum {optimum} for {samples:?}, k={k}", set.avg_iou))?;
        let recomputed = anchors::avg_iou_objective(&shapes, &set.shapes).map_err(|e| e.to_string())?;
        let independent = samples
            .iter()
            .map(|&s| set.shapes.iter().map(|c| iou_wh(s, (c.w(), c.h()))).fold(0.0, f64::max))
            .sum::<f64>()
            / n as f64;
        worst_consistency = worst_consistency
            .max((recomputed - set.avg_iou).abs())
            .max((independent - set.avg_iou).abs());
    }
    ensure(worst_consistency <= 1e-12, || format!("self-consistency off by {worst_consistency:e}"))?;
    Ok(format!(
        "{cases} cases, worst shortfall vs optimum {worst_gap:.4}, self-consistency {worst_consistency:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let mut rng = logodet::rng::stream(4, "acceptance/mixture");
    let modes = [(40.0, 30.0), (120.0, 200.0), (300.0, 90.0)];
    let samples: Vec<Shape> = (0..1000)
        .map(|i| {
            let (w, h) = modes[i % 3];
            Shape::new(w * rng.gen_range(0.98..1.02), h * rng.gen_range(0.98..1.02)).unwrap()
        })
        .collect();
    let ks: Vec<usize> = (1..=10).collect();
    let (curve, took) = timed(|| anchors::anchor_count_sweep(&samples, &ks, &KMeansConfig::new(1)));
    let curve = curve.map_err(|e| e.to_string())?;
    for w in curve.windows(2) {
        ensure(w[1].avg_iou >= w[0].avg_iou, || {
            format!("avg_iou drops from k={} ({}) to k={} ({})", w[0].k, w[0].avg_iou, w[1].k, w[1].avg_iou)
        })?;
    }
    let at3 = curve[2].avg_iou;
    ensure(at3 >= 0.95, || format!("avg_iou(3) = {at3}"))?;
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!(
        "avg_iou k=1..10 non-decreasing, k=1 {:.4}, k=3 {at3:.4}, k=10 {:.4}, {:.2}s",
        curve[0].avg_iou,
        curve[9].avg_iou,
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 5

struct EvalFixture {
    gt: Vec<ImageRecord>,
    dets: Vec<Detection>,
}

fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax().min(b.xmax()) - a.xmin().max(b.xmin())).max(0.0);
    let ih = (a.ymax().min(b.ymax()) - a.ymin().max(b.ymin())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// TP/FP flags of one class in ranked order, matched from scratch.
fn oracle_flags(f: &EvalFixture, class: &str, thr: f64) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, &Detection)> =
        f.dets.iter().enumerate().filter(|(_, d)| d.category == class).collect();
    // score descending; equal scores by input position
    dets.sort_by(|a, b| b.1.score().partial_cmp(&a.1.score()).unwrap().then(a.0.cmp(&b.0)));
    let mut used: BTreeMap<(String, usize), bool> = BTreeMap::new();
    let mut num_gt = 0;
    for r in &f.gt {
        num_gt += r.objects.iter().filter(|o| o.category == class).count();
    }
    let flags = dets
        .iter()
        .map(|(_, d)| {
            let img = f.gt.iter().find(|r| r.path == d.image_id).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (gi, o) in img.objects.iter().enumerate() {
                if o.category != class || used.contains_key(&(img.path.clone(), gi)) {
                    continue;
                }
                let v = iou_box(d.bbox(), &o.bbox);
                if v >= thr && best.map_or(true, |b| v > b.1) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used.insert((img.path.clone(), gi), true);
            }
            best.is_some()
        })
        .collect();
    (flags, num_gt)
}

/// Envelope AP as a sum over recall levels k/num_gt of the best precision
/// at any rank whose recall reaches that level.
fn oracle_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut total = 0.0;
    for level in 1..=num_gt {
        let mut best: f64 = 0.0;
        let mut tp = 0;
        for (i, &f) in flags.iter().enumerate() {
            tp += f as usize;
            if tp >= level {
                best = best.max(tp as f64 / (i + 1) as f64);
            }
        }
        total += best;
    }
    total / num_gt as f64
}

fn gt_record(path: &str, objects: Vec<(&str, BBox)>) -> ImageRecord {
    ImageRecord {
        path: path.into(),
        width: 640,
        height: 480,
        objects: objects
            .into_iter()
            .map(|(c, b)| LabeledObject { category: c.into(), bbox: b })
            .collect(),
        content_digest: None,
        perceptual_digest: None,
    }
}

fn random_eval_fixture(rng: &mut impl Rng) -> EvalFixture {
    let classes = ["a", "b", "c"];
    let n_img = rng.gen_range(1..=3);
    let mut gt = Vec::new();
    for i in 0..n_img {
        let objs = (0..rng.gen_range(1..=3))
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
                let (w, h) = (rng.gen_range(10.0..80.0), rng.gen_range(10.0..80.0));
                (classes[rng.gen_range(0..3)], common::bbox(x, y, x + w, y + h))
            })
            .collect();
        gt.push(gt_record(&format!("img{i}"), objs));
    }
    let all: Vec<(String, &str, BBox)> = gt
        .iter()
        .flat_map(|r| r.objects.iter().map(move |o| (r.path.clone(), o.category.as_str(), o.bbox)))
        .collect();
    let mut dets = Vec::new();
    for _ in 0..rng.gen_range(0..=6) {
        let score = (rng.gen_range(0..8) as f64) / 8.0; // deliberate ties
        if rng.gen_bool(0.75) {
            let (img, cat, b) = &all[rng.gen_range(0..all.len())];
            let s = rng.gen_range(0.0..0.5) * b.width().min(b.height());
            let shifted = common::bbox(b.xmin() + s, b.ymin(), b.xmax() + s, b.ymax());
            let cat = if rng.gen_bool(0.15) { classes[rng.gen_range(0..3)] } else { cat };
            dets.push(Detection::new(img.clone(), cat, score, shifted).unwrap());
        } else {
            let img = &gt[rng.gen_range(0..gt.len())].path;
            let x = rng.gen_range(0.0..250.0);
            dets.push(Detection::new(img.clone(), classes[rng.gen_range(0..3)], score, common::bbox(x, x, x + 30.0, x + 30.0)).unwrap());
        }
    }
    EvalFixture { gt, dets }
}

fn criterion_5() -> Check {
    let g = common::bbox(0.0, 0.0, 10.0, 10.0);
    let miss = common::bbox(50.0, 50.0, 60.0, 60.0);
    let tp_fp = EvalFixture {
        gt: vec![gt_record("i", vec![("a", g)])],
        dets: vec![
            Detection::new("i", "a", 0.9, g).unwrap(),
            Detection::new("i", "a", 0.8, miss).unwrap(),
        ],
    };
    let fp_tp = EvalFixture {
        gt: vec![gt_record("i", vec![("a", g)])],
        dets: vec![
            Detection::new("i", "a", 0.9, miss).unwrap(),
            Detection::new("i", "a", 0.8, g).unwrap(),
        ],
    };
    let ap = |f: &EvalFixture| eval::evaluate(&f.dets, &f.gt, 0.5).map(|r| r.per_class_ap["a"]);
    let (a1, a2) = (ap(&tp_fp).map_err(|e| e.to_string())?, ap(&fp_tp).map_err(|e| e.to_string())?);
    ensure(a1 == 1.0 && a2 == 0.5, || format!("[TP,FP] → {a1}, [FP,TP] → {a2}"))?;

    let mut rng = logodet::rng::stream(5, "acceptance/eval");
    let mut fixtures = vec![tp_fp, fp_tp];
    fixtures.extend((0..30).map(|_| random_eval_fixture(&mut rng)));
    let sweep = eval::parse_sweep("0.50:0.80:0.05").map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut classes_checked = 0;
    for (fi, f) in fixtures.iter().enumerate() {
        ensure(f.dets.len() <= 6, || "fixture too large".into())?;
        for &thr in &sweep {
            let r = eval::evaluate(&f.dets, &f.gt, thr).map_err(|e| e.to_string())?;
            for (class, ap) in &r.per_class_ap {
                let (flags, n) = oracle_flags(f, class, thr);
                let expected = oracle_ap(&flags, n);
                worst = worst.max((ap - expected).abs());
                classes_checked += 1;
                ensure((ap - expected).abs() <= 1e-12, || {
                    format!("fixture {fi} class {class} thr {thr}: AP {ap} vs oracle {expected}")
                })?;
            }
        }
        let curve = eval::threshold_sweep(&f.dets, &f.gt, &sweep).map_err(|e| e.to_string())?;
        ensure(curve.len() == 7, || format!("sweep has {} points", curve.len()))?;
        for w in curve.windows(2) {
            ensure(w[1].map <= w[0].map, || format!("fixture {fi}: mAP rises {:?}", curve))?;
        }
    }
    Ok(format!(
        "{} fixtures, {classes_checked} class/threshold APs vs oracle (max diff {worst:.1e}); [TP,FP]=1, [FP,TP]=0.5; sweeps monotone",
        fixtures.len()
    ))
}

// ---------------------------------------------------------------- 6

fn adversarial_fixture() -> (Vec<ImageRecord>, Vec<Option<&'static str>>, Vocabulary) {
    let mut rng = logodet::rng::stream(6, "acceptance/filter");
    // well-separated base hashes
    let mut bases: Vec<u64> = Vec::new();
    while bases.len() < 50 {
        let h: u64 = rng.gen();
        if bases.iter().all(|b| (b ^ h).count_ones() > 16) {
            bases.push(h);
        }
    }
    let flip = |h: u64, bits: &[u32]| bits.iter().fold(h, |acc, b| acc ^ (1u64 << b));
    let logo = || vec![LabeledObject { category: "Oreo".into(), bbox: common::bbox(0.0, 0.0, 10.0, 10.0) }];
    let alien = || vec![LabeledObject { category: "Pepsi".into(), bbox: common::bbox(0.0, 0.0, 10.0, 10.0) }];
    let mixed = || {
        let mut v = logo();
        v.extend(alien());
        v
    };

    struct Spec {
        w: u32,
        h: u32,
        objects: Vec<LabeledObject>,
        content: String,
        ph: u64,
        expect: Option<&'static str>,
    }
    let own = |i: usize| format!("{i:064x}");
    let mut s: Vec<Spec> = Vec::new();
    let mut add = |w, h, objects, content: String, ph, expect| s.push(Spec { w, h, objects, content, ph, expect });

    add(300, 300, logo(), own(0), bases[0], None); // 0 smallest admissible size
    add(299, 500, logo(), own(1), bases[1], Some("too_small")); // 1
    add(500, 299, logo(), own(2), bases[2], Some("too_small")); // 2
    add(300, 900, logo(), own(3), bases[3], None); // 3 aspect exactly 3
    add(300, 901, logo(), own(4), bases[4], Some("extreme_aspect")); // 4
    add(1000, 300, logo(), own(5), bases[5], Some("extreme_aspect")); // 5
    add(640, 480, logo(), own(0), bases[6], Some("duplicate")); // 6 same bytes as 0
    add(640, 480, logo(), own(7), flip(bases[0], &[1, 9, 30, 63]), Some("duplicate")); // 7 distance 4
    add(640, 480, logo(), own(8), flip(bases[3], &[2, 3, 4, 5, 6]), None); // 8 distance 5
    add(100, 100, logo(), own(0), bases[0], Some("too_small")); // 9 small beats duplicate
    add(2000, 300, logo(), own(0), bases[0], Some("extreme_aspect")); // 10
    add(640, 480, logo(), own(1), bases[1], None); // 11 copy of a rejected image
    add(640, 480, vec![], own(12), bases[12], Some("no_logo")); // 12
    add(640, 480, vec![], own(12), bases[12], Some("no_logo")); // 13 copy of rejected 12
    add(640, 480, alien(), own(14), bases[14], Some("not_in_vocabulary")); // 14
    add(640, 480, mixed(), own(15), bases[15], Some("not_in_vocabulary")); // 15
    add(640, 480, logo(), own(14), bases[14], None); // 16 copy of rejected 14
    add(640, 480, logo(), own(17), flip(bases[14], &[40]), Some("duplicate")); // 17 near 16
    add(640, 480, vec![], own(0), bases[18], Some("duplicate")); // 18 duplicate beats no_logo
    add(640, 480, alien(), own(19), flip(bases[3], &[0, 1]), Some("duplicate")); // 19 duplicate beats vocabulary
    for i in 20..30 {
        add(300 + 37 * (i as u32 - 20), 400, logo(), own(i), bases[i], None); // 20-29 clean
    }
    add(1, 1, vec![], own(30), bases[30], Some("too_small")); // 30
    add(10, 5000, logo(), own(31), bases[31], Some("too_small")); // 31 small beats aspect
    add(299, 299, alien(), own(32), bases[32], Some("too_small")); // 32
    add(300, 299, logo(), own(33), bases[33], Some("too_small")); // 33
    add(150, 2000, vec![], own(34), bases[34], Some("too_small")); // 34
    add(4000, 1300, logo(), own(35), bases[35], Some("extreme_aspect")); // 35 ratio 3.08
    add(301, 904, logo(), own(36), bases[36], Some("extreme_aspect")); // 36 ratio 3.003
    add(1300, 400, vec![], own(37), bases[37], Some("extreme_aspect")); // 37 beats no_logo
    add(400, 1300, alien(), own(38), bases[38], Some("extreme_aspect")); // 38
    add(900, 5000, logo(), own(0), bases[0], Some("extreme_aspect")); // 39 beats duplicate
    for (j, d) in (40..45).zip(0u32..5) {
        let bits: Vec<u32> = (0..d).map(|b| b * 7).collect();
        add(640, 480, logo(), own(j), flip(bases[20], &bits), Some("duplicate")); // 40-44 distance 0-4
    }
    add(640, 480, logo(), own(45), flip(bases[21], &[0, 1, 2, 3, 4]), None); // 45 distance 5
    add(640, 480, logo(), own(46), flip(bases[21], &[10, 11, 12, 13, 14, 15]), None); // 46 distance 6
    add(640, 480, logo(), own(47), !bases[21], None); // 47 distance 64
    add(200, 200, vec![], own(48), bases[48], Some("too_small")); // 48
    add(640, 480, logo(), own(49), bases[4], None); // 49 same hash as rejected 4

    let mut vocab = Vocabulary::new();
    vocab.insert("Oreo", annotations::SuperClass::Food).unwrap();
    let expect = s.iter().map(|x| x.expect).collect();
    let records = s
        .into_iter()
        .enumerate()
        .map(|(i, x)| ImageRecord {
            path: format!("adv/{i:02}.jpg"),
            width: x.w,
            height: x.h,
            objects: x.objects,
            content_digest: Some(x.content),
            perceptual_digest: Some(PerceptualHash(x.ph)),
        })
        .collect();
    (records, expect, vocab)
}

fn criterion_6() -> Check {
    let (records, expect, vocab) = adversarial_fixture();
    ensure(records.len() == 50, || "fixture size".into())?;
    let cfg = FilterConfig::default();
    let (kept, report) = annotations::apply_filters(records.clone(), &vocab, &cfg).map_err(|e| e.to_string())?;

    let mut want: BTreeMap<&str, usize> = BTreeMap::new();
    for rule in ["too_small", "extreme_aspect", "duplicate", "no_logo", "not_in_vocabulary"] {
        want.insert(rule, expect.iter().filter(|e| **e == Some(rule)).count());
        ensure(want[rule] > 0, || format!("fixture does not exercise {rule}"))?;
    }
    let got = serde_json::to_value(report.rejected_by_rule).unwrap();
    for (rule, n) in &want {
        ensure(got[rule] == *n, || format!("{rule}: got {} want {n}", got[rule]))?;
    }
    let expected_kept: Vec<&str> = records
        .iter()
        .zip(&expect)
        .filter(|(_, e)| e.is_none())
        .map(|(r, _)| r.path.as_str())
        .collect();
    let kept_paths: Vec<&str> = kept.iter().map(|r| r.path.as_str()).collect();
    ensure(kept_paths == expected_kept, || format!("kept {kept_paths:?}\nwant {expected_kept:?}"))?;
    ensure(report.total == 50 && report.kept + report.rejected_by_rule.total() == 50, || {
        format!("report does not sum: {report:?}")
    })?;

    let (again, report2) = annotations::apply_filters(kept.clone(), &vocab, &cfg).map_err(|e| e.to_string())?;
    ensure(again == kept && report2.rejected_by_rule.total() == 0, || "second pass rejected records".into())?;

    // 1 vs N threads, on the fixture and on a corpus large enough to take
    // the parallel path
    let big = common::synthetic_records(3000, 66);
    let big_vocab = common::vocabulary();
    for (recs, v) in [(&records, &vocab), (&big, &big_vocab)] {
        let one = exec::with_threads(1, || annotations::apply_filters(recs.clone(), v, &cfg).unwrap());
        let many = exec::with_threads(8, || annotations::apply_filters(recs.clone(), v, &cfg).unwrap());
        ensure(one == many, || "thread count changed the result".into())?;
    }
    Ok(format!(
        "50 records, kept {}, rejected {:?}; idempotent; 1 vs 8 threads identical",
        report.kept, want
    ))
}

// ---------------------------------------------------------------- 7, 8

fn dataset_dir() -> Option<PathBuf> {
    std::env::var_os("LOGODET3K_DIR").map(PathBuf::from).filter(|p| p.is_dir())
}

fn load_dataset(dir: &Path) -> std::result::Result<(Vec<ImageRecord>, Vocabulary), String> {
    let records = annotations::load_annotation_tree(dir, false).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::from_dataset_tree(dir).map_err(|e| e.to_string())?;
    Ok((records, vocab))
}

fn criterion_7(dir: &Path) -> Check {
    let (result, took) = timed(|| -> std::result::Result<_, String> {
        let (records, vocab) = load_dataset(dir)?;
        stats::compute_stats(&records, &vocab).map_err(|e| e.to_string())
    });
    let s = result?;
    let totals = (s.total_categories, s.total_images, s.total_objects);
    let food = &s.super_classes[0];
    let pct = stats::size_bin_fractions(&s.size_bins).map_err(|e| e.to_string())?;
    let detail = format!(
        "totals {totals:?}, Food ({}, {}, {}), size bins {pct:?}, {:.0}s",
        food.category_count,
        food.image_count,
        food.object_count,
        took.as_secs_f64()
    );
    ensure(totals == (3000, 158_652, 194_261), || format!("totals differ: {detail}"))?;
    ensure((food.category_count, food.image_count, food.object_count) == (932, 53_350, 64_276), || {
        format!("Food row differs: {detail}")
    })?;
    let published = (4.81, 29.79, 65.40);
    ensure(
        (pct.0 - published.0).abs() <= 0.05 && (pct.1 - published.1).abs() <= 0.05 && (pct.2 - published.2).abs() <= 0.05,
        || format!("size bins differ: {detail}"),
    )?;
    ensure(took < Duration::from_secs(600), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_8(dir: &Path) -> Check {
    let (records, _) = load_dataset(dir)?;
    let (samples, skipped) = anchors::shape_samples(&records);
    let set = anchors::kmeans_anchors(&samples, &KMeansConfig::new(9)).map_err(|e| e.to_string())?;
    let published = anchors::avg_iou_objective(&samples, &anchors::published_anchors()).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} samples ({skipped} degenerate skipped): ours {:.4}, published centers {published:.4}",
        samples.len(),
        set.avg_iou
    );
    ensure((set.avg_iou - published).abs() <= 0.03, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = work.path();
    let records = common::synthetic_records(700, 9);
    common::write_manifest(&w.join("raw.jsonl"), &records);
    let vocab = common::write_vocab(w);
    let tree = w.join("tree");
    common::write_dataset_tree(&tree, 12);

    let s = |p: &Path| p.to_str().unwrap().to_string();
    // filtered manifest feeds the later commands
    let filtered = w.join("filtered.jsonl");
    let out = common::run_cli(&["filter", "--input", &s(&w.join("raw.jsonl")), "--vocab", &s(&vocab), "--out", &s(&filtered), "--report-out", &s(&w.join("r.json"))]);
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let kept = annotations::read_manifest(&filtered).map_err(|e| e.to_string())?;
    common::write_detections(&w.join("dets.jsonl"), &common::synthetic_detections(&kept, 9));

    let invocations: Vec<(&str, Vec<String>)> = vec![
        ("filter", vec!["filter".into(), "--input".into(), s(&w.join("raw.jsonl")), "--vocab".into(), s(&vocab), "--out".into(), "{o}/kept.jsonl".into(), "--report-out".into(), "{o}/report.json".into()]),
        ("split", vec!["split".into(), "--manifest".into(), s(&filtered), "--seed".into(), "5".into(), "--trainval-out".into(), "{o}/trainval.txt".into(), "--test-out".into(), "{o}/test.txt".into()]),
        ("stats", vec!["stats".into(), "--manifest".into(), s(&filtered), "--vocab".into(), s(&vocab), "--out-dir".into(), "{o}".into()]),
        ("anchors", vec!["anchors".into(), "--manifest".into(), s(&filtered), "--k".into(), "5".into(), "--k-sweep".into(), "1:6:1".into(), "--seed".into(), "3".into(), "--out".into(), "{o}/anchors.json".into(), "--sweep-out".into(), "{o}/sweep.csv".into()]),
        ("eval", vec!["eval".into(), "--detections".into(), s(&w.join("dets.jsonl")), "--gt-manifest".into(), s(&filtered), "--sweep".into(), "0.5:0.8:0.05".into(), "--out".into(), "{o}/eval.json".into(), "--pr-out".into(), "{o}/pr.csv".into()]),
        ("losscheck", vec!["losscheck".into(), "--samples".into(), "300".into(), "--seed".into(), "7".into(), "--out".into(), "{o}/losscheck.json".into()]),
        ("ingest", vec!["ingest".into(), "--input".into(), s(&tree), "--digests".into(), "--out".into(), "{o}/manifest.jsonl".into()]),
        ("vocab", vec!["vocab".into(), "--input".into(), s(&tree), "--out".into(), "{o}/vocab.json".into()]),
    ];
    let mut compared = 0;
    for (name, args) in &invocations {
        let mut snapshots = Vec::new();
        for (run, threads) in [(0, "1"), (1, "4"), (2, "4")] {
            let o = w.join(format!("out-{name}-{run}"));
            let mut argv: Vec<String> = args.iter().map(|a| a.replace("{o}", o.to_str().unwrap())).collect();
            argv.extend(["--threads".to_string(), threads.to_string()]);
            let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
            let out = common::run_cli(&argv);
            ensure(out.status.success(), || format!("{name}: {}", String::from_utf8_lossy(&out.stderr)))?;
            let snap = common::snapshot(&o);
            ensure(!snap.is_empty(), || format!("{name}: no outputs"))?;
            snapshots.push((snap, out.stdout));
        }
        ensure(snapshots.windows(2).all(|p| p[0] == p[1]), || format!("{name}: outputs differ between runs"))?;
        compared += snapshots[0].0.len();
    }
    Ok(format!(
        "{} subcommands x 3 runs (threads 1/4/4), {compared} output files byte-identical",
        invocations.len()
    ))
}

fn main() {
    let dataset = dataset_dir();
    let skip = |what: &str| Outcome::Skip(format!("{what} needs LOGODET3K_DIR pointing at the released dataset"));
    let conditional = |f: fn(&Path) -> Check, what: &str| match &dataset {
        Some(d) => to_outcome(f(d)),
        None => skip(what),
    };
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient oracle", to_outcome(criterion_1())),
        (2, "loss identities", to_outcome(criterion_2())),
        (3, "k-means oracle", to_outcome(criterion_3())),
        (4, "anchor sweep", to_outcome(criterion_4())),
        (5, "evaluator oracle", to_outcome(criterion_5())),
        (6, "filter accounting", to_outcome(criterion_6())),
        (7, "dataset statistics", conditional(criterion_7, "dataset statistics")),
        (8, "published anchors", conditional(criterion_8, "anchor comparison")),
        (9, "determinism", to_outcome(criterion_9())),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Outcome::Pass(d) => println!("PASS criterion {n} ({name}): {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}")
            }
            Outcome::Skip(d) => println!("SKIP criterion {n} ({name}): {d}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn to_outcome(c: Check) -> Outcome {
    match c {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}
