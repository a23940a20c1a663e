//! Fixture builders shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logodet::annotations::{to_voc_xml, ImageRecord, LabeledObject, PerceptualHash, SuperClass, Vocabulary};
use logodet::eval::Detection;
use logodet::geometry::BBox;
use rand::Rng;

pub const CATEGORIES: [(&str, SuperClass); 6] = [
    ("Oreo", SuperClass::Food),
    ("Kfc", SuperClass::Food),
    ("Nike", SuperClass::Clothes),
    ("Lexus-1", SuperClass::Transportation),
    ("Lexus-2", SuperClass::Transportation),
    ("Bayer", SuperClass::Medical),
];

pub fn vocabulary() -> Vocabulary {
    let mut v = Vocabulary::new();
    for (c, sc) in CATEGORIES {
        v.insert(c, sc).unwrap();
    }
    v
}

pub fn write_vocab(dir: &Path) -> PathBuf {
    let p = dir.join("vocab.json");
    fs::write(&p, serde_json::to_string_pretty(&vocabulary()).unwrap()).unwrap();
    p
}

pub fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

/// Records with random sizes, 0–4 objects and random digests; a few
/// categories fall outside the vocabulary and some hashes are near copies.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<ImageRecord> {
    let mut rng = logodet::rng::stream(seed, "fixture/records");
    let mut hashes: Vec<u64> = Vec::new();
    (0..n)
        .map(|i| {
            let width = rng.gen_range(150..1600);
            let height = rng.gen_range(150..1600);
            let objects = (0..rng.gen_range(0..5))
                .map(|_| {
                    let cat = if rng.gen_bool(0.05) {
                        "Pepsi"
                    } else {
                        CATEGORIES[rng.gen_range(0..CATEGORIES.len())].0
                    };
                    let w = rng.gen_range(4.0..width as f64 * 0.6);
                    let h = rng.gen_range(4.0..height as f64 * 0.6);
                    let x = rng.gen_range(0.0..width as f64 - w);
                    let y = rng.gen_range(0.0..height as f64 - h);
                    LabeledObject {
                        category: cat.to_string(),
                        bbox: bbox(x, y, x + w, y + h),
                    }
                })
                .collect();
            let ph = if !hashes.is_empty() && rng.gen_bool(0.1) {
                let mut h = hashes[rng.gen_range(0..hashes.len())];
                for _ in 0..rng.gen_range(0..7) {
                    h ^= 1 << rng.gen_range(0..64);
                }
                h
            } else {
                rng.gen()
            };
            hashes.push(ph);
            let content = if rng.gen_bool(0.03) { "deadbeef".to_string() } else { format!("{:064x}", i) };
            ImageRecord {
                path: format!("img/{i:05}.jpg"),
                width,
                height,
                objects,
                content_digest: Some(content),
                perceptual_digest: Some(PerceptualHash(ph)),
            }
        })
        .collect()
}

/// Detections derived from ground truth: jittered copies, misses and
/// spurious boxes, with scores drawn from the seed.
pub fn synthetic_detections(gt: &[ImageRecord], seed: u64) -> Vec<Detection> {
    let mut rng = logodet::rng::stream(seed, "fixture/detections");
    let mut out = Vec::new();
    for r in gt {
        for o in &r.objects {
            if rng.gen_bool(0.2) {
                continue;
            }
            let b = o.bbox;
            let j = |rng: &mut rand_chacha::ChaCha8Rng, v: f64, s: f64| v + rng.gen_range(-0.15..0.15) * s;
            let (w, h) = (b.width().max(1.0), b.height().max(1.0));
            let x0 = j(&mut rng, b.xmin(), w);
            let y0 = j(&mut rng, b.ymin(), h);
            let x1 = j(&mut rng, b.xmax(), w).max(x0 + 1.0);
            let y1 = j(&mut rng, b.ymax(), h).max(y0 + 1.0);
            out.push(Detection::new(&r.path, &o.category, rng.gen_range(0.0..1.0), bbox(x0, y0, x1, y1)).unwrap());
        }
        if rng.gen_bool(0.3) {
            let cat = CATEGORIES[rng.gen_range(0..CATEGORIES.len())].0;
            let x = rng.gen_range(0.0..100.0);
            out.push(Detection::new(&r.path, cat, rng.gen_range(0.0..1.0), bbox(x, x, x + 30.0, x + 20.0)).unwrap());
        }
    }
    out
}

fn test_image(seed: u64, w: u32, h: u32) -> image::RgbImage {
    let mut rng = logodet::rng::stream(seed, "fixture/pixels");
    let (fx, fy) = (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05));
    let (cx, cy, r) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), rng.gen_range(30.0..120.0));
    image::RgbImage::from_fn(w, h, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 128.0 + 70.0 * (xf * fx).sin() * (yf * fy).cos();
        if (xf - cx).hypot(yf - cy) < r {
            v = 255.0 - v * 0.6;
        }
        let v = v.clamp(0.0, 255.0) as u8;
        image::Rgb([v, 255 - v, v / 3])
    })
}

/// A `<SuperClass>/<Category>/` tree of PNG images with sibling VOC XML.
/// Image 3 is a byte copy of image 0 and image 5 is too small.
pub fn write_dataset_tree(root: &Path, n: usize) -> Vec<PathBuf> {
    let mut written = Vec::new();
    let mut first_png: Option<Vec<u8>> = None;
    for i in 0..n {
        let (cat, sc) = CATEGORIES[i % CATEGORIES.len()];
        let dir = root.join(sc.name()).join(cat);
        fs::create_dir_all(&dir).unwrap();
        let (w, h) = if i == 5 { (200, 320) } else { (320 + (i as u32 % 3) * 40, 320) };
        let png = if i == 3 {
            first_png.clone().unwrap()
        } else {
            let mut buf = std::io::Cursor::new(Vec::new());
            test_image(i as u64, w, h).write_to(&mut buf, image::ImageFormat::Png).unwrap();
            buf.into_inner()
        };
        if i == 0 {
            first_png = Some(png.clone());
        }
        let (w, h) = if i == 3 { (320, 320) } else { (w, h) };
        let stem = format!("{cat}_{i}");
        fs::write(dir.join(format!("{stem}.png")), &png).unwrap();
        let rec = ImageRecord {
            path: format!("{stem}.png"),
            width: w,
            height: h,
            objects: vec![LabeledObject {
                category: cat.to_string(),
                bbox: bbox(10.0 + i as f64, 20.0, 150.0, 40.0 + 5.0 * i as f64),
            }],
            content_digest: None,
            perceptual_digest: None,
        };
        let xml = dir.join(format!("{stem}.xml"));
        fs::write(&xml, to_voc_xml(&rec)).unwrap();
        written.push(xml);
    }
    written
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_logodet")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) {
    fs::write(path, logodet::annotations::manifest_to_jsonl(records)).unwrap();
}

pub fn write_detections(path: &Path, dets: &[Detection]) {
    fs::write(path, logodet::eval::detections_to_jsonl(dets)).unwrap();
}

/// All regular files under `dir` with their contents, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
