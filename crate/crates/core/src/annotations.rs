//! Annotation ingestion and dataset curation.
//!
//! Reads VOC-style XML (`size{width,height}`, `object{name, bndbox}`), keeps
//! `xmax`/`ymax` as exclusive real-valued edges, and applies the curation
//! rules in a fixed order: too small, extreme aspect ratio, duplicate, no
//! logo, not in vocabulary. The first matching rule rejects a record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quick_xml::events::Event;
use quick_xml::Reader;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::BBox;
use crate::rng;

/// Box coordinates may be inverted or out of bounds by this many pixels
/// before a record is rejected.
pub const PIXEL_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SuperClass {
    Food,
    #[serde(alias = "Clothing")]
    Clothes,
    Necessities,
    Others,
    #[serde(alias = "Electronics")]
    Electronic,
    Transportation,
    Leisure,
    #[serde(alias = "Sport")]
    Sports,
    #[serde(alias = "Medicine")]
    Medical,
}

impl SuperClass {
    pub const ALL: [SuperClass; 9] = [
        SuperClass::Food,
        SuperClass::Clothes,
        SuperClass::Necessities,
        SuperClass::Others,
        SuperClass::Electronic,
        SuperClass::Transportation,
        SuperClass::Leisure,
        SuperClass::Sports,
        SuperClass::Medical,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SuperClass::Food => "Food",
            SuperClass::Clothes => "Clothes",
            SuperClass::Necessities => "Necessities",
            SuperClass::Others => "Others",
            SuperClass::Electronic => "Electronic",
            SuperClass::Transportation => "Transportation",
            SuperClass::Leisure => "Leisure",
            SuperClass::Sports => "Sports",
            SuperClass::Medical => "Medical",
        }
    }
}

impl fmt::Display for SuperClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuperClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "Food" => SuperClass::Food,
            "Clothes" | "Clothing" => SuperClass::Clothes,
            "Necessities" => SuperClass::Necessities,
            "Others" => SuperClass::Others,
            "Electronic" | "Electronics" => SuperClass::Electronic,
            "Transportation" => SuperClass::Transportation,
            "Leisure" => SuperClass::Leisure,
            "Sports" | "Sport" => SuperClass::Sports,
            "Medical" | "Medicine" => SuperClass::Medical,
            other => return Err(Error::invalid(format!("unknown super-class `{other}`"))),
        })
    }
}

/// Logo categories and the super-class each belongs to.
///
/// On disk this is a JSON object mapping category name to super-class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    super_class_of: BTreeMap<String, SuperClass>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a category; re-adding with a different super-class is an error.
    pub fn insert(&mut self, category: impl Into<String>, sc: SuperClass) -> Result<()> {
        let category = category.into();
        if category.trim().is_empty() {
            return Err(Error::invalid("empty category name"));
        }
        match self.super_class_of.get(&category) {
            Some(existing) if *existing != sc => Err(Error::invalid(format!(
                "category `{category}` assigned to both {existing} and {sc}"
            ))),
            _ => {
                self.super_class_of.insert(category, sc);
                Ok(())
            }
        }
    }

    pub fn contains(&self, category: &str) -> bool {
        self.super_class_of.contains_key(category)
    }

    pub fn super_class(&self, category: &str) -> Option<SuperClass> {
        self.super_class_of.get(category).copied()
    }

    pub fn len(&self) -> usize {
        self.super_class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.super_class_of.is_empty()
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, SuperClass)> {
        self.super_class_of.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let map: BTreeMap<String, SuperClass> =
            serde_json::from_slice(bytes).map_err(|source| Error::Json {
                context: "vocabulary".into(),
                source,
            })?;
        let mut vocab = Vocabulary::new();
        for (k, v) in map {
            vocab.insert(k.trim().to_string(), v)?;
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// Builds the vocabulary of a `<root>/<SuperClass>/<category dir>/*.xml`
    /// tree from the object names found in its annotations.
    pub fn from_dataset_tree(root: &Path) -> Result<Self> {
        let files = xml_files(root)?;
        let parsed = exec::map(&files, |p| -> Result<Vec<(String, SuperClass)>> {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let top = rel
                .components()
                .next()
                .and_then(|c| c.as_os_str().to_str())
                .ok_or_else(|| Error::invalid(format!("{} is not under a super-class dir", p.display())))?;
            let sc: SuperClass = top.parse()?;
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let rec = parse_annotation(&bytes).map_err(|e| with_path(e, p))?;
            Ok(rec.objects.into_iter().map(|o| (o.category, sc)).collect())
        });
        let mut vocab = Vocabulary::new();
        for entries in parsed {
            for (cat, sc) in entries? {
                vocab.insert(cat, sc)?;
            }
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    pub category: String,
    pub bbox: BBox,
}

/// 64-bit difference hash, serialized as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerceptualHash(pub u64);

impl PerceptualHash {
    pub fn hamming(&self, other: &PerceptualHash) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl Serialize for PerceptualHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0))
    }
}

impl<'de> Deserialize<'de> for PerceptualHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(PerceptualHash)
            .map_err(serde::de::Error::custom)
    }
}

/// One annotated image. Serialized field order is the manifest line layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<LabeledObject>,
    /// Hex SHA-256 of the image bytes.
    pub content_digest: Option<String>,
    pub perceptual_digest: Option<PerceptualHash>,
}

impl ImageRecord {
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.objects.iter().map(|o| o.category.as_str())
    }

    /// Most frequent category, ties to the lexicographically smallest.
    pub fn primary_category(&self) -> Option<&str> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in self.categories() {
            *counts.entry(c).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (c, n) in counts {
            if best.map_or(true, |(_, m)| n > m) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }
}

fn xml_err(reader: &Reader<&[u8]>, e: impl fmt::Display) -> Error {
    Error::Xml {
        offset: reader.error_position() as u64,
        message: e.to_string(),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        Error::Xml { offset, message } => Error::Xml {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

#[derive(Default)]
struct RawObject {
    name: Option<String>,
    xmin: Option<String>,
    ymin: Option<String>,
    xmax: Option<String>,
    ymax: Option<String>,
}

/// Parses one VOC annotation. Digests are left empty.
pub fn parse_annotation(xml: &[u8]) -> Result<ImageRecord> {
    let mut reader = Reader::from_reader(xml);
    reader.config_mut().trim_text(true);

    let mut stack: Vec<String> = Vec::new();
    let mut filename: Option<String> = None;
    let mut path_elem: Option<String> = None;
    let mut width: Option<String> = None;
    let mut height: Option<String> = None;
    let mut objects: Vec<RawObject> = Vec::new();
    let mut saw_root = false;

    loop {
        let ev = reader.read_event().map_err(|e| xml_err(&reader, e))?;
        match ev {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if stack.is_empty() {
                    saw_root = true;
                }
                if name == "object" && stack.len() == 1 {
                    objects.push(RawObject::default());
                }
                stack.push(name);
            }
            Event::End(_) => {
                stack.pop();
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|e| xml_err(&reader, e))?.trim().to_string();
                let path: Vec<&str> = stack.iter().map(String::as_str).collect();
                match path.as_slice() {
                    [_, "filename"] => filename = Some(text),
                    [_, "path"] => path_elem = Some(text),
                    [_, "size", "width"] => width = Some(text),
                    [_, "size", "height"] => height = Some(text),
                    [_, "object", field @ ..] => {
                        let obj = objects.last_mut().expect("object opened before its fields");
                        match field {
                            ["name"] => obj.name = Some(text),
                            ["bndbox", "xmin"] => obj.xmin = Some(text),
                            ["bndbox", "ymin"] => obj.ymin = Some(text),
                            ["bndbox", "xmax"] => obj.xmax = Some(text),
                            ["bndbox", "ymax"] => obj.ymax = Some(text),
                            _ => {}
                        }
                    }
                    _ => {}
                }
            }
            Event::Empty(e) => {
                if stack.is_empty() {
                    saw_root = true;
                }
                let name = e.name();
                if name.as_ref() == b"object" && stack.len() == 1 {
                    objects.push(RawObject::default());
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(Error::Xml {
            offset: xml.len() as u64,
            message: format!("unclosed element <{}>", stack.last().unwrap()),
        });
    }
    if !saw_root {
        return Err(Error::Xml {
            offset: 0,
            message: "no root element".into(),
        });
    }

    let dim = |v: Option<String>, what: &str| -> Result<u32> {
        let v = v.ok_or_else(|| Error::Schema(format!("missing size/{what}")))?;
        let parsed: f64 = v
            .parse()
            .map_err(|_| Error::Schema(format!("size/{what} is not a number: `{v}`")))?;
        if !(parsed >= 1.0) || parsed.fract() != 0.0 || parsed > u32::MAX as f64 {
            return Err(Error::Schema(format!("size/{what} must be a positive integer, got `{v}`")));
        }
        Ok(parsed as u32)
    };
    let width = dim(width, "width")?;
    let height = dim(height, "height")?;

    let objects = objects
        .into_iter()
        .enumerate()
        .map(|(i, o)| build_object(i, o, width as f64, height as f64))
        .collect::<Result<Vec<_>>>()?;

    Ok(ImageRecord {
        path: filename.or(path_elem).unwrap_or_default(),
        width,
        height,
        objects,
        content_digest: None,
        perceptual_digest: None,
    })
}

fn build_object(i: usize, o: RawObject, w: f64, h: f64) -> Result<LabeledObject> {
    let category = o
        .name
        .map(|n| n.trim().to_string())
        .filter(|n| !n.is_empty())
        .ok_or_else(|| Error::Schema(format!("object {i}: missing name")))?;
    let coord = |v: Option<String>, what: &str| -> Result<f64> {
        let v = v.ok_or_else(|| Error::Schema(format!("object {i}: missing bndbox/{what}")))?;
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Schema(format!("object {i}: bndbox/{what} is not a number: `{v}`")))
    };
    let (x0, y0) = (coord(o.xmin, "xmin")?, coord(o.ymin, "ymin")?);
    let (mut x1, mut y1) = (coord(o.xmax, "xmax")?, coord(o.ymax, "ymax")?);
    if x1 < x0 - PIXEL_TOLERANCE || y1 < y0 - PIXEL_TOLERANCE {
        return Err(Error::Schema(format!(
            "object {i} (`{category}`): inverted box ({x0}, {y0}, {x1}, {y1})"
        )));
    }
    x1 = x1.max(x0);
    y1 = y1.max(y0);
    let bbox = BBox::new(x0, y0, x1, y1)?.clamped(w, h);
    Ok(LabeledObject { category, bbox })
}

/// Writes a record back as VOC XML. Digests are not part of the format.
pub fn to_voc_xml(record: &ImageRecord) -> String {
    use quick_xml::escape::escape;
    let mut out = String::new();
    out.push_str("<annotation>\n");
    out.push_str(&format!("  <filename>{}</filename>\n", escape(record.path.as_str())));
    out.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        record.width, record.height
    ));
    for o in &record.objects {
        let b = &o.bbox;
        out.push_str(&format!(
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
            escape(o.category.as_str()),
            b.xmin(),
            b.ymin(),
            b.xmax(),
            b.ymax()
        ));
    }
    out.push_str("</annotation>\n");
    out
}

/// Difference hash: grayscale, resize to 9x8, one bit per horizontally
/// adjacent pair (set when the left pixel is darker), row-major.
pub fn dhash(img: &image::DynamicImage) -> PerceptualHash {
    let small = img
        .to_luma8();
    let small = image::imageops::resize(&small, 9, 8, image::imageops::FilterType::Triangle);
    let mut hash = 0u64;
    for y in 0..8u32 {
        for x in 0..8u32 {
            if small.get_pixel(x, y)[0] < small.get_pixel(x + 1, y)[0] {
                hash |= 1 << (y * 8 + x);
            }
        }
    }
    PerceptualHash(hash)
}

pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fills in the content and perceptual digests from the image payload.
pub fn compute_digests(mut record: ImageRecord, image_bytes: &[u8]) -> Result<ImageRecord> {
    let img = image::load_from_memory(image_bytes).map_err(|e| Error::Decode {
        path: record.path.clone(),
        message: e.to_string(),
    })?;
    record.content_digest = Some(content_digest(image_bytes));
    record.perceptual_digest = Some(dhash(&img));
    Ok(record)
}

fn xml_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        let p = entry.path();
        if entry.file_type().is_file()
            && p.extension().map_or(false, |x| x.eq_ignore_ascii_case("xml"))
        {
            files.push(p.to_path_buf());
        }
    }
    Ok(files)
}

const IMAGE_EXTENSIONS: [&str; 6] = ["jpg", "jpeg", "png", "JPG", "JPEG", "PNG"];

fn sibling_image(xml: &Path) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| xml.with_extension(ext))
        .find(|p| p.is_file())
}

fn relative_string(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads every `*.xml` under `root` (sorted by path). Record paths are the
/// sibling image's path relative to `root`, `/`-separated. With
/// `with_digests`, the sibling image is read and hashed and must exist.
pub fn load_annotation_tree(root: &Path, with_digests: bool) -> Result<Vec<ImageRecord>> {
    let files = xml_files(root)?;
    exec::map(&files, |xml| -> Result<ImageRecord> {
        let bytes = fs::read(xml).map_err(|e| Error::io(xml, e))?;
        let mut rec = parse_annotation(&bytes).map_err(|e| with_path(e, xml))?;
        let image = sibling_image(xml);
        rec.path = relative_string(root, image.as_deref().unwrap_or(xml));
        if with_digests {
            let image = image.ok_or_else(|| Error::Decode {
                path: relative_string(root, xml),
                message: "no sibling image file".into(),
            })?;
            let payload = fs::read(&image).map_err(|e| Error::io(&image, e))?;
            rec = compute_digests(rec, &payload)?;
        }
        Ok(rec)
    })
    .into_iter()
    .collect()
}

/// One record per line, fields in declaration order.
pub fn manifest_to_jsonl(records: &[ImageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn manifest_from_jsonl(text: &str) -> Result<Vec<ImageRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("manifest line {}", i + 1),
                source,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    manifest_from_jsonl(&text).map_err(|e| match e {
        Error::Json { context, source } => Error::Json {
            context: format!("{}: {context}", path.display()),
            source,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_dimension: u32,
    pub max_aspect_ratio: f64,
    pub dedup_hamming_threshold: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_dimension: 300,
            max_aspect_ratio: 3.0,
            dedup_hamming_threshold: 4,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_dimension < 1 {
            return Err(Error::invalid("min_dimension must be at least 1"));
        }
        if !(self.max_aspect_ratio > 1.0) {
            return Err(Error::invalid(format!(
                "max_aspect_ratio must exceed 1, got {}",
                self.max_aspect_ratio
            )));
        }
        if self.dedup_hamming_threshold > 64 {
            return Err(Error::invalid(format!(
                "dedup threshold must be in [0, 64], got {}",
                self.dedup_hamming_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectRule {
    TooSmall,
    ExtremeAspect,
    Duplicate,
    NoLogo,
    NotInVocabulary,
}

impl RejectRule {
    /// Evaluation order.
    pub const ORDER: [RejectRule; 5] = [
        RejectRule::TooSmall,
        RejectRule::ExtremeAspect,
        RejectRule::Duplicate,
        RejectRule::NoLogo,
        RejectRule::NotInVocabulary,
    ];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RuleCounts {
    pub too_small: usize,
    pub extreme_aspect: usize,
    pub duplicate: usize,
    pub no_logo: usize,
    pub not_in_vocabulary: usize,
}

impl RuleCounts {
    fn bump(&mut self, rule: RejectRule) {
        *match rule {
            RejectRule::TooSmall => &mut self.too_small,
            RejectRule::ExtremeAspect => &mut self.extreme_aspect,
            RejectRule::Duplicate => &mut self.duplicate,
            RejectRule::NoLogo => &mut self.no_logo,
            RejectRule::NotInVocabulary => &mut self.not_in_vocabulary,
        } += 1;
    }

    pub fn get(&self, rule: RejectRule) -> usize {
        match rule {
            RejectRule::TooSmall => self.too_small,
            RejectRule::ExtremeAspect => self.extreme_aspect,
            RejectRule::Duplicate => self.duplicate,
            RejectRule::NoLogo => self.no_logo,
            RejectRule::NotInVocabulary => self.not_in_vocabulary,
        }
    }

    pub fn total(&self) -> usize {
        RejectRule::ORDER.iter().map(|r| self.get(*r)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub rejected_by_rule: RuleCounts,
}

impl FilterReport {
    pub fn is_consistent(&self) -> bool {
        self.kept + self.rejected_by_rule.total() == self.total
    }
}

/// Near-duplicate lookup over 64-bit hashes. With threshold `t`, the hash is
/// split into `t + 1` bit blocks; two hashes within distance `t` agree
/// exactly on at least one block, so only same-block candidates are checked.
struct DuplicateIndex {
    threshold: u32,
    exact: HashSet<String>,
    blocks: Vec<(u32, u64)>,
    buckets: Vec<HashMap<u64, Vec<u64>>>,
    count: usize,
}

impl DuplicateIndex {
    fn new(threshold: u32) -> Self {
        let n = (threshold + 1).min(64);
        let mut blocks = Vec::with_capacity(n as usize);
        let mut start = 0u32;
        for b in 0..n {
            let len = 64 / n + u32::from(b < 64 % n);
            let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
            blocks.push((start, mask));
            start += len;
        }
        Self {
            threshold,
            exact: HashSet::new(),
            buckets: vec![HashMap::new(); blocks.len()],
            blocks,
            count: 0,
        }
    }

    fn is_duplicate(&self, content: &str, ph: PerceptualHash) -> bool {
        if self.exact.contains(content) {
            return true;
        }
        if self.threshold >= 64 {
            return self.count > 0;
        }
        self.blocks.iter().zip(&self.buckets).any(|(&(shift, mask), bucket)| {
            bucket
                .get(&((ph.0 >> shift) & mask))
                .map_or(false, |cands| {
                    cands
                        .iter()
                        .any(|c| PerceptualHash(*c).hamming(&ph) <= self.threshold)
                })
        })
    }

    fn insert(&mut self, content: &str, ph: PerceptualHash) {
        self.exact.insert(content.to_string());
        for (&(shift, mask), bucket) in self.blocks.iter().zip(self.buckets.iter_mut()) {
            bucket.entry((ph.0 >> shift) & mask).or_default().push(ph.0);
        }
        self.count += 1;
    }
}

fn content_rule(r: &ImageRecord, vocab: &Vocabulary) -> Option<RejectRule> {
    if r.objects.is_empty() {
        Some(RejectRule::NoLogo)
    } else if r.categories().any(|c| !vocab.contains(c)) {
        Some(RejectRule::NotInVocabulary)
    } else {
        None
    }
}

fn size_rule(r: &ImageRecord, cfg: &FilterConfig) -> Option<RejectRule> {
    if r.width < cfg.min_dimension || r.height < cfg.min_dimension {
        return Some(RejectRule::TooSmall);
    }
    let (lo, hi) = (r.width.min(r.height) as f64, r.width.max(r.height) as f64);
    (hi / lo > cfg.max_aspect_ratio).then_some(RejectRule::ExtremeAspect)
}

/// Applies the curation rules. Duplicates are judged against records kept
/// earlier in input order, so the first occurrence wins.
pub fn apply_filters(
    records: Vec<ImageRecord>,
    vocab: &Vocabulary,
    cfg: &FilterConfig,
) -> Result<(Vec<ImageRecord>, FilterReport)> {
    cfg.validate()?;
    if let Some(r) = records
        .iter()
        .find(|r| r.content_digest.is_none() || r.perceptual_digest.is_none())
    {
        return Err(Error::invalid(format!(
            "record `{}` has no digests; compute them before filtering",
            r.path
        )));
    }

    let pre = exec::map(&records, |r| (size_rule(r, cfg), content_rule(r, vocab)));

    let total = records.len();
    let mut counts = RuleCounts::default();
    let mut index = DuplicateIndex::new(cfg.dedup_hamming_threshold);
    let mut kept = Vec::new();
    for (r, (size, content)) in records.into_iter().zip(pre) {
        let digest = r.content_digest.as_deref().expect("checked above");
        let ph = r.perceptual_digest.expect("checked above");
        let verdict = size
            .or_else(|| index.is_duplicate(digest, ph).then_some(RejectRule::Duplicate))
            .or(content);
        match verdict {
            Some(rule) => counts.bump(rule),
            None => {
                index.insert(digest, ph);
                kept.push(r);
            }
        }
    }
    let report = FilterReport {
        total,
        kept: kept.len(),
        rejected_by_rule: counts,
    };
    debug_assert!(report.is_consistent());
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub trainval: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Stratified random split by primary category.
///
/// Each group of `n` images sends `round(n * test_fraction)` to test, capped
/// at `n - 1` so every category keeps a training image. Groups are sorted by
/// path before shuffling with a per-category stream, so the result does not
/// depend on input order. Both halves come back sorted by path.
pub fn split_dataset(records: &[ImageRecord], test_fraction: f64, seed: u64) -> Result<Split> {
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.primary_category().unwrap_or("")).or_default().push(r);
    }

    let mut trainval = Vec::new();
    let mut test = Vec::new();
    for (cat, mut members) in groups {
        members.sort_by_cached_key(|r| (r.path.clone(), serde_json::to_string(r).unwrap_or_default()));
        let mut rng = rng::stream(seed, &format!("split/{cat}"));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        test.extend(members[..n_test].iter().map(|r| (*r).clone()));
        trainval.extend(members[n_test..].iter().map(|r| (*r).clone()));
    }
    let by_path = |a: &ImageRecord, b: &ImageRecord| a.path.cmp(&b.path);
    trainval.sort_by(by_path);
    test.sort_by(by_path);
    Ok(Split { trainval, test })
}
