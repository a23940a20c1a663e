//! Dataset statistics: per-category and per-super-class counts, object
//! size bins and the objects-per-image histogram.
//!
//! Everything is integer counting, so results are exact and independent of
//! record order and thread count.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::annotations::{ImageRecord, SuperClass, Vocabulary};
use crate::error::{Error, Result};
use crate::exec;

/// Objects with area strictly below this are small.
pub const SMALL_AREA_LIMIT: f64 = 32.0 * 32.0;
/// Objects with area up to and including this are medium.
pub const MEDIUM_AREA_LIMIT: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

pub fn size_bin(area: f64) -> SizeBin {
    if area < SMALL_AREA_LIMIT {
        SizeBin::Small
    } else if area <= MEDIUM_AREA_LIMIT {
        SizeBin::Medium
    } else {
        SizeBin::Large
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeBins {
    pub small: u64,
    pub medium: u64,
    pub large: u64,
}

impl SizeBins {
    pub fn total(&self) -> u64 {
        self.small + self.medium + self.large
    }

    fn add(&mut self, bin: SizeBin) {
        match bin {
            SizeBin::Small => self.small += 1,
            SizeBin::Medium => self.medium += 1,
            SizeBin::Large => self.large += 1,
        }
    }
}

/// Percentages of small/medium/large objects with two decimals.
///
/// Rounded by largest remainder in integer hundredths of a percent, so the
/// three values always sum to exactly 100.00.
pub fn size_bin_fractions(bins: &SizeBins) -> Result<(f64, f64, f64)> {
    let total = bins.total();
    if total == 0 {
        return Err(Error::invalid("size bins are empty"));
    }
    let counts = [bins.small, bins.medium, bins.large];
    let scaled: Vec<(u128, u128)> = counts
        .iter()
        .map(|&c| {
            let num = c as u128 * 10_000;
            (num / total as u128, num % total as u128)
        })
        .collect();
    let mut hundredths: Vec<u128> = scaled.iter().map(|(q, _)| *q).collect();
    let short = 10_000 - hundredths.iter().sum::<u128>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| scaled[b].1.cmp(&scaled[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(short as usize) {
        hundredths[i] += 1;
    }
    let pct = |h: u128| h as f64 / 100.0;
    Ok((pct(hundredths[0]), pct(hundredths[1]), pct(hundredths[2])))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryStats {
    pub category: String,
    pub super_class: SuperClass,
    pub image_count: u64,
    pub object_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuperClassStats {
    pub super_class: SuperClass,
    pub category_count: u64,
    pub image_count: u64,
    pub object_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub total_images: u64,
    pub total_objects: u64,
    pub total_categories: u64,
    /// Images whose objects span more than one super-class; each is counted
    /// once in every super-class it touches.
    pub multi_super_class_images: u64,
    pub images_without_objects: u64,
    /// Sorted by category name.
    pub categories: Vec<CategoryStats>,
    /// All nine super-classes, in canonical order.
    pub super_classes: Vec<SuperClassStats>,
    pub size_bins: SizeBins,
    /// objects in an image → number of images.
    pub objects_per_image: BTreeMap<u64, u64>,
}

struct ImageTally {
    per_category: BTreeMap<String, u64>,
    super_classes: BTreeSet<SuperClass>,
    bins: SizeBins,
}

fn tally(r: &ImageRecord, vocab: &Vocabulary) -> Result<ImageTally> {
    let mut t = ImageTally {
        per_category: BTreeMap::new(),
        super_classes: BTreeSet::new(),
        bins: SizeBins::default(),
    };
    for o in &r.objects {
        let sc = vocab
            .super_class(&o.category)
            .ok_or_else(|| Error::UnknownCategory(o.category.clone()))?;
        *t.per_category.entry(o.category.clone()).or_default() += 1;
        t.super_classes.insert(sc);
        t.bins.add(size_bin(o.bbox.area()));
    }
    Ok(t)
}

pub fn compute_stats(records: &[ImageRecord], vocab: &Vocabulary) -> Result<DatasetStats> {
    let tallies = exec::map(records, |r| tally(r, vocab));

    let mut categories: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut sc_images: BTreeMap<SuperClass, u64> = BTreeMap::new();
    let mut size_bins = SizeBins::default();
    let mut objects_per_image: BTreeMap<u64, u64> = BTreeMap::new();
    let mut multi = 0;
    let mut empty = 0;
    for t in tallies {
        let t = t?;
        let n: u64 = t.per_category.values().sum();
        *objects_per_image.entry(n).or_default() += 1;
        if n == 0 {
            empty += 1;
        }
        for (cat, count) in t.per_category {
            let e = categories.entry(cat).or_default();
            e.0 += 1;
            e.1 += count;
        }
        if t.super_classes.len() > 1 {
            multi += 1;
        }
        for sc in t.super_classes {
            *sc_images.entry(sc).or_default() += 1;
        }
        size_bins.small += t.bins.small;
        size_bins.medium += t.bins.medium;
        size_bins.large += t.bins.large;
    }

    let categories: Vec<CategoryStats> = categories
        .into_iter()
        .map(|(cat, (images, objects))| CategoryStats {
            super_class: vocab.super_class(&cat).expect("checked during tally"),
            category: cat,
            image_count: images,
            object_count: objects,
        })
        .collect();

    let super_classes = SuperClass::ALL
        .iter()
        .map(|&sc| {
            let members = categories.iter().filter(|c| c.super_class == sc);
            SuperClassStats {
                super_class: sc,
                category_count: members.clone().count() as u64,
                image_count: sc_images.get(&sc).copied().unwrap_or(0),
                object_count: members.map(|c| c.object_count).sum(),
            }
        })
        .collect();

    Ok(DatasetStats {
        total_images: records.len() as u64,
        total_objects: size_bins.total(),
        total_categories: categories.len() as u64,
        multi_super_class_images: multi,
        images_without_objects: empty,
        categories,
        super_classes,
        size_bins,
        objects_per_image,
    })
}

/// Images per category, most frequent first, ties by name.
pub fn per_logo_distribution(records: &[ImageRecord]) -> Result<Vec<(String, u64)>> {
    if records.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        let cats: BTreeSet<&str> = r.categories().collect();
        for c in cats {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut out: Vec<(String, u64)> = counts.into_iter().map(|(c, n)| (c.to_string(), n)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Internal(format!("csv: {e}")))?;
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

impl DatasetStats {
    /// One row per category in per-logo order (image count descending,
    /// then name), ready for a sorted distribution plot.
    pub fn category_csv(&self) -> Result<String> {
        let mut rows: Vec<&CategoryStats> = self.categories.iter().collect();
        rows.sort_by(|a, b| b.image_count.cmp(&a.image_count).then_with(|| a.category.cmp(&b.category)));
        csv_string(|w| {
            w.write_record(["category", "super_class", "image_count", "object_count"])?;
            for c in rows {
                w.write_record([
                    c.category.as_str(),
                    c.super_class.name(),
                    &c.image_count.to_string(),
                    &c.object_count.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    /// Nine super-class rows followed by a `Total` row. Total image count is
    /// the number of distinct images; the overlap row makes the difference
    /// to the column sum explicit.
    pub fn super_class_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(["super_class", "category_count", "image_count", "object_count"])?;
            for s in &self.super_classes {
                w.write_record([
                    s.super_class.name(),
                    &s.category_count.to_string(),
                    &s.image_count.to_string(),
                    &s.object_count.to_string(),
                ])?;
            }
            w.write_record([
                "Total",
                &self.total_categories.to_string(),
                &self.total_images.to_string(),
                &self.total_objects.to_string(),
            ])?;
            w.write_record([
                "MultiSuperClassImages",
                "",
                &self.multi_super_class_images.to_string(),
                "",
            ])?;
            Ok(())
        })
    }

    /// Dense histogram from zero to the largest count, one row per integer
    /// bin `[objects, objects]`.
    pub fn objects_per_image_csv(&self) -> Result<String> {
        let max = self.objects_per_image.keys().next_back().copied().unwrap_or(0);
        csv_string(|w| {
            w.write_record(["objects_per_image", "image_count"])?;
            if self.total_images == 0 {
                return Ok(());
            }
            for n in 0..=max {
                let c = self.objects_per_image.get(&n).copied().unwrap_or(0);
                w.write_record([n.to_string(), c.to_string()])?;
            }
            Ok(())
        })
    }

    pub fn size_bins_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Edges {
            small_below: f64,
            medium_up_to_inclusive: f64,
        }
        #[derive(Serialize)]
        struct Percent {
            small: f64,
            medium: f64,
            large: f64,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            area_edges: Edges,
            counts: &'a SizeBins,
            total: u64,
            percent: Option<Percent>,
        }
        let percent = size_bin_fractions(&self.size_bins)
            .ok()
            .map(|(small, medium, large)| Percent { small, medium, large });
        let out = Out {
            area_edges: Edges {
                small_below: SMALL_AREA_LIMIT,
                medium_up_to_inclusive: MEDIUM_AREA_LIMIT,
            },
            counts: &self.size_bins,
            total: self.size_bins.total(),
            percent,
        };
        let mut s = serde_json::to_string_pretty(&out).map_err(|e| Error::Internal(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}
