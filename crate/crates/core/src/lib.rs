//! Logo detection toolkit: IoU-family box metrics with CIoU gradients, Focal
//! loss, K-means anchor design under the Avg-IoU objective, VOC-style
//! detection evaluation, and annotation curation and statistics for
//! LogoDet-3K style corpora.
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Every parallel path collects in input order and reduces serially, so
//! results do not depend on the worker count.

pub mod anchors;
pub mod annotations;
pub mod cli;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{BBox, CenterBox};
