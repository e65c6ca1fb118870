//! Tile-by-tile segmentation of whole-slide images, case-level necrosis
//! ratio quantification and survival stratification by response cutoff.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! - [`slide_store`]: dataset directory, class codes, region reads;
//! - [`synth`]: seeded synthetic slides and cohorts with exact truth;
//! - [`tiler`]: sliding-window schedule and 20×/10×/5× patch extraction;
//! - [`segmenter`]: oracle, chromatic and external-process backends;
//! - [`quantify`]: pixel counts, necrosis ratio, grades, comparison table;
//! - [`survival`]: Kaplan-Meier, log-rank, stratification, cutoff sweep.

pub mod palette;
pub mod quantify;
pub mod segmenter;
pub mod slide_store;
pub mod survival;
pub mod synth;
pub mod tiler;

pub use quantify::{ClassCounts, NecrosisGrade, NecrosisRatio};
pub use slide_store::{CaseRecord, Dataset, LabelMask, SlidePyramid, TissueClass, TILE_SIZE};
