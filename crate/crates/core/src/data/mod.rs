//! Dataset ingestion, labeled/unlabeled splits, class-frequency bookkeeping
//! and label-resolution alignment.

mod dataset;
mod frequency;
mod grid;
mod image;
mod split;
pub mod synthetic;

pub use dataset::{load_dataset, read_label, write_dataset, write_label, Dataset, Sample, DEFAULT_IGNORE_INDEX};
pub use frequency::{ClassFrequencyTable, FrequencySource};
pub use grid::{downsample_labels, ConfidenceMap, Grid, LabelMap};
pub use image::RgbImage;
pub use split::{make_split, split_ids, Ratio, SplitSpec};
