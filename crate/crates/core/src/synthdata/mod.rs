//! Deterministic synthetic shape-detection benchmarks with disjoint base and
//! novel classes and balanced K-shot support sampling.

mod catalog;
mod dataset;
mod io;
mod render;

use thiserror::Error;

pub use catalog::{class_catalog, class_spec, ClassSpec, ColorFamily, ShapeKind, Texture, MAX_CLASSES};
pub use dataset::{
    gen_dataset, generate_split, sample_kshot, sample_layout, used_classes, Benchmark, BenchmarkConfig,
    DatasetSplit, SceneImage, SplitRole, SupportSet,
};
pub use io::{load_benchmark, load_split, save_benchmark, save_split};
pub use render::{render_image, shape_mass_inside_box, Raster, SceneInstance, BACKGROUND_AMPLITUDE, MAX_PAIR_IOU};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested {requested} classes but only {available} (kind, texture, color) combinations exist")]
    InsufficientClasses { requested: usize, available: usize },
    #[error("class {class_id} has {available} instances, {requested} requested")]
    InsufficientInstances {
        class_id: usize,
        available: usize,
        requested: usize,
    },
    #[error("shot count must be at least 1, got {0}")]
    InvalidShots(usize),
    #[error("instances overlap with IoU {0:.3}")]
    Overlap(f64),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
