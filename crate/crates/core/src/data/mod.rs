//! Datasets, class-partitioned task streams and augmentation.

mod augment;
mod blobs;
mod cifar;
mod stream;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentPolicy};
pub use blobs::BLOBS_SHAPE;
pub use stream::{build_split_stream, LabeledBatch, TaskSpec, TaskStream};

/// Environment variable consulted when no `--data-dir` is given.
pub const DATA_DIR_ENV: &str = "HCL_DATA_DIR";

/// Shape and normalization constants of a dataset. Pixels are stored
/// normalized: `(raw - mean[c]) / std[c]` with raw values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetDescriptor {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Normalized value range `[lo, hi]` of channel `c`.
    pub fn pixel_range(&self, c: usize) -> (f64, f64) {
        ((0.0 - self.mean[c]) / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }

    /// Maps a normalized pixel of channel `c` back to `[0, 1]`.
    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        (v * self.std[c] + self.mean[c]).clamp(0.0, 1.0)
    }
}

/// Normalized images plus original dataset labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

/// Per-class subset sizes; `None` keeps everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadOptions {
    pub data_dir: Option<PathBuf>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

impl LoadOptions {
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

pub fn known_datasets() -> &'static [&'static str] {
    &["blobs", "cifar10"]
}

/// Loads (or synthesizes) a dataset by id.
pub fn load_dataset(id: &str, opts: &LoadOptions) -> Result<Dataset> {
    let ds = match id {
        "blobs" => blobs::generate(opts.train_per_class, opts.test_per_class),
        "cifar10" => cifar::load(&opts.resolved_data_dir(), opts)?,
        other => {
            return Err(Error::config(
                "stream.dataset",
                format!("unknown dataset `{other}` (known: {})", known_datasets().join(", ")),
            ))
        }
    };
    Ok(ds)
}

/// Keeps the first `per_class` samples of each label.
pub(crate) fn take_per_class(
    images: Vec<f64>,
    labels: Vec<usize>,
    sample_len: usize,
    num_classes: usize,
    per_class: Option<usize>,
) -> Split {
    let Some(limit) = per_class else {
        return Split { images, labels };
    };
    let mut seen = vec![0usize; num_classes];
    let mut out = Split {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for (i, &l) in labels.iter().enumerate() {
        if seen[l] < limit {
            seen[l] += 1;
            out.labels.push(l);
            out.images
                .extend_from_slice(&images[i * sample_len..(i + 1) * sample_len]);
        }
    }
    out
}

pub(crate) fn normalize_in_place(images: &mut [f64], desc: &DatasetDescriptor) {
    let plane = desc.height * desc.width;
    for (i, v) in images.iter_mut().enumerate() {
        let c = (i / plane) % desc.channels;
        *v = (*v - desc.mean[c]) / desc.std[c];
    }
}

pub(crate) fn file_exists(p: &Path) -> bool {
    p.is_file()
}
