//! Dataset ingestion, augmentation and patchification.

mod augment;
mod cifar;
mod patch;
mod synthetic;

pub use augment::{apply_pipeline, augment_pair, AugmentPolicy, AugmentedPair, ColorJitter, PipelineSpec};
pub use cifar::{load_cifar, Split, CIFAR_RECORD_BYTES};
pub use patch::{normalize_targets, patchify, row_stats, unpatchify, PatchSequence, NORM_EPS};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

/// An `height × width × channels` image stored channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "{} values cannot form a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }
}

/// One labelled image of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Image,
    pub label: usize,
    pub source_id: u64,
}

/// Shape and class count every record of a dataset must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetDescriptor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl DatasetDescriptor {
    pub fn validate(&self, records: &[ImageRecord]) -> Result<()> {
        for r in records {
            let p = &r.pixels;
            if (p.height, p.width, p.channels) != (self.height, self.width, self.channels) {
                return Err(Error::Input(format!(
                    "record {} is {}x{}x{}, dataset is {}x{}x{}",
                    r.source_id, p.height, p.width, p.channels, self.height, self.width, self.channels
                )));
            }
            if r.label >= self.classes {
                return Err(Error::Input(format!(
                    "record {} has label {} but the dataset has {} classes",
                    r.source_id, r.label, self.classes
                )));
            }
            if p.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input(format!("record {} has pixels outside [0,1]", r.source_id)));
            }
        }
        Ok(())
    }
}
