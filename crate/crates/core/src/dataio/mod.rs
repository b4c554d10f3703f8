//! Datasets: the procedural source/target/wild benchmark, its on-disk
//! layout, read-only Cityscapes ingestion and seeded batching.

mod batch;
mod cityscapes;
pub(crate) mod store;
mod synth;

use serde::{Deserialize, Serialize};

pub use batch::{batch_indices, epoch_order, iterate_batches, BatchIter};
pub use cityscapes::{load_cityscapes_layout, save_cityscapes_layout, CityscapesSplit, CITYSCAPES_CLASSES};
pub use store::{load_benchmark, load_split, save_benchmark, save_split, BenchmarkIndex, SampleEntry, SplitIndex};
pub use synth::{generate_benchmark, render_scene, standard_benchmark, Benchmark, DomainStyle, SceneLayout, SceneSpec, SplitCounts};

use crate::error::{Error, Result};

/// Label id excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// RGB image, row-major `H×W×3`, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel-planar copy (`3×H×W`), the network input layout.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.pixels();
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Crops the top-left-anchored window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Self { height, width, data }
    }
}

/// Per-pixel class ids with [`IGNORE`] for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "segmentation map",
                detail: format!("{height}x{width} needs {} labels, got {}", height * width, data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn counted_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Errors on any id outside `[0, classes)` other than [`IGNORE`].
    pub fn validate(&self, classes: usize, context: &str) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(&id) => Err(Error::UnknownClass {
                id,
                classes,
                context: context.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width + left;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        Self { height, width, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub seed: u64,
    pub image: Image,
    pub labels: Option<SegmentationMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    SourceTrain,
    TargetTrain,
    TargetVal,
    WildVal,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [
        SplitRole::SourceTrain,
        SplitRole::TargetTrain,
        SplitRole::TargetVal,
        SplitRole::WildVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitRole::SourceTrain => "source-train",
            SplitRole::TargetTrain => "target-train",
            SplitRole::TargetVal => "target-val",
            SplitRole::WildVal => "wild-val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Whether samples of this role may carry labels at all.
    pub fn labeled(self) -> bool {
        self != SplitRole::TargetTrain
    }
}

impl std::fmt::Display for SplitRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub samples: Vec<DomainSample>,
}

impl DatasetSplit {
    /// Builds a split, refusing labels on roles that must stay unlabeled.
    pub fn new(role: SplitRole, samples: Vec<DomainSample>) -> Result<Self> {
        if !role.labeled() && samples.iter().any(|s| s.labels.is_some()) {
            return Err(Error::InvalidArgument(format!("split {role} must not carry labels")));
        }
        Ok(Self { role, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|s| &s.image)
    }

    /// Labels of every sample; errors if the split is unlabeled.
    pub fn labels(&self) -> Result<Vec<&SegmentationMap>> {
        self.samples
            .iter()
            .map(|s| s.labels.as_ref().ok_or_else(|| Error::Unlabeled(self.role.to_string())))
            .collect()
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from a base seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
