//! On-disk layout: `<root>/<split>/images/<id>.png`,
//! `<root>/<split>/labels/<id>.png` and `<root>/index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::{Benchmark, DomainStyle, SceneSpec};
use super::{DatasetSplit, DomainSample, Image, SegmentationMap, SplitRole};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub role: SplitRole,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub styles: Option<[DomainStyle; 3]>,
    pub splits: Vec<SplitIndex>,
}

impl BenchmarkIndex {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("index.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    fn upsert(&mut self, split: SplitIndex) {
        match self.splits.iter_mut().find(|s| s.role == split.role) {
            Some(slot) => *slot = split,
            None => self.splits.push(split),
        }
    }
}

fn split_dir(root: &Path, role: SplitRole) -> PathBuf {
    root.join(role.name())
}

pub(crate) fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let raster = RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| Error::InvalidShape {
            op: "write png",
            detail: format!("{}x{} raster", img.height, img.width),
        })?;
    raster.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn write_gray(path: &Path, map: &SegmentationMap) -> Result<()> {
    let raster = GrayImage::from_raw(map.width as u32, map.height as u32, map.data.clone())
        .ok_or_else(|| Error::InvalidShape {
            op: "write png",
            detail: format!("{}x{} label raster", map.height, map.width),
        })?;
    raster.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn read_rgb(path: &Path) -> Result<Image> {
    let raster = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8();
    let (w, h) = raster.dimensions();
    let data = raster.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

pub(crate) fn read_gray(path: &Path) -> Result<SegmentationMap> {
    let raster = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = raster.dimensions();
    SegmentationMap::new(h as usize, w as usize, raster.into_raw())
}

fn write_split_files(split: &DatasetSplit, root: &Path) -> Result<SplitIndex> {
    let dir = split_dir(root, split.role);
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut entries = Vec::with_capacity(split.len());
    for s in &split.samples {
        write_rgb(&images.join(format!("{}.png", s.id)), &s.image)?;
        if let Some(l) = &s.labels {
            write_gray(&labels.join(format!("{}.png", s.id)), l)?;
        }
        entries.push(SampleEntry {
            id: s.id.clone(),
            seed: s.seed,
            labeled: s.labels.is_some(),
        });
    }
    Ok(SplitIndex {
        role: split.role,
        samples: entries,
    })
}

/// Writes one split and records it in `<root>/index.json`, replacing any
/// previous entry for the same role.
pub fn save_split(split: &DatasetSplit, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entry = write_split_files(split, root)?;
    let mut index = if root.join("index.json").exists() {
        BenchmarkIndex::read(root)?
    } else {
        BenchmarkIndex::default()
    };
    index.upsert(entry);
    index.write(root)
}

pub fn save_benchmark(bench: &Benchmark, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = BenchmarkIndex {
        spec: Some(bench.spec.clone()),
        styles: Some([
            bench.source_style.clone(),
            bench.target_style.clone(),
            bench.wild_style.clone(),
        ]),
        splits: Vec::new(),
    };
    for role in SplitRole::ALL {
        index.upsert(write_split_files(bench.split(role), root)?);
    }
    index.write(root)
}

fn load_from_index(root: &Path, entry: &SplitIndex) -> Result<DatasetSplit> {
    let dir = split_dir(root, entry.role);
    let mut samples = Vec::with_capacity(entry.samples.len());
    for s in &entry.samples {
        let image = read_rgb(&dir.join("images").join(format!("{}.png", s.id)))?;
        let labels = if s.labeled {
            let path = dir.join("labels").join(format!("{}.png", s.id));
            if !path.exists() {
                return Err(Error::MissingLabel(path));
            }
            Some(read_gray(&path)?)
        } else {
            None
        };
        samples.push(DomainSample {
            id: s.id.clone(),
            seed: s.seed,
            image,
            labels,
        });
    }
    DatasetSplit::new(entry.role, samples)
}

pub fn load_split(root: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let index = BenchmarkIndex::read(root)?;
    let entry = index
        .splits
        .iter()
        .find(|s| s.role == role)
        .ok_or_else(|| Error::InvalidArgument(format!("{} lists no split {role}", root.join("index.json").display())))?;
    load_from_index(root, entry)
}

/// Loads a benchmark written by [`save_benchmark`].
pub fn load_benchmark(root: &Path) -> Result<Benchmark> {
    let index = BenchmarkIndex::read(root)?;
    let missing = |what: &str| Error::InvalidArgument(format!("{} has no {what}", root.join("index.json").display()));
    let spec = index.spec.clone().ok_or_else(|| missing("scene spec"))?;
    let [source_style, target_style, wild_style] = index.styles.clone().ok_or_else(|| missing("styles"))?;
    let get = |role: SplitRole| -> Result<DatasetSplit> {
        let entry = index
            .splits
            .iter()
            .find(|s| s.role == role)
            .ok_or_else(|| missing(role.name()))?;
        let split = load_from_index(root, entry)?;
        for s in &split.samples {
            if let Some(l) = &s.labels {
                l.validate(spec.num_classes, &s.id)?;
            }
        }
        Ok(split)
    };
    Ok(Benchmark {
        source_train: get(SplitRole::SourceTrain)?,
        target_train: get(SplitRole::TargetTrain)?,
        target_val: get(SplitRole::TargetVal)?,
        wild_val: get(SplitRole::WildVal)?,
        spec,
        source_style,
        target_style,
        wild_style,
    })
}
