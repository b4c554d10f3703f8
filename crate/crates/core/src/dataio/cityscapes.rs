//! Read path for the `leftImg8bit` / `gtFine` directory convention with
//! 19-class training ids, plus a writer for the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use super::store::{read_gray, read_rgb, write_gray, write_rgb};
use super::{DatasetSplit, DomainSample, SplitRole};
use crate::error::{Error, Result};

pub const CITYSCAPES_CLASSES: usize = 19;

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
const LABEL_SUFFIX: &str = "_gtFine_labelTrainIds.png";

#[derive(Clone, Debug)]
struct Entry {
    id: String,
    image: PathBuf,
    label: Option<PathBuf>,
}

/// A split whose rasters are read on demand.
#[derive(Clone, Debug)]
pub struct CityscapesSplit {
    pub role: SplitRole,
    /// Optional center crop `(height, width)`.
    pub crop: Option<(usize, usize)>,
    entries: Vec<Entry>,
}

impl CityscapesSplit {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn load(&self, index: usize) -> Result<DomainSample> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {index} of {}", self.entries.len())))?;
        let mut image = read_rgb(&e.image)?;
        let mut labels = match &e.label {
            Some(p) => {
                let l = read_gray(p)?;
                l.validate(CITYSCAPES_CLASSES, &p.display().to_string())?;
                if (l.height, l.width) != (image.height, image.width) {
                    return Err(Error::InvalidShape {
                        op: "cityscapes pair",
                        detail: format!(
                            "{} is {}x{} but its image is {}x{}",
                            p.display(),
                            l.height,
                            l.width,
                            image.height,
                            image.width
                        ),
                    });
                }
                Some(l)
            }
            None => None,
        };
        if let Some((ch, cw)) = self.crop {
            if ch > image.height || cw > image.width {
                return Err(Error::InvalidShape {
                    op: "crop",
                    detail: format!("{ch}x{cw} crop of a {}x{} image", image.height, image.width),
                });
            }
            let (top, left) = ((image.height - ch) / 2, (image.width - cw) / 2);
            image = image.crop(top, left, ch, cw);
            labels = labels.map(|l| l.crop(top, left, ch, cw));
        }
        Ok(DomainSample {
            id: e.id.clone(),
            seed: index as u64,
            image,
            labels,
        })
    }

    /// Reads every sample into memory.
    pub fn materialize(&self) -> Result<DatasetSplit> {
        let samples = (0..self.len()).map(|i| self.load(i)).collect::<Result<Vec<_>>>()?;
        DatasetSplit::new(self.role, samples)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|r| r.map(|d| d.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Indexes `<root>/leftImg8bit/<split>/<city>/*_leftImg8bit.png`. Labels are
/// required for labeled roles and never read for unlabeled ones. A root
/// without any images yields an empty split.
pub fn load_cityscapes_layout(
    root: &Path,
    split: &str,
    role: SplitRole,
    crop: Option<(usize, usize)>,
) -> Result<CityscapesSplit> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let images_root = root.join("leftImg8bit").join(split);
    let labels_root = root.join("gtFine").join(split);
    let mut entries = Vec::new();
    if images_root.is_dir() {
        for city in sorted_entries(&images_root)?.into_iter().filter(|p| p.is_dir()) {
            let city_name = city.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            for path in sorted_entries(&city)? {
                let Some(stem) = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(IMAGE_SUFFIX))
                else {
                    continue;
                };
                let label = if role.labeled() {
                    let lp = labels_root.join(&city_name).join(format!("{stem}{LABEL_SUFFIX}"));
                    if !lp.is_file() {
                        return Err(Error::MissingLabel(lp));
                    }
                    Some(lp)
                } else {
                    None
                };
                entries.push(Entry {
                    id: stem.to_string(),
                    image: path,
                    label,
                });
            }
        }
    }
    Ok(CityscapesSplit { role, crop, entries })
}

/// Writes `split` under `<root>/leftImg8bit/<split_name>/<city>/` and the
/// matching `gtFine` tree, using sample ids as file stems.
pub fn save_cityscapes_layout(split: &DatasetSplit, root: &Path, split_name: &str, city: &str) -> Result<()> {
    let images = root.join("leftImg8bit").join(split_name).join(city);
    let labels = root.join("gtFine").join(split_name).join(city);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for s in &split.samples {
        write_rgb(&images.join(format!("{}{IMAGE_SUFFIX}", s.id)), &s.image)?;
        if let Some(l) = &s.labels {
            write_gray(&labels.join(format!("{}{LABEL_SUFFIX}", s.id)), l)?;
        }
    }
    Ok(())
}
