//! Procedural scenes: a label layout drawn from a seed, rendered under a
//! domain-specific appearance. Label maps depend only on the layout, so the
//! same scene rendered under two styles shares its labels exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DatasetSplit, DomainSample, Image, SegmentationMap, SplitRole};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub min_regions: usize,
    pub max_regions: usize,
    /// Region extent bounds as fractions of the image side.
    pub min_region_frac: f64,
    pub max_region_frac: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 5,
            image_size: (64, 64),
            min_regions: 4,
            max_regions: 8,
            min_region_frac: 0.15,
            max_region_frac: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub class_colors: Vec<[f32; 3]>,
    pub gamma: f32,
    pub noise_sigma: f32,
    pub blur_radius: usize,
    pub brightness: f32,
    pub contrast: f32,
    /// Luminance modulation of the per-class texture patterns.
    pub texture_amplitude: f32,
    /// Per-region color jitter amplitude.
    pub region_jitter: f32,
    /// Per-image color cast jitter amplitude.
    pub image_jitter: f32,
}

const SOURCE_PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.45, 0.48],
    [0.80, 0.25, 0.22],
    [0.25, 0.65, 0.25],
    [0.22, 0.32, 0.78],
    [0.82, 0.76, 0.25],
    [0.65, 0.30, 0.70],
    [0.25, 0.72, 0.72],
    [0.90, 0.55, 0.20],
];

fn source_palette(k: usize) -> Vec<[f32; 3]> {
    (0..k)
        .map(|c| {
            if c < SOURCE_PALETTE.len() {
                SOURCE_PALETTE[c]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xC010, &[c as u64]));
                [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
            }
        })
        .collect()
}

/// Global per-channel cast plus a class-specific offset that no global
/// channel map can undo.
fn shifted_palette(k: usize, scale: [f32; 3], shift: [f32; 3], class_offset: f32, tag: u64) -> Vec<[f32; 3]> {
    source_palette(k)
        .into_iter()
        .enumerate()
        .map(|(c, col)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tag, &[c as u64]));
            let mut out = [0.0; 3];
            for ch in 0..3 {
                let off: f32 = rng.random_range(-1.0..1.0) * class_offset;
                out[ch] = (col[ch] * scale[ch] + shift[ch] + off).clamp(0.02, 0.98);
            }
            out
        })
        .collect()
}

impl DomainStyle {
    pub fn source(num_classes: usize) -> Self {
        Self {
            name: "source".into(),
            class_colors: source_palette(num_classes),
            gamma: 1.0,
            noise_sigma: 0.02,
            blur_radius: 0,
            brightness: 0.0,
            contrast: 1.0,
            texture_amplitude: 0.12,
            region_jitter: 0.06,
            image_jitter: 0.15,
        }
    }

    /// Per-channel cast with class-specific offsets, sensor noise and blur.
    pub fn target(num_classes: usize) -> Self {
        Self {
            name: "target".into(),
            class_colors: shifted_palette(num_classes, [0.8, 0.95, 1.05], [0.1, 0.02, -0.03], 0.08, 0x7A26),
            gamma: 1.0,
            noise_sigma: 0.05,
            blur_radius: 1,
            brightness: 0.02,
            contrast: 1.0,
            texture_amplitude: 0.10,
            region_jitter: 0.08,
            image_jitter: 0.05,
        }
    }

    /// Unseen third domain: strong gamma darkening and its own color cast.
    pub fn wild(num_classes: usize) -> Self {
        Self {
            name: "wild".into(),
            class_colors: shifted_palette(num_classes, [1.0, 0.7, 0.6], [0.0, 0.12, 0.2], 0.10, 0x3117),
            gamma: 2.2,
            noise_sigma: 0.06,
            blur_radius: 1,
            brightness: 0.05,
            contrast: 1.2,
            texture_amplitude: 0.10,
            region_jitter: 0.08,
            image_jitter: 0.06,
        }
    }

    fn tag(&self) -> u64 {
        self.name
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub wild_val: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source_train: 300,
            target_train: 300,
            target_val: 100,
            wild_val: 100,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::SourceTrain => self.source_train,
            SplitRole::TargetTrain => self.target_train,
            SplitRole::TargetVal => self.target_val,
            SplitRole::WildVal => self.wild_val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
    Band,
}

/// Label layout of one scene, independent of appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub labels: SegmentationMap,
    /// Region index per pixel (0 is the background).
    region_of: Vec<u16>,
    /// Per-region `(jitter direction, texture phase)`; entry 0 is the background.
    regions: Vec<([f32; 3], f32)>,
}

impl SceneLayout {
    pub fn generate(spec: &SceneSpec, scene_seed: u64) -> Self {
        let (h, w) = spec.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let mut labels = vec![0u8; h * w];
        let mut region_of = vec![0u16; h * w];
        let jitter = |rng: &mut ChaCha8Rng| {
            [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ]
        };
        let mut regions = vec![(jitter(&mut rng), rng.random_range(0.0f32..std::f32::consts::TAU))];
        let count = rng.random_range(spec.min_regions..=spec.max_regions.max(spec.min_regions));
        for r in 1..=count {
            let class = if spec.num_classes > 1 {
                rng.random_range(1..spec.num_classes) as u8
            } else {
                0
            };
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rect,
                1 => Shape::Ellipse,
                _ => Shape::Band,
            };
            let rh = (rng.random_range(spec.min_region_frac..=spec.max_region_frac) * h as f64).max(2.0);
            let rw = (rng.random_range(spec.min_region_frac..=spec.max_region_frac) * w as f64).max(2.0);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            regions.push((jitter(&mut rng), rng.random_range(0.0f32..std::f32::consts::TAU)));
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = match shape {
                        Shape::Rect => dy.abs() <= rh / 2.0 && dx.abs() <= rw / 2.0,
                        Shape::Ellipse => (dy / (rh / 2.0)).powi(2) + (dx / (rw / 2.0)).powi(2) <= 1.0,
                        Shape::Band => dy.abs() <= rh / 4.0,
                    };
                    if inside {
                        labels[y * w + x] = class;
                        region_of[y * w + x] = r as u16;
                    }
                }
            }
        }
        Self {
            labels: SegmentationMap {
                height: h,
                width: w,
                data: labels,
            },
            region_of,
            regions,
        }
    }
}

/// Class texture in `[-1, 1]`: flat background, then stripes at several
/// orientations and a checkerboard.
fn texture(class: u8, y: usize, x: usize, phase: f32) -> f32 {
    let (y, x) = (y as f32, x as f32);
    let tau = std::f32::consts::TAU;
    match class {
        0 => 0.0,
        c => {
            let period = 5.0 + ((c as f32 - 1.0) / 4.0).floor() * 2.0;
            match (c - 1) % 4 {
                0 => (tau * y / period + phase).sin(),
                1 => (tau * x / period + phase).sin(),
                2 => (tau * y / period + phase).sin().signum() * (tau * x / period + phase).sin().signum(),
                _ => (tau * (x + y) / (period * 1.4) + phase).sin(),
            }
        }
    }
}

/// Renders a layout under `style`, quantized to 8-bit levels.
pub fn render_scene(layout: &SceneLayout, style: &DomainStyle, scene_seed: u64) -> Image {
    let (h, w) = (layout.labels.height, layout.labels.width);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, &[style.tag()]));
    let cast = [
        rng.random_range(-1.0f32..1.0) * style.image_jitter,
        rng.random_range(-1.0f32..1.0) * style.image_jitter,
        rng.random_range(-1.0f32..1.0) * style.image_jitter,
    ];
    let mut img = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = layout.labels.data[p];
            let (jit, phase) = layout.regions[layout.region_of[p] as usize];
            let base = style.class_colors[class as usize % style.class_colors.len()];
            let tex = style.texture_amplitude * texture(class, y, x, phase);
            for c in 0..3 {
                let v = base[c] + style.region_jitter * jit[c] + cast[c] + tex;
                let v = (v - 0.5) * style.contrast + 0.5 + style.brightness;
                img[p * 3 + c] = v.clamp(0.0, 1.0).powf(style.gamma);
            }
        }
    }
    if style.blur_radius > 0 {
        img = box_blur(&img, h, w, style.blur_radius);
    }
    let noise = Normal::new(0.0f32, style.noise_sigma.max(0.0)).expect("valid sigma");
    for v in img.iter_mut() {
        let n = if style.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = quantize((*v + n).clamp(0.0, 1.0));
    }
    Image {
        height: h,
        width: w,
        data: img,
    }
}

pub(crate) fn quantize(v: f32) -> f32 {
    (v * 255.0).round() / 255.0
}

fn box_blur(img: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            for c in 0..3 {
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += img[(yy * w + xx) * 3 + c];
                    }
                }
                out[(y * w + x) * 3 + c] = acc / n;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: SceneSpec,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub wild_style: DomainStyle,
    pub source_train: DatasetSplit,
    pub target_train: DatasetSplit,
    pub target_val: DatasetSplit,
    pub wild_val: DatasetSplit,
}

impl Benchmark {
    pub fn split(&self, role: SplitRole) -> &DatasetSplit {
        match role {
            SplitRole::SourceTrain => &self.source_train,
            SplitRole::TargetTrain => &self.target_train,
            SplitRole::TargetVal => &self.target_val,
            SplitRole::WildVal => &self.wild_val,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Ground truth for target-train, regenerated from the scene seeds. For
    /// post-hoc diagnostics only; the split itself never carries labels.
    pub fn target_train_truth(&self) -> Vec<SegmentationMap> {
        self.target_train
            .samples
            .par_iter()
            .map(|s| SceneLayout::generate(&self.spec, s.seed).labels)
            .collect()
    }
}

fn role_tag(role: SplitRole) -> u64 {
    match role {
        SplitRole::SourceTrain => 1,
        SplitRole::TargetTrain => 2,
        SplitRole::TargetVal => 3,
        SplitRole::WildVal => 4,
    }
}

pub(crate) fn scene_seed(base: u64, role: SplitRole, index: usize) -> u64 {
    derive_seed(base, &[role_tag(role), index as u64])
}

fn generate_split(spec: &SceneSpec, style: &DomainStyle, role: SplitRole, count: usize) -> Result<DatasetSplit> {
    let samples: Vec<DomainSample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(spec.seed, role, i);
            let layout = SceneLayout::generate(spec, seed);
            let image = render_scene(&layout, style, seed);
            DomainSample {
                id: format!("{}_{i:05}", role.name()),
                seed,
                image,
                labels: role.labeled().then_some(layout.labels),
            }
        })
        .collect();
    DatasetSplit::new(role, samples)
}

/// Generates all four splits. Target-train samples are emitted unlabeled.
pub fn generate_benchmark(
    spec: &SceneSpec,
    source: &DomainStyle,
    target: &DomainStyle,
    wild: &DomainStyle,
    counts: SplitCounts,
) -> Result<Benchmark> {
    if source == target || source == wild || target == wild {
        return Err(Error::InvalidArgument("domain styles must be pairwise distinct".into()));
    }
    if spec.num_classes == 0 || spec.num_classes > 255 {
        return Err(Error::InvalidArgument(format!("num_classes {} outside 1..=254", spec.num_classes)));
    }
    for style in [source, target, wild] {
        if style.class_colors.len() < spec.num_classes {
            return Err(Error::InvalidArgument(format!(
                "style {} defines {} colors for {} classes",
                style.name,
                style.class_colors.len(),
                spec.num_classes
            )));
        }
    }
    if SplitRole::ALL.iter().any(|&r| counts.get(r) == 0) {
        return Err(Error::InvalidArgument("every split needs at least one sample".into()));
    }
    Ok(Benchmark {
        spec: spec.clone(),
        source_style: source.clone(),
        target_style: target.clone(),
        wild_style: wild.clone(),
        source_train: generate_split(spec, source, SplitRole::SourceTrain, counts.source_train)?,
        target_train: generate_split(spec, target, SplitRole::TargetTrain, counts.target_train)?,
        target_val: generate_split(spec, target, SplitRole::TargetVal, counts.target_val)?,
        wild_val: generate_split(spec, wild, SplitRole::WildVal, counts.wild_val)?,
    })
}

/// [`generate_benchmark`] with the stock source, target and wild styles.
pub fn standard_benchmark(spec: &SceneSpec, counts: SplitCounts) -> Result<Benchmark> {
    let k = spec.num_classes;
    generate_benchmark(spec, &DomainStyle::source(k), &DomainStyle::target(k), &DomainStyle::wild(k), counts)
}
