//! Image translation between domains and the three source representations
//! fed to the classifier heads.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{Error, Result};

/// An invertible source↔target image map. Outputs are clipped to `[0,1]`.
///
/// Any image-to-image model can stand in here; the trainer only sees this
/// interface.
pub trait Translator: Debug + Send + Sync {
    /// Source → target style.
    fn forward(&self, x: &Image) -> Image;
    /// Target → source style.
    fn inverse(&self, x: &Image) -> Image;
    /// Parameters for checkpointing.
    fn to_json(&self) -> serde_json::Value;
}

/// Per-channel `y = scale·x + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTranslator {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl AffineTranslator {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            shift: [0.0; 3],
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("affine") => Ok(serde_json::from_value(v["params"].clone())?),
            other => Err(Error::Checkpoint(format!("unsupported translator kind {other:?}"))),
        }
    }

    fn apply(&self, x: &Image, f: impl Fn(usize, f64) -> f64) -> Image {
        let data = x
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                let mut out = [0.0f32; 3];
                for c in 0..3 {
                    out[c] = f(c, px[c] as f64).clamp(0.0, 1.0) as f32;
                }
                out
            })
            .collect();
        Image {
            height: x.height,
            width: x.width,
            data,
        }
    }
}

impl Translator for AffineTranslator {
    fn forward(&self, x: &Image) -> Image {
        self.apply(x, |c, v| self.scale[c] * v + self.shift[c])
    }

    fn inverse(&self, x: &Image) -> Image {
        self.apply(x, |c, v| (v - self.shift[c]) / self.scale[c])
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "affine", "params": self })
    }
}

/// Per-channel mean and population standard deviation over a corpus.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

const DEGENERATE_STD: f64 = 1e-9;

/// Moment-matching fit: the translated source matches the target's
/// per-channel mean and standard deviation. Channels with zero variance on
/// either side keep scale 1.
pub fn fit_translator<'a, 'b>(
    source: impl IntoIterator<Item = &'a Image>,
    target: impl IntoIterator<Item = &'b Image>,
) -> Result<AffineTranslator> {
    let source: Vec<&Image> = source.into_iter().collect();
    let target: Vec<&Image> = target.into_iter().collect();
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("translator fit needs non-empty corpora".into()));
    }
    let (ms, ss) = channel_stats(source.iter().copied());
    let (mt, st) = channel_stats(target.iter().copied());
    let mut tr = AffineTranslator::identity();
    for c in 0..3 {
        let scale = if ss[c] < DEGENERATE_STD || st[c] < DEGENERATE_STD {
            log::warn!("channel {c} has zero variance (source std {}, target std {}); scale clamped to 1", ss[c], st[c]);
            1.0
        } else {
            st[c] / ss[c]
        };
        tr.scale[c] = scale;
        tr.shift[c] = mt[c] - scale * ms[c];
    }
    Ok(tr)
}

/// The three views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTriple {
    /// The input itself.
    pub t1: Image,
    /// Reconstruction through target space.
    pub t2: Image,
    /// Target-styled.
    pub t3: Image,
}

impl TranslationTriple {
    /// View `k` in `0..3`.
    pub fn get(&self, k: usize) -> &Image {
        match k {
            0 => &self.t1,
            1 => &self.t2,
            _ => &self.t3,
        }
    }

    pub fn into_array(self) -> [Image; 3] {
        [self.t1, self.t2, self.t3]
    }
}

pub fn make_triple(x: &Image, tr: &dyn Translator) -> TranslationTriple {
    let t3 = tr.forward(x);
    TranslationTriple {
        t1: x.clone(),
        t2: tr.inverse(&t3),
        t3,
    }
}

/// Target-image views matched to the head that trained on each source view:
/// source-styled for head 1, its reconstruction through target space for
/// head 2, and the unaltered image for head 3 (already target-styled).
pub fn make_target_triple(x: &Image, tr: &dyn Translator) -> TranslationTriple {
    let t1 = tr.inverse(x);
    TranslationTriple {
        t2: tr.inverse(&tr.forward(&t1)),
        t1,
        t3: x.clone(),
    }
}

/// Which view of a triple feeds the feature-alignment path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentRep {
    T1,
    T2,
    #[default]
    T3,
}

impl AlignmentRep {
    pub fn index(self) -> usize {
        match self {
            AlignmentRep::T1 => 0,
            AlignmentRep::T2 => 1,
            AlignmentRep::T3 => 2,
        }
    }
}

pub fn select_alignment_rep(triple: &TranslationTriple, rep: AlignmentRep) -> &Image {
    triple.get(rep.index())
}
