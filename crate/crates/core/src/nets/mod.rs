//! Shared encoder, the three classifier heads and the feature discriminator.
//!
//! Parameters live in plain structs; a forward pass first binds them onto a
//! [`Tape`] (as trainable leaves or as constants) and then runs on the
//! returned handles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Real, Tape, Tensor, Var};
use crate::dataio::{derive_seed, Image};
use crate::error::{Error, Result};

pub const NUM_HEADS: usize = 3;
/// Spatial reduction of the encoder.
pub const DOWNSAMPLE: usize = 4;
const DISC_KERNEL: usize = 4;
/// Smallest feature map the discriminator accepts.
pub const MIN_DISC_FEATURE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub head_channels: usize,
    pub disc_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub disc_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::with_classes(5)
    }
}

impl NetConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder_channels: vec![16, 32, 64, 64],
            encoder_strides: vec![1, 2, 2, 1],
            head_channels: 32,
            disc_channels: vec![4, 8, 16, 32, 1],
            leaky_slope: 0.01,
            disc_slope: 0.2,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("non-empty encoder")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return bad("encoder channels and strides must be non-empty and of equal length".into());
        }
        if self.encoder_strides.iter().product::<usize>() != DOWNSAMPLE {
            return bad(format!("encoder strides must multiply to {DOWNSAMPLE}"));
        }
        if self.disc_channels.last() != Some(&1) {
            return bad("discriminator must end in one channel".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T> {
    /// `O×C×kh×kw`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub shape: [usize; 4],
    pub stride: usize,
}

impl<T: Real> ConvLayer<T> {
    fn he(shape: [usize; 4], stride: usize, seed: u64) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Self {
            weight,
            bias: vec![T::zero(); shape[0]],
            shape,
            stride,
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        let w = Tensor::new(&self.shape, self.weight.clone()).expect("weight shape");
        let b = Tensor::new(&[self.shape[0]], self.bias.clone()).expect("bias shape");
        BoundConv {
            weight: tape.leaf(w, trainable),
            bias: tape.leaf(b, trainable),
            stride: self.stride,
        }
    }

    fn tensors_mut(&mut self) -> [&mut Vec<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn cast<U: Real>(&self) -> ConvLayer<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        ConvLayer {
            weight: c(&self.weight),
            bias: c(&self.bias),
            shape: self.shape,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

/// Tape handles of one parameter set, in the same order as
/// [`ParamSet::tensors_mut`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub layers: Vec<BoundConv>,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// An ordered stack of conv layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// All weights and biases as one vector.
    pub fn flat(&self) -> Vec<T> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Encoder, three heads and the discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams<T> {
    pub config: NetConfig,
    pub encoder: ParamSet<T>,
    pub heads: Vec<ParamSet<T>>,
    pub discriminator: ParamSet<T>,
}

const TAG_ENCODER: u64 = 0xE0;
const TAG_HEAD: u64 = 0xC0;
const TAG_DISC: u64 = 0xD0;

/// He-initialised parameters with zero biases. Each head draws from its own
/// sub-seed.
pub fn init_params<T: Real>(config: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    config.validate()?;
    let mut encoder = Vec::new();
    let mut c_in = 3;
    for (i, (&c, &s)) in config.encoder_channels.iter().zip(&config.encoder_strides).enumerate() {
        encoder.push(ConvLayer::he([c, c_in, 3, 3], s, derive_seed(seed, &[TAG_ENCODER, i as u64])));
        c_in = c;
    }
    let f = config.feature_channels();
    let hc = config.head_channels;
    let heads = (0..NUM_HEADS as u64)
        .map(|k| {
            let sub = |l: u64| derive_seed(seed, &[TAG_HEAD, k, l]);
            ParamSet {
                layers: vec![
                    ConvLayer::he([hc, f, 3, 3], 1, sub(0)),
                    ConvLayer::he([hc, hc, 3, 3], 1, sub(1)),
                    ConvLayer::he([config.num_classes, hc, 1, 1], 1, sub(2)),
                ],
            }
        })
        .collect();
    let mut disc = Vec::new();
    let mut c_in = f;
    for (i, &c) in config.disc_channels.iter().enumerate() {
        disc.push(ConvLayer::he(
            [c, c_in, DISC_KERNEL, DISC_KERNEL],
            2,
            derive_seed(seed, &[TAG_DISC, i as u64]),
        ));
        c_in = c;
    }
    Ok(NetParams {
        config: config.clone(),
        encoder: ParamSet { layers: encoder },
        heads,
        discriminator: ParamSet { layers: disc },
    })
}

impl<T: Real> NetParams<T> {
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
            discriminator: self.discriminator.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.heads.iter().all(|h| h.is_finite()) && self.discriminator.is_finite()
    }

    /// Same shapes, all zeros (momentum buffers, gradient accumulators).
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for set in z.sets_mut() {
            for t in set.tensors_mut() {
                t.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        z
    }

    /// Encoder, heads, discriminator, in checkpoint order.
    pub fn sets(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut out = vec![("encoder".to_string(), &self.encoder)];
        out.extend(self.heads.iter().enumerate().map(|(k, h)| (format!("head{}", k + 1), h)));
        out.push(("discriminator".to_string(), &self.discriminator));
        out
    }

    pub fn sets_mut(&mut self) -> Vec<&mut ParamSet<T>> {
        let mut out = vec![&mut self.encoder];
        out.extend(self.heads.iter_mut());
        out.push(&mut self.discriminator);
        out
    }

    /// Zeroes the final 1×1 layer of every head (uniform predictions).
    pub fn zero_head_outputs(&mut self) {
        for h in &mut self.heads {
            let last = h.layers.last_mut().expect("head layers");
            last.weight.iter_mut().for_each(|v| *v = T::zero());
            last.bias.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Stacks images into an `N×3×H×W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "image batch",
                lhs: vec![h, w],
                rhs: vec![img.height, img.width],
            });
        }
        data.extend(img.to_planar().into_iter().map(|v| T::lit(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// `N×3×H×W` → `N×F×H/4×W/4`.
pub fn encoder_forward<T: Real>(tape: &mut Tape<T>, cfg: &NetConfig, enc: &Bound, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidShape {
            op: "encoder",
            detail: format!("expected N×3×H×W input, got {shape:?}"),
        });
    }
    if !shape[2].is_multiple_of(DOWNSAMPLE) || !shape[3].is_multiple_of(DOWNSAMPLE) {
        return Err(Error::InvalidShape {
            op: "encoder",
            detail: format!(
                "height and width must be divisible by {DOWNSAMPLE}, got {}×{}",
                shape[2], shape[3]
            ),
        });
    }
    let mut h = x;
    for l in &enc.layers {
        h = tape.conv2d(h, l.weight, Some(l.bias), l.stride, 1)?;
        h = tape.leaky_relu(h, cfg.leaky_slope)?;
    }
    Ok(h)
}

/// Classifier outputs: pre-softmax logits at feature resolution and
/// probabilities at input resolution (`N×K×H×W`).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
}

pub fn classifier_forward<T: Real>(tape: &mut Tape<T>, cfg: &NetConfig, head: &Bound, features: Var) -> Result<HeadOutput> {
    let [a, b, c] = head.layers[..] else {
        return Err(Error::InvalidArgument(format!("head has {} layers, expected 3", head.layers.len())));
    };
    let mut h = tape.conv2d(features, a.weight, Some(a.bias), 1, 1)?;
    h = tape.leaky_relu(h, cfg.leaky_slope)?;
    h = tape.conv2d(h, b.weight, Some(b.bias), 1, 1)?;
    h = tape.leaky_relu(h, cfg.leaky_slope)?;
    let logits = tape.conv2d(h, c.weight, Some(c.bias), 1, 0)?;
    let up = tape.upsample_bilinear(logits, DOWNSAMPLE)?;
    let probs = tape.softmax(up, 1)?;
    Ok(HeadOutput { logits, probs })
}

/// Padding that keeps a 4×4/stride-2 layer defined on tiny inputs: one
/// pixel on every side, more on the bottom/right once the map shrinks
/// below 3.
fn disc_padding(h: usize, w: usize) -> Padding {
    Padding {
        top: 1,
        left: 1,
        bottom: 1.max(3usize.saturating_sub(h)),
        right: 1.max(3usize.saturating_sub(w)),
    }
}

/// Feature map → `N×1×h'×w'` patch logits.
pub fn discriminator_forward<T: Real>(tape: &mut Tape<T>, cfg: &NetConfig, disc: &Bound, features: Var) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 || shape[1] != cfg.feature_channels() {
        return Err(Error::InvalidShape {
            op: "discriminator",
            detail: format!("expected encoder features N×{}×h×w, got {shape:?}", cfg.feature_channels()),
        });
    }
    if shape[2] < MIN_DISC_FEATURE || shape[3] < MIN_DISC_FEATURE {
        return Err(Error::InvalidShape {
            op: "discriminator",
            detail: format!(
                "feature map {}×{} is too small; inputs must be at least {}×{} pixels",
                shape[2],
                shape[3],
                MIN_DISC_FEATURE * DOWNSAMPLE,
                MIN_DISC_FEATURE * DOWNSAMPLE
            ),
        });
    }
    let mut h = features;
    let n = disc.layers.len();
    for (i, l) in disc.layers.iter().enumerate() {
        let s = tape.shape(h).to_vec();
        h = tape.conv2d_padded(h, l.weight, Some(l.bias), l.stride, disc_padding(s[2], s[3]))?;
        if i + 1 < n {
            h = tape.leaky_relu(h, cfg.disc_slope)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests;
