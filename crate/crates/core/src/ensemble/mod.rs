//! The meta-learner: a sparse multinomial logistic regression that fuses the
//! three heads per class, plus confidence-thresholded pseudo-labels.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataio::{SegmentationMap, IGNORE};
use crate::error::{Error, Result};
use crate::nets::NUM_HEADS;

/// Per-pixel class distribution, planar `K×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::InvalidShape {
                op: "probability map",
                detail: format!("{classes}×{height}×{width} needs {} values, got {}", classes * height * width, data.len()),
            });
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// Splits an `N×K×H×W` tensor into per-sample maps.
    pub fn from_batch(t: &Tensor<f32>) -> Result<Vec<Self>> {
        let [n, k, h, w] = t.shape()[..] else {
            return Err(Error::InvalidShape {
                op: "probability map",
                detail: format!("expected N×K×H×W, got {:?}", t.shape()),
            });
        };
        let per = k * h * w;
        (0..n)
            .map(|i| Self::new(k, h, w, t.data()[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f32 {
        self.data[class * self.pixels() + pixel]
    }

    /// `(argmax class, max probability)` per pixel; ties go to the lower id.
    pub fn argmax_conf(&self) -> Vec<(u8, f32)> {
        let n = self.pixels();
        (0..n)
            .map(|p| {
                let mut best = (0u8, self.data[p]);
                for c in 1..self.classes {
                    let v = self.data[c * n + p];
                    if v > best.1 {
                        best = (c as u8, v);
                    }
                }
                best
            })
            .collect()
    }

    pub fn argmax(&self) -> SegmentationMap {
        SegmentationMap {
            height: self.height,
            width: self.width,
            data: self.argmax_conf().into_iter().map(|(c, _)| c).collect(),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        (self.classes, self.height, self.width) == (other.classes, other.height, other.width)
    }
}

/// Three per-class weight vectors, one per head. No bias term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaWeights {
    pub w: [Vec<f64>; NUM_HEADS],
}

impl MetaWeights {
    pub fn constant(classes: usize, value: f64) -> Self {
        Self {
            w: std::array::from_fn(|_| vec![value; classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w[0].len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().flatten().all(|v| v.is_finite())
    }

    fn flat(&self) -> Vec<f64> {
        self.w.concat()
    }

    fn from_flat(k: usize, v: &[f64]) -> Self {
        Self {
            w: std::array::from_fn(|i| v[i * k..(i + 1) * k].to_vec()),
        }
    }
}

fn check_meta_shapes(maps: [&ProbabilityMap; NUM_HEADS], w: &MetaWeights) -> Result<()> {
    let first = maps[0];
    if maps.iter().any(|m| !m.same_shape(first)) || w.w.iter().any(|v| v.len() != first.classes) {
        return Err(Error::ShapeMismatch {
            op: "meta_forward",
            lhs: maps.iter().flat_map(|m| [m.classes, m.height, m.width]).collect(),
            rhs: w.w.iter().map(|v| v.len()).collect(),
        });
    }
    Ok(())
}

/// Pre-softmax scores `z_c = w1[c]·p1_c + w2[c]·p2_c + w3[c]·p3_c`, planar
/// `K×H×W`.
pub fn meta_scores(maps: [&ProbabilityMap; NUM_HEADS], w: &MetaWeights) -> Result<Vec<f64>> {
    check_meta_shapes(maps, w)?;
    let (k, n) = (maps[0].classes, maps[0].pixels());
    let mut z = vec![0.0; k * n];
    for c in 0..k {
        for p in 0..n {
            z[c * n + p] = (0..NUM_HEADS).map(|h| w.w[h][c] * maps[h].get(c, p) as f64).sum();
        }
    }
    Ok(z)
}

/// Softmax over classes of [`meta_scores`].
pub fn meta_forward(maps: [&ProbabilityMap; NUM_HEADS], w: &MetaWeights) -> Result<ProbabilityMap> {
    let z = meta_scores(maps, w)?;
    let first = maps[0];
    let (k, n) = (first.classes, first.pixels());
    let mut out = vec![0.0f32; k * n];
    for p in 0..n {
        let max = (0..k).map(|c| z[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..k).map(|c| (z[c * n + p] - max).exp()).sum();
        for c in 0..k {
            out[c * n + p] = ((z[c * n + p] - max).exp() / total) as f32;
        }
    }
    ProbabilityMap::new(k, first.height, first.width, out)
}

/// Counted pixels of a fitting problem: `3K` features and a label each.
#[derive(Clone, Debug, Default)]
pub struct MetaDataset {
    classes: usize,
    /// Row-major `pixels × 3K`, head-major within a row.
    features: Vec<f32>,
    labels: Vec<u8>,
}

impl MetaDataset {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Adds every non-ignored pixel of one image.
    pub fn push(&mut self, maps: [&ProbabilityMap; NUM_HEADS], labels: &SegmentationMap) -> Result<()> {
        let first = maps[0];
        if maps.iter().any(|m| !m.same_shape(first)) || first.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "meta dataset",
                lhs: vec![self.classes],
                rhs: maps.iter().map(|m| m.classes).collect(),
            });
        }
        if (labels.height, labels.width) != (first.height, first.width) {
            return Err(Error::ShapeMismatch {
                op: "meta dataset labels",
                lhs: vec![first.height, first.width],
                rhs: vec![labels.height, labels.width],
            });
        }
        labels.validate(self.classes, "meta-learner labels")?;
        for (p, &y) in labels.data.iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            for m in maps {
                for c in 0..self.classes {
                    self.features.push(m.get(c, p));
                }
            }
            self.labels.push(y);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaOptimizer {
    /// Damped Newton with a backtracking line search.
    #[default]
    Newton,
    /// Plain gradient descent with a backtracking line search.
    GradientDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFitOptions {
    pub optimizer: MetaOptimizer,
    pub max_iter: usize,
    /// Stop once the relative loss decrease of an accepted step falls below this.
    pub rel_tol: f64,
    /// Ridge `l2/2 · |w|²` added to the refit objective. Pseudo-labels are
    /// close to separable by construction, so without it the refit drives
    /// the weights (and every confidence) to infinity.
    #[serde(default = "default_refit_l2")]
    pub refit_l2: f64,
}

fn default_refit_l2() -> f64 {
    1e-3
}

impl Default for MetaFitOptions {
    fn default() -> Self {
        Self {
            optimizer: MetaOptimizer::Newton,
            max_iter: 500,
            rel_tol: 1e-6,
            refit_l2: default_refit_l2(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss at the start and after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("initial loss")
    }
}

const CHUNK: usize = 8192;

struct Eval {
    loss: f64,
    grad: Vec<f64>,
    hess: Option<Vec<f64>>,
}

/// Mean cross-entropy, gradient and (optionally) Hessian at `w`. Chunk
/// partials are combined in chunk order.
fn evaluate(data: &MetaDataset, w: &[f64], l2: f64, with_hess: bool) -> Eval {
    let k = data.classes;
    let d = NUM_HEADS * k;
    let partials: Vec<Eval> = data
        .labels
        .par_chunks(CHUNK)
        .zip(data.features.par_chunks(CHUNK * d))
        .map(|(labels, feats)| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            let mut hess = with_hess.then(|| vec![0.0; d * d]);
            let mut z = vec![0.0; k];
            let mut s = vec![0.0; k];
            for (i, &y) in labels.iter().enumerate() {
                let x = &feats[i * d..(i + 1) * d];
                for c in 0..k {
                    z[c] = (0..NUM_HEADS).map(|h| w[h * k + c] * x[h * k + c] as f64).sum();
                }
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..k {
                    s[c] = (z[c] - max).exp();
                    total += s[c];
                }
                loss += total.ln() + max - z[y as usize];
                for v in s.iter_mut() {
                    *v /= total;
                }
                for h in 0..NUM_HEADS {
                    for c in 0..k {
                        let r = s[c] - if c == y as usize { 1.0 } else { 0.0 };
                        grad[h * k + c] += r * x[h * k + c] as f64;
                    }
                }
                if let Some(hm) = hess.as_mut() {
                    for a in 0..d {
                        let (ca, xa) = (a % k, x[a] as f64);
                        for b in a..d {
                            let cb = b % k;
                            let curv = if ca == cb { s[ca] - s[ca] * s[cb] } else { -s[ca] * s[cb] };
                            hm[a * d + b] += xa * x[b] as f64 * curv;
                        }
                    }
                }
            }
            Eval { loss, grad, hess }
        })
        .collect();
    let n = data.len() as f64;
    let mut out = Eval {
        loss: 0.0,
        grad: vec![0.0; d],
        hess: with_hess.then(|| vec![0.0; d * d]),
    };
    for p in partials {
        out.loss += p.loss;
        for (a, b) in out.grad.iter_mut().zip(&p.grad) {
            *a += b;
        }
        if let (Some(acc), Some(h)) = (out.hess.as_mut(), p.hess) {
            for (a, b) in acc.iter_mut().zip(&h) {
                *a += b;
            }
        }
    }
    out.loss /= n;
    out.grad.iter_mut().for_each(|g| *g /= n);
    if let Some(h) = out.hess.as_mut() {
        for a in 0..d {
            for b in a..d {
                h[a * d + b] /= n;
                h[b * d + a] = h[a * d + b];
            }
            h[a * d + a] += l2;
        }
    }
    if l2 > 0.0 {
        out.loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        for (g, v) in out.grad.iter_mut().zip(w) {
            *g += l2 * v;
        }
    }
    out
}

fn newton_direction(e: &Eval, d: usize) -> Option<Vec<f64>> {
    let h = e.hess.as_ref()?;
    let trace: f64 = (0..d).map(|i| h[i * d + i]).sum();
    let ridge = 1e-10 + 1e-8 * trace / d as f64;
    let mut m = DMatrix::from_row_slice(d, d, h);
    for i in 0..d {
        m[(i, i)] += ridge;
    }
    let chol = m.cholesky()?;
    let rhs = DVector::from_iterator(d, e.grad.iter().map(|g| -g));
    let dir = chol.solve(&rhs);
    let v: Vec<f64> = dir.iter().copied().collect();
    v.iter().all(|x| x.is_finite()).then_some(v)
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Minimises the mean cross-entropy of [`meta_forward`] from `init`.
pub fn meta_fit_from(data: &MetaDataset, init: &MetaWeights, opts: &MetaFitOptions) -> Result<(MetaWeights, FitReport)> {
    fit(data, init, opts, 0.0)
}

fn fit(data: &MetaDataset, init: &MetaWeights, opts: &MetaFitOptions, l2: f64) -> Result<(MetaWeights, FitReport)> {
    if data.is_empty() {
        return Err(Error::NoLabeledPixels("meta-learner fit"));
    }
    let k = data.classes;
    let d = NUM_HEADS * k;
    if init.classes() != k {
        return Err(Error::ShapeMismatch {
            op: "meta_fit",
            lhs: vec![k],
            rhs: vec![init.classes()],
        });
    }
    let mut w = init.flat();
    let mut e = evaluate(data, &w, l2, opts.optimizer == MetaOptimizer::Newton);
    let mut losses = vec![e.loss];
    let mut converged = false;
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut dir = match opts.optimizer {
            MetaOptimizer::Newton => newton_direction(&e, d),
            MetaOptimizer::GradientDescent => None,
        }
        .unwrap_or_else(|| e.grad.iter().map(|g| -g).collect());
        let mut slope: f64 = dir.iter().zip(&e.grad).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            dir = e.grad.iter().map(|g| -g).collect();
            slope = -e.grad.iter().map(|g| g * g).sum::<f64>();
        }
        if slope == 0.0 {
            converged = true;
            break;
        }
        let mut t = match opts.optimizer {
            MetaOptimizer::Newton => 1.0,
            MetaOptimizer::GradientDescent => (step * 2.0).min(1e6),
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let l = evaluate(data, &cand, l2, false).loss;
            if l.is_finite() && l <= e.loss + ARMIJO * t * slope {
                accepted = Some((cand, l));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, l)) = accepted else {
            converged = true;
            break;
        };
        step = t;
        let prev = e.loss;
        w = cand;
        e = evaluate(data, &w, l2, opts.optimizer == MetaOptimizer::Newton);
        debug_assert!((e.loss - l).abs() <= 1e-9 * l.abs().max(1.0));
        losses.push(e.loss);
        if (prev - e.loss) / prev.abs().max(1e-12) < opts.rel_tol {
            converged = true;
            break;
        }
    }
    let weights = MetaWeights::from_flat(k, &w);
    if !weights.is_finite() {
        return Err(Error::NonFinite {
            op: "meta_fit",
            node: iterations,
        });
    }
    Ok((
        weights,
        FitReport {
            losses,
            iterations,
            converged,
        },
    ))
}

/// Fit from the all-ones initialisation.
pub fn meta_fit(data: &MetaDataset, opts: &MetaFitOptions) -> Result<(MetaWeights, FitReport)> {
    meta_fit_from(data, &MetaWeights::constant(data.classes, 1.0), opts)
}

/// Refit on target predictions against pseudo-labels, warm-started from
/// the previous weights. The objective carries the `refit_l2` ridge; the
/// reported losses include it.
pub fn meta_refit(data: &MetaDataset, previous: &MetaWeights, opts: &MetaFitOptions) -> Result<(MetaWeights, FitReport)> {
    if data.is_empty() {
        return Err(Error::NoLabeledPixels("meta-learner refit (pseudo-labels are all ignore)"));
    }
    fit(data, previous, opts, opts.refit_l2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabelMode {
    /// Keep pixels whose max probability reaches the threshold.
    #[default]
    Global,
    /// Per class, keep the most confident fraction of its argmax pixels.
    PerClassQuantile,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub threshold: f64,
    pub mode: PseudoLabelMode,
    /// Kept fraction per class in quantile mode.
    pub quantile: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            mode: PseudoLabelMode::Global,
            quantile: 0.5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("pseudo-label threshold {} outside [0,1]", self.threshold)));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::Config(format!("pseudo-label quantile {} outside (0,1]", self.quantile)));
        }
        Ok(())
    }
}

/// Argmax labels where confident, [`IGNORE`] elsewhere.
pub fn generate_pseudo_labels(maps: &[ProbabilityMap], cfg: &PseudoLabelConfig) -> Vec<SegmentationMap> {
    let scored: Vec<Vec<(u8, f32)>> = maps.par_iter().map(|m| m.argmax_conf()).collect();
    let class_floor: Option<Vec<f32>> = (cfg.mode == PseudoLabelMode::PerClassQuantile).then(|| {
        let k = maps.first().map_or(0, |m| m.classes);
        let mut per_class: Vec<Vec<f32>> = vec![Vec::new(); k];
        for s in &scored {
            for &(c, conf) in s {
                per_class[c as usize].push(conf);
            }
        }
        per_class
            .into_iter()
            .map(|mut v| {
                if v.is_empty() {
                    return f32::INFINITY;
                }
                v.sort_by(|a, b| b.total_cmp(a));
                let keep = ((cfg.quantile * v.len() as f64).ceil() as usize).clamp(1, v.len());
                v[keep - 1]
            })
            .collect()
    });
    maps.iter()
        .zip(scored)
        .map(|(m, s)| SegmentationMap {
            height: m.height,
            width: m.width,
            data: s
                .into_iter()
                .map(|(c, conf)| {
                    let keep = match &class_floor {
                        None => conf as f64 >= cfg.threshold,
                        Some(floor) => conf >= floor[c as usize],
                    };
                    if keep {
                        c
                    } else {
                        IGNORE
                    }
                })
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub class: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl WeightRow {
    /// Head (1-based) with the largest weight; ties go to the lower index.
    pub fn dominant(&self) -> usize {
        let ws = [self.w1, self.w2, self.w3];
        (0..3).fold(0, |best, i| if ws[i] > ws[best] { i } else { best }) + 1
    }
}

/// Class × head weight table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

pub fn weight_report(w: &MetaWeights) -> WeightTable {
    WeightTable {
        rows: (0..w.classes())
            .map(|c| WeightRow {
                class: c,
                w1: w.w[0][c],
                w2: w.w[1][c],
                w3: w.w[2][c],
            })
            .collect(),
    }
}

impl WeightTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            wr.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<WeightRow>, _>>()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { rows })
    }
}
