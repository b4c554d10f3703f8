//! Training objectives built on the tape: masked segmentation cross-entropy,
//! adversarial feature alignment, the Charbonnier entropy penalty and the
//! cosine discrepancy between two heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var, PROB_FLOOR};
use crate::dataio::{SegmentationMap, IGNORE};
use crate::error::{Error, Result};
use crate::nets::Bound;

/// Inner epsilon of the Charbonnier penalty.
pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_ent: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 0.001,
            lambda_ent: 0.005,
            eta: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_ent >= 0.0 && self.eta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with eta > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegCe {
    pub loss: Var,
    pub counted: usize,
}

impl SegCe {
    /// True when every pixel was ignored; the loss is then a constant zero.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

/// Mean of `−log p[target]` over non-ignored pixels, with `p` floored at
/// 1e-12. `probs` is `N×K×H×W`, one label map per sample.
pub fn seg_cross_entropy<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[&SegmentationMap]) -> Result<SegCe> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "seg_cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut onehot = vec![T::zero(); n * k * hw];
    let mut pad = vec![T::zero(); n * hw];
    let mut counted = 0;
    for (i, l) in labels.iter().enumerate() {
        if (l.height, l.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "seg_cross_entropy",
                lhs: vec![h, w],
                rhs: vec![l.height, l.width],
            });
        }
        l.validate(k, "seg_cross_entropy target")?;
        for (p, &c) in l.data.iter().enumerate() {
            if c == IGNORE {
                pad[i * hw + p] = T::one();
            } else {
                onehot[(i * k + c as usize) * hw + p] = T::one();
                counted += 1;
            }
        }
    }
    if counted == 0 {
        let loss = tape.constant(Tensor::scalar(T::zero()));
        return Ok(SegCe { loss, counted });
    }
    let mask = tape.constant(Tensor::new(&shape, onehot)?);
    let pad = tape.constant(Tensor::new(&[n, h, w], pad)?);
    let picked = tape.mul(probs, mask)?;
    let picked = tape.sum_axes(picked, &[1], false)?;
    let picked = tape.add(picked, pad)?;
    let picked = tape.clamp_min(picked, PROB_FLOOR)?;
    let logp = tape.log(picked)?;
    let total = tape.sum_all(logp)?;
    let loss = tape.scale(total, -1.0 / counted as f64)?;
    Ok(SegCe { loss, counted })
}

/// Generator-side objective for the feature-alignment game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// `−mean log σ(d_tgt)`.
    #[default]
    NonSaturating,
    /// `mean log(1 − σ(d_tgt))`, the literal minimax form.
    Minimax,
}

fn mean_log_sigmoid<T: Real>(tape: &mut Tape<T>, logits: Var, negate: bool) -> Result<Var> {
    let x = if negate { tape.scale(logits, -1.0)? } else { logits };
    let s = tape.sigmoid(x)?;
    let s = tape.clamp_min(s, PROB_FLOOR)?;
    let l = tape.log(s)?;
    tape.mean_all(l)
}

/// Discriminator loss `−[mean log σ(d_src) + mean log(1 − σ(d_tgt))]`;
/// source-translated features are the positive class.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, d_source: Var, d_target: Var) -> Result<Var> {
    let a = mean_log_sigmoid(tape, d_source, false)?;
    let b = mean_log_sigmoid(tape, d_target, true)?;
    let s = tape.add(a, b)?;
    tape.scale(s, -1.0)
}

/// Generator loss on target logits, pushing target features toward the
/// source side.
pub fn generator_loss<T: Real>(tape: &mut Tape<T>, d_target: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::NonSaturating => {
            let m = mean_log_sigmoid(tape, d_target, false)?;
            tape.scale(m, -1.0)
        }
        GanMode::Minimax => mean_log_sigmoid(tape, d_target, true),
    }
}

/// `(d_loss, g_loss)` evaluated on one tape.
pub fn adversarial_losses<T: Real>(
    tape: &mut Tape<T>,
    d_source: Var,
    d_target: Var,
    mode: GanMode,
) -> Result<(Var, Var)> {
    Ok((
        discriminator_loss(tape, d_source, d_target)?,
        generator_loss(tape, d_target, mode)?,
    ))
}

/// Mean over pixels of `(ĥ² + 1e-6)^η`, with `ĥ` the entropy normalised
/// by `ln K`.
pub fn entropy_charbonnier<T: Real>(tape: &mut Tape<T>, probs: Var, eta: f64) -> Result<Var> {
    let k = tape.shape(probs).get(1).copied().unwrap_or(0);
    if k < 2 || eta <= 0.0 {
        return Err(Error::InvalidArgument(format!("entropy needs K ≥ 2 and eta > 0 (K={k}, eta={eta})")));
    }
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let plogp = tape.mul(probs, logp)?;
    let neg_ent = tape.sum_axes(plogp, &[1], false)?;
    let h = tape.scale(neg_ent, -1.0 / (k as f64).ln())?;
    let h2 = tape.mul(h, h)?;
    let inner = tape.add_scalar(h2, CHARBONNIER_EPS * CHARBONNIER_EPS)?;
    let phi = tape.pow_scalar(inner, eta)?;
    tape.mean_all(phi)
}

/// `|⟨a, b⟩| / (‖a‖‖b‖)` on plain vectors.
pub fn cosine_similarity_abs(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_discrepancy",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_discrepancy"));
    }
    Ok(dot.abs() / (na * nb))
}

/// Absolute cosine between the concatenated parameters of two heads.
pub fn cosine_discrepancy<T: Real>(tape: &mut Tape<T>, a: &Bound, b: &Bound) -> Result<Var> {
    let (va, vb) = (a.vars(), b.vars());
    if va.len() != vb.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_discrepancy",
            lhs: vec![va.len()],
            rhs: vec![vb.len()],
        });
    }
    let mut acc: Option<(Var, Var, Var)> = None;
    for (&x, &y) in va.iter().zip(&vb) {
        let xy = tape.mul(x, y)?;
        let dot = tape.sum_all(xy)?;
        let xx = tape.mul(x, x)?;
        let nx = tape.sum_all(xx)?;
        let yy = tape.mul(y, y)?;
        let ny = tape.sum_all(yy)?;
        acc = Some(match acc {
            None => (dot, nx, ny),
            Some((d, a, b)) => (tape.add(d, dot)?, tape.add(a, nx)?, tape.add(b, ny)?),
        });
    }
    let (dot, nx, ny) = acc.ok_or(Error::ZeroNorm("cosine_discrepancy"))?;
    if tape.value(nx).item() == T::zero() || tape.value(ny).item() == T::zero() {
        return Err(Error::ZeroNorm("cosine_discrepancy"));
    }
    let norms = tape.mul(nx, ny)?;
    let inv = tape.pow_scalar(norms, -0.5)?;
    let abs = tape.abs(dot)?;
    tape.mul(abs, inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Per-head inputs of one training step.
pub struct HeadInputs<'a> {
    /// Head prediction on its source view.
    pub source_probs: Var,
    pub source_labels: &'a [&'a SegmentationMap],
    /// Head prediction on the target batch.
    pub target_probs: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadLosses {
    pub seg: Var,
    pub entropy: Var,
    pub pseudo: Option<Var>,
    pub total: Var,
}

pub struct StageLosses {
    pub heads: Vec<HeadLosses>,
    pub g_loss: Option<Var>,
    pub total: Var,
}

impl StageLosses {
    /// Every component as `(name, value)`, heads numbered from 1.
    pub fn components<T: Real>(&self, tape: &Tape<T>) -> Vec<(String, f64)> {
        let v = |x: Var| tape.value(x).item().to_f64().unwrap_or(f64::NAN);
        let mut out = Vec::new();
        for (k, h) in self.heads.iter().enumerate() {
            out.push((format!("seg_{}", k + 1), v(h.seg)));
            out.push((format!("ent_{}", k + 1), v(h.entropy)));
            if let Some(p) = h.pseudo {
                out.push((format!("pseudo_{}", k + 1), v(p)));
            }
            out.push((format!("total_{}", k + 1), v(h.total)));
        }
        if let Some(g) = self.g_loss {
            out.push(("g_loss".into(), v(g)));
        }
        out.push(("total".into(), v(self.total)));
        out
    }
}

/// Sum over heads of `seg + λ_adv·g + λ_ent·ent`, plus the pseudo-label
/// cross-entropy on the target batch in stage 2. `g_loss` is shared by all
/// heads (it depends on the encoder only); pass `None` to disable alignment.
pub fn stage_losses<T: Real>(
    tape: &mut Tape<T>,
    stage: Stage,
    heads: &[HeadInputs<'_>],
    g_loss: Option<Var>,
    pseudo_labels: Option<&[&SegmentationMap]>,
    weights: &LossWeights,
) -> Result<StageLosses> {
    weights.validate()?;
    if stage == Stage::Stage2 && pseudo_labels.is_none() {
        return Err(Error::InvalidArgument("stage 2 requires pseudo-labels".into()));
    }
    let mut out = Vec::with_capacity(heads.len());
    let mut total: Option<Var> = None;
    for h in heads {
        let seg = seg_cross_entropy(tape, h.source_probs, h.source_labels)?.loss;
        let entropy = entropy_charbonnier(tape, h.target_probs, weights.eta)?;
        let mut t = seg;
        if let Some(g) = g_loss {
            let wg = tape.scale(g, weights.lambda_adv)?;
            t = tape.add(t, wg)?;
        }
        let we = tape.scale(entropy, weights.lambda_ent)?;
        t = tape.add(t, we)?;
        let pseudo = match (stage, pseudo_labels) {
            (Stage::Stage2, Some(p)) => {
                let ce = seg_cross_entropy(tape, h.target_probs, p)?.loss;
                t = tape.add(t, ce)?;
                Some(ce)
            }
            _ => None,
        };
        out.push(HeadLosses {
            seg,
            entropy,
            pseudo,
            total: t,
        });
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("stage_losses needs at least one head".into()))?;
    Ok(StageLosses {
        heads: out,
        g_loss,
        total,
    })
}
