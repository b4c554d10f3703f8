//! Segmentation metrics, evaluation reports, the comparison tables and the
//! ablation harness.

mod ablation;
mod report;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{DatasetSplit, Image, SegmentationMap, SplitRole, IGNORE};
use crate::ensemble::{meta_forward, MetaWeights};
use crate::error::{Error, Result};
use crate::nets::NetParams;
use crate::trainer::{head_triple, predict_images, RunConfig};

pub use ablation::{
    ablation_matrix, run_ablation_suite, AblationOptions, AblationRun, AblationSpec, ComparisonReport, ComparisonRow,
    DirectionalChecks, RoundReports, RunStatus,
};
pub use report::{render_run_report, RunReportFiles};

/// `K×K` pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Ground-truth ignore pixels are skipped; predictions
    /// must be total.
    pub fn accumulate(&mut self, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                lhs: vec![gt.height, gt.width],
                rhs: vec![pred.height, pred.width],
            });
        }
        if let Some(i) = pred.data.iter().position(|&p| p == IGNORE) {
            return Err(Error::IgnoreInPrediction(i));
        }
        pred.validate(self.classes, "prediction")?;
        gt.validate(self.classes, "ground truth")?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != IGNORE {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix merge",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU (`None` for classes absent from both prediction and truth)
/// and their mean over present classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Classes excluded from the mean.
    pub absent: Vec<usize>,
}

pub fn iou_scores(cm: &ConfusionMatrix) -> Result<IouScores> {
    let k = cm.classes;
    let mut per_class = Vec::with_capacity(k);
    let mut absent = Vec::new();
    for c in 0..k {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            absent.push(c);
            per_class.push(None);
        } else {
            per_class.push(Some(tp as f64 / denom as f64));
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("every class is absent from both prediction and truth".into()));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouScores { per_class, miou, absent })
}

/// Per-head win counts over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    /// Classes won; a tie between `m` heads gives each `1/m`.
    pub counts: Vec<f64>,
    /// Classes decided by a tie.
    pub ties: Vec<usize>,
}

/// For each class the strictly best head scores a point; ties split it.
/// Classes absent for every head are skipped; an absent IoU loses to any
/// present one.
pub fn dominance_table(per_head: &[Vec<Option<f64>>]) -> Result<Dominance> {
    if per_head.len() < 2 {
        return Err(Error::InvalidArgument(format!("dominance needs at least 2 heads, got {}", per_head.len())));
    }
    let k = per_head[0].len();
    if per_head.iter().any(|h| h.len() != k) {
        return Err(Error::InvalidArgument("heads report different class counts".into()));
    }
    let mut counts = vec![0.0; per_head.len()];
    let mut ties = Vec::new();
    for c in 0..k {
        let Some(best) = per_head.iter().filter_map(|h| h[c]).reduce(f64::max) else {
            continue;
        };
        let winners: Vec<usize> = (0..per_head.len()).filter(|&h| per_head[h][c] == Some(best)).collect();
        if winners.len() > 1 {
            ties.push(c);
        }
        for &h in &winners {
            counts[h] += 1.0 / winners.len() as f64;
        }
    }
    Ok(Dominance { counts, ties })
}

/// Scores of one predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    /// `C1`…`C3` or `Cm`.
    pub name: String,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub absent: Vec<usize>,
}

impl HeadScore {
    fn from_cm(name: String, cm: &ConfusionMatrix) -> Result<Self> {
        let s = iou_scores(cm)?;
        Ok(Self {
            name,
            per_class: s.per_class,
            miou: s.miou,
            absent: s.absent,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitRole,
    pub samples: usize,
    pub heads: Vec<HeadScore>,
    pub meta: Option<HeadScore>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn best_head(&self) -> &HeadScore {
        self.heads
            .iter()
            .reduce(|a, b| if b.miou > a.miou { b } else { a })
            .expect("at least one head")
    }

    /// The meta-learner's scores when present, else the best head's.
    pub fn headline(&self) -> &HeadScore {
        self.meta.as_ref().unwrap_or_else(|| self.best_head())
    }

    /// Every predictor, heads first.
    pub fn all(&self) -> impl Iterator<Item = &HeadScore> {
        self.heads.iter().chain(self.meta.as_ref())
    }
}

/// Hex SHA-256 of the config's canonical JSON, first 16 characters.
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Evaluates the first `heads` classifiers, and the meta-learner when given,
/// on a labeled split. Images are processed in parallel and the per-image
/// matrices merged in image order.
pub fn evaluate(
    params: &NetParams<f32>,
    meta: Option<&MetaWeights>,
    heads: usize,
    split: &DatasetSplit,
    batch: usize,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let labels = split.labels()?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!("split {} is empty", split.role)));
    }
    let k = params.config.num_classes;
    let images: Vec<&Image> = split.images().collect();
    let mut cms = vec![ConfusionMatrix::new(k); heads + usize::from(meta.is_some())];
    // Bounded chunks keep the probability maps of only a few images alive.
    for (imgs, gts) in images.chunks(64).zip(labels.chunks(64)) {
        let preds = predict_images(params, imgs, heads, batch)?;
        for (maps, gt) in preds.iter().zip(gts) {
            for (h, m) in maps.iter().enumerate() {
                cms[h].accumulate(&m.argmax(), gt)?;
            }
            if let Some(w) = meta {
                let fused = meta_forward(head_triple(maps)?, w)?;
                cms[heads].accumulate(&fused.argmax(), gt)?;
            }
        }
    }
    let mut head_scores = Vec::with_capacity(heads);
    for (h, cm) in cms.iter().take(heads).enumerate() {
        head_scores.push(HeadScore::from_cm(format!("C{}", h + 1), cm)?);
    }
    let meta_score = match meta {
        Some(_) => Some(HeadScore::from_cm("Cm".into(), &cms[heads])?),
        None => None,
    };
    Ok(EvalReport {
        split: split.role,
        samples: split.len(),
        heads: head_scores,
        meta: meta_score,
        config_fingerprint: config_fingerprint.to_string(),
    })
}
