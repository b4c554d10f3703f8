//! Training orchestration: stage-1 training of the encoder, heads and
//! discriminator, the meta-learner fit, and self-training rounds on
//! pseudo-labels. Also drives the single-head (SED) and tri-training (MTri)
//! baselines.
//!
//! Batch sampling is a pure function of `(seed, phase, iteration)`, so a run
//! resumed from a checkpoint replays exactly the batches it would have seen.

mod checkpoint;
mod metrics;
mod pipeline;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::dataio::{batch_indices, derive_seed, DatasetSplit, DomainSample, Image, SegmentationMap, SplitRole};
use crate::ensemble::{MetaFitOptions, MetaWeights, ProbabilityMap, PseudoLabelConfig};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_discrepancy, discriminator_loss, generator_loss, stage_losses, GanMode, HeadInputs, LossWeights, Stage,
};
use crate::nets::{
    classifier_forward, discriminator_forward, encoder_forward, images_to_tensor, init_params, Bound, NetConfig,
    NetParams, ParamSet, NUM_HEADS,
};
use crate::translate::{make_target_triple, make_triple, AffineTranslator, AlignmentRep, Translator};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::MetricsLog;
pub use pipeline::{run_full_pipeline, PipelineOptions, PipelineOutcome, PipelineSplits, StageEval};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Three heads, each fed its own translation, fused by the meta-learner.
    #[default]
    Ours,
    /// One head consuming the three translations in rotation.
    Sed,
    /// Three heads on one representation with a cosine discrepancy term.
    Mtri,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sed, Method::Mtri, Method::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Sed => "sed",
            Method::Mtri => "mtri",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Number of heads that are trained and evaluated.
    pub fn active_heads(self) -> usize {
        match self {
            Method::Sed => 1,
            _ => NUM_HEADS,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub losses: LossWeights,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    /// Fixed discriminator learning rate.
    pub d_lr: f64,
    pub batch_size: usize,
    pub stage1_iters: usize,
    pub ssl_iters_per_round: usize,
    pub max_rounds: usize,
    /// Stop self-training once the meta-learner leads the best head by less
    /// than this many mIoU points.
    pub stop_gap: f64,
    pub pseudo: PseudoLabelConfig,
    pub entropy_enabled: bool,
    pub ssl_uses_translation: bool,
    /// Re-initialise the network at the start of every round instead of
    /// continuing from the previous stage.
    pub retrain_from_scratch: bool,
    pub gan_mode: GanMode,
    /// Source view whose features are the discriminator's positive class.
    pub alignment_rep: AlignmentRep,
    /// Weight of the cosine discrepancy (MTri only).
    pub lambda_cos: f64,
    pub meta: MetaFitOptions,
    pub net: NetConfig,
    /// Log a training event every this many iterations.
    pub metrics_every: usize,
    /// Write `latest.ckpt` every this many iterations; 0 keeps stage
    /// boundaries only.
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Ours,
            losses: LossWeights::default(),
            lr0: 2.5e-4,
            poly_power: 0.9,
            momentum: 0.9,
            d_lr: 1e-5,
            batch_size: 4,
            stage1_iters: 3000,
            ssl_iters_per_round: 2000,
            max_rounds: 2,
            stop_gap: 0.3,
            pseudo: PseudoLabelConfig::default(),
            entropy_enabled: true,
            ssl_uses_translation: false,
            retrain_from_scratch: false,
            gan_mode: GanMode::NonSaturating,
            alignment_rep: AlignmentRep::T3,
            lambda_cos: 1.0,
            meta: MetaFitOptions::default(),
            net: NetConfig::default(),
            metrics_every: 10,
            checkpoint_every: 0,
            eval_batch: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr0", self.lr0), ("d_lr", self.d_lr), ("poly_power", self.poly_power)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive finite rate, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch_size and eval_batch must be at least 1".into());
        }
        if self.stage1_iters == 0 {
            return bad("stage1_iters must be at least 1".into());
        }
        if self.max_rounds > 0 && self.ssl_iters_per_round == 0 {
            return bad("ssl_iters_per_round must be at least 1 when max_rounds > 0".into());
        }
        if self.metrics_every == 0 {
            return bad("metrics_every must be at least 1".into());
        }
        if !self.stop_gap.is_finite() {
            return bad(format!("stop_gap must be finite, got {}", self.stop_gap));
        }
        if !(self.lambda_cos >= 0.0) {
            return bad(format!("lambda_cos must be non-negative, got {}", self.lambda_cos));
        }
        if self.meta.max_iter == 0 || !(self.meta.rel_tol >= 0.0) || !(self.meta.refit_l2 >= 0.0 && self.meta.refit_l2.is_finite()) {
            return bad("meta.max_iter must be ≥ 1, meta.rel_tol ≥ 0 and meta.refit_l2 finite and ≥ 0".into());
        }
        self.losses.validate()?;
        self.pseudo.validate()?;
        self.net.validate()
    }

    /// Weights actually applied, with the entropy term switched off when
    /// disabled.
    pub fn effective_losses(&self) -> LossWeights {
        LossWeights {
            lambda_ent: if self.entropy_enabled { self.losses.lambda_ent } else { 0.0 },
            ..self.losses
        }
    }

    /// The config with every field that only affects self-training reset, so
    /// two configs with equal keys share an identical stage 1.
    pub fn stage1_key(&self) -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            ssl_iters_per_round: d.ssl_iters_per_round,
            max_rounds: d.max_rounds,
            stop_gap: d.stop_gap,
            ssl_uses_translation: d.ssl_uses_translation,
            retrain_from_scratch: d.retrain_from_scratch,
            checkpoint_every: d.checkpoint_every,
            ..self.clone()
        }
    }
}

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return lr0;
    }
    let frac = 1.0 - iter.min(max_iter) as f64 / max_iter as f64;
    lr0 * frac.powf(power)
}

/// `v ← momentum·v + g; p ← p − lr·v`, elementwise.
pub fn sgd_momentum_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64) {
    assert!(params.len() == grads.len() && params.len() == velocity.len(), "sgd buffers differ in length");
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
}

/// Where the run currently is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Phase {
    Stage1,
    /// Self-training round, numbered from 1.
    Ssl { round: usize },
    Done,
}

impl Phase {
    pub fn stage(self) -> Stage {
        match self {
            Phase::Stage1 => Stage::Stage1,
            _ => Stage::Stage2,
        }
    }

    pub fn round(self) -> usize {
        match self {
            Phase::Ssl { round } => round,
            _ => 0,
        }
    }

    pub fn label(self) -> String {
        match self {
            Phase::Stage1 => "stage1".into(),
            Phase::Ssl { round } => format!("round{round}"),
            Phase::Done => "done".into(),
        }
    }

    /// Iteration budget of the phase.
    pub fn iterations(self, cfg: &RunConfig) -> usize {
        match self {
            Phase::Stage1 => cfg.stage1_iters,
            Phase::Ssl { .. } => cfg.ssl_iters_per_round,
            Phase::Done => 0,
        }
    }
}

/// Evaluation summary of one finished stage, kept for the stopping rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Target-val mIoU per active head, as fractions.
    pub head_miou: Vec<f64>,
    pub meta_miou: Option<f64>,
    /// Fraction of target-train pixels carrying a pseudo-label.
    pub pseudo_coverage: Option<f64>,
}

impl RoundSummary {
    pub fn best_head(&self) -> f64 {
        self.head_miou.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Meta-learner lead over the best head, in mIoU points.
    pub fn gap_points(&self) -> Option<f64> {
        self.meta_miou.map(|m| 100.0 * (m - self.best_head()))
    }
}

/// Everything a run needs to continue.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: NetParams<f32>,
    pub velocity: NetParams<f32>,
    pub translator: AffineTranslator,
    pub meta: Option<MetaWeights>,
    pub phase: Phase,
    /// Iterations completed in the current phase.
    pub iteration: usize,
    /// Labels for the target-train split used by the current round.
    pub pseudo: Vec<SegmentationMap>,
    /// Lines of `metrics.jsonl` written when this state was captured.
    pub metrics_lines: usize,
    pub summaries: Vec<RoundSummary>,
}

const TAG_SOURCE: u64 = 0x5A;
const TAG_TARGET: u64 = 0x7A;
const TAG_INIT: u64 = 0x1A;

impl TrainState {
    pub fn new(config: RunConfig, translator: AffineTranslator) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(&config.net, derive_seed(config.seed, &[TAG_INIT]))?;
        let velocity = params.zeroed();
        Ok(Self {
            config,
            params,
            velocity,
            translator,
            meta: None,
            phase: Phase::Stage1,
            iteration: 0,
            pseudo: Vec::new(),
            metrics_lines: 0,
            summaries: Vec::new(),
        })
    }

    /// Fails with a message naming `num_classes` when the run was built for a
    /// different label set.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if self.config.net.num_classes != num_classes {
            return Err(Error::Checkpoint(format!(
                "num_classes mismatch: checkpoint has {}, data has {num_classes}",
                self.config.net.num_classes
            )));
        }
        Ok(())
    }

    /// Moves to the start of `phase`, clearing momentum (and the network
    /// itself when retraining from scratch).
    pub fn enter(&mut self, phase: Phase) -> Result<()> {
        if matches!(phase, Phase::Ssl { .. }) && self.config.retrain_from_scratch {
            self.params = init_params(&self.config.net, derive_seed(self.config.seed, &[TAG_INIT]))?;
        }
        self.velocity = self.params.zeroed();
        self.phase = phase;
        self.iteration = 0;
        Ok(())
    }
}

/// Labeled source and unlabeled target training data.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a DatasetSplit,
    pub target: &'a DatasetSplit,
}

impl<'a> TrainData<'a> {
    /// Checks roles: the source must be the labeled source-train split, the
    /// target must be target-train, which never carries labels.
    pub fn new(source: &'a DatasetSplit, target: &'a DatasetSplit) -> Result<Self> {
        if source.role != SplitRole::SourceTrain {
            return Err(Error::InvalidArgument(format!("training source must be source-train, got {}", source.role)));
        }
        if target.role != SplitRole::TargetTrain {
            return Err(Error::InvalidArgument(format!("training target must be target-train, got {}", target.role)));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidArgument("training splits must be non-empty".into()));
        }
        source.labels()?;
        Ok(Self { source, target })
    }
}

/// `(head, source view)` pairs fed to the supervised loss at `iter`.
pub fn source_routing(method: Method, iter: usize) -> Vec<(usize, usize)> {
    match method {
        Method::Ours => (0..NUM_HEADS).map(|k| (k, k)).collect(),
        Method::Sed => vec![(0, iter % NUM_HEADS)],
        Method::Mtri => (0..NUM_HEADS).map(|k| (k, 0)).collect(),
    }
}

fn check_routing(method: Method, routing: &[(usize, usize)]) -> Result<()> {
    let ok = match method {
        Method::Ours => routing.len() == NUM_HEADS && routing.iter().all(|&(h, v)| h == v),
        Method::Sed => routing.len() == 1 && routing[0].0 == 0,
        Method::Mtri => routing.iter().all(|&(_, v)| v == 0),
    };
    if !ok {
        return Err(Error::InvalidArgument(format!("routing {routing:?} violates the {method} protocol")));
    }
    Ok(())
}

/// Loss components and bookkeeping of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub components: Vec<(String, f64)>,
    pub routing: Vec<(usize, usize)>,
    pub lr: f64,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub target_indices: Vec<usize>,
}

/// Gradients from one network pass. The discriminator never receives any.
pub struct NetworkGrads {
    pub encoder: Vec<Vec<f32>>,
    pub heads: Vec<Vec<Vec<f32>>>,
    pub discriminator_touched: bool,
    pub components: Vec<(String, f64)>,
    pub routing: Vec<(usize, usize)>,
    /// Detached `(source, target)` features for the discriminator update.
    pub align: Option<(Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum View {
    Source(usize),
    TargetRaw,
    Target(usize),
}

fn grads_of(tape: &Tape<f32>, bound: &Bound, set: &ParamSet<f32>) -> Vec<Vec<f32>> {
    bound
        .vars()
        .into_iter()
        .zip(set.tensors())
        .map(|(v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect()
}

/// Forward and backward of the network objective on one batch, with the
/// discriminator bound as constants.
pub fn network_grads(
    params: &NetParams<f32>,
    cfg: &RunConfig,
    translator: &dyn Translator,
    stage: Stage,
    iter: usize,
    source: &[&DomainSample],
    target: &[&DomainSample],
    pseudo: Option<&[&SegmentationMap]>,
) -> Result<NetworkGrads> {
    let net = &params.config;
    let routing = source_routing(cfg.method, iter);
    check_routing(cfg.method, &routing)?;
    let triples: Vec<_> = source.iter().map(|s| make_triple(&s.image, translator)).collect();
    let labels: Vec<&SegmentationMap> = source
        .iter()
        .map(|s| s.labels.as_ref().ok_or_else(|| Error::Unlabeled(s.id.clone())))
        .collect::<Result<_>>()?;
    let target_views = (stage == Stage::Stage2 && cfg.ssl_uses_translation)
        .then(|| target.iter().map(|s| make_target_triple(&s.image, translator)).collect::<Vec<_>>());

    let mut tape = Tape::<f32>::new();
    let enc = params.encoder.bind(&mut tape, true);
    let heads: Vec<Bound> = params.heads.iter().map(|h| h.bind(&mut tape, true)).collect();
    let disc = params.discriminator.bind(&mut tape, false);

    let mut feats: Vec<(View, Var)> = Vec::new();
    let mut features = |tape: &mut Tape<f32>, view: View| -> Result<Var> {
        if let Some(&(_, v)) = feats.iter().find(|(k, _)| *k == view) {
            return Ok(v);
        }
        let imgs: Vec<&Image> = match view {
            View::Source(k) => triples.iter().map(|t| t.get(k)).collect(),
            View::TargetRaw => target.iter().map(|s| &s.image).collect(),
            View::Target(k) => target_views.as_ref().expect("translated target views").iter().map(|t| t.get(k)).collect(),
        };
        let x = tape.constant(images_to_tensor(&imgs)?);
        let f = encoder_forward(tape, net, &enc, x)?;
        feats.push((view, f));
        Ok(f)
    };

    let mut probs = Vec::with_capacity(routing.len());
    for &(head, view) in &routing {
        let f_src = features(&mut tape, View::Source(view))?;
        let src = classifier_forward(&mut tape, net, &heads[head], f_src)?.probs;
        let tview = if target_views.is_some() { View::Target(head) } else { View::TargetRaw };
        let f_tgt = features(&mut tape, tview)?;
        let tgt = classifier_forward(&mut tape, net, &heads[head], f_tgt)?.probs;
        probs.push((src, tgt));
    }

    let weights = cfg.effective_losses();
    let mut align = None;
    let g_loss = if weights.lambda_adv > 0.0 {
        let f_src = features(&mut tape, View::Source(cfg.alignment_rep.index()))?;
        let f_tgt = features(&mut tape, View::TargetRaw)?;
        let d_tgt = discriminator_forward(&mut tape, net, &disc, f_tgt)?;
        align = Some((tape.value(f_src).clone(), tape.value(f_tgt).clone()));
        Some(generator_loss(&mut tape, d_tgt, cfg.gan_mode)?)
    } else {
        None
    };

    let inputs: Vec<HeadInputs> = probs
        .iter()
        .map(|&(s, t)| HeadInputs {
            source_probs: s,
            source_labels: &labels,
            target_probs: t,
        })
        .collect();
    let losses = stage_losses(&mut tape, stage, &inputs, g_loss, pseudo, &weights)?;
    let mut components = losses.components(&tape);
    let mut total = losses.total;
    if cfg.method == Method::Mtri && cfg.lambda_cos > 0.0 {
        let cos = cosine_discrepancy(&mut tape, &heads[0], &heads[1])?;
        components.push(("cos".into(), tape.value(cos).item() as f64));
        let w = tape.scale(cos, cfg.lambda_cos)?;
        total = tape.add(total, w)?;
        if let Some(t) = components.iter_mut().find(|(n, _)| n == "total") {
            t.1 = tape.value(total).item() as f64;
        }
    }
    tape.backward(total)?;

    let discriminator_touched = disc.vars().iter().any(|&v| tape.grad(v).is_some());
    if discriminator_touched {
        return Err(Error::InvalidArgument("segmentation losses reached discriminator parameters".into()));
    }
    Ok(NetworkGrads {
        encoder: grads_of(&tape, &enc, &params.encoder),
        heads: heads.iter().zip(&params.heads).map(|(b, s)| grads_of(&tape, b, s)).collect(),
        discriminator_touched,
        components,
        routing,
        align,
    })
}

/// Discriminator loss and gradients on detached features. The encoder is
/// not on this tape, so it cannot receive gradient from `d_loss`.
pub fn discriminator_grads(
    params: &NetParams<f32>,
    source_features: Tensor<f32>,
    target_features: Tensor<f32>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let disc = params.discriminator.bind(&mut tape, true);
    let fs = tape.constant(source_features);
    let ft = tape.constant(target_features);
    let ds = discriminator_forward(&mut tape, &params.config, &disc, fs)?;
    let dt = discriminator_forward(&mut tape, &params.config, &disc, ft)?;
    let loss = discriminator_loss(&mut tape, ds, dt)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item() as f64, grads_of(&tape, &disc, &params.discriminator)))
}

fn apply(set: &mut ParamSet<f32>, velocity: &mut ParamSet<f32>, grads: &[Vec<f32>], lr: f64, momentum: f64) {
    for ((p, v), g) in set.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads) {
        sgd_momentum_step(p, g, v, lr, momentum);
    }
}

fn finite(grads: &[Vec<f32>]) -> bool {
    grads.iter().flatten().all(|g| g.is_finite())
}

/// Sample indices of iteration `iter` of the current phase.
pub fn step_batches(state: &TrainState, data: &TrainData) -> (Vec<usize>, Vec<usize>) {
    let cfg = &state.config;
    let tag = state.phase.round() as u64;
    let src = batch_indices(data.source.len(), cfg.batch_size, derive_seed(cfg.seed, &[TAG_SOURCE, tag]), state.iteration as u64);
    let tgt = batch_indices(data.target.len(), cfg.batch_size, derive_seed(cfg.seed, &[TAG_TARGET, tag]), state.iteration as u64);
    (src, tgt)
}

/// One alternating update: the network on the full objective, then the
/// discriminator on detached features. Advances `state.iteration`.
pub fn train_step(state: &mut TrainState, data: &TrainData) -> Result<StepReport> {
    let phase = state.phase;
    if phase == Phase::Done {
        return Err(Error::InvalidArgument("run already finished".into()));
    }
    let cfg = state.config.clone();
    let iter = state.iteration;
    let (si, ti) = step_batches(state, data);
    let source: Vec<&DomainSample> = si.iter().map(|&i| &data.source.samples[i]).collect();
    let target: Vec<&DomainSample> = ti.iter().map(|&i| &data.target.samples[i]).collect();
    let source_ids: Vec<String> = source.iter().map(|s| s.id.clone()).collect();
    let target_ids: Vec<String> = target.iter().map(|s| s.id.clone()).collect();
    let diverged = |component: String| Error::Diverged {
        component,
        stage: phase.label(),
        iteration: iter,
        batch: format!("source {source_ids:?}, target {target_ids:?}"),
    };

    let pseudo: Option<Vec<&SegmentationMap>> = match phase.stage() {
        Stage::Stage1 => None,
        Stage::Stage2 => {
            if state.pseudo.len() != data.target.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} pseudo-label maps for {} target images",
                    state.pseudo.len(),
                    data.target.len()
                )));
            }
            Some(ti.iter().map(|&i| &state.pseudo[i]).collect())
        }
    };
    let lr = poly_lr(iter, phase.iterations(&cfg), cfg.lr0, cfg.poly_power);
    let g = network_grads(
        &state.params,
        &cfg,
        &state.translator,
        phase.stage(),
        iter,
        &source,
        &target,
        pseudo.as_deref(),
    )
    .map_err(|e| match e {
        Error::NonFinite { op, .. } => diverged(format!("forward value of {op}")),
        other => other,
    })?;
    if let Some((name, _)) = g.components.iter().find(|(_, v)| !v.is_finite()) {
        return Err(diverged(name.clone()));
    }
    if !finite(&g.encoder) {
        return Err(diverged("encoder gradient".into()));
    }
    if let Some(k) = g.heads.iter().position(|h| !finite(h)) {
        return Err(diverged(format!("head {} gradient", k + 1)));
    }

    let mut components = g.components;
    let d = match g.align {
        Some((fs, ft)) => Some(discriminator_grads(&state.params, fs, ft).map_err(|e| match e {
            Error::NonFinite { op, .. } => diverged(format!("discriminator value of {op}")),
            other => other,
        })?),
        None => None,
    };
    if let Some((d_loss, dg)) = &d {
        if !d_loss.is_finite() {
            return Err(diverged("d_loss".into()));
        }
        if !finite(dg) {
            return Err(diverged("discriminator gradient".into()));
        }
        components.push(("d_loss".into(), *d_loss));
    }

    let TrainState { params, velocity, .. } = state;
    apply(&mut params.encoder, &mut velocity.encoder, &g.encoder, lr, cfg.momentum);
    for ((p, v), hg) in params.heads.iter_mut().zip(velocity.heads.iter_mut()).zip(&g.heads) {
        apply(p, v, hg, lr, cfg.momentum);
    }
    if let Some((_, dg)) = &d {
        apply(&mut params.discriminator, &mut velocity.discriminator, dg, cfg.d_lr, cfg.momentum);
    }
    state.iteration += 1;
    Ok(StepReport {
        components,
        routing: g.routing,
        lr,
        source_ids,
        target_ids,
        target_indices: ti,
    })
}

/// Runs stage 1 in memory from a fresh state and returns the trained state.
pub fn train_stage1(config: &RunConfig, data: &TrainData, translator: &AffineTranslator) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone(), translator.clone())?;
    while state.iteration < config.stage1_iters {
        train_step(&mut state, data)?;
    }
    Ok(state)
}

/// Per-head class probabilities; head `k` of image `i` sees `inputs[i][k]`.
/// Consecutive heads that share their input share one encoder pass.
pub fn predict(params: &NetParams<f32>, inputs: &[[&Image; NUM_HEADS]], heads: usize, batch: usize) -> Result<Vec<Vec<ProbabilityMap>>> {
    let heads = heads.clamp(1, NUM_HEADS);
    let chunks: Vec<Result<Vec<Vec<ProbabilityMap>>>> = inputs
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut tape = Tape::<f32>::new();
            let enc = params.encoder.bind(&mut tape, false);
            let mut per_head: Vec<Vec<ProbabilityMap>> = Vec::with_capacity(heads);
            let mut prev: Option<(usize, Var)> = None;
            for k in 0..heads {
                let shared = prev.filter(|&(j, _)| chunk.iter().all(|v| std::ptr::eq(v[j], v[k])));
                let f = match shared {
                    Some((_, f)) => f,
                    None => {
                        let imgs: Vec<&Image> = chunk.iter().map(|v| v[k]).collect();
                        let x = tape.constant(images_to_tensor(&imgs)?);
                        encoder_forward(&mut tape, &params.config, &enc, x)?
                    }
                };
                prev = Some((k, f));
                let head = params.heads[k].bind(&mut tape, false);
                let out = classifier_forward(&mut tape, &params.config, &head, f)?;
                per_head.push(ProbabilityMap::from_batch(tape.value(out.probs))?);
            }
            Ok((0..chunk.len())
                .map(|i| per_head.iter().map(|maps| maps[i].clone()).collect())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(inputs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Every head on the untranslated images.
pub fn predict_images(params: &NetParams<f32>, images: &[&Image], heads: usize, batch: usize) -> Result<Vec<Vec<ProbabilityMap>>> {
    let inputs: Vec<[&Image; NUM_HEADS]> = images.iter().map(|&i| [i; NUM_HEADS]).collect();
    predict(params, &inputs, heads, batch)
}

/// Three head maps as the fixed-size array the meta-learner takes.
pub fn head_triple(maps: &[ProbabilityMap]) -> Result<[&ProbabilityMap; NUM_HEADS]> {
    match maps {
        [a, b, c, ..] => Ok([a, b, c]),
        _ => Err(Error::InvalidArgument(format!("meta-learner needs {NUM_HEADS} heads, got {}", maps.len()))),
    }
}

#[cfg(test)]
mod tests;
