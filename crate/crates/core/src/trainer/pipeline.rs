use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{event, put};
use super::{
    head_triple, load_checkpoint, predict, save_checkpoint, train_step, Method, MetricsLog, Phase, RoundSummary,
    RunConfig, TrainData, TrainState,
};
use crate::dataio::{store, Benchmark, DatasetSplit, Image, SegmentationMap, SplitRole, IGNORE};
use crate::ensemble::{generate_pseudo_labels, meta_fit, meta_forward, meta_refit, MetaDataset, ProbabilityMap};
use crate::error::{Error, Result};
use crate::evalkit::{config_fingerprint, evaluate, EvalReport};
use crate::nets::NUM_HEADS;
use crate::translate::{fit_translator, make_target_triple, make_triple};

/// Data of one pipeline run. `val` drives the stopping rule; `extra` splits
/// (e.g. wild-val) are evaluated alongside it.
#[derive(Clone, Debug)]
pub struct PipelineSplits<'a> {
    pub source: &'a DatasetSplit,
    pub target: &'a DatasetSplit,
    pub val: &'a DatasetSplit,
    pub extra: Vec<&'a DatasetSplit>,
    pub num_classes: usize,
}

impl<'a> PipelineSplits<'a> {
    pub fn from_benchmark(b: &'a Benchmark) -> Self {
        Self {
            source: &b.source_train,
            target: &b.target_train,
            val: &b.target_val,
            extra: vec![&b.wild_val],
            num_classes: b.num_classes(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub resume: Option<PathBuf>,
    /// Replaces the resumed run's config. Only self-training settings may
    /// differ, so the checkpointed stage 1 stays valid.
    pub config_override: Option<RunConfig>,
    /// Stop on reaching `(phase, iteration)`, writing `interrupted.ckpt`.
    pub halt_at: Option<(Phase, usize)>,
}

/// Evaluations at the end of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEval {
    pub round: usize,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub state: TrainState,
    /// Stages finished by this invocation.
    pub evals: Vec<StageEval>,
    pub halted: bool,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ckpt(state: &mut TrainState, log: &MetricsLog, out: &Path, name: &str) -> Result<()> {
    state.metrics_lines = log.len();
    save_checkpoint(state, &out.join("checkpoints").join(name))
}

/// Fit translator, stage 1, meta fit on source, initial pseudo-labels, then
/// self-training rounds until the meta-learner's lead over the best head
/// drops below `stop_gap` or `max_rounds` is reached. Every stage boundary is
/// checkpointed under `<out>/checkpoints`.
pub fn run_full_pipeline(
    config: &RunConfig,
    splits: &PipelineSplits,
    out: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome> {
    let data = TrainData::new(splits.source, splits.target)?;
    if splits.val.role == SplitRole::TargetTrain {
        return Err(Error::InvalidArgument("target-train cannot serve as the validation split".into()));
    }
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut state = match &opts.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            if let Some(c) = &opts.config_override {
                c.validate()?;
                if c.stage1_key() != s.config.stage1_key() {
                    return Err(Error::Config("config override changes settings beyond self-training".into()));
                }
                s.config = c.clone();
                // A finished stage-1-only run continues into self-training.
                if s.phase == Phase::Done && s.summaries.len() == 1 && c.method == Method::Ours && c.max_rounds > 0 {
                    s.enter(Phase::Ssl { round: 1 })?;
                }
            }
            log::info!("resuming {} at {} iteration {}", path.display(), s.phase.label(), s.iteration);
            s
        }
        None => {
            config.validate()?;
            let tr = fit_translator(splits.source.images(), splits.target.images())?;
            TrainState::new(config.clone(), tr)?
        }
    };
    state.check_classes(splits.num_classes)?;
    write_json(&out.join("config.json"), &state.config)?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"), state.metrics_lines)?;
    let fingerprint = config_fingerprint(&state.config);
    let mut evals = Vec::new();

    while state.phase != Phase::Done {
        let phase = state.phase;
        let budget = phase.iterations(&state.config);
        loop {
            if opts.halt_at == Some((state.phase, state.iteration)) {
                ckpt(&mut state, &log, out, "interrupted.ckpt")?;
                return Ok(PipelineOutcome {
                    run_dir: out.to_path_buf(),
                    state,
                    evals,
                    halted: true,
                });
            }
            if state.iteration >= budget {
                break;
            }
            let iter = state.iteration;
            let report = train_step(&mut state, &data)?;
            let every = state.config.metrics_every;
            if iter % every == 0 || iter + 1 == budget {
                let mut e = event("train", &phase.label(), phase.round(), iter);
                put(&mut e, "lr", report.lr);
                for (name, v) in &report.components {
                    put(&mut e, name, *v);
                }
                log.log(e)?;
            }
            if iter % 100 == 0 {
                let total = report.components.iter().find(|(n, _)| n == "total").map_or(f64::NAN, |c| c.1);
                log::info!("{} iter {iter}/{budget} total {total:.4} lr {:.3e}", phase.label(), report.lr);
            }
            let every = state.config.checkpoint_every;
            if every > 0 && state.iteration % every == 0 && state.iteration < budget {
                ckpt(&mut state, &log, out, "latest.ckpt")?;
            }
        }
        let reports = finish_phase(&mut state, splits, &mut log, out, &fingerprint)?;
        evals.push(StageEval {
            round: phase.round(),
            reports,
        });
        let name = match phase {
            Phase::Stage1 => "stage1.ckpt".to_string(),
            _ => format!("round_{}.ckpt", phase.round()),
        };
        ckpt(&mut state, &log, out, &name)?;
    }
    ckpt(&mut state, &log, out, "final.ckpt")?;
    Ok(PipelineOutcome {
        run_dir: out.to_path_buf(),
        state,
        evals,
        halted: false,
    })
}

/// Probability maps on target-train: untranslated, or per-head views when
/// self-training uses translation.
fn target_predictions(state: &TrainState, target: &DatasetSplit) -> Result<Vec<Vec<ProbabilityMap>>> {
    let cfg = &state.config;
    if cfg.ssl_uses_translation && matches!(state.phase, Phase::Ssl { .. }) {
        let triples: Vec<_> = target.images().map(|x| make_target_triple(x, &state.translator)).collect();
        let inputs: Vec<[&Image; NUM_HEADS]> = triples.iter().map(|t| [&t.t1, &t.t2, &t.t3]).collect();
        predict(&state.params, &inputs, NUM_HEADS, cfg.eval_batch)
    } else {
        let inputs: Vec<[&Image; NUM_HEADS]> = target.images().map(|x| [x; NUM_HEADS]).collect();
        predict(&state.params, &inputs, NUM_HEADS, cfg.eval_batch)
    }
}

fn coverage(maps: &[SegmentationMap]) -> f64 {
    let total: usize = maps.iter().map(|m| m.data.len()).sum();
    let kept: usize = maps.iter().map(|m| m.data.iter().filter(|&&v| v != IGNORE).count()).sum();
    kept as f64 / total.max(1) as f64
}

fn save_pseudo(out: &Path, round: usize, target: &DatasetSplit, maps: &[SegmentationMap]) -> Result<()> {
    let dir = out.join("pseudo").join(format!("round_{round}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (s, m) in target.samples.iter().zip(maps) {
        store::write_gray(&dir.join(format!("{}.png", s.id)), m)?;
    }
    Ok(())
}

/// Meta fit (or refit), pseudo-labels, evaluation and the move to the next
/// phase.
fn finish_phase(
    state: &mut TrainState,
    splits: &PipelineSplits,
    log: &mut MetricsLog,
    out: &Path,
    fingerprint: &str,
) -> Result<Vec<EvalReport>> {
    let phase = state.phase;
    let (label, round) = (phase.label(), phase.round());
    let budget = phase.iterations(&state.config);
    let uses_meta = state.config.method == Method::Ours;
    let mut new_pseudo = None;

    if uses_meta {
        let k = splits.num_classes;
        let mut data = MetaDataset::new(k);
        let refit = match phase {
            Phase::Stage1 => {
                let triples: Vec<_> = splits.source.images().map(|x| make_triple(x, &state.translator)).collect();
                let inputs: Vec<[&Image; NUM_HEADS]> = triples.iter().map(|t| [&t.t1, &t.t2, &t.t3]).collect();
                let preds = predict(&state.params, &inputs, NUM_HEADS, state.config.eval_batch)?;
                for (maps, y) in preds.iter().zip(splits.source.labels()?) {
                    data.push(head_triple(maps)?, y)?;
                }
                None
            }
            _ => {
                let preds = target_predictions(state, splits.target)?;
                for (maps, y) in preds.iter().zip(&state.pseudo) {
                    data.push(head_triple(maps)?, y)?;
                }
                Some(preds)
            }
        };
        let mut e = event("meta", &label, round, budget);
        let w = match (&refit, &state.meta) {
            // Nothing confident enough to refit on: keep the weights.
            (Some(_), Some(prev)) if data.is_empty() => {
                log::warn!("{label}: every pseudo-label is ignore, meta weights left unchanged");
                e.insert("meta_skipped".into(), true.into());
                prev.clone()
            }
            (refit, prev) => {
                let (w, fit) = match (refit, prev) {
                    (Some(_), Some(prev)) => meta_refit(&data, prev, &state.config.meta)?,
                    _ => meta_fit(&data, &state.config.meta)?,
                };
                put(&mut e, "meta_loss", fit.final_loss());
                e.insert("meta_iterations".into(), fit.iterations.into());
                e.insert("meta_converged".into(), fit.converged.into());
                w
            }
        };
        log.log(e)?;

        let preds = match refit {
            Some(p) => p,
            None => target_predictions(state, splits.target)?,
        };
        let fused: Vec<ProbabilityMap> = preds
            .iter()
            .map(|maps| meta_forward(head_triple(maps)?, &w))
            .collect::<Result<_>>()?;
        let labels = generate_pseudo_labels(&fused, &state.config.pseudo);
        save_pseudo(out, round, splits.target, &labels)?;
        state.meta = Some(w);
        new_pseudo = Some(labels);
    }

    let heads = state.config.method.active_heads();
    let meta = if uses_meta { state.meta.as_ref() } else { None };
    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let mut reports = Vec::new();
    for split in std::iter::once(splits.val).chain(splits.extra.iter().copied()) {
        let r = evaluate(&state.params, meta, heads, split, state.config.eval_batch, fingerprint)?;
        write_json(&eval_dir.join(format!("{label}_{}.json", split.role)), &r)?;
        let mut e = event("eval", &label, round, budget);
        e.insert("split".into(), split.role.name().into());
        for h in r.all() {
            put(&mut e, &format!("miou_{}", h.name.to_lowercase()), h.miou);
        }
        if let Some(p) = &new_pseudo {
            put(&mut e, "pseudo_coverage", coverage(p));
        }
        log.log(e)?;
        reports.push(r);
    }
    let val = &reports[0];
    let summary = RoundSummary {
        round,
        head_miou: val.heads.iter().map(|h| h.miou).collect(),
        meta_miou: val.meta.as_ref().map(|m| m.miou),
        pseudo_coverage: new_pseudo.as_deref().map(coverage),
    };
    log::info!(
        "{label}: target-val mIoU heads {:?} meta {:?}",
        summary.head_miou,
        summary.meta_miou
    );
    let stop = match phase {
        Phase::Stage1 => !uses_meta || state.config.max_rounds == 0,
        _ => {
            let gap = summary.gap_points().unwrap_or(f64::NEG_INFINITY);
            if gap < state.config.stop_gap && round < state.config.max_rounds {
                log::info!("stopping after round {round}: meta lead {gap:.2} points < {}", state.config.stop_gap);
            }
            round >= state.config.max_rounds || gap < state.config.stop_gap
        }
    };
    state.summaries.push(summary);
    if let Some(p) = new_pseudo {
        state.pseudo = p;
    }
    let next = if stop { Phase::Done } else { Phase::Ssl { round: round + 1 } };
    state.enter(next)?;
    Ok(reports)
}
