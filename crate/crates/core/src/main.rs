use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ensemble_uda::dataio::{load_benchmark, save_benchmark, standard_benchmark, Benchmark, SceneSpec, SplitCounts, SplitRole};
use ensemble_uda::evalkit::{config_fingerprint, evaluate, render_run_report, run_ablation_suite, AblationOptions};
use ensemble_uda::trainer::{load_checkpoint, run_full_pipeline, Phase, PipelineOptions, PipelineSplits, RunConfig};
use ensemble_uda::Error;

/// Ensemble self-training for domain-adaptive segmentation at desk scale.
#[derive(Parser, Debug)]
#[command(name = "euda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural benchmark.
    Gen(Common),
    /// Stage 1: translator fit, training, meta-learner fit, initial pseudo-labels.
    Train(Common),
    /// Self-training rounds from a stage-1 checkpoint.
    Ssl(Common),
    /// Evaluate a checkpoint on one split; prints the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "target-val")]
        split: String,
    },
    /// Run the comparison matrix and write comparison.csv/json.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run independent configurations concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Render a run directory's metrics and meta weights as CSV.
    Report {
        /// Run directory to read.
        run: PathBuf,
        /// Output directory (default: <RUN>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from (or to evaluate).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Benchmark directory written by `gen`; the default benchmark is
    /// generated in memory when omitted.
    #[arg(long)]
    bench: Option<PathBuf>,
}

/// Bad input from the user, reported with exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    spec: Option<SceneSpec>,
    counts: Option<SplitCounts>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

fn run_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = read_json(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn benchmark(c: &Common) -> anyhow::Result<Benchmark> {
    match &c.bench {
        Some(dir) => Ok(load_benchmark(dir).with_context(|| format!("loading benchmark {}", dir.display()))?),
        None => Ok(standard_benchmark(&SceneSpec::default(), SplitCounts::default())?),
    }
}

fn out_dir(c: &Common) -> anyhow::Result<&Path> {
    c.out.as_deref().ok_or_else(|| config_err("--out <dir> is required"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let g: GenConfig = read_json(c.config.as_deref())?;
            let mut spec = g.spec.unwrap_or_default();
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let out = out_dir(&c)?;
            let bench = standard_benchmark(&spec, g.counts.unwrap_or_default())?;
            save_benchmark(&bench, out)?;
            log::info!("benchmark written to {}", out.display());
        }
        Command::Train(c) => {
            let cfg = run_config(&c)?;
            let bench = benchmark(&c)?;
            let out = out_dir(&c)?;
            let opts = PipelineOptions {
                resume: c.resume.clone(),
                config_override: None,
                halt_at: Some((Phase::Ssl { round: 1 }, 0)),
            };
            let o = run_full_pipeline(&cfg, &PipelineSplits::from_benchmark(&bench), out, &opts)?;
            let ckpts = out.join("checkpoints");
            if o.halted {
                std::fs::copy(ckpts.join("interrupted.ckpt"), ckpts.join("final.ckpt"))?;
                std::fs::remove_file(ckpts.join("interrupted.ckpt"))?;
            }
            log::info!("stage 1 finished; checkpoints in {}", ckpts.display());
        }
        Command::Ssl(c) => {
            let resume = c.resume.clone().ok_or_else(|| config_err("ssl needs --resume <stage-1 checkpoint>"))?;
            let bench = benchmark(&c)?;
            let out = out_dir(&c)?;
            let override_cfg = match &c.config {
                Some(_) => Some(run_config(&c)?),
                None => None,
            };
            let base = load_checkpoint(&resume)?.config;
            let opts = PipelineOptions {
                resume: Some(resume),
                config_override: override_cfg,
                halt_at: None,
            };
            let o = run_full_pipeline(&base, &PipelineSplits::from_benchmark(&bench), out, &opts)?;
            for s in &o.state.summaries {
                log::info!("round {}: heads {:?} meta {:?}", s.round, s.head_miou, s.meta_miou);
            }
        }
        Command::Eval { common: c, split } => {
            let ckpt = c.resume.clone().ok_or_else(|| config_err("eval needs --resume <checkpoint>"))?;
            let role = SplitRole::parse(&split).ok_or_else(|| config_err(format!("unknown split {split}")))?;
            let state = load_checkpoint(&ckpt)?;
            let bench = benchmark(&c)?;
            state.check_classes(bench.num_classes())?;
            let cfg = &state.config;
            let report = evaluate(
                &state.params,
                state.meta.as_ref(),
                cfg.method.active_heads(),
                bench.split(role),
                cfg.eval_batch,
                &config_fingerprint(cfg),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { common: c, parallel } => {
            let cfg = run_config(&c)?;
            let bench = benchmark(&c)?;
            let out = out_dir(&c)?;
            let report = run_ablation_suite(&bench, &cfg, out, &AblationOptions { parallel })?;
            println!("{}", serde_json::to_string_pretty(&report.checks)?);
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.join("report"));
            let files = render_run_report(&run, &out)?;
            log::info!("report written: {files:?}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
