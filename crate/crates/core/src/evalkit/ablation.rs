use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::dataio::{Benchmark, SplitRole};
use crate::error::{Error, Result};
use crate::trainer::{run_full_pipeline, Method, PipelineOptions, PipelineSplits, RunConfig};

/// One entry of the run matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    /// Value of the `method` column.
    pub label: String,
    pub method: Method,
    pub entropy: bool,
    /// `Some` for self-training runs, carrying `ssl_uses_translation`.
    pub ssl_translation: Option<bool>,
    pub config: RunConfig,
}

/// `{sed, mtri, ours} × {entropy on, off}` stage-1 runs, then ours with
/// self-training rounds without and with translation.
pub fn ablation_matrix(base: &RunConfig) -> Vec<AblationSpec> {
    let mut out = Vec::new();
    for method in Method::ALL {
        for entropy in [true, false] {
            out.push(AblationSpec {
                name: format!("{method}-{}", if entropy { "ent" } else { "noent" }),
                label: method.name().into(),
                method,
                entropy,
                ssl_translation: None,
                config: RunConfig {
                    method,
                    entropy_enabled: entropy,
                    max_rounds: 0,
                    ..base.clone()
                },
            });
        }
    }
    for translate in [false, true] {
        out.push(AblationSpec {
            name: if translate { "ours-ssl-t".into() } else { "ours-ssl".into() },
            label: if translate { "ours-ssl-t".into() } else { "ours".into() },
            method: Method::Ours,
            entropy: true,
            ssl_translation: Some(translate),
            config: RunConfig {
                method: Method::Ours,
                entropy_enabled: true,
                max_rounds: base.max_rounds.max(1),
                ssl_uses_translation: translate,
                ..base.clone()
            },
        });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "detail")]
pub enum RunStatus {
    #[default]
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReports {
    pub round: usize,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub spec: AblationSpec,
    pub status: RunStatus,
    pub rounds: Vec<RoundReports>,
}

impl AblationRun {
    pub fn report(&self, round: usize, split: SplitRole) -> Option<&EvalReport> {
        self.rounds
            .iter()
            .find(|r| r.round == round)
            .and_then(|r| r.reports.iter().find(|e| e.split == split))
    }

    /// Last self-training round reached.
    pub fn last_round(&self) -> Option<usize> {
        self.rounds.iter().map(|r| r.round).max()
    }
}

/// One line of the comparison CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub head: String,
    pub entropy: String,
    pub ssl_round: usize,
    pub split: String,
    /// Class id, or `ALL` for the mIoU row.
    pub class: String,
    /// Empty for classes absent from the split.
    pub iou: Option<f64>,
}

/// Headline numbers on which the suite's directional expectations are
/// phrased (mIoU as fractions).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionalChecks {
    pub ours_cm: Option<f64>,
    pub ours_best_head: Option<f64>,
    pub ours_noent_cm: Option<f64>,
    pub sed_best: Option<f64>,
    pub mtri_best: Option<f64>,
    pub ours_cm_wild: Option<f64>,
    pub sed_wild: Option<f64>,
    /// Meta-learner target-val mIoU after each self-training round, from 1.
    pub ssl_rounds_cm: Vec<f64>,
    pub ssl_t_rounds_cm: Vec<f64>,
    pub ours_beats_sed: Option<bool>,
    pub ours_beats_mtri: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<AblationRun>,
    pub checks: DirectionalChecks,
}

impl ComparisonReport {
    pub fn run(&self, name: &str) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.spec.name == name && r.status == RunStatus::Ok)
    }

    pub fn rows(&self) -> Vec<ComparisonRow> {
        let mut rows = Vec::new();
        for run in self.runs.iter().filter(|r| r.status == RunStatus::Ok) {
            let entropy = if run.spec.entropy { "on" } else { "off" };
            for round in &run.rounds {
                for rep in &round.reports {
                    for head in rep.all() {
                        let row = |class: String, iou: Option<f64>| ComparisonRow {
                            method: run.spec.label.clone(),
                            head: head.name.clone(),
                            entropy: entropy.into(),
                            ssl_round: round.round,
                            split: rep.split.name().into(),
                            class,
                            iou,
                        };
                        for (c, iou) in head.per_class.iter().enumerate() {
                            rows.push(row(c.to_string(), *iou));
                        }
                        rows.push(row("ALL".into(), Some(head.miou)));
                    }
                }
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            wr.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationOptions {
    /// Run independent configurations on the rayon pool.
    pub parallel: bool,
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let mut entries: Vec<_> = fs::read_dir(from)
        .map_err(|e| Error::io(from, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(from, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let (src, dst) = (e.path(), to.join(e.file_name()));
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|err| Error::io(&src, err))?;
        }
    }
    Ok(())
}

fn execute(
    spec: &AblationSpec,
    splits: &PipelineSplits,
    out: &Path,
    donor: Option<&AblationRun>,
    donor_dir: Option<&Path>,
) -> AblationRun {
    let dir = out.join(&spec.name);
    let result = (|| -> Result<Vec<RoundReports>> {
        match (donor, donor_dir) {
            // Same stage 1 already trained: reuse its evaluation, and for a
            // self-training run continue from its stage-1 checkpoint.
            (Some(d), Some(ddir)) => {
                let stage1: Vec<RoundReports> = d.rounds.iter().filter(|r| r.round == 0).cloned().collect();
                if spec.ssl_translation.is_none() {
                    return Ok(stage1);
                }
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                fs::copy(ddir.join("metrics.jsonl"), dir.join("metrics.jsonl"))
                    .map_err(|e| Error::io(ddir.join("metrics.jsonl"), e))?;
                copy_dir(&ddir.join("pseudo").join("round_0"), &dir.join("pseudo").join("round_0"))?;
                let opts = PipelineOptions {
                    resume: Some(ddir.join("checkpoints").join("stage1.ckpt")),
                    config_override: Some(spec.config.clone()),
                    halt_at: None,
                };
                let o = run_full_pipeline(&spec.config, splits, &dir, &opts)?;
                let mut rounds = stage1;
                rounds.extend(o.evals.into_iter().map(|e| RoundReports {
                    round: e.round,
                    reports: e.reports,
                }));
                Ok(rounds)
            }
            _ => {
                let o = run_full_pipeline(&spec.config, splits, &dir, &PipelineOptions::default())?;
                Ok(o.evals
                    .into_iter()
                    .map(|e| RoundReports {
                        round: e.round,
                        reports: e.reports,
                    })
                    .collect())
            }
        }
    })();
    match result {
        Ok(rounds) => AblationRun {
            spec: spec.clone(),
            status: RunStatus::Ok,
            rounds,
        },
        Err(e) => {
            log::error!("ablation run {} failed: {e}", spec.name);
            AblationRun {
                spec: spec.clone(),
                status: RunStatus::Failed(e.to_string()),
                rounds: Vec::new(),
            }
        }
    }
}

fn checks(runs: &[AblationRun]) -> DirectionalChecks {
    let ok = |name: &str| runs.iter().find(|r| r.spec.name == name && r.status == RunStatus::Ok);
    let tv = SplitRole::TargetVal;
    let wv = SplitRole::WildVal;
    let meta = |name: &str, round: usize, split: SplitRole| {
        ok(name).and_then(|r| r.report(round, split)).and_then(|e| e.meta.as_ref()).map(|m| m.miou)
    };
    let best = |name: &str, split: SplitRole| ok(name).and_then(|r| r.report(0, split)).map(|e| e.best_head().miou);
    let rounds = |name: &str| -> Vec<f64> {
        ok(name).map_or_else(Vec::new, |r| {
            let mut v: Vec<(usize, f64)> = r
                .rounds
                .iter()
                .filter(|x| x.round > 0)
                .filter_map(|x| {
                    let rep = x.reports.iter().find(|e| e.split == tv)?;
                    Some((x.round, rep.meta.as_ref()?.miou))
                })
                .collect();
            v.sort_by_key(|x| x.0);
            v.into_iter().map(|x| x.1).collect()
        })
    };
    let ours_cm = meta("ours-ent", 0, tv);
    let sed_best = best("sed-ent", tv);
    let mtri_best = best("mtri-ent", tv);
    DirectionalChecks {
        ours_cm,
        ours_best_head: best("ours-ent", tv),
        ours_noent_cm: meta("ours-noent", 0, tv),
        sed_best,
        mtri_best,
        ours_cm_wild: meta("ours-ent", 0, wv),
        sed_wild: best("sed-ent", wv),
        ssl_rounds_cm: rounds("ours-ssl"),
        ssl_t_rounds_cm: rounds("ours-ssl-t"),
        ours_beats_sed: ours_cm.zip(sed_best).map(|(a, b)| a > b),
        ours_beats_mtri: ours_cm.zip(mtri_best).map(|(a, b)| a > b),
    }
}

/// Runs the matrix on `bench`, writing each run under `out/<name>` and the
/// consolidated `comparison.csv` and `comparison.json` into `out`. A failing
/// run is recorded and the suite moves on.
pub fn run_ablation_suite(
    bench: &Benchmark,
    base: &RunConfig,
    out: &Path,
    opts: &AblationOptions,
) -> Result<ComparisonReport> {
    base.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let splits = PipelineSplits::from_benchmark(bench);
    let specs = ablation_matrix(base);
    // Specs whose stage 1 matches an earlier one reuse it instead of
    // retraining; the rest are independent.
    let donor_of: Vec<Option<usize>> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (0..i).find(|&j| specs[j].config.stage1_key() == s.config.stage1_key()))
        .collect();
    let independent: Vec<usize> = (0..specs.len()).filter(|&i| donor_of[i].is_none()).collect();
    let run_one = |i: usize| execute(&specs[i], &splits, out, None, None);
    let first: Vec<AblationRun> = if opts.parallel {
        use rayon::prelude::*;
        independent.par_iter().map(|&i| run_one(i)).collect()
    } else {
        independent.iter().map(|&i| run_one(i)).collect()
    };
    let mut runs: Vec<Option<AblationRun>> = vec![None; specs.len()];
    for (&i, r) in independent.iter().zip(first) {
        runs[i] = Some(r);
    }
    for i in 0..specs.len() {
        if let Some(j) = donor_of[i] {
            let donor = runs[j].clone().expect("donor runs first");
            let run = if donor.status == RunStatus::Ok {
                let dir: PathBuf = out.join(&specs[j].name);
                execute(&specs[i], &splits, out, Some(&donor), Some(&dir))
            } else {
                AblationRun {
                    spec: specs[i].clone(),
                    status: RunStatus::Failed(format!("shared stage 1 of {} failed", specs[j].name)),
                    rounds: Vec::new(),
                }
            };
            runs[i] = Some(run);
        }
    }
    let runs: Vec<AblationRun> = runs.into_iter().map(|r| r.expect("every spec ran")).collect();
    let report = ComparisonReport {
        checks: checks(&runs),
        runs,
    };
    let csv_path = out.join("comparison.csv");
    fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out.join("comparison.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(report)
}
