use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{dominance_table, EvalReport};
use crate::ensemble::weight_report;
use crate::error::{Error, Result};
use crate::trainer::load_checkpoint;

/// Paths written by [`render_run_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReportFiles {
    pub losses: PathBuf,
    pub evals: PathBuf,
    pub dominance: Option<PathBuf>,
    pub meta_weights: Option<PathBuf>,
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(header).map_err(csv_err)?;
    for r in rows {
        wr.write_record(r).map_err(csv_err)?;
    }
    let bytes = wr.into_inner().map_err(csv_err)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Turns a run directory into plot-ready CSV files under `out`:
/// `losses.csv` (training curves), `evals.csv` (mIoU per stage, split and
/// predictor), `dominance.csv` (classes won per head) and `meta_weights.csv`
/// (from the last checkpoint holding meta weights). Output depends only on
/// the run directory's contents.
pub fn render_run_report(run: &Path, out: &Path) -> Result<RunReportFiles> {
    let metrics = run.join("metrics.jsonl");
    let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let events: Vec<serde_json::Map<String, Value>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str(l)? {
            Value::Object(m) => Ok(m),
            _ => Err(Error::InvalidArgument(format!("{}: non-object event", metrics.display()))),
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fixed = ["event", "stage", "round", "iteration"];

    let train: Vec<_> = events.iter().filter(|e| e.get("event").and_then(Value::as_str) == Some("train")).collect();
    let keys: BTreeSet<&String> = train.iter().flat_map(|e| e.keys()).filter(|k| !fixed.contains(&k.as_str())).collect();
    let mut header: Vec<String> = ["stage", "round", "iteration"].map(String::from).to_vec();
    header.extend(keys.iter().map(|k| k.to_string()));
    let rows: Vec<Vec<String>> = train.iter().map(|e| header.iter().map(|h| cell(e.get(h))).collect()).collect();
    let losses = out.join("losses.csv");
    write_csv(&losses, &header, &rows)?;

    let mut rows = Vec::new();
    for e in events.iter().filter(|e| e.get("event").and_then(Value::as_str) == Some("eval")) {
        let scores: BTreeMap<&String, &Value> = e.iter().filter(|(k, _)| k.starts_with("miou_")).collect();
        for (k, v) in scores {
            rows.push(vec![
                cell(e.get("stage")),
                cell(e.get("round")),
                cell(e.get("split")),
                k.trim_start_matches("miou_").to_uppercase(),
                cell(Some(v)),
            ]);
        }
    }
    let evals = out.join("evals.csv");
    write_csv(&evals, &["stage", "round", "split", "predictor", "miou"].map(String::from), &rows)?;

    let eval_dir = run.join("eval");
    let mut dominance = None;
    if eval_dir.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&eval_dir)
            .map_err(|e| Error::io(&eval_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let mut rows = Vec::new();
        for p in names {
            let rep: EvalReport =
                serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
            if rep.heads.len() < 2 {
                continue;
            }
            let per_head: Vec<_> = rep.heads.iter().map(|h| h.per_class.clone()).collect();
            let d = dominance_table(&per_head)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for (h, c) in rep.heads.iter().zip(&d.counts) {
                rows.push(vec![stem.clone(), h.name.clone(), format!("{c}"), d.ties.len().to_string()]);
            }
        }
        let path = out.join("dominance.csv");
        write_csv(&path, &["evaluation", "head", "classes_won", "tied_classes"].map(String::from), &rows)?;
        dominance = Some(path);
    }

    let ckpt_dir = run.join("checkpoints");
    let mut meta_weights = None;
    for name in ["final.ckpt", "latest.ckpt", "stage1.ckpt"] {
        let p = ckpt_dir.join(name);
        if !p.exists() {
            continue;
        }
        if let Some(w) = load_checkpoint(&p)?.meta {
            let path = out.join("meta_weights.csv");
            fs::write(&path, weight_report(&w).to_csv()?).map_err(|e| Error::io(&path, e))?;
            meta_weights = Some(path);
            break;
        }
    }
    Ok(RunReportFiles {
        losses,
        evals,
        dominance,
        meta_weights,
    })
}
