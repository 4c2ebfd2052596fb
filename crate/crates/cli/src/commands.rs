//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use symseg::continual::{run_schedule, StepReport, TrainReport};
use symseg::geometry::ProjectedFrame;
use symseg::metrics::{self, iou_csv, IouReport, ModalityTable};
use symseg::network::{load_checkpoint, save_checkpoint, ModalityAvailability, Model, Predictor};
use symseg::{Error, Result};

use crate::config::RunConfig;
use crate::data::{self, external_config};
use crate::gradcheck::{self, CheckResult};
use crate::report::ReportTable;
use crate::GradcheckFailed;

pub const TRAIN_CSV: &str = "train_report.csv";
pub const TRAIN_JSON: &str = "train_report.json";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODALITY_CSV: &str = "modality_table.csv";
pub const MODALITY_JSON: &str = "modality_table.json";
pub const GRADCHECK_JSON: &str = "gradcheck.json";
pub const REPORT_CSV: &str = "report.csv";
pub const DATA_DIR: &str = "data";

/// Writes `contents`, creating parent directories.
pub fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// CSV body prefixed with a `# config_digest:` comment line.
pub fn with_digest(digest: &str, csv: &str) -> String {
    format!("# config_digest: {digest}\n{csv}")
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("outputs serialize");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

fn digest_mismatch(what: &Path, found: &str, expected: &str) -> Error {
    Error::Config(format!(
        "{} was written under config digest {found}, current config digest is {expected}",
        what.display()
    ))
}

pub fn generate_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = cfg.out.join(DATA_DIR);
    let manifest = data::write_dataset(cfg, &root)?;
    write_output(&root.join("manifest.json"), &to_json(&manifest))?;
    let ext = external_config(cfg, &root, &manifest);
    write_output(&root.join("dataset.toml"), &ext.to_toml())?;
    println!(
        "wrote {} train and {} eval frames under {}",
        manifest.train_frames,
        manifest.eval_frames,
        root.display()
    );
    Ok(())
}

fn checkpoint_paths(out: &Path, step: usize) -> (PathBuf, PathBuf) {
    let dir = out.join(CHECKPOINT_DIR);
    (
        dir.join(format!("step_{step}.ckpt")),
        dir.join(format!("step_{step}.json")),
    )
}

/// Saved steps under the output directory, checked against `digest`.
fn completed_steps(cfg: &RunConfig, digest: &[u8; 32], steps: usize) -> Result<Vec<(Model, StepReport)>> {
    let mut done = Vec::new();
    for k in 0..steps {
        let (ckpt, json) = checkpoint_paths(&cfg.out, k);
        if !ckpt.is_file() || !json.is_file() {
            break;
        }
        let saved = load_checkpoint(&ckpt)?;
        if &saved.config_digest != digest {
            return Err(digest_mismatch(
                &ckpt,
                &hex::encode(saved.config_digest),
                &hex::encode(digest),
            ));
        }
        done.push((saved.model, read_json(&json)?));
    }
    Ok(done)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainReport> {
    let plan = cfg.plan()?;
    let digest = cfg.digest_bytes();
    let splits = data::load(cfg)?;
    let done = completed_steps(cfg, &digest, plan.schedule.step_count())?;
    if !done.is_empty() {
        log::info!("resuming after {} saved step(s)", done.len());
    }
    write_output(&cfg.out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let outcome = run_schedule(&plan, &splits.train, &splits.eval, done, |model, step| {
        let (ckpt, json) = checkpoint_paths(&cfg.out, step.step);
        write_output(&json, &to_json(step))?;
        save_checkpoint(&ckpt, model, digest)
    })?;
    let mut report = outcome.report;
    report.config_digest = cfg.digest();
    write_output(
        &cfg.out.join(TRAIN_CSV),
        &with_digest(&report.config_digest, &report.to_csv()),
    )?;
    write_output(&cfg.out.join(TRAIN_JSON), &(report.to_json() + "\n"))?;
    let last = report.last();
    println!(
        "trained {} step(s); final rgb mIoU {}, lidar mIoU {}",
        report.steps.len(),
        metrics::fmt_score(last.color.miou),
        metrics::fmt_score(last.lidar.miou)
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingScores {
    pub config_digest: String,
    pub input: ModalityAvailability,
    pub rgb: IouReport,
    pub lidar: IouReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableScores {
    pub config_digest: String,
    pub table: ModalityTable,
}

/// Rendered evaluation outputs: file name stem, CSV text and JSON text.
pub struct EvalOutput {
    pub stem: String,
    pub csv: String,
    pub json: String,
}

/// Scores `model` on `frames` under one input setting, or under all three.
pub fn evaluate_predictor<P: Predictor + ?Sized>(
    model: &P,
    frames: &[ProjectedFrame],
    avail: Option<ModalityAvailability>,
    digest: &str,
) -> Result<EvalOutput> {
    match avail {
        Some(input) => {
            let (c, l) = metrics::evaluate(model, frames, input)?;
            let scores = SettingScores {
                config_digest: digest.to_string(),
                input,
                rgb: c.iou(),
                lidar: l.iou(),
            };
            let mut csv = String::from("branch,class,iou\n");
            csv.push_str(&iou_csv("rgb", &scores.rgb));
            csv.push_str(&iou_csv("lidar", &scores.lidar));
            Ok(EvalOutput {
                stem: format!("eval_{}", input.name()),
                csv: with_digest(digest, &csv),
                json: to_json(&scores),
            })
        }
        None => {
            let table = metrics::modality_table(model, frames)?;
            let csv = with_digest(digest, &table.to_csv());
            Ok(EvalOutput {
                stem: MODALITY_CSV.trim_end_matches(".csv").to_string(),
                csv,
                json: to_json(&TableScores {
                    config_digest: digest.to_string(),
                    table,
                }),
            })
        }
    }
}

pub fn evaluate(cfg: &RunConfig, avail: Option<ModalityAvailability>, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let plan = cfg.plan()?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => checkpoint_paths(&cfg.out, plan.schedule.step_count() - 1).0,
    };
    let saved = load_checkpoint(&path).with_context(|| "run `train` first or pass --checkpoint")?;
    let digest = cfg.digest();
    if saved.config_digest != cfg.digest_bytes() {
        return Err(digest_mismatch(&path, &hex::encode(saved.config_digest), &digest).into());
    }
    let splits = data::load(cfg)?;
    let out = evaluate_predictor(&saved.model, &splits.eval, avail, &digest)?;
    write_output(&cfg.out.join(format!("{}.csv", out.stem)), &out.csv)?;
    write_output(&cfg.out.join(format!("{}.json", out.stem)), &out.json)?;
    for line in out.csv.lines().skip(1) {
        println!("{line}");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub config_digest: String,
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckOutput> {
    let plan = cfg.plan()?;
    let classes = plan.schedule.seen_through(plan.schedule.step_count() - 1);
    let splits = data::load(cfg)?;
    let frame = splits
        .train
        .first()
        .ok_or_else(|| Error::Config("gradcheck needs at least one training frame".into()))?;
    let checks = gradcheck::run_suite(&plan.model_config(classes), plan.loss.align, frame, cfg.seed)?;
    Ok(GradcheckOutput {
        config_digest: cfg.digest(),
        eps: gradcheck::EPS,
        tolerance: gradcheck::TOLERANCE,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = run_gradcheck(cfg)?;
    write_output(&cfg.out.join(GRADCHECK_JSON), &to_json(&out))?;
    for c in &out.checks {
        println!(
            "{:<14} max_rel_error {:.3e} over {:>5} coords  {}",
            c.name,
            c.max_rel_error,
            c.checked,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if !out.passed {
        let failed: Vec<&str> = out
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(GradcheckFailed(failed.join(", ")).into());
    }
    Ok(())
}

pub fn report(cfg: &RunConfig) -> anyhow::Result<()> {
    let path = cfg.out.join(TRAIN_JSON);
    let report: TrainReport = read_json(&path).with_context(|| "run `train` first")?;
    let digest = cfg.digest();
    if report.config_digest != digest {
        return Err(digest_mismatch(&path, &report.config_digest, &digest).into());
    }
    let table = ReportTable::new(&report, cfg.total_classes());
    write_output(&cfg.out.join(REPORT_CSV), &with_digest(&digest, &table.to_csv()))?;
    print!("{}", table.to_text());
    Ok(())
}
