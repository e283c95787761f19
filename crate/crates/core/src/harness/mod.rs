//! Experiment pipelines: data generation, source training, adaptation,
//! evaluation, reports and sweeps.

pub mod adapt;
pub mod config;
pub mod eval;
pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adapt::{adapt, AdaptLog, AdaptOutcome, EpochRecord, EvalSummary, StepRecord};
pub use config::{EmaMode, EntropyFilter, RunConfig, TeacherView};
pub use eval::evaluate;

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{self, Architecture, Checkpoint, SourceTrainConfig, TrainMeta};
use crate::rng;
use crate::synth::{self, DomainStyle, Sample, SceneDistribution, UnlabeledSample};
use svg::LineChart;

fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The four datasets of an experiment.
pub struct Datasets {
    pub source: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

/// Renders all datasets in memory from `cfg.seed`.
pub fn make_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let dist = SceneDistribution::with_size(cfg.image_size);
    let src = DomainStyle::identity();
    let tgt = DomainStyle::standard_target();
    let make = |n, style: &DomainStyle, tag| synth::make_dataset(n, &dist, style, rng::derive(cfg.seed, tag, 0));
    Ok(Datasets {
        source: make(cfg.n_source, &src, "source")?.0,
        source_val: make(cfg.n_source_val, &src, "source-val")?.0,
        target: make(cfg.n_target, &tgt, "target")?.0,
        target_val: make(cfg.n_target_val, &tgt, "target-val")?.0,
    })
}

/// Writes the four datasets to the directories named in `cfg`.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dist = SceneDistribution::with_size(cfg.image_size);
    let src = DomainStyle::identity();
    let tgt = DomainStyle::standard_target();
    for (dir, n, style, tag) in [
        (&cfg.source_dir, cfg.n_source, &src, "source"),
        (&cfg.source_val_dir, cfg.n_source_val, &src, "source-val"),
        (&cfg.target_dir, cfg.n_target, &tgt, "target"),
        (&cfg.target_val_dir, cfg.n_target_val, &tgt, "target-val"),
    ] {
        let (samples, manifest) = synth::make_dataset(n, &dist, style, rng::derive(cfg.seed, tag, 0))?;
        synth::write_dataset(dir, &samples, &manifest)?;
        log::info!("wrote {n} samples to {}", dir.display());
    }
    Ok(())
}

pub fn source_train_config(cfg: &RunConfig) -> SourceTrainConfig {
    SourceTrainConfig {
        epochs: cfg.source_epochs,
        lr: cfg.source_lr,
        batch_size: cfg.source_batch,
        seed: rng::derive(cfg.seed, "source-train", 0),
        augment: true,
    }
}

/// Trains the source model and reports its source-validation scores.
pub fn train_source(cfg: &RunConfig, source: &[Sample], source_val: &[Sample]) -> Result<(Checkpoint, EvalReport)> {
    let (ck, train_log) = model::train_source(source, Architecture::default(), &source_train_config(cfg))?;
    let report = evaluate(&ck.net, source_val, cfg.eval_threshold)?;
    log::info!(
        "source training: final loss {:.4}, source-val mean dice {:.2}",
        train_log.epoch_losses.last().copied().unwrap_or(f32::NAN),
        report.mean_dice()
    );
    Ok((ck, report))
}

/// Final numbers of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub final_eval: EvalSummary,
    pub teacher_updates: usize,
    pub gate_update_count: usize,
    pub gt_reads: usize,
}

pub struct RunResult {
    pub outcome: AdaptOutcome,
    pub report: EvalReport,
    pub summary: RunSummary,
}

/// Adapts, evaluating the student on `target_val` after every epoch.
pub fn run_adaptation(
    name: &str,
    cfg: &RunConfig,
    source: &Checkpoint,
    target: &[UnlabeledSample],
    target_val: &[Sample],
) -> Result<RunResult> {
    let threshold = cfg.eval_threshold;
    let mut hook = |_epoch: usize, net: &model::SegNet| evaluate(net, target_val, threshold).map(Some);
    let outcome = adapt(&source.net, target, cfg, Some(&mut hook))?;
    let report = evaluate(&outcome.student, target_val, threshold)?;
    let summary = RunSummary {
        name: name.to_string(),
        seed: cfg.seed,
        final_eval: EvalSummary::from(&report),
        teacher_updates: outcome.log.teacher_updates(),
        gate_update_count: outcome.gate_state.update_count,
        gt_reads: outcome.gt_reads,
    };
    Ok(RunResult {
        outcome,
        report,
        summary,
    })
}

/// Writes logs, checkpoints and evaluation tables of a run into `dir`.
pub fn write_run(dir: impl AsRef<Path>, cfg: &RunConfig, run: &RunResult) -> Result<()> {
    let dir = dir.as_ref();
    let log = &run.outcome.log;
    write(dir.join("config.txt"), cfg.to_kv())?;
    write(dir.join("steps.jsonl"), log.steps_jsonl())?;
    write(dir.join("gate.jsonl"), log.gate_jsonl())?;
    write(dir.join("epochs.jsonl"), log.epochs_jsonl())?;
    write(dir.join("eval.csv"), run.report.to_csv())?;
    write(dir.join("eval.md"), run.report.to_markdown(&run.summary.name))?;
    let summary = serde_json::to_string_pretty(&run.summary).map_err(|e| Error::Config(e.to_string()))?;
    write(dir.join("summary.json"), summary)?;
    let meta = TrainMeta {
        epoch: cfg.epochs,
        seed: cfg.seed,
        loss: log.steps.last().map_or(f32::NAN, |s| s.loss),
    };
    for (file, net) in [("student.ckpt", &run.outcome.student), ("teacher.ckpt", &run.outcome.teacher)] {
        Checkpoint {
            net: net.clone(),
            meta: meta.clone(),
        }
        .save(dir.join(file))?;
    }
    Ok(())
}

/// Reads `epochs.jsonl` of a run directory.
pub fn read_epochs(dir: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = dir.as_ref().join("epochs.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

/// Dice and ASSD curves plus a final-epoch table for several runs.
pub struct Report {
    pub markdown: String,
    pub dice_svg: String,
    pub assd_svg: String,
}

pub fn report(runs: &[(String, Vec<EpochRecord>)]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Empty("no runs to report".into()));
    }
    let mut dice = LineChart::new("Student Dice on target validation", "epoch", "mean Dice [%]");
    let mut assd = LineChart::new("Student ASSD on target validation", "epoch", "mean ASSD [px]");
    let mut md = String::from(
        "| run | final disc Dice | final cup Dice | final mean Dice | final mean ASSD | teacher updates |\n|---|---|---|---|---|---|\n",
    );
    for (name, epochs) in runs {
        let pts = |f: &dyn Fn(&EvalSummary) -> f64| {
            epochs
                .iter()
                .filter_map(|e| e.eval.as_ref().map(|v| ((e.epoch + 1) as f64, f(v))))
                .collect::<Vec<_>>()
        };
        dice.add(name, pts(&|v| v.mean_dice));
        assd.add(name, pts(&|v| v.mean_assd));
        let updates: usize = epochs.iter().map(|e| e.teacher_updates).sum();
        match epochs.last().and_then(|e| e.eval.as_ref()) {
            Some(v) => {
                let _ = writeln!(
                    md,
                    "| {name} | {:.2} | {:.2} | {:.2} | {:.2} | {updates} |",
                    v.dice[0], v.dice[1], v.mean_dice, v.mean_assd
                );
            }
            None => {
                let _ = writeln!(md, "| {name} | - | - | - | - | {updates} |");
            }
        }
    }
    Ok(Report {
        markdown: md,
        dice_svg: dice.to_svg(),
        assd_svg: assd.to_svg(),
    })
}

/// Loads run directories and writes `report.md`, `dice.svg`, `assd.svg` to `out`.
pub fn report_dirs(run_dirs: &[PathBuf], out: impl AsRef<Path>) -> Result<Report> {
    let runs = run_dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, read_epochs(d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let r = report(&runs)?;
    let out = out.as_ref();
    write(out.join("report.md"), &r.markdown)?;
    write(out.join("dice.svg"), &r.dice_svg)?;
    write(out.join("assd.svg"), &r.assd_svg)?;
    Ok(r)
}

/// One row of a hyper-parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub final_eval: EvalSummary,
}

/// Adapts once per value of `param`, writing each run under `out/<param>=<value>`.
pub fn sweep(
    base: &RunConfig,
    param: &str,
    values: &[String],
    source: &Checkpoint,
    target: &[UnlabeledSample],
    target_val: &[Sample],
    out: impl AsRef<Path>,
) -> Result<Vec<SweepRow>> {
    let out = out.as_ref();
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.set(param, v)?;
        cfg.validate()?;
        let name = format!("{param}={v}");
        let run = run_adaptation(&name, &cfg, source, target, target_val)?;
        write_run(out.join(&name), &cfg, &run)?;
        log::info!("sweep {name}: mean dice {:.2}", run.summary.final_eval.mean_dice);
        rows.push(SweepRow {
            param: param.to_string(),
            value: v.clone(),
            final_eval: run.summary.final_eval,
        });
    }
    write(out.join("sweep.md"), sweep_markdown(&rows))?;
    let mut csv = String::from("param,value,disc_dice,cup_dice,mean_dice,mean_assd\n");
    for r in &rows {
        let e = &r.final_eval;
        let _ = writeln!(csv, "{},{},{:.4},{:.4},{:.4},{:.4}", r.param, r.value, e.dice[0], e.dice[1], e.mean_dice, e.mean_assd);
    }
    write(out.join("sweep.csv"), csv)?;
    let mut chart = LineChart::new(&format!("Final Dice vs {param}"), param, "Dice [%]");
    let numeric: Vec<(f64, &SweepRow)> = rows.iter().filter_map(|r| r.value.parse().ok().map(|x| (x, r))).collect();
    if numeric.len() == rows.len() {
        chart.add("mean", numeric.iter().map(|(x, r)| (*x, r.final_eval.mean_dice)).collect());
        chart.add("disc", numeric.iter().map(|(x, r)| (*x, r.final_eval.dice[0])).collect());
        chart.add("cup", numeric.iter().map(|(x, r)| (*x, r.final_eval.dice[1])).collect());
        write(out.join("sweep.svg"), chart.to_svg())?;
    }
    Ok(rows)
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut md = String::from("| param | value | disc Dice | cup Dice | mean Dice | mean ASSD |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let e = &r.final_eval;
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.param, r.value, e.dice[0], e.dice[1], e.mean_dice, e.mean_assd
        );
    }
    md
}

/// Unlabeled views of labeled samples.
pub fn unlabeled(samples: &[Sample]) -> Vec<UnlabeledSample> {
    samples.iter().map(Sample::unlabeled).collect()
}
