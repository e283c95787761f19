use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use up2d_core::harness::{self, RunConfig};
use up2d_core::model::Checkpoint;
use up2d_core::synth;

/// Source-free adaptation experiments on synthetic fundus images.
#[derive(Parser, Debug)]
#[command(name = "up2d", version)]
struct Cli {
    /// key = value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Component toggle, e.g. `rpf=standard` or `ugema=plain_ema`. Repeatable.
    #[arg(long = "toggle", global = true, value_name = "NAME=MODE")]
    toggles: Vec<String>,
    /// Any config key, e.g. `epochs=5`. Repeatable, applied after toggles.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the source, source-val, target and target-val datasets.
    GenData,
    /// Train the source model and save it to the configured checkpoint.
    TrainSource,
    /// Adapt the source checkpoint to the target dataset.
    Adapt {
        /// Ablation preset applied before toggles and overrides.
        #[arg(long)]
        preset: Option<String>,
        /// Run directory name under the output directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the target validation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tabulate and plot the epoch logs of finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Adapt once per value of one config key.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn load_config(cli: &Cli, preset: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = preset {
        cfg = cfg.preset(p)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    for t in &cli.toggles {
        cfg.apply_toggle(t)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {} (run train-source first?)", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli, None)?;
            harness::gen_data(&cfg)?;
        }
        Command::TrainSource => {
            let cfg = load_config(&cli, None)?;
            let source = synth::load_dataset(&cfg.source_dir)?;
            let source_val = synth::load_dataset(&cfg.source_val_dir)?;
            let (ck, report) = harness::train_source(&cfg, &source, &source_val)?;
            if let Some(dir) = cfg.checkpoint.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            ck.save(&cfg.checkpoint)?;
            write(&cfg.out_dir.join("source_eval.md"), &report.to_markdown("source model on source-val"))?;
            let mean = report.mean_dice();
            if mean < 90.0 {
                log::warn!("source model mean dice {mean:.2} is below 90; downstream results will be unreliable");
            }
            println!("saved {} (digest {}), source-val mean dice {mean:.2}", cfg.checkpoint.display(), ck.digest());
        }
        Command::Adapt { preset, name } => {
            let cfg = load_config(&cli, preset.as_deref())?;
            let name = name.clone().or_else(|| preset.clone()).unwrap_or_else(|| "adapt".into());
            let source = load_checkpoint(&cfg.checkpoint)?;
            let target = synth::load_unlabeled(&cfg.target_dir)?;
            let target_val = synth::load_dataset(&cfg.target_val_dir)?;
            let run = harness::run_adaptation(&name, &cfg, &source, &target, &target_val)?;
            if run.summary.gt_reads != 0 {
                bail!("adaptation read target labels {} times", run.summary.gt_reads);
            }
            let dir = cfg.out_dir.join(&name);
            harness::write_run(&dir, &cfg, &run)?;
            let e = &run.summary.final_eval;
            println!(
                "{name}: disc {:.2} cup {:.2} mean dice {:.2}, mean assd {:.2}, {} teacher updates -> {}",
                e.dice[0],
                e.dice[1],
                e.mean_dice,
                e.mean_assd,
                run.summary.teacher_updates,
                dir.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let cfg = load_config(&cli, None)?;
            let ck = load_checkpoint(checkpoint.as_ref().unwrap_or(&cfg.checkpoint))?;
            let data = data.as_ref().unwrap_or(&cfg.target_val_dir);
            let samples = synth::load_dataset(data)?;
            let report = harness::evaluate(&ck.net, &samples, cfg.eval_threshold)?;
            let md = report.to_markdown(&data.display().to_string());
            write(&cfg.out_dir.join("eval.md"), &md)?;
            write(&cfg.out_dir.join("eval.csv"), &report.to_csv())?;
            print!("{md}");
        }
        Command::Report { runs } => {
            let cfg = load_config(&cli, None)?;
            let r = harness::report_dirs(runs, &cfg.out_dir)?;
            print!("{}", r.markdown);
        }
        Command::Sweep { param, values, preset } => {
            let cfg = load_config(&cli, preset.as_deref())?;
            let source = load_checkpoint(&cfg.checkpoint)?;
            let target = synth::load_unlabeled(&cfg.target_dir)?;
            let target_val = synth::load_dataset(&cfg.target_val_dir)?;
            let rows = harness::sweep(&cfg, param, values, &source, &target, &target_val, &cfg.out_dir)?;
            print!("{}", harness::sweep_markdown(&rows));
        }
    }
    Ok(())
}
