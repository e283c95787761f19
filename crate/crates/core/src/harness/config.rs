//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpf::{DistanceFeatures, Eta2Scope, Pooling, RpfConfig, RpfMode};
use crate::synth::AugmentConfig;
use crate::ugema::GateMetric;
use crate::uncertainty::{EntropyForm, Eta2Mode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaMode {
    /// Update only when the batch uncertainty reaches a new minimum.
    #[default]
    Gated,
    /// Update after every batch.
    Plain,
    /// Never update.
    Frozen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyFilter {
    /// Entropy loss on the quantile band only.
    #[default]
    Quantile,
    /// Entropy loss on every pixel.
    Full,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherView {
    /// Un-augmented target image; the student's strong view keeps its geometry.
    #[default]
    Original,
    /// Flip/crop shared by teacher and student views.
    Weak,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source_dir: PathBuf,
    pub source_val_dir: PathBuf,
    pub target_dir: PathBuf,
    pub target_val_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,

    pub image_size: usize,
    pub n_source: usize,
    pub n_source_val: usize,
    pub n_target: usize,
    pub n_target_val: usize,

    pub source_epochs: usize,
    pub source_lr: f32,
    pub source_batch: usize,

    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,

    pub gamma: f32,
    pub k: usize,
    pub eta1: f32,
    pub eta2_mode: Eta2Mode,
    pub eta2_scope: Eta2Scope,
    pub alpha: f32,
    pub beta: f64,
    pub s: f64,

    pub rpf: RpfMode,
    pub ugema: EmaMode,
    pub entropy_filter: EntropyFilter,
    pub gate_metric: GateMetric,
    pub teacher_view: TeacherView,
    pub entropy_form: EntropyForm,
    pub pooling: Pooling,
    pub distance_features: DistanceFeatures,

    pub w_cons: f32,
    pub w_ent: f32,
    pub eval_threshold: f32,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source_dir: "data/source".into(),
            source_val_dir: "data/source_val".into(),
            target_dir: "data/target".into(),
            target_val_dir: "data/target_val".into(),
            out_dir: "runs".into(),
            checkpoint: "runs/source.ckpt".into(),
            image_size: 64,
            n_source: 64,
            n_source_val: 32,
            n_target: 32,
            n_target_val: 32,
            source_epochs: 60,
            source_lr: 1e-3,
            source_batch: 8,
            epochs: 20,
            lr: 5e-4,
            batch_size: 8,
            gamma: 0.75,
            k: 10,
            eta1: 0.05,
            eta2_mode: Eta2Mode::MeanOfMedians,
            eta2_scope: Eta2Scope::Informative,
            alpha: 0.95,
            beta: 0.1,
            s: 0.25,
            rpf: RpfMode::Refined,
            ugema: EmaMode::Gated,
            entropy_filter: EntropyFilter::Quantile,
            gate_metric: GateMetric::InvertedGaussian,
            teacher_view: TeacherView::Original,
            entropy_form: EntropyForm::Literal,
            pooling: Pooling::Batch,
            distance_features: DistanceFeatures::Raw,
            w_cons: 1.0,
            w_ent: 1.0,
            eval_threshold: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn bad(key: &str, value: &str, allowed: &str) -> Error {
    Error::Config(format!("invalid value '{value}' for '{key}' (expected {allowed})"))
}

/// Names of the component toggles accepted by `--toggle`.
pub const TOGGLES: [&str; 3] = ["rpf", "ugema", "entropy_filter"];

/// Table rows of the component ablation.
pub const PRESETS: [&str; 9] = [
    "source_only",
    "vanilla",
    "rpf",
    "entropy",
    "entropy_rpf",
    "ugema",
    "ugema_entropy",
    "ugema_rpf",
    "full",
];

impl RunConfig {
    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "source_dir" => self.source_dir = v.into(),
            "source_val_dir" => self.source_val_dir = v.into(),
            "target_dir" => self.target_dir = v.into(),
            "target_val_dir" => self.target_val_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "image_size" => self.image_size = parse(key, v)?,
            "n_source" => self.n_source = parse(key, v)?,
            "n_source_val" => self.n_source_val = parse(key, v)?,
            "n_target" => self.n_target = parse(key, v)?,
            "n_target_val" => self.n_target_val = parse(key, v)?,
            "source_epochs" => self.source_epochs = parse(key, v)?,
            "source_lr" => self.source_lr = parse(key, v)?,
            "source_batch" => self.source_batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "eta1" => self.eta1 = parse(key, v)?,
            "eta2_mode" => self.eta2_mode = v.parse()?,
            "eta2_scope" => {
                self.eta2_scope = match v {
                    "all" => Eta2Scope::All,
                    "informative" => Eta2Scope::Informative,
                    _ => return Err(bad(key, v, "all|informative")),
                }
            }
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "rpf" => {
                self.rpf = match v {
                    "on" | "refined" => RpfMode::Refined,
                    "standard" => RpfMode::Standard,
                    "off" => RpfMode::Off,
                    _ => return Err(bad(key, v, "on|standard|off")),
                }
            }
            "ugema" => {
                self.ugema = match v {
                    "on" => EmaMode::Gated,
                    "plain_ema" => EmaMode::Plain,
                    "off" => EmaMode::Frozen,
                    _ => return Err(bad(key, v, "on|plain_ema|off")),
                }
            }
            "entropy_filter" => {
                self.entropy_filter = match v {
                    "on" => EntropyFilter::Quantile,
                    "full" => EntropyFilter::Full,
                    "off" => EntropyFilter::Off,
                    _ => return Err(bad(key, v, "on|full|off")),
                }
            }
            "gate_metric" => self.gate_metric = v.parse()?,
            "teacher_view" => {
                self.teacher_view = match v {
                    "original" => TeacherView::Original,
                    "weak" => TeacherView::Weak,
                    _ => return Err(bad(key, v, "original|weak")),
                }
            }
            "entropy_form" => {
                self.entropy_form = match v {
                    "literal" => EntropyForm::Literal,
                    "binary" => EntropyForm::Binary,
                    _ => return Err(bad(key, v, "literal|binary")),
                }
            }
            "pooling" => {
                self.pooling = match v {
                    "batch" => Pooling::Batch,
                    "per_image" => Pooling::PerImage,
                    _ => return Err(bad(key, v, "batch|per_image")),
                }
            }
            "distance_features" => {
                self.distance_features = match v {
                    "filtered" => DistanceFeatures::Filtered,
                    "raw" => DistanceFeatures::Raw,
                    _ => return Err(bad(key, v, "filtered|raw")),
                }
            }
            "w_cons" => self.w_cons = parse(key, v)?,
            "w_ent" => self.w_ent = parse(key, v)?,
            "eval_threshold" => self.eval_threshold = parse(key, v)?,
            "min_crop" => self.augment.min_crop = parse(key, v)?,
            "contrast_min" => self.augment.contrast_range.0 = parse(key, v)?,
            "contrast_max" => self.augment.contrast_range.1 = parse(key, v)?,
            "erase_max_fraction" => self.augment.erase_max_fraction = parse(key, v)?,
            "noise_std" => self.augment.noise_std = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `name=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected name=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    /// Applies a component toggle; only the toggle keys are accepted.
    pub fn apply_toggle(&mut self, assignment: &str) -> Result<()> {
        let (k, _) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected name=mode, got '{assignment}'")))?;
        if !TOGGLES.contains(&k.trim()) {
            return Err(Error::Config(format!("unknown toggle '{k}' (expected one of {TOGGLES:?})")));
        }
        self.apply_override(assignment)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Config(what.to_string())) };
        check(self.image_size > 0 && self.image_size.is_multiple_of(crate::model::DOWNSAMPLE), "image_size must be a positive multiple of 8")?;
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)")?;
        check(self.k >= 1, "k must be >= 1")?;
        check(self.eta1 > 0.0, "eta1 must be > 0")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]")?;
        check((0.0..0.5).contains(&self.beta), "beta must lie in [0, 0.5)")?;
        check(self.s > 0.0, "s must be > 0")?;
        check(self.batch_size >= 1 && self.source_batch >= 1, "batch sizes must be >= 1")?;
        check(self.augment.min_crop > 0.0 && self.augment.min_crop <= 1.0, "min_crop must lie in (0, 1]")?;
        Ok(())
    }

    pub fn rpf_config(&self) -> RpfConfig {
        RpfConfig {
            mode: self.rpf,
            eta1: self.eta1,
            eta2_mode: self.eta2_mode,
            eta2_scope: self.eta2_scope,
            pooling: self.pooling,
            distance_features: self.distance_features,
        }
    }

    /// Component toggles for one ablation row.
    pub fn preset(mut self, name: &str) -> Result<Self> {
        let (rpf, ugema, ent) = match name {
            "vanilla" | "source_only" => ("off", "plain_ema", "off"),
            "rpf" => ("on", "plain_ema", "off"),
            "entropy" => ("off", "plain_ema", "on"),
            "entropy_rpf" => ("on", "plain_ema", "on"),
            "ugema" => ("off", "on", "off"),
            "ugema_entropy" => ("off", "on", "on"),
            "ugema_rpf" => ("on", "on", "off"),
            "full" => ("on", "on", "on"),
            _ => return Err(Error::Config(format!("unknown preset '{name}' (expected one of {PRESETS:?})"))),
        };
        self.set("rpf", rpf)?;
        self.set("ugema", ugema)?;
        self.set("entropy_filter", ent)?;
        if name == "source_only" {
            self.epochs = 0;
        }
        Ok(self)
    }

    /// Serializes to the `key = value` format accepted by [`RunConfig::parse_str`].
    pub fn to_kv(&self) -> String {
        let rpf = match self.rpf {
            RpfMode::Refined => "on",
            RpfMode::Standard => "standard",
            RpfMode::Off => "off",
        };
        let ugema = match self.ugema {
            EmaMode::Gated => "on",
            EmaMode::Plain => "plain_ema",
            EmaMode::Frozen => "off",
        };
        let ent = match self.entropy_filter {
            EntropyFilter::Quantile => "on",
            EntropyFilter::Full => "full",
            EntropyFilter::Off => "off",
        };
        let view = match self.teacher_view {
            TeacherView::Original => "original",
            TeacherView::Weak => "weak",
        };
        let form = match self.entropy_form {
            EntropyForm::Literal => "literal",
            EntropyForm::Binary => "binary",
        };
        let pooling = match self.pooling {
            Pooling::Batch => "batch",
            Pooling::PerImage => "per_image",
        };
        let dist = match self.distance_features {
            DistanceFeatures::Filtered => "filtered",
            DistanceFeatures::Raw => "raw",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("source_dir", &self.source_dir.display());
        kv("source_val_dir", &self.source_val_dir.display());
        kv("target_dir", &self.target_dir.display());
        kv("target_val_dir", &self.target_val_dir.display());
        kv("out_dir", &self.out_dir.display());
        kv("checkpoint", &self.checkpoint.display());
        kv("image_size", &self.image_size);
        kv("n_source", &self.n_source);
        kv("n_source_val", &self.n_source_val);
        kv("n_target", &self.n_target);
        kv("n_target_val", &self.n_target_val);
        kv("source_epochs", &self.source_epochs);
        kv("source_lr", &self.source_lr);
        kv("source_batch", &self.source_batch);
        kv("epochs", &self.epochs);
        kv("lr", &self.lr);
        kv("batch_size", &self.batch_size);
        kv("gamma", &self.gamma);
        kv("k", &self.k);
        kv("eta1", &self.eta1);
        kv("eta2_mode", &self.eta2_mode);
        kv(
            "eta2_scope",
            &match self.eta2_scope {
                Eta2Scope::All => "all",
                Eta2Scope::Informative => "informative",
            },
        );
        kv("alpha", &self.alpha);
        kv("beta", &self.beta);
        kv("s", &self.s);
        kv("rpf", &rpf);
        kv("ugema", &ugema);
        kv("entropy_filter", &ent);
        kv("gate_metric", &self.gate_metric);
        kv("teacher_view", &view);
        kv("entropy_form", &form);
        kv("pooling", &pooling);
        kv("distance_features", &dist);
        kv("w_cons", &self.w_cons);
        kv("w_ent", &self.w_ent);
        kv("eval_threshold", &self.eval_threshold);
        kv("min_crop", &self.augment.min_crop);
        kv("contrast_min", &self.augment.contrast_range.0);
        kv("contrast_max", &self.augment.contrast_range.1);
        kv("erase_max_fraction", &self.augment.erase_max_fraction);
        kv("noise_std", &self.augment.noise_std);
        kv("seed", &self.seed);
        out
    }
}
