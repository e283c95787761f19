//! Seeded end-to-end runs on the default synthetic shift.

use std::collections::BTreeMap;
use std::time::Instant;

use up2d_core::audit::AdaptationScope;
use up2d_core::harness::{self, EvalSummary, RunConfig};
use up2d_core::model::Checkpoint;
use up2d_core::synth::{Sample, UnlabeledSample};

use super::Outcome;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const S_SWEEP: [f64; 7] = [0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45];
const CUP: usize = 1;

pub struct RunRecord {
    pub final_eval: EvalSummary,
    /// Mean Dice on target validation after every epoch.
    pub epoch_dice: Vec<f64>,
    pub gt_reads: usize,
    pub teacher_updates: usize,
    pub secs: f64,
}

struct SeedContext {
    seed: u64,
    source: Checkpoint,
    source_cup: f64,
    source_only: EvalSummary,
    target: Vec<UnlabeledSample>,
    target_val: Vec<Sample>,
    secs: f64,
}

/// Lazily trained source models and memoized adaptation runs.
#[derive(Default)]
pub struct Lab {
    seeds: BTreeMap<u64, SeedContext>,
    runs: BTreeMap<(u64, String), RunRecord>,
}

fn base_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

impl Lab {
    fn context(&mut self, seed: u64) -> &SeedContext {
        self.seeds.entry(seed).or_insert_with(|| {
            let start = Instant::now();
            let cfg = base_config(seed);
            let data = harness::make_datasets(&cfg).expect("datasets");
            let (source, report) = harness::train_source(&cfg, &data.source, &data.source_val).expect("source training");
            let source_only =
                EvalSummary::from(&harness::evaluate(&source.net, &data.target_val, cfg.eval_threshold).expect("eval"));
            let secs = start.elapsed().as_secs_f64();
            eprintln!(
                "  seed {seed}: source cup {:.2}, source-only target cup {:.2} ({secs:.0}s)",
                report.class_dice(CUP),
                source_only.dice[CUP]
            );
            SeedContext {
                seed,
                source_cup: report.class_dice(CUP),
                source_only,
                target: harness::unlabeled(&data.target),
                target_val: data.target_val,
                source,
                secs,
            }
        })
    }

    /// Runs `preset` with the scale `s`, once per seed.
    pub fn run(&mut self, seed: u64, preset: &str, s: f64) -> &RunRecord {
        let key = (seed, format!("{preset}@{s}"));
        if !self.runs.contains_key(&key) {
            let ctx = self.context(seed);
            let mut cfg = base_config(ctx.seed).preset(preset).expect("preset");
            cfg.s = s;
            let start = Instant::now();
            let result =
                harness::run_adaptation(preset, &cfg, &ctx.source, &ctx.target, &ctx.target_val).expect("adaptation");
            let record = RunRecord {
                final_eval: result.summary.final_eval.clone(),
                epoch_dice: result
                    .outcome
                    .log
                    .epochs
                    .iter()
                    .filter_map(|e| e.eval.as_ref().map(|v| v.mean_dice))
                    .collect(),
                gt_reads: result.summary.gt_reads,
                teacher_updates: result.summary.teacher_updates,
                secs: start.elapsed().as_secs_f64(),
            };
            eprintln!(
                "  seed {seed} {preset} s={s}: mean dice {:.2} (disc {:.2}, cup {:.2}), {} teacher updates ({:.0}s)",
                record.final_eval.mean_dice,
                record.final_eval.dice[0],
                record.final_eval.dice[CUP],
                record.teacher_updates,
                record.secs
            );
            self.runs.insert(key.clone(), record);
        }
        &self.runs[&key]
    }

    fn default_run(&mut self, seed: u64, preset: &str) -> &RunRecord {
        self.run(seed, preset, RunConfig::default().s)
    }

    fn seed_mean(&mut self, preset: &str, f: impl Fn(&RunRecord) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(self.default_run(s, preset))).sum::<f64>() / SEEDS.len() as f64
    }

    fn context_mean(&mut self, f: impl Fn(&SeedContext) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(self.context(s))).sum::<f64>() / SEEDS.len() as f64
    }

    /// Total wall time spent so far, in minutes.
    pub fn minutes(&self) -> f64 {
        (self.seeds.values().map(|c| c.secs).sum::<f64>() + self.runs.values().map(|r| r.secs).sum::<f64>()) / 60.0
    }
}

/// Shift is real; full beats vanilla and source-only; vanilla < rpf <= full.
pub fn shift_trend(lab: &mut Lab) -> Outcome {
    let start = lab.minutes();
    let source_cup = lab.context_mean(|c| c.source_cup);
    let source_only_cup = lab.context_mean(|c| c.source_only.dice[CUP]);
    let source_only_mean = lab.context_mean(|c| c.source_only.mean_dice);
    let vanilla = lab.seed_mean("vanilla", |r| r.final_eval.mean_dice);
    let rpf = lab.seed_mean("rpf", |r| r.final_eval.mean_dice);
    let full = lab.seed_mean("full", |r| r.final_eval.mean_dice);
    let full_cup = lab.seed_mean("full", |r| r.final_eval.dice[CUP]);

    let drop = source_cup - source_only_cup;
    let a = drop >= 10.0;
    let b = full - vanilla >= 2.0 && full_cup - source_only_cup >= 5.0;
    let c = vanilla < rpf && rpf <= full;
    let minutes = lab.minutes() - start;
    Outcome::new(
        a && b && c && minutes <= 30.0,
        format!(
            "seed means over {SEEDS:?}: (a) source cup {source_cup:.2} -> target {source_only_cup:.2} (drop {drop:.2}) {}; \
             (b) full {full:.2} vs vanilla {vanilla:.2} (+{:.2}), full cup {full_cup:.2} vs source-only cup \
             {source_only_cup:.2} (+{:.2}), source-only mean {source_only_mean:.2} {}; (c) vanilla {vanilla:.2} < rpf \
             {rpf:.2} <= full {full:.2} {}; {minutes:.1} min",
            verdict(a),
            full - vanilla,
            full_cup - source_only_cup,
            verdict(b),
            verdict(c)
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn tail(v: &[f64], n: usize) -> &[f64] {
    &v[v.len().saturating_sub(n)..]
}

/// Gated EMA against plain EMA with everything else equal.
pub fn gate_stability(lab: &mut Lab) -> Outcome {
    let start = lab.minutes();
    let final5 = |r: &RunRecord| mean(tail(&r.epoch_dice, 5));
    let std10 = |r: &RunRecord| population_std(tail(&r.epoch_dice, 10));
    let gated_final = lab.seed_mean("full", final5);
    let plain_final = lab.seed_mean("entropy_rpf", final5);
    let gated_std = lab.seed_mean("full", std10);
    let plain_std = lab.seed_mean("entropy_rpf", std10);
    let minutes = lab.minutes() - start;
    Outcome::new(
        gated_final >= plain_final && gated_std <= plain_std && minutes <= 20.0,
        format!(
            "seed means: final-5 dice gated {gated_final:.2} vs plain {plain_final:.2}; last-10 std gated \
             {gated_std:.3} vs plain {plain_std:.3}; {minutes:.1} min"
        ),
    )
}

/// Final mean Dice across the Gaussian scale sweep.
pub fn scale_robustness(lab: &mut Lab) -> Outcome {
    let start = lab.minutes();
    let finals: Vec<f64> = S_SWEEP
        .iter()
        .map(|&s| mean(&SEEDS.iter().map(|&seed| lab.run(seed, "full", s).final_eval.mean_dice).collect::<Vec<_>>()))
        .collect();
    let best = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = finals.iter().copied().fold(f64::INFINITY, f64::min);
    let minutes = lab.minutes() - start;
    let curve: Vec<String> = S_SWEEP.iter().zip(&finals).map(|(s, d)| format!("{s}:{d:.2}")).collect();
    Outcome::new(
        best - worst < 1.5 && minutes <= 45.0,
        format!(
            "seed-mean final dice [{}], range {:.3}; {minutes:.1} min",
            curve.join(" "),
            best - worst
        ),
    )
}

/// Every adaptation run so far read zero target labels, and the counter does
/// see a read made inside a scope.
pub fn audit(lab: &mut Lab) -> Outcome {
    if lab.runs.is_empty() {
        lab.default_run(SEEDS[0], "full");
    }
    let total: usize = lab.runs.values().map(|r| r.gt_reads).sum();
    let offenders = lab.runs.values().filter(|r| r.gt_reads != 0).count();
    let control = {
        let ctx = lab.context(SEEDS[0]);
        let scope = AdaptationScope::enter();
        let _ = ctx.target_val[0].gt_masks();
        scope.gt_reads()
    };
    Outcome::new(
        total == 0 && control == 1,
        format!(
            "{} runs, {total} target label reads ({offenders} offending runs); positive control counted {control} read",
            lab.runs.len()
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "NOT MET"
    }
}
