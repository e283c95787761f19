//! Straight-line reference of the gated teacher update schedule.

use rand::Rng as _;
use up2d_core::rng;
use up2d_core::ugema::UgemaState;

use super::Outcome;

const TRAJECTORIES: u64 = 1000;
const EPOCHS: usize = 20;
const TIES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Update flags per epoch, the running epoch minimum after each epoch, and the update count.
pub struct Trace {
    pub flags: Vec<Vec<bool>>,
    pub min_epoch: Vec<f64>,
    pub updates: usize,
}

pub fn reference(trajectory: &[Vec<f64>]) -> Trace {
    let mut e_min_epoch = f64::INFINITY;
    let mut trace = Trace {
        flags: Vec::new(),
        min_epoch: Vec::new(),
        updates: 0,
    };
    for batches in trajectory {
        let mut e_min_batch = e_min_epoch;
        let mut flags = Vec::new();
        let mut sum = 0.0;
        for &e_b in batches {
            sum += e_b;
            if e_b < e_min_batch {
                flags.push(true);
                e_min_batch = e_b;
                trace.updates += 1;
            } else {
                flags.push(false);
            }
        }
        if !batches.is_empty() {
            let mean = sum / batches.len() as f64;
            if mean < e_min_epoch {
                e_min_epoch = mean;
            }
        }
        trace.flags.push(flags);
        trace.min_epoch.push(e_min_epoch);
    }
    trace
}

pub fn library(trajectory: &[Vec<f64>]) -> Trace {
    let mut state = UgemaState::new();
    let mut trace = Trace {
        flags: Vec::new(),
        min_epoch: Vec::new(),
        updates: 0,
    };
    for batches in trajectory {
        trace.flags.push(batches.iter().map(|&e| state.gate(e)).collect());
        state.epoch_end();
        trace.min_epoch.push(state.min_epoch);
    }
    trace.updates = state.update_count;
    trace
}

pub fn trajectory(index: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(11, "gate-oracle", index);
    let drift: f64 = r.random_range(-0.03..0.01);
    (0..EPOCHS)
        .map(|epoch| {
            let n = if r.random_range(0..40) == 0 { 0 } else { r.random_range(1..=12) };
            let level = (0.5 + drift * epoch as f64).max(0.05);
            (0..n)
                .map(|_| {
                    if r.random_bool(0.4) {
                        TIES[r.random_range(0..TIES.len())]
                    } else {
                        level * r.random_range(0.5..1.5)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn run() -> Outcome {
    let mut mismatches = 0usize;
    let mut batches = 0usize;
    let mut updates = 0usize;
    for index in 0..TRAJECTORIES {
        let t = trajectory(index);
        let (want, got) = (reference(&t), library(&t));
        batches += t.iter().map(Vec::len).sum::<usize>();
        updates += want.updates;
        mismatches += want
            .flags
            .iter()
            .flatten()
            .zip(got.flags.iter().flatten())
            .filter(|(a, b)| a != b)
            .count();
        mismatches += want.min_epoch.iter().zip(&got.min_epoch).filter(|(a, b)| a != b).count();
        mismatches += (want.updates != got.updates) as usize;
    }
    Outcome::new(
        mismatches == 0,
        format!("{TRAJECTORIES} trajectories x {EPOCHS} epochs, {batches} batches, {updates} updates, {mismatches} mismatches"),
    )
}
