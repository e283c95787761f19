//! Order statistics against a full sort, and band retention against beta.

use rand::Rng as _;
use up2d_core::quantile::{quantile, quantile_mask};
use up2d_core::{rng, Tensor};

use super::Outcome;

const TENSORS: u64 = 1000;

fn sorted_quantile(values: &[f32], beta: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    v[(beta * (v.len() - 1) as f64).floor() as usize]
}

/// `[n, 2, h, w]` probabilities with at most 4096 values per class.
fn random_probs(index: u64) -> Tensor {
    let mut r = rng::stream(13, "quantile-oracle", index);
    let n = r.random_range(1..=4);
    let h = r.random_range(1..=32);
    let w = r.random_range(1..=(4096 / (n * h)).min(32));
    // coarse levels make ties common
    let levels: Option<u32> = r.random_bool(0.3).then(|| r.random_range(2..20));
    let data = (0..n * 2 * h * w)
        .map(|_| match levels {
            Some(l) => r.random_range(0..=l) as f32 / l as f32,
            None => r.random::<f32>(),
        })
        .collect();
    Tensor::new(vec![n, 2, h, w], data).unwrap()
}

pub fn run() -> Outcome {
    let betas: Vec<f64> = (0..10).map(|i| i as f64 * 0.05).collect();
    let mut order_mismatch = 0usize;
    let mut retention_violations = 0usize;
    let mut checks = 0usize;
    for index in 0..TENSORS {
        let p = probs_or_flat(index);
        let mut r = rng::stream(13, "quantile-levels", index);
        for beta in betas.iter().copied().chain([1.0 - 1e-9, 1.0, r.random::<f64>()]) {
            checks += 1;
            if quantile(p.data(), beta).unwrap() != sorted_quantile(p.data(), beta) {
                order_mismatch += 1;
            }
        }
        if p.rank() != 4 {
            continue;
        }
        let mut prev: Option<(Tensor, Vec<f64>)> = None;
        for &beta in &betas {
            let (mask, bands) = quantile_mask(&p, beta).unwrap();
            let retained: Vec<f64> = bands.iter().map(|b| b.retained).collect();
            if let Some((pm, pr)) = &prev {
                let grew = retained.iter().zip(pr).any(|(a, b)| a > b);
                let escaped = mask.data().iter().zip(pm.data()).any(|(&a, &b)| a > b);
                retention_violations += (grew || escaped) as usize;
            }
            prev = Some((mask, retained));
        }
    }
    Outcome::new(
        order_mismatch == 0 && retention_violations == 0,
        format!(
            "{TENSORS} tensors, {checks} quantile checks, {order_mismatch} order-statistic mismatches, \
             {retention_violations} retention increases over beta 0..0.45"
        ),
    )
}

/// Every fourth case is a flat vector of 1..=4096 values instead.
fn probs_or_flat(index: u64) -> Tensor {
    if index % 4 != 3 {
        return random_probs(index);
    }
    let mut r = rng::stream(13, "quantile-flat", index);
    let n = if index < 8 { index as usize / 4 + 1 } else { r.random_range(1..=4096) };
    Tensor::from_vec((0..n).map(|_| r.random_range(-3.0f32..3.0)).collect()).unwrap()
}
