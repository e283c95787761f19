//! Shared fixtures for the benchmarks.

use rand::Rng as _;
use up2d_core::model::{Architecture, SegNet};
use up2d_core::{rng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).expect("shape matches data")
}

/// `[1, 3, side, side]` image in [0, 1].
pub fn image(side: usize, seed: u64) -> Tensor {
    random_tensor(&[1, 3, side, side], seed).map(|v| 0.5 * (v + 1.0)).expect("finite")
}

pub fn network(seed: u64) -> SegNet {
    SegNet::new(Architecture::default(), seed)
}

/// `[side, side]` filled disc of radius `r` centered at `(cx, cy)`.
pub fn disc(side: usize, cx: f64, cy: f64, r: f64) -> Tensor {
    let data = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            ((x - cx).powi(2) + (y - cy).powi(2) <= r * r) as u8 as f32
        })
        .collect();
    Tensor::new(vec![side, side], data).expect("shape matches data")
}
