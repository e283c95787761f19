//! Brute-force Dice and surface distance.

use rand::Rng as _;
use up2d_core::metrics::{assd, dice};
use up2d_core::{rng, Tensor};

use super::Outcome;

const PAIRS: u64 = 200;

pub fn oracle_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Foreground pixels whose cross neighbourhood in the zero-padded mask has a zero.
pub fn oracle_boundary(m: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![false; ph * pw];
    for y in 0..h {
        for x in 0..w {
            padded[(y + 1) * pw + x + 1] = m[y * w + x];
        }
    }
    let mut out = Vec::new();
    for y in 1..=h {
        for x in 1..=w {
            let c = y * pw + x;
            if padded[c] && [c - pw, c + pw, c - 1, c + 1].iter().any(|&n| !padded[n]) {
                out.push(((y - 1) as f64, (x - 1) as f64));
            }
        }
    }
    out
}

pub fn oracle_assd(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let (ba, bb) = (oracle_boundary(a, h, w), oracle_boundary(b, h, w));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(&ba, &bb) + directed(&bb, &ba)))
}

fn blob(r: &mut up2d_core::rng::Rng, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for _ in 0..r.random_range(0..4) {
        let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let (rx, ry) = (r.random_range(0.5..w as f64 / 3.0), r.random_range(0.5..h as f64 / 3.0));
        for y in 0..h {
            for x in 0..w {
                if ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0 {
                    m[y * w + x] = true;
                }
            }
        }
    }
    // speckle so boundaries are not only smooth curves
    for v in m.iter_mut() {
        if r.random_bool(0.02) {
            *v = !*v;
        }
    }
    m
}

fn tensor(m: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], m.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

pub fn run() -> Outcome {
    let mut dice_err = 0f64;
    let mut assd_err = 0f64;
    let mut undefined_mismatch = 0usize;
    let mut undefined = 0usize;
    for index in 0..PAIRS {
        let mut r = rng::stream(19, "metric-oracle", index);
        let (h, w) = (r.random_range(4..48), r.random_range(4..48));
        let (a, b) = (blob(&mut r, h, w), blob(&mut r, h, w));
        let (ta, tb) = (tensor(&a, h, w), tensor(&b, h, w));
        dice_err = dice_err.max((dice(&ta, &tb).unwrap() - oracle_dice(&a, &b)).abs());
        match (assd(&ta, &tb).unwrap(), oracle_assd(&a, &b, h, w)) {
            (Some(x), Some(y)) => assd_err = assd_err.max((x - y).abs()),
            (None, None) => undefined += 1,
            _ => undefined_mismatch += 1,
        }
    }

    let (h, w): (usize, usize) = (24, 24);
    let mut analytic = Vec::new();
    let same: Vec<bool> = (0..h * w).map(|i| (i % w).abs_diff(12).pow(2) + (i / w).abs_diff(11).pow(2) <= 36).collect();
    let t = tensor(&same, h, w);
    analytic.push(dice(&t, &t).unwrap() == 1.0);
    analytic.push(assd(&t, &t).unwrap() == Some(0.0));
    let mut p = vec![false; h * w];
    let mut q = vec![false; h * w];
    p[10 * w + 4] = true;
    q[10 * w + 9] = true;
    analytic.push(assd(&tensor(&p, h, w), &tensor(&q, h, w)).unwrap() == Some(5.0));
    let mut q = vec![false; h * w];
    q[15 * w + 4] = true;
    analytic.push(assd(&tensor(&p, h, w), &tensor(&q, h, w)).unwrap() == Some(5.0));
    let exact = analytic.iter().filter(|ok| **ok).count();

    Outcome::new(
        dice_err == 0.0 && assd_err <= 1e-6 && undefined_mismatch == 0 && exact == analytic.len(),
        format!(
            "{PAIRS} blob pairs: max dice error {dice_err:.1e}, max assd error {assd_err:.1e}, \
             {undefined} both-undefined, {undefined_mismatch} definedness mismatches; analytic {exact}/{}",
            analytic.len()
        ),
    )
}
