//! Quantile-filtered entropy minimization.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::Tensor;

/// Lower order statistic at index `floor(beta * (n - 1))`.
pub fn quantile(values: &[f32], beta: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty tensor".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Param(format!("quantile level {beta} outside [0, 1]")));
    }
    let idx = (beta * (values.len() - 1) as f64).floor() as usize;
    let mut v = values.to_vec();
    let (_, q, _) = v.select_nth_unstable_by(idx, f32::total_cmp);
    Ok(*q)
}

/// Per-class band `(q_low, q_high)` and retained fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileBand {
    pub beta: f64,
    pub q_low: f32,
    pub q_high: f32,
    pub retained: f64,
}

/// `1[p > q_low] * 1[p < q_high]` with the quantiles of each class channel
/// pooled over the batch. Returns the `[N, C, H, W]` mask and one band per class.
pub fn quantile_mask(p: &Tensor, beta: f64) -> Result<(Tensor, Vec<QuantileBand>)> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::Param(format!("quantile threshold {beta} outside [0, 0.5)")));
    }
    let [n, c, h, w] = p.dims4()?;
    let hw = h * w;
    let mut mask = vec![0f32; p.numel()];
    let mut bands = Vec::with_capacity(c);
    for k in 0..c {
        let pooled: Vec<f32> = (0..n).flat_map(|i| p.plane(i, k).iter().copied()).collect();
        let q_low = quantile(&pooled, beta)?;
        let q_high = quantile(&pooled, 1.0 - beta)?;
        let mut kept = 0usize;
        for i in 0..n {
            let base = (i * c + k) * hw;
            for (m, &v) in mask[base..base + hw].iter_mut().zip(p.plane(i, k)) {
                if v > q_low && v < q_high {
                    *m = 1.0;
                    kept += 1;
                }
            }
        }
        if kept == 0 {
            log::warn!("quantile band for class {k} is empty (q_low {q_low}, q_high {q_high})");
        }
        bands.push(QuantileBand {
            beta,
            q_low,
            q_high,
            retained: kept as f64 / pooled.len() as f64,
        });
    }
    Ok((Tensor::new(p.shape().to_vec(), mask)?, bands))
}

/// `-sum m p ln p / sum m`; zero for an empty mask.
pub fn entropy_loss(g: &mut Graph, probs: Var, mask: &Tensor) -> Result<Var> {
    loss::masked_neg_plogp(g, probs, mask)
}

/// `w_cons * l_cons + w_ent * l_ent`.
pub fn total_loss(g: &mut Graph, l_cons: Var, l_ent: Var, w_cons: f32, w_ent: f32) -> Result<Var> {
    for (v, what) in [(l_cons, "consistency loss"), (l_ent, "entropy loss")] {
        g.value(v).check_finite(what)?;
    }
    let a = g.affine(l_cons, w_cons, 0.0)?;
    let b = g.affine(l_ent, w_ent, 0.0)?;
    g.add(a, b)
}
