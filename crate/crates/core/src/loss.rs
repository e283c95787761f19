//! Masked, count-normalized pixel losses built from graph primitives.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `-sum_v m_v [y_v ln p_v + (1 - y_v) ln(1 - p_v)] / sum_v m_v`, with `p`
/// clamped away from {0, 1}. Returns a zero constant when the mask is empty.
pub fn masked_bce(g: &mut Graph, probs: Var, labels: &Tensor, mask: &Tensor) -> Result<Var> {
    g.value(probs).expect_same_shape(labels, "masked_bce labels")?;
    g.value(probs).expect_same_shape(mask, "masked_bce mask")?;
    let count = mask.sum();
    if count == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)?));
    }
    let pos = labels.zip_map(mask, |y, m| y * m)?;
    let neg = labels.zip_map(mask, |y, m| (1.0 - y) * m)?;
    let p = g.clamp_prob(probs)?;
    let ln_p = g.ln(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let ln_q = g.ln(q)?;
    let a = g.mul_const(ln_p, &pos)?;
    let b = g.mul_const(ln_q, &neg)?;
    let s = g.add(a, b)?;
    let total = g.sum(s)?;
    g.affine(total, (-1.0 / count) as f32, 0.0)
}

/// `-sum_v m_v p_v ln p_v / sum_v m_v` with clamped `p`; zero for an empty mask.
pub fn masked_neg_plogp(g: &mut Graph, probs: Var, mask: &Tensor) -> Result<Var> {
    g.value(probs).expect_same_shape(mask, "masked entropy mask")?;
    let count = mask.sum();
    if count == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)?));
    }
    let p = g.clamp_prob(probs)?;
    let ln_p = g.ln(p)?;
    let plogp = g.mul(p, ln_p)?;
    let masked = g.mul_const(plogp, mask)?;
    let total = g.sum(masked)?;
    g.affine(total, (-1.0 / count) as f32, 0.0)
}
