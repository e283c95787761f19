//! Uncertainty-gated EMA teacher updates with inverted-Gaussian boundary
//! weighting.

use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_EPS;
use crate::error::{Error, Result};
use crate::model::SegNet;
use crate::tensor::Tensor;

/// Inverted Gaussian centered on the foreground of one binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussWeight {
    /// `(x, y)` centroid in pixels.
    pub center: (f64, f64),
    /// `(sigma_x, sigma_y)` in pixels.
    pub sigma: (f64, f64),
    /// `[H, W]` weights in `[0, 1)`.
    pub map: Tensor,
    /// Foreground pixel fraction.
    pub delta: f64,
}

/// Builds the weight map from an `[H, W]` binary mask; `None` when the
/// foreground is empty.
pub fn inverted_gaussian(mask: &[f32], h: usize, w: usize, s: f64) -> Result<Option<GaussWeight>> {
    if s.is_nan() || s <= 0.0 {
        return Err(Error::Param(format!("gaussian scale {s} must be > 0")));
    }
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask of {} pixels for {h}x{w}", mask.len())));
    }
    let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > 0.5 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let sigma = (s * (x1 - x0 + 1) as f64, s * (y1 - y0 + 1) as f64);
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let q = (x as f64 - mx).powi(2) / (2.0 * sigma.0 * sigma.0)
                + (y as f64 - my).powi(2) / (2.0 * sigma.1 * sigma.1);
            map.push((1.0 - (-q).exp()) as f32);
        }
    }
    Ok(Some(GaussWeight {
        center: (mx, my),
        sigma,
        map: Tensor::new(vec![h, w], map)?,
        delta: n as f64 / (h * w) as f64,
    }))
}

/// `tau = max{G : y = 1} - delta` and `A = 1[y = 1 or (y = 0 and G <= tau)]`.
pub fn region_mask(mask: &[f32], gw: &GaussWeight) -> Result<(f64, Tensor)> {
    let g = gw.map.data();
    if mask.len() != g.len() {
        return Err(Error::Shape(format!("mask of {} pixels vs weight map of {}", mask.len(), g.len())));
    }
    let max_fg = mask
        .iter()
        .zip(g)
        .filter(|(&m, _)| m > 0.5)
        .map(|(_, &v)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let tau = max_fg - gw.delta;
    if tau <= 0.0 {
        log::debug!("gaussian band collapsed (tau = {tau:.4}), region is the foreground only");
    }
    let a = mask
        .iter()
        .zip(g)
        .map(|(&m, &v)| (m > 0.5 || v as f64 <= tau) as u8 as f32)
        .collect();
    Ok((tau, Tensor::new(gw.map.shape().to_vec(), a)?))
}

/// `-sum A G p ln p / sum A G`; `None` when the denominator vanishes.
pub fn weighted_entropy(p: &[f32], a: &[f32], g: &[f32]) -> Option<f64> {
    let (mut num, mut den) = (0f64, 0f64);
    for ((&pv, &av), &gv) in p.iter().zip(a).zip(g) {
        let wv = av as f64 * gv as f64;
        if wv == 0.0 {
            continue;
        }
        let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64;
        num -= wv * pc * pc.ln();
        den += wv;
    }
    (den > 0.0).then(|| num / den)
}

/// How the student's learning state is scored for the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMetric {
    /// Entropy weighted by the inverted Gaussian inside the region mask.
    #[default]
    InvertedGaussian,
    /// Unweighted mean `-p ln p` over the whole image.
    Entropy,
    /// The student's training loss on the batch.
    Loss,
}

impl std::str::FromStr for GateMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "inverted_gaussian" => Ok(GateMetric::InvertedGaussian),
            "entropy" => Ok(GateMetric::Entropy),
            "loss" => Ok(GateMetric::Loss),
            _ => Err(Error::Config(format!("unknown gate metric '{s}'"))),
        }
    }
}

impl std::fmt::Display for GateMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMetric::InvertedGaussian => "inverted_gaussian",
            GateMetric::Entropy => "entropy",
            GateMetric::Loss => "loss",
        })
    }
}

/// Batch uncertainty of the student, averaged over classes and items whose
/// teacher foreground is nonempty. `None` when every item was skipped.
pub fn batch_uncertainty(student_probs: &Tensor, teacher_labels: &Tensor, s: f64, metric: GateMetric) -> Result<Option<f64>> {
    student_probs.expect_same_shape(teacher_labels, "student probs vs teacher labels")?;
    let [n, c, h, w] = student_probs.dims4()?;
    let mut values = Vec::with_capacity(n * c);
    for i in 0..n {
        for k in 0..c {
            let p = student_probs.plane(i, k);
            let y = teacher_labels.plane(i, k);
            let value = match metric {
                GateMetric::InvertedGaussian => match inverted_gaussian(y, h, w, s)? {
                    Some(gw) => {
                        let (_, a) = region_mask(y, &gw)?;
                        weighted_entropy(p, a.data(), gw.map.data())
                    }
                    None => {
                        log::debug!("item {i} class {k}: empty teacher foreground, skipped");
                        None
                    }
                },
                GateMetric::Entropy => {
                    let ones = vec![1f32; h * w];
                    weighted_entropy(p, &ones, &ones)
                }
                GateMetric::Loss => return Err(Error::Contract("loss gate is scored by the training loop".into())),
            };
            values.extend(value);
        }
    }
    if values.is_empty() {
        return Ok(None);
    }
    Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
}

/// Gate state across epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UgemaState {
    /// Lowest epoch-mean uncertainty so far; `+inf` before the first epoch ends.
    pub min_epoch: f64,
    /// Lowest batch uncertainty accepted in the current epoch.
    pub min_batch: f64,
    pub batch_uncertainties: Vec<f64>,
    pub update_count: usize,
    pub incidents: usize,
    pub epoch: usize,
}

impl Default for UgemaState {
    fn default() -> Self {
        UgemaState {
            min_epoch: f64::INFINITY,
            min_batch: f64::INFINITY,
            batch_uncertainties: Vec::new(),
            update_count: 0,
            incidents: 0,
            epoch: 0,
        }
    }
}

impl UgemaState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `e_b` and reports whether the teacher should be updated.
    pub fn gate(&mut self, e_b: f64) -> bool {
        if !e_b.is_finite() {
            log::warn!("non-finite batch uncertainty {e_b}, teacher left unchanged");
            self.incidents += 1;
            return false;
        }
        self.batch_uncertainties.push(e_b);
        if e_b < self.min_batch {
            self.min_batch = e_b;
            self.update_count += 1;
            true
        } else {
            false
        }
    }

    /// Records `e_b` for an externally decided update (plain or frozen EMA).
    pub fn record(&mut self, e_b: f64, updated: bool) {
        if e_b.is_finite() {
            self.batch_uncertainties.push(e_b);
        }
        self.update_count += updated as usize;
    }

    /// Gates on `e_b` and applies `teacher <- alpha teacher + (1 - alpha) student`
    /// when it fires.
    pub fn step(&mut self, e_b: f64, teacher: &mut SegNet, student: &SegNet, alpha: f32) -> Result<bool> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Param(format!("EMA rate {alpha} outside [0, 1]")));
        }
        let fire = self.gate(e_b);
        if fire {
            teacher.ema_from(student, alpha)?;
        }
        Ok(fire)
    }

    /// Closes the epoch; returns its mean uncertainty, or `None` for an empty
    /// epoch (state unchanged).
    pub fn epoch_end(&mut self) -> Option<f64> {
        if self.batch_uncertainties.is_empty() {
            log::warn!("epoch {} recorded no batch uncertainties", self.epoch);
            return None;
        }
        let mean = self.batch_uncertainties.iter().sum::<f64>() / self.batch_uncertainties.len() as f64;
        self.min_epoch = self.min_epoch.min(mean);
        self.min_batch = self.min_epoch;
        self.batch_uncertainties.clear();
        self.epoch += 1;
        Some(mean)
    }
}

/// One line of the gate log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub epoch: usize,
    pub batch: usize,
    pub e_b: Option<f64>,
    pub updated: bool,
    /// `None` while still infinite.
    pub min_epoch: Option<f64>,
}
