//! Monte Carlo dropout inference for the teacher.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_EPS;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::SegNet;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Per-pixel entropy used for the entropy map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyForm {
    /// `-p ln p`.
    #[default]
    Literal,
    /// `-p ln p - (1 - p) ln(1 - p)`.
    Binary,
}

impl EntropyForm {
    pub fn eval(self, p: f32) -> f32 {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        match self {
            EntropyForm::Literal => -p * p.ln(),
            EntropyForm::Binary => -p * p.ln() - (1.0 - p) * (1.0 - p).ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// Mean of the K stochastic passes, `[N, 2, H, W]`.
    pub mean_probs: Tensor,
    /// Population standard deviation of the passes.
    pub std_map: Tensor,
    pub entropy_map: Tensor,
    /// `1[mean_probs >= gamma]`.
    pub pseudo_labels: Tensor,
    /// Penultimate activations of a deterministic pass at prediction resolution.
    pub features: Tensor,
    /// Probabilities of the same deterministic pass.
    pub det_probs: Tensor,
}

impl TeacherOutputs {
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        crate::tensor::save_fixtures(
            dir,
            [
                ("mean_probs", &self.mean_probs),
                ("std_map", &self.std_map),
                ("entropy_map", &self.entropy_map),
                ("pseudo_labels", &self.pseudo_labels),
                ("features", &self.features),
                ("det_probs", &self.det_probs),
            ],
        )
    }
}

/// Elementwise mean and population standard deviation of equally shaped passes.
pub fn summarize_passes(passes: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let first = passes
        .first()
        .ok_or_else(|| Error::Param("at least one pass is required".into()))?;
    for p in &passes[1..] {
        first.expect_same_shape(p, "MC passes")?;
    }
    let k = passes.len() as f64;
    let n = first.numel();
    let mut mean = vec![0f32; n];
    let mut std = vec![0f32; n];
    for i in 0..n {
        let m = passes.iter().map(|p| p.data()[i] as f64).sum::<f64>() / k;
        let var = passes.iter().map(|p| (p.data()[i] as f64 - m).powi(2)).sum::<f64>() / k;
        mean[i] = m as f32;
        std[i] = var.sqrt() as f32;
    }
    Ok((
        Tensor::new(first.shape().to_vec(), mean)?,
        Tensor::new(first.shape().to_vec(), std)?,
    ))
}

pub fn pseudo_labels(probs: &Tensor, gamma: f32) -> Result<Tensor> {
    probs.map(|p| (p >= gamma) as u8 as f32)
}

/// Runs `k` stochastic passes plus one deterministic pass of the teacher.
pub fn mc_forward(
    teacher: &SegNet,
    image: &Tensor,
    k: usize,
    gamma: f32,
    form: EntropyForm,
    rng: &mut Rng,
) -> Result<TeacherOutputs> {
    if k == 0 {
        return Err(Error::Param("number of MC passes must be >= 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Param(format!("confidence threshold {gamma} outside (0, 1)")));
    }
    let master = rng.next_u64();
    let passes = (0..k)
        .map(|i| {
            let mut r = rng::stream(master, "mc-pass", i as u64);
            teacher.forward(image, true, &mut r).map(|(p, _)| p)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_probs, std_map) = summarize_passes(&passes)?;
    let (det_probs, feats) = teacher.forward(image, false, rng)?;
    let [_, _, h, w] = det_probs.dims4()?;
    let [_, _, fh, fw] = feats.dims4()?;
    let features = if (fh, fw) == (h, w) {
        feats
    } else {
        kernels::resize_bilinear(&feats, h, w)?
    };
    Ok(TeacherOutputs {
        entropy_map: mean_probs.map(|p| form.eval(p))?,
        pseudo_labels: pseudo_labels(&mean_probs, gamma)?,
        mean_probs,
        std_map,
        features,
        det_probs,
    })
}

/// How the foreground and background entropy medians become a threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eta2Mode {
    /// Median over all pixels of the class channel.
    Union,
    /// Mean of the foreground median and the background median.
    #[default]
    MeanOfMedians,
    /// Foreground pixels use the foreground median, background the background one.
    PerRegion,
}

impl std::str::FromStr for Eta2Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(Eta2Mode::Union),
            "mean" | "mean_of_medians" => Ok(Eta2Mode::MeanOfMedians),
            "per_region" => Ok(Eta2Mode::PerRegion),
            _ => Err(Error::Config(format!("unknown eta2 mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Eta2Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Eta2Mode::Union => "union",
            Eta2Mode::MeanOfMedians => "mean_of_medians",
            Eta2Mode::PerRegion => "per_region",
        })
    }
}

/// Entropy thresholds for one class channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eta2 {
    pub fg: f32,
    pub bg: f32,
    /// Set when a region was empty and the global median was used instead.
    pub fallback: bool,
}

impl Eta2 {
    pub fn for_label(&self, label: f32) -> f32 {
        if label > 0.5 {
            self.fg
        } else {
            self.bg
        }
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &mut [f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f32::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Threshold from flat entropy values and their pseudo-labels.
pub fn eta2_from_values(e: &[f32], labels: &[f32], mode: Eta2Mode) -> Result<Eta2> {
    if e.len() != labels.len() {
        return Err(Error::Shape(format!("{} entropies vs {} labels", e.len(), labels.len())));
    }
    let mut all = e.to_vec();
    let global = median(&mut all).ok_or_else(|| Error::Empty("entropy map".into()))?;
    let mut fg: Vec<f32> = e.iter().zip(labels).filter(|(_, &l)| l > 0.5).map(|(&v, _)| v).collect();
    let mut bg: Vec<f32> = e.iter().zip(labels).filter(|(_, &l)| l <= 0.5).map(|(&v, _)| v).collect();
    if mode == Eta2Mode::Union {
        return Ok(Eta2 { fg: global, bg: global, fallback: false });
    }
    let (Some(mf), Some(mb)) = (median(&mut fg), median(&mut bg)) else {
        log::warn!("entropy threshold: empty foreground or background, using the global median");
        return Ok(Eta2 { fg: global, bg: global, fallback: true });
    };
    Ok(match mode {
        Eta2Mode::MeanOfMedians => {
            let m = 0.5 * (mf + mb);
            Eta2 { fg: m, bg: m, fallback: false }
        }
        _ => Eta2 { fg: mf, bg: mb, fallback: false },
    })
}

/// Per-class thresholds, pooled over the batch, from `[N, C, H, W]` maps.
pub fn entropy_median_threshold(e: &Tensor, labels: &Tensor, mode: Eta2Mode) -> Result<Vec<Eta2>> {
    e.expect_same_shape(labels, "entropy vs pseudo-labels")?;
    let [n, c, _, _] = e.dims4()?;
    (0..c)
        .map(|class| {
            let ev: Vec<f32> = (0..n).flat_map(|i| e.plane(i, class).iter().copied()).collect();
            let lv: Vec<f32> = (0..n).flat_map(|i| labels.plane(i, class).iter().copied()).collect();
            eta2_from_values(&ev, &lv, mode)
        })
        .collect()
}
