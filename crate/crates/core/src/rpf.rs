//! Refined prototype filtering of teacher pseudo-labels.
//!
//! Per-class tensors are `[N, 1, H, W]` and features `[N, F, H, W]`. The disc
//! channel uses the standard mask and the cup channel the refined mask, with
//! the disc as the surrounding class.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::synth::{CUP, DISC};
use crate::tensor::Tensor;
use crate::uncertainty::{self, Eta2, Eta2Mode, TeacherOutputs};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpfMode {
    /// Standard mask on the disc, refined mask on the cup.
    #[default]
    Refined,
    /// Standard mask on both channels.
    Standard,
    /// Every pixel supervised.
    Off,
}

/// Which features the distances are measured from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceFeatures {
    /// The same masked features that built the prototypes. Every masked-out
    /// pixel then sits at the origin and gets one shared decision.
    Filtered,
    /// Unmasked teacher features.
    #[default]
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    Batch,
    PerImage,
}

/// Which cup pixels the entropy medians are taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eta2Scope {
    /// Every pixel of the batch.
    All,
    /// Only pixels inside the informative region (predicted disc or cup).
    /// Far background has near-zero entropy and otherwise drags the
    /// background median to ~0.
    #[default]
    Informative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpfConfig {
    pub mode: RpfMode,
    pub eta1: f32,
    pub eta2_mode: Eta2Mode,
    pub eta2_scope: Eta2Scope,
    pub pooling: Pooling,
    pub distance_features: DistanceFeatures,
}

impl Default for RpfConfig {
    fn default() -> Self {
        RpfConfig {
            mode: RpfMode::Refined,
            eta1: 0.05,
            eta2_mode: Eta2Mode::MeanOfMedians,
            eta2_scope: Eta2Scope::Informative,
            pooling: Pooling::Batch,
            distance_features: DistanceFeatures::Raw,
        }
    }
}

fn check_plane(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let d = t.dims4()?;
    if d[1] != 1 {
        return Err(Error::Shape(format!("{what}: expected one channel, got {:?}", t.shape())));
    }
    Ok(d)
}

fn check_features(f: &Tensor, plane: &Tensor) -> Result<()> {
    let [n, _, h, w] = f.dims4()?;
    let [pn, _, ph, pw] = check_plane(plane, "per-class map")?;
    if (n, h, w) != (pn, ph, pw) {
        return Err(Error::Shape(format!(
            "features {:?} not pixel-aligned with {:?}",
            f.shape(),
            plane.shape()
        )));
    }
    Ok(())
}

/// Multiplies every feature channel by a per-pixel `[N, 1, H, W]` mask.
pub fn mask_features(f: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_features(f, mask)?;
    let [n, c, h, w] = f.dims4()?;
    let hw = h * w;
    let mut out = f.data().to_vec();
    for i in 0..n {
        let m = mask.plane(i, 0);
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for (v, &mv) in out[base..base + hw].iter_mut().zip(m) {
                *v *= mv;
            }
        }
    }
    Tensor::new(f.shape().to_vec(), out)
}

/// Low-uncertainty filter: returns `(f * keep, p * keep, keep)` with
/// `keep = 1[u < eta1]`.
pub fn reliable_filter(f: &Tensor, p: &Tensor, u: &Tensor, eta1: f32) -> Result<(Tensor, Tensor, Tensor)> {
    if eta1.is_nan() || eta1 <= 0.0 {
        return Err(Error::Param(format!("uncertainty threshold {eta1} must be > 0")));
    }
    p.expect_same_shape(u, "probabilities vs std map")?;
    check_features(f, p)?;
    let keep = u.map(|v| (v < eta1) as u8 as f32)?;
    Ok((mask_features(f, &keep)?, p.zip_map(&keep, |a, b| a * b)?, keep))
}

/// `1 - 1[y_cup = y_disc = 0]`.
pub fn info_region_mask(y_cup: &Tensor, y_disc: &Tensor) -> Result<Tensor> {
    y_cup.zip_map(y_disc, |c, d| !(c < 0.5 && d < 0.5) as u8 as f32)
}

/// `1[u < eta1] * 1[e < eta2]`, with `eta2` chosen by each pixel's label.
pub fn uncertainty_mask(u: &Tensor, e: &Tensor, labels: &Tensor, eta1: f32, eta2: &Eta2) -> Result<Tensor> {
    u.expect_same_shape(e, "std vs entropy")?;
    u.expect_same_shape(labels, "std vs labels")?;
    let data = u
        .data()
        .iter()
        .zip(e.data())
        .zip(labels.data())
        .map(|((&uv, &ev), &l)| (uv < eta1 && ev < eta2.for_label(l)) as u8 as f32)
        .collect();
    Tensor::new(u.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f32>,
    /// Pixels with nonzero weight.
    pub count: usize,
}

impl Prototype {
    pub fn is_valid(&self) -> bool {
        self.count > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub background: Prototype,
    pub foreground: Prototype,
}

impl PrototypeSet {
    pub fn is_valid(&self) -> bool {
        self.background.is_valid() && self.foreground.is_valid()
    }
}

/// Confidence-weighted mean feature of the pixels labeled `omega`.
///
/// Foreground pixels are weighted by `keep * p` and background pixels by
/// `keep * (1 - p)`. A prototype with zero total weight is invalid.
pub fn compute_prototype(f: &Tensor, p: &Tensor, labels: &Tensor, keep: &Tensor, omega: u8) -> Result<Prototype> {
    check_features(f, p)?;
    p.expect_same_shape(labels, "probabilities vs labels")?;
    p.expect_same_shape(keep, "probabilities vs keep mask")?;
    let [n, c, h, w] = f.dims4()?;
    let hw = h * w;
    let mut acc = vec![0f64; c];
    let mut total = 0f64;
    let mut count = 0;
    for i in 0..n {
        let (pp, ll, kk) = (p.plane(i, 0), labels.plane(i, 0), keep.plane(i, 0));
        for v in 0..hw {
            if (ll[v] > 0.5) != (omega == 1) {
                continue;
            }
            let conf = if omega == 1 { pp[v] } else { 1.0 - pp[v] };
            let wv = (kk[v] * conf) as f64;
            if wv == 0.0 {
                continue;
            }
            count += 1;
            total += wv;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += f.data()[(i * c + ch) * hw + v] as f64 * wv;
            }
        }
    }
    if count == 0 {
        return Ok(Prototype {
            vector: vec![0.0; c],
            count: 0,
        });
    }
    Ok(Prototype {
        vector: acc.iter().map(|a| (a / total) as f32).collect(),
        count,
    })
}

/// `||f_v - c||_2` for every pixel, `[N, 1, H, W]`.
pub fn distance_map(f: &Tensor, c: &Prototype) -> Result<Tensor> {
    let [n, ch, h, w] = f.dims4()?;
    if c.vector.len() != ch {
        return Err(Error::Shape(format!(
            "prototype has {} dims, features have {ch}",
            c.vector.len()
        )));
    }
    if !c.is_valid() {
        return Err(Error::Contract("distance to an invalid prototype".into()));
    }
    let hw = h * w;
    let mut out = vec![0f32; n * hw];
    for i in 0..n {
        for v in 0..hw {
            let mut s = 0f64;
            for (k, &cv) in c.vector.iter().enumerate() {
                let d = f.data()[(i * ch + k) * hw + v] as f64 - cv as f64;
                s += d * d;
            }
            out[i * hw + v] = s.sqrt() as f32;
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// `1[y=1] 1[d1<d0] + 1[y=0] 1[d1>d0]`; ties are excluded.
pub fn denoise_mask_standard(labels: &Tensor, d1: &Tensor, d0: &Tensor) -> Result<Tensor> {
    labels.expect_same_shape(d1, "labels vs d1")?;
    labels.expect_same_shape(d0, "labels vs d0")?;
    let data = labels
        .data()
        .iter()
        .zip(d1.data().iter().zip(d0.data()))
        .map(|(&y, (&a, &b))| if y > 0.5 { a < b } else { a > b } as u8 as f32)
        .collect();
    Tensor::new(labels.shape().to_vec(), data)
}

/// `1[y1=1] 1[d1<d0] + 1[y1=0] 1[(y2=0) or (d1>d0)]`.
pub fn denoise_mask_refined(y_cup: &Tensor, y_disc: &Tensor, d1: &Tensor, d0: &Tensor) -> Result<Tensor> {
    y_cup.expect_same_shape(y_disc, "cup vs disc labels")?;
    y_cup.expect_same_shape(d1, "labels vs d1")?;
    y_cup.expect_same_shape(d0, "labels vs d0")?;
    let data = (0..y_cup.numel())
        .map(|v| {
            let (y1, y2) = (y_cup.data()[v] > 0.5, y_disc.data()[v] > 0.5);
            let (a, b) = (d1.data()[v], d0.data()[v]);
            if y1 {
                a < b
            } else {
                !y2 || a > b
            }
        })
        .map(|keep| keep as u8 as f32)
        .collect();
    Tensor::new(y_cup.shape().to_vec(), data)
}

/// Masked BCE normalized by the retained-pixel count; zero for an empty mask.
pub fn consistency_loss(g: &mut Graph, student_probs: Var, labels: &Tensor, mask: &Tensor) -> Result<Var> {
    if mask.sum() == 0.0 {
        log::warn!("consistency loss: denoise mask is empty");
    }
    loss::masked_bce(g, student_probs, labels, mask)
}

/// Prototypes, distances and the mask for one channel, or `None` when a
/// prototype is invalid.
fn channel_mask(
    features: &Tensor,
    p: &Tensor,
    labels: &Tensor,
    keep: &Tensor,
    refine_with: Option<&Tensor>,
    cfg: &RpfConfig,
) -> Result<Option<(Tensor, PrototypeSet)>> {
    let filtered = mask_features(features, keep)?;
    let pf = p.zip_map(keep, |a, b| a * b)?;
    let protos = PrototypeSet {
        background: compute_prototype(&filtered, &pf, labels, keep, 0)?,
        foreground: compute_prototype(&filtered, &pf, labels, keep, 1)?,
    };
    if !protos.is_valid() {
        return Ok(None);
    }
    let fd = match cfg.distance_features {
        DistanceFeatures::Filtered => &filtered,
        DistanceFeatures::Raw => features,
    };
    let d1 = distance_map(fd, &protos.foreground)?;
    let d0 = distance_map(fd, &protos.background)?;
    let m = match refine_with {
        Some(outer) => denoise_mask_refined(labels, outer, &d1, &d0)?,
        None => denoise_mask_standard(labels, &d1, &d0)?,
    };
    Ok(Some((m, protos)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseMasks {
    /// `[N, 2, H, W]`; channel 0 disc, channel 1 cup.
    pub masks: Tensor,
    /// Fraction of pixels kept per class.
    pub retained: [f64; 2],
    /// Channels that fell back to an all-ones mask because a prototype was empty.
    pub invalid_prototypes: usize,
}

fn merge_channels(disc: &Tensor, cup: &Tensor) -> Result<Tensor> {
    let [n, _, h, w] = disc.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(2 * n * hw);
    for i in 0..n {
        out.extend_from_slice(disc.plane(i, 0));
        out.extend_from_slice(cup.plane(i, 0));
    }
    Tensor::new(vec![n, 2, h, w], out)
}

/// Builds the per-class denoise masks from the teacher outputs of one batch.
pub fn denoise(t: &TeacherOutputs, cfg: &RpfConfig) -> Result<DenoiseMasks> {
    let [n, c, h, w] = t.mean_probs.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 classes, got {c}")));
    }
    if cfg.mode == RpfMode::Off {
        return Ok(DenoiseMasks {
            masks: Tensor::ones(&[n, 2, h, w]),
            retained: [1.0, 1.0],
            invalid_prototypes: 0,
        });
    }
    if cfg.eta1.is_nan() || cfg.eta1 <= 0.0 {
        return Err(Error::Param(format!("uncertainty threshold {} must be > 0", cfg.eta1)));
    }
    if cfg.pooling == Pooling::PerImage && n > 1 {
        let parts = (0..n)
            .map(|i| denoise(&slice_outputs(t, i)?, &RpfConfig { pooling: Pooling::Batch, ..cfg.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let masks = Tensor::stack(&parts.iter().map(|d| &d.masks).collect::<Vec<_>>())?;
        return Ok(summarize(masks, parts.iter().map(|d| d.invalid_prototypes).sum()));
    }

    let ch = |m: &Tensor, k: usize| m.channel(k);
    let (p_disc, p_cup) = (ch(&t.mean_probs, DISC)?, ch(&t.mean_probs, CUP)?);
    let (u_disc, u_cup) = (ch(&t.std_map, DISC)?, ch(&t.std_map, CUP)?);
    let (y_disc, y_cup) = (ch(&t.pseudo_labels, DISC)?, ch(&t.pseudo_labels, CUP)?);
    let mut invalid = 0;

    let keep_disc = u_disc.map(|v| (v < cfg.eta1) as u8 as f32)?;
    let disc = match channel_mask(&t.features, &p_disc, &y_disc, &keep_disc, None, cfg)? {
        Some((m, _)) => m,
        None => {
            log::info!("disc prototype invalid, supervising every disc pixel this step");
            invalid += 1;
            Tensor::ones(y_disc.shape())
        }
    };

    let cup_result = match cfg.mode {
        RpfMode::Refined => {
            let e_cup = ch(&t.entropy_map, CUP)?;
            let info = info_region_mask(&y_cup, &y_disc)?;
            let eta2 = match cfg.eta2_scope {
                Eta2Scope::All => uncertainty::eta2_from_values(e_cup.data(), y_cup.data(), cfg.eta2_mode)?,
                Eta2Scope::Informative => {
                    let (ev, lv): (Vec<f32>, Vec<f32>) = e_cup
                        .data()
                        .iter()
                        .zip(y_cup.data())
                        .zip(info.data())
                        .filter(|(_, &m)| m > 0.5)
                        .map(|((&e, &l), _)| (e, l))
                        .unzip();
                    if ev.is_empty() {
                        uncertainty::eta2_from_values(e_cup.data(), y_cup.data(), cfg.eta2_mode)?
                    } else {
                        uncertainty::eta2_from_values(&ev, &lv, cfg.eta2_mode)?
                    }
                }
            };
            let unc = uncertainty_mask(&u_cup, &e_cup, &y_cup, cfg.eta1, &eta2)?;
            let keep = unc.zip_map(&info, |a, b| a * b)?;
            channel_mask(&t.features, &p_cup, &y_cup, &keep, Some(&y_disc), cfg)?
        }
        _ => {
            let keep = u_cup.map(|v| (v < cfg.eta1) as u8 as f32)?;
            channel_mask(&t.features, &p_cup, &y_cup, &keep, None, cfg)?
        }
    };
    let cup = match cup_result {
        Some((m, _)) => m,
        None => {
            log::info!("cup prototype invalid, supervising every cup pixel this step");
            invalid += 1;
            Tensor::ones(y_cup.shape())
        }
    };
    Ok(summarize(merge_channels(&disc, &cup)?, invalid))
}

fn summarize(masks: Tensor, invalid_prototypes: usize) -> DenoiseMasks {
    let [n, _, h, w] = masks.dims4().expect("masks are rank 4");
    let per = (n * h * w) as f64;
    let frac = |k: usize| (0..n).map(|i| masks.plane(i, k).iter().sum::<f32>() as f64).sum::<f64>() / per;
    DenoiseMasks {
        retained: [frac(0), frac(1)],
        masks,
        invalid_prototypes,
    }
}

fn slice_outputs(t: &TeacherOutputs, i: usize) -> Result<TeacherOutputs> {
    Ok(TeacherOutputs {
        mean_probs: t.mean_probs.item_at(i)?,
        std_map: t.std_map.item_at(i)?,
        entropy_map: t.entropy_map.item_at(i)?,
        pseudo_labels: t.pseudo_labels.item_at(i)?,
        features: t.features.item_at(i)?,
        det_probs: t.det_probs.item_at(i)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(h: usize, w: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![1, 1, h, w], v.to_vec()).unwrap()
    }

    fn feats(f: usize, h: usize, w: usize, v: Vec<f32>) -> Tensor {
        Tensor::new(vec![1, f, h, w], v).unwrap()
    }

    #[test]
    fn reliable_filter_cases() {
        let f = feats(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let p = plane(2, 2, &[0.9, 0.8, 0.7, 0.6]);
        let u = plane(2, 2, &[0.0, 0.1, 0.01, 0.2]);
        let (ff, pf, keep) = reliable_filter(&f, &p, &u, 0.05).unwrap();
        assert_eq!(keep.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ff.data(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(pf.data(), &[0.9, 0.0, 0.7, 0.0]);
        let (ff, pf, _) = reliable_filter(&f, &p, &Tensor::zeros(&[1, 1, 2, 2]), 0.05).unwrap();
        assert_eq!((&ff, &pf), (&f, &p));
        let (ff, pf, keep) = reliable_filter(&f, &p, &Tensor::ones(&[1, 1, 2, 2]), 0.05).unwrap();
        let y = Tensor::ones(&[1, 1, 2, 2]);
        assert!(!compute_prototype(&ff, &pf, &y, &keep, 1).unwrap().is_valid());
        assert!(reliable_filter(&f, &p, &u, 0.0).is_err());
    }

    #[test]
    fn info_region_truth_table() {
        let cup = plane(1, 4, &[0.0, 0.0, 1.0, 1.0]);
        let disc = plane(1, 4, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(info_region_mask(&cup, &disc).unwrap().data(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn prototype_cases() {
        let f = feats(2, 1, 3, vec![1.0, 0.0, 5.0, 0.0, 1.0, 5.0]);
        let p = plane(1, 3, &[0.8, 0.2, 0.1]);
        let y = plane(1, 3, &[1.0, 1.0, 0.0]);
        let keep = Tensor::ones(&[1, 1, 1, 3]);
        let c1 = compute_prototype(&f, &p, &y, &keep, 1).unwrap();
        assert!((c1.vector[0] - 0.8).abs() < 1e-6 && (c1.vector[1] - 0.2).abs() < 1e-6);
        assert_eq!(c1.count, 2);
        let c0 = compute_prototype(&f, &p, &y, &keep, 0).unwrap();
        assert_eq!(c0.vector, vec![5.0, 5.0]);

        let g = feats(2, 1, 3, vec![0.3, 0.3, 0.3, -1.0, -1.0, -1.0]);
        let c = compute_prototype(&g, &p, &Tensor::ones(&[1, 1, 1, 3]), &keep, 1).unwrap();
        assert!((c.vector[0] - 0.3).abs() < 1e-6 && (c.vector[1] + 1.0).abs() < 1e-6);
        let even = plane(1, 3, &[0.5, 0.5, 0.5]);
        let c = compute_prototype(&f, &even, &Tensor::ones(&[1, 1, 1, 3]), &keep, 1).unwrap();
        assert!((c.vector[0] - 2.0).abs() < 1e-6 && (c.vector[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn distance_cases() {
        let f = feats(2, 1, 2, vec![3.0, 1.0, 4.0, 2.0]);
        let c = Prototype {
            vector: vec![0.0, 0.0],
            count: 1,
        };
        let d = distance_map(&f, &c).unwrap();
        assert_eq!(d.data()[0], 5.0);
        let same = Prototype {
            vector: vec![1.0, 2.0],
            count: 1,
        };
        assert_eq!(distance_map(&f, &same).unwrap().data()[1], 0.0);
        assert!(distance_map(&f, &Prototype { vector: vec![0.0, 0.0], count: 0 }).is_err());
    }

    #[test]
    fn mask_cases() {
        let y1 = plane(1, 3, &[1.0, 1.0, 1.0]);
        let d1 = plane(1, 3, &[0.1, 0.9, 0.5]);
        let d0 = plane(1, 3, &[0.9, 0.1, 0.5]);
        assert_eq!(denoise_mask_standard(&y1, &d1, &d0).unwrap().data(), &[1.0, 0.0, 0.0]);

        let cup = plane(1, 4, &[0.0, 0.0, 1.0, 0.0]);
        let disc = plane(1, 4, &[0.0, 1.0, 1.0, 1.0]);
        let d1 = plane(1, 4, &[0.1, 0.1, 0.1, 0.9]);
        let d0 = plane(1, 4, &[0.9, 0.9, 0.9, 0.1]);
        assert_eq!(
            denoise_mask_refined(&cup, &disc, &d1, &d0).unwrap().data(),
            &[1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn consistency_loss_cases() {
        let y = plane(1, 2, &[1.0, 0.0]);
        let mut g = Graph::new();
        let p = g.param(y.map(|v| v.clamp(1e-7, 1.0 - 1e-7)).unwrap());
        let l = consistency_loss(&mut g, p, &y, &Tensor::ones(&[1, 1, 1, 2])).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-5);
        let l = consistency_loss(&mut g, p, &y, &Tensor::zeros(&[1, 1, 1, 2])).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    fn outputs(n: usize, h: usize, w: usize, seed: u64) -> TeacherOutputs {
        use rand::Rng as _;
        let mut r = crate::rng::seeded(seed);
        let mut gen = |shape: &[usize], lo: f32, hi: f32| {
            let k: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..k).map(|_| r.random_range(lo..hi)).collect()).unwrap()
        };
        let p = gen(&[n, 2, h, w], 0.0, 1.0);
        let u = gen(&[n, 2, h, w], 0.0, 0.1);
        let f = gen(&[n, 4, h, w], -1.0, 1.0);
        TeacherOutputs {
            entropy_map: p.map(|v| uncertainty::EntropyForm::Literal.eval(v)).unwrap(),
            pseudo_labels: uncertainty::pseudo_labels(&p, 0.6).unwrap(),
            det_probs: p.clone(),
            mean_probs: p,
            std_map: u,
            features: f,
        }
    }

    #[test]
    fn off_mode_and_degenerate_fallback() {
        let t = outputs(2, 4, 4, 1);
        let off = denoise(&t, &RpfConfig { mode: RpfMode::Off, ..Default::default() }).unwrap();
        assert_eq!(off.masks, Tensor::ones(&[2, 2, 4, 4]));
        let mut all_uncertain = t.clone();
        all_uncertain.std_map = Tensor::ones(&[2, 2, 4, 4]);
        let d = denoise(&all_uncertain, &RpfConfig::default()).unwrap();
        assert_eq!(d.invalid_prototypes, 2);
        assert_eq!(d.retained, [1.0, 1.0]);
    }

    #[test]
    fn channel_wiring() {
        // cup channel is refined against the disc, disc channel is standard
        let t = outputs(2, 6, 6, 5);
        let cfg = RpfConfig::default();
        let d = denoise(&t, &cfg).unwrap();
        let y_disc = t.pseudo_labels.channel(DISC).unwrap();
        let y_cup = t.pseudo_labels.channel(CUP).unwrap();
        let keep_disc = t.std_map.channel(DISC).unwrap().map(|v| (v < cfg.eta1) as u8 as f32).unwrap();
        let (m_disc, _) = channel_mask(&t.features, &t.mean_probs.channel(DISC).unwrap(), &y_disc, &keep_disc, None, &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(d.masks.channel(DISC).unwrap(), m_disc);
        let cup_mask = d.masks.channel(CUP).unwrap();
        for v in 0..y_cup.numel() {
            if y_cup.data()[v] == 0.0 && y_disc.data()[v] == 0.0 {
                assert_eq!(cup_mask.data()[v], 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn masks_invariant_to_feature_scale(seed in any::<u64>(), exp in -3i32..4) {
            let t = outputs(2, 4, 4, seed);
            let lambda = 2f32.powi(exp);
            let mut scaled = t.clone();
            scaled.features = t.features.map(|v| v * lambda).unwrap();
            for distance_features in [DistanceFeatures::Filtered, DistanceFeatures::Raw] {
                let cfg = RpfConfig { distance_features, ..Default::default() };
                prop_assert_eq!(denoise(&t, &cfg).unwrap(), denoise(&scaled, &cfg).unwrap());
            }
        }

        #[test]
        fn refined_keeps_outer_background(seed in any::<u64>()) {
            let t = outputs(1, 4, 4, seed);
            let d = denoise(&t, &RpfConfig::default()).unwrap();
            let y = &t.pseudo_labels;
            for v in 0..16 {
                if y.plane(0, CUP)[v] == 0.0 && y.plane(0, DISC)[v] == 0.0 {
                    prop_assert_eq!(d.masks.plane(0, CUP)[v], 1.0);
                }
            }
        }
    }
}
