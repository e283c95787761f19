//! Synthetic two-class (disc/cup) fundus-like scenes, photometric domain
//! styles, augmentation operators and the on-disk dataset layout.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DISC: usize = 0;
pub const CUP: usize = 1;

const BACKGROUND_RGB: [f32; 3] = [0.55, 0.26, 0.13];
const DISC_RGB: [f32; 3] = [0.82, 0.55, 0.30];
const CUP_RGB: [f32; 3] = [0.95, 0.80, 0.58];
/// Width in pixels of the soft intensity ramp at region borders.
const EDGE_PX: f32 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Disc (and cup) center as a fraction of the image side, `(x, y)`.
    pub disc_center: (f32, f32),
    pub disc_radii: (f32, f32),
    pub cup_radii: (f32, f32),
    pub background_texture_scale: f32,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f32| r > 0.0 && r < 0.5;
        if self.image_size == 0 {
            return Err(Error::Spec("image size must be positive".into()));
        }
        let (dx, dy) = self.disc_radii;
        let (cx, cy) = self.cup_radii;
        if ![dx, dy, cx, cy].into_iter().all(in_range) {
            return Err(Error::Spec(format!(
                "radii must lie in (0, 0.5): disc {:?}, cup {:?}",
                self.disc_radii, self.cup_radii
            )));
        }
        if cx >= dx || cy >= dy {
            return Err(Error::Spec(format!(
                "cup radii {:?} not inside disc radii {:?}",
                self.cup_radii, self.disc_radii
            )));
        }
        Ok(())
    }
}

/// Photometric style of a domain. Fields at their identity values are
/// skipped entirely so the identity style is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub brightness_shift: f32,
    pub contrast_gain: f32,
    pub blur_sigma: f32,
    pub noise_std: f32,
    pub hue_tint: [f32; 3],
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle {
            brightness_shift: 0.0,
            contrast_gain: 1.0,
            blur_sigma: 0.0,
            noise_std: 0.0,
            hue_tint: [1.0; 3],
        }
    }

    /// The default source-to-target shift used by the experiments. Damping
    /// green and blue narrows the cup/disc colour gap, so source models
    /// under-segment the cup on the target.
    pub fn standard_target() -> Self {
        DomainStyle {
            hue_tint: [1.0, 0.93, 0.86],
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn apply_intensity(&self, v: f32, c: usize) -> f32 {
        let mut x = v;
        if self.contrast_gain != 1.0 || self.brightness_shift != 0.0 {
            x = (x - 0.5) * self.contrast_gain + 0.5 + self.brightness_shift;
        }
        if self.hue_tint[c] != 1.0 {
            x *= self.hue_tint[c];
        }
        x.clamp(0.0, 1.0)
    }

    /// Applies the style to a `[3, H, W]` image. `rng` drives the noise.
    pub fn apply(&self, image: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(image.clone());
        }
        let (h, w) = hw(image)?;
        let mut data = image.data().to_vec();
        let pointwise = self.contrast_gain != 1.0
            || self.brightness_shift != 0.0
            || self.hue_tint != [1.0; 3];
        if pointwise {
            for (c, plane) in data.chunks_exact_mut(h * w).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.apply_intensity(*v, c));
            }
        }
        if self.blur_sigma > 0.0 {
            for plane in data.chunks_exact_mut(h * w) {
                gaussian_blur(plane, h, w, self.blur_sigma);
            }
        }
        if self.noise_std > 0.0 {
            add_noise(&mut data, self.noise_std, rng)?;
        }
        Tensor::new(image.shape().to_vec(), data)
    }
}

fn hw(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::Shape(format!("expected [3, H, W] image, got {s:?}"))),
    }
}

fn gaussian_blur(plane: &mut [f32], h: usize, w: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
}

fn add_noise(data: &mut [f32], std: f32, rng: &mut Rng) -> Result<()> {
    let normal = Normal::new(0.0f32, std).map_err(|e| Error::Param(e.to_string()))?;
    for v in data.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(())
}

/// A target-domain (or source-domain) image with its held-out masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    gt_masks: Tensor,
}

/// Image-only view handed to the adaptation loop.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, gt_masks: Tensor) -> Result<Self> {
        let (h, w) = hw(&image)?;
        if gt_masks.shape() != [2, h, w] {
            return Err(Error::Shape(format!(
                "masks {:?} do not match image {:?}",
                gt_masks.shape(),
                image.shape()
            )));
        }
        Ok(Sample {
            id: id.into(),
            image,
            gt_masks,
        })
    }

    /// Binary `[2, H, W]` masks, channel 0 = disc, 1 = cup. Reads are audited.
    pub fn gt_masks(&self) -> &Tensor {
        audit::record_gt_read();
        &self.gt_masks
    }

    pub fn unlabeled(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id.clone(),
            image: self.image.clone(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Renders a scene and applies `style` last. Image values are quantized to
/// 8 bits so that in-memory and on-disk datasets agree exactly.
pub fn render(spec: &SceneSpec, style: &DomainStyle) -> Result<Sample> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = rng::seeded(spec.rng_seed);
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.0f32..1.0),
                rng.random_range(2.0f32..7.0),
                rng.random_range(0.0f32..std::f32::consts::TAU),
                rng.random_range(0.5f32..1.0),
            )
        })
        .collect();
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.03f32..0.03));

    let (cx, cy) = spec.disc_center;
    let (drx, dry) = spec.disc_radii;
    let (crx, cry) = spec.cup_radii;
    let mut image = vec![0f32; 3 * s * s];
    let mut masks = vec![0f32; 2 * s * s];
    let disc_px = 0.5 * (drx + dry) * s as f32;
    let cup_px = 0.5 * (crx + cry) * s as f32;
    for y in 0..s {
        for x in 0..s {
            let fx = (x as f32 + 0.5) / s as f32;
            let fy = (y as f32 + 0.5) / s as f32;
            let rd = (((fx - cx) / drx).powi(2) + ((fy - cy) / dry).powi(2)).sqrt();
            let rc = (((fx - cx) / crx).powi(2) + ((fy - cy) / cry).powi(2)).sqrt();
            let in_disc = rd <= 1.0;
            let in_cup = rc <= 1.0;
            let a_disc = (0.5 + (1.0 - rd) * disc_px / EDGE_PX).clamp(0.0, 1.0);
            let a_cup = (0.5 + (1.0 - rc) * cup_px / EDGE_PX).clamp(0.0, 1.0);
            let texture: f32 = waves
                .iter()
                .map(|&(dir, freq, phase, amp)| {
                    let t = dir * std::f32::consts::PI;
                    amp * (freq * std::f32::consts::TAU * (fx * t.cos() + fy * t.sin()) + phase).sin()
                })
                .sum::<f32>()
                * spec.background_texture_scale;
            for c in 0..3 {
                let bg = BACKGROUND_RGB[c] + jitter[c] + texture;
                let disc = DISC_RGB[c] + jitter[c] + 0.3 * texture;
                let v = bg * (1.0 - a_disc) + disc * a_disc;
                let v = v * (1.0 - a_cup) + (CUP_RGB[c] + jitter[c]) * a_cup;
                image[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
            masks[(DISC * s + y) * s + x] = in_disc as u8 as f32;
            masks[(CUP * s + y) * s + x] = in_cup as u8 as f32;
        }
    }
    let image = Tensor::new(vec![3, s, s], image)?;
    let mut noise_rng = rng::stream(spec.rng_seed, "style-noise", 0);
    let styled = style.apply(&image, &mut noise_rng)?;
    let quantized = styled.map(quantize)?;
    Sample::new(
        format!("s{:016x}", spec.rng_seed),
        quantized,
        Tensor::new(vec![2, s, s], masks)?,
    )
}

fn quantize(v: f32) -> f32 {
    (v * 255.0).round() / 255.0
}

/// Geometric part of an augmentation: optional horizontal flip followed by a
/// square crop resized back to the full image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub flip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_side: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

impl GeoTransform {
    pub fn identity(size: usize) -> Self {
        GeoTransform {
            flip: false,
            crop_x: 0,
            crop_y: 0,
            crop_side: size,
            size,
        }
    }

    pub fn sample(size: usize, min_crop: f32, rng: &mut Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let lo = ((min_crop * size as f32).ceil() as usize).clamp(1, size);
        let side = rng.random_range(lo..=size);
        GeoTransform {
            flip,
            crop_x: rng.random_range(0..=size - side),
            crop_y: rng.random_range(0..=size - side),
            crop_side: side,
            size,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_side == self.size
    }

    /// Applies the transform to every channel of a `[C, H, W]` tensor.
    pub fn apply(&self, t: &Tensor, interp: Interp) -> Result<Tensor> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected [C, H, W], got {:?}", t.shape())));
        };
        if h != self.size || w != self.size {
            return Err(Error::Shape(format!(
                "transform for size {} applied to {h}x{w}",
                self.size
            )));
        }
        if self.is_identity() {
            return Ok(t.clone());
        }
        let s = self.size;
        let mut flipped = t.data().to_vec();
        if self.flip {
            for row in flipped.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.crop_side == s {
            return Tensor::new(t.shape().to_vec(), flipped);
        }
        let side = self.crop_side;
        let mut crop = Vec::with_capacity(c * side * side);
        for plane in flipped.chunks_exact(h * w) {
            for y in 0..side {
                let row = &plane[(self.crop_y + y) * w + self.crop_x..][..side];
                crop.extend_from_slice(row);
            }
        }
        let crop = Tensor::new(vec![1, c, side, side], crop)?;
        let out = match interp {
            Interp::Bilinear => kernels::resize_bilinear(&crop, s, s)?,
            Interp::Nearest => resize_nearest(&crop, s)?,
        };
        out.reshape(vec![c, s, s])
    }
}

fn resize_nearest(t: &Tensor, out: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4()?;
    let mut data = Vec::with_capacity(n * c * out * out);
    for plane in t.data().chunks_exact(h * w) {
        for y in 0..out {
            let sy = ((y as f32 + 0.5) * h as f32 / out as f32) as usize;
            for x in 0..out {
                let sx = ((x as f32 + 0.5) * w as f32 / out as f32) as usize;
                data.push(plane[sy.min(h - 1) * w + sx.min(w - 1)]);
            }
        }
    }
    Tensor::new(vec![n, c, out, out], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f32,
    pub contrast_range: (f32, f32),
    pub erase_max_fraction: f32,
    pub noise_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_crop: 0.85,
            contrast_range: (0.7, 1.3),
            erase_max_fraction: 0.15,
            noise_std: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Strong augmentation with every photometric operator disabled.
    pub fn zero_strength(&self) -> Self {
        AugmentConfig {
            contrast_range: (1.0, 1.0),
            erase_max_fraction: 0.0,
            noise_std: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Picks a `w x h` rectangle whose area is as close as possible to
/// `fraction * size^2` with aspect ratio in `[0.5, 2]`, preferring the
/// aspect closest to `aspect`.
fn erase_dims(size: usize, fraction: f32, aspect: f32) -> (usize, usize) {
    let target = fraction as f64 * (size * size) as f64;
    let mut best = (1usize, 1usize);
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for h in 1..=size {
        let w = ((target / h as f64).round() as usize).clamp(1, size);
        let ratio = w as f64 / h as f64;
        if !(0.5..=2.0).contains(&ratio) {
            continue;
        }
        let area_err = ((w * h) as f64 - target).abs();
        let key = (area_err, (ratio.ln() - (aspect as f64).ln()).abs());
        if key < best_key {
            best_key = key;
            best = (w, h);
        }
    }
    best
}

/// Fills one random axis-aligned rectangle of area `fraction` of the image
/// with `fill` (per channel).
pub fn random_erase(image: &mut Tensor, fraction: f32, fill: [f32; 3], rng: &mut Rng) -> Result<Rect> {
    let (h, w) = hw(image)?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Param(format!("erase fraction {fraction} outside [0, 1)")));
    }
    let aspect = rng.random_range(0.5f32..2.0);
    let (rw, rh) = erase_dims(h.min(w), fraction, aspect);
    let rect = Rect {
        x: rng.random_range(0..=w - rw),
        y: rng.random_range(0..=h - rh),
        w: rw,
        h: rh,
    };
    let data = image.data_mut();
    for (c, plane) in data.chunks_exact_mut(h * w).enumerate() {
        for y in rect.y..rect.y + rect.h {
            plane[y * w + rect.x..y * w + rect.x + rect.w].fill(fill[c]);
        }
    }
    Ok(rect)
}

/// Contrast, erasing and noise applied to an already geometry-transformed
/// image. `fill` is the dataset mean colour used for erasing.
pub fn photometric(image: &Tensor, cfg: &AugmentConfig, fill: [f32; 3], rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = hw(image)?;
    let mut out = image.clone();
    let (lo, hi) = cfg.contrast_range;
    if lo != 1.0 || hi != 1.0 {
        let gain = if lo < hi { rng.random_range(lo..hi) } else { lo };
        let data = out.data_mut();
        for plane in data.chunks_exact_mut(h * w) {
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() as f32 / (h * w) as f32;
            plane
                .iter_mut()
                .for_each(|v| *v = ((*v - mean) * gain + mean).clamp(0.0, 1.0));
        }
    }
    if cfg.erase_max_fraction > 0.0 {
        let lo = cfg.erase_max_fraction.min(0.02);
        let fraction = rng.random_range(lo..=cfg.erase_max_fraction);
        random_erase(&mut out, fraction, fill, rng)?;
    }
    if cfg.noise_std > 0.0 {
        add_noise(out.data_mut(), cfg.noise_std, rng)?;
    }
    Ok(out)
}

/// Horizontal flip plus small crop-resize, applied identically to the masks.
pub fn weak_augment(s: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    let (h, _) = s.size();
    let geo = GeoTransform::sample(h, cfg.min_crop, rng);
    Ok(Sample {
        id: s.id.clone(),
        image: geo.apply(&s.image, Interp::Bilinear)?,
        gt_masks: geo.apply(&s.gt_masks, Interp::Nearest)?,
    })
}

/// Weak augmentation followed by contrast adjustment, random erasing and
/// Gaussian noise.
pub fn strong_augment(s: &Sample, cfg: &AugmentConfig, fill: [f32; 3], rng: &mut Rng) -> Result<Sample> {
    let weak = weak_augment(s, cfg, rng)?;
    Ok(Sample {
        image: photometric(&weak.image, cfg, fill, rng)?,
        ..weak
    })
}

/// Per-channel mean colour over a set of images.
pub fn mean_color<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> [f32; 3] {
    let mut acc = [0f64; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.numel() / 3;
        for (c, ch) in img.data().chunks_exact(plane).enumerate() {
            acc[c] += ch.iter().map(|&v| v as f64).sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.5; 3];
    }
    acc.map(|a| (a / count as f64) as f32)
}

/// Distribution scene parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub image_size: usize,
    pub center_jitter: f32,
    pub disc_radius: (f32, f32),
    pub aspect_jitter: f32,
    pub cup_ratio: (f32, f32),
    pub texture_scale: (f32, f32),
}

impl SceneDistribution {
    pub fn with_size(image_size: usize) -> Self {
        SceneDistribution {
            image_size,
            ..Self::default()
        }
    }

    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut r = rng::stream(seed, "scene", 0);
        let j = self.center_jitter;
        let rx = r.random_range(self.disc_radius.0..=self.disc_radius.1);
        let ry = rx * r.random_range(1.0 - self.aspect_jitter..=1.0 + self.aspect_jitter);
        let ratio = r.random_range(self.cup_ratio.0..=self.cup_ratio.1);
        SceneSpec {
            image_size: self.image_size,
            disc_center: (0.5 + r.random_range(-j..=j), 0.5 + r.random_range(-j..=j)),
            disc_radii: (rx, ry),
            cup_radii: (rx * ratio, ry * ratio * r.random_range(0.92..=1.08f32).min(0.98 / ratio)),
            background_texture_scale: r.random_range(self.texture_scale.0..=self.texture_scale.1),
            rng_seed: seed,
        }
    }
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            image_size: DEFAULT_IMAGE_SIZE,
            center_jitter: 0.08,
            disc_radius: (0.13, 0.19),
            aspect_jitter: 0.1,
            cup_ratio: (0.4, 0.65),
            texture_scale: (0.02, 0.06),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub style: DomainStyle,
    pub distribution: SceneDistribution,
    pub samples: Vec<ManifestEntry>,
}

/// Generates `n` samples reproducibly from `seed`.
pub fn make_dataset(
    n: usize,
    dist: &SceneDistribution,
    style: &DomainStyle,
    seed: u64,
) -> Result<(Vec<Sample>, Manifest)> {
    if n == 0 {
        return Err(Error::Param("dataset size must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = rng::derive(seed, "sample", i as u64);
        let scene = dist.sample(sample_seed);
        let mut s = render(&scene, style)?;
        s.id = format!("{i:05}");
        entries.push(ManifestEntry {
            id: s.id.clone(),
            seed: sample_seed,
            scene,
        });
        samples.push(s);
    }
    let manifest = Manifest {
        version: 1,
        seed,
        image_size: dist.image_size,
        style: style.clone(),
        distribution: dist.clone(),
        samples: entries,
    };
    Ok((samples, manifest))
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let (h, w) = s.size();
        let rgb = interleave(&s.image, h, w);
        write_png(&dir.join("images").join(format!("{}.png", s.id)), &rgb, h, w)?;
        let mut packed = vec![0u8; h * w * 3];
        for (i, px) in packed.chunks_exact_mut(3).enumerate() {
            px[0] = if s.gt_masks.data()[i] > 0.5 { 255 } else { 0 };
            px[1] = if s.gt_masks.data()[h * w + i] > 0.5 { 255 } else { 0 };
        }
        write_png(&dir.join("masks").join(format!("{}.png", s.id)), &packed, h, w)?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn interleave(image: &Tensor, h: usize, w: usize) -> Vec<u8> {
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn write_png(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(f));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}

fn deinterleave(rgb: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_image(dir: &Path, id: &str) -> Result<Tensor> {
    let (rgb, h, w) = read_png(&dir.join("images").join(format!("{id}.png")))?;
    Tensor::new(vec![3, h, w], deinterleave(&rgb, h, w))
}

/// Loads images and masks. Fails if any mask file is missing.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .samples
        .iter()
        .map(|e| {
            let image = read_image(dir, &e.id)?;
            let (rgb, h, w) = read_png(&dir.join("masks").join(format!("{}.png", e.id)))?;
            let mut masks = vec![0f32; 2 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                masks[i] = (px[0] > 127) as u8 as f32;
                masks[h * w + i] = (px[1] > 127) as u8 as f32;
            }
            Sample::new(e.id.clone(), image, Tensor::new(vec![2, h, w], masks)?)
        })
        .collect()
}

/// Loads images only; the mask directory is never touched.
pub fn load_unlabeled(dir: impl AsRef<Path>) -> Result<Vec<UnlabeledSample>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .samples
        .iter()
        .map(|e| {
            Ok(UnlabeledSample {
                id: e.id.clone(),
                image: read_image(dir, &e.id)?,
            })
        })
        .collect()
}
