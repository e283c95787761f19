//! Dice and average symmetric surface distance on binary masks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["disc", "cup"];

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    pred.expect_same_shape(gt, "metric inputs")
}

/// `2|P n G| / (|P| + |G|)`; 1.0 when both masks are empty.
pub fn dice(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background
/// (pixels outside the image count as background).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// 1-D squared Euclidean distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `site`.
fn squared_distance_map(sites: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0f64; h];
    let mut tmp = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0f64; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

fn to_bool(t: &Tensor) -> Result<(Vec<bool>, usize, usize)> {
    let (h, w) = match t.shape() {
        &[h, w] => (h, w),
        &[1, h, w] | &[1, 1, h, w] => (h, w),
        s => return Err(Error::Shape(format!("expected a 2-D mask, got {s:?}"))),
    };
    Ok((t.data().iter().map(|&v| v > 0.5).collect(), h, w))
}

/// Mean distance from each boundary pixel of `from` to the boundary of `to`.
fn directed_mean(from: &[(usize, usize)], to_dist: &[f64], w: usize) -> f64 {
    from.iter().map(|&(y, x)| to_dist[y * w + x].sqrt()).sum::<f64>() / from.len() as f64
}

/// Average symmetric surface distance in pixels, or `None` ("undefined")
/// when either mask is empty.
pub fn assd(pred: &Tensor, gt: &Tensor) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (p, h, w) = to_bool(pred)?;
    let (g, _, _) = to_bool(gt)?;
    let bp = boundary(&p, h, w);
    let bg = boundary(&g, h, w);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let dp = squared_distance_map(&bp, h, w);
    let dg = squared_distance_map(&bg, h, w);
    Ok(Some(0.5 * (directed_mean(&bp, &dg, w) + directed_mean(&bg, &dp, w))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class: usize,
    pub dice: f64,
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// Percent.
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Pixels, over samples where ASSD is defined.
    pub assd_mean: f64,
    pub assd_std: f64,
    pub assd_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassSummary>,
    pub records: Vec<SampleRecord>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl EvalReport {
    /// Builds a report from `[2, H, W]` probability maps and binary masks.
    pub fn from_predictions<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a Tensor, &'a Tensor)>,
        threshold: f32,
    ) -> Result<Self> {
        let mut records = Vec::new();
        for (id, probs, gt) in items {
            probs.expect_same_shape(gt, "prediction vs ground truth")?;
            let &[c, h, w] = probs.shape() else {
                return Err(Error::Shape(format!("expected [C, H, W], got {:?}", probs.shape())));
            };
            for class in 0..c {
                let p = &probs.data()[class * h * w..(class + 1) * h * w];
                let g = &gt.data()[class * h * w..(class + 1) * h * w];
                let pm = Tensor::from_parts_unchecked(
                    vec![h, w],
                    p.iter().map(|&v| (v >= threshold) as u8 as f32).collect(),
                );
                let gm = Tensor::from_parts_unchecked(vec![h, w], g.to_vec());
                records.push(SampleRecord {
                    id: id.to_string(),
                    class,
                    dice: dice(&pm, &gm)?,
                    assd: assd(&pm, &gm)?,
                });
            }
        }
        if records.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let n_classes = records.iter().map(|r| r.class).max().unwrap_or(0) + 1;
        let classes = (0..n_classes)
            .map(|c| {
                let rs: Vec<&SampleRecord> = records.iter().filter(|r| r.class == c).collect();
                let dices: Vec<f64> = rs.iter().map(|r| 100.0 * r.dice).collect();
                let assds: Vec<f64> = rs.iter().filter_map(|r| r.assd).collect();
                let (dm, ds) = mean_std(&dices);
                let (am, asd) = mean_std(&assds);
                ClassSummary {
                    dice_mean: dm,
                    dice_std: ds,
                    assd_mean: am,
                    assd_std: asd,
                    assd_undefined: rs.len() - assds.len(),
                }
            })
            .collect();
        Ok(EvalReport { classes, records })
    }

    /// Mean Dice (percent) over classes.
    pub fn mean_dice(&self) -> f64 {
        self.classes.iter().map(|c| c.dice_mean).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_assd(&self) -> f64 {
        self.classes.iter().map(|c| c.assd_mean).sum::<f64>() / self.classes.len() as f64
    }

    pub fn class_dice(&self, class: usize) -> f64 {
        self.classes[class].dice_mean
    }

    /// One row per (sample, class): `id,class,dice,assd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,class,dice,assd\n");
        for r in &self.records {
            let assd = r.assd.map_or("undefined".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{},{},{:.6},{}", r.id, CLASS_NAMES.get(r.class).unwrap_or(&"?"), r.dice, assd);
        }
        out
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("### {title}\n\n| class | Dice [%] | ASSD [px] | ASSD undefined |\n|---|---|---|---|\n");
        for (c, s) in self.classes.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {} |",
                CLASS_NAMES.get(c).unwrap_or(&"?"),
                s.dice_mean,
                s.dice_std,
                s.assd_mean,
                s.assd_std,
                s.assd_undefined
            );
        }
        let _ = writeln!(out, "| mean | {:.2} | {:.2} | |", self.mean_dice(), self.mean_assd());
        out
    }
}
