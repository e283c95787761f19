//! Closed-form checks of the inverted Gaussian weight and its region mask.

use rand::Rng as _;
use up2d_core::rng;
use up2d_core::ugema::{inverted_gaussian, region_mask};

use super::Outcome;

const SIDE: usize = 48;

fn rect(x0: usize, y0: usize, w: usize, h: usize) -> Vec<f32> {
    let mut m = vec![0f32; SIDE * SIDE];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            m[y * SIDE + x] = 1.0;
        }
    }
    m
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<f32> {
    (0..SIDE * SIDE)
        .map(|i| {
            let (x, y) = ((i % SIDE) as f64, (i / SIDE) as f64);
            (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0) as u8 as f32
        })
        .collect()
}

pub fn run() -> Outcome {
    let one_sigma = 1.0 - (-0.5f64).exp();
    let mut r = rng::stream(17, "gaussian", 0);
    let (mut center_err, mut sigma_err) = (0f64, 0f64);
    let mut rects = 0;
    for _ in 0..200 {
        // odd sides put the centroid on a pixel
        let w = 2 * r.random_range(0..10) + 1;
        let h = 2 * r.random_range(0..10) + 1;
        let (x0, y0) = (r.random_range(0..SIDE - w), r.random_range(0..SIDE - h));
        let s = r.random_range(0.1..0.5);
        let gw = inverted_gaussian(&rect(x0, y0, w, h), SIDE, SIDE, s).unwrap().unwrap();
        let (cx, cy) = (x0 + w / 2, y0 + h / 2);
        center_err = center_err.max(gw.map.data()[cy * SIDE + cx] as f64);
        rects += 1;
    }
    for s in [0.25, 0.75] {
        // side = 2 mod 4 gives a half-integer centroid and a half-integer sigma
        for side in [6usize, 10, 14, 18] {
            for odd in [1usize, 5, 9] {
                for (w, h) in [(side, odd), (odd, side)] {
                    let (x0, y0) = (4, 3);
                    let gw = inverted_gaussian(&rect(x0, y0, w, h), SIDE, SIDE, s).unwrap().unwrap();
                    let (cx, cy) = (x0 as f64 + (w - 1) as f64 / 2.0, y0 as f64 + (h - 1) as f64 / 2.0);
                    let (px, py) = if w == side {
                        (cx + s * w as f64, cy)
                    } else {
                        (cx, cy + s * h as f64)
                    };
                    if px.fract() != 0.0 || py.fract() != 0.0 || px as usize >= SIDE || py as usize >= SIDE {
                        continue;
                    }
                    let g = gw.map.data()[py as usize * SIDE + px as usize] as f64;
                    sigma_err = sigma_err.max((g - one_sigma).abs());
                    rects += 1;
                }
            }
        }
    }

    let mut lost = 0usize;
    let mut shapes = 0usize;
    for i in 0..300 {
        let mask = match i % 3 {
            0 => ellipse(
                r.random_range(8.0..40.0),
                r.random_range(8.0..40.0),
                r.random_range(0.5..12.0),
                r.random_range(0.5..12.0),
            ),
            1 => {
                let mut m = vec![0f32; SIDE * SIDE];
                m[r.random_range(0..SIDE * SIDE)] = 1.0;
                m
            }
            _ => (0..SIDE * SIDE).map(|_| r.random_bool(0.1) as u8 as f32).collect(),
        };
        let Some(gw) = inverted_gaussian(&mask, SIDE, SIDE, r.random_range(0.1..0.5)).unwrap() else {
            continue;
        };
        let (_, a) = region_mask(&mask, &gw).unwrap();
        lost += mask.iter().zip(a.data()).filter(|(&m, &a)| m == 1.0 && a != 1.0).count();
        shapes += 1;
    }
    Outcome::new(
        center_err <= 0.02 && sigma_err <= 1e-3 && lost == 0,
        format!(
            "{rects} rectangles: max weight at centroid {center_err:.2e}, max error at one sigma {sigma_err:.2e}; \
             {shapes} shapes, {lost} foreground pixels outside the region"
        ),
    )
}
