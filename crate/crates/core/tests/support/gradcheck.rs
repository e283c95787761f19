//! Central finite differences against reverse-mode gradients of the
//! adaptation losses.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use up2d_core::autodiff::Var;
use up2d_core::model::{Architecture, ForwardPass, SegNet};
use up2d_core::quantile::{entropy_loss, quantile_mask, total_loss};
use up2d_core::rpf::consistency_loss;
use up2d_core::{rng, Tensor};

use super::Outcome;

const CONFIGS: u64 = 50;
const STEP: f64 = 1e-2;
const TOL: f64 = 1e-2;
const FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug)]
enum Loss {
    Consistency,
    Entropy,
    Combined,
}

struct Config {
    image: Tensor,
    labels: Tensor,
    mask: Tensor,
    beta: f64,
    weights: (f32, f32),
    dropout_seed: u64,
}

impl Config {
    fn new(index: u64) -> Self {
        let mut r = rng::stream(23, "gradcheck", index);
        let shape = vec![1, 2, 16, 16];
        let n = 2 * 16 * 16;
        Config {
            image: Tensor::new(vec![1, 3, 16, 16], (0..3 * 256).map(|_| r.random::<f32>()).collect()).unwrap(),
            labels: Tensor::new(shape.clone(), (0..n).map(|_| r.random_bool(0.4) as u8 as f32).collect()).unwrap(),
            mask: Tensor::new(shape, (0..n).map(|_| r.random_bool(0.7) as u8 as f32).collect()).unwrap(),
            beta: r.random_range(0.0..0.45),
            weights: (r.random_range(0.1..2.0), r.random_range(0.1..2.0)),
            dropout_seed: r.random(),
        }
    }
}

fn build(net: &SegNet, cfg: &Config, loss: Loss, band: &Tensor) -> (ForwardPass, Var) {
    let mut drop_rng = rng::seeded(cfg.dropout_seed);
    let mut pass = net.forward_graph(&cfg.image, true, &mut drop_rng).unwrap();
    let probs = pass.probs;
    let g = &mut pass.graph;
    let out = match loss {
        Loss::Consistency => consistency_loss(g, probs, &cfg.labels, &cfg.mask).unwrap(),
        Loss::Entropy => entropy_loss(g, probs, band).unwrap(),
        Loss::Combined => {
            let c = consistency_loss(g, probs, &cfg.labels, &cfg.mask).unwrap();
            let e = entropy_loss(g, probs, band).unwrap();
            total_loss(g, c, e, cfg.weights.0, cfg.weights.1).unwrap()
        }
    };
    (pass, out)
}

fn value(net: &SegNet, cfg: &Config, loss: Loss, band: &Tensor) -> f64 {
    let (pass, out) = build(net, cfg, loss, band);
    pass.graph.value(out).item().unwrap() as f64
}

/// `(L(theta + h d) - L(theta - h d)) / 2h` for a direction `d` on parameter tensor `t`.
fn central(net: &SegNet, cfg: &Config, loss: Loss, band: &Tensor, t: usize, dir: &[f32]) -> f64 {
    let shifted = |sign: f32| {
        let mut n = net.clone();
        for (p, &d) in n.params_mut()[t].data_mut().iter_mut().zip(dir) {
            *p += sign * STEP as f32 * d;
        }
        value(&n, cfg, loss, band)
    };
    (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn run() -> Outcome {
    let mut checks = 0usize;
    let mut failures = Vec::new();
    let mut worst = 0f64;
    for index in 0..CONFIGS {
        let cfg = Config::new(index);
        let net = SegNet::new(Architecture::default(), rng::derive(23, "gradcheck-net", index));
        let base = {
            let mut drop_rng = rng::seeded(cfg.dropout_seed);
            net.forward_graph(&cfg.image, true, &mut drop_rng).unwrap().probs().clone()
        };
        let band = quantile_mask(&base, cfg.beta).unwrap().0;
        let mut r = rng::stream(23, "gradcheck-dirs", index);
        for loss in [Loss::Consistency, Loss::Entropy, Loss::Combined] {
            let grads = {
                let (pass, out) = build(&net, &cfg, loss, &band);
                pass.param_grads(out).unwrap()
            };
            for (t, grad) in grads.iter().enumerate() {
                let n = grad.numel();
                let mut dir: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
                let norm = dir.iter().map(|d| (*d as f64).powi(2)).sum::<f64>().sqrt() as f32;
                dir.iter_mut().for_each(|d| *d /= norm);
                let mut probes = vec![(
                    "direction".to_string(),
                    dir.iter().zip(grad.data()).map(|(d, g)| (*d as f64) * (*g as f64)).sum::<f64>(),
                    dir,
                )];
                for _ in 0..2 {
                    let i = r.random_range(0..n);
                    let mut e = vec![0f32; n];
                    e[i] = 1.0;
                    probes.push((format!("coord {i}"), grad.data()[i] as f64, e));
                }
                for (what, analytic, d) in probes {
                    let numeric = central(&net, &cfg, loss, &band, t, &d);
                    let err = rel(analytic, numeric);
                    worst = worst.max(err);
                    checks += 1;
                    if err >= TOL {
                        failures.push(format!(
                            "config {index} {loss:?} param {t} {what}: analytic {analytic:.6e} numeric {numeric:.6e}"
                        ));
                    }
                }
            }
        }
    }
    let mut detail = format!(
        "{CONFIGS} configs x 3 losses x {} parameter tensors, {checks} probes, worst relative error {worst:.2e}",
        Architecture::default().param_shapes().len()
    );
    if !failures.is_empty() {
        detail += &format!(", {} failures, first: {}", failures.len(), failures[0]);
    }
    Outcome::new(failures.is_empty(), detail)
}
