//! Tiny encoder-decoder segmentation network, checkpoints and source training.
//!
//! Layout (input `[N, 3, H, W]`, `H` and `W` divisible by 8):
//!
//! ```text
//! enc1  conv3x3/2  -> SiLU -> dropout          H/2
//! enc2  conv3x3/2  -> SiLU -> dropout          H/4
//! enc3  conv3x3/2  -> SiLU -> dropout          H/8
//! dec1  up2, concat enc2, conv3x3 -> SiLU      H/4
//! dec2  up2, concat enc1, conv3x3 -> SiLU      H/2
//! dec3  up2, concat input, conv3x3 -> SiLU     H     (penultimate features)
//! head  conv1x1 -> sigmoid                     H     (channel 0 disc, 1 cup)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::synth::{self, AugmentConfig, Sample};
use crate::tensor::{read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UP2DC";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub encoder: [usize; 3],
    pub decoder: [usize; 3],
    pub classes: usize,
    pub dropout: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 3,
            encoder: [8, 16, 16],
            decoder: [16, 8, 8],
            classes: 2,
            dropout: 0.1,
        }
    }
}

impl Architecture {
    /// Kernel shapes in parameter order; each conv is followed by its bias.
    fn conv_shapes(&self) -> Vec<[usize; 4]> {
        let [e1, e2, e3] = self.encoder;
        let [d1, d2, d3] = self.decoder;
        vec![
            [e1, self.in_channels, 3, 3],
            [e2, e1, 3, 3],
            [e3, e2, 3, 3],
            [d1, e3 + e2, 3, 3],
            [d2, d1 + e1, 3, 3],
            [d3, d2 + self.in_channels, 3, 3],
            [self.classes, d3, 1, 1],
        ]
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.conv_shapes()
            .into_iter()
            .flat_map(|k| [k.to_vec(), vec![k[0]]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn feature_channels(&self) -> usize {
        self.decoder[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    arch: Architecture,
    params: Vec<Tensor>,
}

/// A recorded forward pass, ready for [`Graph::backward`].
pub struct ForwardPass {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
    pub features: Var,
}

impl ForwardPass {
    pub fn probs(&self) -> &Tensor {
        self.graph.value(self.probs)
    }

    pub fn features(&self) -> &Tensor {
        self.graph.value(self.features)
    }

    /// Parameter gradients of `loss` in parameter order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let grads = self.graph.backward(loss)?;
        Ok(self.params.iter().map(|&p| grads.get_or_zeros(p)).collect())
    }
}

impl SegNet {
    /// He-normal initialised network.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init", 0);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                let n = shape.iter().product();
                Tensor::from_parts_unchecked(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            })
            .collect();
        SegNet { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        SegNet { arch, params }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn forward_graph(&self, image: &Tensor, stochastic: bool, rng: &mut Rng) -> Result<ForwardPass> {
        let [_, c, h, w] = image.dims4()?;
        if c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.arch.in_channels
            )));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by the downsampling factor {DOWNSAMPLE}"
            )));
        }
        let rate = self.arch.dropout;
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let x = g.constant(image.clone());
        let conv = |g: &mut Graph, input: Var, layer: usize, stride: usize| -> Result<Var> {
            let k = params[2 * layer];
            let pad = g.value(k).shape()[2] / 2;
            let y = g.conv2d(input, k, stride, pad)?;
            g.bias_add(y, params[2 * layer + 1])
        };

        let mut skips = Vec::with_capacity(3);
        let mut cur = x;
        for layer in 0..3 {
            let y = conv(&mut g, cur, layer, 2)?;
            let y = g.silu(y)?;
            cur = g.dropout(y, rate, stochastic, rng)?;
            skips.push(cur);
        }
        let lateral = [skips[1], skips[0], x];
        for (i, &skip) in lateral.iter().enumerate() {
            let up = g.upsample_nearest(cur, 2)?;
            let cat = g.concat_channels(up, skip)?;
            let y = conv(&mut g, cat, 3 + i, 1)?;
            cur = g.silu(y)?;
        }
        let features = cur;
        let logits = conv(&mut g, features, 6, 1)?;
        let probs = g.sigmoid(logits)?;
        Ok(ForwardPass {
            graph: g,
            params,
            logits,
            probs,
            features,
        })
    }

    /// Probabilities `[N, 2, H, W]` and penultimate features `[N, F, H, W]`.
    pub fn forward(&self, image: &Tensor, stochastic: bool, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let pass = self.forward_graph(image, stochastic, rng)?;
        Ok((pass.probs().clone(), pass.features().clone()))
    }

    /// Deterministic probabilities.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut rng = rng::seeded(0);
        Ok(self.forward(image, false, &mut rng)?.0)
    }

    pub fn parameters_flat(&self) -> Tensor {
        let data: Vec<f32> = self.params.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::from_parts_unchecked(vec![data.len()], data)
    }

    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        let expected = self.arch.param_count();
        if flat.numel() != expected {
            return Err(Error::Shape(format!(
                "flat parameter buffer has {} values, network needs {expected}",
                flat.numel()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self <- alpha * self + (1 - alpha) * other`, elementwise.
    pub fn ema_from(&mut self, other: &SegNet, alpha: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Param(format!("EMA rate {alpha} outside [0, 1]")));
        }
        if self.arch != other.arch {
            return Err(Error::Shape("EMA between different architectures".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&other.params) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                // exact fixed point when a == b
                if *a != b {
                    *a = alpha * *a + (1.0 - alpha) * b;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss: f32,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: SegNet,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.net.arch.clone(),
            meta: self.meta.clone(),
        })
        .expect("checkpoint header serializes");
        let flat = self.net.parameters_flat();
        let mut out = Vec::with_capacity(22 + header.len() + 4 * flat.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(flat.numel() as u64).to_le_bytes());
        for v in flat.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        let mut r = bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic[..5] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if magic[5] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", magic[5])));
        }
        let len = read_u64(&mut r).ok_or_else(|| bad("truncated header length"))? as usize;
        if len > r.len() {
            return Err(bad("truncated header"));
        }
        let (json, mut rest) = r.split_at(len);
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        let n = read_u64(&mut rest).ok_or_else(|| bad("truncated parameter count"))? as usize;
        if rest.len() != n * 4 {
            return Err(bad("parameter buffer length mismatch"));
        }
        let data = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut net = SegNet::zeros(header.arch);
        net.load_flat(&Tensor::new(vec![n], data)?)?;
        Ok(Checkpoint {
            net,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex digest of the serialized checkpoint.
    pub fn digest(&self) -> String {
        format!("{:016x}", rng::fnv1a(&self.to_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Flip/crop augmentation of the labeled source images.
    pub augment: bool,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 60,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f32>,
    pub epoch_losses: Vec<f32>,
}

/// Stacks `[3, H, W]` images into a batch.
pub fn batch_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = images.into_iter().collect();
    Tensor::stack(&items)
}

/// Mean per-class binary cross-entropy of `net` on labeled samples.
pub fn source_loss(net: &SegNet, samples: &[Sample]) -> Result<f32> {
    let x = batch_images(samples.iter().map(|s| &s.image))?;
    let y = Tensor::stack(&samples.iter().map(|s| s.gt_masks()).collect::<Vec<_>>())?;
    let mut pass = net.forward_graph(&x, false, &mut rng::seeded(0))?;
    let ones = Tensor::ones(y.shape());
    let l = loss::masked_bce(&mut pass.graph, pass.probs, &y, &ones)?;
    pass.graph.value(l).item()
}

/// Supervised training on labeled source data with Adam.
pub fn train_source(
    dataset: &[Sample],
    arch: Architecture,
    cfg: &SourceTrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let net = SegNet::new(arch, cfg.seed);
    train_from(net, dataset, cfg)
}

/// As [`train_source`] but starting from an existing network.
pub fn train_from(mut net: SegNet, dataset: &[Sample], cfg: &SourceTrainConfig) -> Result<(Checkpoint, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("source dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Param("batch size must be >= 1".into()));
    }
    let aug = AugmentConfig::default();
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, "source-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        synth::weak_augment(&dataset[i], &aug, &mut rng)
                    } else {
                        Ok(dataset[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let x = batch_images(batch.iter().map(|s| &s.image))?;
            let y = Tensor::stack(&batch.iter().map(|s| s.gt_masks()).collect::<Vec<_>>())?;
            let diverged = |reason: String| Error::Training {
                epoch,
                step,
                seed: cfg.seed,
                reason,
            };
            let mut pass = net
                .forward_graph(&x, true, &mut rng)
                .map_err(|e| diverged(e.to_string()))?;
            let ones = Tensor::ones(y.shape());
            let l = loss::masked_bce(&mut pass.graph, pass.probs, &y, &ones)
                .map_err(|e| diverged(e.to_string()))?;
            let lv = pass.graph.value(l).item()?;
            if !lv.is_finite() {
                return Err(diverged(format!("loss {lv}")));
            }
            let grads = pass.param_grads(l).map_err(|e| diverged(e.to_string()))?;
            opt.step(net.params_mut(), &grads)
                .map_err(|e| diverged(e.to_string()))?;
            log.step_losses.push(lv);
            epoch_loss += lv as f64;
            batches += 1;
            step += 1;
        }
        log.epoch_losses.push((epoch_loss / batches as f64) as f32);
        log::debug!("source epoch {epoch}: loss {:.4}", epoch_loss / batches as f64);
    }
    let meta = TrainMeta {
        epoch: cfg.epochs,
        seed: cfg.seed,
        loss: log.epoch_losses.last().copied().unwrap_or(f32::NAN),
    };
    Ok((Checkpoint { net, meta }, log))
}
