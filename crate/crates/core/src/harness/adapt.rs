//! The teacher-student adaptation loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audit::AdaptationScope;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::harness::config::{EmaMode, EntropyFilter, RunConfig, TeacherView};
use crate::metrics::EvalReport;
use crate::model::{batch_images, SegNet};
use crate::optim::Adam;
use crate::quantile;
use crate::rng;
use crate::rpf;
use crate::synth::{self, GeoTransform, Interp, UnlabeledSample};
use crate::tensor::Tensor;
use crate::ugema::{self, GateMetric, GateRecord, UgemaState};
use crate::uncertainty::{self, pseudo_labels};

/// Per-batch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
    pub l_cons: f32,
    pub l_ent: f32,
    /// Fraction of pixels kept by the denoise masks, per class.
    pub mask_retained: [f64; 2],
    /// Fraction of pixels kept by the quantile band, per class.
    pub quantile_retained: [f64; 2],
    pub invalid_prototypes: usize,
}

/// Compact evaluation numbers for one epoch. Undefined ASSD is NaN, which
/// JSON stores as null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dice: [f64; 2],
    #[serde(deserialize_with = "nan_pair")]
    pub assd: [f64; 2],
    pub mean_dice: f64,
    #[serde(deserialize_with = "nan_scalar")]
    pub mean_assd: f64,
}

fn nan_scalar<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn nan_pair<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<[f64; 2], D::Error> {
    let [a, b] = <[Option<f64>; 2]>::deserialize(d)?;
    Ok([a.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN)])
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        EvalSummary {
            dice: [r.classes[0].dice_mean, r.classes[1].dice_mean],
            assd: [r.classes[0].assd_mean, r.classes[1].assd_mean],
            mean_dice: r.mean_dice(),
            mean_assd: r.mean_assd(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f32,
    pub mean_uncertainty: Option<f64>,
    pub min_epoch_uncertainty: Option<f64>,
    pub teacher_updates: usize,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub steps: Vec<StepRecord>,
    pub gate: Vec<GateRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl AdaptLog {
    fn jsonl<T: Serialize>(items: &[T]) -> String {
        items
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn steps_jsonl(&self) -> String {
        Self::jsonl(&self.steps)
    }

    pub fn gate_jsonl(&self) -> String {
        Self::jsonl(&self.gate)
    }

    pub fn epochs_jsonl(&self) -> String {
        Self::jsonl(&self.epochs)
    }

    pub fn teacher_updates(&self) -> usize {
        self.gate.iter().filter(|g| g.updated).count()
    }
}

pub struct AdaptOutcome {
    pub student: SegNet,
    pub teacher: SegNet,
    pub log: AdaptLog,
    pub gate_state: UgemaState,
    /// Ground-truth reads observed inside the adaptation scope.
    pub gt_reads: usize,
}

/// Called after every epoch with the epoch index and the student, outside the
/// audited scope.
pub type EpochHook<'a> = dyn FnMut(usize, &SegNet) -> Result<Option<EvalReport>> + 'a;

fn finite_or_dump(value: f32, what: &str, rec: &StepRecord, seed: u64) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::Training {
        epoch: rec.epoch,
        step: rec.batch,
        seed,
        reason: format!(
            "{what} = {value}; dump: l_cons {} l_ent {} mask_retained {:?} quantile_retained {:?} invalid_prototypes {}",
            rec.l_cons, rec.l_ent, rec.mask_retained, rec.quantile_retained, rec.invalid_prototypes
        ),
    })
}

/// Adapts `source` to the unlabeled `target` images.
pub fn adapt(
    source: &SegNet,
    target: &[UnlabeledSample],
    cfg: &RunConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Empty("target dataset".into()));
    }
    let mut student = source.clone();
    let mut teacher = source.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut state = UgemaState::new();
    let mut log = AdaptLog::default();
    let rpf_cfg = cfg.rpf_config();
    let fill = synth::mean_color(target.iter().map(|s| &s.image));
    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut gt_reads = 0;

    for epoch in 0..cfg.epochs {
        let scope = AdaptationScope::enter();
        let mut shuffle_rng = rng::stream(cfg.seed, "adapt-order", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = rng::derive(cfg.seed, "adapt-step", (epoch * 100_000 + batch) as u64);
            let mut aug_rng = rng::stream(step_seed, "augment", 0);
            let mut teacher_imgs = Vec::with_capacity(chunk.len());
            let mut student_imgs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &target[i].image;
                let geo = match cfg.teacher_view {
                    TeacherView::Original => GeoTransform::identity(cfg.image_size),
                    TeacherView::Weak => GeoTransform::sample(cfg.image_size, cfg.augment.min_crop, &mut aug_rng),
                };
                let base = geo.apply(img, Interp::Bilinear)?;
                student_imgs.push(synth::photometric(&base, &cfg.augment, fill, &mut aug_rng)?);
                teacher_imgs.push(base);
            }
            let x_t = batch_images(&teacher_imgs)?;
            let x_s = batch_images(&student_imgs)?;

            let mut mc_rng = rng::stream(step_seed, "mc", 0);
            let t_out = uncertainty::mc_forward(&teacher, &x_t, cfg.k, cfg.gamma, cfg.entropy_form, &mut mc_rng)?;
            let masks = rpf::denoise(&t_out, &rpf_cfg)?;

            let mut drop_rng = rng::stream(step_seed, "student-dropout", 0);
            let mut pass = student.forward_graph(&x_s, true, &mut drop_rng)?;
            let probs = pass.probs;
            let g: &mut Graph = &mut pass.graph;
            let l_cons = rpf::consistency_loss(g, probs, &t_out.pseudo_labels, &masks.masks)?;
            let (l_ent, q_retained) = match cfg.entropy_filter {
                EntropyFilter::Off => (g.constant(Tensor::scalar(0.0)?), [0.0, 0.0]),
                EntropyFilter::Full => {
                    let ones = Tensor::ones(g.value(probs).shape());
                    (quantile::entropy_loss(g, probs, &ones)?, [1.0, 1.0])
                }
                EntropyFilter::Quantile => {
                    let (m, bands) = quantile::quantile_mask(g.value(probs), cfg.beta)?;
                    (quantile::entropy_loss(g, probs, &m)?, [bands[0].retained, bands[1].retained])
                }
            };
            let mut rec = StepRecord {
                epoch,
                batch,
                loss: f32::NAN,
                l_cons: g.value(l_cons).item()?,
                l_ent: g.value(l_ent).item()?,
                mask_retained: masks.retained,
                quantile_retained: q_retained,
                invalid_prototypes: masks.invalid_prototypes,
            };
            finite_or_dump(rec.l_cons, "consistency loss", &rec, cfg.seed)?;
            finite_or_dump(rec.l_ent, "entropy loss", &rec, cfg.seed)?;
            let total = quantile::total_loss(g, l_cons, l_ent, cfg.w_cons, cfg.w_ent)?;
            rec.loss = g.value(total).item()?;
            finite_or_dump(rec.loss, "total loss", &rec, cfg.seed)?;
            let grads = pass.param_grads(total)?;
            opt.step(student.params_mut(), &grads).map_err(|e| Error::Training {
                epoch,
                step: batch,
                seed: cfg.seed,
                reason: e.to_string(),
            })?;

            // The gate scores the student after its update.
            let e_b = match cfg.gate_metric {
                GateMetric::Loss => Some(rec.loss as f64),
                metric => {
                    let p_s = student.predict(&x_t)?;
                    let y_t = pseudo_labels(&t_out.det_probs, cfg.gamma)?;
                    ugema::batch_uncertainty(&p_s, &y_t, cfg.s, metric)?
                }
            };
            let updated = match cfg.ugema {
                EmaMode::Gated => state.step(e_b.unwrap_or(f64::NAN), &mut teacher, &student, cfg.alpha)?,
                EmaMode::Plain => {
                    teacher.ema_from(&student, cfg.alpha)?;
                    state.record(e_b.unwrap_or(f64::NAN), true);
                    true
                }
                EmaMode::Frozen => {
                    state.record(e_b.unwrap_or(f64::NAN), false);
                    false
                }
            };
            log.gate.push(GateRecord {
                epoch,
                batch,
                e_b,
                updated,
                min_epoch: state.min_epoch.is_finite().then_some(state.min_epoch),
            });
            log::debug!(
                "epoch {epoch} batch {batch}: loss {:.4} (cons {:.4}, ent {:.4}) e_b {e_b:?} updated {updated}",
                rec.loss,
                rec.l_cons,
                rec.l_ent
            );
            losses.push(rec.loss);
            log.steps.push(rec);
        }
        let mean_u = state.epoch_end();
        gt_reads += scope.gt_reads();
        drop(scope);

        let eval = match hook.as_mut() {
            Some(h) => h(epoch, &student)?.as_ref().map(EvalSummary::from),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: losses.iter().sum::<f32>() / losses.len() as f32,
            mean_uncertainty: mean_u,
            min_epoch_uncertainty: state.min_epoch.is_finite().then_some(state.min_epoch),
            teacher_updates: log.gate.iter().filter(|g| g.epoch == epoch && g.updated).count(),
            eval,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, teacher updates {}, dice {:?}",
            rec.mean_loss,
            rec.teacher_updates,
            rec.eval.as_ref().map(|e| e.mean_dice)
        );
        log.epochs.push(rec);
    }
    Ok(AdaptOutcome {
        student,
        teacher,
        log,
        gate_state: state,
        gt_reads,
    })
}
