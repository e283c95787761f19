use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{batch_images, SegNet};
use crate::synth::Sample;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 8;

/// Deterministic predictions `[2, H, W]` for each sample.
pub fn predict_all(net: &SegNet, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = batch_images(chunk.iter().map(|s| &s.image))?;
        let p = net.predict(&x)?;
        for i in 0..chunk.len() {
            let item = p.item_at(i)?;
            let shape = item.shape()[1..].to_vec();
            out.push(item.reshape(shape)?);
        }
    }
    Ok(out)
}

/// Dice and ASSD of `net` on a labeled dataset.
pub fn evaluate(net: &SegNet, samples: &[Sample], threshold: f32) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let preds = predict_all(net, samples)?;
    EvalReport::from_predictions(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.id.as_str(), p, s.gt_masks())),
        threshold,
    )
}
