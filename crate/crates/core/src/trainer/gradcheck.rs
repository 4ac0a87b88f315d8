//! Finite-difference verification of the analytic backward pass.

use crate::model::{backward, forward_batch, Parameters};

use super::{cross_entropy_loss, cross_entropy_with_grad, Batch, TrainError};

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor so gradients that are zero on both sides count as exact.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn batch_loss(params: &Parameters<f64>, batch: &Batch) -> Result<f64, TrainError> {
    let (logits, _) = forward_batch(params, &batch.inputs, batch.batch_size, batch.seq_len)?;
    cross_entropy_loss(&logits, &batch.targets, &batch.loss_mask)
}

/// Compares the analytic gradient of the masked cross-entropy against central
/// differences for every scalar parameter. Intended for tiny configurations.
pub fn gradient_check(params: &Parameters<f64>, batch: &Batch) -> Result<GradCheckReport, TrainError> {
    let (logits, cache) = forward_batch(params, &batch.inputs, batch.batch_size, batch.seq_len)?;
    let (loss, dlogits) = cross_entropy_with_grad(&logits, &batch.targets, &batch.loss_mask)?;
    let grads = backward(params, &cache, &dlogits);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    let grad_tensors = grads.named();
    for (t, (spec, g)) in grad_tensors.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut largest = 0.0f64;
        for i in 0..g.len() {
            let original = params.named()[t].1[i];
            probe.named_mut()[t].1[i] = original + FD_STEP;
            let plus = batch_loss(&probe, batch)?;
            probe.named_mut()[t].1[i] = original - FD_STEP;
            let minus = batch_loss(&probe, batch)?;
            probe.named_mut()[t].1[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g[i], numeric));
            largest = largest.max(g[i].abs());
        }
        tensors.push(TensorCheck {
            name: spec.name.clone(),
            max_rel_error: worst,
            max_abs_grad: largest,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss,
        max_rel_error,
        tensors,
    })
}
