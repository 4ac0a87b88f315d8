//! Next-token pretraining and prompt-masked fine-tuning.

mod data;
mod gradcheck;
mod loss;
mod optim;
mod schedule;

pub use data::{pack_documents, sft_examples, Batch, EpochSampler, SftSequence, TrainingExample};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, TensorCheck, FD_STEP, REL_FLOOR};
pub use loss::{cross_entropy_loss, cross_entropy_with_grad};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::cosine_lr;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kernels::Real;
use crate::model::{backward, forward_batch, ModelConfig, ModelError, Parameters};

pub const PRETRAIN_MAX_LR: f64 = 2e-4;
pub const SFT_MAX_LR: f64 = 5e-5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("no position in the batch carries loss")]
    AllMasked,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no training examples")]
    NoData,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub repeat_factor: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain(1000)
    }
}

impl TrainConfig {
    fn with_lr(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            warmup_steps: total_steps / 100,
            batch_size: 8,
            seq_len: 128,
            repeat_factor: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }

    pub fn pretrain(total_steps: usize) -> Self {
        Self::with_lr(PRETRAIN_MAX_LR, total_steps)
    }

    pub fn sft(total_steps: usize) -> Self {
        Self::with_lr(SFT_MAX_LR, total_steps)
    }

    /// Steps needed to visit `n_examples` rows `repeat_factor` times.
    pub fn steps_for(&self, n_examples: usize) -> usize {
        (n_examples * self.repeat_factor).div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.repeat_factor == 0 {
            return bad("batch_size, seq_len and repeat_factor must be positive".into());
        }
        if self.seq_len > model.max_seq_len {
            return bad(format!(
                "seq_len {} exceeds model max_seq_len {}",
                self.seq_len, model.max_seq_len
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` CSV with a header row.
pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for e in log {
        let _ = writeln!(s, "{},{:e},{}", e.step, e.lr, e.loss);
    }
    s
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step<T: Real>(
    params: &mut Parameters<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    lr: f64,
    grad_clip: f64,
    step: usize,
) -> Result<f64, TrainError> {
    let (logits, cache) = forward_batch(params, &batch.inputs, batch.batch_size, batch.seq_len)?;
    let (loss, dlogits) = cross_entropy_with_grad(&logits, &batch.targets, &batch.loss_mask)?;
    let loss = loss.to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let mut grads = backward(params, &cache, &dlogits);
    drop(cache);
    clip_grad_norm(&mut grads, grad_clip);
    opt.step(params, &grads, lr);
    Ok(loss)
}

/// Runs `cfg.total_steps` optimizer steps over `data`.
///
/// Batches are drawn from seeded, reshuffled epochs in which every row appears
/// `repeat_factor` times. With one rayon thread the loss log and the final
/// parameters are bit-reproducible; the kernels keep a fixed reduction order,
/// so more threads give the same bits as well.
pub fn train<T: Real>(
    params: &mut Parameters<T>,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate(&params.config)?;
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    if let Some(bad) = data.iter().find(|e| e.seq_len() != cfg.seq_len) {
        return Err(TrainError::InvalidConfig(format!(
            "example has seq_len {}, config says {}",
            bad.seq_len(),
            cfg.seq_len
        )));
    }
    let mut sampler = EpochSampler::new(data.len(), cfg.repeat_factor, cfg.seed);
    let mut opt = AdamW::new(params, cfg);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch = Batch::from_examples(idx.iter().map(|&i| &data[i]));
        if !batch.loss_mask.iter().any(|&m| m) {
            continue;
        }
        let lr = cosine_lr(step, cfg)?;
        let loss = train_step(params, &mut opt, &batch, lr, cfg.grad_clip, step)?;
        let entry = StepLog { step, lr, loss };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Mean loss of `data` under `params`, without updating anything.
pub fn evaluate<T: Real>(
    params: &Parameters<T>,
    data: &[TrainingExample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk);
        let n = batch.loss_mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let (logits, _) = forward_batch(params, &batch.inputs, batch.batch_size, batch.seq_len)?;
        let loss = cross_entropy_loss(&logits, &batch.targets, &batch.loss_mask)?;
        total += loss.to_f64().unwrap_or(f64::NAN) * n as f64;
        weight += n;
    }
    if weight == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(total / weight as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_data() -> Vec<TrainingExample> {
        let docs: Vec<Vec<u32>> = (0..12)
            .map(|i| (0..9).map(|j| 5 + ((i + j) % 6) as u32).collect())
            .collect();
        pack_documents(&docs, 8)
    }

    fn tiny_params() -> Parameters<f32> {
        Parameters::init(ModelConfig::new(1, 8, 2, 12, 16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::new(1, 8, 2, 12, 16);
        let mut c = TrainConfig::pretrain(100);
        c.seq_len = 8;
        assert!(c.validate(&m).is_ok());
        c.seq_len = 17;
        assert!(c.validate(&m).is_err());
        c.seq_len = 8;
        c.warmup_steps = 100;
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn zero_steps_would_be_rejected_but_no_update_without_steps() {
        let p = tiny_params();
        let mut cfg = TrainConfig::pretrain(0);
        cfg.seq_len = 8;
        let mut q = p.clone();
        assert!(train(&mut q, &tiny_data(), &cfg, |_| {}).is_err());
        assert_eq!(p, q);
    }

    #[test]
    fn same_seed_same_log() {
        let mut cfg = TrainConfig::pretrain(20);
        cfg.seq_len = 8;
        cfg.batch_size = 4;
        cfg.max_lr = 1e-2;
        let data = tiny_data();
        let mut a = tiny_params();
        let mut b = tiny_params();
        let la = train(&mut a, &data, &cfg, |_| {}).unwrap();
        let lb = train(&mut b, &data, &cfg, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.last().unwrap().loss < la[0].loss);
        assert_eq!(loss_log_csv(&la).lines().count(), 21);
    }

    #[test]
    fn steps_for_repeats() {
        let mut c = TrainConfig::pretrain(1);
        c.batch_size = 4;
        c.repeat_factor = 3;
        assert_eq!(c.steps_for(10), 8);
    }
}
