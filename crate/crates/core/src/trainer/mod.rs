//! Adapter fine-tuning, checkpoint selection and decoding.

mod decode;
mod optim;

pub use decode::{blocked_tokens, generate, greedy, length_normalized, DecodeConfig};
pub use optim::{AdamState, AdamW, Schedule};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdaptedModel, Grads};
use crate::error::{config_err, Error, Result};
use crate::metrics::rouge_n;
use crate::scalar::{Precision, Scalar};
use crate::util::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stopping_patience: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after this many optimizer steps; the schedule spans them.
    pub max_steps: Option<usize>,
    /// Validate with the full beam instead of greedy decoding.
    pub beam_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_ratio: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
            weight_decay: 0.1,
            epochs: 50,
            batch_size: 16,
            early_stopping_patience: 5,
            seed: 0,
            precision: Precision::F32,
            max_steps: None,
            beam_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(config_err(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio)));
        }
        if self.early_stopping_patience == 0 {
            return Err(config_err("early_stopping_patience must be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        let per_epoch = n_train.div_ceil(self.batch_size);
        let full = per_epoch * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One training document: token ids plus the document-aligned γ rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub doc_id: String,
    pub doc: Vec<usize>,
    pub summary: Vec<usize>,
    pub gamma: Option<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r2_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Mean per-token loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_r2_f1: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_r2_f1\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_r2_f1));
        }
        out
    }
}

/// Epoch with the highest validation Rouge-2 F1; earliest epoch on ties.
pub fn select_checkpoint(log: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, score) in log {
        best = match best {
            Some((e, s)) if s > score || (s == score && e < epoch) => Some((e, s)),
            _ => Some((epoch, score)),
        };
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Data("checkpoint log is empty".into()))
}

/// Mean Rouge-2 F1 of decoded summaries against references, on token ids.
pub fn validation_r2<T: Scalar>(model: &AdaptedModel<T>, samples: &[Sample<T>], decode: &DecodeConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = generate(model, &s.doc, s.gamma.as_ref(), decode)?;
        total += rouge_n(&out, &s.summary, 2).f1;
    }
    Ok(total / samples.len() as f64)
}

/// Fine-tune the trainable parameters of `model`, restoring the best
/// validation checkpoint before returning.
pub fn train<T: Scalar>(
    model: &mut AdaptedModel<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    config: &TrainConfig,
    decode: &DecodeConfig,
) -> Result<TrainReport> {
    config.check()?;
    decode.check()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let val_decode = if config.beam_validation { decode.clone() } else { decode.greedy() };
    let examples = train_set
        .iter()
        .map(|s| model.backbone.layout(&s.doc, &s.summary, s.gamma.as_ref(), true))
        .collect::<Result<Vec<_>>>()?;
    let total = config.total_steps(train_set.len());
    let schedule = Schedule::new(config.lr, config.warmup_ratio, total);
    let opt = config.optimizer();
    let mut state = AdamState::new(&model.backbone.params);
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 0x5_4FF1E));
    let mut dropout_rng = rng_from_seed(derive_seed(config.seed, 0xD4_0F));
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_r2_f1: f64::NEG_INFINITY,
        steps: 0,
        stopped_early: false,
    };
    let mut best_snapshot = model.snapshot();
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        if step >= total {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(config.batch_size) {
            if step >= total {
                break;
            }
            let n_tok: usize = batch.iter().map(|&i| examples[i].targets.len()).sum();
            let scale = T::one() / T::from_count(n_tok);
            let mut grads = Grads::for_store(&model.backbone.params);
            let mut loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let (l, g) = model.loss_and_grads(&ex.input(), &ex.targets, scale, Some(&mut dropout_rng))?;
                loss += l.to_f64_lossy();
                grads.add_assign(&g);
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            opt.step(&mut model.backbone.params, &grads, &mut state, schedule.lr(step));
            step += 1;
            report.step_losses.push(loss / n_tok as f64);
            epoch_loss += loss;
            epoch_tokens += n_tok;
        }
        let val = validation_r2(model, val_set, &val_decode)?;
        report.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            val_r2_f1: val,
        });
        if val > report.best_val_r2_f1 {
            report.best_val_r2_f1 = val;
            report.best_epoch = epoch;
            best_snapshot = model.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stopping_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.steps = step;
    model.restore(&best_snapshot);
    Ok(report)
}
