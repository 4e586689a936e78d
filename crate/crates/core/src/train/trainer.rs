use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::loss::{
    composite_loss, cross_entropy, mse_loss, reg_loss, select_regularized_layers, LossBreakdown, RegConfig,
};
use crate::nn::{Ctx, ModelGraph};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::data::{Dataset, Split, Targets};
use super::optim::Sgd;

/// Learning rate for fine-tuning a trained model.
pub const FINETUNE_LR: f64 = 5e-4;
/// Learning rate for training from scratch.
pub const SCRATCH_LR: f64 = 5e-3;

/// From `epoch` on (0-based), the learning rate is further multiplied by
/// `multiplier`. Steps compound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: Vec<LrStep>,
    pub reg: RegConfig,
    pub tau: f64,
    /// Fine-tuning budget per block during sequential collapse.
    pub max_epochs_per_layer: usize,
    /// Fine-tuning budget for a whole sequential collapse.
    pub total_epoch_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            lr: SCRATCH_LR,
            momentum: 0.9,
            lr_schedule: Vec::new(),
            reg: RegConfig::default(),
            tau: 0.05,
            max_epochs_per_layer: 10,
            total_epoch_cap: 20,
        }
    }
}

impl TrainConfig {
    /// Lists every invalid field.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("train.lr: must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("train.momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size: must be >= 1".to_string());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            bad.push(format!("train.tau: must be >= 0, got {}", self.tau));
        }
        for s in &self.lr_schedule {
            if !(s.multiplier > 0.0 && s.multiplier.is_finite()) {
                bad.push(format!(
                    "train.lr_schedule: multiplier at epoch {} must be > 0",
                    s.epoch
                ));
            }
        }
        if let Err(e) = self.reg.validate() {
            bad.push(format!("train.reg: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .fold(self.lr, |lr, s| lr * s.multiplier)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses.
    pub train: LossBreakdown,
    pub train_metric: f64,
    /// Unregularized loss on the validation split, if it is non-empty.
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
    pub alphas: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// Loss and metric of a model on a dataset: accuracy for labels, MSE for
/// regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

pub fn evaluate<T: Scalar>(m: &ModelGraph<T>, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let out = m.infer(&data.inputs_as::<T>())?;
    let mut tape = Tape::new();
    let y = tape.constant(out.clone());
    match &data.targets {
        Targets::Labels { labels, .. } => {
            let l = cross_entropy(&mut tape, y, labels)?;
            let pred = out.argmax_rows()?;
            let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(Evaluation {
                loss: tape.value(l).item()?.as_f64(),
                metric: hits as f64 / labels.len() as f64,
            })
        }
        Targets::Values(v) => {
            let target = Tensor::from_f64(v.shape().to_vec(), v.data())?;
            let l = mse_loss(&mut tape, y, &target)?;
            let mse = tape.value(l).item()?.as_f64();
            Ok(Evaluation { loss: mse, metric: mse })
        }
    }
}

/// Validation-split evaluation, or `None` if the split is empty.
pub fn evaluate_split<T: Scalar>(m: &ModelGraph<T>, data: &Dataset, split: Split) -> Result<Option<Evaluation>> {
    let part = data.split(split);
    if part.is_empty() {
        return Ok(None);
    }
    evaluate(m, &part).map(Some)
}

fn batches(mut idx: Vec<usize>, size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    while !idx.is_empty() {
        let rest = idx.split_off(size.min(idx.len()));
        out.push(idx);
        idx = rest;
    }
    // BatchNorm needs two samples; fold a trailing singleton into its neighbour
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Trains with every block selected by `cfg.reg.layer_fraction`
/// regularized, for `cfg.epochs` epochs.
pub fn train<T: Scalar>(
    m: &mut ModelGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&ModelGraph<T>>,
) -> Result<TrainLog> {
    let layers = select_regularized_layers(m, cfg.reg.layer_fraction);
    train_layers(m, data, cfg, teacher, &layers, cfg.epochs)
}

/// Minimizes the composite loss (classification) or MSE plus the slope
/// penalty (regression), regularizing only the slopes of `reg_layers`.
///
/// On a non-finite loss the model is restored to its state at the end of
/// the last completed epoch and [`Error::Diverged`] is returned.
pub fn train_layers<T: Scalar>(
    m: &mut ModelGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&ModelGraph<T>>,
    reg_layers: &[String],
    epochs: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    let alpha_params: Vec<String> = reg_layers
        .iter()
        .map(|name| {
            m.alpha_param_name(name)
                .ok_or_else(|| Error::Contract(format!("`{name}` has no activation slope to regularize")))
        })
        .collect::<Result<_>>()?;
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let inputs = train_set.inputs_as::<T>();
    let teacher_probs = match (teacher, &train_set.targets) {
        (Some(t), Targets::Labels { .. }) => Some(t.infer(&inputs)?.softmax_rows()?),
        _ => None,
    };
    let regression_targets = match &train_set.targets {
        Targets::Values(v) => Some(Tensor::<T>::from_f64(v.shape().to_vec(), v.data())?),
        Targets::Labels { .. } => None,
    };

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let snapshot = m.clone();
        sgd.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::stream(cfg.seed, 2 * epoch as u64).shuffle(&mut order);
        let mut ctx = Ctx::train(Rng::stream(cfg.seed, 2 * epoch as u64 + 1));
        let mut sums = LossBreakdown::default();
        let mut metric_sum = 0.0;
        for (step, batch) in batches(order, cfg.batch_size).into_iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(inputs.select_rows(&batch));
            let y = m.forward(&mut tape, x, &mut ctx)?;
            let alphas: Vec<_> = alpha_params.iter().filter_map(|n| tape.find_param(n)).collect();
            let (loss, parts, metric) = match (&train_set.targets, &regression_targets) {
                (Targets::Labels { labels, .. }, _) => {
                    let labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let t = teacher_probs.as_ref().map(|p| p.select_rows(&batch));
                    let (loss, parts) = composite_loss(&mut tape, y, &labels, t.as_ref(), &alphas, &cfg.reg)?;
                    let pred = tape.value(y).argmax_rows()?;
                    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
                    (loss, parts, hits as f64)
                }
                (Targets::Values(_), Some(targets)) => {
                    let mse = mse_loss(&mut tape, y, &targets.select_rows(&batch))?;
                    let reg = reg_loss(&mut tape, &alphas, &cfg.reg)?;
                    let loss = tape.add(mse, reg)?;
                    let mse_v = tape.value(mse).item()?.as_f64();
                    let parts = LossBreakdown {
                        total: tape.value(loss).item()?.as_f64(),
                        ce_term: mse_v,
                        kl_term: 0.0,
                        reg_term: tape.value(reg).item()?.as_f64(),
                    };
                    (loss, parts, mse_v * batch.len() as f64)
                }
                (Targets::Values(_), None) => unreachable!("regression targets are converted above"),
            };
            if !parts.total.is_finite() {
                warn!("non-finite loss at epoch {epoch}, step {step}; restoring last good state");
                *m = snapshot;
                return Err(Error::Diverged { epoch, step });
            }
            tape.backward(loss)?;
            m.zero_grad();
            m.accumulate_grads(&tape)?;
            sgd.step(m)?;
            let w = batch.len() as f64;
            sums.total += parts.total * w;
            sums.ce_term += parts.ce_term * w;
            sums.kl_term += parts.kl_term * w;
            sums.reg_term += parts.reg_term * w;
            metric_sum += metric;
        }
        m.zero_grad();
        let n = train_set.len() as f64;
        let val = evaluate_split(m, data, Split::Val)?;
        let record = EpochRecord {
            epoch,
            lr: sgd.lr,
            train: LossBreakdown {
                total: sums.total / n,
                ce_term: sums.ce_term / n,
                kl_term: sums.kl_term / n,
                reg_term: sums.reg_term / n,
            },
            train_metric: metric_sum / n,
            val_loss: val.map(|v| v.loss),
            val_metric: val.map(|v| v.metric),
            alphas: m.alphas().into_iter().map(|(k, a)| (k, a.as_f64())).collect(),
        };
        debug!(
            "epoch {epoch}: loss {:.6} train metric {:.4} val metric {:?}",
            record.train.total, record.train_metric, record.val_metric
        );
        log.records.push(record);
    }
    if let Some(r) = log.last() {
        info!(
            "trained {epochs} epochs: final loss {:.6}, val metric {:?}",
            r.train.total, r.val_metric
        );
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_compound() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_schedule: vec![
                LrStep {
                    epoch: 5,
                    multiplier: 0.1,
                },
                LrStep {
                    epoch: 8,
                    multiplier: 0.5,
                },
            ],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(5), 0.1);
        assert_eq!(cfg.lr_at(8), 0.05);
    }

    #[test]
    fn batching_avoids_singletons() {
        let b = batches((0..65).collect(), 32);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [32, 33]);
        let b = batches((0..1).collect(), 32);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let cfg = TrainConfig {
            lr: -1.0,
            momentum: 1.5,
            batch_size: 0,
            ..TrainConfig::default()
        };
        let Err(Error::Config(bad)) = cfg.validate() else {
            panic!()
        };
        assert_eq!(bad.len(), 3);
    }
}
