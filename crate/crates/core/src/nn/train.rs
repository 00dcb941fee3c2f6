use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy_loss, Mode, MlpModel};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every `every` epochs.
    StepDecay { factor: f64, every: usize },
}

impl LrSchedule {
    /// Learning rate for a 1-based epoch.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => {
                let steps = (epoch.saturating_sub(1) / every.max(1)) as i32;
                base * factor.powi(steps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            base_lr: 1e-3,
            lr_schedule: LrSchedule::StepDecay {
                factor: 0.5,
                every: 10,
            },
            epochs: 30,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid("adam betas must lie in (0, 1)"));
            }
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::invalid("step decay needs a positive factor and period"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Mean loss and accuracy in eval mode.
pub(crate) fn evaluate(model: &MlpModel, x: &Matrix, y: &[usize]) -> Result<(f64, f64)> {
    if x.rows() == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let logits = model.logits(x)?;
    let (loss, _) = cross_entropy_loss(&logits, y)?;
    let correct = (0..x.rows()).filter(|&r| argmax(logits.row(r)) == y[r]).count();
    Ok((loss, correct as f64 / x.rows() as f64))
}

fn batches(order: &[usize], size: usize, merge_singletons: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    // a one-sample batch has no batchnorm variance; fold it into its neighbour
    if merge_singletons && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Mini-batch training with cross-entropy loss.
///
/// Batch order, dropout masks and therefore the whole trajectory follow from
/// `config.seed`. The returned model is the one from the epoch with the
/// highest validation accuracy; ties go to the lower validation loss, then to
/// the earlier epoch. With an empty validation set the last epoch wins.
pub fn train(
    model: &MlpModel,
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    let k = model.config.num_outputs();
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    for c in 0..k {
        if !train_y.contains(&c) {
            return Err(Error::invalid(format!("class {c} has no training samples")));
        }
    }

    let mut model = model.clone();
    let mut adam = AdamState {
        m: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        v: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        t: 0,
    };
    let mut report = TrainReport::default();
    let mut best: Option<(f64, f64, MlpModel)> = None;
    let order_seed = seed::derive(config.seed, "order");
    let dropout_seed = seed::derive(config.seed, "dropout");

    for epoch in 1..=config.epochs {
        let lr = config.lr_schedule.rate(config.base_lr, epoch);
        let mut order: Vec<usize> = (0..train_x.rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive_indexed(order_seed, epoch as u64)));
        let epoch_dropout = seed::derive_indexed(dropout_seed, epoch as u64);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in batches(&order, config.batch_size, model.config.use_batchnorm)
            .into_iter()
            .enumerate()
        {
            let x = train_x.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let (logits, cache) = model.forward(&x, Mode::Train, seed::derive_indexed(epoch_dropout, b as u64))?;
            let (loss, dlogits) = cross_entropy_loss(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = model.backward(&dlogits, &cache);
            model.update_running_stats(&cache);
            apply_update(&mut model, &grads.tensors, config, lr, &mut adam);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }

        let (val_loss, val_accuracy) = evaluate(&model, val_x, val_y)?;
        report.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_accuracy,
        });
        let better = match &best {
            _ if val_x.rows() == 0 => true,
            None => true,
            Some((acc, loss, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_accuracy, val_loss, model.clone()));
            report.best_epoch = epoch;
        }
    }
    let (_, _, best_model) = best.expect("at least one epoch");
    Ok((best_model, report))
}

fn apply_update(model: &mut MlpModel, grads: &[Vec<f64>], config: &TrainConfig, lr: f64, adam: &mut AdamState) {
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, g) in model.tensors_mut().into_iter().zip(grads) {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * gi;
                }
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let c1 = 1.0 - config.beta1.powi(adam.t);
            let c2 = 1.0 - config.beta2.powi(adam.t);
            for (((p, g), m), v) in model
                .tensors_mut()
                .into_iter()
                .zip(grads)
                .zip(&mut adam.m)
                .zip(&mut adam.v)
            {
                for i in 0..p.len() {
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
                }
            }
        }
    }
}
