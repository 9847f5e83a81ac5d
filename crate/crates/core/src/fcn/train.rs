use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ClassWeights, ToyNet};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::volume::{LabelSlice2D, Slice2D};

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Loss normaliser; `None` divides by the pixel count of each batch.
    pub loss_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.8,
            weight_decay: 0.0005,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            loss_norm: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 7] = [
        "learning_rate",
        "momentum",
        "weight_decay",
        "epochs",
        "batch_size",
        "seed",
        "loss_norm",
    ];

    /// Overrides the fields named in [`Self::KEYS`]. Other keys are left for
    /// the caller, so one file can hold the training and model settings.
    pub fn merge(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.get("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.get("weight_decay")? {
            self.weight_decay = v;
        }
        if let Some(v) = kv.get("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("loss_norm")? {
            self.loss_norm = Some(v);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(format!("learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!("weight_decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if let Some(n) = self.loss_norm {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::InvalidParameter(format!("loss_norm {n}")));
            }
        }
        Ok(())
    }
}

/// Loss bookkeeping from [`train`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Loss of every batch before its update.
    pub step_loss: Vec<f64>,
}

/// Trains `net` on `(slice, labels)` pairs. Deterministic for a given seed
/// regardless of thread count: per-slice gradients are summed in batch
/// order.
pub fn train(
    mut net: ToyNet,
    data: &[(Slice2D, LabelSlice2D)],
    cfg: &TrainConfig,
    weights: &ClassWeights,
) -> Result<(ToyNet, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut theta = net.params();
    let mut velocity = vec![0.0; theta.len()];
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n = cfg
                .loss_norm
                .unwrap_or_else(|| batch.iter().map(|&i| (data[i].0.width * data[i].0.height) as f64).sum());
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| net.loss_and_grad(&data[i].0, &data[i].1, weights, n))
                .collect::<Result<_>>()?;
            let mut loss = 0.0;
            let mut grad = vec![0.0; theta.len()];
            for (l, g) in &parts {
                loss += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss diverged at epoch {epoch}, batch {b}: {loss}")));
            }
            for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *t);
                *t = (*t + *v) as f32 as f64;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numerical(format!("parameters diverged at epoch {epoch}, batch {b}")));
            }
            net.set_params(&theta)?;
            report.step_loss.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        let mean = epoch_sum / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        report.epoch_loss.push(mean);
    }
    Ok((net, report))
}
