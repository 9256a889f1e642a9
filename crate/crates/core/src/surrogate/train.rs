//! Mini-batch Adam training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::model::{ModelKind, SurrogateModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the gradient term (value models only).
    pub mu: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rescale outputs by the label RMS before training.
    pub normalize_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 200,
            epochs: 100,
            seed: 0,
            normalize_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.learning_rate > 0.0 && self.lr_decay > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidInput("training needs mu >= 0, positive rates and batch size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub final_value_mse: f64,
    pub epochs: usize,
}

fn labels_for(model: &SurrogateModel, ds: &Dataset, idx: &[usize]) -> (nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>) {
    let (s, u, v, g) = ds.columns(idx);
    let y = match model.kind {
        ModelKind::Control => u,
        ModelKind::Value => v,
    };
    (s, y, g)
}

fn check_fit(model: &SurrogateModel, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if (ds.n_agents, ds.dim) != (model.n_agents, model.dim) {
        return Err(Error::DimensionMismatch("dataset and model sizes differ".into()));
    }
    Ok(())
}

/// Adam with (0.9, 0.999, 1e-8). Deterministic for a fixed seed.
pub fn train(dataset: &Dataset, model: &mut SurrogateModel, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    check_fit(model, dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    if config.normalize_output {
        let (_, y, _) = labels_for(model, dataset, &all);
        let rms = (y.norm_squared() / y.len() as f64).sqrt();
        model.output_scale = if rms > 0.0 { rms } else { 1.0 };
    }

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let n_params = model.network.n_params();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut theta = model.network.params_flat();
    let mut t = 0i32;
    let mut lr = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = all.clone();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (s, y, g) = labels_for(model, dataset, chunk);
            let eval = model.loss(&s, &y, Some(&g), config.mu, true)?;
            if !eval.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += eval.total * chunk.len() as f64;
            let grad = eval.grads.expect("requested").flatten();
            t += 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..n_params {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            model.network.set_params_flat(&theta)?;
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:e}");
        history.push(mean);
        lr *= config.lr_decay;
    }

    let (s, y, g) = labels_for(model, dataset, &all);
    let final_value_mse = model.loss(&s, &y, Some(&g), config.mu, false)?.value_mse;
    Ok(TrainReport {
        loss_history: history,
        final_value_mse,
        epochs: config.epochs,
    })
}

/// `100 * RMSE / RMS(labels)` over every sample and output component.
pub fn prmse(model: &SurrogateModel, test_set: &Dataset) -> Result<f64> {
    check_fit(model, test_set)?;
    let all: Vec<usize> = (0..test_set.len()).collect();
    let (s, y, _) = labels_for(model, test_set, &all);
    let label_ms = y.norm_squared() / y.len() as f64;
    if label_ms == 0.0 {
        return Err(Error::InvalidInput("PRMSE undefined for all-zero labels".into()));
    }
    let pred = model.predict_batch(&s)?;
    let mse = (pred - &y).norm_squared() / y.len() as f64;
    Ok(100.0 * (mse / label_ms).sqrt())
}
