//! MAP estimation of the network parameters with Adam.
//!
//! The minimized objective is
//!
//! ```text
//! J(theta) = -(1/N) * sum_n ln f_{y_n}(x_n; theta) + (lambda / 2) * ||theta||^2
//! ```
//!
//! which is the negative log posterior divided by `N` under the Gaussian prior
//! `theta ~ N(0, (lambda * N)^{-1} I)`. The Laplace covariance therefore uses
//! a prior precision of `lambda * N`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, log_sum_exp, LayerSpec, Mlp, EVAL_CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `lambda`, the L2 weight of the objective.
    pub l2_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            l2_weight: 1e-4,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::config("l2_weight must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        Ok(())
    }

    /// Prior precision consistent with the objective for `n_train` samples.
    pub fn prior_precision(&self, n_train: usize) -> f64 {
        self.l2_weight * n_train as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub final_objective: f64,
    /// Objective on the full training set after each epoch.
    pub objective_trace: Vec<f64>,
    pub train_accuracy: f64,
}

/// He-style uniform initialization: weights `U(-a, a)` with
/// `a = sqrt(6 / fan_in)` (standard deviation `sqrt(2 / fan_in)`), biases 0.
pub fn init_params(layers: &[LayerSpec], seed: u64) -> Result<Mlp> {
    let mut model = Mlp::zeros(layers.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, spec) in layers.iter().enumerate() {
        let bound = (6.0 / spec.input_dim as f64).sqrt();
        let mut w = model.weights_mut(l);
        for j in 0..spec.output_dim {
            for i in 0..spec.input_dim {
                w[(i, j)] = rng.random_range(-bound..bound);
            }
        }
    }
    Ok(model)
}

/// Objective value and accuracy of `model` on `data`.
pub fn evaluate_objective(model: &Mlp, data: &Dataset, l2_weight: f64) -> Result<(f64, f64)> {
    let logits = model.logits_batch(data.inputs())?;
    let mut nll = 0.0;
    let mut correct = 0usize;
    for (i, &y) in data.labels().iter().enumerate() {
        let z: Vec<f64> = logits.row(i).iter().copied().collect();
        nll += log_sum_exp(&z) - z[y];
        if argmax(&z) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    let sq: f64 = model.theta().iter().map(|v| v * v).sum();
    Ok((nll / n + 0.5 * l2_weight * sq, correct as f64 / n))
}

/// Minimizes the MAP objective from `init` with mini-batch Adam. Batches are
/// reshuffled every epoch from `cfg.seed`; the last partial batch is kept.
pub fn train_map(init: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    data.check_model(init)?;

    let mut model = init.clone();
    let n_params = model.n_params();
    let mut first = vec![0.0; n_params];
    let mut second = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0i32;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut accuracy = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs = DMatrix::from_fn(batch.len(), data.n_features(), |i, j| data.inputs()[(batch[i], j)]);
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.accumulate_nll_gradient(&xs, &ys, 1.0 / batch.len() as f64, &mut grad)?;

            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            let theta = model.theta_mut();
            for k in 0..n_params {
                let g = grad[k] + cfg.l2_weight * theta[k];
                first[k] = cfg.beta1 * first[k] + (1.0 - cfg.beta1) * g;
                second[k] = cfg.beta2 * second[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = first[k] / c1;
                let v_hat = second[k] / c2;
                theta[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        let (objective, acc) = evaluate_objective(&model, data, cfg.l2_weight)?;
        if !objective.is_finite() || model.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: format!("objective is {objective}"),
            });
        }
        log::info!("epoch {epoch}: objective {objective:.6}, training accuracy {acc:.4}");
        trace.push(objective);
        accuracy = acc;
    }

    let report = TrainReport {
        final_objective: *trace.last().expect("at least one epoch"),
        objective_trace: trace,
        train_accuracy: accuracy,
    };
    Ok((model, report))
}

/// Accuracy of the point classifier on `data`.
pub fn accuracy(model: &Mlp, data: &Dataset) -> Result<f64> {
    data.check_model(model)?;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let n = EVAL_CHUNK.min(data.len() - start);
        let logits = model.logits_batch(&data.inputs().rows(start, n).into_owned())?;
        for i in 0..n {
            let z: Vec<f64> = logits.row(i).iter().copied().collect();
            if argmax(&z) == data.labels()[start + i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
