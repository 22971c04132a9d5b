//! Proximal SGD: `v <- v - lr * grad J(v; u)` with `J = f + rho/2 ||v - u||^2`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::model::LossModel;
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Proximal weight.
    pub rho: f64,
    pub h_min: usize,
    pub h_max: usize,
    /// Mini-batch size; `None` means full batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::InvalidConfig("rho must be finite and >= 0".into()));
        }
        if self.h_min == 0 || self.h_min > self.h_max {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= h_min <= h_max, got h_min={} h_max={}",
                self.h_min, self.h_max
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Number of local steps for one round, uniform in `[h_min, h_max]`.
    pub fn draw_steps<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.h_min..=self.h_max)
    }
}

/// Runs exactly `steps` proximal-SGD iterations from `start` with the anchor
/// held fixed. Batches are drawn without replacement within each pass over
/// the data and reshuffled between passes.
pub fn local_train<R: Rng + ?Sized>(
    model: &LossModel,
    start: &ParamVector,
    anchor: &ParamVector,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    steps: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    if steps < cfg.h_min || steps > cfg.h_max {
        return Err(Error::Contract(format!(
            "local step count {steps} outside [{}, {}]",
            cfg.h_min, cfg.h_max
        )));
    }
    ensure_dim(model.param_dim(), start.len())?;
    ensure_dim(start.len(), anchor.len())?;

    let n = data.len();
    let batch = cfg.batch_size.filter(|&b| b < n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut v = start.clone();
    for step in 0..steps {
        let grad = match batch {
            None => model.proximal_gradient(&v, anchor, cfg.rho, data),
            Some(b) => {
                if cursor + b > n {
                    order.shuffle(rng);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + b];
                cursor += b;
                model.proximal_gradient_on(&v, anchor, cfg.rho, data, idx)
            }
        };
        let grad = grad.map_err(|_| Error::Diverged { step })?;
        if cfg.learning_rate == 0.0 {
            continue;
        }
        v.descend(grad.as_slice(), cfg.learning_rate)
            .map_err(|_| Error::Diverged { step })?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn separable() -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            features.push(sign * rng.random_range(0.5..2.0));
            features.push(rng.random_range(-1.0..1.0));
            labels.push(y);
        }
        LabeledDataset::new(features, labels, 2, 2).unwrap()
    }

    fn cfg(lr: f64, rho: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, rho, h_min: 1, h_max: 500, batch_size: None }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let model = LossModel::softmax_regression(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = model.init_params(0.05, &mut rng);
        let out = local_train(&model, &start, &start, &cfg(0.0, 0.1), &separable(), 10, &mut rng).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn single_step_unrolls() {
        let model = LossModel::two_layer_mlp(2, 3, 2);
        let data = separable();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let start = model.init_params(0.3, &mut rng);
        let anchor = model.init_params(0.3, &mut rng);
        let c = cfg(0.05, 0.1);
        let out = local_train(&model, &start, &anchor, &c, &data, 1, &mut rng).unwrap();
        let g = model.proximal_gradient(&start, &anchor, 0.1, &data).unwrap();
        for ((o, s), g) in out.as_slice().iter().zip(start.as_slice()).zip(g.as_slice()) {
            assert_eq!(*o, s - 0.05 * g);
        }
    }

    #[test]
    fn full_batch_descent_on_separable_data() {
        let model = LossModel::softmax_regression(2, 2);
        let data = separable();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = model.init_params(0.05, &mut rng);
        let c = cfg(0.01, 0.1);
        let objective = |v: &ParamVector| {
            let d = crate::params::l2_distance(v, &start).unwrap();
            model.empirical_loss(v, &data).unwrap() + 0.05 * d * d
        };
        let mut v = start.clone();
        let mut last = objective(&v);
        let initial_loss = model.empirical_loss(&start, &data).unwrap();
        for _ in 0..50 {
            v = local_train(&model, &v, &start, &c, &data, 1, &mut rng).unwrap();
            let j = objective(&v);
            assert!(j <= last + 1e-15);
            last = j;
        }
        assert!(model.empirical_loss(&v, &data).unwrap() < initial_loss);
    }

    #[test]
    fn steps_outside_bounds_rejected() {
        let model = LossModel::softmax_regression(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = model.init_params(0.05, &mut rng);
        let c = TrainConfig { h_min: 5, h_max: 10, ..cfg(0.1, 0.1) };
        assert!(local_train(&model, &start, &start, &c, &separable(), 4, &mut rng).is_err());
        assert!(local_train(&model, &start, &start, &c, &separable(), 11, &mut rng).is_err());
    }

    #[test]
    fn divergence_names_step() {
        let model = LossModel::softmax_regression(2, 2);
        let data = LabeledDataset::new(vec![1e150, 1e150], vec![1], 2, 2).unwrap();
        let start = ParamVector::new(vec![1e150, 1e150, -1e150, -1e150, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = local_train(&model, &start, &start, &cfg(1e200, 0.0), &data, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn minibatch_is_seed_deterministic() {
        let model = LossModel::softmax_regression(2, 2);
        let data = separable();
        let c = TrainConfig { batch_size: Some(7), ..cfg(0.1, 0.1) };
        let start = ParamVector::zeros(6);
        let a = local_train(&model, &start, &start, &c, &data, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = local_train(&model, &start, &start, &c, &data, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
