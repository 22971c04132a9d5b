//! Differentiable classifiers with cross-entropy loss: softmax regression and
//! a one-hidden-layer tanh network. Gradients are written out by hand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SoftmaxRegression,
    TwoLayerMlp,
}

/// A classifier family `l(w; x, y)`. The parameter dimension is fully
/// determined by the architecture and the three sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModel {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub classes: usize,
    /// Hidden width; ignored by softmax regression.
    #[serde(default)]
    pub hidden: usize,
}

/// Mean loss and accuracy of one model on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

impl LossModel {
    pub fn softmax_regression(input_dim: usize, classes: usize) -> Self {
        Self { architecture: Architecture::SoftmaxRegression, input_dim, classes, hidden: 0 }
    }

    pub fn two_layer_mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self { architecture: Architecture::TwoLayerMlp, input_dim, classes, hidden }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::InvalidConfig(
                "model needs input_dim >= 1 and classes >= 2".into(),
            ));
        }
        if self.architecture == Architecture::TwoLayerMlp && self.hidden == 0 {
            return Err(Error::InvalidConfig("two-layer-mlp needs hidden >= 1".into()));
        }
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.classes, self.hidden);
        match self.architecture {
            Architecture::SoftmaxRegression => c * d + c,
            Architecture::TwoLayerMlp => h * d + h + c * h + c,
        }
    }

    /// Centered uniform initialization in `[-scale, scale]`.
    pub fn init_params<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> ParamVector {
        let values = (0..self.param_dim())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        ParamVector::from_raw_unchecked(values)
    }

    fn check(&self, params: &ParamVector, data: &LabeledDataset) -> Result<()> {
        ensure_dim(self.param_dim(), params.len())?;
        ensure_dim(self.input_dim, data.input_dim())?;
        ensure_dim(self.classes, data.classes())?;
        Ok(())
    }

    /// Mean cross-entropy over `data`.
    pub fn empirical_loss(&self, params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
        Ok(self.evaluate(params, data)?.loss)
    }

    pub fn accuracy(&self, params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
        Ok(self.evaluate(params, data)?.accuracy)
    }

    pub fn evaluate(&self, params: &ParamVector, data: &LabeledDataset) -> Result<Evaluation> {
        self.check(params, data)?;
        let mut scratch = Scratch::new(self);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, y) in data.iter() {
            let (l, hit) = self.forward(params.as_slice(), x, y, &mut scratch);
            loss += l;
            correct += hit as usize;
        }
        let n = data.len() as f64;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::Numeric("empirical loss is not finite".into()));
        }
        Ok(Evaluation { loss, accuracy: correct as f64 / n })
    }

    /// Cross-entropy of every sample, in dataset order.
    pub fn sample_losses(&self, params: &ParamVector, data: &LabeledDataset) -> Result<Vec<f64>> {
        self.check(params, data)?;
        let mut scratch = Scratch::new(self);
        let out: Vec<f64> = data
            .iter()
            .map(|(x, y)| self.forward(params.as_slice(), x, y, &mut scratch).0)
            .collect();
        if out.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("per-sample loss is not finite".into()));
        }
        Ok(out)
    }

    /// Gradient of the mean loss with respect to the parameters.
    pub fn loss_gradient(&self, params: &ParamVector, data: &LabeledDataset) -> Result<ParamVector> {
        self.check(params, data)?;
        let mut grad = vec![0.0; self.param_dim()];
        self.accumulate_gradient(params.as_slice(), data, 0..data.len(), &mut grad);
        finish_gradient(grad, data.len())
    }

    /// Gradient of `f(v) + rho/2 * ||v - anchor||^2`.
    pub fn proximal_gradient(
        &self,
        params: &ParamVector,
        anchor: &ParamVector,
        rho: f64,
        data: &LabeledDataset,
    ) -> Result<ParamVector> {
        ensure_dim(params.len(), anchor.len())?;
        let g = self.loss_gradient(params, data)?;
        add_proximal(g, params, anchor, rho)
    }

    /// Proximal gradient restricted to the samples at `batch`.
    pub(crate) fn proximal_gradient_on(
        &self,
        params: &ParamVector,
        anchor: &ParamVector,
        rho: f64,
        data: &LabeledDataset,
        batch: &[usize],
    ) -> Result<ParamVector> {
        self.check(params, data)?;
        ensure_dim(params.len(), anchor.len())?;
        let mut grad = vec![0.0; self.param_dim()];
        self.accumulate_gradient(params.as_slice(), data, batch.iter().copied(), &mut grad);
        let g = finish_gradient(grad, batch.len())?;
        add_proximal(g, params, anchor, rho)
    }

    fn accumulate_gradient(
        &self,
        p: &[f64],
        data: &LabeledDataset,
        indices: impl Iterator<Item = usize>,
        grad: &mut [f64],
    ) {
        let mut s = Scratch::new(self);
        let (d, c, h) = (self.input_dim, self.classes, self.hidden);
        for i in indices {
            let x = data.row(i);
            let y = data.label(i);
            self.forward(p, x, y, &mut s);
            // s.probs now holds softmax(z); turn it into dL/dz.
            s.probs[y] -= 1.0;
            match self.architecture {
                Architecture::SoftmaxRegression => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        let dz = s.probs[k];
                        for (g, xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *g += dz * xj;
                        }
                        gb[k] += dz;
                    }
                }
                Architecture::TwoLayerMlp => {
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    let w2 = &p[h * d + h..h * d + h + c * h];
                    for j in 0..h {
                        s.back[j] = 0.0;
                    }
                    for k in 0..c {
                        let dz = s.probs[k];
                        let row = &w2[k * h..(k + 1) * h];
                        for j in 0..h {
                            gw2[k * h + j] += dz * s.hidden[j];
                            s.back[j] += dz * row[j];
                        }
                        gb2[k] += dz;
                    }
                    for j in 0..h {
                        let da = s.back[j] * (1.0 - s.hidden[j] * s.hidden[j]);
                        for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g += da * xi;
                        }
                        gb1[j] += da;
                    }
                }
            }
        }
    }

    /// Computes logits into `s.logits`, softmax into `s.probs`, and returns
    /// the sample's cross-entropy and whether the argmax matches `y`.
    fn forward(&self, p: &[f64], x: &[f64], y: usize, s: &mut Scratch) -> (f64, bool) {
        let (d, c, h) = (self.input_dim, self.classes, self.hidden);
        match self.architecture {
            Architecture::SoftmaxRegression => {
                let (w, b) = p.split_at(c * d);
                for k in 0..c {
                    s.logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            Architecture::TwoLayerMlp => {
                let w1 = &p[..h * d];
                let b1 = &p[h * d..h * d + h];
                let w2 = &p[h * d + h..h * d + h + c * h];
                let b2 = &p[h * d + h + c * h..];
                for j in 0..h {
                    s.hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    s.logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &s.hidden);
                }
            }
        }
        let mut best = 0;
        for k in 1..c {
            if s.logits[k] > s.logits[best] {
                best = k;
            }
        }
        let max = s.logits[best];
        let mut total = 0.0;
        for k in 0..c {
            let e = (s.logits[k] - max).exp();
            s.probs[k] = e;
            total += e;
        }
        for v in s.probs.iter_mut() {
            *v /= total;
        }
        let lse = max + total.ln();
        (lse - s.logits[y], best == y)
    }
}

struct Scratch {
    logits: Vec<f64>,
    probs: Vec<f64>,
    hidden: Vec<f64>,
    back: Vec<f64>,
}

impl Scratch {
    fn new(model: &LossModel) -> Self {
        Self {
            logits: vec![0.0; model.classes],
            probs: vec![0.0; model.classes],
            hidden: vec![0.0; model.hidden],
            back: vec![0.0; model.hidden],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finish_gradient(mut grad: Vec<f64>, n: usize) -> Result<ParamVector> {
    let inv = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    ParamVector::new(grad).map_err(|_| Error::Numeric("gradient is not finite".into()))
}

fn add_proximal(g: ParamVector, params: &ParamVector, anchor: &ParamVector, rho: f64) -> Result<ParamVector> {
    if rho == 0.0 {
        return Ok(g);
    }
    let values = g
        .into_inner()
        .into_iter()
        .zip(params.as_slice().iter().zip(anchor.as_slice()))
        .map(|(g, (v, u))| g + rho * (v - u))
        .collect();
    ParamVector::new(values).map_err(|_| Error::Numeric("proximal gradient is not finite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(seed: u64, n: usize, d: usize, c: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        LabeledDataset::new(features, labels, d, c).unwrap()
    }

    /// Straight-line cross-entropy for softmax regression, no shared helpers.
    fn oracle_softmax_loss(params: &[f64], data: &LabeledDataset) -> f64 {
        let d = data.input_dim();
        let c = data.classes();
        let mut total = 0.0;
        for i in 0..data.len() {
            let x = data.row(i);
            let mut z = vec![0.0; c];
            for k in 0..c {
                z[k] = params[c * d + k];
                for j in 0..d {
                    z[k] += params[k * d + j] * x[j];
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total += -(z[data.label(i)].exp() / denom).ln();
        }
        total / data.len() as f64
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let model = LossModel::softmax_regression(2, 2);
        let data = toy_dataset(1, 10, 2, 2);
        let loss = model.empirical_loss(&ParamVector::zeros(6), &data).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_params_drive_loss_to_zero() {
        // Two classes separated on the first coordinate.
        let data = LabeledDataset::new(vec![-1.0, 0.0, 1.0, 0.0], vec![0, 1], 2, 2).unwrap();
        let model = LossModel::softmax_regression(2, 2);
        let mut last = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let p = ParamVector::new(vec![-scale, 0.0, scale, 0.0, 0.0, 0.0]).unwrap();
            let loss = model.empirical_loss(&p, &data).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn loss_matches_frozen_value() {
        // Computed independently with numpy:
        // z = W x + b, loss = mean(-log softmax(z)[y]).
        let data = LabeledDataset::new(
            vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0, 0.0, 0.0, 1.0, 1.0, -2.0, 0.5, 0.3, -0.3, 1.2, -1.1],
            vec![0, 1, 1, 0, 1, 0, 0, 1],
            2,
            2,
        )
        .unwrap();
        let params = ParamVector::new(vec![0.4, -0.2, -0.3, 0.7, 0.1, -0.05]).unwrap();
        let model = LossModel::softmax_regression(2, 2);
        let loss = model.empirical_loss(&params, &data).unwrap();
        assert!((loss - 0.914_570_729_096_770_4).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_matches_scalar_oracle_on_seeded_instance() {
        let data = toy_dataset(42, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = LossModel::softmax_regression(2, 2);
        let params = model.init_params(1.0, &mut rng);
        let got = model.empirical_loss(&params, &data).unwrap();
        let expected = oracle_softmax_loss(params.as_slice(), &data);
        assert!((got - expected).abs() < 1e-12);
    }

    fn central_difference(
        model: &LossModel,
        params: &ParamVector,
        anchor: &ParamVector,
        rho: f64,
        data: &LabeledDataset,
    ) -> Vec<f64> {
        let objective = |v: &[f64]| {
            let p = ParamVector::new(v.to_vec()).unwrap();
            let prox: f64 = v
                .iter()
                .zip(anchor.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            model.empirical_loss(&p, data).unwrap() + 0.5 * rho * prox
        };
        let step = 1e-5;
        let mut v = params.as_slice().to_vec();
        (0..v.len())
            .map(|i| {
                let orig = v[i];
                v[i] = orig + step;
                let up = objective(&v);
                v[i] = orig - step;
                let down = objective(&v);
                v[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for model in [LossModel::softmax_regression(3, 4), LossModel::two_layer_mlp(3, 5, 4)] {
            for seed in 0..5 {
                let data = toy_dataset(100 + seed, 12, 3, 4);
                let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
                let params = model.init_params(0.8, &mut rng);
                let anchor = model.init_params(0.8, &mut rng);
                let analytic = model.proximal_gradient(&params, &anchor, 0.1, &data).unwrap();
                let numeric = central_difference(&model, &params, &anchor, 0.1, &data);
                let err = max_relative_error(analytic.as_slice(), &numeric);
                assert!(err < 1e-4, "{model:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gradient_is_duplication_invariant() {
        let model = LossModel::two_layer_mlp(2, 3, 3);
        let data = toy_dataset(5, 9, 2, 3);
        let doubled = LabeledDataset::concat(&[data.clone(), data.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = model.init_params(0.5, &mut rng);
        let a = model.loss_gradient(&p, &data).unwrap();
        let b = model.loss_gradient(&p, &doubled).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn proximal_term_cases() {
        let model = LossModel::softmax_regression(2, 3);
        let data = toy_dataset(9, 7, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = model.init_params(0.5, &mut rng);
        let anchor = model.init_params(0.5, &mut rng);
        let plain = model.loss_gradient(&p, &data).unwrap();
        assert_eq!(model.proximal_gradient(&p, &anchor, 0.0, &data).unwrap(), plain);
        assert_eq!(model.proximal_gradient(&p, &p, 0.1, &data).unwrap(), plain);

        // Zero-gradient instance: both classes of a symmetric two-point set
        // at the origin with zero params.
        let sym = LabeledDataset::new(vec![0.0, 0.0, 0.0, 0.0], vec![0, 1], 2, 2).unwrap();
        let m2 = LossModel::softmax_regression(2, 2);
        let zero = ParamVector::zeros(6);
        let mut shifted = vec![0.0; 6];
        shifted[0] = 1.0;
        let shifted = ParamVector::new(shifted).unwrap();
        let g = m2.proximal_gradient(&zero, &zero, 0.1, &sym).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        // params - anchor = (1, 0, ...) with params at the anchor-shifted point:
        // evaluate at params = shifted, anchor = zero; data gradient still zero
        // because every feature is zero and biases are equal.
        let g = m2.proximal_gradient(&shifted, &zero, 0.1, &sym).unwrap();
        assert!((g.as_slice()[0] - 0.1).abs() < 1e-15);
        assert!(g.as_slice()[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = LossModel::softmax_regression(2, 2);
        let data = toy_dataset(1, 4, 2, 2);
        assert!(matches!(
            model.empirical_loss(&ParamVector::zeros(5), &data),
            Err(Error::DimensionMismatch { .. })
        ));
        let wrong = toy_dataset(1, 4, 3, 2);
        assert!(model.loss_gradient(&ParamVector::zeros(6), &wrong).is_err());
    }

    #[test]
    fn param_dims() {
        assert_eq!(LossModel::softmax_regression(2, 10).param_dim(), 30);
        assert_eq!(LossModel::two_layer_mlp(2, 16, 10).param_dim(), 2 * 16 + 16 + 160 + 10);
    }
}
