//! Flat parameter vectors and the two geometric operations the protocol
//! needs on them: distances between models and convex combinations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::estimation::WeightEstimate;

/// Flat real-valued model parameters. Every cluster model, local model and
/// personalized model in one scenario shares the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Moves `self` toward `target` by `ratio`: `self <- (1 - ratio) * self + ratio * target`.
    pub fn blend_toward(&mut self, target: &ParamVector, ratio: f64) -> Result<()> {
        ensure_dim(self.len(), target.len())?;
        if ratio == 0.0 {
            return Ok(());
        }
        for (w, v) in self.0.iter_mut().zip(&target.0) {
            *w = (1.0 - ratio) * *w + ratio * v;
        }
        Ok(())
    }

    /// Applies `self <- self - step * direction`, failing if any entry
    /// stops being finite.
    pub(crate) fn descend(&mut self, direction: &[f64], step: f64) -> Result<()> {
        ensure_dim(self.len(), direction.len())?;
        let mut finite = true;
        for (w, g) in self.0.iter_mut().zip(direction) {
            *w -= step * g;
            finite &= w.is_finite();
        }
        if finite {
            Ok(())
        } else {
            Err(Error::Numeric("parameter update produced a non-finite value".into()))
        }
    }

    pub(crate) fn from_raw_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

/// Euclidean norm of `a - b`.
pub fn l2_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    let sq: f64 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt())
}

/// Convex combination `sum_k weights[k] * models[k]`.
pub fn aggregate(models: &[ParamVector], weights: &WeightEstimate) -> Result<ParamVector> {
    let w = weights.weights();
    if models.is_empty() {
        return Err(Error::Contract("aggregate needs at least one model".into()));
    }
    if models.len() != w.len() {
        return Err(Error::Contract(format!(
            "aggregate got {} models but {} weights",
            models.len(),
            w.len()
        )));
    }
    let dim = models[0].len();
    let mut out = vec![0.0; dim];
    for (model, &alpha) in models.iter().zip(w) {
        ensure_dim(dim, model.len())?;
        if alpha == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(&model.0) {
            *o += alpha * x;
        }
    }
    ParamVector::new(out)
}
