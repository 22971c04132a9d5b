//! Labeled datasets and their plain-text columnar export.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` labeled samples with `input_dim` real features each, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("dataset must hold at least one sample".into()));
        }
        if input_dim == 0 || classes == 0 {
            return Err(Error::Contract("input dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("dataset contains a non-finite feature".into()));
        }
        Ok(Self { features, labels, input_dim, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }

    /// Appends every sample of `parts` in order.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero datasets".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim != first.input_dim || p.classes != first.classes {
                return Err(Error::Contract("concatenated datasets disagree on shape".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, labels, first.input_dim, first.classes)
    }

    /// One sample per line: comma-separated features followed by the label.
    pub fn write_columnar<W: Write>(&self, mut out: W) -> Result<()> {
        for (x, y) in self.iter() {
            for v in x {
                write!(out, "{v},")?;
            }
            writeln!(out, "{y}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`LabeledDataset::write_columnar`].
    pub fn read_columnar<R: BufRead>(input: R, classes: usize) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut input_dim = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let dim = cols.len() - 1;
            if *input_dim.get_or_insert(dim) != dim || dim == 0 {
                return Err(Error::Contract(format!("line {}: wrong column count", lineno + 1)));
            }
            for c in &cols[..dim] {
                features.push(c.trim().parse::<f64>().map_err(|e| {
                    Error::Contract(format!("line {}: bad feature: {e}", lineno + 1))
                })?);
            }
            labels.push(cols[dim].trim().parse::<usize>().map_err(|e| {
                Error::Contract(format!("line {}: bad label: {e}", lineno + 1))
            })?);
        }
        Self::new(features, labels, input_dim.unwrap_or(0), classes)
    }
}
