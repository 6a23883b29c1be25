//! Absolute positional-encoding tables.
//!
//! Position m, dimension pair i (0 ≤ i < d_model/2):
//!
//! ```text
//! PE(m, 2i)   = φ(m / base^(2i/d_model))
//! PE(m, 2i+1) = ψ(m / base^(2i/d_model))
//! ```
//!
//! with base 10000 by default. The table is computed once per run in double
//! precision; a single-precision table is the same table rounded entrywise
//! at the end, never a single-precision evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{phi, psi, Angle, PeriodicKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Table-construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    /// Embedding width; must be even (each pair index owns one even/odd column).
    pub d_model: usize,
    /// Number of positions L; rows cover 0..L−1.
    pub max_len: usize,
    /// Frequency base.
    pub base: f64,
    pub kind: PeriodicKind,
}

impl PeConfig {
    pub fn new(kind: PeriodicKind, d_model: usize, max_len: usize) -> Self {
        PeConfig {
            d_model,
            max_len,
            base: 10000.0,
            kind,
        }
    }

    pub fn with_base(mut self, base: f64) -> Self {
        self.base = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model must be a positive even integer, got {}",
                self.d_model
            )));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::config(format!(
                "base must be a finite real > 1, got {}",
                self.base
            )));
        }
        Ok(())
    }
}

/// Precomputed max_len × d_model encoding table.
#[derive(Debug, Clone, PartialEq)]
pub struct PeTable<T> {
    values: Tensor<T>,
    config: PeConfig,
}

impl<T: Scalar> PeTable<T> {
    pub fn config(&self) -> &PeConfig {
        &self.config
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Row for position `m`.
    pub fn row(&self, m: usize) -> &[T] {
        let d = self.config.d_model;
        &self.values.data()[m * d..(m + 1) * d]
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }
}

/// Build the encoding table for `config`. Deterministic; all arithmetic in
/// `f64` with one final rounding into `T`.
pub fn build_table<T: Scalar>(config: PeConfig) -> Result<PeTable<T>> {
    config.validate()?;
    let d = config.d_model;
    let mut data = Vec::with_capacity(config.max_len * d);
    // divisor for pair i: base^(2i/d_model), precomputed per column pair
    let divisors: Vec<f64> = (0..d / 2)
        .map(|i| config.base.powf(2.0 * i as f64 / d as f64))
        .collect();
    for m in 0..config.max_len {
        for divisor in &divisors {
            let arg = Angle::new(m as f64 / divisor)?;
            data.push(T::from_f64_lossy(phi(config.kind, arg)));
            data.push(T::from_f64_lossy(psi(config.kind, arg)));
        }
    }
    let values = Tensor::new(vec![config.max_len, d], data)?;
    debug_assert!(values.is_all_finite());
    Ok(PeTable { values, config })
}

/// Add table rows to an L×d_model embedding matrix, elementwise, with no
/// scaling factor. `L` may be at most the table's `max_len`.
pub fn add_positional<T: Scalar>(embeddings: &Tensor<T>, table: &PeTable<T>) -> Result<Tensor<T>> {
    if embeddings.rank() != 2 {
        return Err(Error::shape(format!(
            "expected a rank-2 embedding matrix, got shape {:?}",
            embeddings.shape()
        )));
    }
    let (len, width) = (embeddings.dim(0), embeddings.dim(1));
    if width != table.config.d_model {
        return Err(Error::shape(format!(
            "embedding width {} != table d_model {}",
            width, table.config.d_model
        )));
    }
    if len > table.config.max_len {
        return Err(Error::length(format!(
            "sequence length {} exceeds table max_len {}",
            len, table.config.max_len
        )));
    }
    let mut out = embeddings.clone();
    let table_data = table.values.data();
    for (o, t) in out.data_mut().iter_mut().zip(&table_data[..len * width]) {
        *o = *o + *t;
    }
    Ok(out)
}
