//! Rotary position transform built from any periodic pair (φ, ψ).
//!
//! A query or key vector of even width d_k is split into d_k/2 adjacent
//! 2-D components. Component j at position m is multiplied by
//!
//! ```text
//! [ ψ(mθ_j)  −φ(mθ_j) ]
//! [ φ(mθ_j)   ψ(mθ_j) ]
//! ```
//!
//! with the geometric angle schedule θ_j = base^(−2j/d_k). For the
//! sinusoidal pair each block is a true rotation (orthogonal, det 1); for
//! the other pairs the block has determinant φ² + ψ², which generally
//! differs from 1 — the transform is applied verbatim, with no
//! renormalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{phi, psi, Angle, PeriodicKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    /// Per-head query/key width; must be even.
    pub d_k: usize,
    /// Base of the geometric angle schedule.
    pub base: f64,
    pub kind: PeriodicKind,
}

impl RopeConfig {
    pub fn new(kind: PeriodicKind, d_k: usize) -> Self {
        RopeConfig {
            d_k,
            base: 10000.0,
            kind,
        }
    }

    pub fn with_base(mut self, base: f64) -> Self {
        self.base = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_k % 2 != 0 {
            return Err(Error::config(format!(
                "d_k must be a positive even integer, got {}",
                self.d_k
            )));
        }
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(Error::config(format!(
                "rope base must be a finite real > 0, got {}",
                self.base
            )));
        }
        Ok(())
    }
}

/// One 2×2 block `[[ψ, −φ], [φ, ψ]]` at a fixed angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockTransform<T> {
    pub psi_val: T,
    pub phi_val: T,
}

impl<T: Scalar> BlockTransform<T> {
    /// φ² + ψ²; equals 1 exactly only for the sinusoidal pair.
    pub fn determinant(&self) -> T {
        self.phi_val * self.phi_val + self.psi_val * self.psi_val
    }

    /// Apply the block to a 2-D component.
    pub fn apply(&self, x: T, y: T) -> (T, T) {
        (
            self.psi_val * x - self.phi_val * y,
            self.phi_val * x + self.psi_val * y,
        )
    }

    /// Apply the transposed block (the backward map of `apply`).
    pub fn apply_transposed(&self, x: T, y: T) -> (T, T) {
        (
            self.psi_val * x + self.phi_val * y,
            -self.phi_val * x + self.psi_val * y,
        )
    }
}

/// Evaluate the block for `kind` at a raw angle (in `f64`, rounded into `T`).
pub fn block_transform<T: Scalar>(kind: PeriodicKind, angle: f64) -> Result<BlockTransform<T>> {
    let a = Angle::new(angle)?;
    Ok(BlockTransform {
        psi_val: T::from_f64_lossy(psi(kind, a)),
        phi_val: T::from_f64_lossy(phi(kind, a)),
    })
}

/// The geometric angle schedule θ_j = base^(−2j/d_k), j = 0..d_k/2−1.
///
/// Strictly decreasing for base > 1, with θ_0 = 1.
pub fn theta_schedule(config: &RopeConfig) -> Result<Vec<f64>> {
    config.validate()?;
    Ok((0..config.d_k / 2)
        .map(|j| config.base.powf(-2.0 * j as f64 / config.d_k as f64))
        .collect())
}

/// Rotate a length-d_k vector for integer position `m`.
pub fn rotate<T: Scalar>(v: &[T], m: usize, config: &RopeConfig) -> Result<Vec<T>> {
    config.validate()?;
    if v.len() != config.d_k {
        return Err(Error::shape(format!(
            "vector length {} != d_k {}",
            v.len(),
            config.d_k
        )));
    }
    let thetas = theta_schedule(config)?;
    let mut out = Vec::with_capacity(v.len());
    for (j, &theta) in thetas.iter().enumerate() {
        let block = block_transform::<T>(config.kind, m as f64 * theta)?;
        let (a, b) = block.apply(v[2 * j], v[2 * j + 1]);
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

/// Scaled dot-product logit between two rotated vectors: q·k / √d_k.
pub fn attention_logit<T: Scalar>(q_rot: &[T], k_rot: &[T]) -> Result<T> {
    if q_rot.len() != k_rot.len() {
        return Err(Error::shape(format!(
            "query length {} != key length {}",
            q_rot.len(),
            k_rot.len()
        )));
    }
    let dot: T = q_rot.iter().zip(k_rot).map(|(&a, &b)| a * b).sum();
    Ok(dot / T::from_f64_lossy((q_rot.len() as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn theta_schedule_examples() {
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 4);
        let t = theta_schedule(&cfg).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 0.01).abs() < 1e-15);

        let single = RopeConfig::new(PeriodicKind::Sinusoidal, 2);
        assert_eq!(theta_schedule(&single).unwrap(), vec![1.0]);

        let degenerate = RopeConfig::new(PeriodicKind::Sinusoidal, 6).with_base(1.0);
        assert!(theta_schedule(&degenerate)
            .unwrap()
            .iter()
            .all(|&t| t == 1.0));
    }

    #[test]
    fn theta_schedule_strictly_decreasing() {
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 64);
        let t = theta_schedule(&cfg).unwrap();
        for w in t.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn rejects_odd_d_k() {
        assert!(RopeConfig::new(PeriodicKind::Sinusoidal, 3).validate().is_err());
        assert!(RopeConfig::new(PeriodicKind::Sinusoidal, 0).validate().is_err());
    }

    #[test]
    fn rotate_length_mismatch() {
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 4);
        assert!(matches!(
            rotate(&[1.0f64, 0.0], 1, &cfg),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn sinusoidal_position_zero_is_identity() {
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 6);
        let v = [0.3f64, -1.2, 0.7, 2.0, -0.5, 0.1];
        let out = rotate(&v, 0, &cfg).unwrap();
        for (a, b) in v.iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn square_position_zero_block() {
        // φ(0) = −1, ψ(0) = sqw(π/2) = −1; pair (1, 0) maps to (−1, −1)
        let cfg = RopeConfig::new(PeriodicKind::Square, 2);
        let out = rotate(&[1.0f64, 0.0], 0, &cfg).unwrap();
        assert_eq!(out, vec![-1.0, -1.0]);
    }

    #[test]
    fn sinusoidal_quarter_rotation() {
        let block = block_transform::<f64>(PeriodicKind::Sinusoidal, FRAC_PI_2).unwrap();
        let (a, b) = block.apply(1.0, 0.0);
        assert!(a.abs() < 1e-15);
        assert!((b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_logit_examples() {
        let q = [1.0f64, 0.0, 0.0, 0.0];
        assert_eq!(attention_logit(&q, &q).unwrap(), 0.5);
        let k = [0.0f64, 1.0, 0.0, 0.0];
        assert_eq!(attention_logit(&q, &k).unwrap(), 0.0);
        assert!(attention_logit(&q, &k[..2]).is_err());
    }

    #[test]
    fn sinusoidal_rotation_preserves_logit_at_equal_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 8);
        for m in [0usize, 1, 5, 40] {
            let q: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let plain = attention_logit(&q, &k).unwrap();
            let rotated = attention_logit(
                &rotate(&q, m, &cfg).unwrap(),
                &rotate(&k, m, &cfg).unwrap(),
            )
            .unwrap();
            assert!((plain - rotated).abs() <= 1e-12, "m={m}");
        }
    }

    #[test]
    fn sinusoidal_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RopeConfig::new(PeriodicKind::Sinusoidal, 16);
        for _ in 0..20 {
            let q: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let (m, n) = (3usize, 9usize);
            let base = attention_logit(
                &rotate(&q, m, &cfg).unwrap(),
                &rotate(&k, n, &cfg).unwrap(),
            )
            .unwrap();
            for s in [1usize, 7, 33] {
                let shifted = attention_logit(
                    &rotate(&q, m + s, &cfg).unwrap(),
                    &rotate(&k, n + s, &cfg).unwrap(),
                )
                .unwrap();
                assert!((base - shifted).abs() <= 1e-9, "s={s}");
            }
        }
    }

    #[test]
    fn square_blocks_are_scaled_orthogonal() {
        let cfg = RopeConfig::new(PeriodicKind::Square, 8);
        let thetas = theta_schedule(&cfg).unwrap();
        for m in 0..50usize {
            for &theta in &thetas {
                let b = block_transform::<f64>(PeriodicKind::Square, m as f64 * theta).unwrap();
                assert_eq!(b.determinant(), 2.0);
            }
        }
        // consequence: ‖rotate(v)‖ = √2 ‖v‖
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [0usize, 2, 17] {
            let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let out = rotate(&v, m, &cfg).unwrap();
            let n_in: f64 = v.iter().map(|x| x * x).sum();
            let n_out: f64 = out.iter().map(|x| x * x).sum();
            assert!((n_out / n_in - 2.0).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn triangular_block_is_not_orthogonal() {
        // at angle π/4: φ = ψ = 1/2, so φ² + ψ² = 1/2
        let b = block_transform::<f64>(PeriodicKind::Triangular, std::f64::consts::FRAC_PI_4)
            .unwrap();
        assert_eq!(b.determinant(), 0.5);
        assert_ne!(b.determinant(), 1.0);
    }

    #[test]
    fn rotate_is_linear() {
        let cfg = RopeConfig::new(PeriodicKind::Sawtooth, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in [1usize, 4, 9] {
            let v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let (a, b) = (1.7f64, -0.3f64);
            let combined: Vec<f64> = v.iter().zip(&w).map(|(&x, &y)| a * x + b * y).collect();
            let lhs = rotate(&combined, m, &cfg).unwrap();
            let rv = rotate(&v, m, &cfg).unwrap();
            let rw = rotate(&w, m, &cfg).unwrap();
            for i in 0..6 {
                assert!((lhs[i] - (a * rv[i] + b * rw[i])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transposed_block_inverts_sinusoidal() {
        let b = block_transform::<f64>(PeriodicKind::Sinusoidal, 0.7).unwrap();
        let (x, y) = b.apply(0.4, -1.1);
        let (rx, ry) = b.apply_transposed(x, y);
        assert!((rx - 0.4).abs() < 1e-15);
        assert!((ry + 1.1).abs() < 1e-15);
    }
}
