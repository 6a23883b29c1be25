//! The four periodic encoding kernels and their phase-shifted partners.
//!
//! Each kernel is a 2π-periodic real function φ. Its partner ψ is the same
//! shape at a different phase, ψ(m) = φ(π/2 − m), so specifying φ fixes the
//! pair. The sinusoidal pair is (sin, cos); the alternatives are a triangle
//! wave, a square wave, and an (unnormalized) sawtooth.
//!
//! Branch evaluation happens on the Euclidean remainder of the argument
//! modulo 2π, so arbitrary real inputs — including negative rotary angle
//! differences — reduce to one canonical branch table:
//!
//! ```text
//! tri(m) = 2m/π            on [0, π/2]      sqw(m) = −1 on [0, π)
//!          −2m/π + 2       on [π/2, 3π/2]            =  1 on [π, 2π)
//!          2m/π − 4        on [3π/2, 2π]
//! saw(m) = m               on [0, π)
//!          m − 2π          on [π, 2π)
//! ```
//!
//! `tri`'s closed interval ends overlap at π/2 and 3π/2, where both branches
//! agree, so the half-open evaluation used here is value-neutral.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which periodic function family is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeriodicKind {
    Sinusoidal,
    Triangular,
    Square,
    Sawtooth,
}

impl PeriodicKind {
    /// All four kinds, in canonical order.
    pub const ALL: [PeriodicKind; 4] = [
        PeriodicKind::Sinusoidal,
        PeriodicKind::Triangular,
        PeriodicKind::Square,
        PeriodicKind::Sawtooth,
    ];

    /// Canonical CLI/config identifier: `sin`, `tri`, `sqw`, `saw`.
    pub fn name(self) -> &'static str {
        match self {
            PeriodicKind::Sinusoidal => "sin",
            PeriodicKind::Triangular => "tri",
            PeriodicKind::Square => "sqw",
            PeriodicKind::Sawtooth => "saw",
        }
    }

    /// Supremum of |φ| over the domain: 1 for sin/tri/sqw, π for saw.
    pub fn amplitude_bound(self) -> f64 {
        match self {
            PeriodicKind::Sawtooth => std::f64::consts::PI,
            _ => 1.0,
        }
    }

    /// Points in `[0, 2π)` where φ is not differentiable (jumps or kinks).
    pub fn breakpoints(self) -> &'static [f64] {
        use std::f64::consts::{FRAC_PI_2, PI};
        const TRI: [f64; 2] = [FRAC_PI_2, 3.0 * FRAC_PI_2];
        const SQW: [f64; 2] = [0.0, PI];
        const SAW: [f64; 1] = [PI];
        match self {
            PeriodicKind::Sinusoidal => &[],
            PeriodicKind::Triangular => &TRI,
            PeriodicKind::Square => &SQW,
            PeriodicKind::Sawtooth => &SAW,
        }
    }
}

impl FromStr for PeriodicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(PeriodicKind::Sinusoidal),
            "tri" => Ok(PeriodicKind::Triangular),
            "sqw" => Ok(PeriodicKind::Square),
            "saw" => Ok(PeriodicKind::Sawtooth),
            other => Err(Error::config(format!(
                "unknown encoding '{other}' (expected one of sin, tri, sqw, saw)"
            ))),
        }
    }
}

impl fmt::Display for PeriodicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A finite angle in radians, unbounded in sign and magnitude.
///
/// Construction rejects NaN and infinities, so every downstream kernel
/// evaluation works on a validated value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle<T>(T);

impl<T: Scalar> Angle<T> {
    pub fn new(value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::domain(format!("angle must be finite, got {value}")));
        }
        Ok(Angle(value))
    }

    pub fn value(self) -> T {
        self.0
    }

    /// Euclidean reduction into `[0, 2π)`; the result is congruent to the
    /// input mod 2π and nonnegative even for negative inputs.
    pub fn wrap(self) -> Angle<T> {
        let tau = T::from_f64_lossy(std::f64::consts::TAU);
        let mut r = self.0 % tau;
        if r < T::zero() {
            r = r + tau;
        }
        // r + tau can round up to exactly tau when r is a tiny negative.
        if r >= tau {
            r = r - tau;
        }
        Angle(r)
    }
}

/// Euclidean remainder of `m` modulo 2π, in `[0, 2π)`.
pub fn wrap<T: Scalar>(m: Angle<T>) -> Angle<T> {
    m.wrap()
}

/// Evaluate φ for the given kind at angle `m`.
///
/// Sinusoidal is `sin(m)` directly; the piecewise kinds reduce `m` into
/// `[0, 2π)` first and evaluate the matching branch.
pub fn phi<T: Scalar>(kind: PeriodicKind, m: Angle<T>) -> T {
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    match kind {
        PeriodicKind::Sinusoidal => m.value().sin(),
        PeriodicKind::Triangular => {
            let w = m.wrap().value();
            let pi = T::from_f64_lossy(PI);
            let two = T::from_f64_lossy(2.0);
            if w < T::from_f64_lossy(FRAC_PI_2) {
                two * w / pi
            } else if w < T::from_f64_lossy(3.0 * FRAC_PI_2) {
                -(two / pi) * w + two
            } else {
                two * w / pi - T::from_f64_lossy(4.0)
            }
        }
        PeriodicKind::Square => {
            let w = m.wrap().value();
            if w < T::from_f64_lossy(PI) {
                -T::one()
            } else {
                T::one()
            }
        }
        PeriodicKind::Sawtooth => {
            let w = m.wrap().value();
            if w < T::from_f64_lossy(PI) {
                w
            } else {
                w - T::from_f64_lossy(TAU)
            }
        }
    }
}

/// Evaluate the phase-shifted partner ψ(m) = φ(π/2 − m).
///
/// Computed by delegation to [`phi`], never by an independent formula, so
/// the phase law holds bit-exactly by construction.
pub fn psi<T: Scalar>(kind: PeriodicKind, m: Angle<T>) -> T {
    let shifted = T::from_f64_lossy(std::f64::consts::FRAC_PI_2) - m.value();
    phi(kind, Angle(shifted))
}

/// Convenience: validate `m` and evaluate φ.
pub fn phi_at<T: Scalar>(kind: PeriodicKind, m: T) -> Result<T> {
    Ok(phi(kind, Angle::new(m)?))
}

/// Convenience: validate `m` and evaluate ψ.
pub fn psi_at<T: Scalar>(kind: PeriodicKind, m: T) -> Result<T> {
    Ok(psi(kind, Angle::new(m)?))
}
