//! Quantitative probes of the encoding functions: value-distribution
//! histograms, rotary shift-invariance deviation, and finite-difference
//! slope profiles. All probes run on the kernel/table/rotary layers alone —
//! no trained model involved — and emit CSV with documented headers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{phi, Angle, PeriodicKind};
use crate::pe::{build_table, PeConfig};
use crate::rope::{attention_logit, rotate, RopeConfig};

/// Histogram of PE-table entries over equal-width bins of the kind's range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub kind: PeriodicKind,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// max bin count / min bin count; infinite when a bin is empty.
    pub uniformity_ratio: f64,
}

impl Histogram {
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// `bin_lo,bin_hi,count` CSV.
    pub fn to_csv(&self) -> String {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * width;
            out.push_str(&format!("{},{},{}\n", lo, lo + width, c));
        }
        out
    }
}

/// Build a `d_model × L` table for `kind` and histogram every entry.
pub fn output_histogram(
    kind: PeriodicKind,
    d_model: usize,
    max_len: usize,
    bins: usize,
) -> Result<Histogram> {
    if bins < 10 {
        return Err(Error::config(format!("need at least 10 bins, got {bins}")));
    }
    let table = build_table::<f64>(PeConfig::new(kind, d_model, max_len))?;
    let bound = kind.amplitude_bound();
    let (lo, hi) = (-bound, bound);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in table.values().data() {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let max = *counts.iter().max().unwrap() as f64;
    let min = *counts.iter().min().unwrap() as f64;
    let uniformity_ratio = if min == 0.0 { f64::INFINITY } else { max / min };
    Ok(Histogram {
        kind,
        lo,
        hi,
        counts,
        uniformity_ratio,
    })
}

/// Deviation statistics of the rotary logit under a common position shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftStat {
    pub shift: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
}

/// `shift,max_deviation,mean_deviation` CSV.
pub fn shift_profile_csv(stats: &[ShiftStat]) -> String {
    let mut out = String::from("shift,max_deviation,mean_deviation\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{}\n",
            s.shift, s.max_deviation, s.mean_deviation
        ));
    }
    out
}

/// For random unit query/key vectors, measure |e(m, n) − e(m+s, n+s)| over
/// all position pairs m, n < `n_positions` and shifts 0..=`max_shift`.
///
/// The sinusoidal kind satisfies the relative-position property, so its
/// deviations sit at rounding level; the other kinds generally do not, and
/// this probe quantifies by how much.
pub fn shift_invariance_profile(
    kind: PeriodicKind,
    d_k: usize,
    n_positions: usize,
    max_shift: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ShiftStat>> {
    let config = RopeConfig::new(kind, d_k);
    config.validate()?;
    if n_positions == 0 || trials == 0 {
        return Err(Error::config("n_positions and trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d_k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..trials)
        .map(|_| (unit(&mut rng), unit(&mut rng)))
        .collect();

    let mut stats = Vec::with_capacity(max_shift + 1);
    for shift in 0..=max_shift {
        let mut max_dev = 0.0f64;
        let mut sum_dev = 0.0f64;
        let mut n = 0usize;
        for (q, k) in &pairs {
            for m in 0..n_positions {
                for pos_n in 0..n_positions {
                    let base = attention_logit(
                        &rotate(q, m, &config)?,
                        &rotate(k, pos_n, &config)?,
                    )?;
                    let shifted = attention_logit(
                        &rotate(q, m + shift, &config)?,
                        &rotate(k, pos_n + shift, &config)?,
                    )?;
                    let dev = (base - shifted).abs();
                    max_dev = max_dev.max(dev);
                    sum_dev += dev;
                    n += 1;
                }
            }
        }
        stats.push(ShiftStat {
            shift,
            max_deviation: max_dev,
            mean_deviation: sum_dev / n as f64,
        });
    }
    Ok(stats)
}

/// Central-difference slope samples of φ, with points near a
/// non-differentiable breakpoint skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeProfile {
    pub kind: PeriodicKind,
    pub entries: Vec<(f64, f64)>,
    pub skipped: usize,
}

impl SlopeProfile {
    /// `angle,slope` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle,slope\n");
        for (angle, slope) in &self.entries {
            out.push_str(&format!("{angle},{slope}\n"));
        }
        out
    }
}

const SLOPE_EXCLUSION: f64 = 1e-6;
const SLOPE_H: f64 = 1e-7;

fn near_breakpoint(kind: PeriodicKind, angle: f64) -> bool {
    use std::f64::consts::TAU;
    let w = angle.rem_euclid(TAU);
    kind.breakpoints().iter().any(|&b| {
        let d = (w - b).abs();
        d.min(TAU - d) < SLOPE_EXCLUSION
    })
}

/// Sample slopes of φ on `grid_points` equally spaced angles over `[0, 2π)`
/// (offset slightly so lattice points do not coincide with breakpoints of
/// the square wave at 0).
pub fn slope_profile(kind: PeriodicKind, grid_points: usize) -> Result<SlopeProfile> {
    if grid_points == 0 {
        return Err(Error::config("grid_points must be positive"));
    }
    use std::f64::consts::TAU;
    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for i in 0..grid_points {
        let angle = (i as f64 + 0.5) * TAU / grid_points as f64;
        if near_breakpoint(kind, angle) {
            skipped += 1;
            continue;
        }
        let above = phi(kind, Angle::new(angle + SLOPE_H)?);
        let below = phi(kind, Angle::new(angle - SLOPE_H)?);
        entries.push((angle, (above - below) / (2.0 * SLOPE_H)));
    }
    Ok(SlopeProfile {
        kind,
        entries,
        skipped,
    })
}
