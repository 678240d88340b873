//! Gaussian-process draws from randomly composed kernels.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

/// Base periods in time steps; each is used as-is when it fits twice into
/// the series, otherwise dropped.
pub const PERIOD_GRID: [usize; 7] = [24, 48, 168, 7, 12, 52, 96];

/// A kernel over integer time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-2 sin²(π|x-y|/period) / ℓ²)`.
    Periodic { period: f64, lengthscale: f64 },
    /// `exp(-(x-y)² / 2ℓ²)`.
    Rbf { lengthscale: f64 },
    /// `variance · (x/n - c)(y/n - c)` with `n` the series length.
    Linear { variance: f64, offset: f64 },
    /// `variance · 1(x = y)`.
    White { variance: f64 },
    Constant { level: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    /// Covariance between steps `x` and `y` of a series of length `n`.
    pub fn eval(&self, x: f64, y: f64, n: f64) -> f64 {
        match self {
            Kernel::Periodic { period, lengthscale } => {
                let s = (PI * (x - y).abs() / period).sin();
                (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            Kernel::Rbf { lengthscale } => {
                let r = x - y;
                (-r * r / (2.0 * lengthscale * lengthscale)).exp()
            }
            Kernel::Linear { variance, offset } => variance * (x / n - offset) * (y / n - offset),
            Kernel::White { variance } => {
                if x == y {
                    *variance
                } else {
                    0.0
                }
            }
            Kernel::Constant { level } => *level,
            Kernel::Sum(a, b) => a.eval(x, y, n) + b.eval(x, y, n),
            Kernel::Product(a, b) => a.eval(x, y, n) * b.eval(x, y, n),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Kernel::Sum(a, b) | Kernel::Product(a, b) => a.leaves() + b.leaves(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Gen(format!("kernel {name} must be positive, got {v}")))
            }
        };
        match self {
            Kernel::Periodic { period, lengthscale } => {
                positive("period", *period)?;
                positive("lengthscale", *lengthscale)
            }
            Kernel::Rbf { lengthscale } => positive("lengthscale", *lengthscale),
            Kernel::Linear { variance, .. } => positive("variance", *variance),
            Kernel::White { variance } => positive("variance", *variance),
            Kernel::Constant { level } => positive("level", *level),
            Kernel::Sum(a, b) | Kernel::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSynthConfig {
    /// Most kernels composed into one series.
    pub max_kernels: usize,
    /// Probability of each augmentation (scaling, trend, noise).
    pub augment_prob: f64,
    /// Longest grid sampled densely; longer series are interpolated.
    pub max_dense: usize,
    /// Fresh kernels tried after a failed factorization.
    pub max_retries: usize,
}

impl Default for KernelSynthConfig {
    fn default() -> Self {
        Self {
            max_kernels: 5,
            augment_prob: 0.1,
            max_dense: 2048,
            max_retries: 8,
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// One kernel from the bank, with parameters suited to `length`.
pub fn sample_base_kernel<R: Rng + ?Sized>(rng: &mut R, length: usize) -> Kernel {
    let n = length as f64;
    let periods: Vec<usize> = PERIOD_GRID.iter().copied().filter(|p| 2 * p <= length).collect();
    match rng.gen_range(0..5) {
        0 | 1 if !periods.is_empty() => Kernel::Periodic {
            period: periods[rng.gen_range(0..periods.len())] as f64,
            lengthscale: rng.gen_range(0.5..=2.0),
        },
        0 | 1 | 2 => Kernel::Rbf {
            lengthscale: log_uniform(rng, (n / 100.0).max(1.0), (n / 2.0).max(1.0)),
        },
        3 => Kernel::Linear {
            variance: rng.gen_range(0.1..=1.0),
            offset: rng.gen_range(0.0..=1.0),
        },
        _ => {
            if rng.gen_bool(0.5) {
                Kernel::White {
                    variance: rng.gen_range(0.01..=0.1),
                }
            } else {
                Kernel::Constant {
                    level: rng.gen_range(0.1..=1.0),
                }
            }
        }
    }
}

/// Between 1 and `max_kernels` bank kernels folded together with random
/// `+`/`×`.
pub fn sample_kernel<R: Rng + ?Sized>(rng: &mut R, length: usize, max_kernels: usize) -> Kernel {
    let j = rng.gen_range(1..=max_kernels.max(1));
    let mut k = sample_base_kernel(rng, length);
    for _ in 1..j {
        let next = sample_base_kernel(rng, length);
        k = if rng.gen_bool(0.5) {
            Kernel::Sum(Box::new(k), Box::new(next))
        } else {
            Kernel::Product(Box::new(k), Box::new(next))
        };
    }
    k
}

/// In-place lower Cholesky factor of a row-major `n × n` matrix. Returns
/// false when a pivot is not positive.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let (head, rest) = a.split_at_mut(j * n);
        let row_j = &mut rest[..n];
        for i in 0..j {
            let row_i = &head[i * n..i * n + n];
            let dot: f64 = row_i[..i].iter().zip(&row_j[..i]).map(|(x, y)| x * y).sum();
            row_j[i] = (row_j[i] - dot) / row_i[i];
        }
        let d = row_j[j] - row_j[..j].iter().map(|x| x * x).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        row_j[j] = d.sqrt();
        for x in &mut row_j[j + 1..] {
            *x = 0.0;
        }
    }
    true
}

/// Largest diagonal jitter, relative to `trace / n`.
pub const MAX_JITTER: f64 = 1e-4;
const MIN_JITTER: f64 = 1e-12;

/// One zero-mean draw at grid points `xs` (in steps of a length-`n` series).
/// The jitter starts tiny and grows tenfold until the factorization succeeds
/// or passes [`MAX_JITTER`]. Returns the draw and the jitter used.
pub fn gp_draw<R: Rng + ?Sized>(rng: &mut R, kernel: &Kernel, xs: &[f64], n: f64) -> Result<(Vec<f64>, f64)> {
    let m = xs.len();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = kernel.eval(xs[i], xs[j], n);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    let scale = (0..m).map(|i| gram[i * m + i]).sum::<f64>() / m as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Gen(format!("kernel has degenerate diagonal (mean {scale})")));
    }
    let mut rel = MIN_JITTER;
    let mut work = vec![0.0; m * m];
    while rel <= MAX_JITTER * (1.0 + 1e-9) {
        work.copy_from_slice(&gram);
        for i in 0..m {
            work[i * m + i] += rel * scale;
        }
        if cholesky(&mut work, m) {
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let draw = (0..m)
                .map(|i| work[i * m..i * m + i + 1].iter().zip(&z).map(|(l, z)| l * z).sum())
                .collect();
            return Ok((draw, rel * scale));
        }
        rel *= 10.0;
    }
    Err(Error::Gen("covariance is not positive definite at maximum jitter".into()))
}

/// Draws from the process of `kernel` over `length` steps, using at most
/// `max_dense` anchor points and linear interpolation between them.
pub fn sample_gp<R: Rng + ?Sized>(rng: &mut R, kernel: &Kernel, length: usize, max_dense: usize) -> Result<Vec<f64>> {
    if length < 2 {
        return Err(Error::Gen(format!("length {length} is below 2")));
    }
    let n = length as f64;
    if length <= max_dense {
        let xs: Vec<f64> = (0..length).map(|i| i as f64).collect();
        return Ok(gp_draw(rng, kernel, &xs, n)?.0);
    }
    let m = max_dense.max(2);
    let step = (length - 1) as f64 / (m - 1) as f64;
    let xs: Vec<f64> = (0..m).map(|i| i as f64 * step).collect();
    let (anchors, _) = gp_draw(rng, kernel, &xs, n)?;
    Ok((0..length)
        .map(|t| {
            let pos = t as f64 / step;
            let i = (pos.floor() as usize).min(m - 2);
            let w = pos - i as f64;
            anchors[i] * (1.0 - w) + anchors[i + 1] * w
        })
        .collect())
}

fn augment<R: Rng + ?Sized>(rng: &mut R, values: &mut [f64], prob: f64) {
    let n = values.len() as f64;
    if rng.gen_bool(prob) {
        let a = log_uniform(rng, 0.1, 10.0);
        values.iter_mut().for_each(|v| *v *= a);
    }
    if rng.gen_bool(prob) {
        let slope = rng.gen_range(-1.0..=1.0);
        values
            .iter_mut()
            .enumerate()
            .for_each(|(t, v)| *v += slope * t as f64 / n);
    }
    if rng.gen_bool(prob) {
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let noise = 0.1 * sd.max(1e-3);
        values
            .iter_mut()
            .for_each(|v| *v += noise * Distribution::<f64>::sample(&StandardNormal, rng));
    }
}

/// One synthetic series: random kernel, GP draw, light augmentation.
pub fn kernelsynth_generate<R: Rng + ?Sized>(
    rng: &mut R,
    id: impl Into<String>,
    length: usize,
    cfg: &KernelSynthConfig,
) -> Result<TimeSeries> {
    if length < 2 {
        return Err(Error::Gen(format!("length {length} is below 2")));
    }
    let mut last = None;
    for _ in 0..=cfg.max_retries {
        let kernel = sample_kernel(rng, length, cfg.max_kernels);
        match sample_gp(rng, &kernel, length, cfg.max_dense) {
            Ok(mut values) => {
                augment(rng, &mut values, cfg.augment_prob);
                return Ok(TimeSeries::from_values(id, &values));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Gen("no kernel attempts".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / var
    }

    #[test]
    fn periodic_draw_peaks_at_its_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Kernel::Periodic {
            period: 24.0,
            lengthscale: 1.0,
        };
        let x = sample_gp(&mut rng, &k, 480, 2048).unwrap();
        let at = autocorr(&x, 24);
        for lag in 13..=35 {
            if lag != 24 {
                assert!(at > autocorr(&x, lag), "lag {lag}");
            }
        }
    }

    #[test]
    fn constant_kernel_gives_constant_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let (x, jitter) = gp_draw(&mut rng, &Kernel::Constant { level: 1.0 }, &xs, 200.0).unwrap();
        assert!(jitter <= 1e-6);
        // Only the jitter term varies along the series.
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 12.0 * jitter.sqrt(), "spread {spread}");
    }

    #[test]
    fn jitter_stays_bounded_and_draws_are_finite() {
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = sample_kernel(&mut rng, 256, 5);
            let xs: Vec<f64> = (0..256).map(|i| i as f64).collect();
            if let Ok((draw, jitter)) = gp_draw(&mut rng, &k, &xs, 256.0) {
                let trace: f64 = xs.iter().map(|&x| k.eval(x, x, 256.0)).sum();
                assert!(jitter <= MAX_JITTER * trace / 256.0 * (1.0 + 1e-9));
                assert!(draw.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn same_seed_same_series() {
        let cfg = KernelSynthConfig::default();
        let a = kernelsynth_generate(&mut ChaCha8Rng::seed_from_u64(9), "a", 300, &cfg).unwrap();
        let b = kernelsynth_generate(&mut ChaCha8Rng::seed_from_u64(9), "a", 300, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn long_series_use_interpolated_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Kernel::Rbf { lengthscale: 50.0 };
        let x = sample_gp(&mut rng, &k, 5000, 256).unwrap();
        assert_eq!(x.len(), 5000);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cholesky_matches_hand_factor() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        assert!(cholesky(&mut a, 2));
        assert_eq!(a, vec![2.0, 0.0, 1.0, 2.0f64.sqrt()]);
        let mut bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky(&mut bad, 2));
    }
}
