//! Noisy sums of sinusoids with daily-style periods.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineConfig {
    /// Base period; harmonics at `period / h` are mixed in.
    pub period: usize,
    pub max_harmonics: usize,
    /// Noise standard deviation relative to the first amplitude.
    pub noise: f64,
}

impl Default for SineConfig {
    fn default() -> Self {
        Self {
            period: 24,
            max_harmonics: 3,
            noise: 0.1,
        }
    }
}

/// `level + trend + Σ_h a_h sin(2π h t / period + φ_h) + noise`.
pub fn sine_generate<R: Rng + ?Sized>(
    rng: &mut R,
    id: impl Into<String>,
    length: usize,
    cfg: &SineConfig,
) -> Result<TimeSeries> {
    if length < 2 {
        return Err(Error::Gen(format!("length {length} is below 2")));
    }
    if cfg.period == 0 || cfg.max_harmonics == 0 {
        return Err(Error::Gen("sine period and harmonic count must be positive".into()));
    }
    let amp = rng.gen_range(0.5..=5.0);
    let level = rng.gen_range(-10.0..=10.0);
    let slope = rng.gen_range(-1.0..=1.0) * amp / length as f64;
    let harmonics: Vec<(f64, f64, f64)> = (1..=rng.gen_range(1..=cfg.max_harmonics))
        .map(|h| {
            let a = if h == 1 { amp } else { amp * rng.gen_range(0.0..=0.5) };
            (h as f64, a, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let p = cfg.period as f64;
    let values: Vec<f64> = (0..length)
        .map(|t| {
            let t = t as f64;
            let s: f64 = harmonics.iter().map(|(h, a, ph)| a * (2.0 * PI * h * t / p + ph).sin()).sum();
            let e: f64 = StandardNormal.sample(rng);
            level + slope * t + s + cfg.noise * amp * e
        })
        .collect();
    Ok(TimeSeries::from_values(id, &values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_single_harmonic_is_periodic() {
        let cfg = SineConfig {
            max_harmonics: 1,
            noise: 0.0,
            ..SineConfig::default()
        };
        let s = sine_generate(&mut ChaCha8Rng::seed_from_u64(2), "s", 240, &cfg).unwrap();
        let v: Vec<f64> = s.values.iter().map(|x| x.unwrap()).collect();
        // Only the linear trend separates a value from the one a period later.
        let d0 = v[24] - v[0];
        for t in 0..200 {
            assert!((v[t + 24] - v[t] - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SineConfig::default();
        let a = sine_generate(&mut ChaCha8Rng::seed_from_u64(4), "x", 100, &cfg).unwrap();
        let b = sine_generate(&mut ChaCha8Rng::seed_from_u64(4), "x", 100, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
