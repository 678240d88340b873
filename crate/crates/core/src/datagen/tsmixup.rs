//! Convex mixtures of standardized windows from real series.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsMixupConfig {
    pub max_sources: usize,
    /// Symmetric Dirichlet concentration of the mixing weights.
    pub alpha: f64,
}

impl Default for TsMixupConfig {
    fn default() -> Self {
        Self {
            max_sources: 3,
            alpha: 1.5,
        }
    }
}

/// The number of sources and their mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupSpec {
    pub weights: Vec<f64>,
    pub sources: Vec<String>,
}

/// A point on the simplex drawn from a symmetric Dirichlet via normalized
/// Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Gen(format!("dirichlet alpha {alpha}: {e}")))?;
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 {
            return Ok(g.into_iter().map(|x| x / s).collect());
        }
    }
}

/// Standardizes observed values to zero mean and unit population variance;
/// constant windows become zeros.
pub fn standardize(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let obs: Vec<f64> = values.iter().flatten().copied().collect();
    if obs.is_empty() {
        return values.to_vec();
    }
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let sd = (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values
        .iter()
        .map(|v| v.map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }))
        .collect()
}

/// Mixes `k ∈ 1..=max_sources` random windows from `pool`. Sources whose id
/// (or any provenance id) is in `exclude` are never used. A position is
/// missing in the output when it is missing in any source.
pub fn tsmixup_generate<R: Rng + ?Sized>(
    rng: &mut R,
    id: impl Into<String>,
    pool: &[TimeSeries],
    length: usize,
    exclude: Option<&HashSet<String>>,
    cfg: &TsMixupConfig,
) -> Result<TimeSeries> {
    let allowed: Vec<&TimeSeries> = pool
        .iter()
        .filter(|s| s.observed_count() >= 2)
        .filter(|s| match exclude {
            Some(ex) => !ex.contains(&s.id) && !s.provenance.iter().any(|p| ex.contains(p)),
            None => true,
        })
        .collect();
    if allowed.is_empty() {
        return Err(Error::Data("mixup pool has no usable series".into()));
    }
    if length < 2 {
        return Err(Error::Gen(format!("length {length} is below 2")));
    }
    let k = rng.gen_range(1..=cfg.max_sources.max(1));
    let picks: Vec<&TimeSeries> = (0..k).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect();
    let weights = dirichlet(rng, k, cfg.alpha)?;
    let w_len = picks.iter().map(|s| s.len()).min().unwrap_or(0).min(length);
    let windows: Vec<Vec<Option<f64>>> = picks
        .iter()
        .map(|s| {
            let start = rng.gen_range(0..=s.len() - w_len);
            standardize(&s.values[start..start + w_len])
        })
        .collect();
    let values = (0..w_len)
        .map(|t| {
            windows
                .iter()
                .zip(&weights)
                .try_fold(0.0, |acc, (w, a)| w[t].map(|x| acc + a * x))
        })
        .collect();
    let mut provenance: Vec<String> = Vec::new();
    for s in &picks {
        let ids = if s.provenance.is_empty() {
            std::slice::from_ref(&s.id)
        } else {
            &s.provenance[..]
        };
        for p in ids {
            if !provenance.contains(p) {
                provenance.push(p.clone());
            }
        }
    }
    let first = picks[0];
    let mut out = TimeSeries::new(id, first.freq.clone(), first.start.clone(), values);
    out.provenance = provenance;
    Ok(out)
}
