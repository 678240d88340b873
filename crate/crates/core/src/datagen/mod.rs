//! Synthetic pretraining data and the training-window sampler.

pub mod kernelsynth;
pub mod sine;
pub mod tsmixup;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::{adaptive_cpm_block, build_sample, pad_or_truncate, sample_cpm_mask, WindowedSample};
use crate::series::TimeSeries;
use crate::train::trainer::{step_rng, SampleSource, WindowSpec};

pub use kernelsynth::{kernelsynth_generate, Kernel, KernelSynthConfig};
pub use sine::{sine_generate, SineConfig};
pub use tsmixup::{tsmixup_generate, TsMixupConfig};

/// Mask draws attempted before giving up on a window.
const MASK_ATTEMPTS: usize = 32;

/// Cuts a random window from `s`, masks it and normalizes it.
///
/// Series longer than the context use a window ending at a uniformly random
/// position; shorter series are taken whole and left-padded.
pub fn sample_training_window<R: Rng + ?Sized>(rng: &mut R, s: &TimeSeries, spec: &WindowSpec) -> Result<WindowedSample> {
    if s.observed_count() < 2 {
        return Err(Error::Data(format!("series `{}` has fewer than 2 observations", s.id)));
    }
    let t = spec.context_length;
    let end = if s.len() > t { rng.gen_range(t..=s.len()) } else { s.len() };
    let start = end.saturating_sub(t);
    let cut = TimeSeries {
        values: s.values[start..end].to_vec(),
        ..TimeSeries::new(s.id.clone(), s.freq.clone(), s.start.clone(), Vec::new())
    };
    let window = pad_or_truncate(&cut, t)?;
    let obs = window.observed_start();
    let n_eff = adaptive_cpm_block(t - obs, spec.patch_size, spec.n_cpm).max(1);
    let mut last = None;
    for _ in 0..MASK_ATTEMPTS {
        let mask = sample_cpm_mask(rng, t, spec.patch_size, n_eff, spec.mask_ratio, obs)?;
        match build_sample(window.clone(), mask.pred) {
            Ok(sample) if sample.masks.loss_positions().next().is_some() => return Ok(sample),
            Ok(_) => last = Some(Error::Data(format!("series `{}`: every masked position is missing", s.id))),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Named pool of series drawn with a relative weight.
#[derive(Debug, Clone)]
pub struct Component {
    pub name: String,
    pub weight: f64,
    pub series: Vec<TimeSeries>,
}

/// Weighted mixture of series pools; each draw picks a pool by weight, a
/// series uniformly within it, then a window.
#[derive(Debug, Clone)]
pub struct DataMixture {
    components: Vec<Component>,
    index: WeightedIndex<f64>,
}

impl DataMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let components: Vec<Component> = components
            .into_iter()
            .map(|mut c| {
                c.series.retain(|s| s.observed_count() >= 2);
                c
            })
            .filter(|c| !c.series.is_empty() && c.weight > 0.0)
            .collect();
        if components.is_empty() {
            return Err(Error::Data("no data source has a usable series".into()));
        }
        let index = WeightedIndex::new(components.iter().map(|c| c.weight))
            .map_err(|e| Error::config("data.sources.weight", e.to_string()))?;
        Ok(Self { components, index })
    }

    /// All pools weighted equally.
    pub fn uniform(pools: Vec<(String, Vec<TimeSeries>)>) -> Result<Self> {
        Self::new(
            pools
                .into_iter()
                .map(|(name, series)| Component {
                    name,
                    weight: 1.0,
                    series,
                })
                .collect(),
        )
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }
}

impl SampleSource for DataMixture {
    fn draw(&self, rng: &mut ChaCha8Rng, spec: &WindowSpec) -> Result<WindowedSample> {
        let c = &self.components[self.index.sample(rng)];
        let s = &c.series[rng.gen_range(0..c.series.len())];
        sample_training_window(rng, s, spec)
    }
}

/// Generates `num` series in parallel; series `i` uses its own stream of
/// `seed`, so the output does not depend on scheduling.
pub fn generate_indexed<F>(seed: u64, num: usize, f: F) -> Result<Vec<TimeSeries>>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<TimeSeries> + Sync,
{
    (0..num)
        .into_par_iter()
        .map(|i| f(&mut step_rng(seed, i as u64), i))
        .collect()
}
