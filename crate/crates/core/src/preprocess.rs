//! Turning raw series into model inputs: windowing to the context length,
//! the prediction/missing/padding masks, contiguous patch masking, and the
//! reversible mask-aware asinh normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

/// Block placements tried before falling back to merging blocks.
const MAX_REJECTIONS: usize = 1000;

/// The three component masks over a context window plus their union.
/// `true` means masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub pred: Vec<bool>,
    pub miss: Vec<bool>,
    pub pad: Vec<bool>,
    pub union: Vec<bool>,
}

impl MaskSet {
    pub fn new(pred: Vec<bool>, miss: Vec<bool>, pad: Vec<bool>) -> Result<Self> {
        if pred.len() != miss.len() || pred.len() != pad.len() {
            return Err(Error::Shape(format!(
                "mask lengths differ: pred {}, miss {}, pad {}",
                pred.len(),
                miss.len(),
                pad.len()
            )));
        }
        if let Some(t) = (0..pred.len()).find(|&t| pred[t] && pad[t]) {
            return Err(Error::Mask(format!("prediction mask overlaps padding at {t}")));
        }
        let union = (0..pred.len()).map(|t| pred[t] || miss[t] || pad[t]).collect();
        Ok(Self {
            pred,
            miss,
            pad,
            union,
        })
    }

    pub fn len(&self) -> usize {
        self.union.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union.is_empty()
    }

    /// Positions that count towards the loss: predicted, observed, not padding.
    pub fn loss_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&t| self.pred[t] && !self.miss[t] && !self.pad[t])
    }

    pub fn visible_count(&self) -> usize {
        self.union.iter().filter(|m| !**m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn sigma_floor(mu: f64) -> f64 {
        1e-6 * mu.abs().max(1.0)
    }
}

/// A series aligned to the context length.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Original-scale values; 0 at padded and missing positions.
    pub values: Vec<f64>,
    pub pad: Vec<bool>,
    pub miss: Vec<bool>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the first non-padded position (`len()` if all padding).
    pub fn observed_start(&self) -> usize {
        self.pad.iter().position(|p| !p).unwrap_or(self.pad.len())
    }
}

/// A fully preprocessed training or inference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// asinh-normalized values, zero at every masked position.
    pub x_norm: Vec<f64>,
    pub masks: MaskSet,
    pub stats: NormStats,
    /// Original-scale values (0 at padded/missing positions). Entries under
    /// the prediction mask are the targets.
    pub values: Vec<f64>,
}

impl WindowedSample {
    pub fn len(&self) -> usize {
        self.x_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_norm.is_empty()
    }

    /// Targets mapped into normalized space, for the training loss.
    pub fn targets_norm(&self) -> Vec<f64> {
        normalize_asinh(&self.values, &self.stats)
    }
}

/// Left-pads or keeps the most recent `t` observations.
pub fn pad_or_truncate(s: &TimeSeries, t: usize) -> Result<Window> {
    if s.values.is_empty() {
        return Err(Error::Data(format!("series `{}` is empty", s.id)));
    }
    if t == 0 {
        return Err(Error::config("context_length", "must be positive"));
    }
    let n = s.values.len();
    let (pad_len, src) = if n >= t {
        (0, &s.values[n - t..])
    } else {
        (t - n, &s.values[..])
    };
    let mut values = vec![0.0; t];
    let mut pad = vec![false; t];
    let mut miss = vec![false; t];
    pad[..pad_len].fill(true);
    for (i, v) in src.iter().enumerate() {
        match v {
            Some(x) => values[pad_len + i] = *x,
            None => miss[pad_len + i] = true,
        }
    }
    Ok(Window { values, pad, miss })
}

/// Block count for contiguous patch masking, shrunk for short series so a
/// single block cannot swallow the whole history.
pub fn adaptive_cpm_block(t_x: usize, patch_size: usize, n_cpm: usize) -> usize {
    let patches = t_x.div_ceil(patch_size);
    patches.div_ceil(4).min(n_cpm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpmMask {
    pub pred: Vec<bool>,
    /// Set when the requested ratio could not be reached with separated
    /// blocks, or the observed region was shorter than one block.
    pub warning: Option<String>,
}

/// Samples the prediction mask: a random tail of `0..=4·n_cpm_eff`
/// timestamps, then blocks of `n_cpm_eff·L` observations at patch-aligned
/// starts inside `[observed_start, t)` until the masked fraction of that
/// region reaches `ratio`.
///
/// Blocks never touch each other or the tail, so every masked run that does
/// not reach the end of the window is exactly one block long. After
/// `MAX_REJECTIONS` failed placements in a row, blocks may merge.
pub fn sample_cpm_mask<R: Rng + ?Sized>(
    rng: &mut R,
    t: usize,
    patch_size: usize,
    n_cpm_eff: usize,
    ratio: f64,
    observed_start: usize,
) -> Result<CpmMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("mask_ratio", format!("{ratio} not in (0, 1)")));
    }
    if patch_size == 0 || n_cpm_eff == 0 {
        return Err(Error::config("n_cpm", "block size must be positive"));
    }
    if observed_start >= t {
        return Err(Error::Data("no observed positions to mask".into()));
    }
    let t_valid = t - observed_start;
    let block = n_cpm_eff * patch_size;
    let mut pred = vec![false; t];
    let reached = |masked: usize| masked as f64 >= ratio * t_valid as f64;

    if t_valid < block {
        let k = ((ratio * t_valid as f64).ceil() as usize).clamp(1, t_valid);
        pred[t - k..].fill(true);
        return Ok(CpmMask {
            pred,
            warning: Some(format!(
                "observed region of {t_valid} is shorter than one block of {block}; masked the last {k}"
            )),
        });
    }

    let tail = rng.gen_range(0..=4 * n_cpm_eff).min(t_valid);
    pred[t - tail..].fill(true);
    let mut masked = tail;

    let first = observed_start.div_ceil(patch_size) * patch_size;
    let starts: Vec<usize> = (first..t).step_by(patch_size).collect();
    let mut rejections = 0;
    let mut warning = None;
    while !reached(masked) {
        if rejections < MAX_REJECTIONS {
            let s = starts[rng.gen_range(0..starts.len())];
            let end = (s + block).min(t);
            let lo = if s > observed_start { s - 1 } else { s };
            let hi = (end + 1).min(t);
            if pred[lo..hi].iter().any(|m| *m) {
                rejections += 1;
                continue;
            }
            pred[s..end].fill(true);
            masked += end - s;
            rejections = 0;
        } else {
            // The partial patch holding `observed_start` is only reachable
            // here, clipped to the observed region like the tail.
            let lead = (observed_start / patch_size * patch_size < first)
                .then_some(observed_start / patch_size * patch_size);
            let open: Vec<(usize, usize)> = lead
                .into_iter()
                .chain(starts.iter().copied())
                .map(|s| (s.max(observed_start), (s + block).min(t)))
                .filter(|&(a, b)| pred[a..b].iter().any(|m| !*m))
                .collect();
            if open.is_empty() {
                warning = Some(format!(
                    "mask ratio {ratio} unreachable over {t_valid} observations; stopped at {masked}"
                ));
                break;
            }
            if warning.is_none() {
                warning = Some("separated block placement jammed; merging blocks".into());
            }
            let (s, end) = open[rng.gen_range(0..open.len())];
            masked += pred[s..end].iter().filter(|m| !**m).count();
            pred[s..end].fill(true);
        }
    }
    Ok(CpmMask { pred, warning })
}

/// Mean and population standard deviation over visible positions only.
pub fn mask_aware_stats(values: &[f64], union: &[bool]) -> Result<NormStats> {
    if values.len() != union.len() {
        return Err(Error::Shape(format!(
            "{} values but {} mask entries",
            values.len(),
            union.len()
        )));
    }
    let visible = || values.iter().zip(union).filter(|(_, m)| !**m).map(|(v, _)| *v);
    let n = visible().count();
    if n < 2 {
        return Err(Error::Data(format!("{n} visible points; need at least 2")));
    }
    let mu = visible().sum::<f64>() / n as f64;
    let var = visible().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt().max(NormStats::sigma_floor(mu));
    Ok(NormStats { mu, sigma })
}

pub fn normalize_asinh(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values
        .iter()
        .map(|v| ((v - stats.mu) / stats.sigma).asinh())
        .collect()
}

/// Inverse of [`normalize_asinh`], applied elementwise to any layout.
pub fn denormalize(q_norm: &[f64], stats: &NormStats) -> Vec<f64> {
    q_norm
        .iter()
        .map(|q| q.sinh() * stats.sigma + stats.mu)
        .collect()
}

/// Builds the model-ready sample for a window and its prediction mask.
pub fn build_sample(window: Window, pred: Vec<bool>) -> Result<WindowedSample> {
    let masks = MaskSet::new(pred, window.miss, window.pad)?;
    let stats = mask_aware_stats(&window.values, &masks.union)?;
    let mut x_norm = normalize_asinh(&window.values, &stats);
    for (x, m) in x_norm.iter_mut().zip(&masks.union) {
        if *m {
            *x = 0.0;
        }
    }
    Ok(WindowedSample {
        x_norm,
        masks,
        stats,
        values: window.values,
    })
}

/// Non-overlapping patches of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub n_patches: usize,
    pub patch_size: usize,
    /// Row-major `[N × L]` normalized values.
    pub values: Vec<f64>,
    /// Row-major `[N × L]` union mask.
    pub mask: Vec<bool>,
    /// Patch consists entirely of padding and is hidden from attention.
    pub pad_patch: Vec<bool>,
}

pub fn patchify(x_norm: &[f64], masks: &MaskSet, patch_size: usize) -> Result<Patches> {
    let t = x_norm.len();
    if patch_size == 0 || t % patch_size != 0 {
        return Err(Error::Shape(format!(
            "context length {t} is not divisible by patch size {patch_size}"
        )));
    }
    if masks.len() != t {
        return Err(Error::Shape(format!("{} mask entries for {t} values", masks.len())));
    }
    let n = t / patch_size;
    let pad_patch = (0..n)
        .map(|i| masks.pad[i * patch_size..(i + 1) * patch_size].iter().all(|p| *p))
        .collect();
    Ok(Patches {
        n_patches: n,
        patch_size,
        values: x_norm.to_vec(),
        mask: masks.union.clone(),
        pad_patch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn series(values: &[Option<f64>]) -> TimeSeries {
        TimeSeries::new("s", "H", crate::series::DEFAULT_START, values.to_vec())
    }

    #[test]
    fn short_series_is_left_padded() {
        let s = series(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0), Some(5.0)]);
        let w = pad_or_truncate(&s, 8).unwrap();
        assert_eq!(w.pad, vec![true, true, true, false, false, false, false, false]);
        assert_eq!(w.values, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(w.observed_start(), 3);
    }

    #[test]
    fn long_series_keeps_most_recent() {
        let vals: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64)).collect();
        let w = pad_or_truncate(&series(&vals), 8).unwrap();
        assert_eq!(w.values, (2..10).map(|i| i as f64).collect::<Vec<_>>());
        assert!(w.pad.iter().all(|p| !p));
    }

    #[test]
    fn missing_value_flagged_at_aligned_position() {
        let w = pad_or_truncate(&series(&[Some(1.0), Some(2.0), None, Some(4.0)]), 8).unwrap();
        let flagged: Vec<usize> = (0..8).filter(|&i| w.miss[i]).collect();
        assert_eq!(flagged, vec![6]);
    }

    #[test]
    fn empty_series_is_data_error() {
        assert!(matches!(pad_or_truncate(&series(&[]), 8), Err(Error::Data(_))));
    }

    #[test]
    fn adaptive_block_formula() {
        assert_eq!(adaptive_cpm_block(40, 16, 8), 1);
        assert_eq!(adaptive_cpm_block(8192, 16, 8), 8);
        assert_eq!(adaptive_cpm_block(256, 16, 8), 4);
        assert_eq!(adaptive_cpm_block(1, 16, 8), 1);
    }

    #[test]
    fn single_patch_blocks_when_block_count_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_cpm_mask(&mut rng, 512, 16, 1, 0.3, 0).unwrap();
        let runs = masked_runs(&m.pred);
        for &(s, len) in &runs {
            if s + len < 512 {
                assert_eq!(len, 16);
                assert_eq!(s % 16, 0);
            }
        }
    }

    fn masked_runs(pred: &[bool]) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut t = 0;
        while t < pred.len() {
            if pred[t] {
                let s = t;
                while t < pred.len() && pred[t] {
                    t += 1;
                }
                runs.push((s, t - s));
            } else {
                t += 1;
            }
        }
        runs
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_cpm_mask(&mut ChaCha8Rng::seed_from_u64(9), 1024, 16, 4, 0.4, 100).unwrap();
        let b = sample_cpm_mask(&mut ChaCha8Rng::seed_from_u64(9), 1024, 16, 4, 0.4, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn region_shorter_than_block_degrades_to_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_cpm_mask(&mut rng, 64, 16, 2, 0.4, 54).unwrap();
        assert!(m.warning.is_some());
        let idx: Vec<usize> = (0..64).filter(|&t| m.pred[t]).collect();
        assert_eq!(idx, (60..64).collect::<Vec<_>>());
    }

    #[test]
    fn bad_ratio_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_cpm_mask(&mut rng, 64, 16, 1, 1.0, 0).is_err());
        assert!(sample_cpm_mask(&mut rng, 64, 16, 1, 0.0, 0).is_err());
    }

    #[test]
    fn stats_from_visible_points() {
        let s = mask_aware_stats(&[1.0, 2.0, 3.0, 100.0], &[false, false, false, true]).unwrap();
        assert_eq!(s.mu, 2.0);
        assert!((s.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.sigma - 0.81650).abs() < 1e-5);
    }

    #[test]
    fn constant_series_hits_sigma_floor() {
        let s = mask_aware_stats(&[4.0; 6], &[false; 6]).unwrap();
        assert_eq!(s.mu, 4.0);
        assert_eq!(s.sigma, 4e-6);
    }

    #[test]
    fn masked_values_do_not_move_stats() {
        let mask = [false, true, false, false, true];
        let a = mask_aware_stats(&[1.0, 2.0, 3.0, 5.0, 8.0], &mask).unwrap();
        let b = mask_aware_stats(&[1.0, 2.0 + 1e6, 3.0, 5.0, 8.0 - 1e6], &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_visible_points() {
        assert!(matches!(
            mask_aware_stats(&[1.0, 2.0], &[false, true]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mu: 3.0, sigma: 2.0 };
        let x = normalize_asinh(&[3.0, 3.0 + 2.0 * 1f64.sinh()], &stats);
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn denormalize_examples() {
        let stats = NormStats { mu: 10.0, sigma: 2.0 };
        let y = denormalize(&[0.0, 1.0], &stats);
        assert_eq!(y[0], 10.0);
        assert!((y[1] - 12.3504).abs() < 1e-4);
        let xs = [-50.0, 0.3, 7.0, 1234.5];
        let back = denormalize(&normalize_asinh(&xs, &stats), &stats);
        for (a, b) in xs.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn patchify_examples() {
        let pad_masks = |n_pad: usize| {
            let pad: Vec<bool> = (0..32).map(|t| t < n_pad).collect();
            MaskSet::new(vec![false; 32], vec![false; 32], pad).unwrap()
        };
        let p = patchify(&[0.0; 32], &pad_masks(3), 16).unwrap();
        assert_eq!(p.n_patches, 2);
        assert_eq!(p.pad_patch, vec![false, false]);
        let p = patchify(&[0.0; 32], &pad_masks(16), 16).unwrap();
        assert_eq!(p.pad_patch, vec![true, false]);
        assert!(matches!(
            patchify(&[0.0; 30], &pad_masks(0), 16),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pred_on_padding_rejected() {
        assert!(MaskSet::new(vec![true, false], vec![false; 2], vec![true, false]).is_err());
    }
}
