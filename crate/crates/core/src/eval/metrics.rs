//! Point and probabilistic forecast scores, and the naive baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Repeats the last season of `context` over `h` steps.
pub fn seasonal_naive(context: &[f64], s: usize, h: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::config("seasonality", "must be at least 1"));
    }
    if context.len() < s {
        return Err(Error::Data(format!(
            "context of {} is shorter than the season {s}",
            context.len()
        )));
    }
    let season = &context[context.len() - s..];
    Ok((0..h).map(|i| season[i % s]).collect())
}

/// Repeats the last value.
pub fn naive(context: &[f64], h: usize) -> Result<Vec<f64>> {
    seasonal_naive(context, 1, h)
}

/// How the MASE denominator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaseVariant {
    /// Mean absolute lag-1 difference of the target window itself.
    #[default]
    TargetDiff,
    /// Mean absolute seasonal difference over the in-sample context.
    SeasonalInsample,
}

impl std::str::FromStr for MaseVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-diff" => Ok(Self::TargetDiff),
            "seasonal-insample" => Ok(Self::SeasonalInsample),
            other => Err(Error::config(
                "mase_variant",
                format!("`{other}` is not one of target-diff, seasonal-insample"),
            )),
        }
    }
}

fn mean_abs_error(median: &[f64], target: &[f64]) -> f64 {
    median.iter().zip(target).map(|(q, x)| (x - q).abs()).sum::<f64>() / target.len() as f64
}

fn scaled(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Mean absolute error of the median, scaled by the mean absolute lag-1
/// difference of the target. A constant target scores `+∞`.
pub fn mase(median: &[f64], target: &[f64]) -> Result<f64> {
    let h = target.len();
    if median.len() != h {
        return Err(Error::Shape(format!("{} forecasts for {h} targets", median.len())));
    }
    if h < 2 {
        return Err(Error::Data("MASE needs a horizon of at least 2".into()));
    }
    let den = target.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (h - 1) as f64;
    Ok(scaled(mean_abs_error(median, target), den))
}

/// MASE with the in-sample seasonal-difference denominator.
pub fn mase_seasonal_insample(median: &[f64], target: &[f64], context: &[f64], s: usize) -> Result<f64> {
    if median.len() != target.len() || target.is_empty() {
        return Err(Error::Shape(format!("{} forecasts for {} targets", median.len(), target.len())));
    }
    let s = if context.len() > s { s } else { 1 };
    if context.len() <= s {
        return Err(Error::Data("context too short for a seasonal scale".into()));
    }
    let n = context.len() - s;
    let den = (s..context.len()).map(|t| (context[t] - context[t - s]).abs()).sum::<f64>() / n as f64;
    Ok(scaled(mean_abs_error(median, target), den))
}

/// Weighted quantile loss at one level, with the strict indicator `x < q`.
pub fn wql(q: &[f64], target: &[f64], tau: f64) -> Result<f64> {
    if q.len() != target.len() {
        return Err(Error::Shape(format!("{} forecasts for {} targets", q.len(), target.len())));
    }
    let scale: f64 = target.iter().map(|x| x.abs()).sum();
    if scale == 0.0 {
        return Err(Error::Data("weighted quantile loss is undefined for an all-zero target".into()));
    }
    let num: f64 = q
        .iter()
        .zip(target)
        .map(|(q, x)| (tau - if x < q { 1.0 } else { 0.0 }) * (x - q))
        .sum();
    Ok(2.0 * num / scale)
}

/// `[H × K]` quantile forecast in original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    /// Row-major `[H × K]`.
    pub values: Vec<f64>,
}

impl QuantileForecast {
    /// Every level set to the same point forecast.
    pub fn degenerate(point: &[f64], levels: &[f64]) -> Self {
        let values = point.iter().flat_map(|p| std::iter::repeat(*p).take(levels.len())).collect();
        Self {
            levels: levels.to_vec(),
            values,
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len() / self.levels.len().max(1)
    }

    pub fn level_index(&self, tau: f64) -> Option<usize> {
        self.levels.iter().position(|l| (l - tau).abs() < 1e-9)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.levels.len()).copied().collect()
    }

    /// The 0.5 column, or the average of the two levels around it.
    pub fn median(&self) -> Vec<f64> {
        if let Some(k) = self.level_index(0.5) {
            return self.column(k);
        }
        let k = self.levels.partition_point(|l| *l < 0.5).clamp(1, self.levels.len().max(2) - 1);
        let (a, b) = (self.column(k - 1), self.column(k.min(self.levels.len() - 1)));
        a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
    }

    /// Keeps only `levels`, in the given order.
    pub fn select(&self, levels: &[f64]) -> Result<Self> {
        let idx: Vec<usize> = levels
            .iter()
            .map(|&l| {
                self.level_index(l)
                    .ok_or_else(|| Error::config("levels", format!("level {l} is not forecast")))
            })
            .collect::<Result<_>>()?;
        let h = self.horizon();
        let k = self.levels.len();
        let values = (0..h).flat_map(|t| idx.iter().map(move |&i| (t, i))).map(|(t, i)| self.values[t * k + i]).collect();
        Ok(Self {
            levels: levels.to_vec(),
            values,
        })
    }
}

/// Mean of [`wql`] over `eval_levels`, each of which must be forecast.
pub fn crps(forecast: &QuantileForecast, target: &[f64], eval_levels: &[f64]) -> Result<f64> {
    if eval_levels.is_empty() {
        return Err(Error::config("levels", "no evaluation levels"));
    }
    if forecast.horizon() != target.len() {
        return Err(Error::Shape(format!(
            "forecast horizon {} for {} targets",
            forecast.horizon(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for &tau in eval_levels {
        let k = forecast
            .level_index(tau)
            .ok_or_else(|| Error::config("levels", format!("evaluation level {tau} is not forecast")))?;
        total += wql(&forecast.column(k), target, tau)?;
    }
    Ok(total / eval_levels.len() as f64)
}
