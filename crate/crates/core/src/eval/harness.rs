//! Rolling-window evaluation of forecasters over a set of cases.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::aggregate::{aggregate, EvalReport, Exclusion, Scores, NAIVE, SEASONAL_NAIVE};
use crate::eval::metrics::{crps, mase, mase_seasonal_insample, naive, seasonal_naive, MaseVariant, QuantileForecast};
use crate::model::{forward_batch, sort_quantile_rows, ModelConfig, ModelWeights};
use crate::preprocess::{build_sample, denormalize, pad_or_truncate, WindowedSample};
use crate::series::TimeSeries;

/// Samples per forward pass when forecasting many series.
const FORECAST_BATCH: usize = 32;

/// One series scored on `windows` non-overlapping tail windows of `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub id: String,
    pub series: TimeSeries,
    pub seasonality: usize,
    pub horizon: usize,
    pub windows: usize,
}

impl EvalCase {
    /// `(context end, target end)` for each window, oldest first.
    pub fn splits(&self) -> Result<Vec<(usize, usize)>> {
        if self.horizon == 0 || self.seasonality == 0 || self.windows == 0 {
            return Err(Error::config("eval", "horizon, seasonality and windows must be positive"));
        }
        let n = self.series.len();
        let need = self.horizon * self.windows;
        if n <= need {
            return Err(Error::Data(format!(
                "series `{}` of length {n} cannot hold {} windows of {}",
                self.id, self.windows, self.horizon
            )));
        }
        Ok((0..self.windows)
            .rev()
            .map(|w| {
                let end = n - w * self.horizon;
                (end - self.horizon, end)
            })
            .collect())
    }
}

pub fn cases_from_series(series: &[TimeSeries], seasonality: usize, horizon: usize, windows: usize) -> Vec<EvalCase> {
    series
        .iter()
        .map(|s| EvalCase {
            id: s.id.clone(),
            series: s.clone(),
            seasonality,
            horizon,
            windows,
        })
        .collect()
}

/// Produces quantile forecasts from a context.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;

    /// `seasonality` is the case's season length; methods may ignore it.
    fn forecast(&self, context: &[Option<f64>], horizon: usize, seasonality: usize, levels: &[f64]) -> Result<QuantileForecast>;

    fn forecast_many(
        &self,
        contexts: &[&[Option<f64>]],
        horizon: usize,
        seasonality: usize,
        levels: &[f64],
    ) -> Result<Vec<QuantileForecast>> {
        contexts.iter().map(|c| self.forecast(c, horizon, seasonality, levels)).collect()
    }
}

/// Observed values with gaps filled by the previous observation (leading
/// gaps by the first one).
pub fn fill_missing(context: &[Option<f64>]) -> Result<Vec<f64>> {
    let first = context
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::Data("context has no observations".into()))?;
    let mut last = first;
    Ok(context
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            last
        })
        .collect())
}

/// Repeats the last season of the context.
#[derive(Debug, Clone)]
pub struct SeasonalNaive;

impl Forecaster for SeasonalNaive {
    fn name(&self) -> &str {
        SEASONAL_NAIVE
    }

    fn forecast(&self, context: &[Option<f64>], horizon: usize, seasonality: usize, levels: &[f64]) -> Result<QuantileForecast> {
        let ctx = fill_missing(context)?;
        let point = seasonal_naive(&ctx, seasonality, horizon)?;
        Ok(QuantileForecast::degenerate(&point, levels))
    }
}

#[derive(Debug, Clone)]
pub struct Naive;

impl Forecaster for Naive {
    fn name(&self) -> &str {
        NAIVE
    }

    fn forecast(&self, context: &[Option<f64>], horizon: usize, _seasonality: usize, levels: &[f64]) -> Result<QuantileForecast> {
        let ctx = fill_missing(context)?;
        Ok(QuantileForecast::degenerate(&naive(&ctx, horizon)?, levels))
    }
}

/// Single-pass model forecasts: the horizon is appended to the context as
/// the prediction mask and read off one forward pass.
#[derive(Debug, Clone)]
pub struct ModelForecaster<'a> {
    pub name: String,
    pub weights: &'a ModelWeights,
    pub config: &'a ModelConfig,
    /// Sort each quantile row to remove crossings.
    pub sort: bool,
}

/// Builds the inference sample: the last `T - horizon` context values
/// followed by `horizon` prediction slots.
pub fn inference_sample(context: &[Option<f64>], horizon: usize, cfg: &ModelConfig) -> Result<WindowedSample> {
    let t = cfg.context_length;
    let max = t.saturating_sub(cfg.patch_size);
    if horizon == 0 || horizon > max {
        return Err(Error::config(
            "horizon",
            format!("{horizon} is outside 1..={max} (context length minus patch size)"),
        ));
    }
    let mut values: Vec<Option<f64>> = context.to_vec();
    values.extend(std::iter::repeat(Some(0.0)).take(horizon));
    let window = pad_or_truncate(&TimeSeries::new("", "", "", values), t)?;
    let mut pred = vec![false; t];
    pred[t - horizon..].fill(true);
    build_sample(window, pred)
}

impl ModelForecaster<'_> {
    fn finish(&self, q_norm: &[f64], sample: &WindowedSample, horizon: usize, levels: &[f64]) -> Result<QuantileForecast> {
        let k = self.config.n_quantiles();
        let t = self.config.context_length;
        let mut values = denormalize(&q_norm[(t - horizon) * k..t * k], &sample.stats);
        if self.sort {
            sort_quantile_rows(&mut values, k);
        }
        let full = QuantileForecast {
            levels: self.config.levels.clone(),
            values,
        };
        if levels == self.config.levels.as_slice() {
            Ok(full)
        } else {
            full.select(levels)
        }
    }
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&self, context: &[Option<f64>], horizon: usize, seasonality: usize, levels: &[f64]) -> Result<QuantileForecast> {
        Ok(self.forecast_many(&[context], horizon, seasonality, levels)?.remove(0))
    }

    fn forecast_many(
        &self,
        contexts: &[&[Option<f64>]],
        horizon: usize,
        _seasonality: usize,
        levels: &[f64],
    ) -> Result<Vec<QuantileForecast>> {
        let samples: Vec<WindowedSample> = contexts
            .iter()
            .map(|c| inference_sample(c, horizon, self.config))
            .collect::<Result<_>>()?;
        let t = self.config.context_length;
        let k = self.config.n_quantiles();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(FORECAST_BATCH) {
            let refs: Vec<&WindowedSample> = chunk.iter().collect();
            let q = forward_batch(&refs, self.weights, self.config)?;
            for (i, s) in chunk.iter().enumerate() {
                out.push(self.finish(&q.data()[i * t * k..(i + 1) * t * k], s, horizon, levels)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Levels the CRPS averages over; every method must forecast them.
    pub levels: Vec<f64>,
    pub mase_variant: MaseVariant,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            mase_variant: MaseVariant::TargetDiff,
        }
    }
}

fn observed(values: &[Option<f64>]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| v.ok_or_else(|| Error::Data("target window contains missing values".into())))
        .collect()
}

/// Scores every method on every case. A case that cannot be scored (for
/// example an all-zero target) is dropped for all methods and listed in the
/// report's exclusions.
pub fn evaluate(methods: &[&dyn Forecaster], cases: &[EvalCase], opts: &EvalOptions) -> Result<EvalReport> {
    let names: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    let results: Vec<Result<Vec<Scores>>> = cases.par_iter().map(|c| score_case(methods, c, opts)).collect();
    let mut table = BTreeMap::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(scores) => {
                for (name, s) in names.iter().zip(scores) {
                    table.insert((case.id.clone(), name.clone()), s);
                }
                kept.push(case.id.clone());
            }
            Err(e @ (Error::Config { .. } | Error::Shape(_) | Error::Numeric(_))) => return Err(e),
            Err(e) => dropped.push(Exclusion {
                case: case.id.clone(),
                method: String::new(),
                metric: "all".into(),
                reason: e.to_string(),
            }),
        }
    }
    let mut report = aggregate(&names, &kept, &table)?;
    dropped.extend(report.excluded_cases);
    report.excluded_cases = dropped;
    Ok(report)
}

fn score_case(methods: &[&dyn Forecaster], case: &EvalCase, opts: &EvalOptions) -> Result<Vec<Scores>> {
    let splits = case.splits()?;
    let mut sums = vec![(0.0, 0.0); methods.len()];
    for &(ctx_end, tgt_end) in &splits {
        let context = &case.series.values[..ctx_end];
        let target = observed(&case.series.values[ctx_end..tgt_end])?;
        for (mi, m) in methods.iter().enumerate() {
            let f = m.forecast(context, case.horizon, case.seasonality, &opts.levels)?;
            let median = f.median();
            let ma = match opts.mase_variant {
                MaseVariant::TargetDiff => mase(&median, &target)?,
                MaseVariant::SeasonalInsample => {
                    mase_seasonal_insample(&median, &target, &fill_missing(context)?, case.seasonality)?
                }
            };
            sums[mi].0 += ma;
            sums[mi].1 += crps(&f, &target, &opts.levels)?;
        }
    }
    let w = splits.len() as f64;
    Ok(sums
        .into_iter()
        .map(|(m, c)| Scores { mase: m / w, crps: c / w })
        .collect())
}

/// Model, Seasonal Naive and Naive on the same cases.
pub fn evaluate_model(
    weights: &ModelWeights,
    config: &ModelConfig,
    cases: &[EvalCase],
    opts: &EvalOptions,
    sort: bool,
) -> Result<EvalReport> {
    let model = ModelForecaster {
        name: "model".into(),
        weights,
        config,
        sort,
    };
    let methods: [&dyn Forecaster; 3] = [&model, &SeasonalNaive, &Naive];
    evaluate(&methods, cases, opts)
}

/// One line of a forecast export: `values[k]` is the path of `levels[k]`
/// over the horizon, starting `offset` steps after the series start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRecord {
    pub id: String,
    pub start: String,
    pub offset: usize,
    pub levels: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ForecastRecord {
    pub fn new(id: &str, start: &str, offset: usize, f: &QuantileForecast) -> Self {
        Self {
            id: id.into(),
            start: start.into(),
            offset,
            levels: f.levels.clone(),
            values: (0..f.levels.len()).map(|k| f.column(k)).collect(),
        }
    }

    /// Checks the grid is rectangular, levels are increasing in (0, 1) and
    /// every value is finite.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.len() != self.values.len() {
            return Err(Error::Data(format!(
                "forecast `{}` has {} levels but {} rows",
                self.id,
                self.levels.len(),
                self.values.len()
            )));
        }
        if !self.levels.iter().all(|l| *l > 0.0 && *l < 1.0) || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!("forecast `{}`: levels must increase within (0, 1)", self.id)));
        }
        let h = self.values[0].len();
        if h == 0 || self.values.iter().any(|r| r.len() != h) {
            return Err(Error::Data(format!("forecast `{}`: rows must share a positive length", self.id)));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("forecast `{}` contains non-finite values", self.id)));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.values.first().map(Vec::len).unwrap_or(0)
    }
}

pub fn parse_forecast_line(line: &str, line_no: usize) -> Result<ForecastRecord> {
    let r: ForecastRecord = serde_json::from_str(line).map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
    r.validate().map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
    Ok(r)
}

pub fn parse_forecast_jsonl(text: &str) -> Result<Vec<ForecastRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_forecast_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic_case(id: &str, n: usize) -> EvalCase {
        let v: Vec<f64> = (0..n).map(|t| 10.0 + [1.0, 4.0, 2.0, 7.0, 3.0, 5.0][t % 6]).collect();
        EvalCase {
            id: id.into(),
            series: TimeSeries::from_values(id, &v),
            seasonality: 6,
            horizon: 12,
            windows: 3,
        }
    }

    #[test]
    fn splits_are_non_overlapping_tail_windows() {
        let c = periodic_case("a", 100);
        assert_eq!(c.splits().unwrap(), vec![(64, 76), (76, 88), (88, 100)]);
    }

    #[test]
    fn baselines_report_with_self_normalization() {
        let cases = vec![periodic_case("a", 100), periodic_case("b", 90)];
        let methods: [&dyn Forecaster; 2] = [&Naive, &SeasonalNaive];
        let r = evaluate(&methods, &cases, &EvalOptions::default()).unwrap();
        // A perfectly periodic series gives the seasonal baseline zero error;
        // it still normalizes to 1 while the naive ratio is excluded.
        assert_eq!(r.aggregates[SEASONAL_NAIVE].crps, Some(1.0));
        assert_eq!(r.aggregates[NAIVE].crps, None);
        assert_eq!(r.aggregates[SEASONAL_NAIVE].rank, 1.0);
        assert_eq!(r.aggregates[NAIVE].rank, 2.0);
    }

    #[test]
    fn all_zero_target_drops_the_case() {
        let mut v = vec![1.0; 40];
        v.extend([0.0; 12]);
        let mut cases = vec![periodic_case("a", 100)];
        cases.push(EvalCase {
            id: "zero".into(),
            series: TimeSeries::from_values("zero", &v),
            seasonality: 6,
            horizon: 12,
            windows: 1,
        });
        let methods: [&dyn Forecaster; 2] = [&SeasonalNaive, &Naive];
        let r = evaluate(&methods, &cases, &EvalOptions::default()).unwrap();
        assert!(r.excluded_cases.iter().any(|e| e.case == "zero" && e.metric == "all"));
        assert!(r.per_case.iter().all(|row| row.case != "zero"));
    }

    #[test]
    fn forecast_record_round_trip() {
        let f = QuantileForecast {
            levels: vec![0.1, 0.5, 0.9],
            values: vec![0.0, 1.0, 2.0, 1.0, 2.0, 3.0],
        };
        let r = ForecastRecord::new("x", "2000-01-01T00:00:00", 10, &f);
        assert_eq!(r.values, vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![2.0, 3.0]]);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(parse_forecast_line(&line, 1).unwrap(), r);
        assert!(parse_forecast_line(r#"{"id":"x","start":"s","offset":0,"levels":[0.5],"values":[]}"#, 3).is_err());
    }
}
