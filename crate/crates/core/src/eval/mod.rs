//! Baselines, forecast scores and the Seasonal-Naive-normalized report.

pub mod aggregate;
pub mod harness;
pub mod metrics;

pub use aggregate::{aggregate, average_ranks, geometric_mean, Aggregate, CaseRow, EvalReport, Exclusion, Scores};
pub use aggregate::{NAIVE, SEASONAL_NAIVE};
pub use harness::{
    cases_from_series, evaluate, evaluate_model, inference_sample, parse_forecast_jsonl, parse_forecast_line, EvalCase,
    EvalOptions, ForecastRecord, Forecaster, ModelForecaster, Naive, SeasonalNaive,
};
pub use metrics::{crps, mase, mase_seasonal_insample, naive, seasonal_naive, wql, MaseVariant, QuantileForecast};

/// JSON schema of a serialized [`EvalReport`].
pub const REPORT_SCHEMA: &str = include_str!("../../schema/eval_report.schema.json");
