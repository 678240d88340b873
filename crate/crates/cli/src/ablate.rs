//! One training run per value along an ablation axis, scored together so
//! ranks are relative to the other variants of the same experiment.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use patchfm::config::RunConfig;
use patchfm::eval::{evaluate, EvalCase, EvalReport, Forecaster, ModelForecaster, SeasonalNaive};
use patchfm::model::{ModelConfig, ModelWeights};
use patchfm::train::{train_loop, Trainer};
use serde::Serialize;

use crate::commands::print_aggregates;
use crate::{usage, Axis, Failure};

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::NCpm => "n_cpm",
            Axis::Context => "context",
            Axis::Depth => "depth",
            Axis::Width => "width",
            Axis::Quantiles => "quantiles",
            Axis::Data => "data",
        }
    }
}

fn parse<T: std::str::FromStr>(axis: Axis, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("`{value}` is not a valid {} value", axis.name()))
}

/// The base config with one knob changed; `Err` explains why the value
/// does not apply.
fn variant(base: &RunConfig, axis: Axis, value: &str) -> Result<RunConfig, String> {
    let mut cfg = base.clone();
    match axis {
        Axis::MaskRatio => cfg.train.mask_ratio = parse(axis, value)?,
        Axis::NCpm => cfg.train.n_cpm = parse(axis, value)?,
        Axis::Context => cfg.model.context_length = parse(axis, value)?,
        Axis::Depth => cfg.model.n_layer = parse(axis, value)?,
        Axis::Width => cfg.model.d = parse(axis, value)?,
        Axis::Quantiles => {
            cfg.model.k = Some(parse(axis, value)?);
            cfg.model.levels = None;
        }
        Axis::Data => {
            let kinds: Vec<&str> = value.split('+').map(str::trim).collect();
            cfg.data.sources.retain(|s| kinds.contains(&s.kind()));
            if cfg.data.sources.is_empty() {
                return Err(format!("no configured source has kind in {kinds:?}"));
            }
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[derive(Serialize)]
struct VariantInfo {
    method: String,
    value: String,
    config_hash: String,
    param_count: usize,
    final_loss: f64,
    dir: PathBuf,
}

#[derive(Serialize)]
struct Skipped {
    value: String,
    reason: String,
}

#[derive(Serialize)]
struct AblationReport<'a> {
    axis: &'a str,
    seed: u64,
    base_config_hash: String,
    variants: Vec<VariantInfo>,
    skipped: Vec<Skipped>,
    #[serde(flatten)]
    report: EvalReport,
}

/// Eval cases from the config's `eval` section, with per-frequency seasonality.
pub fn config_cases(cfg: &RunConfig) -> Result<Vec<EvalCase>, Failure> {
    let ev = cfg
        .eval
        .as_ref()
        .ok_or_else(|| usage("the configuration has no `eval` section"))?;
    let series = ev.dataset.materialize(&cfg.base_dir, None)?;
    series
        .into_iter()
        .map(|s| {
            Ok(EvalCase {
                id: s.id.clone(),
                seasonality: ev.seasonality.for_freq(&s.freq)?,
                horizon: ev.horizon,
                windows: ev.windows,
                series: s,
            })
        })
        .collect()
}

pub fn ablate(config: &Path, axis: Axis, values: &[String], out: &Path, seed: Option<u64>, mut sets: Vec<String>) -> Result<(), Failure> {
    if let Some(s) = seed {
        sets.push(format!("train.seed={s}"));
    }
    let base = RunConfig::load(config, &sets)?;
    let cases = config_cases(&base)?;
    let opts = base.eval.as_ref().expect("checked by config_cases").options();
    fs::create_dir_all(out)?;

    let mut skipped = Vec::new();
    let mut trained: Vec<(VariantInfo, ModelConfig, ModelWeights)> = Vec::new();
    for (i, value) in values.iter().enumerate() {
        let cfg = match variant(&base, axis, value) {
            Ok(c) => c,
            Err(reason) => {
                eprintln!("warning: skipping {}={value}: {reason}", axis.name());
                skipped.push(Skipped {
                    value: value.clone(),
                    reason,
                });
                continue;
            }
        };
        let model = cfg.model_config()?;
        let dir = out.join(format!("{i:02}-{}-{}", axis.name(), value.replace(['/', '\\'], "_")));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
        let mixture = cfg.build_mixture()?;
        let mut trainer = Trainer::new(model.clone(), cfg.train.clone())?;
        let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        let history = train_loop(&mut trainer, &mixture, Some(&dir), &mut log);
        log.flush()?;
        let history = history?;
        let info = VariantInfo {
            method: format!("{}={value}", axis.name()),
            value: value.clone(),
            config_hash: cfg.hash(),
            param_count: trainer.weights.param_count(),
            final_loss: history.last().map(|m| m.loss).unwrap_or(f64::NAN),
            dir,
        };
        println!(
            "{}: {} parameters, final loss {:.6}",
            info.method, info.param_count, info.final_loss
        );
        trained.push((info, model, trainer.weights));
    }
    if trained.is_empty() {
        return Err(usage(format!("no valid {} values among {values:?}", axis.name())));
    }

    let forecasters: Vec<ModelForecaster> = trained
        .iter()
        .map(|(info, model, weights)| ModelForecaster {
            name: info.method.clone(),
            weights,
            config: model,
            sort: true,
        })
        .collect();
    let mut methods: Vec<&dyn Forecaster> = forecasters.iter().map(|f| f as &dyn Forecaster).collect();
    methods.push(&SeasonalNaive);
    let report = evaluate(&methods, &cases, &opts)?;
    print_aggregates(&report);

    let file = AblationReport {
        axis: axis.name(),
        seed: base.train.seed,
        base_config_hash: base.hash(),
        variants: trained.into_iter().map(|(info, _, _)| info).collect(),
        skipped,
        report,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&file).expect("report serializes"))?;
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}
