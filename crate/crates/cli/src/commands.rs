use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use patchfm::config::{read_id_list, RunConfig};
use patchfm::datagen::{generate_indexed, kernelsynth_generate, sine_generate, tsmixup_generate};
use patchfm::datagen::{KernelSynthConfig, SineConfig, TsMixupConfig};
use patchfm::eval::{cases_from_series, evaluate_model, EvalOptions, EvalReport, ForecastRecord, Forecaster, ModelForecaster};
use patchfm::series::{load_jsonl, write_jsonl};
use patchfm::train::{load_checkpoint, load_checkpoint_for, train_loop, Trainer};
use serde::Serialize;

use crate::{usage, Failure, GenKind};

fn with_seed(mut sets: Vec<String>, seed: Option<u64>) -> Vec<String> {
    if let Some(s) = seed {
        sets.push(format!("train.seed={s}"));
    }
    sets
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>, sets: Vec<String>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, &with_seed(sets, seed))?;
    let model = cfg.model_config()?;
    let mixture = cfg.build_mixture()?;
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint_for(path, &model)?;
            if ck.train != cfg.train {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different `train` section",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(model, cfg.train.clone())?,
    };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    let log_path = out.join("metrics.jsonl");
    let log = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log);
    let start = trainer.step;
    let history = train_loop(&mut trainer, &mixture, Some(out), &mut log);
    log.flush()?;
    let history = history?;
    let last = history.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "trained steps {start}..{} (seed {}, config {}), final loss {last:.6}; wrote {}",
        trainer.step,
        cfg.train.seed,
        &cfg.hash()[..12],
        out.join("final.ptfm").display()
    );
    Ok(())
}

pub fn generate(
    kind: GenKind,
    num: usize,
    length: usize,
    seed: u64,
    pool: Option<&Path>,
    exclude: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let excluded: Option<HashSet<String>> = exclude.map(read_id_list).transpose()?;
    let series = match kind {
        GenKind::Kernelsynth => {
            let c = KernelSynthConfig::default();
            generate_indexed(seed, num, |rng, i| kernelsynth_generate(rng, format!("kernelsynth-{i}"), length, &c))?
        }
        GenKind::Sine => {
            let c = SineConfig::default();
            generate_indexed(seed, num, |rng, i| sine_generate(rng, format!("sine-{i}"), length, &c))?
        }
        GenKind::Tsmixup => {
            let pool = pool.ok_or_else(|| usage("tsmixup needs --pool"))?;
            let pool = load_jsonl(pool)?;
            let c = TsMixupConfig::default();
            generate_indexed(seed, num, |rng, i| {
                tsmixup_generate(rng, format!("tsmixup-{i}"), &pool, length, excluded.as_ref(), &c)
            })?
        }
    };
    write_jsonl(out, &series)?;
    println!("wrote {} series to {} (seed {seed})", series.len(), out.display());
    if let Some(ex) = &excluded {
        let overlap = series
            .iter()
            .flat_map(|s| s.provenance.iter().chain(std::iter::once(&s.id)))
            .filter(|id| ex.contains(*id))
            .count();
        println!("provenance overlap with {} excluded ids: {overlap}", ex.len());
        if overlap > 0 {
            return Err(usage("generated series draw on excluded sources"));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn forecast(
    ckpt: &Path,
    input: &Path,
    horizon: usize,
    levels: Option<Vec<f64>>,
    sort: bool,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let series = load_jsonl(input)?;
    let levels = levels.unwrap_or_else(|| ck.model.levels.clone());
    let model = ModelForecaster {
        name: "model".into(),
        weights: &ck.weights,
        config: &ck.model,
        sort,
    };
    let contexts: Vec<&[Option<f64>]> = series.iter().map(|s| s.values.as_slice()).collect();
    let forecasts = model.forecast_many(&contexts, horizon, 1, &levels)?;
    let mut w = BufWriter::new(File::create(out)?);
    for (s, f) in series.iter().zip(&forecasts) {
        let rec = ForecastRecord::new(&s.id, &s.start, s.len(), f);
        serde_json::to_writer(&mut w, &rec).expect("record serializes");
        writeln!(w)?;
    }
    w.flush()?;
    let seed = seed.map(|s| format!(", seed {s}")).unwrap_or_default();
    println!(
        "wrote {} forecasts of {horizon} steps x {} levels to {}{seed}",
        forecasts.len(),
        levels.len(),
        out.display()
    );
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub ckpt: &'a Path,
    pub dataset: &'a Path,
    pub seasonality: usize,
    pub horizon: usize,
    pub windows: usize,
    pub mase_variant: &'a str,
    pub levels: Option<Vec<f64>>,
    pub sort: bool,
    pub seed: Option<u64>,
    pub report: &'a Path,
}

/// Report file: run settings plus the evaluation tables.
#[derive(Serialize)]
pub struct ReportFile<'a> {
    pub seed: Option<u64>,
    pub mase_variant: patchfm::eval::MaseVariant,
    pub levels: &'a [f64],
    #[serde(flatten)]
    pub report: &'a EvalReport,
}

pub fn print_aggregates(report: &EvalReport) {
    println!("{:<24} {:>10} {:>10} {:>8}", "method", "MASE", "CRPS", "rank");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for (m, a) in &report.aggregates {
        println!("{m:<24} {:>10} {:>10} {:>8.3}", fmt(a.mase), fmt(a.crps), a.rank);
    }
    if !report.excluded_cases.is_empty() {
        println!("{} exclusions (see report)", report.excluded_cases.len());
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let opts = EvalOptions {
        levels: a.levels.unwrap_or_else(|| EvalOptions::default().levels),
        mase_variant: a.mase_variant.parse()?,
    };
    let ck = load_checkpoint(a.ckpt)?;
    let series = load_jsonl(a.dataset)?;
    let cases = cases_from_series(&series, a.seasonality, a.horizon, a.windows);
    let report = evaluate_model(&ck.weights, &ck.model, &cases, &opts, a.sort)?;
    let file = ReportFile {
        seed: a.seed,
        mase_variant: opts.mase_variant,
        levels: &opts.levels,
        report: &report,
    };
    fs::write(a.report, serde_json::to_string_pretty(&file).expect("report serializes"))?;
    print_aggregates(&report);
    Ok(())
}
