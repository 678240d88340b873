//! The single JSON run configuration shared by every command.
//!
//! ```json
//! {
//!   "model": {"T": 512, "L": 16, "n_layer": 4, "d": 64, "head_dim": 16, "ffn_mult": 4, "K": 9},
//!   "train": {"total_steps": 3000, "batch_size": 32, "n_cpm": 4, "seed": 0},
//!   "data": {"sources": [{"kind": "kernelsynth", "num": 1000, "length": 640, "seed": 1}]},
//!   "eval": {"dataset": {"kind": "sine", "num": 50, "length": 640, "seed": 9},
//!            "seasonality": 24, "horizon": 64}
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Relative paths resolve against the
//! directory of the configuration file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::{
    generate_indexed, kernelsynth_generate, sine_generate, tsmixup_generate, Component, DataMixture, KernelSynthConfig,
    SineConfig, TsMixupConfig,
};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, MaseVariant};
use crate::model::{quantile_preset, ModelConfig};
use crate::series::{load_jsonl, TimeSeries};
use crate::train::TrainConfig;

/// Architecture section; quantiles come from `levels` or the preset `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "T")]
    pub context_length: usize,
    #[serde(rename = "L")]
    pub patch_size: usize,
    pub n_layer: usize,
    pub d: usize,
    pub head_dim: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let levels = match (&self.levels, self.k) {
            (Some(l), None) => l.clone(),
            (Some(l), Some(k)) if l.len() == k => l.clone(),
            (Some(l), Some(k)) => {
                return Err(Error::config("model.K", format!("K={k} but {} explicit levels", l.len())));
            }
            (None, Some(k)) => {
                quantile_preset(k).ok_or_else(|| Error::config("model.K", format!("no preset for K={k}; use 9, 21 or 99")))?
            }
            (None, None) => return Err(Error::config("model.K", "give either K or levels")),
        };
        let cfg = ModelConfig {
            context_length: self.context_length,
            patch_size: self.patch_size,
            n_layer: self.n_layer,
            d_model: self.d,
            head_dim: self.head_dim,
            ffn_mult: self.ffn_mult,
            levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where series come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Real {
        path: PathBuf,
        #[serde(default = "one")]
        weight: f64,
    },
    Kernelsynth {
        num: usize,
        length: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: KernelSynthConfig,
        #[serde(default = "one")]
        weight: f64,
    },
    Sine {
        num: usize,
        length: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: SineConfig,
        #[serde(default = "one")]
        weight: f64,
    },
    Tsmixup {
        num: usize,
        length: usize,
        pool: PathBuf,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: TsMixupConfig,
        #[serde(default = "one")]
        weight: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Source {
    pub fn kind(&self) -> &'static str {
        match self {
            Source::Real { .. } => "real",
            Source::Kernelsynth { .. } => "kernelsynth",
            Source::Sine { .. } => "sine",
            Source::Tsmixup { .. } => "tsmixup",
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            Source::Real { weight, .. }
            | Source::Kernelsynth { weight, .. }
            | Source::Sine { weight, .. }
            | Source::Tsmixup { weight, .. } => *weight,
        }
    }

    /// Loads or generates the series. Generated ids are prefixed with the
    /// source kind and index so pools never collide.
    pub fn materialize(&self, base: &Path, exclude: Option<&HashSet<String>>) -> Result<Vec<TimeSeries>> {
        match self {
            Source::Real { path, .. } => load_jsonl(base.join(path)),
            Source::Kernelsynth {
                num,
                length,
                seed,
                params,
                ..
            } => generate_indexed(*seed, *num, |rng, i| kernelsynth_generate(rng, format!("kernelsynth-{i}"), *length, params)),
            Source::Sine {
                num,
                length,
                seed,
                params,
                ..
            } => generate_indexed(*seed, *num, |rng, i| sine_generate(rng, format!("sine-{i}"), *length, params)),
            Source::Tsmixup {
                num,
                length,
                pool,
                seed,
                params,
                ..
            } => {
                let pool = load_jsonl(base.join(pool))?;
                generate_indexed(*seed, *num, |rng, i| {
                    tsmixup_generate(rng, format!("tsmixup-{i}"), &pool, *length, exclude, params)
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub sources: Vec<Source>,
    /// File of series ids (one per line, or JSONL series) that clean-mode
    /// mixing must never draw from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_exclusions: Option<PathBuf>,
}

/// Seasonality as one number or a map from frequency string to period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seasonality {
    Fixed(usize),
    ByFreq(BTreeMap<String, usize>),
}

impl Seasonality {
    pub fn for_freq(&self, freq: &str) -> Result<usize> {
        match self {
            Seasonality::Fixed(s) => Ok(*s),
            Seasonality::ByFreq(m) => m
                .get(freq)
                .copied()
                .ok_or_else(|| Error::config("eval.seasonality", format!("no seasonality for frequency `{freq}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: Source,
    pub seasonality: Seasonality,
    pub horizon: usize,
    #[serde(default = "one_window")]
    pub windows: usize,
    #[serde(default)]
    pub mase_variant: MaseVariant,
    #[serde(default = "default_eval_levels")]
    pub levels: Vec<f64>,
}

fn one_window() -> usize {
    1
}

fn default_eval_levels() -> Vec<f64> {
    EvalOptions::default().levels
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            levels: self.levels.clone(),
            mase_variant: self.mase_variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates a document after applying `key=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::config("config", format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text, overrides)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        self.train.validate()?;
        for (i, s) in self.data.sources.iter().enumerate() {
            if !(s.weight() >= 0.0 && s.weight().is_finite()) {
                return Err(Error::config(format!("data.sources.{i}.weight"), "must be finite and non-negative"));
            }
        }
        if let Some(ev) = &self.eval {
            let max = model.context_length - model.patch_size;
            if ev.horizon == 0 || ev.horizon > max {
                return Err(Error::config("eval.horizon", format!("must lie in 1..={max} (T - L)")));
            }
            if ev.windows == 0 {
                return Err(Error::config("eval.windows", "must be positive"));
            }
            if let Some(l) = ev.levels.iter().find(|l| !model.levels.iter().any(|m| (*m - **l).abs() < 1e-9)) {
                return Err(Error::config("eval.levels", format!("level {l} is not among the model's levels")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn exclusions(&self) -> Result<Option<HashSet<String>>> {
        match &self.data.clean_exclusions {
            None => Ok(None),
            Some(p) => read_id_list(self.base_dir.join(p)).map(Some),
        }
    }

    /// Loads or generates every data source into a weighted mixture.
    pub fn build_mixture(&self) -> Result<DataMixture> {
        if self.data.sources.is_empty() {
            return Err(Error::config("data.sources", "no data sources configured"));
        }
        let exclude = self.exclusions()?;
        let components = self
            .data
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Component {
                    name: format!("{}-{i}", s.kind()),
                    weight: s.weight(),
                    series: s.materialize(&self.base_dir, exclude.as_ref())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DataMixture::new(components)
    }
}

/// Reads ids from a file: JSONL series contribute their `id`, any other
/// non-empty line is taken as an id verbatim.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            if l.starts_with('{') {
                crate::series::parse_series_line(l, i + 1).map(|s| s.id)
            } else {
                Ok(l.to_string())
            }
        })
        .collect()
}

/// Sets a dotted path (`train.mask_ratio=0.6`) in a JSON document. The value
/// is parsed as JSON when possible and taken as a string otherwise; missing
/// intermediate objects are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut cur = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::config(path, format!("`{key}` indexes an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(path, format!("index {idx} out of range for {len} items")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(path, format!("`{key}` is inside a scalar"))),
        };
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "model": {"T": 128, "L": 16, "n_layer": 2, "d": 16, "head_dim": 8, "K": 9},
        "train": {"total_steps": 10, "batch_size": 2},
        "data": {"sources": [{"kind": "sine", "num": 4, "length": 200, "seed": 1}]},
        "eval": {"dataset": {"kind": "sine", "num": 3, "length": 200, "seed": 2}, "seasonality": 24, "horizon": 32}
    }"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::from_json(BASE, &[]).unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.n_quantiles(), 9);
        assert_eq!(c.train.total_steps, 10);
        assert_eq!(c.train.peak_lr, 3e-4);
        assert_eq!(c.eval.as_ref().unwrap().windows, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = BASE.replace("\"batch_size\": 2", "\"batch_size\": 2, \"bogus\": 1");
        assert!(matches!(RunConfig::from_json(&bad, &[]), Err(Error::Config { .. })));
        let bad = BASE.replace("\"K\": 9", "\"K\": 9, \"dropout\": 0.1");
        assert!(RunConfig::from_json(&bad, &[]).is_err());
    }

    #[test]
    fn overrides_set_leaves() {
        let c = RunConfig::from_json(BASE, &["train.mask_ratio=0.6".into(), "data.sources.0.num=7".into()]).unwrap();
        assert_eq!(c.train.mask_ratio, 0.6);
        assert!(matches!(c.data.sources[0], Source::Sine { num: 7, .. }));
        let e = RunConfig::from_json(BASE, &["train.mask_ratio=1.5".into()]).unwrap_err();
        assert!(e.to_string().contains("train.mask_ratio"), "{e}");
        assert!(RunConfig::from_json(BASE, &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn horizon_bound_checked() {
        let e = RunConfig::from_json(BASE, &["eval.horizon=120".into()]).unwrap_err();
        assert!(e.to_string().contains("112"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_json(BASE, &[]).unwrap();
        let b = RunConfig::from_json(BASE, &["train.seed=3".into()]).unwrap();
        assert_eq!(a.hash(), RunConfig::from_json(BASE, &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seasonality_map() {
        let c = RunConfig::from_json(BASE, &[r#"eval.seasonality={"H": 24, "D": 7}"#.into()]).unwrap();
        let s = &c.eval.unwrap().seasonality;
        assert_eq!(s.for_freq("D").unwrap(), 7);
        assert!(s.for_freq("W").is_err());
    }

    #[test]
    fn mixture_builds_from_generators() {
        let c = RunConfig::from_json(BASE, &[]).unwrap();
        let m = c.build_mixture().unwrap();
        assert_eq!(m.components()[0].series.len(), 4);
    }
}
