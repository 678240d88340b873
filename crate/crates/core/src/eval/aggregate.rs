//! Seasonal-Naive normalization, geometric means and per-case ranks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the normalizing baseline in reports.
pub const SEASONAL_NAIVE: &str = "seasonal_naive";
pub const NAIVE: &str = "naive";

/// Raw scores of one method on one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mase: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub method: String,
    pub mase: Option<f64>,
    pub crps: Option<f64>,
    pub norm_mase: Option<f64>,
    pub norm_crps: Option<f64>,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Geometric mean of normalized MASE over included cases.
    pub mase: Option<f64>,
    /// Geometric mean of normalized CRPS over included cases.
    pub crps: Option<f64>,
    /// Arithmetic mean of per-case ranks.
    pub rank: f64,
    pub cases_mase: usize,
    pub cases_crps: usize,
}

/// A value left out of a geometric mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub case: String,
    /// Empty when the whole case was dropped.
    pub method: String,
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_case: Vec<CaseRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub excluded_cases: Vec<Exclusion>,
}

pub fn geometric_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

/// Average ranks (1 = lowest), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Builds the report from `scores[case][method]`. Every method must have a
/// value on every case and [`SEASONAL_NAIVE`] must be among the methods.
///
/// A score equal to the baseline's normalizes to exactly 1 (so the baseline
/// itself is 1 on every case, even when its error is zero). Other normalized
/// values that are not finite and positive are left out of that method's
/// geometric mean and listed as exclusions; ranks use raw CRPS.
pub fn aggregate(
    methods: &[String],
    cases: &[String],
    scores: &BTreeMap<(String, String), Scores>,
) -> Result<EvalReport> {
    if !methods.iter().any(|m| m == SEASONAL_NAIVE) {
        return Err(Error::config("methods", format!("`{SEASONAL_NAIVE}` is required for normalization")));
    }
    let missing: Vec<String> = cases
        .iter()
        .flat_map(|c| methods.iter().map(move |m| (m.clone(), c.clone())))
        .filter(|(m, c)| !scores.contains_key(&(c.clone(), m.clone())))
        .map(|(m, c)| format!("({m}, {c})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::config("cases", format!("missing scores for {}", missing.join(", "))));
    }
    let mut per_case = Vec::new();
    let mut excluded = Vec::new();
    let mut logs: BTreeMap<&str, (Vec<f64>, Vec<f64>, f64)> = methods.iter().map(|m| (m.as_str(), (vec![], vec![], 0.0))).collect();
    for case in cases {
        let get = |m: &String| scores[&(case.clone(), m.clone())];
        let base = get(&SEASONAL_NAIVE.to_string());
        let crps_row: Vec<f64> = methods.iter().map(|m| get(m).crps).collect();
        let ranks = average_ranks(&crps_row);
        for (m, rank) in methods.iter().zip(ranks) {
            let s = get(m);
            let mut norm = |metric: &str, v: f64, b: f64, sink: &mut Vec<f64>| -> Option<f64> {
                // Equal scores normalize to 1, including a perfect baseline.
                let n = if v == b { 1.0 } else { v / b };
                if n.is_finite() && n > 0.0 {
                    sink.push(n);
                    Some(n)
                } else {
                    excluded.push(Exclusion {
                        case: case.clone(),
                        method: m.clone(),
                        metric: metric.into(),
                        reason: format!("normalized value {n} ({v} / {b}) is not finite and positive"),
                    });
                    None
                }
            };
            let entry = logs.get_mut(m.as_str()).expect("method listed");
            let norm_mase = norm("mase", s.mase, base.mase, &mut entry.0);
            let norm_crps = norm("crps", s.crps, base.crps, &mut entry.1);
            entry.2 += rank;
            let finite = |v: f64| v.is_finite().then_some(v);
            per_case.push(CaseRow {
                case: case.clone(),
                method: m.clone(),
                mase: finite(s.mase),
                crps: finite(s.crps),
                norm_mase,
                norm_crps,
                rank,
            });
        }
    }
    let aggregates = logs
        .into_iter()
        .map(|(m, (nm, nc, r))| {
            (
                m.to_string(),
                Aggregate {
                    mase: geometric_mean(&nm),
                    crps: geometric_mean(&nc),
                    rank: if cases.is_empty() { 0.0 } else { r / cases.len() as f64 },
                    cases_mase: nm.len(),
                    cases_crps: nc.len(),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        per_case,
        aggregates,
        excluded_cases: excluded,
    })
}
