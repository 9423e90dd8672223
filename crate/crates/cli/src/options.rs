//! Run options. Every option can come from a flag or from the TOML config
//! file (same names, kebab-case); flags win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunOptions {
    // structure
    /// Aggregation matrix CSV (upper × bottom series)
    #[arg(long, help_heading = "Structure")]
    pub agg_mat: Option<PathBuf>,
    /// Zero-constraint matrix CSV, alternative to --agg-mat
    #[arg(long, help_heading = "Structure")]
    pub cons_mat: Option<PathBuf>,
    /// Highest aggregation order, or a comma list of orders
    #[arg(long, help_heading = "Structure")]
    pub agg_order: Option<String>,
    /// Temporal aggregation weights: sum, avg, first or last
    #[arg(long, help_heading = "Structure")]
    pub tew: Option<String>,
    /// Comma-separated series labels
    #[arg(long, help_heading = "Structure")]
    pub labels: Option<String>,

    // inputs
    /// Base forecasts CSV
    #[arg(long, help_heading = "Inputs")]
    pub base: Option<PathBuf>,
    /// Residuals CSV, same layout as the base forecasts
    #[arg(long, help_heading = "Inputs")]
    pub res: Option<PathBuf>,
    /// Disaggregation weights CSV (td, mo)
    #[arg(long, help_heading = "Inputs")]
    pub weights: Option<PathBuf>,
    /// Base forecast draws CSV, one draw per row (smp)
    #[arg(long, help_heading = "Inputs")]
    pub samples: Option<PathBuf>,
    /// Validation-sample base forecasts CSV (rml)
    #[arg(long, help_heading = "Inputs")]
    pub hat: Option<PathBuf>,
    /// Validation-sample bottom observations CSV (rml)
    #[arg(long, help_heading = "Inputs")]
    pub obs: Option<PathBuf>,
    /// Immutable forecasts CSV
    #[arg(long, help_heading = "Inputs")]
    pub immutable: Option<PathBuf>,
    /// Bounds CSV
    #[arg(long, help_heading = "Inputs")]
    pub bounds: Option<PathBuf>,
    /// Alternative bottom base forecasts CSV (lcc)
    #[arg(long, help_heading = "Inputs")]
    pub alt_bottom: Option<PathBuf>,
    /// Base forecast covariance CSV (mvn)
    #[arg(long, help_heading = "Inputs")]
    pub sigma: Option<PathBuf>,
    /// Fitted model bundle (rml)
    #[arg(long, help_heading = "Inputs")]
    pub fit: Option<PathBuf>,

    // outputs
    /// Output CSV
    #[arg(long, help_heading = "Outputs")]
    pub out: Option<PathBuf>,
    /// Output covariance CSV (mvn)
    #[arg(long, help_heading = "Outputs")]
    pub out_cov: Option<PathBuf>,
    /// Diagnostics JSON (default: <out>.json)
    #[arg(long, help_heading = "Outputs")]
    pub diagnostics: Option<PathBuf>,
    /// Write the fitted model bundle here (rml)
    #[arg(long, help_heading = "Outputs")]
    pub save_model: Option<PathBuf>,
    /// Write a header row
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Outputs")]
    pub header: Option<bool>,
    /// Record wall-clock timings in the diagnostics
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Outputs")]
    pub timings: Option<bool>,

    // least squares
    /// Covariance estimator
    #[arg(long, help_heading = "Least squares")]
    pub comb: Option<String>,
    /// proj, strc, proj_qp or strc_qp
    #[arg(long, help_heading = "Least squares")]
    pub approach: Option<String>,
    /// Non-negativity: none, sntz, bpv or qp
    #[arg(long, help_heading = "Least squares")]
    pub nn: Option<String>,
    /// Residual second moments without centring (default true)
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Least squares")]
    pub mse: Option<bool>,

    // classical
    /// 1-based series rows carrying the middle-out forecasts
    #[arg(long, help_heading = "Classical")]
    pub id_rows: Option<String>,
    /// Aggregation order of the middle-out forecasts
    #[arg(long, help_heading = "Classical")]
    pub order: Option<usize>,
    /// Rescale weights within each split
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Classical")]
    pub normalize: Option<bool>,
    /// Set negative bottom forecasts to zero
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Classical")]
    pub sntz: Option<bool>,
    /// Round bottom forecasts to integers
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Classical")]
    pub round: Option<bool>,

    // level conditional
    /// Include bottom-up in the level average
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Level conditional")]
    pub ccc: Option<bool>,
    /// exogenous or endogenous
    #[arg(long, help_heading = "Level conditional")]
    pub const_mode: Option<String>,
    /// Upper-series levels, 1-based, e.g. "1;2,3"
    #[arg(long, help_heading = "Level conditional")]
    pub levels: Option<String>,

    // cross-temporal heuristics
    /// Cross-sectional estimator for tcs, cst and iter
    #[arg(long, help_heading = "Heuristics")]
    pub comb_cs: Option<String>,
    /// Temporal estimator for tcs, cst and iter
    #[arg(long, help_heading = "Heuristics")]
    pub comb_te: Option<String>,
    /// ka or simple
    #[arg(long, help_heading = "Heuristics")]
    pub avg: Option<String>,
    #[arg(long, help_heading = "Heuristics")]
    pub itmax: Option<usize>,
    #[arg(long, help_heading = "Heuristics")]
    pub tol: Option<f64>,
    /// inf, one or two
    #[arg(long, help_heading = "Heuristics")]
    pub norm: Option<String>,
    /// Step order: tcs or cst
    #[arg(long = "type", help_heading = "Heuristics")]
    #[serde(rename = "type")]
    pub step_type: Option<String>,
    /// Print the iteration trace
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Heuristics")]
    pub verbose: Option<bool>,

    // probabilistic
    /// Estimator of the base covariance, or "comb"
    #[arg(long, help_heading = "Probabilistic")]
    pub comb_base: Option<String>,
    /// Keep only the bottom marginal
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Probabilistic")]
    pub reduce_form: Option<bool>,

    // machine learning
    /// Feature mode
    #[arg(long, help_heading = "Machine learning")]
    pub features: Option<String>,
    /// ridge, forest or knn
    #[arg(long, help_heading = "Machine learning")]
    pub learner: Option<String>,
    /// Hyperparameters k=v (repeatable or comma separated)
    #[arg(long, value_delimiter = ',', help_heading = "Machine learning")]
    pub params: Vec<String>,
    /// Tuning grid k=v1,v2,... (repeat per parameter)
    #[arg(long, help_heading = "Machine learning")]
    pub tune: Vec<String>,
    #[arg(long, help_heading = "Machine learning")]
    pub folds: Option<usize>,
    #[arg(long, help_heading = "Machine learning")]
    pub seed: Option<u64>,
    /// Fewest validation rows accepted
    #[arg(long, help_heading = "Machine learning")]
    pub min_rows: Option<usize>,
}

fn strip_empty(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m
            .into_iter()
            .filter(|(_, v)| !v.is_null() && v.as_array().is_none_or(|a| !a.is_empty()))
            .collect(),
        _ => Map::new(),
    }
}

/// Options after merging flags over the config file, with the source of each.
#[derive(Debug, Clone)]
pub struct Merged {
    pub options: RunOptions,
    pub values: Map<String, Value>,
    pub sources: BTreeMap<String, String>,
}

pub fn merge(flags: &RunOptions, config: Option<&Path>) -> Result<Merged, CliError> {
    let mut values = Map::new();
    let mut sources = BTreeMap::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("--config {}: {e}", path.display())))?;
        let parsed: RunOptions =
            toml::from_str(&text).map_err(|e| CliError::validation(format!("--config {}: {}", path.display(), e.message())))?;
        for (k, v) in strip_empty(serde_json::to_value(&parsed).unwrap()) {
            sources.insert(k.clone(), "config".to_string());
            values.insert(k, v);
        }
    }
    for (k, v) in strip_empty(serde_json::to_value(flags).unwrap()) {
        sources.insert(k.clone(), "flag".to_string());
        values.insert(k, v);
    }
    let options: RunOptions = serde_json::from_value(Value::Object(values.clone())).map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Merged { options, values, sources })
}

/// Parses an option value, naming the flag on failure.
pub fn parse<T>(value: &str, flag: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::validation(format!("--{flag}: {e}")))
}

pub fn parse_opt<T>(value: &Option<String>, flag: &str, default: T) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    match value {
        Some(v) => parse(v, flag),
        None => Ok(default),
    }
}

/// 1-based comma list to 0-based indices.
pub fn index_list(value: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    value
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(i) if i >= 1 => Ok(i - 1),
            _ => Err(CliError::validation(format!("--{flag}: `{}` is not a positive integer", s.trim()))),
        })
        .collect()
}

/// `k=v` pairs in order of appearance.
pub fn key_values(items: &[String], flag: &str) -> Result<Vec<(String, f64)>, CliError> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("--{flag}: expected k=v, got `{item}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::validation(format!("--{flag}: `{}` is not a number", v.trim())))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// `k=v1,v2,...` grids in order of appearance.
pub fn grids(items: &[String]) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    items
        .iter()
        .map(|item| {
            let (k, vs) = item
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("--tune: expected k=v1,v2,..., got `{item}`")))?;
            let values = vs
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::validation(format!("--tune: `{}` is not a number", v.trim()))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((k.trim().to_string(), values))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "comb = \"shr\"\nnn = \"bpv\"\nparams = [\"trees=5\"]\ntype = \"cst\"\n").unwrap();
        let flags = RunOptions {
            comb: Some("wls".into()),
            ..Default::default()
        };
        let m = merge(&flags, Some(&cfg)).unwrap();
        assert_eq!(m.options.comb.as_deref(), Some("wls"));
        assert_eq!(m.options.nn.as_deref(), Some("bpv"));
        assert_eq!(m.options.step_type.as_deref(), Some("cst"));
        assert_eq!(m.options.params, ["trees=5"]);
        assert_eq!(m.sources["comb"], "flag");
        assert_eq!(m.sources["nn"], "config");
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "combo = \"shr\"\n").unwrap();
        let e = merge(&RunOptions::default(), Some(&cfg)).unwrap_err();
        assert!(e.message.contains("run.toml") && e.message.contains("combo"), "{}", e.message);
    }

    #[test]
    fn lists_parsed() {
        assert_eq!(index_list("2, 3", "id-rows").unwrap(), [1, 2]);
        assert!(index_list("0", "id-rows").is_err());
        assert_eq!(key_values(&["a=1".into(), "b = 2.5".into()], "params").unwrap()[1], ("b".to_string(), 2.5));
        assert_eq!(grids(&["lambda=1,0.5".into()]).unwrap()[0].1, [1.0, 0.5]);
    }
}
