//! Diagnostics file written next to every reconciliation output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use coherent::covariance::PsdRepair;
use coherent::ls::LsReport;
use coherent::probabilistic::EigenClip;
use coherent::IterationReport;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub framework: String,
    pub framework_title: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    /// LS approach, or the learner for `rml`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<String>,
    pub nn: String,
    /// Norms of the stacked constraint residuals `C x` over all periods (and draws).
    pub coherence_inf: f64,
    pub coherence_one: f64,
    pub coherence_two: f64,
    pub periods: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shrink_lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd_repair: Option<PsdRepair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ls_report: Option<LsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<IterationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lcc_components: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen_clip: Option<EigenClip>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_rows_excluded: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned: Option<Vec<Vec<(String, f64)>>>,
    pub inputs: BTreeMap<String, String>,
    pub options: Map<String, Value>,
    pub option_sources: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl Diagnostics {
    /// Accumulates `C x` residual norms of one coherent vector.
    pub fn add_residual(&mut self, r: impl Iterator<Item = f64>) {
        let mut sq = self.coherence_two * self.coherence_two;
        for v in r {
            let a = v.abs();
            self.coherence_inf = self.coherence_inf.max(a);
            self.coherence_one += a;
            sq += a * a;
        }
        self.coherence_two = sq.sqrt();
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("diagnostics serialize");
        s.push('\n');
        s
    }
}

/// Human-readable summary of a diagnostics file.
pub fn info(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let d: Diagnostics =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: not a diagnostics file ({e})", path.display())))?;
    let mut out = String::new();
    let _ = writeln!(out, "{} Forecast Reconciliation", d.framework_title);
    let _ = writeln!(out, "  framework:   {}", d.framework);
    let _ = writeln!(out, "  method:      {}", d.method);
    if let Some(e) = &d.estimator {
        let _ = writeln!(out, "  estimator:   {e}");
    }
    if let Some(a) = &d.approach {
        let label = if d.method == "rml" { "learner" } else { "approach" };
        let _ = writeln!(out, "  {label:<12} {a}", label = format!("{label}:"));
    }
    let _ = writeln!(out, "  nn:          {}", d.nn);
    let _ = writeln!(out, "  periods:     {}", d.periods);
    let _ = writeln!(out, "  coherence:   {:e} (max abs)", d.coherence_inf);
    if let Some(it) = &d.iteration {
        let _ = writeln!(
            out,
            "  iterations:  {} ({})",
            it.iterations,
            if it.converged { "converged" } else { "not converged" }
        );
    }
    if !d.shrink_lambda.is_empty() {
        let l: Vec<String> = d.shrink_lambda.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "  shrinkage:   {}", l.join(", "));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_accumulate() {
        let mut d = Diagnostics::default();
        d.add_residual([3.0, -4.0].into_iter());
        d.add_residual([0.0].into_iter());
        assert_eq!((d.coherence_inf, d.coherence_one, d.coherence_two), (4.0, 7.0, 5.0));
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.json");
        std::fs::write(&p, "{not json").unwrap();
        let e = info(&p).unwrap_err();
        assert!(e.message.contains("broken.json"), "{}", e.message);
        assert_eq!(e.exit_code(), 2);
    }
}
