//! Surrogates of hyperparameter-to-statistic maps whose Sobol indices follow
//! from the fitted coefficients without sampling.

pub mod lasso;
pub mod pce;
pub mod swelm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsmaps::StatisticKind;
use crate::io::{Cell, Table};
use crate::problem::HyperparameterBox;

pub use pce::{fit_pce, pce_sobol, PceConfig, PceSurrogate};
pub use swelm::{fit_swelm, swelm_sobol, SwelmConfig, SwelmSurrogate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Pce,
    Swelm,
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Pce => "pce",
            SurrogateKind::Swelm => "swelm",
        }
    }
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a report's numbers came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub statistic: Option<StatisticKind>,
    pub design_size: usize,
    /// Chain length behind importance-sampled values.
    pub total_samples: Option<u64>,
    pub seed: Option<u64>,
}

/// Slack allowed on the index bounds.
pub const INDEX_SLACK: f64 = 1e-9;

/// First-order and total Sobol indices per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolIndexReport {
    pub names: Vec<String>,
    pub first_order: Vec<f64>,
    pub total: Vec<f64>,
    pub variance: f64,
    /// `"pce"`, `"swelm"` or `"pick_freeze"`.
    pub method: String,
    /// Set when the variance vanishes; all indices are then zero.
    pub constant: bool,
    pub provenance: ReportProvenance,
}

impl SobolIndexReport {
    pub fn constant(names: Vec<String>, method: &str) -> Self {
        let n = names.len();
        Self {
            names,
            first_order: vec![0.0; n],
            total: vec![0.0; n],
            variance: 0.0,
            method: method.into(),
            constant: true,
            provenance: ReportProvenance::default(),
        }
    }

    pub fn with_provenance(mut self, provenance: ReportProvenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// `0 <= S_k <= S_k^tot <= 1` and `sum S_k <= 1`, up to [`INDEX_SLACK`].
    pub fn check_invariants(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (k, (s, t)) in self.first_order.iter().zip(&self.total).enumerate() {
            if !(*s >= -INDEX_SLACK && *s <= t + INDEX_SLACK && *t <= 1.0 + INDEX_SLACK) {
                problems.push(format!("{}: first-order {s}, total {t}", self.names[k]));
            }
        }
        let sum: f64 = self.first_order.iter().sum();
        if sum > 1.0 + INDEX_SLACK {
            problems.push(format!("first-order indices sum to {sum}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "{} indices out of bounds: {}",
                self.method,
                problems.join("; ")
            )))
        }
    }

    /// Input indices by decreasing total index; negative estimates count as
    /// zero and ties keep declaration order.
    pub fn ranking(&self) -> Vec<usize> {
        ranking(&self.total)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(vec!["input".into(), "first_order".into(), "total".into()])
            .meta("method", &self.method)
            .meta("variance", crate::io::fmt_num(self.variance))
            .meta("constant", self.constant)
            .meta("design_size", self.provenance.design_size);
        if let Some(s) = self.provenance.statistic {
            t = t.meta("statistic", s);
        }
        if let Some(m) = self.provenance.total_samples {
            t = t.meta("M", m);
        }
        if let Some(s) = self.provenance.seed {
            t = t.meta("seed", s);
        }
        for k in 0..self.names.len() {
            t.push(vec![
                Cell::Text(self.names[k].clone()),
                Cell::Num(self.first_order[k]),
                Cell::Num(self.total[k]),
            ]);
        }
        t
    }
}

/// Indices sorted by decreasing `max(value, 0)`, stable.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].max(0.0).total_cmp(&values[*a].max(0.0)));
    idx
}

/// A fitted surrogate of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Surrogate {
    Pce(PceSurrogate),
    Swelm(SwelmSurrogate),
}

impl Surrogate {
    pub fn kind(&self) -> SurrogateKind {
        match self {
            Surrogate::Pce(_) => SurrogateKind::Pce,
            Surrogate::Swelm(_) => SurrogateKind::Swelm,
        }
    }

    pub fn predict(&self, xi: &[f64]) -> f64 {
        match self {
            Surrogate::Pce(s) => s.predict(xi),
            Surrogate::Swelm(s) => s.predict(xi),
        }
    }

    pub fn sobol(&self) -> SobolIndexReport {
        match self {
            Surrogate::Pce(s) => pce_sobol(s),
            Surrogate::Swelm(s) => swelm_sobol(s),
        }
    }

    pub fn hyper_box(&self) -> &HyperparameterBox {
        match self {
            Surrogate::Pce(s) => &s.hyper_box,
            Surrogate::Swelm(s) => &s.hyper_box,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Checks shared by both fitters.
pub(crate) fn check_training_data(
    hyper_box: &HyperparameterBox,
    design: &[Vec<f64>],
    values: &[f64],
    min_size: usize,
) -> Result<()> {
    if design.len() != values.len() {
        return Err(Error::Config(vec![format!(
            "{} design points but {} values",
            design.len(),
            values.len()
        )]));
    }
    if design.len() < min_size {
        return Err(Error::DesignTooSmall(format!(
            "{} points given, at least {min_size} needed",
            design.len()
        )));
    }
    let mut problems = Vec::new();
    for (i, xi) in design.iter().enumerate() {
        if let Err(e) = hyper_box.check(xi) {
            problems.push(format!("design point {i}: {e}"));
        }
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        problems.push(format!("value {i} is not finite"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(first: Vec<f64>, total: Vec<f64>) -> SobolIndexReport {
        SobolIndexReport {
            names: (0..first.len()).map(|i| format!("x{i}")).collect(),
            first_order: first,
            total,
            variance: 1.0,
            method: "test".into(),
            constant: false,
            provenance: ReportProvenance::default(),
        }
    }

    #[test]
    fn invariant_violations_are_listed() {
        assert!(report(vec![0.2, 0.3], vec![0.4, 0.3]).check_invariants().is_ok());
        let err = report(vec![0.5, -0.1], vec![0.4, 0.3]).check_invariants().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x0") && msg.contains("x1"));
        assert!(report(vec![0.6, 0.6], vec![0.7, 0.7]).check_invariants().is_err());
    }

    #[test]
    fn ranking_clamps_and_breaks_ties_by_order() {
        assert_eq!(ranking(&[0.1, 0.5, -0.2, 0.5, -0.01]), vec![1, 3, 0, 2, 4]);
    }

    #[test]
    fn report_table_round_trip() {
        let r = report(vec![0.2, 0.3], vec![0.4, 0.3]);
        let t = Table::parse(&r.to_table().render(), "report").unwrap();
        assert_eq!(t.column("total").unwrap(), vec![0.4, 0.3]);
        assert_eq!(t.meta_value("method"), Some("test"));
    }
}
