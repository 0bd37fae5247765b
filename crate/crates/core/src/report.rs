//! Stage outcomes shared by the verification pipelines.

use serde::Serialize;

use crate::conditioning::MartingaleReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Pass,
    Fail,
}

/// One labelled stage. `test_passed` is the raw statistical verdict and
/// `pass` says whether it matches `expected`, so a negative control that
/// fails its test is a passing stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageOutcome {
    pub name: String,
    pub pass: bool,
    pub expected: Expectation,
    pub test_passed: bool,
    pub worst_residual: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl StageOutcome {
    pub fn new(
        name: &str,
        expected: Expectation,
        test_passed: bool,
        worst_residual: f64,
        tolerance: f64,
        detail: String,
    ) -> Self {
        Self {
            name: name.to_string(),
            pass: test_passed == (expected == Expectation::Pass),
            expected,
            test_passed,
            worst_residual,
            tolerance,
            detail,
        }
    }

    /// Residual and tolerance are those of the binding cell, the one with
    /// the largest ratio; the largest absolute residual goes in `detail`.
    pub fn from_martingale(name: &str, expected: Expectation, r: &MartingaleReport) -> Self {
        let (residual, tolerance) = r
            .binding_cell()
            .map_or((0.0, 0.0), |c| (c.residual, c.tolerance));
        Self::new(
            name,
            expected,
            r.pass,
            residual,
            tolerance,
            format!(
                "{} of {} cells over tolerance, worst ratio {:.3}, largest residual {:.3e}",
                r.failing_cells(),
                r.per_cell.len(),
                r.worst_ratio,
                r.worst_residual
            ),
        )
    }

    /// Deterministic gap check `gap <= tolerance`.
    pub fn from_gap(name: &str, gap: f64, tolerance: f64) -> Self {
        Self::new(
            name,
            Expectation::Pass,
            gap <= tolerance,
            gap,
            tolerance,
            String::new(),
        )
    }
}

pub fn all_pass(stages: &[StageOutcome]) -> bool {
    stages.iter().all(|s| s.pass)
}
