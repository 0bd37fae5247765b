//! Scenario configuration: built-in defaults, an optional TOML file and
//! command-line overrides, merged in that order of increasing precedence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    UnitOracles,
    ScalarGirsanov,
    ConditionalMeasure,
    Prop41,
    DriftChange,
    Bi1starConvergence,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::UnitOracles,
        Scenario::ScalarGirsanov,
        Scenario::ConditionalMeasure,
        Scenario::Prop41,
        Scenario::DriftChange,
        Scenario::Bi1starConvergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::UnitOracles => "unit-oracles",
            Scenario::ScalarGirsanov => "scalar-girsanov",
            Scenario::ConditionalMeasure => "conditional-measure",
            Scenario::Prop41 => "prop41",
            Scenario::DriftChange => "drift-change",
            Scenario::Bi1starConvergence => "bi1star-convergence",
        }
    }

    fn default_paths(self) -> usize {
        match self {
            Scenario::UnitOracles => 200,
            Scenario::ScalarGirsanov | Scenario::Prop41 => 200_000,
            Scenario::ConditionalMeasure => 50_000,
            Scenario::DriftChange => 100_000,
            Scenario::Bi1starConvergence => 10_000,
        }
    }

    fn default_grid(self) -> usize {
        match self {
            Scenario::Bi1starConvergence => 4096,
            _ => 64,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Named choices of the deterministic function `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RSpec {
    /// `r ≡ q`
    Constant(f64),
    /// `r(t) = t`
    Linear,
    /// No factorization `Ψ = rΦ` is declared.
    None,
}

impl RSpec {
    pub fn parse(name: &str, q: f64) -> Result<Self> {
        match name {
            "unit" => Ok(RSpec::Constant(1.0)),
            "zero" => Ok(RSpec::Constant(0.0)),
            "constant" => Ok(RSpec::Constant(q)),
            "linear" => Ok(RSpec::Linear),
            "none" => Ok(RSpec::None),
            _ => Err(Error::InvalidArgument(format!(
                "unknown r-spec `{name}` (expected unit, zero, constant, linear or none)"
            ))),
        }
    }

    pub fn eval(self, t: f64) -> Option<f64> {
        match self {
            RSpec::Constant(q) => Some(q),
            RSpec::Linear => Some(t),
            RSpec::None => None,
        }
    }

    pub fn derivative(self, _t: f64) -> Option<f64> {
        match self {
            RSpec::Constant(_) => Some(0.0),
            RSpec::Linear => Some(1.0),
            RSpec::None => None,
        }
    }
}

/// Every field optional; used for both the TOML file and the command line.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigLayer {
    pub scenario: Option<Scenario>,
    pub paths: Option<usize>,
    pub grid: Option<usize>,
    pub horizon: Option<f64>,
    pub q: Option<f64>,
    pub r_spec: Option<String>,
    pub bins: Option<usize>,
    pub confidence: Option<f64>,
    pub seed: Option<u64>,
    pub slots: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigLayer {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))
    }

    /// Fields set in `self` win over those of `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            scenario: self.scenario.or(lower.scenario),
            paths: self.paths.or(lower.paths),
            grid: self.grid.or(lower.grid),
            horizon: self.horizon.or(lower.horizon),
            q: self.q.or(lower.q),
            r_spec: self.r_spec.or(lower.r_spec),
            bins: self.bins.or(lower.bins),
            confidence: self.confidence.or(lower.confidence),
            seed: self.seed.or(lower.seed),
            slots: self.slots.or(lower.slots),
            threads: self.threads.or(lower.threads),
            out: self.out.or(lower.out),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub paths: usize,
    pub grid: usize,
    pub horizon: f64,
    pub q: f64,
    pub r_spec: RSpec,
    pub bins: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Number of `L¹` slots of the conditional-measure scenario.
    pub slots: usize,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub out: PathBuf,
}

impl ScenarioConfig {
    /// Fills unset fields with the scenario defaults and validates.
    pub fn resolve(layer: ConfigLayer) -> Result<Self> {
        let scenario = layer
            .scenario
            .ok_or_else(|| Error::InvalidArgument("no scenario given".into()))?;
        if layer.q.is_some() && layer.r_spec.is_some() && scenario == Scenario::DriftChange {
            return Err(Error::InvalidArgument(
                "give either q or an r-spec, not both".into(),
            ));
        }
        let q = layer.q.unwrap_or(1.0);
        let default_r = match scenario {
            Scenario::Bi1starConvergence => "linear",
            _ if layer.q.is_some() => "constant",
            _ => "unit",
        };
        let r_spec = RSpec::parse(layer.r_spec.as_deref().unwrap_or(default_r), q)?;
        let cfg = Self {
            scenario,
            paths: layer.paths.unwrap_or(scenario.default_paths()),
            grid: layer.grid.unwrap_or(scenario.default_grid()),
            horizon: layer.horizon.unwrap_or(1.0),
            q,
            r_spec,
            bins: layer.bins.unwrap_or(32),
            confidence: layer.confidence.unwrap_or(0.99),
            seed: layer.seed.unwrap_or(7),
            slots: layer.slots.unwrap_or(64),
            threads: layer.threads,
            out: layer.out.unwrap_or_else(|| PathBuf::from("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.paths < 1 {
            return bad("paths must be at least 1".into());
        }
        if self.grid < 2 {
            return bad(format!(
                "grid must have at least 2 steps, got {}",
                self.grid
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            ));
        }
        if !self.q.is_finite() {
            return bad("q must be finite".into());
        }
        if self.bins < 1 {
            return bad("bins must be at least 1".into());
        }
        if self.slots < 1 {
            return bad("slots must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}
