//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continuation::{alpha_grid, NewtonSettings};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::phase::PhaseSolveSettings;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { start: 0.0, step: 1e-3, stop: 0.1 }
    }
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.start != 0.0 {
            return Err(Error::InvalidSettings(format!("α grid must start at 0, got {}", self.start)));
        }
        alpha_grid(self.step, self.stop)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSpec {
    /// Coupling of the solution to extend and simulate; must lie on the grid.
    pub alpha: f64,
    pub dt: f64,
    /// `None` integrates one period of the solution's rotation.
    pub t_end: Option<f64>,
    pub stride: usize,
    pub collar: usize,
    /// Every how many stored states a trace record is written.
    pub write_every: usize,
    pub tolerance: f64,
    pub probe_amplitude: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            dt: 1e-3,
            t_end: None,
            stride: 10,
            collar: 2,
            write_every: 10,
            tolerance: 1e-6,
            probe_amplitude: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Random `ψ` samples for the quadratic-form check.
    pub samples: usize,
    /// Largest `n` in the `C(n)`, `Γ(n)` table; `None` means `N − 1`.
    pub max_n: Option<usize>,
    pub mu_samples: usize,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self { samples: 100, max_n: None, mu_samples: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(rename = "N")]
    pub n: usize,
    pub phase: PhaseSolveSettings,
    pub newton: NewtonSettings,
    pub grid: GridSpec,
    pub simulation: SimulationSpec,
    pub diagnostics: DiagnosticsSpec,
    /// Excluded from the config hash so relocated runs compare equal.
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            n: 20,
            phase: PhaseSolveSettings::default(),
            newton: NewtonSettings::default(),
            grid: GridSpec::default(),
            simulation: SimulationSpec::default(),
            diagnostics: DiagnosticsSpec::default(),
            output: PathBuf::from("out"),
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidSettings(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidDomainSize(0));
        }
        self.model.validate()?;
        if !(self.phase.tol > 0.0) || !(self.newton.tol > 0.0) {
            return Err(Error::InvalidSettings("solver tolerances must be positive".into()));
        }
        if !(self.phase.damping > 0.0 && self.phase.damping <= 1.0) {
            return Err(Error::InvalidSettings("phase damping must lie in (0, 1]".into()));
        }
        self.newton.validate()?;
        self.grid.values()?;
        let s = &self.simulation;
        if !(s.dt > 0.0) || s.stride == 0 || s.write_every == 0 || !(s.tolerance > 0.0) {
            return Err(Error::InvalidSettings("simulation needs dt > 0, stride >= 1, write_every >= 1, tolerance > 0".into()));
        }
        if s.t_end.is_some_and(|t| !(t >= s.dt)) {
            return Err(Error::InvalidSettings("simulation t_end must be at least dt".into()));
        }
        if !(s.alpha >= 0.0) {
            return Err(Error::InvalidSettings("simulation α must be nonnegative".into()));
        }
        if self.diagnostics.max_n.is_some_and(|m| m == 0 || m > self.n) {
            return Err(Error::InvalidSettings(format!("diagnostics.max_n must lie in 1..={}", self.n)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON with `output` blanked.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One-line provenance used as the leading comment of every CSV.
    pub fn provenance(&self) -> String {
        format!("{TOOL_NAME} {TOOL_VERSION} config_sha256={}", self.hash())
    }

    pub fn max_n(&self) -> usize {
        self.diagnostics.max_n.unwrap_or(self.n.saturating_sub(1).max(1))
    }
}
