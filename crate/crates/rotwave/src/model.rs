//! Lambda-Omega reaction terms.
//!
//! Every site obeys `ż = z[λ(|z|) + iω(|z|, α)]` when uncoupled. The solvers
//! only see the [`ReactionModel`] trait; [`ModelSpec`] is the serializable
//! configuration that ships two families: the polynomial normal form
//! `λ(R) = ±(a² − R²)`, `ω(R, α) = β + αε′R²`, and a tabulated family built
//! from Hermite samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for `λ(a) = 0` and `ω₁(a, α) = 0`.
pub const HYPOTHESIS_TOL: f64 = 1e-14;
/// `|λ′(a)|` below this counts as degenerate.
pub const NONDEGENERACY_TOL: f64 = 1e-12;

/// Reaction functions with analytic derivatives.
///
/// `omega(R, α) - omega(a, α) == α * omega1(R, α)` is expected to hold; see
/// [`validate_hypothesis`].
pub trait ReactionModel: Send + Sync {
    fn amplitude(&self) -> f64;
    fn lambda(&self, r: f64) -> f64;
    fn lambda_deriv(&self, r: f64) -> f64;
    fn omega(&self, r: f64, alpha: f64) -> f64;
    fn omega1(&self, r: f64, alpha: f64) -> f64;
    fn omega1_partial_r(&self, r: f64, alpha: f64) -> f64;

    /// `∂ω₁/∂α`; the default is a central difference.
    fn omega1_partial_alpha(&self, r: f64, alpha: f64) -> f64 {
        let h = 1e-6;
        (self.omega1(r, alpha + h) - self.omega1(r, alpha - h)) / (2.0 * h)
    }

    /// Base frequency `Ω(α) = ω(a, α)`.
    fn base_frequency(&self, alpha: f64) -> f64 {
        self.omega(self.amplitude(), alpha)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Polynomial,
    Table,
}

/// One Hermite node: position, value and slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteNode {
    pub r: f64,
    pub value: f64,
    pub slope: f64,
}

/// Piecewise-cubic Hermite samples of `λ(R)` and `ω₁(R)`; `ω₁` is taken
/// independent of `α`. Outside the sampled range the end slopes extrapolate
/// linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTable {
    pub lambda: Vec<HermiteNode>,
    pub omega1: Vec<HermiteNode>,
}

fn hermite(nodes: &[HermiteNode], r: f64) -> (f64, f64) {
    let first = nodes[0];
    let last = nodes[nodes.len() - 1];
    if r <= first.r {
        return (first.value + first.slope * (r - first.r), first.slope);
    }
    if r >= last.r {
        return (last.value + last.slope * (r - last.r), last.slope);
    }
    let k = nodes.partition_point(|n| n.r <= r).clamp(1, nodes.len() - 1);
    let (p, q) = (nodes[k - 1], nodes[k]);
    let h = q.r - p.r;
    let t = (r - p.r) / h;
    let (t2, t3) = (t * t, t * t * t);
    let value = (2.0 * t3 - 3.0 * t2 + 1.0) * p.value
        + (t3 - 2.0 * t2 + t) * h * p.slope
        + (-2.0 * t3 + 3.0 * t2) * q.value
        + (t3 - t2) * h * q.slope;
    let slope = ((6.0 * t2 - 6.0 * t) * p.value
        + (3.0 * t2 - 4.0 * t + 1.0) * h * p.slope
        + (-6.0 * t2 + 6.0 * t) * q.value
        + (3.0 * t2 - 2.0 * t) * h * q.slope)
        / h;
    (value, slope)
}

/// Run-configuration form of the reaction model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub family: Family,
    pub a: f64,
    /// `+1` selects `λ = a² − R²` (attracting), `-1` selects `λ = R² − a²`.
    #[serde(default = "default_sign")]
    pub sign: i8,
    pub beta: f64,
    pub eps_prime: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<ModelTable>,
}

fn default_sign() -> i8 {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::polynomial(1.0, 1, 1.0, 1.0)
    }
}

impl ModelSpec {
    pub fn polynomial(a: f64, sign: i8, beta: f64, eps_prime: f64) -> Self {
        Self { family: Family::Polynomial, a, sign, beta, eps_prime, table: None }
    }

    pub fn tabulated(a: f64, beta: f64, table: ModelTable) -> Self {
        Self { family: Family::Table, a, sign: 1, beta, eps_prime: 0.0, table: Some(table) }
    }

    /// Structural checks; the hypothesis itself is checked numerically by
    /// [`validate_hypothesis`].
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::InvalidSettings(format!("amplitude a = {} must be positive", self.a)));
        }
        if self.sign != 1 && self.sign != -1 {
            return Err(Error::InvalidSettings(format!("sign must be +1 or -1, got {}", self.sign)));
        }
        if !self.beta.is_finite() || !self.eps_prime.is_finite() {
            return Err(Error::InvalidSettings("beta and eps_prime must be finite".into()));
        }
        match (self.family, &self.table) {
            (Family::Table, None) => Err(Error::InvalidSettings("table family needs a `table` entry".into())),
            (Family::Table, Some(t)) => {
                for (name, nodes) in [("lambda", &t.lambda), ("omega1", &t.omega1)] {
                    if nodes.len() < 2 || nodes.windows(2).any(|w| w[1].r <= w[0].r) {
                        return Err(Error::InvalidSettings(format!(
                            "{name} table needs at least two strictly increasing nodes"
                        )));
                    }
                }
                Ok(())
            }
            (Family::Polynomial, _) => Ok(()),
        }
    }

    fn table(&self) -> &ModelTable {
        self.table.as_ref().expect("table family validated with a table")
    }

    fn check_radius(r: f64) -> Result<()> {
        if r < 0.0 {
            Err(Error::NegativeRadius(r))
        } else {
            Ok(())
        }
    }

    pub fn lambda_eval(&self, r: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.lambda(r))
    }

    pub fn lambda_deriv_eval(&self, r: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.lambda_deriv(r))
    }

    pub fn omega_eval(&self, r: f64, alpha: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.omega(r, alpha))
    }

    pub fn omega1_eval(&self, r: f64, alpha: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.omega1(r, alpha))
    }

    pub fn omega1_partial_r_eval(&self, r: f64, alpha: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.omega1_partial_r(r, alpha))
    }
}

impl ReactionModel for ModelSpec {
    fn amplitude(&self) -> f64 {
        self.a
    }

    fn lambda(&self, r: f64) -> f64 {
        match self.family {
            Family::Polynomial => f64::from(self.sign) * (self.a * self.a - r * r),
            Family::Table => hermite(&self.table().lambda, r).0,
        }
    }

    fn lambda_deriv(&self, r: f64) -> f64 {
        match self.family {
            Family::Polynomial => -2.0 * f64::from(self.sign) * r,
            Family::Table => hermite(&self.table().lambda, r).1,
        }
    }

    fn omega(&self, r: f64, alpha: f64) -> f64 {
        match self.family {
            Family::Polynomial => self.beta + alpha * self.eps_prime * r * r,
            Family::Table => self.beta + alpha * self.omega1(r, alpha),
        }
    }

    fn omega1(&self, r: f64, _alpha: f64) -> f64 {
        match self.family {
            Family::Polynomial => {
                let d = r - self.a;
                2.0 * self.eps_prime * self.a * d + self.eps_prime * d * d
            }
            Family::Table => hermite(&self.table().omega1, r).0,
        }
    }

    fn omega1_partial_r(&self, r: f64, _alpha: f64) -> f64 {
        match self.family {
            Family::Polynomial => 2.0 * self.eps_prime * self.a + 2.0 * self.eps_prime * (r - self.a),
            Family::Table => hermite(&self.table().omega1, r).1,
        }
    }

    fn omega1_partial_alpha(&self, _r: f64, _alpha: f64) -> f64 {
        0.0
    }

    fn base_frequency(&self, alpha: f64) -> f64 {
        match self.family {
            Family::Polynomial => self.beta + alpha * self.eps_prime * self.a * self.a,
            Family::Table => self.beta + alpha * self.omega1(self.a, alpha),
        }
    }
}

/// Constants of the linearisation at `(α, r) = (0, a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub a: f64,
    pub lambda_prime_at_a: f64,
    /// `K = ∂₁ω₁(a, 0)`.
    pub k: f64,
    /// `Ω(0) = ω(a, 0)`.
    pub omega_zero: f64,
}

impl ModelConstants {
    pub fn of(model: &dyn ReactionModel) -> Self {
        let a = model.amplitude();
        Self {
            a,
            lambda_prime_at_a: model.lambda_deriv(a),
            k: model.omega1_partial_r(a, 0.0),
            omega_zero: model.base_frequency(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    /// Worst measured residual for this condition.
    pub residual: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub conditions: Vec<ConditionCheck>,
    /// Sampled `α` values at which `ω₁(a, α) = 0` failed.
    pub omega1_failures: Vec<f64>,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// The `α` grid `{0, 0.01, …, 0.5}` used for the `ω₁(a, α) = 0` check.
pub fn hypothesis_alpha_grid() -> Vec<f64> {
    (0..=50).map(|k| f64::from(k) * 0.01).collect()
}

/// Numerical check of the amplitude and frequency conditions. Failures are
/// reported, never raised.
pub fn validate_hypothesis(model: &dyn ReactionModel) -> HypothesisReport {
    let a = model.amplitude();
    let mut conditions = Vec::new();

    conditions.push(ConditionCheck {
        name: "amplitude_positive".into(),
        passed: a > 0.0 && a.is_finite(),
        residual: if a > 0.0 { 0.0 } else { -a },
        detail: format!("a = {a}"),
    });

    let lam_a = if a >= 0.0 { model.lambda(a) } else { f64::NAN };
    let dlam_a = if a >= 0.0 { model.lambda_deriv(a) } else { f64::NAN };
    conditions.push(ConditionCheck {
        name: "lambda_root".into(),
        passed: lam_a.abs() <= HYPOTHESIS_TOL,
        residual: lam_a.abs(),
        detail: format!("lambda(a) = {lam_a:e}"),
    });
    conditions.push(ConditionCheck {
        name: "lambda_nondegenerate".into(),
        passed: dlam_a.abs() > NONDEGENERACY_TOL,
        residual: dlam_a.abs(),
        detail: format!("lambda'(a) = {dlam_a}"),
    });

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for alpha in hypothesis_alpha_grid() {
        let w = if a >= 0.0 { model.omega1(a, alpha) } else { f64::NAN };
        if !(w.abs() <= HYPOTHESIS_TOL) {
            failures.push(alpha);
        }
        worst = worst.max(w.abs());
    }
    conditions.push(ConditionCheck {
        name: "omega1_vanishes_at_a".into(),
        passed: failures.is_empty(),
        residual: worst,
        detail: format!("{} of 51 sampled alpha values fail", failures.len()),
    });

    HypothesisReport { conditions, omega1_failures: failures }
}
