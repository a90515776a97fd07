//! Phase pattern of the uncoupled limit.
//!
//! At `α = 0` with every radius at `a`, the steady phase equations on the
//! wedge reduce to `0 = Σ sin(θ′ + kπ/2 − θ)` per site, the sum running over
//! the resolved neighbours. The system is invariant under a global phase
//! shift; the solver pins one site and runs damped Newton on the rest, with a
//! gradient-flow fallback on the energy `E = −½ Σ cos Δ`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Direction, SiteIndex, WedgeTruncation};
use crate::linalg;

/// A weight `cos Δ` below `-WEIGHT_TOL` is flagged as negative.
pub const WEIGHT_TOL: f64 = 1e-8;

/// Phase value per wedge site, unwrapped (never reduced mod 2π).
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    wedge: Arc<WedgeTruncation>,
    theta: Vec<f64>,
}

impl PhaseField {
    pub fn new(wedge: Arc<WedgeTruncation>, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != wedge.len() {
            return Err(Error::InvalidSettings(format!(
                "phase field has {} values for {} sites",
                theta.len(),
                wedge.len()
            )));
        }
        if let Some(k) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidSettings(format!("non-finite phase at site {}", wedge.site(k))));
        }
        Ok(Self { wedge, theta })
    }

    pub fn wedge(&self) -> &Arc<WedgeTruncation> {
        &self.wedge
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn at(&self, s: SiteIndex) -> Option<f64> {
        self.wedge.index_of(s).map(|k| self.theta[k])
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self { wedge: Arc::clone(&self.wedge), theta: self.theta.iter().map(|t| t + c).collect() }
    }

    /// Writes `i,j,theta` rows with a header; `comment` lines are prefixed by `#`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "i,j,theta")?;
        for (s, t) in self.wedge.sites().iter().zip(&self.theta) {
            writeln!(out, "{},{},{}", s.i, s.j, t)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(wedge: Arc<WedgeTruncation>, input: R) -> Result<Self> {
        let mut theta = vec![f64::NAN; wedge.len()];
        let mut seen = 0usize;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("i,") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                return Err(Error::Parse(format!("expected i,j,theta; got `{line}`")));
            }
            let parse_i = |c: &str| c.trim().parse::<i64>().map_err(|e| Error::Parse(format!("{e}: `{line}`")));
            let s = SiteIndex::new(parse_i(cols[0])?, parse_i(cols[1])?);
            let t: f64 = cols[2].trim().parse().map_err(|e| Error::Parse(format!("{e}: `{line}`")))?;
            let k = wedge.index_of(s).ok_or(Error::OutsideWedge(s))?;
            if theta[k].is_nan() {
                seen += 1;
            }
            theta[k] = t;
        }
        if seen != wedge.len() {
            return Err(Error::Parse(format!("phase file covers {seen} of {} sites", wedge.len())));
        }
        Self::new(wedge, theta)
    }

    pub fn to_json(&self) -> PhaseFieldJson {
        PhaseFieldJson {
            n: self.wedge.size(),
            sites: self.wedge.sites().iter().map(|s| [s.i, s.j]).collect(),
            theta: self.theta.clone(),
        }
    }

    pub fn from_json(json: &PhaseFieldJson) -> Result<Self> {
        let wedge = Arc::new(WedgeTruncation::new(json.n)?);
        if json.sites.len() != wedge.len()
            || json.sites.iter().zip(wedge.sites()).any(|(a, b)| a[0] != b.i || a[1] != b.j)
        {
            return Err(Error::Parse("site list does not match the wedge ordering".into()));
        }
        Self::new(wedge, json.theta.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFieldJson {
    #[serde(rename = "N")]
    pub n: usize,
    pub sites: Vec<[i64; 2]>,
    pub theta: Vec<f64>,
}

/// Per-site sum of `sin(θ_target + kπ/2 − θ_site)` over resolved neighbours.
pub fn phase_residual(field: &PhaseField) -> Vec<f64> {
    let th = &field.theta;
    (0..th.len())
        .map(|s| {
            field
                .wedge
                .neighbors(s)
                .iter()
                .filter_map(|rec| rec.link())
                .map(|(p, off)| (th[p] + off - th[s]).sin())
                .sum()
        })
        .collect()
}

/// Jacobian of [`phase_residual`]: the weighted Laplacian with weights
/// `cos Δ`. Symmetric whenever the records pair up, which they do on Λ_N.
pub fn phase_jacobian(field: &PhaseField) -> DMatrix<f64> {
    let n = field.theta.len();
    let th = &field.theta;
    let mut jac = DMatrix::zeros(n, n);
    for s in 0..n {
        for (p, off) in field.wedge.neighbors(s).iter().filter_map(|rec| rec.link()) {
            let c = (th[p] + off - th[s]).cos();
            jac[(s, p)] += c;
            jac[(s, s)] -= c;
        }
    }
    jac
}

/// `E = −½ Σ_s Σ_links cos Δ`; its gradient is `−phase_residual`.
pub fn phase_energy(field: &PhaseField) -> f64 {
    let th = &field.theta;
    let mut e = 0.0;
    for s in 0..th.len() {
        for (p, off) in field.wedge.neighbors(s).iter().filter_map(|rec| rec.link()) {
            e -= 0.5 * (th[p] + off - th[s]).cos();
        }
    }
    e
}

/// One-armed winding about the rotation centre `(1/2, 1/2)`.
///
/// The phase advances by `π/2` per clockwise quarter turn, matching the
/// ghost rule, so it decreases with `j` along a column of the wedge.
pub fn initial_guess_spiral(wedge: &Arc<WedgeTruncation>) -> PhaseField {
    let theta = wedge
        .sites()
        .iter()
        .map(|s| (0.5 - s.j as f64).atan2(s.i as f64 - 0.5))
        .collect();
    PhaseField { wedge: Arc::clone(wedge), theta }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSolveSettings {
    pub max_iters: usize,
    /// Target ∞-norm of the residual.
    pub tol: f64,
    /// Pinned site; `None` means `(N, 1)`.
    #[serde(default)]
    pub gauge: Option<SiteIndex>,
    /// Pinned value; `None` keeps the initial-guess value at the gauge site.
    #[serde(default)]
    pub gauge_value: Option<f64>,
    /// Newton step scale in `(0, 1]`.
    pub damping: f64,
}

impl Default for PhaseSolveSettings {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-10, gauge: None, gauge_value: None, damping: 1.0 }
    }
}

impl PhaseSolveSettings {
    pub fn validate(&self, wedge: &WedgeTruncation) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidSettings(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidSettings(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if let Some(g) = self.gauge {
            if !wedge.contains(g) {
                return Err(Error::InvalidSettings(format!("gauge site {g} is not in the wedge")));
            }
        }
        if self.gauge_value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::InvalidSettings("gauge value must be finite".into()));
        }
        Ok(())
    }

    pub fn gauge_site(&self, wedge: &WedgeTruncation) -> SiteIndex {
        self.gauge.unwrap_or(SiteIndex::new(wedge.size() as i64, 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSolution {
    pub field: PhaseField,
    pub iterations: usize,
    pub residual_norm: f64,
    pub gradient_steps: usize,
    pub gauge: SiteIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFailure {
    pub iterations: usize,
    pub residual_norm: f64,
    pub best: PhaseField,
}

impl fmt::Display for PhaseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "residual {:e} after {} iterations (best iterate attached)",
            self.residual_norm, self.iterations
        )
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Solves the `α = 0` phase equations from the spiral guess.
pub fn solve_phase(wedge: &Arc<WedgeTruncation>, settings: &PhaseSolveSettings) -> Result<PhaseSolution> {
    settings.validate(wedge)?;
    let gauge = settings.gauge_site(wedge);
    let g = wedge.index_of(gauge).expect("validated gauge site");
    let mut field = initial_guess_spiral(wedge);
    if let Some(v) = settings.gauge_value {
        field.theta[g] = v;
    }
    let free: Vec<usize> = (0..wedge.len()).filter(|&k| k != g).collect();

    let mut residual = phase_residual(&field);
    let mut norm = inf_norm(&residual);
    let mut best = (norm, field.clone());
    let mut gradient_steps = 0;
    let mut iterations = 0;

    while norm > settings.tol && iterations < settings.max_iters {
        iterations += 1;
        let jac = phase_jacobian(&field);
        let reduced = jac.select_rows(&free).select_columns(&free);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -residual[k]));

        let merit = sq_norm(&residual);
        let mut accepted = false;
        if let Some(step) = linalg::solve(reduced, rhs) {
            let mut t = settings.damping;
            for _ in 0..30 {
                let mut trial = field.clone();
                for (&k, dx) in free.iter().zip(step.iter()) {
                    trial.theta[k] += t * dx;
                }
                let r = phase_residual(&trial);
                if sq_norm(&r) < merit {
                    field = trial;
                    residual = r;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            // Newton stalled: one backtracked gradient step on the energy.
            let e0 = phase_energy(&field);
            let mut eta = 1.0;
            for _ in 0..40 {
                let mut trial = field.clone();
                for &k in &free {
                    trial.theta[k] += eta * residual[k];
                }
                if phase_energy(&trial) < e0 {
                    field = trial;
                    break;
                }
                eta *= 0.5;
            }
            residual = phase_residual(&field);
            gradient_steps += 1;
        }
        norm = inf_norm(&residual);
        if norm < best.0 {
            best = (norm, field.clone());
        }
    }

    if norm <= settings.tol {
        Ok(PhaseSolution { field, iterations, residual_norm: norm, gradient_steps, gauge })
    } else {
        Err(Error::PhaseSolve(Box::new(PhaseFailure {
            iterations,
            residual_norm: best.0,
            best: best.1,
        })))
    }
}

/// `x` reduced into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub site: SiteIndex,
    pub direction: Direction,
    pub target: SiteIndex,
    pub quarter_turns: u8,
    /// Ghost-resolved phase difference, wrapped into `(-π, π]`.
    pub delta: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub pairs: Vec<WeightPair>,
    pub min_weight: f64,
    /// Indices into `pairs` whose weight is below `-WEIGHT_TOL`.
    pub flagged: Vec<usize>,
}

impl WeightReport {
    /// Pairs with `| |Δ| − π/2 | <= tol`.
    pub fn quarter_turn_pairs(&self, tol: f64) -> Vec<&WeightPair> {
        self.pairs.iter().filter(|p| (p.delta.abs() - FRAC_PI_2).abs() <= tol).collect()
    }

    pub fn pair(&self, site: SiteIndex, direction: Direction) -> Option<&WeightPair> {
        self.pairs.iter().find(|p| p.site == site && p.direction == direction)
    }
}

/// Lists every resolved link with its phase difference and weight.
pub fn check_weights(field: &PhaseField) -> WeightReport {
    let th = &field.theta;
    let mut pairs = Vec::new();
    for (s, &site) in field.wedge.sites().iter().enumerate() {
        for (dir, rec) in Direction::ALL.iter().zip(field.wedge.neighbors(s)) {
            let Some((p, off)) = rec.link() else { continue };
            let delta = wrap_angle(th[p] + off - th[s]);
            pairs.push(WeightPair {
                site,
                direction: *dir,
                target: rec.target().expect("linked record has a target"),
                quarter_turns: rec.quarter_turns(),
                delta,
                weight: delta.cos(),
            });
        }
    }
    let min_weight = pairs.iter().map(|p| p.weight).fold(f64::INFINITY, f64::min);
    let flagged = pairs.iter().enumerate().filter(|(_, p)| p.weight < -WEIGHT_TOL).map(|(k, _)| k).collect();
    WeightReport { pairs, min_weight, flagged }
}
