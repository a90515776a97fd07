//! Steady rotating waves for `α > 0` by Newton's method and natural
//! continuation from the uncoupled limit `(α, r, θ) = (0, a, θ̄)`.
//!
//! On a site with resolved links `p` and phase offsets `kπ/2`,
//!
//! ```text
//! F¹ = α Σ [r_p cos(mΔ) − r] + r λ(r)
//! F² = Σ (r_p / r) sin(mΔ) + ω₁(r, α),      Δ = θ_p + kπ/2 − θ
//! ```
//!
//! and the weighted form multiplies `F²` by `1/i`.
//!
//! A finite truncation has no root at the frequency `ω(a, α)` once `ω₁` is
//! not identically zero: summing `r²F²` over the sites cancels the coupling
//! terms pairwise and leaves `Σ r² ω₁(r, α)`, while `Σ r F¹ = 0` forces
//! `Σ r²(a² − r²) ≥ 0`. The Newton system therefore carries one extra
//! unknown `ν`, a constant added to every `F²`. The wave rotates at
//! `Ω = ω(a, α) − αν`. The unknown replaces the phase at the gauge site,
//! which is always pinned since `F` is invariant under a global phase shift.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LinkGraph;
use crate::lattice::{SiteIndex, WedgeTruncation};
use crate::linalg::{self, inf_norm};
use crate::model::ReactionModel;
use crate::phase::PhaseField;

/// Radii and phases on the wedge, unknowns of the steady-state problem.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarField {
    wedge: Arc<WedgeTruncation>,
    r: Vec<f64>,
    theta: Vec<f64>,
}

impl PolarField {
    pub fn new(wedge: Arc<WedgeTruncation>, r: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if r.len() != wedge.len() || theta.len() != wedge.len() {
            return Err(Error::InvalidSettings(format!(
                "field has {} radii and {} phases for {} sites",
                r.len(),
                theta.len(),
                wedge.len()
            )));
        }
        check_radii(&wedge, &r)?;
        if let Some(k) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidSettings(format!("non-finite phase at site {}", wedge.site(k))));
        }
        Ok(Self { wedge, r, theta })
    }

    /// `r ≡ a`, `θ = θ̄`.
    pub fn base(a: f64, phase: &PhaseField) -> Result<Self> {
        let wedge = Arc::clone(phase.wedge());
        Self::new(wedge, vec![a; phase.theta().len()], phase.theta().to_vec())
    }

    pub fn wedge(&self) -> &Arc<WedgeTruncation> {
        &self.wedge
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// `‖r − a‖∞`.
    pub fn r_deviation(&self, a: f64) -> f64 {
        self.r.iter().fold(0.0, |m, r| m.max((r - a).abs()))
    }

    /// `‖θ − reference‖∞`.
    pub fn theta_deviation(&self, reference: &[f64]) -> f64 {
        self.theta.iter().zip(reference).fold(0.0, |m, (t, b)| m.max((t - b).abs()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "i,j,r,theta")?;
        for ((s, r), t) in self.wedge.sites().iter().zip(&self.r).zip(&self.theta) {
            writeln!(out, "{},{},{},{}", s.i, s.j, r, t)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(wedge: Arc<WedgeTruncation>, input: R) -> Result<Self> {
        let n = wedge.len();
        let (mut r, mut theta) = (vec![f64::NAN; n], vec![f64::NAN; n]);
        let mut seen = 0;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("i,") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(Error::Parse(format!("expected i,j,r,theta; got `{line}`")));
            }
            let bad = |e: &dyn fmt::Display| Error::Parse(format!("{e}: `{line}`"));
            let i: i64 = cols[0].parse().map_err(|e| bad(&e))?;
            let j: i64 = cols[1].parse().map_err(|e| bad(&e))?;
            let k = wedge.index_of(SiteIndex::new(i, j)).ok_or(Error::OutsideWedge(SiteIndex::new(i, j)))?;
            if r[k].is_nan() {
                seen += 1;
            }
            r[k] = cols[2].parse().map_err(|e| bad(&e))?;
            theta[k] = cols[3].parse().map_err(|e| bad(&e))?;
        }
        if seen != n {
            return Err(Error::Parse(format!("solution file covers {seen} of {n} sites")));
        }
        Self::new(wedge, r, theta)
    }
}

fn check_radii(wedge: &WedgeTruncation, r: &[f64]) -> Result<()> {
    match r.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        Some(k) => Err(Error::NonPositiveRadius { site: wedge.site(k), radius: r[k] }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualOptions {
    /// Multiply the phase residual by `1/i`.
    pub weighted: bool,
    /// Arm count `m`.
    pub arms: u32,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self { weighted: false, arms: 1 }
    }
}

impl ResidualOptions {
    pub fn weighted() -> Self {
        Self { weighted: true, arms: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms == 0 {
            return Err(Error::InvalidSettings("arm count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
}

impl Residual {
    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.f1).max(inf_norm(&self.f2))
    }

    /// `[F¹; F²]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.f1.iter().chain(&self.f2).copied().collect()
    }
}

/// Analytic derivatives of the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    /// `2n × 2n`; columns are all radii then all phases, rows `F¹` then `F²`.
    pub state: DMatrix<f64>,
    /// `∂F/∂α`, length `2n`.
    pub alpha: DVector<f64>,
}

/// Row weights: `1/i` per wedge site.
pub fn column_weights(wedge: &WedgeTruncation) -> Vec<f64> {
    wedge.sites().iter().map(|s| 1.0 / s.i as f64).collect()
}

/// Residual on an arbitrary link graph.
pub fn graph_residual(
    graph: &LinkGraph,
    weights: Option<&[f64]>,
    arms: u32,
    alpha: f64,
    r: &[f64],
    theta: &[f64],
    model: &dyn ReactionModel,
) -> Residual {
    let m = f64::from(arms);
    let n = graph.len();
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    for s in 0..n {
        let (mut coupling, mut turning) = (0.0, 0.0);
        for (p, off) in graph.links(s) {
            let d = m * (theta[p] + off - theta[s]);
            coupling += r[p] * d.cos() - r[s];
            turning += r[p] / r[s] * d.sin();
        }
        f1[s] = alpha * coupling + r[s] * model.lambda(r[s]);
        let w = weights.map_or(1.0, |w| w[s]);
        f2[s] = w * (turning + model.omega1(r[s], alpha));
    }
    Residual { f1, f2 }
}

/// Jacobian on an arbitrary link graph.
pub fn graph_jacobian(
    graph: &LinkGraph,
    weights: Option<&[f64]>,
    arms: u32,
    alpha: f64,
    r: &[f64],
    theta: &[f64],
    model: &dyn ReactionModel,
) -> Jacobian {
    let m = f64::from(arms);
    let n = graph.len();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    let mut dalpha = DVector::zeros(2 * n);
    for s in 0..n {
        let w = weights.map_or(1.0, |w| w[s]);
        let (rs, row2) = (r[s], n + s);
        jac[(s, s)] += model.lambda(rs) + rs * model.lambda_deriv(rs);
        jac[(row2, s)] += w * model.omega1_partial_r(rs, alpha);
        dalpha[row2] = w * model.omega1_partial_alpha(rs, alpha);
        for (p, off) in graph.links(s) {
            let d = m * (theta[p] + off - theta[s]);
            let (sn, c) = d.sin_cos();
            // F¹
            jac[(s, p)] += alpha * c;
            jac[(s, s)] -= alpha;
            jac[(s, n + p)] -= alpha * r[p] * m * sn;
            jac[(s, n + s)] += alpha * r[p] * m * sn;
            dalpha[s] += r[p] * c - rs;
            // F²
            jac[(row2, p)] += w * sn / rs;
            jac[(row2, s)] -= w * r[p] / (rs * rs) * sn;
            jac[(row2, n + p)] += w * r[p] / rs * m * c;
            jac[(row2, n + s)] -= w * r[p] / rs * m * c;
        }
    }
    Jacobian { state: jac, alpha: dalpha }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidSettings(format!("α must be finite and nonnegative, got {alpha}")));
    }
    Ok(())
}

/// `(F¹, F²)` on the wedge, or `(F¹, G²)` in weighted mode.
pub fn residual_f(
    alpha: f64,
    x: &PolarField,
    model: &dyn ReactionModel,
    opts: ResidualOptions,
) -> Result<Residual> {
    opts.validate()?;
    check_alpha(alpha)?;
    check_radii(&x.wedge, &x.r)?;
    let graph = LinkGraph::wedge(&x.wedge);
    let w = opts.weighted.then(|| column_weights(&x.wedge));
    Ok(graph_residual(&graph, w.as_deref(), opts.arms, alpha, &x.r, &x.theta, model))
}

/// The `m`-armed residual: sines and cosines of `m·Δ`, with the ghost
/// offsets `kπ/2` added to the phase before the factor `m`.
pub fn residual_multiarm(
    m: u32,
    alpha: f64,
    x: &PolarField,
    model: &dyn ReactionModel,
) -> Result<Residual> {
    residual_f(alpha, x, model, ResidualOptions { weighted: false, arms: m })
}

pub fn jacobian(
    alpha: f64,
    x: &PolarField,
    model: &dyn ReactionModel,
    opts: ResidualOptions,
) -> Result<Jacobian> {
    opts.validate()?;
    check_alpha(alpha)?;
    check_radii(&x.wedge, &x.r)?;
    let graph = LinkGraph::wedge(&x.wedge);
    let w = opts.weighted.then(|| column_weights(&x.wedge));
    Ok(graph_jacobian(&graph, w.as_deref(), opts.arms, alpha, &x.r, &x.theta, model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSettings {
    /// Target ∞-norm of the residual (including the `ν` shift).
    pub tol: f64,
    pub max_iters: usize,
    /// Newton step scale in `(0, 1]`.
    pub damping: f64,
    /// Pinned phase site; `None` means `(N, 1)`.
    #[serde(default)]
    pub gauge: Option<SiteIndex>,
    #[serde(default)]
    pub options: ResidualOptions,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 25, damping: 1.0, gauge: None, options: ResidualOptions::default() }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidSettings(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidSettings(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        self.options.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    MaxIterations,
    LeftBall,
    Singular,
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonFailure {
    pub kind: FailureKind,
    pub alpha: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    pub last: PolarField,
}

impl fmt::Display for NewtonFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            FailureKind::MaxIterations => "iteration cap reached",
            FailureKind::LeftBall => "radii left the ball |r - a| < a/2",
            FailureKind::Singular => "singular Jacobian",
            FailureKind::Stalled => "line search could not reduce the residual",
        };
        write!(
            f,
            "{what} at α = {} after {} iterations (residual {:e})",
            self.alpha, self.iterations, self.residual_norm
        )
    }
}

/// A converged steady state with its frequency shift.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveSolution {
    pub field: PolarField,
    pub alpha: f64,
    /// `ν`; the wave rotates at `ω(a, α) − αν`.
    pub freq_shift: f64,
    pub iterations: usize,
    pub residual_norm: f64,
}

impl WaveSolution {
    pub fn rotation_frequency(&self, model: &dyn ReactionModel) -> f64 {
        model.base_frequency(self.alpha) - self.alpha * self.freq_shift
    }
}

/// State of a Newton iteration on a link graph.
pub(crate) struct GraphProblem<'a> {
    pub graph: &'a LinkGraph,
    pub weights: Option<&'a [f64]>,
    pub arms: u32,
    pub alpha: f64,
    pub model: &'a dyn ReactionModel,
    pub gauge: usize,
}

pub(crate) struct GraphNewton {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub nu: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    pub failure: Option<FailureKind>,
}

impl GraphProblem<'_> {
    fn augmented(&self, r: &[f64], theta: &[f64], nu: f64) -> Vec<f64> {
        let res = graph_residual(self.graph, self.weights, self.arms, self.alpha, r, theta, self.model);
        let mut out = res.f1;
        out.extend(res.f2.iter().enumerate().map(|(s, v)| v + self.weights.map_or(1.0, |w| w[s]) * nu));
        out
    }

    pub fn solve(&self, r0: &[f64], theta0: &[f64], nu0: f64, settings: &NewtonSettings) -> GraphNewton {
        let n = self.graph.len();
        let a = self.model.amplitude();
        let in_ball = |r: &[f64]| r.iter().all(|v| (v - a).abs() < 0.5 * a);
        let (mut r, mut theta, mut nu) = (r0.to_vec(), theta0.to_vec(), nu0);
        let mut f = self.augmented(&r, &theta, nu);
        let mut norm = inf_norm(&f);
        let mut iterations = 0;
        let done = |failure, r, theta, nu, iterations, residual_norm| GraphNewton {
            r,
            theta,
            nu,
            iterations,
            residual_norm,
            failure,
        };
        if !in_ball(&r) {
            return done(Some(FailureKind::LeftBall), r, theta, nu, 0, norm);
        }
        // Unknowns: radii, phases without the gauge site, then ν in its slot.
        let cols: Vec<usize> = (0..2 * n).filter(|&c| c != n + self.gauge).collect();
        while norm > settings.tol {
            if iterations == settings.max_iters {
                return done(Some(FailureKind::MaxIterations), r, theta, nu, iterations, norm);
            }
            iterations += 1;
            let jac = graph_jacobian(self.graph, self.weights, self.arms, self.alpha, &r, &theta, self.model);
            let mut reduced = DMatrix::zeros(2 * n, 2 * n);
            for (k, &c) in cols.iter().enumerate() {
                reduced.set_column(k, &jac.state.column(c));
            }
            for s in 0..n {
                reduced[(n + s, 2 * n - 1)] = self.weights.map_or(1.0, |w| w[s]);
            }
            let rhs = DVector::from_iterator(2 * n, f.iter().map(|v| -v));
            let Some(step) = linalg::solve(reduced, rhs) else {
                return done(Some(FailureKind::Singular), r, theta, nu, iterations, norm);
            };
            let merit: f64 = f.iter().map(|v| v * v).sum();
            let mut t = settings.damping;
            let mut accepted = None;
            let mut outside = false;
            for _ in 0..30 {
                let (mut tr, mut tt) = (r.clone(), theta.clone());
                for (k, &c) in cols.iter().enumerate() {
                    if c < n {
                        tr[c] += t * step[k];
                    } else {
                        tt[c - n] += t * step[k];
                    }
                }
                let tnu = nu + t * step[2 * n - 1];
                if !in_ball(&tr) {
                    outside = true;
                    t *= 0.5;
                    continue;
                }
                let tf = self.augmented(&tr, &tt, tnu);
                if tf.iter().map(|v| v * v).sum::<f64>() < merit {
                    accepted = Some((tr, tt, tnu, tf));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((tr, tt, tnu, tf)) => {
                    (r, theta, nu, f) = (tr, tt, tnu, tf);
                    norm = inf_norm(&f);
                }
                None => {
                    let kind = if outside { FailureKind::LeftBall } else { FailureKind::Stalled };
                    return done(Some(kind), r, theta, nu, iterations, norm);
                }
            }
        }
        done(None, r, theta, nu, iterations, norm)
    }
}

/// Newton's method at fixed `α` from `init`, with `ν` starting at `nu0`.
pub fn newton_solve(
    alpha: f64,
    init: &PolarField,
    nu0: f64,
    model: &dyn ReactionModel,
    settings: &NewtonSettings,
) -> Result<WaveSolution> {
    settings.validate()?;
    check_alpha(alpha)?;
    let wedge = &init.wedge;
    let gauge_site = settings.gauge.unwrap_or(SiteIndex::new(wedge.size() as i64, 1));
    let gauge = wedge
        .index_of(gauge_site)
        .ok_or_else(|| Error::InvalidSettings(format!("gauge site {gauge_site} is not in the wedge")))?;
    let graph = LinkGraph::wedge(wedge);
    let w = settings.options.weighted.then(|| column_weights(wedge));
    let problem = GraphProblem {
        graph: &graph,
        weights: w.as_deref(),
        arms: settings.options.arms,
        alpha,
        model,
        gauge,
    };
    let out = problem.solve(&init.r, &init.theta, nu0, settings);
    let field = PolarField { wedge: Arc::clone(wedge), r: out.r, theta: out.theta };
    match out.failure {
        None => Ok(WaveSolution {
            field,
            alpha,
            freq_shift: out.nu,
            iterations: out.iterations,
            residual_norm: out.residual_norm,
        }),
        Some(kind) => Err(Error::Newton(Box::new(NewtonFailure {
            kind,
            alpha,
            iterations: out.iterations,
            residual_norm: out.residual_norm,
            last: field,
        }))),
    }
}

/// `0, step, 2·step, …` up to `stop`, computed as integer multiples.
pub fn alpha_grid(step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && stop >= 0.0 && step.is_finite() && stop.is_finite()) {
        return Err(Error::InvalidSettings(format!("bad α grid: step {step}, stop {stop}")));
    }
    let count = (stop / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| k as f64 * step).collect())
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) {
        return Err(Error::InvalidSettings("α grid must start at 0".into()));
    }
    if grid.iter().any(|a| !a.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSettings("α grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub alpha: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    pub r_deviation: f64,
    pub theta_deviation: f64,
    pub freq_shift: f64,
    pub rotation_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub alpha: f64,
    pub last_good_alpha: f64,
    pub message: String,
}

/// Natural continuation output; `solutions[k]` belongs to `steps[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationRun {
    pub grid: Vec<f64>,
    pub base_theta: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub solutions: Vec<WaveSolution>,
    pub failure: Option<StepFailure>,
}

impl ContinuationRun {
    pub fn completed(&self) -> bool {
        self.failure.is_none() && self.steps.len() == self.grid.len()
    }

    pub fn max_alpha(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.alpha)
    }

    pub fn solution_at(&self, alpha: f64) -> Option<&WaveSolution> {
        self.solutions.iter().find(|s| (s.alpha - alpha).abs() <= 1e-12 * alpha.abs().max(1.0))
    }
}

fn record(sol: &WaveSolution, model: &dyn ReactionModel, base_theta: &[f64]) -> StepRecord {
    StepRecord {
        alpha: sol.alpha,
        iterations: sol.iterations,
        residual_norm: sol.residual_norm,
        r_deviation: sol.field.r_deviation(model.amplitude()),
        theta_deviation: sol.field.theta_deviation(base_theta),
        freq_shift: sol.freq_shift,
        rotation_frequency: sol.rotation_frequency(model),
    }
}

/// Steps through `grid` from the exact base solution at `α = 0`, warm
/// starting each solve from the previous one. Stops at the first failure.
pub fn continue_in_alpha(
    grid: &[f64],
    model: &dyn ReactionModel,
    base: &PhaseField,
    settings: &NewtonSettings,
) -> Result<ContinuationRun> {
    validate_grid(grid)?;
    settings.validate()?;
    let start = PolarField::base(model.amplitude(), base)?;
    let graph = LinkGraph::wedge(start.wedge());
    let w = settings.options.weighted.then(|| column_weights(start.wedge()));
    let res = graph_residual(&graph, w.as_deref(), settings.options.arms, 0.0, &start.r, &start.theta, model);
    let first = WaveSolution {
        field: start,
        alpha: 0.0,
        freq_shift: 0.0,
        iterations: 0,
        residual_norm: res.inf_norm(),
    };
    let mut run = ContinuationRun {
        grid: grid.to_vec(),
        base_theta: base.theta().to_vec(),
        steps: vec![record(&first, model, base.theta())],
        solutions: vec![first],
        failure: None,
    };
    extend_run(&mut run, model, settings)?;
    Ok(run)
}

/// Continues a (possibly partial) run through the rest of its grid.
pub fn resume(
    mut run: ContinuationRun,
    grid: &[f64],
    model: &dyn ReactionModel,
    settings: &NewtonSettings,
) -> Result<ContinuationRun> {
    validate_grid(grid)?;
    settings.validate()?;
    let done = run.steps.len();
    if done == 0 || grid.len() < done || grid[..done].iter().zip(&run.steps).any(|(g, s)| *g != s.alpha) {
        return Err(Error::InvalidSettings("grid does not extend the saved run".into()));
    }
    run.grid = grid.to_vec();
    run.failure = None;
    extend_run(&mut run, model, settings)?;
    Ok(run)
}

fn extend_run(run: &mut ContinuationRun, model: &dyn ReactionModel, settings: &NewtonSettings) -> Result<()> {
    for k in run.steps.len()..run.grid.len() {
        let alpha = run.grid[k];
        let prev = run.solutions.last().expect("run holds the base solution");
        match newton_solve(alpha, &prev.field, prev.freq_shift, model, settings) {
            Ok(sol) => {
                run.steps.push(record(&sol, model, &run.base_theta));
                run.solutions.push(sol);
            }
            Err(Error::Newton(fail)) => {
                run.failure = Some(StepFailure {
                    alpha,
                    last_good_alpha: prev.alpha,
                    message: fail.to_string(),
                });
                return Ok(());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Index file written next to the per-α CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    #[serde(rename = "N")]
    pub n: usize,
    pub grid: Vec<f64>,
    pub max_alpha: f64,
    pub completed: bool,
    pub steps: Vec<StepRecord>,
    pub files: Vec<String>,
    pub failure: Option<StepFailure>,
    pub base_file: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn solution_file_name(alpha: f64) -> String {
    format!("alpha_{alpha:.6}.csv")
}

impl ContinuationRun {
    /// Writes `run.json`, `theta_base.csv` and one CSV per solved α.
    /// `extra` entries are merged into the top level of `run.json`.
    pub fn save(
        &self,
        dir: &Path,
        comment: Option<&str>,
        extra: BTreeMap<String, serde_json::Value>,
    ) -> Result<RunIndex> {
        fs::create_dir_all(dir)?;
        let wedge = self.solutions[0].field.wedge();
        let base = PhaseField::new(Arc::clone(wedge), self.base_theta.clone())?;
        let base_file = "theta_base.csv".to_string();
        base.write_csv(fs::File::create(dir.join(&base_file))?, comment)?;
        let mut files = Vec::with_capacity(self.solutions.len());
        for sol in &self.solutions {
            let name = solution_file_name(sol.alpha);
            let mut out = std::io::BufWriter::new(fs::File::create(dir.join(&name))?);
            sol.field.write_csv(&mut out, comment)?;
            out.flush()?;
            files.push(name);
        }
        let index = RunIndex {
            n: wedge.size(),
            grid: self.grid.clone(),
            max_alpha: self.max_alpha(),
            completed: self.completed(),
            steps: self.steps.clone(),
            files,
            failure: self.failure.clone(),
            base_file,
            extra,
        };
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        fs::write(dir.join("run.json"), text)?;
        Ok(index)
    }

    pub fn load(dir: &Path) -> Result<(Self, RunIndex)> {
        let index: RunIndex = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
        let wedge = Arc::new(WedgeTruncation::new(index.n)?);
        let open = |name: &str| -> Result<BufReader<fs::File>> { Ok(BufReader::new(fs::File::open(dir.join(name))?)) };
        let base = PhaseField::read_csv(Arc::clone(&wedge), open(&index.base_file)?)?;
        if index.files.len() != index.steps.len() {
            return Err(Error::Parse("run.json lists a different number of files and steps".into()));
        }
        let mut solutions = Vec::with_capacity(index.steps.len());
        for (name, step) in index.files.iter().zip(&index.steps) {
            let field = PolarField::read_csv(Arc::clone(&wedge), open(name)?)?;
            solutions.push(WaveSolution {
                field,
                alpha: step.alpha,
                freq_shift: step.freq_shift,
                iterations: step.iterations,
                residual_norm: step.residual_norm,
            });
        }
        let run = ContinuationRun {
            grid: index.grid.clone(),
            base_theta: base.into_theta(),
            steps: index.steps.clone(),
            solutions,
            failure: index.failure.clone(),
        };
        Ok((run, index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::phase::{solve_phase, PhaseSolveSettings};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base(n: usize) -> PhaseField {
        let w = Arc::new(WedgeTruncation::new(n).unwrap());
        solve_phase(&w, &PhaseSolveSettings::default()).unwrap().field
    }

    fn model() -> ModelSpec {
        ModelSpec::default()
    }

    #[test]
    fn f1_vanishes_at_alpha_zero_for_any_phase() {
        let b = base(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = PolarField::new(b.wedge().clone(), vec![1.0; 25], theta).unwrap();
        let res = residual_f(0.0, &x, &model(), ResidualOptions::default()).unwrap();
        assert!(res.f1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn base_point_phase_residual_and_weighting() {
        let b = base(20);
        let x = PolarField::base(1.0, &b).unwrap();
        let plain = residual_f(0.0, &x, &model(), ResidualOptions::default()).unwrap();
        assert!(inf_norm(&plain.f2) < 1e-10);
        let weighted = residual_f(0.0, &x, &model(), ResidualOptions::weighted()).unwrap();
        for (k, s) in x.wedge().sites().iter().enumerate() {
            assert_eq!(weighted.f2[k], plain.f2[k] * (1.0 / s.i as f64));
        }
    }

    #[test]
    fn nonpositive_radius_rejected() {
        let b = base(3);
        let mut r = vec![1.0; 9];
        r[4] = 0.0;
        assert!(matches!(
            PolarField::new(b.wedge().clone(), r, b.theta().to_vec()),
            Err(Error::NonPositiveRadius { .. })
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let b = base(6);
        let n = b.theta().len();
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for opts in [ResidualOptions::default(), ResidualOptions::weighted(), ResidualOptions { weighted: false, arms: 2 }] {
            let alpha = rng.random_range(0.0..0.2);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
            let theta: Vec<f64> = b.theta().iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
            let x = PolarField::new(b.wedge().clone(), r, theta).unwrap();
            let jac = jacobian(alpha, &x, &m, opts).unwrap();
            let h = 1e-6;
            for c in 0..2 * n {
                let mut up = x.clone();
                let mut dn = x.clone();
                if c < n {
                    up.r[c] += h;
                    dn.r[c] -= h;
                } else {
                    up.theta[c - n] += h;
                    dn.theta[c - n] -= h;
                }
                let fu = residual_f(alpha, &up, &m, opts).unwrap().stacked();
                let fd = residual_f(alpha, &dn, &m, opts).unwrap().stacked();
                for row in 0..2 * n {
                    let diff = (fu[row] - fd[row]) / (2.0 * h);
                    assert!((diff - jac.state[(row, c)]).abs() < 1e-7, "row {row} col {c}");
                }
            }
            let fu = residual_f(alpha + h, &x, &m, opts).unwrap().stacked();
            let fd = residual_f(alpha - h + if alpha < h { h } else { 0.0 }, &x, &m, opts).unwrap().stacked();
            let span = if alpha < h { h } else { 2.0 * h };
            for row in 0..2 * n {
                assert!(((fu[row] - fd[row]) / span - jac.alpha[row]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn newton_at_zero_returns_base_unchanged() {
        let b = base(8);
        let x = PolarField::base(1.0, &b).unwrap();
        let sol = newton_solve(0.0, &x, 0.0, &model(), &NewtonSettings::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.field, x);
    }

    #[test]
    fn newton_converges_at_small_alpha() {
        let b = base(20);
        let x = PolarField::base(1.0, &b).unwrap();
        let m = model();
        let sol = newton_solve(0.01, &x, 0.0, &m, &NewtonSettings::default()).unwrap();
        assert!(sol.iterations <= 10);
        let res = residual_f(0.01, &sol.field, &m, ResidualOptions::default()).unwrap();
        let shifted = res.f2.iter().map(|v| (v + sol.freq_shift).abs()).fold(0.0, f64::max);
        assert!(inf_norm(&res.f1) < 1e-10 && shifted < 1e-10);
        // Gauge site keeps its base value.
        let g = b.wedge().index_of(SiteIndex::new(20, 1)).unwrap();
        assert_eq!(sol.field.theta()[g], b.theta()[g]);
    }

    #[test]
    fn constant_omega_needs_no_frequency_shift() {
        let b = base(10);
        let m = ModelSpec::polynomial(1.0, 1, 1.0, 0.0);
        let x = PolarField::base(1.0, &b).unwrap();
        let sol = newton_solve(0.01, &x, 0.0, &m, &NewtonSettings::default()).unwrap();
        assert!(sol.freq_shift.abs() < 1e-10);
        assert_eq!(sol.rotation_frequency(&m), 1.0 - 0.01 * sol.freq_shift);
    }

    #[test]
    fn start_outside_ball_fails() {
        let b = base(4);
        let x = PolarField::new(b.wedge().clone(), vec![1.6; 16], b.theta().to_vec()).unwrap();
        match newton_solve(0.01, &x, 0.0, &model(), &NewtonSettings::default()) {
            Err(Error::Newton(f)) => assert_eq!(f.kind, FailureKind::LeftBall),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_helpers() {
        let g = alpha_grid(1e-3, 0.1).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert!((g[100] - 0.1).abs() < 1e-15);
        assert!(validate_grid(&g).is_ok());
        assert!(validate_grid(&[0.001, 0.002]).is_err());
        assert!(validate_grid(&[0.0, 0.2, 0.1]).is_err());
        assert!(validate_grid(&[]).is_err());
    }

    #[test]
    fn trivial_grid_holds_only_the_base() {
        let b = base(5);
        let run = continue_in_alpha(&[0.0], &model(), &b, &NewtonSettings::default()).unwrap();
        assert!(run.completed());
        assert_eq!(run.solutions.len(), 1);
        assert_eq!(run.steps[0].r_deviation, 0.0);
        assert_eq!(run.steps[0].theta_deviation, 0.0);
    }

    #[test]
    fn failure_keeps_partial_run_and_resume_finishes_it() {
        let b = base(6);
        let m = model();
        let grid = alpha_grid(0.01, 0.05).unwrap();
        let tight = NewtonSettings { max_iters: 1, tol: 1e-15, ..NewtonSettings::default() };
        let partial = continue_in_alpha(&grid, &m, &b, &tight).unwrap();
        let fail = partial.failure.clone().unwrap();
        assert_eq!(fail.last_good_alpha, partial.max_alpha());
        assert!(!partial.completed());
        let done = resume(partial, &grid, &m, &NewtonSettings::default()).unwrap();
        assert!(done.completed());
        let fresh = continue_in_alpha(&grid, &m, &b, &NewtonSettings::default()).unwrap();
        let last = done.solutions.last().unwrap();
        let ref_last = fresh.solutions.last().unwrap();
        let gap = last.field.r().iter().zip(ref_last.field.r()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9);
    }

    #[test]
    fn save_and_load_round_trip() {
        let b = base(4);
        let m = model();
        let grid = alpha_grid(0.01, 0.03).unwrap();
        let run = continue_in_alpha(&grid, &m, &b, &NewtonSettings::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = run.save(dir.path(), Some("test"), BTreeMap::new()).unwrap();
        assert_eq!(index.files.len(), 4);
        assert!(dir.path().join("alpha_0.030000.csv").exists());
        let (back, _) = ContinuationRun::load(dir.path()).unwrap();
        assert_eq!(back.steps, run.steps);
        assert_eq!(back.base_theta, run.base_theta);
        for (x, y) in back.solutions.iter().zip(&run.solutions) {
            assert_eq!(x.field, y.field);
        }
    }
}
