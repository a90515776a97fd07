//! Full-lattice states, time integration and the quarter-turn check.
//!
//! The truncated square `{1−L, …, L}²` is tiled by four rotated copies of
//! the wedge `Λ_L`, so a wedge steady state extends to the square by
//! `z(L^k p) = i^k z(p)`. Multiplication by `i` only swaps and negates
//! components, which makes the extension exactly quarter-turn symmetric.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::continuation::{GraphProblem, NewtonSettings, PolarField};
use crate::error::{Error, Result};
use crate::graph::LinkGraph;
use crate::lattice::{partition_representative, Direction, SiteIndex, WedgeTruncation};
use crate::model::ReactionModel;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Site bookkeeping for the square `{1−L, …, L}²`, row-major in `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SquareLattice {
    half_width: usize,
}

impl SquareLattice {
    pub fn new(half_width: usize) -> Result<Self> {
        if half_width == 0 {
            return Err(Error::InvalidDomainSize(0));
        }
        Ok(Self { half_width })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn side(&self) -> usize {
        2 * self.half_width
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn lo(&self) -> i64 {
        1 - self.half_width as i64
    }

    pub fn contains(&self, s: SiteIndex) -> bool {
        let (lo, hi) = (self.lo(), self.half_width as i64);
        (lo..=hi).contains(&s.i) && (lo..=hi).contains(&s.j)
    }

    pub fn index_of(&self, s: SiteIndex) -> Option<usize> {
        self.contains(s)
            .then(|| (s.i - self.lo()) as usize * self.side() + (s.j - self.lo()) as usize)
    }

    pub fn site(&self, k: usize) -> SiteIndex {
        SiteIndex::new(self.lo() + (k / self.side()) as i64, self.lo() + (k % self.side()) as i64)
    }

    /// Distance to the nearest missing neighbour; edge sites have depth 0.
    pub fn depth(&self, s: SiteIndex) -> usize {
        let hi = self.half_width as i64;
        let d = (s.i - self.lo()).min(hi - s.i).min(s.j - self.lo()).min(hi - s.j);
        d.max(0) as usize
    }

    /// Sites at depth `≥ collar`. A collar of 1 keeps exactly the sites whose
    /// four neighbours all lie in the square.
    pub fn interior(&self, collar: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.depth(self.site(k)) >= collar).collect()
    }

    /// Nearest-neighbour graph with free edges and no phase offsets.
    pub fn graph(&self) -> LinkGraph {
        let lists: Vec<Vec<(usize, f64)>> = (0..self.len())
            .map(|k| {
                let s = self.site(k);
                Direction::ALL.iter().filter_map(|d| self.index_of(s.step(*d))).map(|p| (p, 0.0)).collect()
            })
            .collect();
        LinkGraph::from_lists(&lists)
    }

    /// Index of `L(s)` for every site; the square is invariant under `L`.
    pub fn rotation_map(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.index_of(self.site(k).rotate()).expect("square is rotation invariant")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullLatticeState {
    lattice: SquareLattice,
    z: Vec<Complex64>,
}

impl FullLatticeState {
    pub fn new(lattice: SquareLattice, z: Vec<Complex64>) -> Result<Self> {
        if z.len() != lattice.len() {
            return Err(Error::InvalidSettings(format!("{} values for {} square sites", z.len(), lattice.len())));
        }
        Ok(Self { lattice, z })
    }

    pub fn lattice(&self) -> SquareLattice {
        self.lattice
    }

    pub fn half_width(&self) -> usize {
        self.lattice.half_width
    }

    pub fn z(&self) -> &[Complex64] {
        &self.z
    }

    pub fn value(&self, s: SiteIndex) -> Option<Complex64> {
        self.lattice.index_of(s).map(|k| self.z[k])
    }

    /// Largest `|z(L(s)) − i z(s)|` over sites at depth `≥ collar`.
    pub fn quarter_turn_defect(&self, collar: usize) -> f64 {
        let rot = self.lattice.rotation_map();
        self.lattice.interior(collar).into_iter().map(|k| (self.z[rot[k]] - I * self.z[k]).norm()).fold(0.0, f64::max)
    }
}

/// Extends a wedge state to the `2N × 2N` square.
pub fn extend_to_full(x: &PolarField, half_width: usize) -> Result<FullLatticeState> {
    let n = x.wedge().size();
    if half_width != n {
        return Err(Error::InvalidSettings(format!(
            "the wedge copies tile the square only for L = N = {n}, got L = {half_width}"
        )));
    }
    let lattice = SquareLattice::new(half_width)?;
    let base: Vec<Complex64> = x.r().iter().zip(x.theta()).map(|(&r, &t)| Complex64::from_polar(r, t)).collect();
    let z = (0..lattice.len())
        .map(|k| {
            let (turns, rep) = partition_representative(lattice.site(k));
            let p = x.wedge().index_of(rep).expect("representative lies in the truncated wedge");
            (0..turns).fold(base[p], |v, _| I * v)
        })
        .collect();
    FullLatticeState::new(lattice, z)
}

/// Reads the wedge sites back out of a square state.
pub fn restrict_to_wedge(state: &FullLatticeState, wedge: &Arc<WedgeTruncation>) -> Result<PolarField> {
    if state.half_width() != wedge.size() {
        return Err(Error::InvalidSettings("square and wedge sizes differ".into()));
    }
    let (mut r, mut theta) = (Vec::with_capacity(wedge.len()), Vec::with_capacity(wedge.len()));
    for &s in wedge.sites() {
        let v = state.value(s).expect("wedge site lies in the square");
        r.push(v.norm());
        theta.push(v.arg());
    }
    PolarField::new(Arc::clone(wedge), r, theta)
}

/// Uniformly random amplitudes in `[a/2, 3a/2]` and phases in `[−π, π)`.
pub fn random_state(lattice: SquareLattice, a: f64, seed: u64) -> FullLatticeState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = (0..lattice.len())
        .map(|_| {
            let r = rng.random_range(0.5 * a..1.5 * a);
            let t = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            Complex64::from_polar(r, t)
        })
        .collect();
    FullLatticeState { lattice, z }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorotatingResidual {
    pub r_dot: Vec<f64>,
    pub theta_dot: Vec<f64>,
}

impl CorotatingResidual {
    /// Max of `|ṙ|` and `|θ̇|` over the given sites.
    pub fn max_over(&self, sites: &[usize]) -> f64 {
        sites.iter().map(|&k| self.r_dot[k].abs().max(self.theta_dot[k].abs())).fold(0.0, f64::max)
    }
}

/// Polar right-hand sides in a frame rotating at `frame_frequency`:
/// `ṙ = α Σ [r′cos(θ′−θ) − r] + rλ(r)`,
/// `θ̇ = α Σ (r′/r) sin(θ′−θ) + ω(r, α) − Ω`, over actual square neighbours.
pub fn corotating_residual(
    state: &FullLatticeState,
    alpha: f64,
    model: &dyn ReactionModel,
    frame_frequency: f64,
) -> Result<CorotatingResidual> {
    if let Some(k) = state.z.iter().position(|v| !(v.norm() > 0.0)) {
        return Err(Error::NonPositiveRadius { site: state.lattice.site(k), radius: state.z[k].norm() });
    }
    let graph = state.lattice.graph();
    let (r, th): (Vec<f64>, Vec<f64>) = state.z.iter().map(|v| (v.norm(), v.arg())).unzip();
    let mut r_dot = vec![0.0; r.len()];
    let mut theta_dot = vec![0.0; r.len()];
    for s in 0..r.len() {
        let (mut radial, mut angular) = (0.0, 0.0);
        for (p, _) in graph.links(s) {
            let (sn, c) = (th[p] - th[s]).sin_cos();
            radial += r[p] * c - r[s];
            angular += r[p] / r[s] * sn;
        }
        r_dot[s] = alpha * radial + r[s] * model.lambda(r[s]);
        theta_dot[s] = alpha * angular + model.omega(r[s], alpha) - frame_frequency;
    }
    Ok(CorotatingResidual { r_dot, theta_dot })
}

/// `ż = α Σ (z′ − z) + z[λ(|z|) + iω(|z|, α)]` on a link graph.
fn vector_field(graph: &LinkGraph, alpha: f64, model: &dyn ReactionModel, z: &[Complex64], out: &mut [Complex64]) {
    for (s, slot) in out.iter_mut().enumerate() {
        let mut coupling = Complex64::new(0.0, 0.0);
        for (p, _) in graph.links(s) {
            coupling += z[p] - z[s];
        }
        let r = z[s].norm();
        *slot = alpha * coupling + z[s] * Complex64::new(model.lambda(r), model.omega(r, alpha));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    pub dt: f64,
    pub t_end: f64,
    /// Store every `stride`-th step.
    pub stride: usize,
    /// Collar excluded from the instantaneous defect series.
    pub collar: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 2.0 * std::f64::consts::PI, stride: 10, collar: 2 }
    }
}

impl SimulationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidSettings(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(Error::InvalidSettings(format!("t_end = {} must be at least dt", self.t_end)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidSettings("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Step count: enough to reach `t_end`, rounded up to a whole stride.
    pub fn steps(&self) -> usize {
        let raw = (self.t_end / self.dt - 1e-9).ceil().max(1.0) as usize;
        raw.div_ceil(self.stride) * self.stride
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub lattice: SquareLattice,
    pub alpha: f64,
    pub dt: f64,
    pub stride: usize,
    pub method: &'static str,
    /// `k · stride · dt`.
    pub times: Vec<f64>,
    pub states: Vec<Vec<Complex64>>,
    /// `max |z(L(s)) − i z(s)|` outside the collar, per stored time.
    pub defect_series: Vec<f64>,
    pub collar: usize,
    /// Set when a non-finite value stopped the run early.
    pub aborted: Option<String>,
}

impl SimulationTrace {
    pub fn t_last(&self) -> f64 {
        *self.times.last().expect("trace holds the initial state")
    }

    pub fn state(&self, k: usize) -> FullLatticeState {
        FullLatticeState { lattice: self.lattice, z: self.states[k].clone() }
    }

    /// Cubic Lagrange interpolation in time through four stored states.
    pub fn interpolate(&self, t: f64) -> Result<Vec<Complex64>> {
        let h = self.dt * self.stride as f64;
        let len = self.times.len();
        if t < 0.0 || t > self.t_last() * (1.0 + 1e-12) {
            return Err(Error::InvalidSettings(format!("t = {t} outside the trace [0, {}]", self.t_last())));
        }
        let x = t / h;
        let nearest = x.round();
        if (x - nearest).abs() < 1e-9 && (nearest as usize) < len {
            return Ok(self.states[nearest as usize].clone());
        }
        if len < 4 {
            return Err(Error::InvalidSettings("interpolation needs at least four stored states".into()));
        }
        let m = (x.floor() as usize).clamp(1, len - 3) - 1;
        let nodes: [f64; 4] = std::array::from_fn(|q| (m + q) as f64);
        let weights: [f64; 4] = std::array::from_fn(|q| {
            (0..4).filter(|&p| p != q).map(|p| (x - nodes[p]) / (nodes[q] - nodes[p])).product()
        });
        let sites = self.states[0].len();
        Ok((0..sites)
            .map(|s| (0..4).map(|q| self.states[m + q][s] * weights[q]).sum())
            .collect())
    }

    /// One NDJSON line per `every`-th stored state: `{"t": .., "z": [[re, im], ..]}`.
    pub fn write_ndjson<W: Write>(&self, mut out: W, every: usize) -> Result<usize> {
        let every = every.max(1);
        let mut records = 0;
        for (k, (t, z)) in self.times.iter().zip(&self.states).enumerate() {
            if k % every != 0 && k + 1 != self.times.len() {
                continue;
            }
            let pairs: Vec<[f64; 2]> = z.iter().map(|v| [v.re, v.im]).collect();
            let line = serde_json::json!({ "t": t, "z": pairs });
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
            records += 1;
        }
        Ok(records)
    }

    pub fn metadata(&self) -> TraceMetadata {
        TraceMetadata {
            half_width: self.lattice.half_width,
            site_order: "row-major over (i, j) in {1-L..L}^2".into(),
            alpha: self.alpha,
            dt: self.dt,
            stride: self.stride,
            method: self.method.into(),
            stored_states: self.times.len(),
            t_last: self.t_last(),
            collar: self.collar,
            max_instantaneous_defect: self.defect_series.iter().copied().fold(0.0, f64::max),
            aborted: self.aborted.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    #[serde(rename = "L")]
    pub half_width: usize,
    pub site_order: String,
    pub alpha: f64,
    pub dt: f64,
    pub stride: usize,
    pub method: String,
    pub stored_states: usize,
    pub t_last: f64,
    pub collar: usize,
    pub max_instantaneous_defect: f64,
    pub aborted: Option<String>,
}

/// Classical fourth-order Runge-Kutta on the square with free edges.
pub fn simulate(
    z0: &FullLatticeState,
    alpha: f64,
    model: &dyn ReactionModel,
    settings: &SimulationSettings,
) -> Result<SimulationTrace> {
    settings.validate()?;
    let graph = z0.lattice.graph();
    let rot = z0.lattice.rotation_map();
    let kept = z0.lattice.interior(settings.collar);
    let defect = |z: &[Complex64]| kept.iter().map(|&k| (z[rot[k]] - I * z[k]).norm()).fold(0.0, f64::max);
    let n = z0.z.len();
    let dt = settings.dt;
    let mut z = z0.z.clone();
    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![Complex64::default(); n], vec![Complex64::default(); n], vec![Complex64::default(); n], vec![Complex64::default(); n]);
    let mut tmp = vec![Complex64::default(); n];
    let mut trace = SimulationTrace {
        lattice: z0.lattice,
        alpha,
        dt,
        stride: settings.stride,
        method: "rk4",
        times: vec![0.0],
        defect_series: vec![defect(&z)],
        states: vec![z.clone()],
        collar: settings.collar,
        aborted: None,
    };
    for step in 1..=settings.steps() {
        vector_field(&graph, alpha, model, &z, &mut k1);
        for s in 0..n {
            tmp[s] = z[s] + 0.5 * dt * k1[s];
        }
        vector_field(&graph, alpha, model, &tmp, &mut k2);
        for s in 0..n {
            tmp[s] = z[s] + 0.5 * dt * k2[s];
        }
        vector_field(&graph, alpha, model, &tmp, &mut k3);
        for s in 0..n {
            tmp[s] = z[s] + dt * k3[s];
        }
        vector_field(&graph, alpha, model, &tmp, &mut k4);
        for s in 0..n {
            z[s] += dt / 6.0 * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s]);
        }
        if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            trace.aborted = Some(format!("non-finite state at t = {}", step as f64 * dt));
            break;
        }
        if step % settings.stride == 0 {
            trace.times.push(step as f64 * dt);
            trace.defect_series.push(defect(&z));
            trace.states.push(z.clone());
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub period: f64,
    pub collar: usize,
    pub samples: usize,
    pub max_defect: f64,
    pub worst_time: f64,
    pub tolerance: f64,
    pub is_rotating_wave: bool,
}

/// `max |z_{L(s)}(t) − z_s(t + T/4)|` over stored `t ≤ t_last − T/4` and
/// sites outside the collar.
pub fn verify_rotating_wave(
    trace: &SimulationTrace,
    period: f64,
    collar: usize,
    tolerance: f64,
) -> Result<DefectReport> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::InvalidSettings(format!("period must be positive, got {period}")));
    }
    if trace.t_last() < period * (1.0 - 1e-9) {
        return Err(Error::InvalidSettings(format!(
            "trace ends at {} before one period {period}",
            trace.t_last()
        )));
    }
    let rot = trace.lattice.rotation_map();
    let kept = trace.lattice.interior(collar);
    let quarter = 0.25 * period;
    let mut max_defect = 0.0f64;
    let mut worst_time = 0.0;
    let mut samples = 0;
    for (k, &t) in trace.times.iter().enumerate() {
        if t + quarter > trace.t_last() * (1.0 + 1e-12) {
            break;
        }
        let later = trace.interpolate(t + quarter)?;
        let now = &trace.states[k];
        let d = kept.iter().map(|&s| (now[rot[s]] - later[s]).norm()).fold(0.0, f64::max);
        samples += 1;
        if d > max_defect {
            max_defect = d;
            worst_time = t;
        }
    }
    Ok(DefectReport {
        period,
        collar,
        samples,
        max_defect,
        worst_time,
        tolerance,
        is_rotating_wave: max_defect < tolerance,
    })
}

/// Largest `|z_s(t) e^{−iΩt} − z_s(0)|` over stored times and collar-free sites.
pub fn corotating_drift(trace: &SimulationTrace, frame_frequency: f64, collar: usize) -> f64 {
    let kept = trace.lattice.interior(collar);
    let z0 = &trace.states[0];
    trace
        .times
        .iter()
        .zip(&trace.states)
        .map(|(&t, z)| {
            let back = Complex64::from_polar(1.0, -frame_frequency * t);
            kept.iter().map(|&s| (z[s] * back - z0[s]).norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Perturb-and-observe data. Carries no verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub amplitude: f64,
    pub seed: u64,
    pub frame_frequency: f64,
    pub times: Vec<f64>,
    /// `max_s |z_s(t) e^{−iΩt} − z*_s|` against the unperturbed state.
    pub deviation: Vec<f64>,
}

pub fn stability_probe(
    state: &FullLatticeState,
    alpha: f64,
    model: &dyn ReactionModel,
    frame_frequency: f64,
    amplitude: f64,
    seed: u64,
    settings: &SimulationSettings,
) -> Result<StabilityProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<Complex64> = state
        .z
        .iter()
        .map(|v| v + Complex64::new(rng.random_range(-amplitude..amplitude), rng.random_range(-amplitude..amplitude)))
        .collect();
    let trace = simulate(&FullLatticeState { lattice: state.lattice, z }, alpha, model, settings)?;
    let deviation = trace
        .times
        .iter()
        .zip(&trace.states)
        .map(|(&t, zt)| {
            let back = Complex64::from_polar(1.0, -frame_frequency * t);
            zt.iter().zip(&state.z).map(|(a, b)| (a * back - b).norm()).fold(0.0, f64::max)
        })
        .collect();
    Ok(StabilityProbe { amplitude, seed, frame_frequency, times: trace.times, deviation })
}

/// `z_s(t) = a e^{i(ω(a,0) t + θ_s)}`, the uncoupled orbit.
pub fn uncoupled_orbit(theta0: &FullLatticeState, model: &dyn ReactionModel, t: f64) -> Vec<Complex64> {
    let a = model.amplitude();
    let w = model.base_frequency(0.0);
    theta0.z.iter().map(|v| Complex64::from_polar(a, v.arg() + w * t)).collect()
}

/// Result of an exploratory `m`-armed solve on the full square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiArmOutcome {
    pub arms: u32,
    pub alpha: f64,
    #[serde(rename = "L")]
    pub half_width: usize,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub freq_shift: f64,
    pub failure: Option<String>,
}

/// Newton on the full square for the `m`-armed equations, started from
/// `r ≡ a` and the one-armed winding angle (the residual multiplies phase
/// differences by `m`). Convergence is reported, not required.
pub fn solve_square_multiarm(
    arms: u32,
    alpha: f64,
    half_width: usize,
    model: &dyn ReactionModel,
    settings: &NewtonSettings,
) -> Result<MultiArmOutcome> {
    if arms == 0 {
        return Err(Error::InvalidSettings("arm count must be at least 1".into()));
    }
    settings.validate()?;
    let lattice = SquareLattice::new(half_width)?;
    let graph = lattice.graph();
    let theta0: Vec<f64> = (0..lattice.len())
        .map(|k| {
            let s = lattice.site(k);
            (0.5 - s.j as f64).atan2(s.i as f64 - 0.5)
        })
        .collect();
    let r0 = vec![model.amplitude(); lattice.len()];
    let gauge = lattice.index_of(SiteIndex::new(half_width as i64, 1)).expect("gauge site in square");
    let problem = GraphProblem { graph: &graph, weights: None, arms, alpha, model, gauge };
    let out = problem.solve(&r0, &theta0, 0.0, settings);
    Ok(MultiArmOutcome {
        arms,
        alpha,
        half_width,
        converged: out.failure.is_none(),
        iterations: out.iterations,
        residual_norm: out.residual_norm,
        freq_shift: out.nu,
        failure: out.failure.map(|f| format!("{f:?}")),
    })
}
