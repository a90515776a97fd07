//! Command-line driver: solve-phase → continue → diagnose → extend →
//! simulate → verify.
//!
//! Exit codes: 0 success, 1 computational failure, 2 usage or configuration
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{RunConfig, TOOL_NAME, TOOL_VERSION};
use crate::continuation::{continue_in_alpha, resume, solution_file_name, ContinuationRun, WaveSolution};
use crate::diagnostics::{
    assemble_m, block_check, compute_cn, compute_gamma, quadratic_form_check, spectrum_t, staircase_n_of_mu,
};
use crate::error::Error;
use crate::lattice::WedgeTruncation;
use crate::model::ReactionModel;
use crate::phase::{check_weights, solve_phase, PhaseField, WEIGHT_TOL};
use crate::wave::{
    corotating_drift, corotating_residual, extend_to_full, random_state, simulate, stability_probe,
    verify_rotating_wave, FullLatticeState, SimulationSettings, SimulationTrace,
};

#[derive(Debug, Parser)]
#[command(name = "rotwave", version, about = "Rotating waves in Lambda-Omega lattices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for randomized checks.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Wedge size N.
    #[arg(long = "size", global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub alpha_step: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_stop: Option<f64>,
    /// Coupling used by extend, simulate and verify.
    #[arg(long, global = true)]
    pub sim_alpha: Option<f64>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub t_end: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the uncoupled phase equations; writes theta_bar.csv and phase_report.json.
    SolvePhase,
    /// Continue in α; writes continuation/run.json and one CSV per α.
    Continue {
        /// Extend the saved run instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Operator diagnostics; writes spectral_report.json, spectrum.csv, staircase.csv/json, blockop_check.json.
    Diagnose,
    /// Extend the solution at the simulation α to the full square.
    Extend,
    /// Integrate the extended solution; writes trace.ndjson and trace.json.
    Simulate,
    /// Check the quarter-turn identity over one period; writes defect_report.json.
    Verify {
        /// Run on a random initial state instead (negative control).
        #[arg(long)]
        random_control: bool,
        /// Also run a perturb-and-observe probe (no verdict).
        #[arg(long)]
        probe: bool,
    },
    /// Run every stage in order.
    All,
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Compute(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Compute(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Compute(m) => eprintln!("failed: {m}"),
            }
            f.exit_code()
        }
    }
}

pub fn effective_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(v) = cli.alpha_step {
        cfg.grid.step = v;
    }
    if let Some(v) = cli.alpha_stop {
        cfg.grid.stop = v;
    }
    if let Some(v) = cli.sim_alpha {
        cfg.simulation.alpha = v;
    }
    if let Some(v) = cli.dt {
        cfg.simulation.dt = v;
    }
    if cli.t_end.is_some() {
        cfg.simulation.t_end = cli.t_end;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Outcome {
    let cfg = effective_config(cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    fs::create_dir_all(&cfg.output)?;
    match cli.command {
        Command::SolvePhase => cmd_solve_phase(&cfg).map(|_| ()),
        Command::Continue { resume } => cmd_continue(&cfg, resume),
        Command::Diagnose => cmd_diagnose(&cfg),
        Command::Extend => cmd_extend(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Verify { random_control, probe } => cmd_verify(&cfg, random_control, probe),
        Command::All => {
            cmd_solve_phase(&cfg)?;
            cmd_continue(&cfg, false)?;
            cmd_diagnose(&cfg)?;
            cmd_extend(&cfg)?;
            cmd_simulate(&cfg)?;
            cmd_verify(&cfg, false, false)
        }
        Command::ShowConfig => unreachable!(),
    }
}

fn provenance(cfg: &RunConfig) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("tool".to_string(), json!(TOOL_NAME)),
        ("version".to_string(), json!(TOOL_VERSION)),
        ("config_sha256".to_string(), json!(cfg.hash())),
    ])
}

/// Pretty JSON with the provenance keys merged in; non-finite numbers become `null`.
fn write_report(cfg: &RunConfig, path: &Path, body: Value) -> Outcome {
    let mut map = match body {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("report".into(), other);
            m
        }
    };
    for (k, v) in provenance(cfg) {
        map.insert(k, v);
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn wedge(cfg: &RunConfig) -> Outcome<Arc<WedgeTruncation>> {
    Ok(Arc::new(WedgeTruncation::new(cfg.n)?))
}

pub fn cmd_solve_phase(cfg: &RunConfig) -> Outcome<PhaseField> {
    let w = wedge(cfg)?;
    let report_path = cfg.output.join("phase_report.json");
    match solve_phase(&w, &cfg.phase) {
        Ok(sol) => {
            let weights = check_weights(&sol.field);
            let quarter: Vec<Value> = weights
                .quarter_turn_pairs(1e-6)
                .iter()
                .map(|p| json!({"site": [p.site.i, p.site.j], "direction": p.direction.name(), "delta": p.delta}))
                .collect();
            let mut out = BufWriter::new(fs::File::create(cfg.output.join("theta_bar.csv"))?);
            sol.field.write_csv(&mut out, Some(&cfg.provenance()))?;
            out.flush()?;
            write_report(
                cfg,
                &report_path,
                json!({
                    "N": cfg.n,
                    "converged": true,
                    "iterations": sol.iterations,
                    "gradient_steps": sol.gradient_steps,
                    "residual_norm": sol.residual_norm,
                    "tol": cfg.phase.tol,
                    "gauge": [sol.gauge.i, sol.gauge.j],
                    "weights": {
                        "links": weights.pairs.len(),
                        "min_weight": weights.min_weight,
                        "negative_tol": WEIGHT_TOL,
                        "negative_links": weights.flagged.len(),
                        "quarter_turn_pairs": quarter,
                    },
                }),
            )?;
            Ok(sol.field)
        }
        Err(Error::PhaseSolve(fail)) => {
            write_report(
                cfg,
                &report_path,
                json!({
                    "N": cfg.n,
                    "converged": false,
                    "iterations": fail.iterations,
                    "residual_norm": fail.residual_norm,
                    "tol": cfg.phase.tol,
                }),
            )?;
            Err(Failure::Compute(format!("phase solve did not converge: {fail}")))
        }
        Err(e) => Err(e.into()),
    }
}

/// `theta_bar.csv` from the output directory, or a fresh solve.
fn phase_input(cfg: &RunConfig) -> Outcome<PhaseField> {
    let path = cfg.output.join("theta_bar.csv");
    if path.exists() {
        if let Ok(f) = PhaseField::read_csv(wedge(cfg)?, BufReader::new(fs::File::open(&path)?)) {
            return Ok(f);
        }
    }
    cmd_solve_phase(cfg)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("continuation")
}

pub fn cmd_continue(cfg: &RunConfig, resume_run: bool) -> Outcome {
    let grid = cfg.grid.values().map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = run_dir(cfg);
    let run = if resume_run && dir.join("run.json").exists() {
        let (saved, index) = ContinuationRun::load(&dir)?;
        if index.n != cfg.n {
            return Err(Failure::Usage(format!("saved run has N = {}, config has N = {}", index.n, cfg.n)));
        }
        resume(saved, &grid, &cfg.model, &cfg.newton)?
    } else {
        let base = phase_input(cfg)?;
        continue_in_alpha(&grid, &cfg.model, &base, &cfg.newton)?
    };
    let mut extra = provenance(cfg);
    extra.insert("model".into(), serde_json::to_value(&cfg.model)?);
    run.save(&dir, Some(&cfg.provenance()), extra)?;
    match &run.failure {
        None => Ok(()),
        Some(f) => Err(Failure::Compute(format!(
            "continuation stopped at α = {} ({}); last good α = {}",
            f.alpha, f.message, f.last_good_alpha
        ))),
    }
}

fn uniform_samples(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Outcome {
    let theta = phase_input(cfg)?;
    let op = assemble_m(&theta, &cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let samples: Vec<_> = (0..cfg.diagnostics.samples)
        .map(|_| quadratic_form_check(&op, &uniform_samples(&mut rng, op.sites())))
        .collect();
    let max_rel = samples.iter().map(|q| q.difference / q.direct.abs().max(1.0)).fold(0.0, f64::max);
    let spectrum = spectrum_t(&op);
    if let Ok(s) = &spectrum {
        fs::write(cfg.output.join("spectrum.csv"), s.to_csv(Some(&cfg.provenance())))?;
    }
    write_report(
        cfg,
        &cfg.output.join("spectral_report.json"),
        json!({
            "N": cfg.n,
            "seed": cfg.seed,
            "spectrum": spectrum.as_ref().ok(),
            "spectrum_error": spectrum.as_ref().err().map(|e| e.to_string()),
            "quadratic_form": {
                "samples": samples.len(),
                "seed": cfg.seed,
                "max_relative_difference": max_rel,
                "max_direct": samples.iter().map(|q| q.direct).fold(f64::NEG_INFINITY, f64::max),
                "all_nonpositive": samples.iter().all(|q| q.nonpositive),
                "values": samples,
            },
        }),
    )?;

    let max_n = cfg.max_n();
    let mut gammas = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        gammas.push(compute_gamma(&op, n)?);
    }
    let c_trend: Vec<Value> =
        (1..=cfg.n).map(|n| compute_cn(&op, n).map(|c| json!([n, c]))).collect::<Result<_, _>>()?;
    let rows: Vec<(usize, f64, f64)> = gammas.iter().map(|g| (g.n, g.c_n, g.gamma)).collect();
    let k0 = gammas[0].gamma;
    let table = staircase_n_of_mu(&rows, k0)?;
    let (lo, hi) = (table.mu_floor(), table.mu_top());
    let mus: Vec<f64> = (0..cfg.diagnostics.mu_samples)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            hi - u * (hi - lo)
        })
        .collect();
    let check = table.verify(&mus);
    fs::write(cfg.output.join("staircase.csv"), table.to_csv(Some(&cfg.provenance())))?;
    write_report(
        cfg,
        &cfg.output.join("staircase.json"),
        json!({
            "N": cfg.n,
            "seed": cfg.seed,
            "k0": k0,
            "table": table,
            "gamma_terms": gammas,
            "c_n_all": c_trend,
            "mu_check": check,
            "projection": "least-squares: P = A A^+ for the restricted map A",
        }),
    )?;

    let blocks = block_check(&op, &cfg.model)?;
    write_report(cfg, &cfg.output.join("blockop_check.json"), json!({"N": cfg.n, "check": blocks}))?;
    Ok(())
}

fn solution_at(cfg: &RunConfig, alpha: f64) -> Outcome<WaveSolution> {
    let dir = run_dir(cfg);
    if !dir.join("run.json").exists() {
        return Err(Failure::Compute(format!("no continuation run in {}", dir.display())));
    }
    let (run, index) = ContinuationRun::load(&dir)?;
    if index.n != cfg.n {
        return Err(Failure::Compute(format!("saved run has N = {}, config has N = {}", index.n, cfg.n)));
    }
    run.solution_at(alpha).cloned().ok_or_else(|| {
        Failure::Compute(format!(
            "no solution at α = {alpha} (expected {}); run reached α = {}",
            solution_file_name(alpha),
            run.max_alpha()
        ))
    })
}

fn write_full_csv(path: &Path, state: &FullLatticeState, comment: &str) -> Outcome {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# {comment}")?;
    writeln!(out, "i,j,re,im")?;
    let lattice = state.lattice();
    for (k, v) in state.z().iter().enumerate() {
        let s = lattice.site(k);
        writeln!(out, "{},{},{},{}", s.i, s.j, v.re, v.im)?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_extend(cfg: &RunConfig) -> Outcome {
    let alpha = cfg.simulation.alpha;
    let sol = solution_at(cfg, alpha)?;
    let full = extend_to_full(&sol.field, cfg.n)?;
    write_full_csv(&cfg.output.join(format!("extended_alpha_{alpha:.6}.csv")), &full, &cfg.provenance())?;
    let omega = sol.rotation_frequency(&cfg.model);
    let base = cfg.model.base_frequency(alpha);
    let interior = full.lattice().interior(1);
    let at_omega = corotating_residual(&full, alpha, &cfg.model, omega)?.max_over(&interior);
    let at_base = corotating_residual(&full, alpha, &cfg.model, base)?.max_over(&interior);
    write_report(
        cfg,
        &cfg.output.join("extend_report.json"),
        json!({
            "alpha": alpha,
            "L": cfg.n,
            "freq_shift": sol.freq_shift,
            "rotation_frequency": omega,
            "base_frequency": base,
            "quarter_turn_defect": full.quarter_turn_defect(0),
            "corotating_residual_interior": at_omega,
            "corotating_residual_interior_base_frame": at_base,
        }),
    )
}

fn sim_settings(cfg: &RunConfig, period: f64) -> SimulationSettings {
    SimulationSettings {
        dt: cfg.simulation.dt,
        t_end: cfg.simulation.t_end.unwrap_or(period),
        stride: cfg.simulation.stride,
        collar: cfg.simulation.collar,
    }
}

struct Simulated {
    sol: WaveSolution,
    full: FullLatticeState,
    period: f64,
    base_period: f64,
    trace: SimulationTrace,
}

fn simulate_solution(cfg: &RunConfig) -> Outcome<Simulated> {
    let alpha = cfg.simulation.alpha;
    let sol = solution_at(cfg, alpha)?;
    let full = extend_to_full(&sol.field, cfg.n)?;
    let period = 2.0 * std::f64::consts::PI / sol.rotation_frequency(&cfg.model);
    let base_period = 2.0 * std::f64::consts::PI / cfg.model.base_frequency(alpha);
    let trace = simulate(&full, alpha, &cfg.model, &sim_settings(cfg, period.max(base_period)))?;
    if let Some(msg) = &trace.aborted {
        return Err(Failure::Compute(msg.clone()));
    }
    Ok(Simulated { sol, full, period, base_period, trace })
}

pub fn cmd_simulate(cfg: &RunConfig) -> Outcome {
    let sim = simulate_solution(cfg)?;
    let mut out = BufWriter::new(fs::File::create(cfg.output.join("trace.ndjson"))?);
    // Header record; state records follow one per line.
    serde_json::to_writer(&mut out, &provenance(cfg))?;
    out.write_all(b"\n")?;
    let records = sim.trace.write_ndjson(&mut out, cfg.simulation.write_every)?;
    out.flush()?;
    let omega = sim.sol.rotation_frequency(&cfg.model);
    write_report(
        cfg,
        &cfg.output.join("trace.json"),
        json!({
            "trace": sim.trace.metadata(),
            "records_written": records,
            "write_every": cfg.simulation.write_every,
            "period": sim.period,
            "rotation_frequency": omega,
            "corotating_drift": corotating_drift(&sim.trace, omega, cfg.simulation.collar),
        }),
    )
}

pub fn cmd_verify(cfg: &RunConfig, random_control: bool, probe: bool) -> Outcome {
    let tol = cfg.simulation.tolerance;
    let collar = cfg.simulation.collar;
    if random_control {
        let sim = simulate_solution(cfg)?;
        let z0 = random_state(sim.full.lattice(), cfg.model.amplitude(), cfg.seed);
        let trace = simulate(&z0, cfg.simulation.alpha, &cfg.model, &sim_settings(cfg, sim.period))?;
        let report = verify_rotating_wave(&trace, sim.period, collar, tol)?;
        return write_report(
            cfg,
            &cfg.output.join("defect_report_control.json"),
            json!({"control": "random initial state", "seed": cfg.seed, "alpha": cfg.simulation.alpha, "defect": report}),
        );
    }
    let sim = simulate_solution(cfg)?;
    let report = verify_rotating_wave(&sim.trace, sim.period, collar, tol)?;
    let base = verify_rotating_wave(&sim.trace, sim.base_period, collar, tol)?;
    let omega = sim.sol.rotation_frequency(&cfg.model);
    let probe_report = if probe {
        Some(stability_probe(
            &sim.full,
            cfg.simulation.alpha,
            &cfg.model,
            omega,
            cfg.simulation.probe_amplitude,
            cfg.seed,
            &sim_settings(cfg, sim.period),
        )?)
    } else {
        None
    };
    write_report(
        cfg,
        &cfg.output.join("defect_report.json"),
        json!({
            "alpha": cfg.simulation.alpha,
            "L": cfg.n,
            "dt": cfg.simulation.dt,
            "collar": collar,
            "rotation_frequency": omega,
            "freq_shift": sim.sol.freq_shift,
            "defect": report,
            "base_frequency_period": sim.base_period,
            "defect_at_base_frequency_period": base.max_defect,
            "corotating_drift": corotating_drift(&sim.trace, omega, collar),
            "stability_probe": probe_report,
        }),
    )?;
    if report.is_rotating_wave {
        Ok(())
    } else {
        Err(Failure::Compute(format!("max defect {:e} exceeds {tol:e}", report.max_defect)))
    }
}
