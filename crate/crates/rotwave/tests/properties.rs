//! Property tests and independent oracles for the library.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;

use rotwave::continuation::{
    alpha_grid, continue_in_alpha, newton_solve, residual_f, residual_multiarm, NewtonSettings, PolarField,
    ResidualOptions,
};
use rotwave::diagnostics::{assemble_m, norm_n, quadratic_form_check, BlockVector};
use rotwave::lattice::{partition_representative, SiteIndex, WedgeTruncation};
use rotwave::model::{ModelSpec, ReactionModel};
use rotwave::phase::{phase_residual, solve_phase, PhaseField, PhaseSolveSettings};
use rotwave::wave::{
    corotating_drift, extend_to_full, restrict_to_wedge, simulate, solve_square_multiarm, SimulationSettings,
};

fn wedge(n: usize) -> Arc<WedgeTruncation> {
    Arc::new(WedgeTruncation::new(n).unwrap())
}

fn theta_bar(n: usize) -> PhaseField {
    solve_phase(&wedge(n), &PhaseSolveSettings::default()).unwrap().field
}

/// Residual built straight from the lattice geometry: every raw neighbour is
/// mapped back into the wedge by trying the four quarter turns.
fn oracle_residual(arms: f64, alpha: f64, x: &PolarField, model: &ModelSpec) -> (Vec<f64>, Vec<f64>) {
    let w = x.wedge();
    let n = w.size() as i64;
    let (r, th) = (x.r(), x.theta());
    let mut f1 = Vec::new();
    let mut f2 = Vec::new();
    for (s, site) in w.sites().iter().enumerate() {
        let (mut c1, mut c2) = (0.0, 0.0);
        for (di, dj) in [(1, 0), (0, 1), (-1, 0), (0, -1)] {
            let raw = SiteIndex::new(site.i + di, site.j + dj);
            let ghost = (0..4i64).find_map(|k| {
                let p = raw.rotate_by(-k);
                (p.i >= 1 && 2 - p.i <= p.j && p.j <= p.i).then_some((k, p))
            });
            let (k, p) = ghost.expect("every site has a wedge representative");
            if p.i > n {
                continue;
            }
            let q = w.index_of(p).unwrap();
            let d = arms * (th[q] + k as f64 * FRAC_PI_2 - th[s]);
            c1 += r[q] * d.cos() - r[s];
            c2 += r[q] / r[s] * d.sin();
        }
        let rs = r[s];
        let a = model.a;
        f1.push(alpha * c1 + rs * (a * a - rs * rs));
        f2.push(c2 + model.eps_prime * (rs * rs - a * a));
    }
    (f1, f2)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_field(n: usize, radii: Vec<f64>, phases: Vec<f64>) -> PolarField {
    let w = wedge(n);
    let len = w.len();
    PolarField::new(w, radii[..len].to_vec(), phases[..len].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_matches_geometric_oracle(
        n in 1usize..7,
        alpha in 0.0f64..0.3,
        radii in prop::collection::vec(0.5f64..1.5, 36),
        phases in prop::collection::vec(-PI..PI, 36),
    ) {
        let x = random_field(n, radii, phases);
        let model = ModelSpec::default();
        let res = residual_f(alpha, &x, &model, ResidualOptions::default()).unwrap();
        let (f1, f2) = oracle_residual(1.0, alpha, &x, &model);
        prop_assert!(max_diff(&res.f1, &f1) < 1e-12);
        prop_assert!(max_diff(&res.f2, &f2) < 1e-12);
    }

    #[test]
    fn two_armed_residual_matches_oracle(
        n in 1usize..7,
        alpha in 0.0f64..0.3,
        radii in prop::collection::vec(0.5f64..1.5, 36),
        phases in prop::collection::vec(-PI..PI, 36),
    ) {
        let x = random_field(n, radii, phases);
        let model = ModelSpec::default();
        let res = residual_multiarm(2, alpha, &x, &model).unwrap();
        let (f1, f2) = oracle_residual(2.0, alpha, &x, &model);
        prop_assert!(max_diff(&res.f1, &f1) < 1e-12);
        prop_assert!(max_diff(&res.f2, &f2) < 1e-12);
    }

    #[test]
    fn one_arm_is_the_plain_residual(
        n in 1usize..7,
        alpha in 0.0f64..0.3,
        radii in prop::collection::vec(0.5f64..1.5, 36),
        phases in prop::collection::vec(-PI..PI, 36),
    ) {
        let x = random_field(n, radii, phases);
        let model = ModelSpec::default();
        let plain = residual_f(alpha, &x, &model, ResidualOptions::default()).unwrap();
        prop_assert_eq!(residual_multiarm(1, alpha, &x, &model).unwrap(), plain);
    }

    #[test]
    fn phase_residual_is_gauge_invariant(
        n in 1usize..7,
        phases in prop::collection::vec(-PI..PI, 36),
        c in -10.0f64..10.0,
    ) {
        let w = wedge(n);
        let f = PhaseField::new(Arc::clone(&w), phases[..w.len()].to_vec()).unwrap();
        prop_assert!(max_diff(&phase_residual(&f), &phase_residual(&f.shifted(c))) < 1e-12);
    }

    #[test]
    fn decomposition_identity(r in 0.0f64..2.0, alpha in 0.0f64..0.5, eps in -2.0f64..2.0) {
        let m = ModelSpec::polynomial(1.0, 1, 1.0, eps);
        let gap = m.omega(r, alpha) - m.omega(1.0, alpha) - alpha * m.omega1(r, alpha);
        prop_assert!(gap.abs() < 1e-13);
    }

    #[test]
    fn extension_is_exact_and_idempotent(
        n in 1usize..7,
        radii in prop::collection::vec(0.5f64..1.5, 36),
        phases in prop::collection::vec(-PI..PI, 36),
    ) {
        let x = random_field(n, radii, phases);
        let full = extend_to_full(&x, n).unwrap();
        for k in 0..full.z().len() {
            let s = full.lattice().site(k);
            let (turns, rep) = partition_representative(s);
            let p = x.wedge().index_of(rep).unwrap();
            let mut expected = Complex64::from_polar(x.r()[p], x.theta()[p]);
            for _ in 0..turns {
                expected = Complex64::new(-expected.im, expected.re);
            }
            prop_assert_eq!(full.z()[k], expected);
        }
        prop_assert_eq!(full.quarter_turn_defect(0), 0.0);
        let again = extend_to_full(&restrict_to_wedge(&full, x.wedge()).unwrap(), n).unwrap();
        prop_assert!(full.z().iter().zip(again.z()).all(|(a, b)| (a - b).norm() < 1e-15));
    }
}

#[test]
fn quadratic_form_and_norm_family_on_random_inputs() {
    let op = assemble_m(&theta_bar(8), &ModelSpec::default());
    let n = op.wedge.size();
    let mut runner = proptest::test_runner::TestRunner::default();
    let strategy = (
        -1.0f64..1.0,
        prop::collection::vec(-1.0f64..1.0, op.sites()),
        prop::collection::vec(-2.0f64..2.0, op.sites()),
        1usize..=n,
    );
    runner
        .run(&strategy, |(alpha, s, psi, support)| {
            let q = quadratic_form_check(&op, &psi);
            prop_assert!(q.direct <= 1e-12);
            prop_assert!(q.difference <= 1e-10 * q.identity.abs().max(1e-300));
            let psi = psi
                .iter()
                .enumerate()
                .map(|(k, &v)| if op.wedge.site(k).i as usize <= support { v } else { 0.0 })
                .collect();
            let x = BlockVector { alpha, s, psi };
            let norms: Vec<f64> = (1..=n).map(|m| norm_n(&op, &x, m)).collect();
            prop_assert!(norms.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(norms[support - 1..].iter().all(|&v| v == x.x_norm()));
            Ok(())
        })
        .unwrap();
}

#[test]
fn converged_solutions_pass_the_oracle() {
    let model = ModelSpec::default();
    let base = theta_bar(8);
    let grid = alpha_grid(0.01, 0.05).unwrap();
    let run = continue_in_alpha(&grid, &model, &base, &NewtonSettings::default()).unwrap();
    assert!(run.completed());
    for sol in &run.solutions[1..] {
        let (f1, f2) = oracle_residual(1.0, sol.alpha, &sol.field, &model);
        // The solved system carries the frequency shift in every phase equation.
        let shifted: Vec<f64> = f2.iter().map(|v| v + sol.freq_shift).collect();
        assert!(f1.iter().chain(&shifted).all(|v| v.abs() < 1e-10), "α = {}", sol.alpha);
    }
}

#[test]
fn halving_the_grid_halves_the_step_jumps() {
    let model = ModelSpec::default();
    let base = theta_bar(8);
    let largest_jump = |step: f64| {
        let run = continue_in_alpha(&alpha_grid(step, 0.04).unwrap(), &model, &base, &NewtonSettings::default()).unwrap();
        assert!(run.completed());
        run.solutions
            .windows(2)
            .map(|p| max_diff(p[0].field.r(), p[1].field.r()).max(max_diff(p[0].field.theta(), p[1].field.theta())))
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (largest_jump(0.01), largest_jump(0.005));
    let ratio = coarse / fine;
    assert!((1.8..2.2).contains(&ratio), "jumps {coarse} and {fine}");
}

#[test]
fn constant_omega_keeps_reflection_symmetry() {
    // Reflection through the rotation centre maps row j to row 1 − j.
    let base = theta_bar(20);
    let w = Arc::clone(base.wedge());
    let defect = |eps: f64| {
        let model = ModelSpec::polynomial(1.0, 1, 1.0, eps);
        let start = PolarField::base(1.0, &base).unwrap();
        let sol = newton_solve(0.01, &start, 0.0, &model, &NewtonSettings::default()).unwrap();
        let d: Vec<f64> = sol.field.theta().iter().zip(base.theta()).map(|(a, b)| a - b).collect();
        let at = |s: SiteIndex| w.index_of(s).unwrap();
        let pairs: Vec<(usize, usize)> = w
            .sites()
            .iter()
            .filter(|s| w.contains(SiteIndex::new(s.i, 1 - s.j)))
            .map(|&s| (at(s), at(SiteIndex::new(s.i, 1 - s.j))))
            .collect();
        let c = d[pairs[0].0] + d[pairs[0].1];
        let phase = pairs.iter().map(|&(p, q)| (d[p] + d[q] - c).abs()).fold(0.0, f64::max);
        let radius = pairs.iter().map(|&(p, q)| (sol.field.r()[p] - sol.field.r()[q]).abs()).fold(0.0, f64::max);
        (phase, radius, sol.freq_shift)
    };
    let (phase, radius, nu) = defect(0.0);
    assert!(phase < 1e-8 && radius < 1e-8, "phase {phase} radius {radius}");
    assert!(nu.abs() < 1e-12);
    let (broken, _, _) = defect(1.0);
    assert!(broken > 1e-3, "nonconstant ω should break the symmetry, got {broken}");
}

#[test]
fn solution_drifts_little_in_its_rotating_frame() {
    let model = ModelSpec::default();
    let base = theta_bar(10);
    let run = continue_in_alpha(&alpha_grid(0.01, 0.05).unwrap(), &model, &base, &NewtonSettings::default()).unwrap();
    let sol = run.solution_at(0.05).unwrap();
    let omega = sol.rotation_frequency(&model);
    let full = extend_to_full(&sol.field, 10).unwrap();
    let settings = SimulationSettings { dt: 2e-3, t_end: 2.0 * PI / omega, stride: 5, collar: 2 };
    let trace = simulate(&full, 0.05, &model, &settings).unwrap();
    assert!(corotating_drift(&trace, omega, 1) < 1e-6);
}

#[test]
fn two_armed_solve_on_a_six_by_six_square() {
    // Exploratory: convergence is recorded, not required.
    for alpha in [0.0, 0.01, 0.05] {
        let out = solve_square_multiarm(2, alpha, 3, &ModelSpec::default(), &NewtonSettings::default()).unwrap();
        println!(
            "m=2 α={alpha}: converged {} iterations {} residual {:.2e} shift {:.4e}",
            out.converged, out.iterations, out.residual_norm, out.freq_shift
        );
        assert!(out.residual_norm.is_finite());
        assert_eq!(out.converged, out.failure.is_none());
    }
}
