//! Linearisation at the uncoupled base point and the quantities built on it.
//!
//! In the weighted coordinates `x = (α, s, ψ)` around `(0, a, θ̄)` the
//! derivative is block lower triangular:
//!
//! ```text
//!     [ 1    0    0  ]
//! M = [ M21  M22  0  ]      M22 = aλ′(a)·I
//!     [ 0    M32  M33]      M33 = diag(1/i)·T
//! ```
//!
//! with `T` the weighted Laplacian of `cos Δθ̄`. The staircase quantities
//! `C(n)`, `Γ(n)` and `n(μ)` use the restriction of `M` to the phase columns
//! of wedge columns `1..=n`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::continuation::{jacobian, PolarField, ResidualOptions};
use crate::error::{Error, Result};
use crate::graph::LinkGraph;
use crate::lattice::WedgeTruncation;
use crate::linalg::{inf_norm, matrix_inf_norm};
use crate::model::{ModelConstants, ReactionModel};
use crate::phase::PhaseField;

/// Eigenvalues within this distance of zero count toward the kernel.
pub const KERNEL_TOL: f64 = 1e-8;
/// Largest wedge size accepted by [`spectrum_t`].
pub const MAX_EIGEN_N: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockOperator {
    pub wedge: Arc<WedgeTruncation>,
    pub theta_bar: Vec<f64>,
    pub constants: ModelConstants,
    pub m21: DVector<f64>,
    pub m22: DVector<f64>,
    pub m32: DMatrix<f64>,
    pub m33: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

/// Element `(α, s, ψ)` of the truncated space, normed by the max of the parts.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockVector {
    pub alpha: f64,
    pub s: Vec<f64>,
    pub psi: Vec<f64>,
}

impl BlockVector {
    pub fn x_norm(&self) -> f64 {
        self.alpha.abs().max(inf_norm(&self.s)).max(inf_norm(&self.psi))
    }

    fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(
            1 + self.s.len() + self.psi.len(),
            std::iter::once(self.alpha).chain(self.s.iter().copied()).chain(self.psi.iter().copied()),
        )
    }

    fn from_dvector(v: &DVector<f64>, n: usize) -> Self {
        Self { alpha: v[0], s: v.rows(1, n).iter().copied().collect(), psi: v.rows(1 + n, n).iter().copied().collect() }
    }
}

/// Builds `M` from the converged uncoupled phases.
pub fn assemble_m(theta_bar: &PhaseField, model: &dyn ReactionModel) -> BlockOperator {
    let wedge = Arc::clone(theta_bar.wedge());
    let graph = LinkGraph::wedge(&wedge);
    let th = theta_bar.theta();
    let n = th.len();
    let constants = ModelConstants::of(model);
    let a = constants.a;
    let mut m21 = DVector::zeros(n);
    let mut m32 = DMatrix::zeros(n, n);
    let mut t = DMatrix::zeros(n, n);
    for s in 0..n {
        let inv_i = 1.0 / wedge.site(s).i as f64;
        for (p, off) in graph.links(s) {
            let (sn, c) = (th[p] + off - th[s]).sin_cos();
            m21[s] += a * (c - 1.0);
            m32[(s, p)] += inv_i * sn / a;
            t[(s, p)] += c;
            t[(s, s)] -= c;
        }
        m32[(s, s)] += inv_i * constants.k;
    }
    let mut m33 = t.clone();
    for s in 0..n {
        let inv_i = 1.0 / wedge.site(s).i as f64;
        m33.row_mut(s).scale_mut(inv_i);
    }
    let m22 = DVector::from_element(n, a * constants.lambda_prime_at_a);
    BlockOperator { wedge, theta_bar: th.to_vec(), constants, m21, m22, m32, m33, t }
}

impl BlockOperator {
    pub fn sites(&self) -> usize {
        self.m22.len()
    }

    /// Square `(1 + 2n)` matrix acting on `(α, s, ψ)`.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let n = self.sites();
        let mut m = DMatrix::zeros(1 + 2 * n, 1 + 2 * n);
        m[(0, 0)] = 1.0;
        m.view_mut((1, 0), (n, 1)).copy_from(&self.m21);
        m.view_mut((1, 1), (n, n)).set_diagonal(&self.m22);
        m.view_mut((1 + n, 1), (n, n)).copy_from(&self.m32);
        m.view_mut((1 + n, 1 + n), (n, n)).copy_from(&self.m33);
        m
    }

    /// `‖M‖∞`.
    pub fn norm(&self) -> f64 {
        matrix_inf_norm(&self.full_matrix())
    }

    pub fn apply(&self, x: &BlockVector) -> BlockVector {
        BlockVector::from_dvector(&(self.full_matrix() * x.to_dvector()), self.sites())
    }

    pub fn symmetry_defect(&self) -> f64 {
        (&self.t - self.t.transpose()).amax()
    }

    /// Flat indices of `ψ` sites whose column is at most `n`.
    fn psi_columns(&self, n: usize) -> Vec<usize> {
        let sites = self.sites();
        (0..sites).filter(|&k| self.wedge.site(k).i as usize <= n).map(|k| 1 + sites + k).collect()
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.wedge.size() {
            return Err(Error::InvalidSettings(format!("n = {n} outside 1..={}", self.wedge.size())));
        }
        Ok(())
    }

    /// Restriction of `M` to `E_n`, the `ψ` directions supported on columns `≤ n`.
    pub fn restricted(&self, n: usize) -> Result<DMatrix<f64>> {
        self.check_n(n)?;
        Ok(self.full_matrix().select_columns(&self.psi_columns(n)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFormSample {
    pub direct: f64,
    pub identity: f64,
    pub difference: f64,
    pub nonpositive: bool,
}

/// `ψᵀTψ` against `−½ Σ_s Σ_links cos Δθ̄ (ψ_p − ψ_s)²`.
pub fn quadratic_form_check(op: &BlockOperator, psi: &[f64]) -> QuadraticFormSample {
    let v = DVector::from_column_slice(psi);
    let direct = v.dot(&(&op.t * &v));
    let graph = LinkGraph::wedge(&op.wedge);
    let th = &op.theta_bar;
    let mut identity = 0.0;
    for s in 0..psi.len() {
        for (p, off) in graph.links(s) {
            let d = psi[p] - psi[s];
            identity -= 0.5 * (th[p] + off - th[s]).cos() * d * d;
        }
    }
    QuadraticFormSample { direct, identity, difference: (direct - identity).abs(), nonpositive: direct <= 1e-12 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    #[serde(rename = "N")]
    pub n: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub kernel_tol: f64,
    pub kernel_dimension: usize,
    /// Second largest eigenvalue.
    pub spectral_gap: f64,
    /// `max |v_k / v_max − 1|` for the eigenvector of the largest eigenvalue.
    pub kernel_vector_deviation: f64,
    pub symmetry_defect: f64,
}

impl SpectralReport {
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("index,eigenvalue\n");
        for (k, e) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "{k},{e}");
        }
        out
    }
}

/// Dense symmetric eigendecomposition of `T`.
pub fn spectrum_t(op: &BlockOperator) -> Result<SpectralReport> {
    let n = op.wedge.size();
    if n > MAX_EIGEN_N {
        return Err(Error::Unsupported(format!(
            "dense eigensolve is limited to N <= {MAX_EIGEN_N}, got N = {n}"
        )));
    }
    let sym = (&op.t + op.t.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let kernel_dimension = eigenvalues.iter().filter(|e| e.abs() <= KERNEL_TOL).count();
    let spectral_gap = if eigenvalues.len() >= 2 { eigenvalues[eigenvalues.len() - 2] } else { f64::NAN };
    let top = eig.eigenvectors.column(*order.last().expect("nonempty wedge"));
    let pivot = top.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    let kernel_vector_deviation = top.iter().map(|x| (x / pivot - 1.0).abs()).fold(0.0, f64::max);
    Ok(SpectralReport {
        n,
        eigenvalues,
        kernel_tol: KERNEL_TOL,
        kernel_dimension,
        spectral_gap,
        kernel_vector_deviation,
        symmetry_defect: op.symmetry_defect(),
    })
}

/// `1/σ_min` of the restriction to `E_n`; infinite when it is rank deficient.
///
/// At `n = N` the constants lie in `E_n` and in the kernel of `T`, so the
/// restricted map is singular.
pub fn compute_cn(op: &BlockOperator, n: usize) -> Result<f64> {
    let a = op.restricted(n)?;
    let sv = a.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let cutoff = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * hi;
    Ok(if lo <= cutoff { f64::INFINITY } else { 1.0 / lo })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTerms {
    pub n: usize,
    pub c_n: f64,
    /// `‖P‖∞` of the projection onto the image of `E_n`.
    pub projection_norm: f64,
    /// `‖M22⁻¹‖ (1 + ‖M21‖)`.
    pub static_term: f64,
    /// `1/‖M‖`.
    pub inverse_norm_term: f64,
    pub gamma: f64,
}

/// `Γ(n) = 2 max{1, ‖M22⁻¹‖(1 + ‖M21‖), C(n)‖P‖, 1/‖M‖}`, all ∞-norms.
///
/// `P = A A⁺` is the least-squares projection onto the image of the
/// restricted map `A`; its rows are the biorthogonal functionals.
pub fn compute_gamma(op: &BlockOperator, n: usize) -> Result<GammaTerms> {
    let c_n = compute_cn(op, n)?;
    let a = op.restricted(n)?;
    let projection_norm = if c_n.is_finite() {
        let pinv = a.clone().pseudo_inverse(0.0).map_err(|e| Error::Unsupported(e.to_string()))?;
        matrix_inf_norm(&(&a * pinv))
    } else {
        f64::NAN
    };
    let m22_inv = op.m22.iter().map(|d| 1.0 / d.abs()).fold(0.0, f64::max);
    let m21 = op.m21.amax();
    let static_term = m22_inv * (1.0 + m21);
    let inverse_norm_term = 1.0 / op.norm();
    let image_term = if c_n.is_finite() { c_n * projection_norm } else { f64::INFINITY };
    let gamma = 2.0 * 1.0f64.max(static_term).max(image_term).max(inverse_norm_term);
    Ok(GammaTerms { n, c_n, projection_norm, static_term, inverse_norm_term, gamma })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseRow {
    pub n: usize,
    pub c_n: f64,
    pub gamma: f64,
    /// `μ_n = (k0 / Γ(n+1))²`; `n(μ) = n` on `(μ_n, μ_{n−1}]`.
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseTable {
    pub k0: f64,
    pub gamma_exponent: f64,
    pub rows: Vec<StaircaseRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest `Γ(n(μ)) / (k0 μ^{-1/2})`.
    pub max_ratio: f64,
}

/// Builds `n(μ)` from `(n, C(n), Γ(n))` rows with `n = 1, 2, …`.
///
/// The last row gets `μ = 0`: the table says nothing below `μ_{D−1}`.
pub fn staircase_n_of_mu(table: &[(usize, f64, f64)], k0: f64) -> Result<StaircaseTable> {
    if table.is_empty() {
        return Err(Error::InvalidSettings("empty Γ table".into()));
    }
    if table.iter().enumerate().any(|(k, row)| row.0 != k + 1) {
        return Err(Error::InvalidSettings("Γ table rows must be n = 1, 2, …".into()));
    }
    if table.iter().any(|row| row.2.is_nan()) || table.windows(2).any(|w| w[1].2 < w[0].2) {
        return Err(Error::InvalidSettings("Γ must be nondecreasing in n".into()));
    }
    if !(k0 >= table[0].2) {
        return Err(Error::InvalidSettings(format!("k0 = {k0} is below Γ(1) = {}", table[0].2)));
    }
    let rows = table
        .iter()
        .enumerate()
        .map(|(k, &(n, c_n, gamma))| {
            let mu = table.get(k + 1).map_or(0.0, |next| (k0 / next.2).powi(2));
            StaircaseRow { n, c_n, gamma, mu }
        })
        .collect();
    Ok(StaircaseTable { k0, gamma_exponent: 0.5, rows })
}

impl StaircaseTable {
    /// `μ_0 = (k0 / Γ(1))²`, the top of the staircase.
    pub fn mu_top(&self) -> f64 {
        (self.k0 / self.rows[0].gamma).powi(2)
    }

    /// Smallest `μ` the table covers (exclusive).
    pub fn mu_floor(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.mu)
    }

    pub fn n_of_mu(&self, mu: f64) -> Option<usize> {
        if !(mu > self.mu_floor() && mu <= self.mu_top()) {
            return None;
        }
        self.rows.iter().find(|r| mu > r.mu).map(|r| r.n)
    }

    pub fn bound(&self, mu: f64) -> f64 {
        self.k0 * mu.powf(-self.gamma_exponent)
    }

    pub fn verify(&self, mus: &[f64]) -> StaircaseCheck {
        let mut violations = 0;
        let mut max_ratio = 0.0f64;
        for &mu in mus {
            match self.n_of_mu(mu) {
                Some(n) => {
                    let ratio = self.rows[n - 1].gamma / self.bound(mu);
                    max_ratio = max_ratio.max(ratio);
                    if ratio > 1.0 {
                        violations += 1;
                    }
                }
                None => violations += 1,
            }
        }
        StaircaseCheck { samples: mus.len(), violations, max_ratio }
    }

    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("n,C,Gamma,mu\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.n, r.c_n, r.gamma, r.mu);
        }
        out
    }
}

/// Zeroes `ψ` on columns beyond `n`; `α` and `s` pass through.
pub fn project_pn(op: &BlockOperator, x: &BlockVector, n: usize) -> BlockVector {
    let psi = x
        .psi
        .iter()
        .enumerate()
        .map(|(k, &v)| if op.wedge.site(k).i as usize <= n { v } else { 0.0 })
        .collect();
    BlockVector { alpha: x.alpha, s: x.s.clone(), psi }
}

/// `‖x‖ₙ = max{|α|, ‖s‖, ‖Pₙx‖, ‖Mx‖/‖M‖}`.
pub fn norm_n(op: &BlockOperator, x: &BlockVector, n: usize) -> f64 {
    let projected = project_pn(op, x, n).x_norm();
    let image = op.apply(x).x_norm() / op.norm();
    x.alpha.abs().max(inf_norm(&x.s)).max(projected).max(image)
}

/// Cross-check of `M` against the continuation Jacobian at `(0, a, θ̄)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    /// Max entry difference between `M` and the weighted Jacobian.
    pub max_entry_difference: f64,
    /// `max |∂F¹/∂θ|`, zero in `M`.
    pub f1_phase_block: f64,
    /// `max |∂G²/∂α|`, zero in `M`.
    pub g2_alpha_column: f64,
    pub m22_value: f64,
    pub k: f64,
    pub symmetry_defect: f64,
    pub norm: f64,
}

pub fn block_check(op: &BlockOperator, model: &dyn ReactionModel) -> Result<BlockCheck> {
    let n = op.sites();
    let theta = PhaseField::new(Arc::clone(&op.wedge), op.theta_bar.clone())?;
    let x = PolarField::base(op.constants.a, &theta)?;
    let jac = jacobian(0.0, &x, model, ResidualOptions::weighted())?;
    let m = op.full_matrix();
    let mut diff = 0.0f64;
    for row in 0..2 * n {
        diff = diff.max((jac.alpha[row] - m[(1 + row, 0)]).abs());
        for c in 0..2 * n {
            diff = diff.max((jac.state[(row, c)] - m[(1 + row, 1 + c)]).abs());
        }
    }
    Ok(BlockCheck {
        max_entry_difference: diff,
        f1_phase_block: jac.state.view((0, n), (n, n)).amax(),
        g2_alpha_column: jac.alpha.rows(n, n).amax(),
        m22_value: op.m22[0],
        k: op.constants.k,
        symmetry_defect: op.symmetry_defect(),
        norm: op.norm(),
    })
}
