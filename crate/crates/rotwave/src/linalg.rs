//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// LU solve; `None` when the factorization is singular or the result is not finite.
pub fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let x = a.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Max absolute entry.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Induced ∞-norm: largest absolute row sum.
pub fn matrix_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|row| row.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sum_norm() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, -4.0, 0.0, 0.25]);
        assert_eq!(matrix_inf_norm(&m), 4.25);
        assert_eq!(inf_norm(&[0.5, -3.0, 2.0]), 3.0);
    }

    #[test]
    fn singular_solve_is_none() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve(m, DVector::from_vec(vec![1.0, 0.0])).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve(m, DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }
}
