use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for the weight
/// `exp(-x^2)`, via the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Nodes and probability weights for expectations under a standard normal.
pub fn normal_quadrature(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    (x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(), w.iter().map(|v| v / s).collect())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0)));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&d) * q.transpose()))
}

fn unit_diagonal(mut m: DMatrix<f64>) -> DMatrix<f64> {
    m.fill_diagonal(1.0);
    m
}

/// Outcome of [`repair_correlation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Repair {
    pub matrix: DMatrix<f64>,
    /// Whether the input had to be moved to become positive semi-definite.
    pub adjusted: bool,
    pub iterations: usize,
}

pub const REPAIR_TOL: f64 = 1e-8;
pub const REPAIR_MAX_ITER: usize = 1000;

/// Nearest correlation matrix in Frobenius norm by alternating projections
/// with Dykstra's correction. PSD inputs are returned unchanged.
pub fn repair_correlation(lambda: &DMatrix<f64>) -> Result<Repair> {
    let k = lambda.nrows();
    if lambda.ncols() != k || (0..k).any(|i| (lambda[(i, i)] - 1.0).abs() > 1e-12) || max_abs(&(lambda - lambda.transpose())) > 1e-12 {
        return Err(Error::Config("correlation repair needs a symmetric matrix with unit diagonal".into()));
    }
    if min_eigenvalue(lambda) >= 0.0 {
        return Ok(Repair { matrix: lambda.clone(), adjusted: false, iterations: 0 });
    }
    let mut y = lambda.clone();
    let mut ds = DMatrix::zeros(k, k);
    let mut residual = f64::INFINITY;
    for it in 1..=REPAIR_MAX_ITER {
        let r = &y - &ds;
        let x = project_psd(&r);
        ds = &x - &r;
        let next = unit_diagonal(x);
        residual = max_abs(&(&next - &y));
        y = next;
        if residual < REPAIR_TOL {
            let eig = SymmetricEigen::new(y.clone());
            let out = if eig.eigenvalues.min() < 0.0 { rescale_psd(&y) } else { y };
            return Ok(Repair { matrix: out, adjusted: true, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: REPAIR_MAX_ITER, residual })
}

/// Clips negative eigenvalues and restores the unit diagonal by congruence.
fn rescale_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = project_psd(m);
    let d = DVector::from_iterator(p.nrows(), (0..p.nrows()).map(|i| 1.0 / p[(i, i)].sqrt()));
    let s = DMatrix::from_diagonal(&d);
    unit_diagonal(symmetrize(&(&s * p * &s)))
}

pub const PIVOT_TOL: f64 = 1e-12;

/// Lower-triangular `M` with `M M^T = sigma`, allowing zero pivots for
/// positive semi-definite input.
pub fn factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = sigma.nrows();
    if sigma.ncols() != k {
        return Err(Error::Shape { expected: "square matrix".into(), actual: format!("{}x{}", k, sigma.ncols()) });
    }
    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let d = sigma[(j, j)] - (0..j).map(|p| l[(j, p)].powi(2)).sum::<f64>();
        if d < -1e-10 {
            return Err(Error::Numerical(format!("negative pivot {d:e} at column {j}: matrix is not semi-definite")));
        }
        if d <= PIVOT_TOL {
            for i in j + 1..k {
                let r = sigma[(i, j)] - (0..j).map(|p| l[(i, p)] * l[(j, p)]).sum::<f64>();
                if r.abs() > 1e-8 {
                    return Err(Error::Numerical(format!("zero pivot at column {j} with off-diagonal residual {r:e}")));
                }
            }
            continue;
        }
        let piv = d.sqrt();
        l[(j, j)] = piv;
        for i in j + 1..k {
            l[(i, j)] = (sigma[(i, j)] - (0..j).map(|p| l[(i, p)] * l[(j, p)]).sum::<f64>()) / piv;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_normal_moments() {
        let (x, w) = normal_quadrature(48);
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-10);
        assert!((m(4) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn factor_examples() {
        assert_eq!(factor(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let m = factor(&DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0])).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        assert!(max_abs(&(m - want)) < 1e-15);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.6, 0.8, 0.6, 0.8]);
        let sigma = &b * b.transpose();
        let m = factor(&sigma).unwrap();
        assert_eq!(m[(2, 2)], 0.0);
        assert!(max_abs(&(&m * m.transpose() - sigma)) < 1e-10);
    }

    #[test]
    fn repair_fixed_points_and_projection() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(repair_correlation(&id).unwrap().matrix, id);
        let psd = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let r = repair_correlation(&psd).unwrap();
        assert!(!r.adjusted && r.matrix == psd);
        let bad = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.9, 0.9, 1.0, -0.9, 0.9, -0.9, 1.0]);
        let r = repair_correlation(&bad).unwrap();
        assert!(r.adjusted);
        assert!(min_eigenvalue(&r.matrix) >= -1e-10);
        assert!((0..3).all(|i| r.matrix[(i, i)] == 1.0));
    }
}
