//! NORTA: random vectors with prescribed marginals and covariance, obtained
//! from uniform inputs.
//!
//! A uniform vector `z` is mapped to normals `Phi^{-1}(z)`, correlated by a
//! factor `M` of the base correlation `Sigma_a`, and pushed through each
//! marginal's quantile function: `b'_i = F_i^{-1}(Phi(a_i))` with
//! `a = M Phi^{-1}(z)`. The base correlation is chosen entrywise so that the
//! output covariance matches the target.

mod linalg;
mod marginal;

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{par, Error, Result};

pub use linalg::{
    factor, gauss_hermite, max_abs, min_eigenvalue, normal_quadrature, repair_correlation, Repair, PIVOT_TOL,
    REPAIR_MAX_ITER, REPAIR_TOL,
};
pub use marginal::{phi, phi_inv, Marginal, EPS};

pub const QUADRATURE_NODES: usize = 48;
pub const FORMAT_VERSION: u32 = 1;

/// Two-dimensional Gauss–Hermite evaluation of
/// `Cov(F_i^{-1}(Phi(a_i)), F_j^{-1}(Phi(a_j)))` under base correlation `rho`.
pub struct PairCovariance<'a> {
    mi: &'a Marginal,
    mj: &'a Marginal,
    x: Vec<f64>,
    w: Vec<f64>,
    gi: Vec<f64>,
    mean_i: f64,
    mean_j: f64,
}

impl<'a> PairCovariance<'a> {
    pub fn new(mi: &'a Marginal, mj: &'a Marginal, nodes: usize) -> Self {
        let (x, w) = normal_quadrature(nodes);
        let gi: Vec<f64> = x.iter().map(|&a| mi.from_normal(a)).collect();
        let mean_i = gi.iter().zip(&w).map(|(g, w)| g * w).sum();
        let mean_j = x.iter().zip(&w).map(|(&a, w)| mj.from_normal(a) * w).sum();
        Self { mi, mj, x, w, gi, mean_i, mean_j }
    }

    pub fn marginals(&self) -> (&Marginal, &Marginal) {
        (self.mi, self.mj)
    }

    pub fn at(&self, rho: f64) -> f64 {
        let rho = rho.clamp(-1.0, 1.0);
        let s = (1.0 - rho * rho).max(0.0).sqrt();
        let mut e = 0.0;
        for (p, (&xp, &wp)) in self.x.iter().zip(&self.w).enumerate() {
            let inner: f64 = self.x.iter().zip(&self.w).map(|(&xq, &wq)| wq * self.mj.from_normal(rho * xp + s * xq)).sum();
            e += wp * self.gi[p] * inner;
        }
        e - self.mean_i * self.mean_j
    }
}

/// Covariance of the transformed pair under base correlation `rho`.
pub fn pair_covariance(mi: &Marginal, mj: &Marginal, rho: f64) -> f64 {
    PairCovariance::new(mi, mj, QUADRATURE_NODES).at(rho)
}

/// Base correlation `rho` whose transformed covariance equals `target`.
pub fn match_pair(mi: &Marginal, mj: &Marginal, target: f64, (i, j): (usize, usize)) -> Result<f64> {
    let c = PairCovariance::new(mi, mj, QUADRATURE_NODES);
    let grid: Vec<f64> = (0..=20).map(|k| c.at(-1.0 + k as f64 * 0.1)).collect();
    let scale = grid.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if grid.windows(2).any(|w| w[1] < w[0] - 1e-9 * scale) {
        return Err(Error::Numerical(format!("pair ({i}, {j}) covariance is not monotone in the base correlation")));
    }
    let (min, max) = (grid[0], grid[20]);
    let slack = 1e-10 * scale;
    if target < min - slack || target > max + slack {
        return Err(Error::Infeasible { i, j, target, min, max });
    }
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if c.at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_inputs(sigma_b: &DMatrix<f64>, marginals: &[Marginal]) -> Result<()> {
    let k = marginals.len();
    if k == 0 || sigma_b.nrows() != k || sigma_b.ncols() != k {
        return Err(Error::Shape {
            expected: format!("{k}x{k} covariance for {k} marginals"),
            actual: format!("{}x{}", sigma_b.nrows(), sigma_b.ncols()),
        });
    }
    for m in marginals {
        m.validate()?;
    }
    let tol = 1e-12 * max_abs(sigma_b).max(1.0);
    if max_abs(&(sigma_b - sigma_b.transpose())) > tol {
        return Err(Error::Config("target covariance is not symmetric".into()));
    }
    if (0..k).any(|i| sigma_b[(i, i)] <= 0.0) {
        return Err(Error::Config("target covariance needs a positive diagonal".into()));
    }
    Ok(())
}

/// Entrywise base correlations `Lambda_a` for the target covariance.
pub fn match_base_correlation(sigma_b: &DMatrix<f64>, marginals: &[Marginal]) -> Result<DMatrix<f64>> {
    check_inputs(sigma_b, marginals)?;
    let k = marginals.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let rhos = par::map_indices(pairs.len(), |p| {
        let (i, j) = pairs[p];
        match_pair(&marginals[i], &marginals[j], sigma_b[(i, j)], (i, j))
    });
    let mut lambda = DMatrix::identity(k, k);
    for (&(i, j), rho) in pairs.iter().zip(rhos) {
        let rho = rho?;
        lambda[(i, j)] = rho;
        lambda[(j, i)] = rho;
    }
    Ok(lambda)
}

/// A fitted NORTA generator.
#[derive(Clone, Debug, PartialEq)]
pub struct NortaModel {
    pub marginals: Vec<Marginal>,
    pub sigma_b: DMatrix<f64>,
    pub lambda_a: DMatrix<f64>,
    pub sigma_a: DMatrix<f64>,
    /// Lower-triangular factor with `M M^T = Sigma_a`.
    pub m: DMatrix<f64>,
    /// Whether `Lambda_a` had to be repaired to become positive semi-definite.
    pub adjusted: bool,
}

#[derive(Serialize, Deserialize)]
struct NortaFile {
    format_version: u32,
    marginals: Vec<Marginal>,
    sigma_b: Vec<Vec<f64>>,
    lambda_a: Vec<Vec<f64>>,
    sigma_a: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    adjusted: bool,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = r.len();
    if r.iter().any(|row| row.len() != k) {
        return Err(Error::Config("matrix rows must form a square matrix".into()));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| r[i][j]))
}

impl NortaModel {
    pub fn fit(marginals: Vec<Marginal>, sigma_b: DMatrix<f64>) -> Result<Self> {
        let lambda_a = match_base_correlation(&sigma_b, &marginals)?;
        let repair = repair_correlation(&lambda_a)?;
        let m = factor(&repair.matrix)?;
        Ok(Self { marginals, sigma_b, lambda_a, sigma_a: repair.matrix, m, adjusted: repair.adjusted })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Maps uniform inputs `(n, k)` to samples `(n, k)`.
    pub fn sample(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let k = self.dim();
        if z.ncols() != k {
            return Err(Error::Shape { expected: format!("{k} columns"), actual: format!("{}", z.ncols()) });
        }
        if let Some(v) = z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("uniform input {v} outside [0, 1]")));
        }
        let rows = par::map_indices(z.nrows(), |r| {
            let n: Vec<f64> = z.row(r).iter().map(|&u| phi_inv(u)).collect();
            (0..k)
                .map(|i| {
                    let a: f64 = (0..=i).map(|p| self.m[(i, p)] * n[p]).sum();
                    self.marginals[i].from_normal(a)
                })
                .collect::<Vec<f64>>()
        });
        Ok(Array2::from_shape_vec((z.nrows(), k), rows.concat()).expect("row-major samples"))
    }

    pub fn to_json(&self) -> Result<String> {
        let f = NortaFile {
            format_version: FORMAT_VERSION,
            marginals: self.marginals.clone(),
            sigma_b: rows(&self.sigma_b),
            lambda_a: rows(&self.lambda_a),
            sigma_a: rows(&self.sigma_a),
            m: rows(&self.m),
            adjusted: self.adjusted,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: NortaFile = serde_json::from_str(s)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "NORTA model format version {} (supported: {FORMAT_VERSION})",
                f.format_version
            )));
        }
        Ok(Self {
            marginals: f.marginals,
            sigma_b: from_rows(&f.sigma_b)?,
            lambda_a: from_rows(&f.lambda_a)?,
            sigma_a: from_rows(&f.sigma_a)?,
            m: from_rows(&f.m)?,
            adjusted: f.adjusted,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `n` uniform vectors in `[0, 1)^k`.
pub fn uniform_inputs(n: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, k), || rng.gen::<f64>())
}

/// Kolmogorov–Smirnov statistic of `samples` against `m`'s CDF.
pub fn ks_statistic(samples: &[f64], m: &Marginal) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let mut j = i;
        while j < s.len() && s[j] == v {
            j += 1;
        }
        let f = m.cdf(v);
        let f_left = m.cdf(v.next_down());
        d = d.max((j as f64 / n - f).abs()).max((f_left - i as f64 / n).abs());
        i = j;
    }
    d
}

/// Asymptotic KS critical value at level `alpha` for sample size `n`.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

/// Sample covariance (divisor `n`) and the standard error of each entry.
pub fn covariance_with_se(x: &Array2<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, k) = x.dim();
    let mean: Vec<f64> = (0..k).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(k, k);
    let mut se = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let prods: Vec<f64> = (0..n).map(|r| (x[(r, i)] - mean[i]) * (x[(r, j)] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / n as f64;
            let v = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let e = (v / n as f64).sqrt();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            se[(i, j)] = e;
            se[(j, i)] = e;
        }
    }
    (cov, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(x: &Array2<f64>) -> f64 {
        let (c, _) = covariance_with_se(x);
        c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt()
    }

    #[test]
    fn normal_marginals_map_identically() {
        let ms = vec![Marginal::standard_normal(); 3];
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, -0.2, 0.4, 1.0, 0.1, -0.2, 0.1, 1.0]);
        let l = match_base_correlation(&s, &ms).unwrap();
        assert!(max_abs(&(l - s)) < 1e-10);
    }

    #[test]
    fn uniform_pair_matches_closed_form_and_monte_carlo() {
        let u = Marginal::Uniform { lo: 0.0, hi: 1.0 };
        assert!(match_pair(&u, &u, 0.0, (0, 1)).unwrap().abs() < 1e-10);
        let target = 0.5 / 12.0;
        let rho = match_pair(&u, &u, target, (0, 1)).unwrap();
        let closed = 2.0 * (std::f64::consts::PI * 0.5 / 6.0).sin();
        assert!((rho - closed).abs() < 1e-4, "{rho} vs {closed}");

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let s = (1.0 - rho * rho).sqrt();
        let mut xs = Array2::zeros((n, 2));
        let normal = rand_distr::StandardNormal;
        for r in 0..n {
            let (a, b): (f64, f64) = (rng.sample(normal), rng.sample(normal));
            xs[(r, 0)] = phi(a);
            xs[(r, 1)] = phi(rho * a + s * b);
        }
        assert!((pearson(&xs) - 0.5).abs() < 0.005);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let u = Marginal::Uniform { lo: 0.0, hi: 1.0 };
        let e = Marginal::Exponential { rate: 1.0 };
        let min = pair_covariance(&u, &e, -1.0);
        assert!(matches!(match_pair(&u, &e, min - 0.05, (0, 1)), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn one_dimensional_normal_collapses() {
        let model = NortaModel::fit(vec![Marginal::standard_normal()], DMatrix::identity(1, 1)).unwrap();
        let z = uniform_inputs(50, 1, 3);
        let b = model.sample(&z).unwrap();
        for (bv, zv) in b.iter().zip(z.iter()) {
            assert_eq!(*bv, phi_inv(*zv));
        }
        assert!(model.sample(&Array2::from_elem((1, 1), 1.5)).is_err());
    }

    #[test]
    fn uniform_pair_sampling() {
        let u = Marginal::Uniform { lo: 0.0, hi: 1.0 };
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0 / 12.0, 0.5 / 12.0, 0.5 / 12.0, 1.0 / 12.0]);
        let model = NortaModel::fit(vec![u.clone(), u.clone()], sigma).unwrap();
        let z = uniform_inputs(100_000, 2, 5);
        let b = model.sample(&z).unwrap();
        assert_eq!(b, model.sample(&z).unwrap());
        assert!((pearson(&b) - 0.5).abs() < 0.02);
        for c in 0..2 {
            assert!(ks_statistic(&b.column(c).to_vec(), &u) < 0.01);
        }
        let back = NortaModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    /// Dykstra projections with a hand-rolled Jacobi eigen-solver.
    fn oracle_nearest_correlation(a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        fn jacobi(mut m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
            let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            for _ in 0..100 {
                for p in 0..3 {
                    for q in p + 1..3 {
                        if m[p][q].abs() < 1e-300 {
                            continue;
                        }
                        let theta = 0.5 * (2.0 * m[p][q]).atan2(m[q][q] - m[p][p]);
                        let (c, s) = (theta.cos(), theta.sin());
                        let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                        r[p][p] = c;
                        r[q][q] = c;
                        r[p][q] = s;
                        r[q][p] = -s;
                        let mut t = [[0.0; 3]; 3];
                        for i in 0..3 {
                            for j in 0..3 {
                                t[i][j] = (0..3).map(|k| (0..3).map(|l| r[k][i] * m[k][l] * r[l][j]).sum::<f64>()).sum();
                            }
                        }
                        m = t;
                        let mut nv = [[0.0; 3]; 3];
                        for i in 0..3 {
                            for j in 0..3 {
                                nv[i][j] = (0..3).map(|k| v[i][k] * r[k][j]).sum();
                            }
                        }
                        v = nv;
                    }
                }
            }
            ([m[0][0], m[1][1], m[2][2]], v)
        }
        let mut y = a;
        let mut ds = [[0.0; 3]; 3];
        for _ in 0..20000 {
            let mut r = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    r[i][j] = y[i][j] - ds[i][j];
                }
            }
            let (w, v) = jacobi(r);
            let mut x = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    x[i][j] = (0..3).map(|k| v[i][k] * w[k].max(0.0) * v[j][k]).sum();
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    ds[i][j] = x[i][j] - r[i][j];
                }
            }
            for (i, row) in x.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            y = x;
        }
        y
    }

    #[test]
    fn repair_matches_independent_projection() {
        let a = [[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]];
        let lambda = DMatrix::from_fn(3, 3, |i, j| a[i][j]);
        let r = repair_correlation(&lambda).unwrap();
        let o = oracle_nearest_correlation(a);
        let d_ours = (&r.matrix - &lambda).norm();
        let d_oracle = (DMatrix::from_fn(3, 3, |i, j| o[i][j]) - &lambda).norm();
        assert!((d_ours - d_oracle).abs() < 1e-6, "{d_ours} vs {d_oracle}");
    }
}
