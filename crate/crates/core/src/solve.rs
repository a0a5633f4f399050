//! Linear solves against symmetric positive definite lattice operators.

use crate::error::{Error, Result};
use crate::lattice::{dot, norm, SparseSymmetricOperator};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    /// Stop when `‖b − Ax‖ / ‖b‖` falls below this.
    pub rel_tol: f64,
    /// Iteration cap; `None` means `50 · √n`.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

impl CgOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    fn cap(&self, n: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| ((50.0 * (n as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for SPD `op`.
pub fn conjugate_gradient(
    op: &SparseSymmetricOperator,
    rhs: &[f64],
    opts: &CgOptions,
) -> Result<(Vec<f64>, CgReport)> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: rhs.len(),
        });
    }
    let b_norm = norm(rhs);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                rel_residual: 0.0,
            },
        ));
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let cap = opts.cap(n);
    let mut rel = 1.0;
    for it in 1..=cap {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "operator not positive definite (pAp = {pap:e})"
            )));
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        rel = norm(&r) / b_norm;
        if rel <= opts.rel_tol {
            // Confirm against the true residual; the recursive one drifts.
            op.apply(&x, &mut ap);
            let true_rel = rhs
                .iter()
                .zip(&ap)
                .map(|(b, a)| (b - a).powi(2))
                .sum::<f64>()
                .sqrt()
                / b_norm;
            if true_rel <= opts.rel_tol {
                return Ok((
                    x,
                    CgReport {
                        iterations: it,
                        rel_residual: true_rel,
                    },
                ));
            }
            for i in 0..n {
                r[i] = rhs[i] - ap[i];
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        what: "conjugate gradient",
        iterations: cap,
        residual: rel,
    })
}

/// LU factorization of a tridiagonal SPD matrix (no pivoting needed).
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn from_operator(op: &SparseSymmetricOperator) -> Result<Self> {
        if !op.is_tridiagonal() {
            return Err(Error::Numerical("operator is not tridiagonal".into()));
        }
        let n = op.dim();
        let diag: Vec<f64> = op.diagonal();
        let off: Vec<f64> = (1..n).map(|i| op.get(i, i - 1)).collect();
        let mut sup = off.clone();
        let mut d = diag;
        let mut sub = vec![0.0; n.saturating_sub(1)];
        for i in 1..n {
            if d[i - 1] == 0.0 {
                return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
            }
            let m = off[i - 1] / d[i - 1];
            sub[i - 1] = m;
            d[i] -= m * sup[i - 1];
        }
        if d.last().is_some_and(|&v| v == 0.0) {
            return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
        }
        sup.truncate(n.saturating_sub(1));
        Ok(Self { sub, diag: d, sup })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        assert_eq!(rhs.len(), n);
        let mut y = rhs.to_vec();
        for i in 1..n {
            y[i] -= self.sub[i - 1] * y[i - 1];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                y[i] -= self.sup[i] * y[i + 1];
            }
            y[i] /= self.diag[i];
        }
        y
    }
}

/// Solver for an SPD operator: direct when tridiagonal, CG otherwise.
#[derive(Clone, Debug)]
pub enum SpdSolver<'a> {
    Direct(Tridiagonal),
    Iterative {
        op: &'a SparseSymmetricOperator,
        opts: CgOptions,
    },
}

impl<'a> SpdSolver<'a> {
    pub fn new(op: &'a SparseSymmetricOperator, opts: CgOptions) -> Result<Self> {
        if op.is_tridiagonal() {
            Ok(Self::Direct(Tridiagonal::from_operator(op)?))
        } else {
            Ok(Self::Iterative { op, opts })
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Direct(t) => Ok(t.solve(rhs)),
            Self::Iterative { op, opts } => conjugate_gradient(op, rhs, opts).map(|(x, _)| x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, EnvironmentSpec, Family};
    use crate::lattice::build_delta;

    fn neg_delta(dim: usize, l: usize, seed: u64) -> SparseSymmetricOperator {
        let env = sample_environment(&EnvironmentSpec {
            family: Family::UniformInterval { lo: 0.5, hi: 1.5 },
            dim,
            half_size: l,
            seed,
        })
        .unwrap();
        build_delta(&env).scaled(-1.0)
    }

    #[test]
    fn cg_solves_2d() {
        let op = neg_delta(2, 10, 1);
        let rhs: Vec<f64> = (0..op.dim()).map(|i| (i as f64).sin()).collect();
        let (x, rep) = conjugate_gradient(&op, &rhs, &CgOptions::default()).unwrap();
        let ax = op.mul(&x);
        let err = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm(&rhs) <= 1e-10);
        assert!(rep.iterations > 0);
    }

    #[test]
    fn cg_reports_nonconvergence() {
        let op = neg_delta(2, 10, 1);
        let rhs = vec![1.0; op.dim()];
        let opts = CgOptions {
            rel_tol: 1e-14,
            max_iter: Some(3),
        };
        assert!(matches!(
            conjugate_gradient(&op, &rhs, &opts),
            Err(Error::NotConverged { iterations: 3, .. })
        ));
    }

    #[test]
    fn tridiagonal_matches_cg() {
        let op = neg_delta(1, 40, 2);
        let rhs: Vec<f64> = (0..op.dim()).map(|i| 1.0 + (i % 3) as f64).collect();
        let direct = Tridiagonal::from_operator(&op).unwrap().solve(&rhs);
        let (iter, _) = conjugate_gradient(&op, &rhs, &CgOptions::with_tol(1e-11)).unwrap();
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in direct.iter().zip(&iter) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn zero_rhs_is_trivial() {
        let op = neg_delta(2, 3, 0);
        let (x, rep) = conjugate_gradient(&op, &vec![0.0; op.dim()], &CgOptions::default()).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
        assert_eq!(rep.iterations, 0);
    }
}
