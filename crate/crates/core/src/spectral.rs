//! Eigenpairs of `(−L²Δ_{L,w})⁻¹` and of the continuum inverse Laplacian,
//! plus subspace distances between them.
//!
//! Every eigenvalue here uses the positive convention: the operators are
//! `(−L²Δ)⁻¹` and `(−κ∂²)⁻¹`, so eigenvalues are positive and listed in
//! decreasing order.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{domain, Error, Result};
use crate::green::{diffusion_diagonal, mode_1d, mode_1d_integral};
use crate::lattice::{build_delta, norm, Lattice, SparseSymmetricOperator, ZeroForm};
use crate::rng::stream_rng;
use crate::solve::{CgOptions, SpdSolver};

/// Systems up to this size are diagonalized densely.
pub const DENSE_EIGEN_MAX: usize = 256;
/// Relative width of an eigenvalue cluster.
pub const CLUSTER_TOL: f64 = 1e-9;

const SUBSPACE_MAX_ITER: usize = 500;
const SUBSPACE_SEED: u64 = 0x5eed_5eed;

/// One eigenpair of a scaled inverse operator on `Λ_L`. Vectors have unit
/// `ℓ²` norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub eigenvalue: f64,
    pub vector: ZeroForm,
    /// Mode index `n` when known in closed form.
    pub index: Option<Vec<usize>>,
    /// Bound on `‖A v − λ v‖` for the operator the pair belongs to.
    pub residual: f64,
}

/// Continuum mode `e_n(ξ) = Π_i sc(π n_i ξ_i / 2)` with eigenvalue
/// `((π/2)² n·κn)⁻¹`. Orthonormal in `L²(𝒟)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuumMode {
    pub eigenvalue: f64,
    pub index: Vec<usize>,
}

impl ContinuumMode {
    pub fn eval(&self, xi: &[f64]) -> f64 {
        self.index.iter().zip(xi).map(|(&n, &x)| mode_1d(n, x)).product()
    }

    /// `∫` of the mode over the box `Π_i [a_i, b_i]`.
    pub fn box_integral(&self, intervals: &[(f64, f64)]) -> f64 {
        self.index
            .iter()
            .zip(intervals)
            .map(|(&n, &(a, b))| mode_1d_integral(n, a, b))
            .product()
    }
}

/// `λ_n^L = (4L² Σ_i sin²(π n_i / 4L))⁻¹`.
pub fn homogeneous_eigenvalue(half_size: usize, n: &[usize]) -> f64 {
    let l = half_size as f64;
    let s: f64 = n
        .iter()
        .map(|&k| (PI * k as f64 / (4.0 * l)).sin().powi(2))
        .sum();
    1.0 / (4.0 * l * l * s)
}

/// Unit-norm `e_n^L(x) = L^{−d/2} Π_i sc(π n_i x_i / 2L)`.
pub fn homogeneous_vector(lat: &Lattice, n: &[usize]) -> ZeroForm {
    let l = lat.half_size() as f64;
    let scale = l.powf(-0.5 * lat.dim() as f64);
    let mut coords = vec![0i64; lat.dim()];
    let v = (0..lat.num_sites())
        .map(|site| {
            lat.site_coords_into(site, &mut coords);
            scale
                * n.iter()
                    .zip(&coords)
                    .map(|(&k, &x)| mode_1d(k, x as f64 / l))
                    .product::<f64>()
        })
        .collect();
    ZeroForm(v)
}

fn multi_indices(d: usize, max: usize) -> Vec<Vec<usize>> {
    let total = max.pow(d as u32);
    (0..total)
        .map(|mut p| {
            let mut n = vec![0; d];
            for slot in n.iter_mut().rev() {
                *slot = p % max + 1;
                p /= max;
            }
            n
        })
        .collect()
}

/// All `(2L−1)ᵈ` eigenpairs of `(−L²Δ_{L,1})⁻¹` in closed form, by
/// decreasing eigenvalue.
pub fn homogeneous_eigenpairs(half_size: usize, dim: usize) -> Result<Vec<EigenPair>> {
    let lat = Lattice::new(dim, half_size)?;
    let mut out: Vec<EigenPair> = multi_indices(dim, 2 * half_size - 1)
        .into_iter()
        .map(|n| EigenPair {
            eigenvalue: homogeneous_eigenvalue(half_size, &n),
            vector: homogeneous_vector(&lat, &n),
            index: Some(n),
            residual: 0.0,
        })
        .collect();
    out.sort_by(|a, b| b.eigenvalue.total_cmp(&a.eigenvalue));
    Ok(out)
}

/// Continuum modes with `|n|_∞ ≤ cutoff`, by decreasing eigenvalue. The
/// product basis diagonalizes `κ∂²` only for diagonal `κ`.
pub fn continuum_eigenpairs(kappa: &DMatrix<f64>, cutoff: usize, dim: usize) -> Result<Vec<ContinuumMode>> {
    if kappa.nrows() != dim {
        return Err(Error::Dimension {
            expected: dim,
            actual: kappa.nrows(),
        });
    }
    if cutoff == 0 {
        return Err(domain("cutoff must be >= 1"));
    }
    let diag = diffusion_diagonal(kappa)?;
    let mut out: Vec<ContinuumMode> = multi_indices(dim, cutoff)
        .into_iter()
        .map(|n| ContinuumMode {
            eigenvalue: continuum_eigenvalue(&diag, &n),
            index: n,
        })
        .collect();
    out.sort_by(|a, b| b.eigenvalue.total_cmp(&a.eigenvalue));
    Ok(out)
}

fn continuum_eigenvalue(diag: &[f64], n: &[usize]) -> f64 {
    let q: f64 = diag.iter().zip(n).map(|(k, &m)| k * (m * m) as f64).sum();
    4.0 / (PI * PI * q)
}

/// Largest eigenvalue dropped by the cutoff `|n|_∞ ≤ N`; this is the norm
/// of the difference between the full and the truncated inverse.
pub fn cutoff_gap(kappa: &DMatrix<f64>, cutoff: usize) -> Result<f64> {
    let diag = diffusion_diagonal(kappa)?;
    let base: f64 = diag.iter().sum();
    let n1 = (cutoff + 1) as f64;
    let q = diag
        .iter()
        .map(|k| base + k * (n1 * n1 - 1.0))
        .fold(f64::INFINITY, f64::min);
    Ok(4.0 / (PI * PI * q))
}

/// `−L²Δ_{L,w}`.
pub fn scaled_neg_laplacian(env: &Environment) -> SparseSymmetricOperator {
    let l = env.half_size() as f64;
    build_delta(env).scaled(-l * l)
}

fn eigen_solver_options(n: usize) -> CgOptions {
    CgOptions {
        rel_tol: 1e-12,
        max_iter: Some((n * 4).max(2000)),
    }
}

/// The `k` largest eigenvalues of `op⁻¹` (the `k` smallest of the SPD
/// `op`), with unit eigenvectors, by decreasing eigenvalue.
pub fn smallest_eigenpairs(op: &SparseSymmetricOperator, k: usize) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(domain(format!("k must be in 1..={n}")));
    }
    if n <= DENSE_EIGEN_MAX {
        dense_smallest(op, k)
    } else {
        subspace_smallest(op, k)
    }
}

/// `k` leading eigenpairs of `(−L²Δ_{L,w})⁻¹`.
pub fn scaled_inverse_eigenpairs(env: &Environment, k: usize) -> Result<Vec<EigenPair>> {
    smallest_eigenpairs(&scaled_neg_laplacian(env), k)
}

fn dense_smallest(op: &SparseSymmetricOperator, k: usize) -> Result<Vec<EigenPair>> {
    let a = op.to_dense();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mu_min = eig.eigenvalues[order[0]];
    if !(mu_min > 0.0) {
        return Err(Error::Numerical(format!(
            "operator not positive definite (smallest eigenvalue {mu_min:e})"
        )));
    }
    Ok(order[..k]
        .iter()
        .map(|&i| {
            let mu = eig.eigenvalues[i];
            let v = eig.eigenvectors.column(i).into_owned();
            let r = (&a * &v - &v * mu).norm();
            EigenPair {
                eigenvalue: 1.0 / mu,
                vector: ZeroForm(v.iter().copied().collect()),
                index: None,
                // ‖A⁻¹v − λv‖ = λ‖A⁻¹(Av − μv)‖ ≤ λ r / μ_min.
                residual: r / (mu * mu_min),
            }
        })
        .collect())
}

fn apply_inverse(solver: &SpdSolver<'_>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols: Vec<Vec<f64>> = (0..v.ncols())
        .into_par_iter()
        .map(|j| solver.solve(v.column(j).as_slice()))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| cols[j][i]))
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Subspace iteration on `op⁻¹` with Rayleigh-Ritz extraction; handles
/// degenerate clusters without special casing.
fn subspace_smallest(op: &SparseSymmetricOperator, k: usize) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    let p = (2 * k + 8).min(n);
    let solver = SpdSolver::new(op, eigen_solver_options(n))?;
    let mut rng = stream_rng(SUBSPACE_SEED, 0);
    let start = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
    let mut v = orthonormalize(start);
    let mut worst = f64::INFINITY;
    for _ in 0..SUBSPACE_MAX_ITER {
        let w = apply_inverse(&solver, &v)?;
        let h = v.tr_mul(&w);
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let s = DMatrix::from_fn(p, p, |i, j| eig.eigenvectors[(i, order[j])]);
        let theta: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vr = &v * &s;
        let wr = &w * &s;
        let residuals: Vec<f64> = (0..k)
            .map(|j| (wr.column(j) - vr.column(j) * theta[j]).norm())
            .collect();
        worst = residuals.iter().fold(0.0f64, |m, r| m.max(*r));
        if !(theta[0] > 0.0) {
            return Err(Error::Numerical("operator not positive definite".into()));
        }
        if worst <= 1e-10 * theta[0] {
            return Ok((0..k)
                .map(|j| EigenPair {
                    eigenvalue: theta[j],
                    vector: ZeroForm(vr.column(j).iter().copied().collect()),
                    index: None,
                    residual: residuals[j],
                })
                .collect());
        }
        v = orthonormalize(wr);
    }
    Err(Error::NotConverged {
        what: "subspace iteration",
        iterations: SUBSPACE_MAX_ITER,
        residual: worst,
    })
}

/// `κ̂ = 4 / (π² d λ̂₁)`, reading the effective coefficient off the top of
/// the spectrum of `(−L²Δ_{L,w})⁻¹` under isotropy.
pub fn spectral_kappa(env: &Environment) -> Result<f64> {
    let top = scaled_inverse_eigenpairs(env, 1)?;
    Ok(4.0 / (PI * PI * env.dim() as f64 * top[0].eigenvalue))
}

/// Orthogonal projector onto the span of an orthonormal basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    basis: DMatrix<f64>,
}

impl Projector {
    /// Orthonormalizes the given vectors; fails if they are dependent.
    pub fn from_vectors(vectors: &[&[f64]]) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(domain("projector needs at least one vector"));
        };
        let n = first.len();
        if vectors.iter().any(|v| v.len() != n) {
            return Err(domain("vectors have different lengths"));
        }
        if vectors.len() > n {
            return Err(Error::Degenerate("more vectors than dimensions".into()));
        }
        let m = DMatrix::from_fn(n, vectors.len(), |i, j| vectors[j][i]);
        let qr = m.qr();
        let scale = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max);
        if qr.r().diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
            return Err(Error::Degenerate("vectors are linearly dependent".into()));
        }
        Ok(Self { basis: qr.q() })
    }

    pub fn from_pairs(pairs: &[&EigenPair]) -> Result<Self> {
        let vs: Vec<&[f64]> = pairs.iter().map(|p| &p.vector[..]).collect();
        Self::from_vectors(&vs)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

/// `‖P − Q‖₂` from the principal angles of two subspaces whose cross Gram
/// matrix is `g` (rows for the first subspace).
pub fn distance_from_cross_gram(g: &DMatrix<f64>) -> f64 {
    if g.nrows() != g.ncols() {
        return 1.0;
    }
    let svd = g.clone().svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, s| m.min(*s))
        .min(1.0);
    (1.0 - smin * smin).max(0.0).sqrt()
}

/// Spectral-norm distance between two projectors on the same space.
pub fn projection_distance(a: &Projector, b: &Projector) -> Result<f64> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::Shape {
            expected: a.ambient_dim(),
            actual: b.ambient_dim(),
        });
    }
    if a.rank() != b.rank() {
        return Ok(1.0);
    }
    // Largest singular value of (I − P_A) B is the sine of the largest
    // principal angle; this avoids the cancellation in 1 − cos².
    let rest = &b.basis - &a.basis * a.basis.tr_mul(&b.basis);
    Ok(rest.svd(false, false).singular_values.max().min(1.0))
}

/// A subspace of `L²(𝒟)`: either the embedded image of lattice vectors
/// under the step-function isometry `i_L`, or a span of continuum modes.
#[derive(Clone, Debug)]
pub enum Subspace {
    Lattice { lattice: Lattice, projector: Projector },
    Continuum { dim: usize, modes: Vec<ContinuumMode> },
}

impl Subspace {
    pub fn dim(&self) -> usize {
        match self {
            Subspace::Lattice { lattice, .. } => lattice.dim(),
            Subspace::Continuum { dim, .. } => *dim,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Subspace::Lattice { projector, .. } => projector.rank(),
            Subspace::Continuum { modes, .. } => modes.len(),
        }
    }
}

/// Per coordinate `x ∈ (−L, L)`, the sites `y ∈ (−L', L')` whose boxes
/// overlap `[x/L, (x+1)/L)`, with overlap lengths.
fn axis_overlaps(l1: usize, l2: usize) -> Vec<Vec<(usize, f64)>> {
    let (a1, a2) = (l1 as i64, l2 as i64);
    let (f1, f2) = (l1 as f64, l2 as f64);
    (-a1 + 1..a1)
        .map(|x| {
            let (lo, hi) = (x as f64 / f1, (x + 1) as f64 / f1);
            (-a2 + 1..a2)
                .filter_map(|y| {
                    let ov = hi.min((y + 1) as f64 / f2) - lo.max(y as f64 / f2);
                    (ov > 0.0).then_some(((y + a2 - 1) as usize, ov))
                })
                .collect()
        })
        .collect()
}

fn lattice_cross(l1: &Lattice, b1: &DMatrix<f64>, l2: &Lattice, b2: &DMatrix<f64>) -> DMatrix<f64> {
    if l1.half_size() == l2.half_size() {
        return b1.tr_mul(b2);
    }
    let d = l1.dim();
    let lists = axis_overlaps(l1.half_size(), l2.half_size());
    let side2 = l2.side();
    let scale = ((l1.half_size() * l2.half_size()) as f64).powf(0.5 * d as f64);
    let mut g = DMatrix::zeros(b1.ncols(), b2.ncols());
    let mut coords = vec![0i64; d];
    let l = l1.half_size() as i64;
    for x in 0..l1.num_sites() {
        l1.site_coords_into(x, &mut coords);
        let axis: Vec<&Vec<(usize, f64)>> =
            coords.iter().map(|&c| &lists[(c + l - 1) as usize]).collect();
        let mut idx = vec![0usize; d];
        loop {
            let mut y = 0usize;
            let mut w = scale;
            for k in 0..d {
                let (c, ov) = axis[k][idx[k]];
                y = y * side2 + c;
                w *= ov;
            }
            for i in 0..b1.ncols() {
                let ui = b1[(x, i)] * w;
                if ui != 0.0 {
                    for j in 0..b2.ncols() {
                        g[(i, j)] += ui * b2[(y, j)];
                    }
                }
            }
            let mut k = d;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < axis[k].len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX {
                break;
            }
        }
    }
    g
}

fn lattice_continuum_cross(lat: &Lattice, basis: &DMatrix<f64>, modes: &[ContinuumMode]) -> DMatrix<f64> {
    let l = lat.half_size() as f64;
    let scale = l.powf(0.5 * lat.dim() as f64);
    let mut g = DMatrix::zeros(basis.ncols(), modes.len());
    let mut coords = vec![0i64; lat.dim()];
    for x in 0..lat.num_sites() {
        lat.site_coords_into(x, &mut coords);
        let boxes: Vec<(f64, f64)> = coords
            .iter()
            .map(|&c| (c as f64 / l, (c + 1) as f64 / l))
            .collect();
        for (j, mode) in modes.iter().enumerate() {
            let integral = scale * mode.box_integral(&boxes);
            for i in 0..basis.ncols() {
                g[(i, j)] += basis[(x, i)] * integral;
            }
        }
    }
    g
}

/// `‖E_A − E_B‖` for subspaces embedded in `L²(𝒟)`.
pub fn embedded_projection_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let g = match (a, b) {
        (
            Subspace::Lattice { lattice: l1, projector: p1 },
            Subspace::Lattice { lattice: l2, projector: p2 },
        ) => lattice_cross(l1, p1.basis(), l2, p2.basis()),
        (Subspace::Lattice { lattice, projector }, Subspace::Continuum { modes, .. })
        | (Subspace::Continuum { modes, .. }, Subspace::Lattice { lattice, projector }) => {
            lattice_continuum_cross(lattice, projector.basis(), modes)
        }
        (Subspace::Continuum { modes: m1, .. }, Subspace::Continuum { modes: m2, .. }) => {
            DMatrix::from_fn(m1.len(), m2.len(), |i, j| {
                if m1[i].index == m2[j].index {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    Ok(distance_from_cross_gram(&g))
}

/// One row of a paired spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub index: Vec<usize>,
    pub discrete: Option<f64>,
    pub continuum: f64,
    pub paired: bool,
    /// More discrete values fell nearest to this cluster than it has modes.
    pub collision: bool,
    pub residual: Option<f64>,
}

fn clusters(values: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        if i == values.len()
            || (values[i] - values[start]).abs() > CLUSTER_TOL * values[start].abs()
        {
            out.push((start, i));
            start = i;
        }
    }
    out
}

/// Pairs discrete eigenvalues with continuum modes by nearest value. Each
/// discrete value goes to its nearest continuum cluster; a tie between two
/// clusters is a degeneracy error.
pub fn pair_spectra(discrete: &[EigenPair], continuum: &[ContinuumMode]) -> Result<Vec<SpectrumRow>> {
    let values: Vec<f64> = continuum.iter().map(|m| m.eigenvalue).collect();
    if values.windows(2).any(|w| w[1] > w[0]) {
        return Err(domain("continuum modes must be sorted by decreasing eigenvalue"));
    }
    let groups = clusters(&values);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    for (di, pair) in discrete.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (gi, &(s, _)) in groups.iter().enumerate() {
            let dist = (pair.eigenvalue - values[s]).abs();
            if dist < best.0 {
                second = best.0;
                best = (dist, gi);
            } else if dist < second {
                second = dist;
            }
        }
        if best.1 == usize::MAX {
            continue;
        }
        if (second - best.0).abs() <= CLUSTER_TOL * pair.eigenvalue {
            return Err(Error::Degenerate(format!(
                "discrete eigenvalue {} is equidistant from two continuum clusters",
                pair.eigenvalue
            )));
        }
        assigned[best.1].push(di);
    }
    let mut rows = Vec::with_capacity(continuum.len());
    for (gi, &(s, e)) in groups.iter().enumerate() {
        let target = values[s];
        let mut mine = assigned[gi].clone();
        mine.sort_by(|&a, &b| {
            (discrete[a].eigenvalue - target)
                .abs()
                .total_cmp(&(discrete[b].eigenvalue - target).abs())
        });
        let collision = mine.len() > e - s;
        mine.truncate(e - s);
        mine.sort_by(|&a, &b| discrete[b].eigenvalue.total_cmp(&discrete[a].eigenvalue));
        for (k, mode) in continuum[s..e].iter().enumerate() {
            let hit = mine.get(k).map(|&di| &discrete[di]);
            rows.push(SpectrumRow {
                index: mode.index.clone(),
                discrete: hit.map(|p| p.eigenvalue),
                continuum: mode.eigenvalue,
                paired: hit.is_some(),
                collision,
                residual: hit.map(|p| p.residual),
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `n0..,lambda_discrete,lambda_continuum,paired,collision,residual`.
pub fn write_spectrum_csv<W: Write>(rows: &[SpectrumRow], out: W) -> Result<()> {
    let d = rows.first().map_or(1, |r| r.index.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|i| format!("n{i}")).collect();
    for h in ["lambda_discrete", "lambda_continuum", "paired", "collision", "residual"] {
        header.push(h.into());
    }
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let mut rec: Vec<String> = r.index.iter().map(|n| n.to_string()).collect();
        rec.push(opt(r.discrete));
        rec.push(r.continuum.to_string());
        rec.push(r.paired.to_string());
        rec.push(r.collision.to_string());
        rec.push(opt(r.residual));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Discrete eigenpairs paired to the continuum cluster of mode `n`.
#[derive(Clone, Debug)]
pub struct PairedCluster {
    pub eigenvalue: f64,
    pub modes: Vec<ContinuumMode>,
    pub discrete: Vec<EigenPair>,
}

/// Computes enough of the discrete spectrum to cover every continuum mode at
/// or above `λ_n`, and returns the discrete pairs nearest to `λ_n`.
pub fn paired_cluster(env: &Environment, kappa: &DMatrix<f64>, n: &[usize]) -> Result<PairedCluster> {
    let d = env.dim();
    if n.len() != d || n.contains(&0) {
        return Err(domain("mode index must have d positive entries"));
    }
    let diag = diffusion_diagonal(kappa)?;
    let lambda = continuum_eigenvalue(&diag, n);
    let q: f64 = diag.iter().zip(n).map(|(k, &m)| k * (m * m) as f64).sum();
    let kmin = diag.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let cutoff = (q / kmin).sqrt().ceil() as usize + 1;
    let modes = continuum_eigenpairs(kappa, cutoff, d)?;
    let tol = CLUSTER_TOL * lambda;
    let cluster: Vec<ContinuumMode> = modes
        .iter()
        .filter(|m| (m.eigenvalue - lambda).abs() <= tol)
        .cloned()
        .collect();
    let above = modes.iter().filter(|m| m.eigenvalue > lambda + tol).count();
    let mult = cluster.len();
    let dim = env.lattice().num_sites();
    let k = (above + mult + 1).min(dim);
    if mult > dim {
        return Err(Error::Degenerate("cluster larger than the lattice".into()));
    }
    let mut pairs = scaled_inverse_eigenpairs(env, k)?;
    pairs.sort_by(|a, b| {
        (a.eigenvalue - lambda)
            .abs()
            .total_cmp(&(b.eigenvalue - lambda).abs())
    });
    if let (Some(last), Some(next)) = (pairs.get(mult - 1), pairs.get(mult)) {
        let (d1, d2) = ((last.eigenvalue - lambda).abs(), (next.eigenvalue - lambda).abs());
        if (d2 - d1).abs() <= tol && (last.eigenvalue - next.eigenvalue).abs() > tol {
            return Err(Error::Degenerate(format!(
                "pairing for mode {n:?} is ambiguous: {} and {} are equally close to {lambda}",
                last.eigenvalue, next.eigenvalue
            )));
        }
    }
    pairs.truncate(mult);
    Ok(PairedCluster {
        eigenvalue: lambda,
        modes: cluster,
        discrete: pairs,
    })
}

/// `‖E^L(Ξ_L⁻¹ − λ_n I)E^L‖` with `E^L` spanned by the discrete eigenvectors
/// paired to the continuum cluster of `n`.
pub fn invariance_residual(env: &Environment, kappa: &DMatrix<f64>, n: &[usize]) -> Result<f64> {
    let cluster = paired_cluster(env, kappa, n)?;
    let refs: Vec<&EigenPair> = cluster.discrete.iter().collect();
    let proj = Projector::from_pairs(&refs)?;
    let op = scaled_neg_laplacian(env);
    let solver = SpdSolver::new(&op, eigen_solver_options(op.dim()))?;
    let applied = apply_inverse(&solver, proj.basis())?;
    let m = proj.basis().tr_mul(&applied);
    let m = (&m + m.transpose()) * 0.5 - DMatrix::identity(proj.rank(), proj.rank()) * cluster.eigenvalue;
    Ok(SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs())))
}

/// `‖E^L − E‖` between the paired discrete cluster and the continuum
/// eigenspace of `n`, both embedded in `L²(𝒟)`.
pub fn eigenspace_distance(env: &Environment, kappa: &DMatrix<f64>, n: &[usize]) -> Result<f64> {
    let cluster = paired_cluster(env, kappa, n)?;
    let refs: Vec<&EigenPair> = cluster.discrete.iter().collect();
    let discrete = Subspace::Lattice {
        lattice: env.lattice().clone(),
        projector: Projector::from_pairs(&refs)?,
    };
    let continuum = Subspace::Continuum {
        dim: env.dim(),
        modes: cluster.modes,
    };
    embedded_projection_distance(&discrete, &continuum)
}

/// Largest `‖A v − λ v‖` over the given pairs, for dense `A`.
pub fn max_residual(a: &DMatrix<f64>, pairs: &[EigenPair]) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let v = DVector::from_column_slice(&p.vector);
            (a * &v - &v * p.eigenvalue).norm()
        })
        .fold(0.0, f64::max)
}
