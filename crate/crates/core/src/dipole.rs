//! Perturbative machinery around the homogeneous Laplacian: the operator
//! `D`, its Neumann series, the dipole potential `Φ`, the bounds on the
//! effective coefficient, set-partition counts and the graph cancellation
//! check.
//!
//! With `T = ∇(−Δ_L)^{−1/2}` (so `TᵀT = I`), `Φ = TTᵀ` and
//! `D = −Tᵀ M_α T`, which makes
//! `(−Δ_{w̄})^{1/2} (−Δ_w)⁻¹ (−Δ_{w̄})^{1/2} = (I − D)⁻¹` hold exactly.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{domain, Error, Result};
use crate::green::mode_1d;
use crate::lattice::{build_delta, divergence, gradient, gradient_matrix, Bond, Lattice, OneForm, ZeroForm};
use crate::rng::stream_rng;
use crate::walker::replica_environments;

/// Interior sizes up to this are materialized densely.
pub const DIPOLE_DENSE_CAP: usize = 4096;
/// Batches used for Monte Carlo error bars.
pub const BATCHES: usize = 20;

/// `4 sin²(π k / 4L)` for `k = 1..2L−1`, the spectrum of the 1-D `−Δ_L`.
fn spectrum_1d(half_size: usize) -> Vec<f64> {
    let l = half_size as f64;
    (1..2 * half_size)
        .map(|k| 4.0 * (PI * k as f64 / (4.0 * l)).sin().powi(2))
        .collect()
}

/// Orthonormal 1-D eigenbasis, `q[x][k] = sc(π (k+1) x / 2L) / √L`.
fn basis_1d(half_size: usize) -> Vec<Vec<f64>> {
    let l = half_size as f64;
    let n = 2 * half_size - 1;
    (0..n)
        .map(|x| {
            let xi = (x as f64 - l + 1.0) / l;
            (0..n).map(|k| mode_1d(k + 1, xi) / l.sqrt()).collect()
        })
        .collect()
}

/// Applies `f(−Δ_{L,1})` through the separable eigenbasis.
pub fn apply_homogeneous_function(
    v: &[f64],
    half_size: usize,
    dim: usize,
    f: impl Fn(f64) -> f64,
) -> Result<ZeroForm> {
    let lat = Lattice::new(dim, half_size)?;
    if v.len() != lat.num_sites() {
        return Err(Error::Shape {
            expected: lat.num_sites(),
            actual: v.len(),
        });
    }
    let side = lat.side();
    let q = basis_1d(half_size);
    let mu = spectrum_1d(half_size);
    let mut a = v.to_vec();
    let transform = |a: &mut Vec<f64>, forward: bool| {
        let mut buf = vec![0.0; side];
        for axis in 0..dim {
            let stride = side.pow((dim - 1 - axis) as u32);
            let block = stride * side;
            for start in 0..a.len() / block {
                for off in 0..stride {
                    let base = start * block + off;
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot = (0..side)
                            .map(|x| {
                                let qv = if forward { q[x][k] } else { q[k][x] };
                                qv * a[base + x * stride]
                            })
                            .sum();
                    }
                    for (k, val) in buf.iter().enumerate() {
                        a[base + k * stride] = *val;
                    }
                }
            }
        }
    };
    transform(&mut a, true);
    let mut idx = vec![0usize; dim];
    for (p, slot) in a.iter_mut().enumerate() {
        let mut r = p;
        for s in idx.iter_mut().rev() {
            *s = r % side;
            r /= side;
        }
        *slot *= f(idx.iter().map(|&k| mu[k]).sum());
    }
    transform(&mut a, false);
    Ok(ZeroForm(a))
}

/// `(−Δ_{L,1})^{−1/2} v`.
pub fn inv_sqrt_homogeneous(v: &[f64], half_size: usize, dim: usize) -> Result<ZeroForm> {
    apply_homogeneous_function(v, half_size, dim, |m| m.powf(-0.5))
}

fn check_cap(lat: &Lattice) -> Result<()> {
    if lat.num_sites() > DIPOLE_DENSE_CAP {
        return Err(Error::CapExceeded {
            what: "dense dipole operators",
            size: lat.num_sites(),
            cap: DIPOLE_DENSE_CAP,
        });
    }
    Ok(())
}

/// Dense `(−Δ_L)^{−1/2}` and `T = ∇(−Δ_L)^{−1/2}` for one lattice.
#[derive(Clone, Debug)]
pub struct HomogeneousFactor {
    lattice: Lattice,
    inv_sqrt: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl HomogeneousFactor {
    pub fn new(dim: usize, half_size: usize) -> Result<Self> {
        let lattice = Lattice::new(dim, half_size)?;
        check_cap(&lattice)?;
        let n = lattice.num_sites();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                inv_sqrt_homogeneous(&e, half_size, dim).map(|v| v.0)
            })
            .collect::<Result<_>>()?;
        let inv_sqrt = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
        let t = gradient_matrix(&lattice) * &inv_sqrt;
        Ok(Self {
            lattice,
            inv_sqrt,
            t,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// `Φ = T Tᵀ`.
    pub fn phi(&self) -> DMatrix<f64> {
        &self.t * self.t.transpose()
    }

    /// `D = −Tᵀ M_α T`.
    pub fn d_matrix(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        if alpha.len() != self.t.nrows() {
            return Err(Error::Shape {
                expected: self.t.nrows(),
                actual: alpha.len(),
            });
        }
        let mut scaled = self.t.clone();
        for (b, mut row) in scaled.row_iter_mut().enumerate() {
            row *= -alpha[b];
        }
        let d = self.t.tr_mul(&scaled);
        Ok((&d + d.transpose()) * 0.5)
    }
}

fn check_env(env: &Environment, factor: &HomogeneousFactor) -> Result<()> {
    if env.dim() != factor.lattice.dim() || env.half_size() != factor.lattice.half_size() {
        return Err(domain("environment and factor lattices differ"));
    }
    Ok(())
}

/// `D_{L,w}` for the fluctuation `α = w/w̄ − 1`.
pub fn d_matrix(env: &Environment, w_bar: f64) -> Result<DMatrix<f64>> {
    let factor = HomogeneousFactor::new(env.dim(), env.half_size())?;
    factor.d_matrix(&env.alpha_field(w_bar)?)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `max |(−Δ_{w̄})^{1/2}(−Δ_w)⁻¹(−Δ_{w̄})^{1/2} − (I − D)⁻¹|`.
pub fn resolvent_identity_residual(env: &Environment, w_bar: f64, factor: &HomogeneousFactor) -> Result<f64> {
    check_env(env, factor)?;
    let d = factor.d_matrix(&env.alpha_field(w_bar)?)?;
    let n = d.nrows();
    let lhs_inner = build_delta(env)
        .scaled(-1.0)
        .to_dense()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("−Δ_w is singular".into()))?;
    let sqrt = factor
        .inv_sqrt
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("(−Δ)^{-1/2} is singular".into()))?;
    let lhs = &sqrt * lhs_inner * &sqrt * w_bar;
    let rhs = (DMatrix::identity(n, n) - d)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I − D is singular".into()))?;
    Ok((lhs - rhs).amax())
}

/// `D v = −S ∇*(M_α ∇ S v)` with `S = (−Δ_L)^{−1/2}`, without forming `D`.
pub fn apply_d(env: &Environment, w_bar: f64, v: &[f64]) -> Result<ZeroForm> {
    let (l, d) = (env.half_size(), env.dim());
    let alpha = env.alpha_field(w_bar)?;
    let sv = inv_sqrt_homogeneous(v, l, d)?;
    let mut grad = gradient(env.lattice(), &sv)?;
    for (g, a) in grad.iter_mut().zip(alpha.iter()) {
        *g *= -a;
    }
    let div = divergence(env.lattice(), &grad)?;
    inv_sqrt_homogeneous(&div, l, d)
}

/// `Σ_{k=0}^{n} Dᵏ v`, matrix-free.
pub fn neumann_partial_sum(env: &Environment, w_bar: f64, order: usize, v: &[f64]) -> Result<ZeroForm> {
    if v.len() != env.lattice().num_sites() {
        return Err(Error::Shape {
            expected: env.lattice().num_sites(),
            actual: v.len(),
        });
    }
    let mut term = v.to_vec();
    let mut sum = term.clone();
    for _ in 0..order {
        term = apply_d(env, w_bar, &term)?.0;
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
    }
    Ok(ZeroForm(sum))
}

/// `Σ_{k=0}^{n} Dᵏ v` for a materialized `D`.
pub fn neumann_partial_sum_dense(d: &DMatrix<f64>, order: usize, v: &[f64]) -> Result<ZeroForm> {
    if v.len() != d.nrows() {
        return Err(Error::Shape {
            expected: d.nrows(),
            actual: v.len(),
        });
    }
    let mut term = DVector::from_column_slice(v);
    let mut sum = term.clone();
    for _ in 0..order {
        term = d * term;
        sum += &term;
    }
    Ok(ZeroForm(sum.iter().copied().collect()))
}

/// `Φ = ∇(−Δ_L)⁻¹∇*` on canonical bonds: dense when the bond count is at
/// most the cap, otherwise applied through the separable eigenbasis.
#[derive(Clone, Debug)]
pub enum DipoleOperator {
    Dense { lattice: Lattice, matrix: DMatrix<f64> },
    Lazy { lattice: Lattice },
}

impl DipoleOperator {
    pub fn new(dim: usize, half_size: usize) -> Result<Self> {
        let lattice = Lattice::new(dim, half_size)?;
        if lattice.num_bonds() <= DIPOLE_DENSE_CAP && lattice.num_sites() <= DIPOLE_DENSE_CAP {
            let matrix = dipole_matrix(half_size, dim)?;
            Ok(Self::Dense { lattice, matrix })
        } else {
            Ok(Self::Lazy { lattice })
        }
    }

    pub fn lattice(&self) -> &Lattice {
        match self {
            Self::Dense { lattice, .. } | Self::Lazy { lattice } => lattice,
        }
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Self::Dense { matrix, .. } => Some(matrix),
            Self::Lazy { .. } => None,
        }
    }

    /// `Φ ω`.
    pub fn apply(&self, omega: &[f64]) -> Result<OneForm> {
        let lat = self.lattice();
        match self {
            Self::Dense { matrix, .. } => {
                if omega.len() != matrix.ncols() {
                    return Err(Error::Shape {
                        expected: matrix.ncols(),
                        actual: omega.len(),
                    });
                }
                Ok(OneForm((matrix * DVector::from_column_slice(omega)).iter().copied().collect()))
            }
            Self::Lazy { .. } => {
                let div = divergence(lat, omega)?;
                let u = apply_homogeneous_function(&div, lat.half_size(), lat.dim(), |m| 1.0 / m)?;
                gradient(lat, &u)
            }
        }
    }

    pub fn get(&self, b: usize, b2: usize) -> Result<f64> {
        let lat = self.lattice();
        if b >= lat.num_bonds() || b2 >= lat.num_bonds() {
            return Err(domain("bond index out of range"));
        }
        match self {
            Self::Dense { matrix, .. } => Ok(matrix[(b, b2)]),
            Self::Lazy { .. } => dipole_phi(lat.half_size(), lat.dim(), &lat.bond(b), &lat.bond(b2)),
        }
    }
}

/// `Φ_{b,b'} = L^{−d} Σ_n λ̃_n (∇e_n^L)_b (∇e_n^L)_{b'}` from the explicit
/// eigenfunctions.
pub fn dipole_phi(half_size: usize, dim: usize, b: &Bond, b2: &Bond) -> Result<f64> {
    let lat = Lattice::new(dim, half_size)?;
    for bond in [b, b2] {
        if bond.axis >= dim || bond.base.len() != dim || lat.bond_index(bond.axis, &bond.base).is_none() {
            return Err(domain("bond is not a canonical bond of the lattice"));
        }
    }
    let l = half_size as f64;
    let side = 2 * half_size - 1;
    let mu = spectrum_1d(half_size);
    // Per axis and mode, value at the base coordinate and its forward difference.
    let grad = |bond: &Bond, axis: usize, k: usize| -> f64 {
        let x = bond.base[axis] as f64;
        let at = |y: f64| mode_1d(k + 1, y / l);
        if axis == bond.axis {
            at(x + 1.0) - at(x)
        } else {
            at(x)
        }
    };
    let total = side.pow(dim as u32);
    let mut sum = 0.0;
    let mut idx = vec![0usize; dim];
    for p in 0..total {
        let mut r = p;
        for s in idx.iter_mut().rev() {
            *s = r % side;
            r /= side;
        }
        let lam: f64 = idx.iter().map(|&k| mu[k]).sum();
        let g1: f64 = (0..dim).map(|a| grad(b, a, idx[a])).product();
        let g2: f64 = (0..dim).map(|a| grad(b2, a, idx[a])).product();
        sum += g1 * g2 / lam;
    }
    Ok(sum / l.powi(dim as i32))
}

/// Dense `Φ` over all canonical bonds.
pub fn dipole_matrix(half_size: usize, dim: usize) -> Result<DMatrix<f64>> {
    Ok(HomogeneousFactor::new(dim, half_size)?.phi())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorDefects {
    pub asymmetry: f64,
    pub idempotence: f64,
    /// Largest distance of an eigenvalue from `{0, 1}`.
    pub spectrum: f64,
    pub trace: f64,
}

pub fn projector_defects(p: &DMatrix<f64>) -> ProjectorDefects {
    let asymmetry = (p - p.transpose()).amax();
    let idempotence = (p * p - p).amax();
    let spectrum = SymmetricEigen::new((p + p.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.abs().min((v - 1.0).abs()))
        .fold(0.0, f64::max);
    ProjectorDefects {
        asymmetry,
        idempotence,
        spectrum,
        trace: p.trace(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiQuadrature {
    /// Stop when two successive refinements differ by at most this.
    pub tol: f64,
    pub initial_points: usize,
    /// Cap on the number of quadrature nodes.
    pub max_nodes: usize,
}

impl Default for PhiQuadrature {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            initial_points: 256,
            max_nodes: 1 << 22,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiInfinite {
    pub value: f64,
    pub points_per_axis: usize,
    pub last_change: f64,
}

/// `∫_{−π}^{π} e^{iks} / (c − 2 cos s) ds` with `c = a + 2`, `a > 0`.
fn line_integral(a: f64, k: i64) -> f64 {
    let root = (a * (a + 4.0)).sqrt();
    let z = (a + 2.0 - root) * 0.5;
    2.0 * PI * z.powi(k.unsigned_abs() as i32) / root
}

/// Infinite-volume dipole potential between `b = ⟨x, x+e_i⟩` and
/// `b' = ⟨y, y+e_j⟩` with `offset = x − y`:
/// `(2π)^{−d} ∫ Re[(e^{iφ_i}−1)(e^{−iφ_j}−1) e^{iφ·r}] / (4 Σ sin²(φ_k/2)) dφ`
/// over `[−π, π]ᵈ`. The last axis is integrated in closed form and the rest
/// by a midpoint rule refined until it settles.
pub fn dipole_phi_infinite(
    dim: usize,
    offset: &[i64],
    i: usize,
    j: usize,
    quad: &PhiQuadrature,
) -> Result<PhiInfinite> {
    if dim == 0 || offset.len() != dim || i >= dim || j >= dim {
        return Err(domain("offset and directions must match the dimension"));
    }
    if dim == 1 {
        // The integrand reduces to cos(φ r).
        return Ok(PhiInfinite {
            value: if offset[0] == 0 { 1.0 } else { 0.0 },
            points_per_axis: 0,
            last_change: 0.0,
        });
    }
    let last = dim - 1;
    // Shifts along the last axis with their (complex) coefficients.
    let mut shifts: Vec<(i64, f64)> = vec![(offset[last], 1.0)];
    let mul = |s: &[(i64, f64)], delta: i64| -> Vec<(i64, f64)> {
        s.iter()
            .flat_map(|&(k, c)| [(k + delta, c), (k, -c)])
            .collect()
    };
    if i == last {
        shifts = mul(&shifts, 1);
    }
    if j == last {
        shifts = mul(&shifts, -1);
    }
    let rest = dim - 1;
    let eval = |m: usize| -> f64 {
        let h = 2.0 * PI / m as f64;
        let nodes = m.pow(rest as u32);
        let chunk = 4096;
        let parts: Vec<f64> = (0..nodes.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut acc = 0.0;
                let mut phi = vec![0.0; rest];
                for p in c * chunk..((c + 1) * chunk).min(nodes) {
                    let mut r = p;
                    for s in phi.iter_mut().rev() {
                        *s = -PI + ((r % m) as f64 + 0.5) * h;
                        r /= m;
                    }
                    let a: f64 = phi.iter().map(|v| 2.0 - 2.0 * v.cos()).sum();
                    let line: f64 = shifts.iter().map(|&(k, c)| c * line_integral(a, k)).sum();
                    // Remaining complex prefactor.
                    let mut re = 1.0;
                    let mut im = 0.0;
                    let mut times = |x: f64, y: f64| {
                        let (r2, i2) = (re * x - im * y, re * y + im * x);
                        re = r2;
                        im = i2;
                    };
                    let phase: f64 = phi.iter().zip(offset).map(|(p, &o)| p * o as f64).sum();
                    times(phase.cos(), phase.sin());
                    if i != last {
                        times(phi[i].cos() - 1.0, phi[i].sin());
                    }
                    if j != last {
                        times(phi[j].cos() - 1.0, -phi[j].sin());
                    }
                    acc += re * line;
                }
                acc
            })
            .collect();
        parts.iter().sum::<f64>() * h.powi(rest as i32) / (2.0 * PI).powi(dim as i32)
    };
    let mut m = quad.initial_points.max(8);
    let mut prev = eval(m);
    loop {
        let next_m = 2 * m;
        if next_m.checked_pow(rest as u32).is_none_or(|n| n > quad.max_nodes) {
            return Err(Error::NotConverged {
                what: "dipole quadrature",
                iterations: m,
                residual: f64::NAN,
            });
        }
        let cur = eval(next_m);
        let change = (cur - prev).abs();
        m = next_m;
        if change <= quad.tol {
            return Ok(PhiInfinite {
                value: cur,
                points_per_axis: m,
                last_change: change,
            });
        }
        prev = cur;
    }
}

/// Log-log slope of `|Φ_∞|` between parallel bonds along axis 0 separated by
/// the given distances along axis 0.
pub fn phi_decay_slope(dim: usize, distances: &[i64], quad: &PhiQuadrature) -> Result<f64> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &r in distances {
        let mut off = vec![0; dim];
        off[0] = r;
        let v = dipole_phi_infinite(dim, &off, 0, 0, quad)?.value;
        x.push((r as f64).ln());
        y.push(v.abs().ln());
    }
    Ok(crate::walker::fit_line(&x, &y)?.slope)
}

fn sample_vectors(n: usize, k: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(seed, 0);
    (0..k)
        .map(|_| DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchwarzReport {
    pub envs: usize,
    pub vectors: usize,
    pub w_bar: f64,
    /// `[(u, −w̄Δu) − (u, [Ê(−Δ_w)⁻¹]⁻¹ u)] / (u, −w̄Δu)` per test vector.
    pub margins: Vec<f64>,
    pub worst_margin: f64,
    /// Same with `Ê(−Δ_w)` in place of `−w̄Δ`; nonnegative by operator
    /// convexity of the inverse.
    pub worst_jensen_margin: f64,
}

/// Checks `[Ê(−Δ_w)⁻¹]⁻¹ ≤ −w̄Δ` as quadratic forms on `k` random vectors.
pub fn schwarz_bound_check(spec: &EnvironmentSpec, envs: usize, vectors: usize, vector_seed: u64) -> Result<SchwarzReport> {
    spec.validate()?;
    let lat = Lattice::new(spec.dim, spec.half_size)?;
    check_cap(&lat)?;
    if vectors == 0 {
        return Err(domain("need at least one test vector"));
    }
    let w_bar = spec.family.mean_rate();
    let reps = replica_environments(spec, envs)?;
    let n = lat.num_sites();
    // Fixed chunks summed in order keep the result independent of scheduling.
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = reps
        .par_chunks(16)
        .map(|chunk| {
            let mut acc = (DMatrix::zeros(n, n), DMatrix::zeros(n, n));
            for e in chunk {
                let a = build_delta(e).scaled(-1.0).to_dense();
                let inv = a
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("−Δ_w is not positive definite".into()))?
                    .inverse();
                acc.0 += inv;
                acc.1 += a;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (inv_sum, op_sum) = partial
        .into_iter()
        .fold((DMatrix::zeros(n, n), DMatrix::zeros(n, n)), |a, b| (a.0 + b.0, a.1 + b.1));
    let m = envs as f64;
    let mean_inv = inv_sum / m;
    let mean_op = op_sum / m;
    let chol = ((&mean_inv + mean_inv.transpose()) * 0.5)
        .cholesky()
        .ok_or_else(|| Error::Numerical("sample average of (−Δ_w)⁻¹ is singular".into()))?;
    let hom = build_delta(&Environment::from_rates(spec.dim, spec.half_size, vec![w_bar; lat.num_bonds()])?)
        .scaled(-1.0)
        .to_dense();
    let mut margins = Vec::with_capacity(vectors);
    let mut worst_jensen = f64::INFINITY;
    for u in sample_vectors(n, vectors, vector_seed) {
        let upper = u.dot(&(&hom * &u));
        let inner = u.dot(&chol.solve(&u));
        let jensen = u.dot(&(&mean_op * &u));
        margins.push((upper - inner) / upper);
        worst_jensen = worst_jensen.min((jensen - inner) / jensen);
    }
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SchwarzReport {
        envs,
        vectors,
        w_bar,
        margins,
        worst_margin: worst,
        worst_jensen_margin: worst_jensen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub envs: usize,
    pub order: Option<usize>,
    pub w_bar: f64,
    pub size: usize,
    /// `Θ̂`, row-major.
    pub theta: Vec<f64>,
    pub lambda_min: f64,
    /// `ρ̂ = λ_max(Θ̂)`.
    pub rho: f64,
    /// `κ̂ / w̄ = 1 − (e₁, Θ̂ e₁)`.
    pub kappa_ratio: f64,
    pub kappa: f64,
    /// Batch standard errors; absent with fewer than two envs per batch.
    pub sigma_lambda_min: Option<f64>,
    pub sigma_rho: Option<f64>,
    pub sigma_kappa_ratio: Option<f64>,
    /// `λ_min(Θ̂) ≥ −3σ`.
    pub psd_within_3_sigma: bool,
    /// `1 − ρ̂ ≤ κ̂/w̄ ≤ 1 + 3σ`.
    pub bounds_hold: bool,
}

struct ThetaSummary {
    theta: DMatrix<f64>,
    lambda_min: f64,
    rho: f64,
    kappa_ratio: f64,
}

fn summarize_theta(sum: &DMatrix<f64>, count: usize, e1: &DVector<f64>) -> Result<ThetaSummary> {
    let n = sum.nrows();
    let mean = sum / count as f64;
    let inv = ((&mean + mean.transpose()) * 0.5)
        .cholesky()
        .ok_or_else(|| Error::Numerical("sample average of (I − D)⁻¹ is not invertible".into()))?
        .inverse();
    let theta = DMatrix::identity(n, n) - inv;
    let theta = (&theta + theta.transpose()) * 0.5;
    let eig = SymmetricEigen::new(theta.clone());
    let lambda_min = eig.eigenvalues.min();
    let rho = eig.eigenvalues.max();
    let kappa_ratio = 1.0 - e1.dot(&(&theta * e1));
    Ok(ThetaSummary {
        theta,
        lambda_min,
        rho,
        kappa_ratio,
    })
}

/// `Θ̂ = I − [Ê(I − D)⁻¹]⁻¹` over `envs` replicas of `spec`. With
/// `order = Some(n)` the resolvent is replaced by its Neumann partial sum.
pub fn theta_estimate(spec: &EnvironmentSpec, envs: usize, order: Option<usize>) -> Result<ThetaReport> {
    spec.validate()?;
    let factor = HomogeneousFactor::new(spec.dim, spec.half_size)?;
    let w_bar = spec.family.mean_rate();
    let reps = replica_environments(spec, envs)?;
    let n = factor.lattice.num_sites();
    let resolvents: Vec<DMatrix<f64>> = reps
        .par_iter()
        .map(|e| {
            let d = factor.d_matrix(&e.alpha_field(w_bar)?)?;
            match order {
                Some(k) => {
                    let mut term = DMatrix::identity(n, n);
                    let mut sum = term.clone();
                    for _ in 0..k {
                        term = &d * term;
                        sum += &term;
                    }
                    Ok(sum)
                }
                None => (DMatrix::identity(n, n) - d)
                    .try_inverse()
                    .ok_or_else(|| Error::Numerical("I − D is singular".into())),
            }
        })
        .collect::<Result<_>>()?;
    let e1 = DVector::from_vec(crate::spectral::homogeneous_vector(&factor.lattice, &vec![1; spec.dim]).0);
    let total = resolvents.iter().fold(DMatrix::zeros(n, n), |a, r| a + r);
    let full = summarize_theta(&total, envs, &e1)?;
    let per_batch = envs / BATCHES;
    let (sl, sr, sk) = if per_batch >= 2 {
        let batches: Vec<ThetaSummary> = (0..BATCHES)
            .map(|b| {
                let sum = resolvents[b * per_batch..(b + 1) * per_batch]
                    .iter()
                    .fold(DMatrix::zeros(n, n), |a, r| a + r);
                summarize_theta(&sum, per_batch, &e1)
            })
            .collect::<Result<_>>()?;
        let se = |f: &dyn Fn(&ThetaSummary) -> f64| {
            let v: Vec<f64> = batches.iter().map(f).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            Some((var / v.len() as f64).sqrt())
        };
        (se(&|s| s.lambda_min), se(&|s| s.rho), se(&|s| s.kappa_ratio))
    } else {
        (None, None, None)
    };
    let psd = full.lambda_min >= -3.0 * sl.unwrap_or(0.0) - 1e-12;
    let bounds = 1.0 - full.rho <= full.kappa_ratio + 1e-12
        && full.kappa_ratio <= 1.0 + 3.0 * sk.unwrap_or(0.0) + 1e-12;
    Ok(ThetaReport {
        envs,
        order,
        w_bar,
        size: n,
        theta: full.theta.transpose().iter().copied().collect(),
        lambda_min: full.lambda_min,
        rho: full.rho,
        kappa_ratio: full.kappa_ratio,
        kappa: w_bar * full.kappa_ratio,
        sigma_lambda_min: sl,
        sigma_rho: sr,
        sigma_kappa_ratio: sk,
        psd_within_3_sigma: psd,
        bounds_hold: bounds,
    })
}

/// Number of partitions of `{1..n}` into `r` nonempty blocks, from
/// `Π(n,r) = Π(n−1,r−1) + r Π(n−1,r)`. `None` on overflow.
pub fn stirling_pi(n: usize, r: usize) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let mut row: Vec<u128> = vec![0; r + 1];
    row[0] = 1;
    for m in 1..=n {
        for k in (1..=r.min(m)).rev() {
            row[k] = row[k - 1].checked_add((k as u128).checked_mul(row[k])?)?;
        }
        row[0] = 0;
    }
    Some(row[r])
}

/// Bounds derived from the partition conjecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBound {
    pub delta_prime: f64,
    /// `C δ' / (1 − δ')`.
    pub k_l: f64,
    /// `4δC(1+C) / (1 − 4δ(1+C))`.
    pub rho: f64,
}

pub fn kl_series_bound(delta: f64, c: f64) -> Result<KlBound> {
    if !(delta >= 0.0 && c >= 0.0 && delta.is_finite() && c.is_finite()) {
        return Err(domain("delta and C must be finite and >= 0"));
    }
    let dp = 4.0 * (1.0 + c) * delta;
    if dp >= 1.0 {
        return Err(Error::Divergent(format!(
            "delta' = 4(1+C)delta = {dp} >= 1; the series bound does not apply"
        )));
    }
    Ok(KlBound {
        delta_prime: dp,
        k_l: c * dp / (1.0 - dp),
        rho: 4.0 * delta * c * (1.0 + c) / (1.0 - 4.0 * delta * (1.0 + c)),
    })
}

/// `Π̃(n, r)` saturating the conjectured recursion
/// `Π̃(n,r) = Π̃(n−1,r−1) + C Π̃(n−1,r)` with `Π̃(r,r) = Cʳ`.
pub fn conjecture_pi(n: usize, r: usize, c: f64) -> f64 {
    if r == 0 || r > n {
        return 0.0;
    }
    let mut table = vec![vec![0.0; n + 1]; n + 1];
    for m in 1..=n {
        table[m][m] = c.powi(m as i32);
        for k in 1..m {
            table[m][k] = table[m - 1][k - 1] + c * table[m - 1][k];
        }
    }
    table[n][r]
}

/// `Σ_r Π̃(n, r)` and the bound `C (1 + C)ⁿ`.
pub fn conjecture_sum(n: usize, c: f64) -> (f64, f64) {
    let s = (1..=n).map(|r| conjecture_pi(n, r, c)).sum();
    (s, c * (1.0 + c).powi(n as i32))
}

/// Moments `m_k = E αᵏ`, `k = 1..k_max`; `m_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentModel {
    moments: Vec<f64>,
}

impl MomentModel {
    /// `moments[k−1] = m_k`.
    pub fn new(moments: Vec<f64>) -> Self {
        Self { moments }
    }

    /// Moments of `α ~ U[−δ, δ]`.
    pub fn bounded_uniform(delta: f64, k_max: usize) -> Self {
        Self::new(
            (1..=k_max)
                .map(|k| {
                    if k % 2 == 0 {
                        delta.powi(k as i32) / (k + 1) as f64
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }

    pub fn k_max(&self) -> usize {
        self.moments.len()
    }

    pub fn is_centered(&self) -> bool {
        self.moments.first().is_none_or(|m| *m == 0.0)
    }

    /// `|m_k| ≤ δᵏ` for every stored moment.
    pub fn within(&self, delta: f64) -> bool {
        self.moments
            .iter()
            .enumerate()
            .all(|(k, m)| m.abs() <= delta.powi(k as i32 + 1) + 1e-15)
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Ok(1.0);
        }
        self.moments
            .get(k - 1)
            .copied()
            .ok_or_else(|| domain(format!("moment of order {k} not provided")))
    }

    /// `ᾱ_Γ = Π_v m_{visits of v}` for a path over abstract bonds.
    pub fn path_mean(&self, path: &[u8]) -> Result<f64> {
        let mut counts = [0usize; 256];
        for &b in path {
            counts[b as usize] += 1;
        }
        counts.iter().filter(|c| **c > 0).map(|&c| self.get(c)).product()
    }
}

/// Graph induced by a path over abstract bonds, with its coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleGraphReport {
    pub vertices: Vec<u8>,
    /// Unordered edges `(min, max)` with multiplicity; loops have equal ends.
    pub edges: Vec<(u8, u8)>,
    pub first: u8,
    pub last: u8,
    pub paths: usize,
    pub a_g: f64,
    pub bridge: bool,
}

pub const CANCELLATION_MAX_N: usize = 8;
pub const CANCELLATION_MAX_BONDS: usize = 4;

/// Whether the multigraph has an edge whose removal disconnects it; loops
/// never count and parallel edges protect each other.
pub fn has_bridge(vertices: &[u8], edges: &[(u8, u8)]) -> bool {
    let mut mult: BTreeMap<(u8, u8), usize> = BTreeMap::new();
    for &(a, b) in edges {
        if a != b {
            *mult.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let connected_without = |skip: Option<(u8, u8)>| {
        let Some(&start) = vertices.first() else {
            return true;
        };
        let mut seen = vec![start];
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &(a, b) in mult.keys() {
                if Some((a, b)) == skip {
                    continue;
                }
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen.contains(&other) {
                    seen.push(other);
                    stack.push(other);
                }
            }
        }
        seen.len() == vertices.len()
    };
    mult.iter()
        .any(|(&e, &count)| count == 1 && !connected_without(Some(e)))
}

/// `Σ_{contiguous splittings (Γ₁..Γ_s)} (−1)^{s+1} Π_j ᾱ_{Γ_j}`.
fn decomposition_sum(path: &[u8], moments: &MomentModel) -> Result<f64> {
    let n = path.len();
    let mut total = 0.0;
    for mask in 0u32..(1 << (n - 1)) {
        let mut prod = 1.0;
        let mut start = 0;
        let mut pieces = 0;
        for cut in 0..n {
            if cut == n - 1 || mask & (1 << cut) != 0 {
                prod *= moments.path_mean(&path[start..=cut])?;
                start = cut + 1;
                pieces += 1;
                if prod == 0.0 {
                    break;
                }
            }
        }
        if prod != 0.0 {
            total += if pieces % 2 == 1 { prod } else { -prod };
        }
    }
    Ok(total)
}

/// Enumerates paths of length `1..=n_max` over `bonds` abstract bonds,
/// groups them by induced graph and endpoints, and computes `A_G`. With
/// `admissible_only`, paths visiting some bond once are skipped.
pub fn enumerate_graphs(
    n_max: usize,
    bonds: usize,
    moments: &MomentModel,
    admissible_only: bool,
) -> Result<Vec<AdmissibleGraphReport>> {
    if n_max == 0 || n_max > CANCELLATION_MAX_N || bonds == 0 || bonds > CANCELLATION_MAX_BONDS {
        return Err(Error::CapExceeded {
            what: "cancellation enumeration (path length, bonds)",
            size: n_max.max(bonds),
            cap: CANCELLATION_MAX_N,
        });
    }
    type Key = (Vec<u8>, Vec<(u8, u8)>, u8, u8);
    let mut groups: HashMap<Key, (usize, f64)> = HashMap::new();
    for n in 1..=n_max {
        let total = bonds.pow(n as u32);
        let mut path = vec![0u8; n];
        for p in 0..total {
            let mut r = p;
            for slot in path.iter_mut().rev() {
                *slot = (r % bonds) as u8;
                r /= bonds;
            }
            let mut counts = [0usize; CANCELLATION_MAX_BONDS];
            for &b in &path {
                counts[b as usize] += 1;
            }
            if admissible_only && counts.contains(&1) {
                continue;
            }
            let vertices: Vec<u8> = (0..bonds as u8).filter(|&b| counts[b as usize] > 0).collect();
            let mut edges: Vec<(u8, u8)> = path.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
            edges.sort_unstable();
            let key = (vertices, edges, path[0], path[n - 1]);
            let a = decomposition_sum(&path, moments)?;
            let entry = groups.entry(key).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += a;
        }
    }
    let mut out: Vec<AdmissibleGraphReport> = groups
        .into_iter()
        .map(|((vertices, edges, first, last), (paths, a_g))| {
            let bridge = has_bridge(&vertices, &edges);
            AdmissibleGraphReport {
                vertices,
                edges,
                first,
                last,
                paths,
                a_g,
                bridge,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.edges.len(), &a.vertices, &a.edges, a.first, a.last).cmp(&(
            b.edges.len(),
            &b.vertices,
            &b.edges,
            b.first,
            b.last,
        ))
    });
    Ok(out)
}

/// Admissible graphs only; every bridged graph should have `A_G = 0`.
pub fn cancellation_check(n_max: usize, bonds: usize, moments: &MomentModel) -> Result<Vec<AdmissibleGraphReport>> {
    enumerate_graphs(n_max, bonds, moments, true)
}
