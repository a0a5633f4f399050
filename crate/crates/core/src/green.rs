//! Inverse-Laplacian kernels, heat kernels and semigroup evolution.
//!
//! Kernels live on `𝒟 = (−1, 1)ᵈ`. A point `r` is attached to the site
//! `[L r]` (componentwise floor), so the site `x` owns the box
//! `Π_i [x_i / L, (x_i + 1) / L)`. The strip `[−1, −1 + 1/L)` maps to the
//! absorbing layer and carries the value zero.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{domain, Error, Result};
use crate::lattice::{build_delta, Lattice, SparseSymmetricOperator, ZeroForm};
use crate::solve::{CgOptions, SpdSolver};

/// Largest `L` for which [`green_matrix_1d`] materializes the dense inverse.
pub const GREEN_DENSE_MAX_L: usize = 2048;
/// Interior sizes up to this use an exact dense eigendecomposition for the
/// semigroup; larger systems use a Chebyshev expansion.
pub const SEMIGROUP_DENSE_CAP: usize = 512;
/// Default kernel grid resolution per axis, endpoints included.
pub const DEFAULT_GRID: usize = 129;

/// The increasing solution of the homogeneous 1-D difference equation,
/// normalized to run from 0 at `x = −L` to 1 at `x = L`.
#[derive(Clone, Debug, PartialEq)]
pub struct XiProfile {
    half_size: usize,
    /// `ξ_x` for `x = −L+1, …, L−1`.
    xi: Vec<f64>,
    /// `η_L = (Σ_b w_b⁻¹)⁻¹`.
    eta: f64,
}

impl XiProfile {
    pub fn half_size(&self) -> usize {
        self.half_size
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `ζ = 2ξ − 1`.
    pub fn zeta(&self) -> Vec<f64> {
        self.xi.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// `ξ_x` extended by the boundary values `ξ_{−L} = 0`, `ξ_L = 1`.
    pub fn xi_at(&self, x: i64) -> f64 {
        let l = self.half_size as i64;
        if x <= -l {
            0.0
        } else if x >= l {
            1.0
        } else {
            self.xi[(x + l - 1) as usize]
        }
    }

    /// `(Δ⁻¹)_{x,y} = ξ_x (1 − ξ_y) / (−η)` for `x ≤ y`, symmetric otherwise.
    /// Zero when either site lies outside `Λ_L`.
    pub fn green_entry(&self, x: i64, y: i64) -> f64 {
        let l = self.half_size as i64;
        if x.abs() >= l || y.abs() >= l {
            return 0.0;
        }
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        self.xi_at(lo) * (1.0 - self.xi_at(hi)) / -self.eta
    }
}

/// Builds `ξ_L` and checks the flux identity `w_{x−1,x} (∇ξ)_x = η` and the
/// Wronskian `W = −η` at every bond.
pub fn xi_profile(env: &Environment) -> Result<XiProfile> {
    require_1d(env)?;
    let rates = env.rates();
    let inv_total: f64 = rates.iter().map(|w| w.recip()).sum();
    let eta = 1.0 / inv_total;
    let mut xi = Vec::with_capacity(rates.len() - 1);
    let mut acc = 0.0;
    for w in &rates[..rates.len() - 1] {
        acc += w.recip();
        xi.push(eta * acc);
    }
    let profile = XiProfile {
        half_size: env.half_size(),
        xi,
        eta,
    };
    let l = env.half_size() as i64;
    let mut worst = 0.0f64;
    for x in -l + 1..=l {
        let w = rates[(x - 1 + l) as usize];
        let (u1, u1_prev) = (profile.xi_at(x), profile.xi_at(x - 1));
        let flux1 = w * (u1 - u1_prev);
        let flux2 = w * ((1.0 - u1) - (1.0 - u1_prev));
        let wronskian = u1 * flux2 - (1.0 - u1) * flux1;
        worst = worst.max((flux1 - eta).abs()).max((wronskian + eta).abs());
    }
    if worst > 1e-12 {
        return Err(Error::Numerical(format!(
            "flux/Wronskian identity violated by {worst:e}"
        )));
    }
    Ok(profile)
}

/// Dense `Δ_{L,w}⁻¹` from the closed form.
pub fn green_matrix_1d(env: &Environment) -> Result<DMatrix<f64>> {
    require_1d(env)?;
    if env.half_size() > GREEN_DENSE_MAX_L {
        return Err(Error::CapExceeded {
            what: "dense 1-D Green matrix",
            size: env.half_size(),
            cap: GREEN_DENSE_MAX_L,
        });
    }
    let profile = xi_profile(env)?;
    let l = env.half_size() as i64;
    let n = env.lattice().num_sites();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        profile.green_entry(i as i64 - l + 1, j as i64 - l + 1)
    }))
}

/// Columns of `Δ_{L,w}⁻¹` for the given source sites, by solving against
/// `−Δ_{L,w}`. Each column is indexed by interior site.
pub fn inverse_columns(
    env: &Environment,
    sources: &[usize],
    opts: &CgOptions,
) -> Result<Vec<Vec<f64>>> {
    let neg = build_delta(env).scaled(-1.0);
    let solver = SpdSolver::new(&neg, *opts)?;
    let n = neg.dim();
    sources
        .par_iter()
        .map(|&s| {
            let mut e = vec![0.0; n];
            e[s] = 1.0;
            solver
                .solve(&e)
                .map(|col| col.into_iter().map(|v| -v).collect())
        })
        .collect()
}

/// A two-point kernel sampled on the tensor grid `r_i = −1 + 2i/(m−1)` in
/// every coordinate. Values are stored row-major over
/// `(point index of r, point index of s)`; point indices are lexicographic
/// over the `d` per-axis grid indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub m: usize,
    pub dim: usize,
    pub half_size: Option<usize>,
    pub kind: String,
    pub values: Vec<f64>,
}

impl KernelGrid {
    pub fn grid_coordinate(m: usize, i: usize) -> f64 {
        if m == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (m - 1) as f64
        }
    }

    pub fn num_points(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    pub fn point(&self, p: usize) -> Vec<f64> {
        point_coords(self.m, self.dim, p)
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.num_points() + q]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|K(r,s) − K(s,r)|`.
    pub fn asymmetry(&self) -> f64 {
        let np = self.num_points();
        let mut worst = 0.0f64;
        for p in 0..np {
            for q in p + 1..np {
                worst = worst.max((self.get(p, q) - self.get(q, p)).abs());
            }
        }
        worst
    }

    /// CSV with columns `kind,m,d,L,r0..,s0..,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["kind".to_string(), "m".into(), "d".into(), "L".into()];
        header.extend((0..self.dim).map(|i| format!("r{i}")));
        header.extend((0..self.dim).map(|i| format!("s{i}")));
        header.push("value".into());
        w.write_record(&header)?;
        let np = self.num_points();
        let l = self.half_size.map_or(String::new(), |l| l.to_string());
        for p in 0..np {
            let r = self.point(p);
            for q in 0..np {
                let s = self.point(q);
                let mut rec = vec![
                    self.kind.clone(),
                    self.m.to_string(),
                    self.dim.to_string(),
                    l.clone(),
                ];
                rec.extend(r.iter().map(|v| v.to_string()));
                rec.extend(s.iter().map(|v| v.to_string()));
                rec.push(self.get(p, q).to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn point_coords(m: usize, dim: usize, mut p: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for slot in out.iter_mut().rev() {
        *slot = KernelGrid::grid_coordinate(m, p % m);
        p /= m;
    }
    out
}

/// Site `[L r]` owning the point `r`, or `None` on the absorbing layer.
pub fn site_of_point(lat: &Lattice, r: &[f64]) -> Option<usize> {
    let l = lat.half_size() as f64;
    let x: Vec<i64> = r.iter().map(|&c| (l * c).floor() as i64).collect();
    lat.site_index(&x)
}

/// Samples `Ξ_L⁻¹(r, s) = L^{d−2} (Δ_{L,w}⁻¹)_{[Lr],[Ls]}` on the grid.
/// In d = 1 the closed form is used; otherwise one iterative solve per
/// distinct grid-mapped source site.
pub fn kernel_from_inverse(env: &Environment, m: usize, opts: &CgOptions) -> Result<KernelGrid> {
    if m < 2 {
        return Err(domain("kernel grid needs at least two points per axis"));
    }
    let lat = env.lattice();
    let d = lat.dim();
    let np = m.pow(d as u32);
    let sites: Vec<Option<usize>> = (0..np)
        .map(|p| site_of_point(lat, &point_coords(m, d, p)))
        .collect();
    let scale = (lat.half_size() as f64).powi(d as i32 - 2);
    let mut values = vec![0.0; np * np];
    if d == 1 {
        let profile = xi_profile(env)?;
        let l = lat.half_size() as i64;
        for p in 0..np {
            for q in 0..np {
                if let (Some(a), Some(b)) = (sites[p], sites[q]) {
                    values[p * np + q] =
                        scale * profile.green_entry(a as i64 - l + 1, b as i64 - l + 1);
                }
            }
        }
    } else {
        let mut distinct: Vec<usize> = sites.iter().flatten().copied().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let cols = inverse_columns(env, &distinct, opts)?;
        for q in 0..np {
            let Some(b) = sites[q] else { continue };
            let col = &cols[distinct.binary_search(&b).unwrap()];
            for p in 0..np {
                if let Some(a) = sites[p] {
                    values[p * np + q] = scale * col[a];
                }
            }
        }
    }
    Ok(KernelGrid {
        m,
        dim: d,
        half_size: Some(lat.half_size()),
        kind: "inverse".into(),
        values,
    })
}

/// `(∂²)⁻¹(r, s) = −(1 − |r − s| − r s) / (2κ)` on `[−1, 1]²`.
pub fn continuum_kernel(kappa: f64, r: f64, s: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(domain("kappa must be > 0"));
    }
    if r.abs() > 1.0 || s.abs() > 1.0 {
        return Err(domain("kernel arguments must lie in [-1, 1]"));
    }
    Ok(-(1.0 - (r - s).abs() - r * s) / (2.0 * kappa))
}

/// [`continuum_kernel`] on the d = 1 grid.
pub fn continuum_kernel_grid(kappa: f64, m: usize) -> Result<KernelGrid> {
    let mut values = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            values.push(continuum_kernel(
                kappa,
                KernelGrid::grid_coordinate(m, i),
                KernelGrid::grid_coordinate(m, j),
            )?);
        }
    }
    Ok(KernelGrid {
        m,
        dim: 1,
        half_size: None,
        kind: "continuum".into(),
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDistance {
    /// Trapezoidal estimate of `(∬ |K1 − K2|²)^{1/2}`.
    pub hilbert_schmidt: f64,
    pub sup: f64,
    /// `|𝒟| · sup`, which dominates both the HS and the operator norm.
    pub sup_bound: f64,
}

pub fn hs_distance(k1: &KernelGrid, k2: &KernelGrid) -> Result<KernelDistance> {
    if k1.m != k2.m || k1.dim != k2.dim || k1.values.len() != k2.values.len() {
        return Err(Error::Shape {
            expected: k1.values.len(),
            actual: k2.values.len(),
        });
    }
    let (m, d) = (k1.m, k1.dim);
    let h = 2.0 / (m - 1) as f64;
    let w1: Vec<f64> = (0..m)
        .map(|i| if i == 0 || i == m - 1 { 0.5 * h } else { h })
        .collect();
    let np = k1.num_points();
    let weight = |mut p: usize| -> f64 {
        let mut w = 1.0;
        for _ in 0..d {
            w *= w1[p % m];
            p /= m;
        }
        w
    };
    let pw: Vec<f64> = (0..np).map(weight).collect();
    let mut acc = 0.0;
    let mut sup = 0.0f64;
    for p in 0..np {
        for q in 0..np {
            let diff = k1.get(p, q) - k2.get(p, q);
            acc += pw[p] * pw[q] * diff * diff;
            sup = sup.max(diff.abs());
        }
    }
    Ok(KernelDistance {
        hilbert_schmidt: acc.sqrt(),
        sup,
        sup_bound: 2f64.powi(2 * d as i32) * sup,
    })
}

/// `sup_{r ∈ (−1,1)} |ζ_{[Lr]} − r|`, taking `ζ_{−L} = −1` on the strip that
/// maps to the absorbing layer.
pub fn zeta_sup_error(env: &Environment) -> Result<f64> {
    let profile = xi_profile(env)?;
    let l = env.half_size() as i64;
    let lf = l as f64;
    let mut worst = 0.0f64;
    for x in -l..l {
        let zeta = 2.0 * profile.xi_at(x) - 1.0;
        let left = x as f64 / lf;
        let right = (x + 1) as f64 / lf;
        worst = worst.max((zeta - left).abs()).max((zeta - right).abs());
    }
    Ok(worst)
}

/// Diagonal diffusion matrix validated for the product eigenbasis.
pub(crate) fn diffusion_diagonal(kappa: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = kappa.nrows();
    if d == 0 || kappa.ncols() != d {
        return Err(domain("kappa must be a nonempty square matrix"));
    }
    for i in 0..d {
        for j in 0..d {
            if (kappa[(i, j)] - kappa[(j, i)]).abs() > 1e-12 {
                return Err(domain("kappa must be symmetric"));
            }
        }
    }
    if kappa.clone().cholesky().is_none() {
        return Err(domain("kappa must be positive definite"));
    }
    for i in 0..d {
        for j in 0..d {
            if i != j && kappa[(i, j)].abs() > 1e-12 {
                return Err(domain(
                    "the product eigenbasis only diagonalizes a diagonal kappa",
                ));
            }
        }
    }
    Ok((0..d).map(|i| kappa[(i, i)]).collect())
}

/// Value of a truncated heat-kernel series with its truncation envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    /// Bound on the omitted terms, `Σ_{|n|_∞ > N} e^{−(π²/4) n·κn t}`.
    pub tail_bound: f64,
}

/// Dirichlet eigenfunction `sc(π n ξ / 2)` on `(−1, 1)`: cosine for odd
/// `n`, sine for even `n`.
pub fn mode_1d(n: usize, xi: f64) -> f64 {
    let arg = 0.5 * PI * n as f64 * xi;
    if n % 2 == 1 {
        arg.cos()
    } else {
        arg.sin()
    }
}

/// `∫_a^b sc(π n ξ / 2) dξ`.
pub fn mode_1d_integral(n: usize, a: f64, b: f64) -> f64 {
    let k = 0.5 * PI * n as f64;
    if n % 2 == 1 {
        ((k * b).sin() - (k * a).sin()) / k
    } else {
        ((k * a).cos() - (k * b).cos()) / k
    }
}

fn decay_rates(diag: &[f64]) -> Vec<f64> {
    diag.iter().map(|k| 0.25 * PI * PI * k).collect()
}

fn tail_envelope(rates: &[f64], t: f64, cutoff: usize) -> f64 {
    let mut head = 1.0;
    let mut full = 1.0;
    for &c in rates {
        let partial: f64 = (1..=cutoff).map(|n| (-c * (n * n) as f64 * t).exp()).sum();
        let n1 = (cutoff + 1) as f64;
        let rest = (-c * n1 * n1 * t).exp() / (1.0 - (-2.0 * c * n1 * t).exp());
        head *= partial;
        full *= partial + rest;
    }
    full - head
}

fn check_time(t: f64, cutoff: usize) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(domain("time must be > 0"));
    }
    if cutoff == 0 {
        return Err(domain("cutoff must be >= 1"));
    }
    Ok(())
}

/// Transition density `T_t(ξ, ζ) = Σ_n e^{−(π²/4) n·κn t} e_n(ξ) e_n(ζ)`
/// on `(−1,1)ᵈ` with absorbing boundary, truncated at `|n|_∞ ≤ cutoff`.
pub fn heat_kernel_between(
    kappa: &DMatrix<f64>,
    t: f64,
    xi: &[f64],
    zeta: &[f64],
    cutoff: usize,
) -> Result<SeriesValue> {
    check_time(t, cutoff)?;
    let diag = diffusion_diagonal(kappa)?;
    if xi.len() != diag.len() || zeta.len() != diag.len() {
        return Err(Error::Shape {
            expected: diag.len(),
            actual: xi.len().max(zeta.len()),
        });
    }
    if zeta.iter().any(|c| c.abs() >= 1.0) {
        return Err(domain("source point must lie inside the open domain"));
    }
    let rates = decay_rates(&diag);
    let tail_bound = tail_envelope(&rates, t, cutoff);
    if xi.iter().any(|c| c.abs() >= 1.0) {
        return Ok(SeriesValue {
            value: 0.0,
            tail_bound,
        });
    }
    let value = rates
        .iter()
        .zip(xi.iter().zip(zeta))
        .map(|(&c, (&a, &b))| {
            (1..=cutoff)
                .map(|n| (-c * (n * n) as f64 * t).exp() * mode_1d(n, a) * mode_1d(n, b))
                .sum::<f64>()
        })
        .product();
    Ok(SeriesValue { value, tail_bound })
}

/// Density at `ξ` of the absorbed Brownian motion started at the origin.
/// Only modes with every `n_i` odd are nonzero at the origin, so only those
/// are summed.
pub fn heat_kernel(kappa: &DMatrix<f64>, t: f64, xi: &[f64], cutoff: usize) -> Result<SeriesValue> {
    let origin = vec![0.0; xi.len()];
    heat_kernel_between(kappa, t, xi, &origin, cutoff)
}

/// Probability that the absorbed motion from the origin is in the box
/// `Π_i [a_i, b_i]` at time `t`.
pub fn heat_box_probability(
    kappa: &DMatrix<f64>,
    t: f64,
    intervals: &[(f64, f64)],
    cutoff: usize,
) -> Result<f64> {
    check_time(t, cutoff)?;
    let diag = diffusion_diagonal(kappa)?;
    if intervals.len() != diag.len() {
        return Err(Error::Shape {
            expected: diag.len(),
            actual: intervals.len(),
        });
    }
    let rates = decay_rates(&diag);
    Ok(rates
        .iter()
        .zip(intervals)
        .map(|(&c, &(a, b))| {
            let (a, b) = (a.max(-1.0), b.min(1.0));
            if b <= a {
                return 0.0;
            }
            (1..=cutoff)
                .step_by(2)
                .map(|n| (-c * (n * n) as f64 * t).exp() * mode_1d_integral(n, a, b))
                .sum::<f64>()
        })
        .product())
}

/// Mass still inside `𝒟` at time `t`.
pub fn heat_survival(kappa: &DMatrix<f64>, t: f64, cutoff: usize) -> Result<f64> {
    let d = kappa.nrows();
    heat_box_probability(kappa, t, &vec![(-1.0, 1.0); d], cutoff)
}

/// Smallest cutoff with `e^{−(π²/4) κ_min N² t_min} < 1e−12`.
pub fn default_cutoff(kappa_min: f64, t_min: f64) -> Result<usize> {
    if !(kappa_min > 0.0 && t_min > 0.0) {
        return Err(domain("kappa_min and t_min must be > 0"));
    }
    let n = (12.0 * 10f64.ln() / (0.25 * PI * PI * kappa_min * t_min)).sqrt();
    Ok(n.floor() as usize + 1)
}

/// An initial condition on `𝒟`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialMeasure {
    /// Unit point mass.
    PointMass { at: Vec<f64> },
    /// Piecewise-constant density on `cells^d` equal cells of `𝒟`, values in
    /// lexicographic cell order.
    Density { cells: usize, values: Vec<f64> },
}

impl InitialMeasure {
    pub fn dim(&self) -> Option<usize> {
        match self {
            InitialMeasure::PointMass { at } => Some(at.len()),
            InitialMeasure::Density { cells, values } => {
                (1..=8).find(|&d| cells.checked_pow(d as u32) == Some(values.len()))
            }
        }
    }

    pub fn validate(&self) -> Result<usize> {
        let d = self
            .dim()
            .filter(|&d| d > 0)
            .ok_or_else(|| domain("measure has inconsistent dimension"))?;
        match self {
            InitialMeasure::PointMass { at } => {
                if at.iter().any(|c| !(c.abs() < 1.0)) {
                    return Err(domain("point mass must lie inside (-1, 1)^d"));
                }
            }
            InitialMeasure::Density { values, .. } => {
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(domain("density must be finite and nonnegative"));
                }
                if !(self.total_mass() > 0.0) {
                    return Err(domain("measure must have positive mass"));
                }
            }
        }
        Ok(d)
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            InitialMeasure::PointMass { .. } => 1.0,
            InitialMeasure::Density { cells, values } => {
                let d = self.dim().unwrap_or(1) as i32;
                let vol = (2.0 / *cells as f64).powi(d);
                values.iter().sum::<f64>() * vol
            }
        }
    }
}

/// `(u₀)_x = L^d μ₀(Π_i [x_i/L, (x_i+1)/L))`. Mass on the strip that maps to
/// the absorbing layer is dropped.
pub fn measure_to_vector(mu: &InitialMeasure, half_size: usize) -> Result<ZeroForm> {
    let d = mu.validate()?;
    let lat = Lattice::new(d, half_size)?;
    let lf = half_size as f64;
    let scale = lf.powi(d as i32);
    let mut u = vec![0.0; lat.num_sites()];
    match mu {
        InitialMeasure::PointMass { at } => {
            if let Some(i) = site_of_point(&lat, at) {
                u[i] = scale;
            }
        }
        InitialMeasure::Density { cells, values } => {
            let width = 2.0 / *cells as f64;
            // Per axis: for each site coordinate, overlapping density cells.
            let l = half_size as i64;
            let axis_overlaps: Vec<Vec<(usize, f64)>> = (-l + 1..l)
                .map(|x| {
                    let (a, b) = (x as f64 / lf, (x + 1) as f64 / lf);
                    (0..*cells)
                        .filter_map(|c| {
                            let lo = -1.0 + c as f64 * width;
                            let ov = b.min(lo + width) - a.max(lo);
                            (ov > 0.0).then_some((c, ov))
                        })
                        .collect()
                })
                .collect();
            let mut coords = vec![0i64; d];
            for (site, slot) in u.iter_mut().enumerate() {
                lat.site_coords_into(site, &mut coords);
                let lists: Vec<&Vec<(usize, f64)>> = coords
                    .iter()
                    .map(|&x| &axis_overlaps[(x + l - 1) as usize])
                    .collect();
                let mut total = 0.0;
                let mut idx = vec![0usize; d];
                'outer: loop {
                    let mut cell = 0usize;
                    let mut vol = 1.0;
                    for k in 0..d {
                        let (c, ov) = lists[k].get(idx[k]).copied().unwrap_or((0, 0.0));
                        cell = cell * cells + c;
                        vol *= ov;
                    }
                    if lists.iter().all(|v| !v.is_empty()) {
                        total += values[cell] * vol;
                    }
                    for k in (0..d).rev() {
                        idx[k] += 1;
                        if idx[k] < lists[k].len() {
                            continue 'outer;
                        }
                        idx[k] = 0;
                    }
                    break;
                }
                *slot = scale * total;
            }
        }
    }
    Ok(ZeroForm(u))
}

/// Evaluates `e^{L² t Δ_{L,w}} u₀` for many `t` on one environment.
pub struct Semigroup {
    time_scale: f64,
    method: Method,
}

enum Method {
    Spectral {
        eigenvalues: Vec<f64>,
        vectors: DMatrix<f64>,
    },
    Chebyshev {
        neg_delta: SparseSymmetricOperator,
        spectral_bound: f64,
    },
}

impl Semigroup {
    pub fn new(env: &Environment) -> Self {
        let l = env.half_size() as f64;
        let neg = build_delta(env).scaled(-1.0);
        let method = if neg.dim() <= SEMIGROUP_DENSE_CAP {
            let eig = SymmetricEigen::new(neg.to_dense());
            Method::Spectral {
                eigenvalues: eig.eigenvalues.iter().copied().collect(),
                vectors: eig.eigenvectors,
            }
        } else {
            let spectral_bound = neg.gershgorin_bound();
            Method::Chebyshev {
                neg_delta: neg,
                spectral_bound,
            }
        };
        Self {
            time_scale: l * l,
            method,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.method, Method::Spectral { .. })
    }

    /// `e^{L² t Δ} u₀`; `t` is macroscopic time.
    pub fn evolve(&self, u0: &[f64], t: f64) -> Result<ZeroForm> {
        self.evolve_raw(u0, self.time_scale * t)
    }

    /// `e^{s Δ} u₀` for microscopic time `s`.
    pub fn evolve_raw(&self, u0: &[f64], s: f64) -> Result<ZeroForm> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(domain("time must be >= 0"));
        }
        let n = match &self.method {
            Method::Spectral { vectors, .. } => vectors.nrows(),
            Method::Chebyshev { neg_delta, .. } => neg_delta.dim(),
        };
        if s == 0.0 && u0.len() == n {
            return Ok(ZeroForm(u0.to_vec()));
        }
        match &self.method {
            Method::Spectral {
                eigenvalues,
                vectors,
            } => {
                if u0.len() != vectors.nrows() {
                    return Err(Error::Shape {
                        expected: vectors.nrows(),
                        actual: u0.len(),
                    });
                }
                let coeffs = vectors.tr_mul(&nalgebra::DVector::from_column_slice(u0));
                let damped = nalgebra::DVector::from_iterator(
                    coeffs.len(),
                    coeffs
                        .iter()
                        .zip(eigenvalues)
                        .map(|(c, lam)| c * (-s * lam).exp()),
                );
                Ok(ZeroForm((vectors * damped).iter().copied().collect()))
            }
            Method::Chebyshev {
                neg_delta,
                spectral_bound,
            } => {
                if u0.len() != neg_delta.dim() {
                    return Err(Error::Shape {
                        expected: neg_delta.dim(),
                        actual: u0.len(),
                    });
                }
                chebyshev_decay(neg_delta, *spectral_bound, s, u0).map(ZeroForm)
            }
        }
    }
}

/// `e^{L² t Δ_{L,w}} u₀`.
pub fn evolve_semigroup(env: &Environment, u0: &[f64], t: f64) -> Result<ZeroForm> {
    if !(t >= 0.0) {
        return Err(domain("time must be >= 0"));
    }
    Semigroup::new(env).evolve(u0, t)
}

/// `e^{−z} I_k(z)` for `k = 0, 1, …` until the terms drop below `1e−18`,
/// by normalized backward recurrence.
pub fn scaled_bessel_i(z: f64) -> Vec<f64> {
    if z == 0.0 {
        return vec![1.0];
    }
    let kmax = ((90.0 * z).sqrt() + 4.0 * z.powf(1.0 / 3.0)).ceil() as usize + 40;
    let start = kmax + 40;
    let mut y = vec![0.0f64; start + 2];
    y[start] = 1e-300;
    for k in (1..=start).rev() {
        y[k - 1] = (2.0 * k as f64 / z) * y[k] + y[k + 1];
        if y[k - 1] > 1e250 {
            for v in &mut y[k - 1..] {
                *v *= 1e-250;
            }
        }
    }
    let norm = y[0] + 2.0 * y[1..].iter().sum::<f64>();
    let mut out: Vec<f64> = y.into_iter().take(kmax + 1).map(|v| v / norm).collect();
    while out.len() > 1 && *out.last().unwrap() < 1e-18 {
        out.pop();
    }
    out
}

/// `e^{−s A} u` for symmetric PSD `A` with spectrum in `[0, bound]`, by the
/// Chebyshev expansion of the exponential.
fn chebyshev_decay(
    op: &SparseSymmetricOperator,
    bound: f64,
    s: f64,
    u: &[f64],
) -> Result<Vec<f64>> {
    let n = op.dim();
    if s == 0.0 || bound == 0.0 {
        return Ok(u.to_vec());
    }
    let z = 0.5 * s * bound;
    let coeffs = scaled_bessel_i(z);
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("Bessel coefficients not finite".into()));
    }
    // X = (2/bound) A − I has spectrum in [−1, 1]; e^{−sA} = e^{−z} e^{−zX}.
    let apply_x = |v: &[f64], out: &mut [f64]| {
        op.apply(v, out);
        let f = 2.0 / bound;
        for (o, vi) in out.iter_mut().zip(v) {
            *o = f * *o - vi;
        }
    };
    let mut result: Vec<f64> = u.iter().map(|v| coeffs[0] * v).collect();
    if coeffs.len() == 1 {
        return Ok(result);
    }
    let mut prev = u.to_vec();
    let mut cur = vec![0.0; n];
    apply_x(u, &mut cur);
    let mut next = vec![0.0; n];
    for (k, &c) in coeffs.iter().enumerate().skip(1) {
        let signed = if k % 2 == 1 { -2.0 * c } else { 2.0 * c };
        for (r, v) in result.iter_mut().zip(&cur) {
            *r += signed * v;
        }
        if k + 1 < coeffs.len() {
            apply_x(&cur, &mut next);
            for i in 0..n {
                next[i] = 2.0 * next[i] - prev[i];
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(result)
}

/// CSV snapshot with columns `x0..,value,t`.
pub fn write_snapshot_csv<W: Write>(lat: &Lattice, u: &[f64], t: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..lat.dim()).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    header.push("t".into());
    w.write_record(&header)?;
    for (site, v) in u.iter().enumerate() {
        let mut rec: Vec<String> = lat.site_coords(site).iter().map(|c| c.to_string()).collect();
        rec.push(v.to_string());
        rec.push(t.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn require_1d(env: &Environment) -> Result<()> {
    if env.dim() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            actual: env.dim(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, EnvironmentSpec, Family};

    fn env(family: Family, dim: usize, l: usize, seed: u64) -> Environment {
        sample_environment(&EnvironmentSpec {
            family,
            dim,
            half_size: l,
            seed,
        })
        .unwrap()
    }

    const UNIFORM: Family = Family::UniformInterval { lo: 0.5, hi: 1.5 };

    #[test]
    fn xi_homogeneous() {
        let p = xi_profile(&env(Family::Constant { rate: 1.0 }, 1, 2, 0)).unwrap();
        assert!((p.eta() - 0.25).abs() < 1e-15);
        for (a, b) in p.xi().iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = xi_profile(&env(Family::Constant { rate: 3.0 }, 1, 7, 0)).unwrap();
        for (i, z) in p.zeta().iter().enumerate() {
            assert!((z - (i as f64 - 6.0) / 7.0).abs() < 1e-14);
        }
    }

    #[test]
    fn xi_flux_identity_random() {
        let e = env(UNIFORM, 1, 300, 4);
        let p = xi_profile(&e).unwrap();
        let l = 300i64;
        let worst = (-l + 1..=l)
            .map(|x| (e.rates()[(x - 1 + l) as usize] * (p.xi_at(x) - p.xi_at(x - 1)) - p.eta()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-14, "{worst}");
        assert!(p.xi().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn green_small_cases() {
        let g = green_matrix_1d(&env(Family::Constant { rate: 1.0 }, 1, 1, 0)).unwrap();
        assert!((g[(0, 0)] + 0.5).abs() < 1e-15);
        // Independent 3×3 inverse of tridiag(1, −2, 1): centre entry −1.
        let g = green_matrix_1d(&env(Family::Constant { rate: 1.0 }, 1, 2, 0)).unwrap();
        let direct = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 1.0, -2.0])
            .try_inverse()
            .unwrap();
        assert!((g[(1, 1)] + 1.0).abs() < 1e-14);
        assert!((g - direct).amax() < 1e-14);
    }

    #[test]
    fn green_rejects_wrong_dimension() {
        let e = env(Family::Constant { rate: 1.0 }, 2, 2, 0);
        assert!(matches!(xi_profile(&e), Err(Error::Dimension { .. })));
        assert!(matches!(green_matrix_1d(&e), Err(Error::Dimension { .. })));
    }

    #[test]
    fn continuum_kernel_values() {
        assert_eq!(continuum_kernel(1.0, 0.0, 0.0).unwrap(), -0.5);
        assert!(continuum_kernel(1.0, 1.0, 0.3).unwrap().abs() < 1e-16);
        assert!(continuum_kernel(1.0, 0.2, -1.0).unwrap().abs() < 1e-16);
        assert_eq!(
            continuum_kernel(2.0, 0.3, -0.2).unwrap(),
            continuum_kernel(2.0, -0.2, 0.3).unwrap()
        );
        assert!(continuum_kernel(0.0, 0.0, 0.0).is_err());
        assert!(continuum_kernel(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn hs_distance_constant_offset() {
        let k1 = continuum_kernel_grid(1.0, 33).unwrap();
        assert_eq!(hs_distance(&k1, &k1).unwrap().hilbert_schmidt, 0.0);
        let mut k2 = k1.clone();
        k2.values.iter_mut().for_each(|v| *v += 0.1);
        // Trapezoid integrates constants exactly: sqrt(4 · 0.01) = 0.2.
        let dist = hs_distance(&k1, &k2).unwrap();
        assert!((dist.hilbert_schmidt - 0.2).abs() < 1e-12);
        assert!((dist.sup - 0.1).abs() < 1e-12);
        let k3 = continuum_kernel_grid(1.0, 17).unwrap();
        assert!(hs_distance(&k1, &k3).is_err());
    }

    #[test]
    fn homogeneous_kernel_approaches_continuum() {
        let e = env(Family::Constant { rate: 1.0 }, 1, 256, 0);
        let k = kernel_from_inverse(&e, DEFAULT_GRID, &CgOptions::default()).unwrap();
        let c = continuum_kernel_grid(1.0, DEFAULT_GRID).unwrap();
        let dist = hs_distance(&k, &c).unwrap();
        assert!(dist.sup < 0.02, "{}", dist.sup);
        for p in 1..DEFAULT_GRID - 1 {
            for q in 1..DEFAULT_GRID - 1 {
                if k.point(p)[0] >= -1.0 + 1.0 / 256.0 && k.point(q)[0] >= -1.0 + 1.0 / 256.0 {
                    assert!(k.get(p, q) < 0.0);
                }
            }
        }
        assert!(k.asymmetry() < 1e-12);
    }

    #[test]
    fn kernel_2d_matches_dense_inverse() {
        let e = env(UNIFORM, 2, 4, 3);
        let k = kernel_from_inverse(&e, 5, &CgOptions::with_tol(1e-13)).unwrap();
        let inv = build_delta(&e).to_dense().try_inverse().unwrap();
        let lat = e.lattice();
        for p in 0..k.num_points() {
            for q in 0..k.num_points() {
                let expected = match (site_of_point(lat, &k.point(p)), site_of_point(lat, &k.point(q))) {
                    (Some(a), Some(b)) => inv[(a, b)],
                    _ => 0.0,
                };
                assert!((k.get(p, q) - expected).abs() < 1e-10);
            }
        }
        assert!(k.asymmetry() < 1e-10);
    }

    #[test]
    fn zeta_error_homogeneous() {
        let e = env(Family::Constant { rate: 2.0 }, 1, 50, 0);
        let err = zeta_sup_error(&e).unwrap();
        assert!(err <= 1.0 / 50.0 + 1e-14);
    }

    #[test]
    fn heat_kernel_boundary_and_large_time() {
        let k = DMatrix::identity(1, 1);
        assert_eq!(heat_kernel(&k, 0.3, &[1.0], 10).unwrap().value, 0.0);
        assert_eq!(heat_kernel(&k, 0.3, &[-1.0], 10).unwrap().value, 0.0);
        for xi in [0.0, 0.4, -0.7, 0.95] {
            let one = heat_kernel(&k, 2.0, &[xi], 1).unwrap().value;
            let five = heat_kernel(&k, 2.0, &[xi], 5).unwrap().value;
            assert!((one / five - 1.0).abs() < 1e-6);
        }
        assert!(heat_kernel(&k, 0.0, &[0.0], 5).is_err());
        assert!(heat_kernel(&k, 1.0, &[0.0], 0).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(heat_kernel(&bad, 1.0, &[0.0, 0.0], 5).is_err());
    }

    #[test]
    fn heat_mass_decreases() {
        let k = DMatrix::identity(1, 1);
        let mut prev = f64::INFINITY;
        for t in [0.01, 0.05, 0.1, 0.3, 1.0] {
            let n = default_cutoff(1.0, t).unwrap();
            // Independent midpoint quadrature of the density.
            let q = 4000;
            let integral: f64 = (0..q)
                .map(|i| {
                    let xi = -1.0 + (i as f64 + 0.5) * 2.0 / q as f64;
                    heat_kernel(&k, t, &[xi], n).unwrap().value * 2.0 / q as f64
                })
                .sum();
            let closed = heat_survival(&k, t, n).unwrap();
            assert!((integral - closed).abs() < 1e-6);
            assert!(integral <= 1.0 + 1e-9 && integral < prev);
            prev = integral;
        }
    }

    #[test]
    fn tail_bound_covers_truncation() {
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.5]));
        let exact = heat_kernel(&k, 0.02, &[0.1, -0.3], 80).unwrap().value;
        let short = heat_kernel(&k, 0.02, &[0.1, -0.3], 6).unwrap();
        assert!((exact - short.value).abs() <= short.tail_bound);
    }

    #[test]
    fn measure_mapping() {
        let u = measure_to_vector(&InitialMeasure::PointMass { at: vec![0.0] }, 8).unwrap();
        assert_eq!(u.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(u[7], 8.0);
        let uni = InitialMeasure::Density {
            cells: 4,
            values: vec![0.25; 16],
        };
        let u = measure_to_vector(&uni, 6).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(measure_to_vector(&InitialMeasure::PointMass { at: vec![1.0] }, 4).is_err());
    }

    #[test]
    fn measure_mass_conserved_off_the_dropped_strip() {
        // Density supported on (−1 + 2/5, 1): clear of [−1, −1 + 1/L) for L ≥ 3.
        let mut values = vec![0.0; 25];
        for (i, v) in values.iter_mut().enumerate() {
            if i / 5 >= 1 && i % 5 >= 1 {
                *v = 1.0 + (i % 3) as f64;
            }
        }
        let mu = InitialMeasure::Density { cells: 5, values };
        for l in [5, 10, 20] {
            let u = measure_to_vector(&mu, l).unwrap();
            let mass = u.iter().sum::<f64>() / (l * l) as f64;
            assert!((mass - mu.total_mass()).abs() < 1e-12);
        }
    }

    #[test]
    fn bessel_reference_values() {
        // e^{-1} I_0(1), e^{-1} I_1(1) and e^{-10} I_0(10).
        let c = scaled_bessel_i(1.0);
        assert!((c[0] - 0.465_759_607_593_640_4).abs() < 1e-14);
        assert!((c[1] - 0.207_910_415_349_708_2).abs() < 1e-14);
        let c = scaled_bessel_i(10.0);
        assert!((c[0] - 0.127_833_337_163_428_6).abs() < 1e-14);
        let big = scaled_bessel_i(2.5e5);
        let total = big[0] + 2.0 * big[1..].iter().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_matches_dense() {
        let e = env(UNIFORM, 1, 40, 8);
        let neg = build_delta(&e).scaled(-1.0);
        let bound = neg.gershgorin_bound();
        let dense = Semigroup::new(&e);
        assert!(dense.is_dense());
        let mut u0 = vec![0.0; neg.dim()];
        u0[39] = 1.0;
        u0[10] = 0.5;
        for t in [1e-3, 0.05, 0.4] {
            let a = dense.evolve(&u0, t).unwrap();
            let b = chebyshev_decay(&neg, bound, 1600.0 * t, &u0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semigroup_homogeneous_matches_eigen_expansion() {
        let l = 32usize;
        let e = env(Family::Constant { rate: 1.0 }, 1, l, 0);
        let mut u0 = vec![0.0; 2 * l - 1];
        u0[l - 1] = 1.0;
        let t = 0.07;
        let u = evolve_semigroup(&e, &u0, t).unwrap();
        // Closed-form modes sc(π n x / 2L) with −Δ eigenvalues 4 sin²(π n / 4L).
        let lf = l as f64;
        for (i, ui) in u.iter().enumerate() {
            let x = i as f64 - lf + 1.0;
            let mut v = 0.0;
            for n in 1..2 * l {
                let arg = |y: f64| PI * n as f64 * y / (2.0 * lf);
                let e_n = |y: f64| if n % 2 == 1 { arg(y).cos() } else { arg(y).sin() };
                let mu = 4.0 * (PI * n as f64 / (4.0 * lf)).sin().powi(2);
                v += (-lf * lf * t * mu).exp() * e_n(x) * e_n(0.0) / lf;
            }
            assert!((ui - v).abs() < 1e-8);
        }
    }

    #[test]
    fn semigroup_positivity_and_mass() {
        let e = env(UNIFORM, 2, 8, 2);
        let sg = Semigroup::new(&e);
        let mut u0 = vec![0.0; e.lattice().num_sites()];
        u0[112] = 1.0;
        let u = sg.evolve(&u0, 0.0).unwrap();
        assert_eq!(u.0, u0);
        let mut prev = 1.0 + 1e-15;
        for k in 1..20 {
            let u = sg.evolve(&u0, 0.01 * k as f64).unwrap();
            assert!(u.iter().all(|v| *v > -1e-14));
            let mass: f64 = u.iter().sum();
            assert!(mass <= prev);
            prev = mass;
        }
    }
}
