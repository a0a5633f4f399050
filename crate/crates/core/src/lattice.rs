//! The box `Λ_L = {x ∈ ℤᵈ : max_i |x_i| < L}`, its 0- and 1-forms, and the
//! sparse Dirichlet operators built on it.
//!
//! Sites are indexed lexicographically with the first coordinate most
//! significant. Bonds are indexed dimension-major: all bonds along axis 0,
//! then axis 1, and so on; within an axis the base site `x` of the positively
//! oriented bond `(x, x + e_i)` is ordered lexicographically. Bonds include
//! those joining a boundary-adjacent site to the absorbing layer
//! `|x_i| = L`, so an axis carries `2L · (2L − 1)^{d−1}` bonds.
//!
//! Inner products here are plain (unscaled) dot products; the `L^{-d}`
//! normalization is applied where forms meet continuum kernels.

use std::io::Write;
use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::env::Environment;
use crate::error::{domain, Error, Result};

/// Geometry and indexing of `Λ_L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    dim: usize,
    half_size: usize,
    side: usize,
    num_sites: usize,
    bonds_per_axis: usize,
}

/// A positively oriented bond `(base, base + e_axis)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bond {
    pub axis: usize,
    pub base: Vec<i64>,
}

impl Bond {
    pub fn head(&self) -> Vec<i64> {
        let mut h = self.base.clone();
        h[self.axis] += 1;
        h
    }

    /// Euclidean distance between bond midpoints.
    pub fn distance(&self, other: &Bond) -> f64 {
        let mid = |b: &Bond, i: usize| b.base[i] as f64 + if i == b.axis { 0.5 } else { 0.0 };
        (0..self.base.len())
            .map(|i| (mid(self, i) - mid(other, i)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl Lattice {
    pub fn new(dim: usize, half_size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(domain("dimension must be positive"));
        }
        if half_size == 0 {
            return Err(domain("half-size L must be positive"));
        }
        let side = 2 * half_size - 1;
        let num_sites = side
            .checked_pow(dim as u32)
            .ok_or_else(|| domain("lattice too large"))?;
        let bonds_per_axis = 2 * half_size * side.pow(dim as u32 - 1);
        Ok(Self {
            dim,
            half_size,
            side,
            num_sites,
            bonds_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_size(&self) -> usize {
        self.half_size
    }

    /// Sites per axis, `2L − 1`.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn num_bonds(&self) -> usize {
        self.dim * self.bonds_per_axis
    }

    pub fn bonds_per_axis(&self) -> usize {
        self.bonds_per_axis
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        let l = self.half_size as i64;
        x.iter().all(|&c| c.abs() < l)
    }

    pub fn site_index(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.dim || !self.contains(x) {
            return None;
        }
        let off = self.half_size as i64 - 1;
        Some(
            x.iter()
                .fold(0usize, |acc, &c| acc * self.side + (c + off) as usize),
        )
    }

    pub fn site_coords_into(&self, mut idx: usize, out: &mut [i64]) {
        let off = self.half_size as i64 - 1;
        for slot in out.iter_mut().rev() {
            *slot = (idx % self.side) as i64 - off;
            idx /= self.side;
        }
    }

    pub fn site_coords(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0; self.dim];
        self.site_coords_into(idx, &mut out);
        out
    }

    /// Index of the bond `(base, base + e_axis)`, or `None` if it does not
    /// touch an interior site from a valid base.
    pub fn bond_index(&self, axis: usize, base: &[i64]) -> Option<usize> {
        if axis >= self.dim || base.len() != self.dim {
            return None;
        }
        let l = self.half_size as i64;
        let mut local = 0usize;
        for (i, &c) in base.iter().enumerate() {
            if i == axis {
                if c < -l || c > l - 1 {
                    return None;
                }
                local = local * (2 * self.half_size) + (c + l) as usize;
            } else {
                if c.abs() >= l {
                    return None;
                }
                local = local * self.side + (c + l - 1) as usize;
            }
        }
        Some(axis * self.bonds_per_axis + local)
    }

    pub fn bond(&self, idx: usize) -> Bond {
        let axis = idx / self.bonds_per_axis;
        let mut local = idx % self.bonds_per_axis;
        let l = self.half_size as i64;
        let mut base = vec![0i64; self.dim];
        for i in (0..self.dim).rev() {
            if i == axis {
                let r = 2 * self.half_size;
                base[i] = (local % r) as i64 - l;
                local /= r;
            } else {
                base[i] = (local % self.side) as i64 - (l - 1);
                local /= self.side;
            }
        }
        Bond { axis, base }
    }

    /// Bonds incident to an interior site: for each axis, the bond towards
    /// `x − e_i` followed by the bond towards `x + e_i`.
    pub fn incident_bonds(&self, site: usize) -> Vec<usize> {
        let mut x = self.site_coords(site);
        let mut out = Vec::with_capacity(2 * self.dim);
        for axis in 0..self.dim {
            x[axis] -= 1;
            out.push(self.bond_index(axis, &x).expect("lower bond exists"));
            x[axis] += 1;
            out.push(self.bond_index(axis, &x).expect("upper bond exists"));
        }
        out
    }
}

macro_rules! form_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn dot(&self, other: &Self) -> f64 {
                dot(&self.0, &other.0)
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

form_newtype!(
    /// Values on interior sites; implicitly zero outside `Λ_L`.
    ZeroForm
);
form_newtype!(
    /// Values on canonical positively oriented bonds. The value on the
    /// reversed bond is the negative.
    OneForm
);

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymmetricOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

const PAR_ROWS: usize = 1 << 14;

impl SparseSymmetricOperator {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    /// Fails if the result is not exactly symmetric.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|t| t.0 >= n || t.1 >= n) {
            return Err(Error::Shape {
                expected: n,
                actual: r.max(c) + 1,
            });
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let op = Self {
            n,
            row_ptr,
            cols,
            vals,
        };
        if !op.is_symmetric() {
            return Err(domain("triplets do not form a symmetric matrix"));
        }
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries().all(|(r, c, v)| self.get(c, r) == v)
    }

    /// True when every nonzero satisfies `|r − c| ≤ 1`.
    pub fn is_tridiagonal(&self) -> bool {
        self.entries().all(|(r, c, _)| r.abs_diff(c) <= 1)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `y = A x`. Rows are evaluated independently, so the result does not
    /// depend on how rows are split across threads.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        let row_dot = |r: usize| -> f64 { self.row(r).map(|(c, v)| v * x[c]).sum() };
        if self.n >= 2 * PAR_ROWS {
            y.par_chunks_mut(PAR_ROWS).enumerate().for_each(|(k, chunk)| {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = row_dot(k * PAR_ROWS + i);
                }
            });
        } else {
            for (r, slot) in y.iter_mut().enumerate() {
                *slot = row_dot(r);
            }
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply(x, &mut y);
        y
    }

    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        dot(u, &self.mul(u))
    }

    /// Upper bound on the spectral radius from Gershgorin discs.
    pub fn gershgorin_bound(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    /// Writes `row col value` lines, 0-based, one nonzero per line.
    pub fn write_coo<W: Write>(&self, mut out: W) -> Result<()> {
        for (r, c, v) in self.entries() {
            writeln!(out, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

/// `Δ_{L,w}` with zero Dirichlet data outside `Λ_L`:
/// `(Δu)_x = Σ_{|x−y|=1} w_{xy} (u_y − u_x)`.
pub fn build_delta(env: &Environment) -> SparseSymmetricOperator {
    build_delta_with_rates(env.lattice(), env.rates())
}

/// Same stencil as [`build_delta`] for an arbitrary (possibly signed) bond
/// field, e.g. the fluctuation field `α`.
pub fn build_delta_with_rates(lat: &Lattice, rates: &[f64]) -> SparseSymmetricOperator {
    assert_eq!(rates.len(), lat.num_bonds());
    let n = lat.num_sites();
    let mut trips = Vec::with_capacity(n * (2 * lat.dim() + 1));
    let mut x = vec![0i64; lat.dim()];
    for site in 0..n {
        lat.site_coords_into(site, &mut x);
        let mut diag = 0.0;
        for axis in 0..lat.dim() {
            for step in [-1i64, 1] {
                let w = if step < 0 {
                    x[axis] -= 1;
                    let b = lat.bond_index(axis, &x).unwrap();
                    rates[b]
                } else {
                    let b = lat.bond_index(axis, &x).unwrap();
                    x[axis] += 1;
                    rates[b]
                };
                diag -= w;
                if let Some(nb) = lat.site_index(&x) {
                    trips.push((site, nb, w));
                }
                x[axis] -= step;
            }
        }
        trips.push((site, site, diag));
    }
    SparseSymmetricOperator::from_triplets(n, trips).expect("stencil is symmetric")
}

/// `(∇u)_b = u_{head} − u_{base}` on every canonical bond.
pub fn gradient(lat: &Lattice, u: &[f64]) -> Result<OneForm> {
    check_len(lat.num_sites(), u.len())?;
    let mut out = vec![0.0; lat.num_bonds()];
    let mut x = vec![0i64; lat.dim()];
    for (b, slot) in out.iter_mut().enumerate() {
        let bond = lat.bond(b);
        x.copy_from_slice(&bond.base);
        let tail = lat.site_index(&x).map_or(0.0, |i| u[i]);
        x[bond.axis] += 1;
        let head = lat.site_index(&x).map_or(0.0, |i| u[i]);
        *slot = head - tail;
    }
    Ok(OneForm(out))
}

/// Adjoint of [`gradient`] for the plain dot product:
/// `(∇*ω)_x = Σ_i (ω_{(x−e_i, x)} − ω_{(x, x+e_i)})`.
pub fn divergence(lat: &Lattice, omega: &[f64]) -> Result<ZeroForm> {
    check_len(lat.num_bonds(), omega.len())?;
    let mut out = vec![0.0; lat.num_sites()];
    for (b, &w) in omega.iter().enumerate() {
        let bond = lat.bond(b);
        if let Some(i) = lat.site_index(&bond.base) {
            out[i] -= w;
        }
        if let Some(j) = lat.site_index(&bond.head()) {
            out[j] += w;
        }
    }
    Ok(ZeroForm(out))
}

/// `(M_α ω)_b = α_b ω_b`.
pub fn multiply_alpha(alpha: &[f64], omega: &[f64]) -> Result<OneForm> {
    check_len(alpha.len(), omega.len())?;
    Ok(OneForm(
        alpha.iter().zip(omega).map(|(a, w)| a * w).collect(),
    ))
}

/// `½ Σ_{|x−y|=1} w_{xy} (u_y − u_x)²`, i.e. `Σ_b w_b (∇u)_b²`.
pub fn quadratic_form(u: &[f64], env: &Environment) -> Result<f64> {
    let grad = gradient(env.lattice(), u)?;
    Ok(grad.iter().zip(env.rates()).map(|(g, w)| w * g * g).sum())
}

/// Dense matrix of `∇` (bonds × sites).
pub fn gradient_matrix(lat: &Lattice) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(lat.num_bonds(), lat.num_sites());
    for b in 0..lat.num_bonds() {
        let bond = lat.bond(b);
        if let Some(i) = lat.site_index(&bond.base) {
            m[(b, i)] = -1.0;
        }
        if let Some(j) = lat.site_index(&bond.head()) {
            m[(b, j)] = 1.0;
        }
    }
    m
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape { expected, actual });
    }
    Ok(())
}
