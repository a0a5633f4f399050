//! Continuous-time random walks in a fixed environment with absorption on
//! leaving `Λ_L`, and ensemble statistics built from them.
//!
//! Ensemble sums are accumulated in integers, so results do not depend on
//! how walkers are scheduled across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{sample_environment, Environment, EnvironmentSpec};
use crate::error::{domain, Error, Result};
use crate::green::{default_cutoff, heat_box_probability};
use crate::lattice::Lattice;
use crate::rng::{derive_seed, stream_rng, unit_closed_open, unit_open_closed};

const WALK_DOMAIN: u64 = 0x7761_6c6b;
const REPLICA_DOMAIN: u64 = 0x7265_706c;
const NO_SITE: u32 = u32::MAX;

/// Jump tables for one environment: per site, the `2d` outgoing rates and
/// targets (`NO_SITE` for the absorbing layer).
#[derive(Clone, Debug)]
pub struct WalkGraph {
    lattice: Lattice,
    /// Cumulative rates, `2d` per site.
    cumulative: Vec<f64>,
    targets: Vec<u32>,
    total: Vec<f64>,
}

/// Outcome of one jump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jump {
    pub hold: f64,
    pub target: Option<usize>,
    pub axis: usize,
    pub forward: bool,
}

impl WalkGraph {
    pub fn new(env: &Environment) -> Result<Self> {
        let lat = env.lattice().clone();
        if lat.num_sites() >= NO_SITE as usize {
            return Err(Error::CapExceeded {
                what: "walk graph sites",
                size: lat.num_sites(),
                cap: NO_SITE as usize - 1,
            });
        }
        let d = lat.dim();
        let n = lat.num_sites();
        let mut cumulative = vec![0.0; 2 * d * n];
        let mut targets = vec![NO_SITE; 2 * d * n];
        let mut total = vec![0.0; n];
        let mut x = vec![0i64; d];
        for site in 0..n {
            lat.site_coords_into(site, &mut x);
            let mut acc = 0.0;
            for axis in 0..d {
                for (k, forward) in [false, true].into_iter().enumerate() {
                    let mut base = x.clone();
                    if !forward {
                        base[axis] -= 1;
                    }
                    let bond = lat
                        .bond_index(axis, &base)
                        .expect("every site has 2d incident bonds");
                    acc += env.rates()[bond];
                    let slot = site * 2 * d + 2 * axis + k;
                    cumulative[slot] = acc;
                    let mut y = x.clone();
                    y[axis] += if forward { 1 } else { -1 };
                    targets[slot] = lat.site_index(&y).map_or(NO_SITE, |s| s as u32);
                }
            }
            total[site] = acc;
        }
        Ok(Self {
            lattice: lat,
            cumulative,
            targets,
            total,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn total_rate(&self, site: usize) -> f64 {
        self.total[site]
    }

    /// Exponential holding time at `site`, then a neighbor chosen with
    /// probability proportional to the bond rate.
    #[inline]
    pub fn jump(&self, rng: &mut ChaCha8Rng, site: usize) -> Jump {
        let total = self.total[site];
        let hold = -unit_open_closed(rng.next_u64()).ln() / total;
        let u = unit_closed_open(rng.next_u64()) * total;
        let d2 = 2 * self.lattice.dim();
        let row = &self.cumulative[site * d2..(site + 1) * d2];
        let k = row.iter().position(|&c| u < c).unwrap_or(d2 - 1);
        let t = self.targets[site * d2 + k];
        Jump {
            hold,
            target: (t != NO_SITE).then_some(t as usize),
            axis: k / 2,
            forward: k % 2 == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub site: usize,
}

/// Path of one walker: the start and every jump inside `Λ_L`, up to `t_max`
/// or absorption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub events: Vec<Event>,
    /// Time the walker left `Λ_L`, if it did before `t_max`.
    pub absorbed_at: Option<f64>,
    pub final_time: f64,
}

impl Trajectory {
    /// Site occupied at time `t`, or `None` once absorbed.
    pub fn site_at(&self, t: f64) -> Option<usize> {
        if self.absorbed_at.is_some_and(|a| t >= a) {
            return None;
        }
        let k = self.events.partition_point(|e| e.time <= t);
        self.events.get(k.saturating_sub(1)).map(|e| e.site)
    }
}

/// Seed of walker `index`'s stream under ensemble seed `seed`.
pub fn walker_rng(seed: u64, index: u64) -> ChaCha8Rng {
    stream_rng(derive_seed(seed, WALK_DOMAIN), index)
}

pub fn simulate_ctrw(env: &Environment, x0: &[i64], t_max: f64, seed: u64, stream: u64) -> Result<Trajectory> {
    let graph = WalkGraph::new(env)?;
    simulate_on(&graph, x0, t_max, &mut walker_rng(seed, stream))
}

pub fn simulate_on(graph: &WalkGraph, x0: &[i64], t_max: f64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let start = graph
        .lattice
        .site_index(x0)
        .ok_or_else(|| domain("start must lie in the lattice"))?;
    if !(t_max >= 0.0 && t_max.is_finite()) {
        return Err(domain("t_max must be finite and >= 0"));
    }
    let mut events = vec![Event {
        time: 0.0,
        site: start,
    }];
    let mut t = 0.0;
    let mut site = start;
    loop {
        let j = graph.jump(rng, site);
        t += j.hold;
        if t > t_max {
            return Ok(Trajectory {
                events,
                absorbed_at: None,
                final_time: t_max,
            });
        }
        match j.target {
            Some(next) => {
                site = next;
                events.push(Event { time: t, site });
            }
            None => {
                return Ok(Trajectory {
                    events,
                    absorbed_at: Some(t),
                    final_time: t,
                })
            }
        }
    }
}

/// How walker positions are binned for histograms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// One cell per site, `[(x−½)/L, (x+½)/L]` per axis, the outermost cells
    /// stretched to `±1`.
    Sites,
    /// `cells` equal cells per axis on `[−1, 1]`.
    Uniform { cells: usize },
}

impl Binning {
    pub fn cells_per_axis(&self, half_size: usize) -> usize {
        match self {
            Binning::Sites => 2 * half_size - 1,
            Binning::Uniform { cells } => *cells,
        }
    }

    /// Macroscopic interval of cell `c` along one axis.
    pub fn interval(&self, half_size: usize, c: usize) -> (f64, f64) {
        let k = self.cells_per_axis(half_size);
        match self {
            Binning::Sites => {
                let l = half_size as f64;
                let x = c as f64 - l + 1.0;
                let lo = if c == 0 { -1.0 } else { (x - 0.5) / l };
                let hi = if c + 1 == k { 1.0 } else { (x + 0.5) / l };
                (lo, hi)
            }
            Binning::Uniform { cells } => {
                let w = 2.0 / *cells as f64;
                (-1.0 + c as f64 * w, -1.0 + (c + 1) as f64 * w)
            }
        }
    }

    fn axis_cell(&self, half_size: usize, x: i64) -> usize {
        let l = half_size as i64;
        match self {
            Binning::Sites => (x + l - 1) as usize,
            Binning::Uniform { cells } => {
                let xi = x as f64 / l as f64;
                (((xi + 1.0) * 0.5 * *cells as f64).floor() as usize).min(cells - 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Starting point, default the origin.
    pub start: Option<Vec<i64>>,
    /// Increasing sample times in walker (microscopic) units.
    pub t_grid: Vec<f64>,
    pub walkers: usize,
    pub seed: u64,
    pub binning: Binning,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walkers == 0 {
            return Err(domain("ensemble needs at least one walker"));
        }
        if self.t_grid.is_empty() {
            return Err(domain("time grid is empty"));
        }
        if self.t_grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(domain("times must be finite and >= 0"));
        }
        if self.t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("time grid must be strictly increasing"));
        }
        if let Binning::Uniform { cells } = self.binning {
            if cells == 0 {
                return Err(domain("binning needs at least one cell"));
            }
        }
        Ok(())
    }
}

/// Exact integer sums at one sample time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSums {
    pub alive: u64,
    /// `Σ X_i` over survivors.
    pub first: Vec<i128>,
    /// `Σ X_i X_j`, row-major `d × d`.
    pub second: Vec<i128>,
    /// `Σ |X|⁴`.
    pub fourth: i128,
    pub counts: Vec<u64>,
}

impl TimeSums {
    fn new(d: usize, cells: usize) -> Self {
        Self {
            alive: 0,
            first: vec![0; d],
            second: vec![0; d * d],
            fourth: 0,
            counts: vec![0; cells],
        }
    }

    fn merge(&mut self, other: &Self) {
        self.alive += other.alive;
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            *a += b;
        }
        self.fourth += other.fourth;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Ensemble statistics on a time grid. Absorbed walkers are excluded from
/// displacement moments and counted against survival.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub dim: usize,
    pub half_size: usize,
    pub walkers: usize,
    pub seed: u64,
    pub replicas: usize,
    pub binning: Binning,
    pub t_grid: Vec<f64>,
    pub sums: Vec<TimeSums>,
}

/// Summary of one row of [`EnsembleStats`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdPoint {
    pub t: f64,
    pub msd: f64,
    pub msd_se: f64,
    pub survival: f64,
    pub alive: u64,
}

impl EnsembleStats {
    pub fn survival(&self, k: usize) -> f64 {
        self.sums[k].alive as f64 / self.walkers as f64
    }

    /// MSD over survivors at grid index `k`.
    pub fn point(&self, k: usize) -> Result<MsdPoint> {
        let s = &self.sums[k];
        let t = self.t_grid[k];
        if s.alive == 0 {
            return Err(Error::EmptySample { t });
        }
        let n = s.alive as f64;
        let d = self.dim;
        let sq: i128 = (0..d).map(|i| s.second[i * d + i]).sum();
        let msd = sq as f64 / n;
        let var = if s.alive > 1 {
            ((s.fourth as f64 / n) - msd * msd).max(0.0) * n / (n - 1.0)
        } else {
            0.0
        };
        Ok(MsdPoint {
            t,
            msd,
            msd_se: (var / n).sqrt(),
            survival: self.survival(k),
            alive: s.alive,
        })
    }

    pub fn points(&self) -> Result<Vec<MsdPoint>> {
        (0..self.t_grid.len()).map(|k| self.point(k)).collect()
    }

    /// `E X_i X_j` over survivors at grid index `k`.
    pub fn second_moment(&self, k: usize) -> Result<DMatrix<f64>> {
        let s = &self.sums[k];
        if s.alive == 0 {
            return Err(Error::EmptySample { t: self.t_grid[k] });
        }
        let d = self.dim;
        Ok(DMatrix::from_fn(d, d, |i, j| s.second[i * d + j] as f64 / s.alive as f64))
    }

    /// CSV with columns `t,msd,msd_se,survival,n_alive`; rows with no
    /// survivors leave the MSD columns empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "msd", "msd_se", "survival", "n_alive"])?;
        for k in 0..self.t_grid.len() {
            let (msd, se) = match self.point(k) {
                Ok(p) => (p.msd.to_string(), p.msd_se.to_string()),
                Err(_) => (String::new(), String::new()),
            };
            w.write_record([
                self.t_grid[k].to_string(),
                msd,
                se,
                self.survival(k).to_string(),
                self.sums[k].alive.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with columns `t,cell,count`; cells are lexicographic over the
    /// per-axis bins.
    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "cell", "count"])?;
        for (k, s) in self.sums.iter().enumerate() {
            for (c, n) in s.counts.iter().enumerate() {
                w.write_record([self.t_grid[k].to_string(), c.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `count` environments drawn from `spec` with seeds derived from its seed;
/// replica 0 keeps the original seed.
pub fn replica_environments(spec: &EnvironmentSpec, count: usize) -> Result<Vec<Environment>> {
    if count == 0 {
        return Err(domain("need at least one replica"));
    }
    (0..count)
        .into_par_iter()
        .map(|r| {
            let seed = if r == 0 {
                spec.seed
            } else {
                derive_seed(spec.seed, REPLICA_DOMAIN ^ r as u64)
            };
            sample_environment(&spec.with_seed(seed))
        })
        .collect()
}

const WALKER_CHUNK: usize = 256;

/// Runs `walkers` independent walks; walker `j` lives in environment
/// `j mod envs.len()` and uses its own stream of the ensemble seed.
pub fn run_ensemble(envs: &[Environment], cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    cfg.validate()?;
    let first = envs.first().ok_or_else(|| domain("need at least one environment"))?;
    let (d, l) = (first.dim(), first.half_size());
    if envs.iter().any(|e| e.dim() != d || e.half_size() != l) {
        return Err(domain("replica environments must share dimension and size"));
    }
    let graphs: Vec<WalkGraph> = envs.iter().map(WalkGraph::new).collect::<Result<_>>()?;
    let lat = first.lattice();
    let start_coords = cfg.start.clone().unwrap_or_else(|| vec![0; d]);
    let start = lat
        .site_index(&start_coords)
        .ok_or_else(|| domain("start must lie in the lattice"))?;
    let per_axis = cfg.binning.cells_per_axis(l);
    let cells = per_axis
        .checked_pow(d as u32)
        .filter(|c| *c <= 1 << 26)
        .ok_or(Error::CapExceeded {
            what: "histogram cells",
            size: per_axis,
            cap: 1 << 26,
        })?;
    let nt = cfg.t_grid.len();
    let empty = || (0..nt).map(|_| TimeSums::new(d, cells)).collect::<Vec<_>>();
    let chunks = cfg.walkers.div_ceil(WALKER_CHUNK);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = empty();
            let mut disp = vec![0i64; d];
            let lo = c * WALKER_CHUNK;
            let hi = (lo + WALKER_CHUNK).min(cfg.walkers);
            for j in lo..hi {
                let graph = &graphs[j % graphs.len()];
                let mut rng = walker_rng(cfg.seed, j as u64);
                disp.iter_mut().for_each(|v| *v = 0);
                walk_into(graph, start, &start_coords, &cfg.t_grid, &cfg.binning, &mut rng, &mut disp, &mut acc);
            }
            acc
        })
        .reduce(empty, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.merge(y);
            }
            a
        });
    Ok(EnsembleStats {
        dim: d,
        half_size: l,
        walkers: cfg.walkers,
        seed: cfg.seed,
        replicas: envs.len(),
        binning: cfg.binning,
        t_grid: cfg.t_grid.clone(),
        sums,
    })
}

#[allow(clippy::too_many_arguments)]
fn walk_into(
    graph: &WalkGraph,
    start: usize,
    start_coords: &[i64],
    grid: &[f64],
    binning: &Binning,
    rng: &mut ChaCha8Rng,
    disp: &mut [i64],
    acc: &mut [TimeSums],
) {
    let d = disp.len();
    let l = graph.lattice.half_size();
    let mut site = start;
    let mut t = 0.0;
    let mut gi = 0;
    let record = |acc: &mut [TimeSums], gi: usize, disp: &[i64]| {
        let s = &mut acc[gi];
        s.alive += 1;
        let mut sq: i128 = 0;
        let mut cell = 0usize;
        let per_axis = binning.cells_per_axis(l);
        for i in 0..d {
            let xi = disp[i] as i128;
            s.first[i] += xi;
            sq += xi * xi;
            for j in 0..d {
                s.second[i * d + j] += xi * disp[j] as i128;
            }
            cell = cell * per_axis + binning.axis_cell(l, start_coords[i] + disp[i]);
        }
        s.fourth += sq * sq;
        s.counts[cell] += 1;
    };
    loop {
        let j = graph.jump(rng, site);
        let t_next = t + j.hold;
        while gi < grid.len() && grid[gi] < t_next {
            record(acc, gi, disp);
            gi += 1;
        }
        if gi == grid.len() {
            return;
        }
        match j.target {
            Some(next) => {
                site = next;
                disp[j.axis] += if j.forward { 1 } else { -1 };
                t = t_next;
            }
            None => return,
        }
    }
}

/// MSD statistics from an ensemble; fails if some sample time has no
/// survivors.
pub fn msd_curve(envs: &[Environment], cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    let stats = run_ensemble(envs, cfg)?;
    for k in 0..stats.t_grid.len() {
        stats.point(k)?;
    }
    Ok(stats)
}

/// Ordinary least squares `y ≈ a + b x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Shape {
            expected: n,
            actual: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::Fit(format!("{n} points cannot determine a line")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if !(sxx > 1e-300) || !sxx.is_finite() || !sxy.is_finite() {
        return Err(Error::Fit(format!(
            "ill-conditioned design: x spread {sxx:e} over {n} points"
        )));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_se,
        r_squared,
        points: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEstimate {
    /// `tr(κ̂)/d`; in d = 1 this is half the MSD slope.
    pub kappa: f64,
    pub kappa_se: f64,
    /// `κ̂_ij` = half the slope of `E X_i X_j` against `t`, row-major.
    pub kappa_matrix: Vec<f64>,
    pub msd_fit: LineFit,
    /// Exponent of `MSD ∝ t^δ` from a log-log fit.
    pub exponent: f64,
    pub exponent_r_squared: f64,
}

/// Fits the grid points with `t_lo ≤ t ≤ t_hi`; at least five are needed.
pub fn fit_diffusion(stats: &EnsembleStats, t_lo: f64, t_hi: f64) -> Result<DiffusionEstimate> {
    let idx: Vec<usize> = (0..stats.t_grid.len())
        .filter(|&k| stats.t_grid[k] >= t_lo && stats.t_grid[k] <= t_hi)
        .collect();
    if idx.len() < 5 {
        return Err(Error::Fit(format!(
            "{} grid points in [{t_lo}, {t_hi}]; at least 5 needed",
            idx.len()
        )));
    }
    let pts: Vec<MsdPoint> = idx.iter().map(|&k| stats.point(k)).collect::<Result<_>>()?;
    let t: Vec<f64> = pts.iter().map(|p| p.t).collect();
    let msd: Vec<f64> = pts.iter().map(|p| p.msd).collect();
    let msd_fit = fit_line(&t, &msd)?;
    let d = stats.dim;
    let mut kappa_matrix = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let y: Vec<f64> = idx
                .iter()
                .map(|&k| stats.second_moment(k).map(|m| m[(i, j)]))
                .collect::<Result<_>>()?;
            kappa_matrix[i * d + j] = 0.5 * fit_line(&t, &y)?.slope;
        }
    }
    if t[0] <= 0.0 || msd.iter().any(|m| *m <= 0.0) {
        return Err(Error::Fit("log-log fit needs positive times and MSD".into()));
    }
    let lt: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let lm: Vec<f64> = msd.iter().map(|v| v.ln()).collect();
    let log_fit = fit_line(&lt, &lm)?;
    Ok(DiffusionEstimate {
        kappa: msd_fit.slope / (2.0 * d as f64),
        kappa_se: msd_fit.slope_se / (2.0 * d as f64),
        kappa_matrix,
        msd_fit,
        exponent: log_fit.slope,
        exponent_r_squared: log_fit.r_squared,
    })
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalComparison {
    /// Macroscopic time.
    pub t: f64,
    /// TV distance between the surviving sub-probabilities per cell.
    pub tv: f64,
    /// TV distance after normalizing both to the surviving mass.
    pub tv_conditional: f64,
    pub survival_empirical: f64,
    pub survival_heat: f64,
    pub cutoff: usize,
}

/// Heat-kernel mass of every histogram cell at macroscopic time `t`.
pub fn heat_cell_masses(
    kappa: &DMatrix<f64>,
    t: f64,
    dim: usize,
    half_size: usize,
    binning: &Binning,
    cutoff: usize,
) -> Result<Vec<f64>> {
    let k = binning.cells_per_axis(half_size);
    let total = k.pow(dim as u32);
    (0..total)
        .into_par_iter()
        .map(|mut c| {
            let mut iv = vec![(0.0, 0.0); dim];
            for slot in iv.iter_mut().rev() {
                *slot = binning.interval(half_size, c % k);
                c /= k;
            }
            heat_box_probability(kappa, t, &iv, cutoff)
        })
        .collect()
}

/// Compares the empirical law of `X_L(t)/L` with the absorbed heat kernel.
/// `t` is macroscopic: the grid must contain the walker time `L² t`.
pub fn marginal_vs_heat_kernel(stats: &EnsembleStats, t: f64, kappa: &DMatrix<f64>) -> Result<MarginalComparison> {
    if kappa.nrows() != stats.dim {
        return Err(Error::Dimension {
            expected: stats.dim,
            actual: kappa.nrows(),
        });
    }
    let l = stats.half_size as f64;
    let s = l * l * t;
    let k = stats
        .t_grid
        .iter()
        .position(|g| (g - s).abs() <= 1e-9 * s.abs().max(1.0))
        .ok_or_else(|| domain(format!("walker time {s} is not on the sample grid")))?;
    let kmin = (0..stats.dim).map(|i| kappa[(i, i)]).fold(f64::INFINITY, f64::min);
    let cutoff = default_cutoff(kmin, t)?;
    let q = heat_cell_masses(kappa, t, stats.dim, stats.half_size, &stats.binning, cutoff)?;
    let m = stats.walkers as f64;
    let p: Vec<f64> = stats.sums[k].counts.iter().map(|c| *c as f64 / m).collect();
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: q.len(),
            actual: p.len(),
        });
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let tv = tv_distance(&p, &q)?;
    let tv_conditional = if sp > 0.0 && sq > 0.0 {
        let pn: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let qn: Vec<f64> = q.iter().map(|v| v / sq).collect();
        tv_distance(&pn, &qn)?
    } else {
        1.0
    };
    Ok(MarginalComparison {
        t,
        tv,
        tv_conditional,
        survival_empirical: sp,
        survival_heat: sq,
        cutoff,
    })
}

/// `n` points evenly spaced on `[a, b]`.
pub fn linear_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![b];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// `n` points evenly spaced in `log t` on `[a, b]`, `a > 0`.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    let (la, lb) = (a.ln(), b.ln());
    linear_grid(la, lb, n).into_iter().map(f64::exp).collect()
}
