use nalgebra::DMatrix;
use rwre_core::dipole::{
    dipole_matrix, dipole_phi, dipole_phi_infinite, enumerate_graphs, kl_series_bound, projector_defects,
    schwarz_bound_check, theta_estimate, KlBound, MomentModel, PhiQuadrature, ProjectorDefects, SchwarzReport,
};
use rwre_core::green::{continuum_kernel_grid, hs_distance, kernel_from_inverse};
use rwre_core::rng::derive_seed;
use rwre_core::spectral::{
    continuum_eigenpairs, eigenspace_distance, invariance_residual, pair_spectra, scaled_inverse_eigenpairs,
    spectral_kappa, write_spectrum_csv,
};
use rwre_core::walker::{fit_diffusion, fit_line, marginal_vs_heat_kernel, replica_environments, run_ensemble, DiffusionEstimate};
use rwre_core::{sample_environment, CgOptions, EnsembleConfig, EnsembleStats, Environment, Family, Lattice};
use serde::Serialize;

use crate::config::{Experiment, RunConfig};
use crate::error::CliError;
use crate::output::OutputDir;

const WALK_SEED_KEY: u64 = 0x5741_4c4b;
const VECTOR_SEED_KEY: u64 = 0x5645_4354;

pub fn run(experiment: Experiment, cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    match experiment {
        Experiment::GenEnv => gen_env(cfg, out),
        Experiment::KernelCompare => kernel_compare(cfg, out),
        Experiment::Spectrum => spectrum(cfg, out),
        Experiment::Walk => walk(cfg, out),
        Experiment::Kappa => kappa(cfg, out),
        Experiment::Dipole => dipole(cfg, out),
        Experiment::Bounds => bounds(cfg, out),
    }
}

#[derive(Serialize)]
struct EnvSummary {
    sites: usize,
    bonds: usize,
    min_rate: f64,
    max_rate: f64,
    mean_rate: f64,
    harmonic_kappa: Option<f64>,
}

fn gen_env(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let env = sample_environment(&cfg.spec())?;
    let lat = env.lattice();
    let mut json = Vec::new();
    env.write_json(&mut json)?;
    out.write("environment.json", json)?;
    out.csv("rates.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["bond".to_string(), "axis".to_string()];
        header.extend((0..lat.dim()).map(|i| format!("x{i}")));
        header.push("rate".into());
        w.write_record(&header)?;
        for (b, rate) in env.rates().iter().enumerate() {
            let bond = lat.bond(b);
            let mut row = vec![b.to_string(), bond.axis.to_string()];
            row.extend(bond.base.iter().map(|x| x.to_string()));
            row.push(rate.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
        Ok(())
    })?;
    let rates = env.rates();
    out.json(
        "summary.json",
        &EnvSummary {
            sites: lat.num_sites(),
            bonds: lat.num_bonds(),
            min_rate: rates.iter().copied().fold(f64::INFINITY, f64::min),
            max_rate: rates.iter().copied().fold(0.0, f64::max),
            mean_rate: rates.iter().sum::<f64>() / rates.len() as f64,
            harmonic_kappa: env.harmonic_kappa().ok(),
        },
    )
}

fn kernel_compare(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for &l in &cfg.half_sizes {
        let env = sample_environment(&cfg.spec().with_half_size(l))?;
        let kappa = env.harmonic_kappa()?;
        let discrete = kernel_from_inverse(&env, cfg.grid, &CgOptions::default())?;
        let continuum = continuum_kernel_grid(kappa, cfg.grid)?;
        let dist = hs_distance(&discrete, &continuum)?;
        if cfg.write_kernels {
            let mut buf = Vec::new();
            discrete.write_csv(&mut buf)?;
            continuum.write_csv(&mut buf)?;
            out.write(&format!("kernel_L{l}.csv"), buf)?;
        }
        rows.push((l, kappa, dist));
    }
    out.csv("kernel_compare.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["L", "kappa", "hilbert_schmidt", "sup", "sup_bound"])?;
        for (l, kappa, d) in &rows {
            w.write_record([
                l.to_string(),
                kappa.to_string(),
                d.hilbert_schmidt.to_string(),
                d.sup.to_string(),
                d.sup_bound.to_string(),
            ])?;
        }
        w.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
        Ok(())
    })
}

/// Scalar coefficient used for continuum comparisons: the harmonic mean of
/// the rates in one dimension, the spectral estimate otherwise.
fn reference_kappa(envs: &[Environment]) -> Result<(f64, &'static str), CliError> {
    let n = envs.len() as f64;
    if envs[0].dim() == 1 {
        let mut s = 0.0;
        for e in envs {
            s += e.harmonic_kappa()?;
        }
        Ok((s / n, "harmonic"))
    } else {
        let mut s = 0.0;
        for e in envs {
            s += spectral_kappa(e)?;
        }
        Ok((s / n, "spectral"))
    }
}

#[derive(Serialize)]
struct SpectrumSummary {
    kappa: f64,
    kappa_source: &'static str,
    cutoff: usize,
    lowest_mode_invariance_residual: f64,
    lowest_mode_eigenspace_distance: f64,
}

fn spectrum(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let env = sample_environment(&cfg.spec())?;
    let (kappa, source) = reference_kappa(std::slice::from_ref(&env))?;
    let k = DMatrix::from_diagonal_element(cfg.dim, cfg.dim, kappa);
    let discrete = scaled_inverse_eigenpairs(&env, cfg.eigenpairs)?;
    let modes = continuum_eigenpairs(&k, cfg.continuum_cutoff(), cfg.dim)?;
    let rows = pair_spectra(&discrete, &modes)?;
    let mut buf = Vec::new();
    write_spectrum_csv(&rows, &mut buf)?;
    out.write("spectrum.csv", buf)?;
    let lowest = vec![1; cfg.dim];
    out.json(
        "spectrum.json",
        &SpectrumSummary {
            kappa,
            kappa_source: source,
            cutoff: cfg.continuum_cutoff(),
            lowest_mode_invariance_residual: invariance_residual(&env, &k, &lowest)?,
            lowest_mode_eigenspace_distance: eigenspace_distance(&env, &k, &lowest)?,
        },
    )
}

fn ensemble(cfg: &RunConfig) -> Result<(Vec<Environment>, EnsembleStats), CliError> {
    let envs = replica_environments(&cfg.spec(), cfg.replicas)?;
    let l2 = (cfg.half_size * cfg.half_size) as f64;
    let ens = EnsembleConfig {
        start: None,
        t_grid: cfg.times.iter().map(|t| t * l2).collect(),
        walkers: cfg.walkers,
        seed: derive_seed(cfg.seed, WALK_SEED_KEY),
        binning: cfg.binning,
    };
    let stats = run_ensemble(&envs, &ens)?;
    Ok((envs, stats))
}

fn walk(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let (envs, stats) = ensemble(cfg)?;
    let mut buf = Vec::new();
    stats.write_csv(&mut buf)?;
    out.write("msd.csv", buf)?;
    let mut buf = Vec::new();
    stats.write_histogram_csv(&mut buf)?;
    out.write("histogram.csv", buf)?;
    let (kappa, _) = reference_kappa(&envs)?;
    let k = DMatrix::from_diagonal_element(cfg.dim, cfg.dim, kappa);
    let marginals = cfg
        .times
        .iter()
        .map(|t| marginal_vs_heat_kernel(&stats, *t, &k))
        .collect::<Result<Vec<_>, _>>()?;
    out.csv("marginals.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["t", "kappa", "tv", "tv_conditional", "survival_empirical", "survival_heat", "cutoff"])?;
        for m in &marginals {
            w.write_record([
                m.t.to_string(),
                kappa.to_string(),
                m.tv.to_string(),
                m.tv_conditional.to_string(),
                m.survival_empirical.to_string(),
                m.survival_heat.to_string(),
                m.cutoff.to_string(),
            ])?;
        }
        w.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
        Ok(())
    })?;
    if stats.t_grid.len() >= 5 {
        let fit = fit_diffusion(&stats, 0.0, f64::INFINITY)?;
        out.json("fit.json", &fit)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct KappaReport {
    /// Reciprocal of `E w⁻¹`, the one-dimensional limit.
    theory: Option<f64>,
    harmonic: Option<f64>,
    spectral: f64,
    msd: f64,
    msd_se: f64,
    msd_exponent: f64,
    /// Largest pairwise relative difference among the available estimates.
    max_relative_spread: f64,
    fit: DiffusionEstimate,
}

fn kappa(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let (envs, stats) = ensemble(cfg)?;
    let fit = fit_diffusion(&stats, 0.0, f64::INFINITY)?;
    let n = envs.len() as f64;
    let harmonic = if cfg.dim == 1 {
        let mut s = 0.0;
        for e in &envs {
            s += e.harmonic_kappa()?;
        }
        Some(s / n)
    } else {
        None
    };
    let mut spectral = 0.0;
    for e in &envs {
        spectral += spectral_kappa(e)?;
    }
    spectral /= n;
    let mut est = vec![spectral, fit.kappa];
    est.extend(harmonic);
    let mut spread = 0.0f64;
    for a in &est {
        for b in &est {
            spread = spread.max((a - b).abs() / a.abs().min(b.abs()));
        }
    }
    let theory = if cfg.dim == 1 {
        cfg.family.mean_inverse_rate().map(f64::recip)
    } else {
        None
    };
    out.json(
        "kappa.json",
        &KappaReport {
            theory,
            harmonic,
            spectral,
            msd: fit.kappa,
            msd_se: fit.kappa_se,
            msd_exponent: fit.exponent,
            max_relative_spread: spread,
            fit: fit.clone(),
        },
    )
}

#[derive(Serialize)]
struct DipoleReport {
    projector: ProjectorDefects,
    decay_slope: Option<f64>,
    quadrature: PhiQuadrature,
}

fn dipole(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let (l, d) = (cfg.half_size, cfg.dim);
    let lat = Lattice::new(d, l)?;
    let projector = projector_defects(&dipole_matrix(l, d)?);
    let quad = PhiQuadrature::default();
    let origin = lat.bond(lat.bond_index(0, &vec![0; d]).expect("origin bond"));
    let mut rows = Vec::new();
    for &r in &cfg.distances {
        let mut base = vec![0; d];
        base[0] = r;
        let finite = match lat.bond_index(0, &base) {
            Some(b) => Some(dipole_phi(l, d, &origin, &lat.bond(b))?),
            None => None,
        };
        let mut offset = vec![0; d];
        offset[0] = -r;
        let inf = dipole_phi_infinite(d, &offset, 0, 0, &quad)?;
        rows.push((r, finite, inf.value));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|(r, _, v)| *r > 0 && *v != 0.0)
        .map(|(r, _, v)| ((*r as f64).ln(), v.abs().ln()))
        .unzip();
    let decay_slope = if d >= 2 && x.len() >= 2 {
        Some(fit_line(&x, &y)?.slope)
    } else {
        None
    };
    out.csv("phi_decay.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["r", "phi_finite", "phi_infinite"])?;
        for (r, f, v) in &rows {
            w.write_record([r.to_string(), f.map(|x| x.to_string()).unwrap_or_default(), v.to_string()])?;
        }
        w.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
        Ok(())
    })?;
    out.json(
        "dipole.json",
        &DipoleReport {
            projector,
            decay_slope,
            quadrature: quad,
        },
    )
}

#[derive(Serialize)]
struct ThetaSummary {
    envs: usize,
    order: Option<usize>,
    w_bar: f64,
    lambda_min: f64,
    rho: f64,
    kappa_ratio: f64,
    kappa: f64,
    lower_bound: f64,
    sigma_lambda_min: Option<f64>,
    sigma_rho: Option<f64>,
    sigma_kappa_ratio: Option<f64>,
    psd_within_3_sigma: bool,
    bounds_hold: bool,
}

#[derive(Serialize)]
struct GraphSummary {
    moments: MomentModel,
    graphs: usize,
    bridged: usize,
    max_bridged_abs: f64,
    nonzero_unbridged: usize,
}

#[derive(Serialize)]
struct BoundsReport {
    schwarz: SchwarzReport,
    theta: ThetaSummary,
    series: Option<KlBound>,
    series_note: Option<String>,
    graphs: GraphSummary,
}

fn bounds(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let spec = cfg.spec();
    let schwarz = schwarz_bound_check(&spec, cfg.envs, cfg.vectors, derive_seed(cfg.seed, VECTOR_SEED_KEY))?;
    let theta = theta_estimate(&spec, cfg.envs, cfg.order)?;
    let (series, series_note, moments) = match cfg.family {
        Family::BoundedPerturbation { delta, .. } => {
            let (s, note) = match kl_series_bound(delta, cfg.geometric_constant) {
                Ok(b) => (Some(b), None),
                Err(e) => (None, Some(e.to_string())),
            };
            (s, note, MomentModel::bounded_uniform(delta, cfg.graph_length))
        }
        _ => {
            // Centered sample moments of α from the first replica.
            let env = sample_environment(&spec)?;
            let alpha = env.alpha_field(cfg.family.mean_rate())?;
            let mean = alpha.iter().sum::<f64>() / alpha.len() as f64;
            let m: Vec<f64> = (1..=cfg.graph_length)
                .map(|k| {
                    if k == 1 {
                        0.0
                    } else {
                        alpha.iter().map(|a| (a - mean).powi(k as i32)).sum::<f64>() / alpha.len() as f64
                    }
                })
                .collect();
            (None, Some("series bound applies to bounded perturbations only".into()), MomentModel::new(m))
        }
    };
    let graphs = enumerate_graphs(cfg.graph_length, cfg.graph_bonds, &moments, true)?;
    let bridged: Vec<_> = graphs.iter().filter(|g| g.bridge).collect();
    let summary = GraphSummary {
        moments: moments.clone(),
        graphs: graphs.len(),
        bridged: bridged.len(),
        max_bridged_abs: bridged.iter().map(|g| g.a_g.abs()).fold(0.0, f64::max),
        nonzero_unbridged: graphs.iter().filter(|g| !g.bridge && g.a_g.abs() > 1e-14).count(),
    };
    out.csv("theta.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["i", "j", "value"])?;
        for i in 0..theta.size {
            for j in 0..theta.size {
                w.write_record([i.to_string(), j.to_string(), theta.theta[i * theta.size + j].to_string()])?;
            }
        }
        w.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
        Ok(())
    })?;
    out.json("graphs.json", &graphs)?;
    out.json(
        "bounds.json",
        &BoundsReport {
            schwarz,
            theta: ThetaSummary {
                envs: theta.envs,
                order: theta.order,
                w_bar: theta.w_bar,
                lambda_min: theta.lambda_min,
                rho: theta.rho,
                kappa_ratio: theta.kappa_ratio,
                kappa: theta.kappa,
                lower_bound: theta.w_bar * (1.0 - theta.rho),
                sigma_lambda_min: theta.sigma_lambda_min,
                sigma_rho: theta.sigma_rho,
                sigma_kappa_ratio: theta.sigma_kappa_ratio,
                psd_within_3_sigma: theta.psd_within_3_sigma,
                bounds_hold: theta.bounds_hold,
            },
            series,
            series_note,
            graphs: summary,
        },
    )
}
