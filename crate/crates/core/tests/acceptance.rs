//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; the process fails if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rwre_core::dipole::{
    cancellation_check, enumerate_graphs, phi_decay_slope, projector_defects, dipole_matrix, schwarz_bound_check,
    stirling_pi, theta_estimate, MomentModel, PhiQuadrature,
};
use rwre_core::green::{continuum_kernel_grid, green_matrix_1d, hs_distance, kernel_from_inverse, DEFAULT_GRID};
use rwre_core::lattice::build_delta;
use rwre_core::solve::conjugate_gradient;
use rwre_core::spectral::{homogeneous_eigenpairs, homogeneous_eigenvalue, scaled_neg_laplacian, spectral_kappa};
use rwre_core::walker::{fit_diffusion, linear_grid, log_grid, marginal_vs_heat_kernel, replica_environments, run_ensemble};
use rwre_core::{sample_environment, Binning, CgOptions, EnsembleConfig, EnvironmentSpec, Family};

const UNIFORM: Family = Family::UniformInterval { lo: 0.5, hi: 1.5 };

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = fn() -> Result<Outcome, rwre_core::Error>;

fn spec(family: Family, dim: usize, half_size: usize, seed: u64) -> EnvironmentSpec {
    EnvironmentSpec {
        family,
        dim,
        half_size,
        seed,
    }
}

fn green_residual() -> Result<Outcome, rwre_core::Error> {
    const RESIDUAL_TOL: f64 = 1e-10;
    const CG_TOL: f64 = 1e-9;
    let mut worst_res = 0.0f64;
    let mut worst_cg = 0.0f64;
    for l in [16usize, 64, 256] {
        for seed in 0..20 {
            let env = sample_environment(&spec(UNIFORM, 1, l, 1000 + seed))?;
            let delta = build_delta(&env);
            let g = green_matrix_1d(&env)?;
            let n = g.nrows();
            let res = (delta.to_dense() * &g - DMatrix::identity(n, n)).amax();
            worst_res = worst_res.max(res);
            let neg = delta.scaled(-1.0);
            // Tridiagonal CG plateaus near 1e-12 relative residual.
            let opts = CgOptions {
                rel_tol: 1e-11,
                max_iter: Some(40 * n),
            };
            let scale = g.amax();
            for src in [0, n / 3, n / 2, n - 1] {
                let mut rhs = vec![0.0; n];
                rhs[src] = 1.0;
                let (x, _) = conjugate_gradient(&neg, &rhs, &opts)?;
                for (i, xi) in x.iter().enumerate() {
                    worst_cg = worst_cg.max((xi + g[(i, src)]).abs() / scale);
                }
            }
        }
    }
    Ok(outcome(
        worst_res < RESIDUAL_TOL && worst_cg < CG_TOL,
        format!("max |ΔG − I| = {worst_res:.2e} (< {RESIDUAL_TOL:e}), closed form vs CG rel = {worst_cg:.2e} (< {CG_TOL:e})"),
    ))
}

fn kernel_convergence() -> Result<Outcome, rwre_core::Error> {
    const FINAL_TOL: f64 = 0.05;
    const ENVS: usize = 4;
    let mut means = Vec::new();
    for l in [64usize, 128, 256, 512] {
        let envs = replica_environments(&spec(UNIFORM, 1, l, 77), ENVS)?;
        let mut sum = 0.0;
        for env in &envs {
            let discrete = kernel_from_inverse(env, DEFAULT_GRID, &CgOptions::default())?;
            let continuum = continuum_kernel_grid(env.harmonic_kappa()?, DEFAULT_GRID)?;
            sum += hs_distance(&discrete, &continuum)?.hilbert_schmidt;
        }
        means.push(sum / ENVS as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    let last = *means.last().unwrap();
    Ok(outcome(
        monotone && last < FINAL_TOL,
        format!("mean HS distance over {ENVS} envs at L=64..512: {means:.4?}; monotone={monotone}, final < {FINAL_TOL}"),
    ))
}

fn spectral_closed_form() -> Result<Outcome, rwre_core::Error> {
    const TOL: f64 = 1e-10;
    const RATIO_MIN: f64 = 3.0;
    let mut worst_val = 0.0f64;
    let mut worst_res = 0.0f64;
    for (d, l) in [(1usize, 16usize), (2, 6)] {
        let env = sample_environment(&spec(Family::Constant { rate: 1.0 }, d, l, 0))?;
        let op = scaled_neg_laplacian(&env);
        let dense = op.to_dense();
        let mut numeric: Vec<f64> = dense.clone().symmetric_eigenvalues().iter().map(|v| 1.0 / v).collect();
        numeric.sort_by(|a, b| b.total_cmp(a));
        let closed = homogeneous_eigenpairs(l, d)?;
        for (p, v) in closed.iter().zip(&numeric) {
            worst_val = worst_val.max((p.eigenvalue - v).abs());
            let x = nalgebra::DVector::from_column_slice(&p.vector);
            let r = (&dense * &x * p.eigenvalue - &x).amax();
            worst_res = worst_res.max(r);
        }
    }
    let target = 4.0 / (PI * PI);
    let errs: Vec<f64> = [16usize, 32, 64, 128]
        .iter()
        .map(|&l| (homogeneous_eigenvalue(l, &[1]) - target).abs())
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ok_ratio = ratios.iter().all(|r| *r >= RATIO_MIN);
    Ok(outcome(
        worst_val < TOL && worst_res < TOL && ok_ratio,
        format!(
            "eigenvalue mismatch {worst_val:.2e}, eigenvector residual {worst_res:.2e} (< {TOL:e}); |λ₁ − 4/π²| ratios under doubling {ratios:.3?} (≥ {RATIO_MIN})"
        ),
    ))
}

fn diffusion_constant() -> Result<Outcome, rwre_core::Error> {
    const REL_TOL: f64 = 0.05;
    const L: usize = 512;
    const REPLICAS: usize = 8;
    let kappa_true = 1.0 / 3f64.ln();
    let envs = replica_environments(&spec(UNIFORM, 1, L, 2024), REPLICAS)?;
    let l2 = (L * L) as f64;
    let cfg = EnsembleConfig {
        start: None,
        t_grid: linear_grid(0.002 * l2, 0.02 * l2, 10),
        walkers: 100_000,
        seed: 11,
        binning: Binning::Uniform { cells: 64 },
    };
    let stats = run_ensemble(&envs, &cfg)?;
    let fit = fit_diffusion(&stats, 0.0, f64::INFINITY)?;
    let harmonic = envs.iter().map(|e| e.harmonic_kappa()).sum::<Result<f64, _>>()? / REPLICAS as f64;
    let spectral = spectral_kappa(&envs[0])?;
    let rel = |v: f64| (v - kappa_true).abs() / kappa_true;
    let cross = (harmonic - fit.kappa).abs() / fit.kappa <= REL_TOL && (spectral - fit.kappa).abs() / fit.kappa <= REL_TOL;
    Ok(outcome(
        rel(fit.kappa) <= REL_TOL && cross,
        format!(
            "κ̂_MSD = {:.4} ± {:.4}, harmonic = {harmonic:.4}, spectral = {spectral:.4}, 1/ln 3 = {kappa_true:.4}; rel err {:.2}% (≤ {}%)",
            fit.kappa,
            fit.kappa_se,
            100.0 * rel(fit.kappa),
            100.0 * REL_TOL
        ),
    ))
}

fn marginal_convergence() -> Result<Outcome, rwre_core::Error> {
    const TV_TOL: f64 = 0.05;
    const L: usize = 128;
    let t = 0.25;
    let env = sample_environment(&spec(Family::Constant { rate: 1.0 }, 1, L, 0))?;
    let cfg = EnsembleConfig {
        start: None,
        t_grid: vec![t * (L * L) as f64],
        walkers: 100_000,
        seed: 5,
        binning: Binning::Sites,
    };
    let stats = run_ensemble(std::slice::from_ref(&env), &cfg)?;
    let cmp = marginal_vs_heat_kernel(&stats, t, &DMatrix::from_element(1, 1, 1.0))?;
    Ok(outcome(
        cmp.tv < TV_TOL,
        format!(
            "TV = {:.4} (< {TV_TOL}), conditional TV = {:.4}, survival {:.4} vs {:.4}",
            cmp.tv, cmp.tv_conditional, cmp.survival_empirical, cmp.survival_heat
        ),
    ))
}

fn subdiffusion() -> Result<Outcome, rwre_core::Error> {
    const EXPONENT_MAX: f64 = 0.95;
    let envs = replica_environments(
        &spec(Family::HeavyTailNearZero { gamma: 0.5, cap: 1.0 }, 1, 512, 31),
        8,
    )?;
    let cfg = EnsembleConfig {
        start: None,
        t_grid: log_grid(100.0, 1000.0, 10),
        walkers: 20_000,
        seed: 3,
        binning: Binning::Uniform { cells: 16 },
    };
    let stats = run_ensemble(&envs, &cfg)?;
    let fit = fit_diffusion(&stats, 100.0, 1000.0)?;
    let surv = stats.survival(stats.t_grid.len() - 1);
    Ok(outcome(
        fit.exponent < EXPONENT_MAX,
        format!(
            "MSD exponent over t ∈ [100, 1000] = {:.3} (< {EXPONENT_MAX}), R² = {:.4}, survival {surv:.4}",
            fit.exponent, fit.exponent_r_squared
        ),
    ))
}

fn dipole_projector() -> Result<Outcome, rwre_core::Error> {
    const IDEM_TOL: f64 = 1e-10;
    let a = projector_defects(&dipole_matrix(8, 1)?);
    let b = projector_defects(&dipole_matrix(6, 2)?);
    let slope = phi_decay_slope(2, &[4, 8, 16, 32], &PhiQuadrature::default())?;
    let worst = a.idempotence.max(b.idempotence);
    Ok(outcome(
        worst < IDEM_TOL && (-2.5..=-1.5).contains(&slope),
        format!("‖Φ² − Φ‖_max = {:.2e} (d=1), {:.2e} (d=2) (< {IDEM_TOL:e}); d=2 decay slope {slope:.3} ∈ [−2.5, −1.5]", a.idempotence, b.idempotence),
    ))
}

fn theorem_bounds() -> Result<Outcome, rwre_core::Error> {
    const MARGIN_TOL: f64 = -1e-8;
    const CROSS_TOL: f64 = 0.10;
    let s = spec(Family::BoundedPerturbation { mean: 1.0, delta: 0.2 }, 1, 16, 8);
    let schwarz = schwarz_bound_check(&s, 500, 50, 9)?;
    let theta = theta_estimate(&s, 500, None)?;
    let harmonic = s.family.harmonic_mean();
    let lower = theta.w_bar * (1.0 - theta.rho);
    let cross = (theta.kappa - harmonic).abs() / harmonic;
    let pass = schwarz.worst_margin >= MARGIN_TOL
        && theta.psd_within_3_sigma
        && lower <= theta.kappa
        && theta.bounds_hold
        && cross <= CROSS_TOL;
    Ok(outcome(
        pass,
        format!(
            "worst Schwarz margin {:.3e} (≥ {MARGIN_TOL:e}); λ_min(Θ̂) = {:.3e} ± {:.1e}; w̄(1−ρ̂) = {lower:.4} ≤ κ̂ = {:.4}; harmonic {harmonic:.4}, rel diff {:.2}% (≤ {}%)",
            schwarz.worst_margin,
            theta.lambda_min,
            theta.sigma_lambda_min.unwrap_or(f64::NAN),
            theta.kappa,
            100.0 * cross,
            100.0 * CROSS_TOL
        ),
    ))
}

fn graph_cancellation() -> Result<Outcome, rwre_core::Error> {
    const ZERO_TOL: f64 = 1e-12;
    const NONZERO: f64 = 1e-8;
    let moments = MomentModel::new(vec![0.0, 0.1, 0.01, 0.02, 0.003, 0.004]);
    let graphs = cancellation_check(6, 3, &moments)?;
    let bridged: Vec<_> = graphs.iter().filter(|g| g.bridge).collect();
    let worst_bridge = bridged.iter().map(|g| g.a_g.abs()).fold(0.0, f64::max);
    let nonzero = graphs.iter().filter(|g| !g.bridge && g.a_g.abs() > NONZERO).count();
    let shifted = MomentModel::new(vec![0.05, 0.1, 0.01, 0.02, 0.003, 0.004]);
    let all = enumerate_graphs(6, 3, &shifted, false)?;
    let control = all
        .iter()
        .filter(|g| !graphs.iter().any(|a| a.vertices == g.vertices && a.edges == g.edges && a.first == g.first && a.last == g.last))
        .filter(|g| g.a_g.abs() > NONZERO)
        .count();
    Ok(outcome(
        !bridged.is_empty() && worst_bridge < ZERO_TOL && nonzero > 0 && control > 0,
        format!(
            "{} graphs, {} bridged with max |A_G| = {worst_bridge:.1e} (< {ZERO_TOL:e}); {nonzero} non-bridged nonzero; m₁ ≠ 0 control: {control} otherwise-excluded graphs nonzero",
            graphs.len(),
            bridged.len()
        ),
    ))
}

/// Counts set partitions of `{1..n}` into `r` blocks by enumerating
/// restricted growth strings.
fn brute_partitions(n: usize) -> Vec<u128> {
    let mut counts = vec![0u128; n + 1];
    fn rec(a: &mut Vec<usize>, n: usize, max: usize, counts: &mut [u128]) {
        if a.len() == n {
            counts[max] += 1;
            return;
        }
        for v in 0..=max {
            a.push(v);
            rec(a, n, max.max(v + 1), counts);
            a.pop();
        }
    }
    if n == 0 {
        counts[0] = 1;
    } else {
        rec(&mut vec![0], n, 1, &mut counts);
    }
    counts
}

fn combinatorics() -> Result<Outcome, rwre_core::Error> {
    let mut mismatches = 0;
    for n in 1..=10 {
        let brute = brute_partitions(n);
        for (r, b) in brute.iter().enumerate().skip(1) {
            if stirling_pi(n, r) != Some(*b) {
                mismatches += 1;
            }
        }
    }
    let mut bound_fail = 0;
    for n in 1..=12usize {
        for r in 1..=n {
            let lower = (r as u128).pow((n - r) as u32);
            if stirling_pi(n, r).is_none_or(|v| v < lower) {
                bound_fail += 1;
            }
        }
    }
    Ok(outcome(
        mismatches == 0 && bound_fail == 0,
        format!("brute-force mismatches for n ≤ 10: {mismatches}; Π(n,r) < r^(n−r) violations for n ≤ 12: {bound_fail}"),
    ))
}

fn main() {
    let criteria: [(&str, Criterion, Duration); 10] = [
        ("green residual", green_residual, Duration::from_secs(10)),
        ("kernel convergence", kernel_convergence, Duration::from_secs(60)),
        ("spectral closed form", spectral_closed_form, Duration::from_secs(30)),
        ("diffusion constant", diffusion_constant, Duration::from_secs(300)),
        ("marginal convergence", marginal_convergence, Duration::from_secs(300)),
        ("sub-diffusion", subdiffusion, Duration::from_secs(300)),
        ("dipole projector", dipole_projector, Duration::from_secs(120)),
        ("effective coefficient bounds", theorem_bounds, Duration::from_secs(300)),
        ("graph cancellation", graph_cancellation, Duration::from_secs(60)),
        ("partition counts", combinatorics, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_budget = elapsed <= *budget;
        let ok = pass && in_budget;
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {:2} {name}: {detail} [{:.1}s, budget {}s]",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
