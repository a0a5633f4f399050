use proptest::prelude::*;

use rwre_core::dipole::{dipole_matrix, d_matrix, projector_defects, spectral_norm, stirling_pi};
use rwre_core::green::{continuum_kernel, heat_box_probability, kernel_from_inverse};
use rwre_core::lattice::{build_delta, divergence, gradient, quadratic_form};
use rwre_core::walker::{linear_grid, run_ensemble};
use rwre_core::{sample_environment, Binning, CgOptions, EnsembleConfig, EnvironmentSpec, Family};

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        (0.1f64..5.0).prop_map(|rate| Family::Constant { rate }),
        (0.1f64..2.0, 0.1f64..3.0).prop_map(|(lo, w)| Family::UniformInterval { lo, hi: lo + w }),
        (0.2f64..3.0, 0.0f64..0.49).prop_map(|(mean, delta)| Family::BoundedPerturbation { mean, delta }),
        (0.3f64..3.0, 0.5f64..2.0).prop_map(|(gamma, cap)| Family::HeavyTailNearZero { gamma, cap }),
    ]
}

fn small_spec() -> impl Strategy<Value = EnvironmentSpec> {
    (family(), 1usize..=3, any::<u64>())
        .prop_flat_map(|(family, dim, seed)| {
            let max_l: usize = match dim {
                1 => 12,
                2 => 5,
                _ => 3,
            };
            (Just(family), Just(dim), 1usize..=max_l, Just(seed))
        })
        .prop_map(|(family, dim, half_size, seed)| EnvironmentSpec {
            family,
            dim,
            half_size,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn laplacian_is_symmetric_and_diagonally_dominant(spec in small_spec()) {
        let env = sample_environment(&spec).unwrap();
        let a = build_delta(&env).to_dense();
        prop_assert_eq!(&a, &a.transpose());
        for i in 0..a.nrows() {
            let row: f64 = a.row(i).sum();
            prop_assert!(row <= 1e-12 * a[(i, i)].abs());
            prop_assert!(a[(i, i)] < 0.0);
            for j in 0..a.ncols() {
                if i != j {
                    prop_assert!(a[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(
        spec in small_spec(),
        freq in 0.1f64..3.0,
        phase in -3.0f64..3.0,
    ) {
        let env = sample_environment(&spec).unwrap();
        let lat = env.lattice();
        let u: Vec<f64> = (0..lat.num_sites()).map(|i| (freq * i as f64 + phase).sin()).collect();
        let w: Vec<f64> = (0..lat.num_bonds()).map(|b| (0.37 * freq * b as f64 - phase).cos()).collect();
        let lhs: f64 = gradient(lat, &u).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = divergence(lat, &w).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn dirichlet_form_is_positive(spec in small_spec(), scale in 0.1f64..10.0) {
        let env = sample_environment(&spec).unwrap();
        let n = env.lattice().num_sites();
        let u: Vec<f64> = (0..n).map(|i| scale * ((i as f64 * 0.7).sin() + 0.1)).collect();
        let q = quadratic_form(&u, &env).unwrap();
        let direct = -build_delta(&env).quadratic_form(&u);
        prop_assert!(q > 0.0);
        prop_assert!((q - direct).abs() < 1e-10 * q);
    }

    #[test]
    fn perturbation_norm_bounded_by_delta(
        delta in 0.0f64..0.49,
        dim in 1usize..=2,
        half_size in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let env = sample_environment(&EnvironmentSpec {
            family: Family::BoundedPerturbation { mean: 1.3, delta },
            dim,
            half_size,
            seed,
        })
        .unwrap();
        let d = d_matrix(&env, 1.3).unwrap();
        prop_assert!(spectral_norm(&d) <= delta + 1e-12);
    }

    #[test]
    fn dipole_potential_is_a_projector(dim in 1usize..=3, half_size in 1usize..=4) {
        let half_size = if dim == 3 { half_size.min(2) } else { half_size };
        let p = projector_defects(&dipole_matrix(half_size, dim).unwrap());
        prop_assert!(p.asymmetry < 1e-12);
        prop_assert!(p.idempotence < 1e-10);
        prop_assert!(p.spectrum < 1e-8);
    }

    #[test]
    fn partition_counts_follow_recursion(n in 2usize..40, r in 1usize..40) {
        prop_assume!(r <= n);
        let lhs = stirling_pi(n, r).unwrap();
        let rhs = stirling_pi(n - 1, r - 1).unwrap() + r as u128 * stirling_pi(n - 1, r).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn continuum_kernel_is_symmetric(kappa in 0.1f64..5.0, r in -1.0f64..1.0, s in -1.0f64..1.0) {
        let a = continuum_kernel(kappa, r, s).unwrap();
        prop_assert_eq!(a, continuum_kernel(kappa, s, r).unwrap());
        prop_assert!(a <= 0.0);
    }

    #[test]
    fn discrete_kernel_is_symmetric(spec in small_spec(), m in 3usize..12) {
        let spec = EnvironmentSpec { dim: spec.dim.min(2), half_size: spec.half_size.min(5), ..spec };
        let env = sample_environment(&spec).unwrap();
        let grid = kernel_from_inverse(&env, m, &CgOptions::with_tol(1e-12)).unwrap();
        prop_assert!(grid.asymmetry() <= 1e-8 * grid.sup_norm().max(1e-300));
    }

    #[test]
    fn heat_box_probabilities_are_sub_probabilities(kappa in 0.2f64..3.0, t in 0.01f64..1.0, cut in -0.9f64..0.9) {
        let k = nalgebra::DMatrix::from_element(1, 1, kappa);
        let left = heat_box_probability(&k, t, &[(-1.0, cut)], 200).unwrap();
        let right = heat_box_probability(&k, t, &[(cut, 1.0)], 200).unwrap();
        prop_assert!(left >= -1e-9 && right >= -1e-9);
        prop_assert!(left + right <= 1.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn survival_is_monotone(spec in small_spec(), walkers in 1usize..300, seed in any::<u64>()) {
        let env = sample_environment(&spec).unwrap();
        let cfg = EnsembleConfig {
            start: None,
            t_grid: linear_grid(0.0, 20.0, 8),
            walkers,
            seed,
            binning: Binning::Sites,
        };
        let stats = run_ensemble(&[env], &cfg).unwrap();
        for k in 1..cfg.t_grid.len() {
            prop_assert!(stats.survival(k) <= stats.survival(k - 1));
        }
        for k in 0..cfg.t_grid.len() {
            if let Ok(p) = stats.point(k) {
                prop_assert!(p.msd >= 0.0);
            }
        }
    }
}
