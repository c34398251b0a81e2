//! Property tests for the structural invariants of every module.

use oscidiff::cellsolve::{flux_constancy_defect, solve_cells};
use oscidiff::effmat::{
    ellipticity_report, homogenized_matrix, probe_vectors, table_weights, tabulate_ahom_critical, SANDWICH_SLACK,
    SYMMETRY_TOL,
};
use oscidiff::fields::{mean_ys, sample_oscillating, validate_ellipticity, FieldSpec, Smoothness};
use oscidiff::harness::validate_eps_list;
use oscidiff::io;
use oscidiff::pdesolve::{beta, hminus1_norm, solve_micro, v_of_u, DataSpec, InitialDatum, MicroProblem, SourceTerm};
use oscidiff::{CellGrid, MacroGrid, PeriodicMatrixField, Regime, Tensor};
use proptest::prelude::*;

fn trig1d() -> impl Strategy<Value = PeriodicMatrixField> {
    (0.3f64..2.0, 0.0f64..0.9, any::<bool>(), 0.0f64..1.0).prop_map(|(mean, frac, time_modulated, offset)| {
        PeriodicMatrixField::builtin(FieldSpec::Trig1d {
            mean,
            amplitude: frac * mean,
            time_modulated,
            offset,
        })
        .unwrap()
    })
}

fn trig2d() -> impl Strategy<Value = PeriodicMatrixField> {
    (0.0f64..0.4, 0.0f64..0.3, any::<bool>()).prop_map(|(wave, shear, moving)| {
        PeriodicMatrixField::builtin(FieldSpec::Trig2d {
            diag: 1.0,
            wave,
            shear,
            moving,
        })
        .unwrap()
    })
}

fn regime() -> impl Strategy<Value = Regime> {
    prop_oneof![Just(Regime::Subcritical), Just(Regime::Supercritical)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cell_solutions_have_zero_mean_per_slice(field in trig1d(), p in prop_oneof![0.2f64..0.9, 1.1f64..1.9],
                                               u in 0.0f64..3.0) {
        let grid = CellGrid::new(16, 8).unwrap();
        let critical = Regime::from_exponents(2.0, p).unwrap();
        let param = oscidiff::CellParameter::new(p, u).unwrap();
        for (regime, param) in [(Regime::Subcritical, None), (Regime::Supercritical, None), (critical, Some(param))] {
            let cells = solve_cells(regime, &field, &grid, param).unwrap();
            let c = &cells[0];
            for j in 0..c.n_slices {
                let m = c.slice(j).iter().sum::<f64>() / grid.m_y as f64;
                prop_assert!(m.abs() <= 1e-9, "{regime:?} slice {j}: {m:e}");
            }
            prop_assert!(c.periodicity_defect <= 1e-8);
        }
    }

    #[test]
    fn subcritical_flux_is_constant_in_y(field in trig1d()) {
        let grid = CellGrid::new(32, 8).unwrap();
        let cells = solve_cells(Regime::Subcritical, &field, &grid, None).unwrap();
        prop_assert!(flux_constancy_defect(&cells[0], &field).unwrap() <= 1e-8);
    }

    #[test]
    fn off_critical_2d_matrices_are_symmetric(field in trig2d(), regime in regime()) {
        let (t, _) = homogenized_matrix(regime, &field, &CellGrid::new(8, 4).unwrap(), None).unwrap();
        prop_assert!(t.as_constant().unwrap().asymmetry() <= SYMMETRY_TOL);
    }

    #[test]
    fn improved_ellipticity_bounds_hold(field in trig1d(), regime in regime(), p in 0.2f64..1.9) {
        prop_assume!((p - 1.0).abs() > 0.05);
        let grid = CellGrid::new(16, 8).unwrap();
        let probes = probe_vectors(1, 64, 3);
        let (t, _) = homogenized_matrix(regime, &field, &grid, None).unwrap();
        let crit = tabulate_ahom_critical(&field, &grid, p, &[0.0, 0.3, 1.0, 2.0]).unwrap();
        for t in [t, crit] {
            let rep = ellipticity_report(&t, field.lambda(), field.lambda_max(), &probes).unwrap();
            prop_assert!(rep.lower_slack >= -SANDWICH_SLACK && rep.upper_slack >= -SANDWICH_SLACK, "{rep:?}");
        }
    }

    #[test]
    fn mean_of_symmetric_field_is_symmetric(field in trig2d()) {
        prop_assert!(mean_ys(&field, &CellGrid::new(8, 4).unwrap()).asymmetry() <= 1e-15);
    }

    #[test]
    fn accepted_fields_respect_declared_bounds(c in 0.2f64..3.0, amp in 0.0f64..0.9, shrink in 0.0f64..0.5) {
        let f = move |y: [f64; 2], _s: f64| Tensor::from_1d(c * (1.0 + amp * (std::f64::consts::TAU * y[0]).sin()));
        let (lo, hi) = (c * (1.0 - amp), c * (1.0 + amp));
        let field = PeriodicMatrixField::custom(1, f, lo + shrink * (hi - lo), hi, true, Smoothness::Smooth).unwrap();
        if let Ok(est) = validate_ellipticity(&field, 512) {
            prop_assert!(est.lambda_est >= field.lambda() - 1e-12 && est.lambda_max_est <= field.lambda_max() + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn v_vanishes_on_the_boundary(field in trig1d(), p in 0.2f64..1.9, r in 0.5f64..3.5, amp in -2.0f64..2.0) {
        let grid = MacroGrid::new(1, 31, 0.02, 8).unwrap();
        let data = DataSpec { u0: InitialDatum::Sine { amplitude: amp }, f: SourceTerm::Constant { value: 1.0 } };
        let traj = solve_micro(&MicroProblem::new(field, 0.125, r, p, &data, grid)).unwrap();
        prop_assert_eq!(traj.boundary_max(), 0.0);
        for l in 0..traj.n_levels() {
            let (u, v) = (traj.u_at(l), traj.v_at(l));
            for (a, b) in u.iter().zip(&v) {
                prop_assert!((a - beta(*b, p)).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}

proptest! {
    #[test]
    fn oscillating_samples_are_periodic(field in trig1d(), x in 0.0f64..1.0, t in 0.0f64..1.0,
                                        m in 1u32..6, k in -4i32..4, r in 0.5f64..3.5) {
        let eps = 0.5f64.powi(m as i32);
        let base = sample_oscillating(&field, [x, 0.0], t, eps, r).get(0, 0);
        let shifted = sample_oscillating(&field, [x + eps * k as f64, 0.0], t, eps, r).get(0, 0);
        let later = sample_oscillating(&field, [x, 0.0], t + eps.powf(r) * k as f64, eps, r).get(0, 0);
        prop_assert!((base - shifted).abs() <= 1e-9);
        prop_assert!((base - later).abs() <= 1e-9);
    }

    #[test]
    fn transform_inverts_power(u in -10.0f64..10.0, p in 0.1f64..2.0) {
        prop_assert!((beta(v_of_u(u, p), p) - u).abs() <= 1e-12 * (1.0 + u.abs()));
    }

    #[test]
    fn hminus1_norm_is_absolutely_homogeneous(w in prop::collection::vec(-1.0f64..1.0, 19), c in -5.0f64..5.0) {
        let grid = MacroGrid::new(1, 17, 1.0, 4).unwrap();
        let base = hminus1_norm(&w, &grid).unwrap();
        let scaled: Vec<f64> = w.iter().map(|x| c * x).collect();
        prop_assert!((hminus1_norm(&scaled, &grid).unwrap() - c.abs() * base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn table_weights_bracket_the_query(u in 0.0f64..12.0) {
        let keys = oscidiff::effmat::default_table_keys();
        let (i, theta, clamped) = table_weights(&keys, u);
        prop_assert!((0.0..=1.0).contains(&theta));
        prop_assert_eq!(clamped, u > keys[keys.len() - 1]);
        if !clamped {
            prop_assert!(keys[i] <= u && u <= keys[i + 1]);
            let back = ((1.0 - theta) * keys[i].ln_1p() + theta * keys[i + 1].ln_1p()).exp_m1();
            prop_assert!((back - u).abs() <= 1e-12 * (1.0 + u));
        }
    }

    #[test]
    fn dyadic_decreasing_lists_validate(start in 0u32..4, len in 1usize..5, bad in 3u32..40) {
        let eps: Vec<f64> = (0..len).map(|i| 0.5f64.powi((start as usize + i) as i32)).collect();
        prop_assert!(validate_eps_list(&eps).is_ok());
        let mut reversed = eps.clone();
        reversed.reverse();
        prop_assert_eq!(validate_eps_list(&reversed).is_ok(), len == 1);
        prop_assume!(!bad.is_power_of_two());
        prop_assert!(validate_eps_list(&[1.0 / bad as f64]).is_err());
    }

    #[test]
    fn field_files_round_trip(field in trig1d()) {
        let g = io::sample_field(&field, 8, 4);
        let back = io::parse_field(&io::write_field(&g), "x").unwrap();
        prop_assert_eq!(io::sample_field(&back, 8, 4), g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cell_and_matrix_files_round_trip(field in trig1d(), p in 0.2f64..0.9) {
        let grid = CellGrid::new(8, 4).unwrap();
        let param = oscidiff::CellParameter::new(p, 0.7).unwrap();
        let cell = &solve_cells(Regime::CriticalFde, &field, &grid, Some(param)).unwrap()[0];
        let back = io::parse_cell(&io::write_cell(cell)).unwrap();
        prop_assert_eq!(&back.phi, &cell.phi);
        prop_assert_eq!(&back.grad, &cell.grad);
        let t = tabulate_ahom_critical(&field, &grid, p, &[0.0, 0.3, 1.0, 2.0]).unwrap();
        let back = io::parse_ahom(&io::write_ahom(&t)).unwrap();
        prop_assert_eq!(back.matrices(), t.matrices());
        prop_assert_eq!(back.keys(), t.keys());
    }

    #[test]
    fn trajectory_files_round_trip(p in 0.3f64..1.8) {
        let grid = MacroGrid::new(1, 15, 0.01, 4).unwrap();
        let traj = solve_micro(&MicroProblem::new(PeriodicMatrixField::identity(1), 0.25, 1.0, p,
                                                  &DataSpec::default(), grid)).unwrap();
        let back = io::parse_traj(&io::write_traj(&traj)).unwrap();
        prop_assert_eq!(back.values, traj.values);
        prop_assert_eq!(back.levels, traj.levels);
    }
}
