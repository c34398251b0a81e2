//! Oscillating and homogenized solvers against analytic solutions,
//! self-convergence and the discrete energy and stability contracts.

use oscidiff::effmat::EffectiveTensor;
use oscidiff::fields::FieldSpec;
use oscidiff::pdesolve::{
    contraction_test, energy_functionals, hminus1_norm, solve_homogenized, solve_micro, DataSpec, HomogenizedProblem,
    InitialDatum, MicroProblem, SourceTerm, Stepper,
};
use oscidiff::{MacroGrid, PeriodicMatrixField, Regime, Tensor};
use std::f64::consts::PI;

fn heat_data() -> DataSpec {
    DataSpec {
        u0: InitialDatum::Sine { amplitude: 1.0 },
        f: SourceTerm::Zero,
    }
}

fn max_heat_error(n_x: usize, n_t: usize) -> f64 {
    let grid = MacroGrid::new(1, n_x, 0.1, n_t).unwrap();
    let prob = MicroProblem::new(PeriodicMatrixField::identity(1), 0.125, 1.0, 1.0, &heat_data(), grid);
    let traj = solve_micro(&prob).unwrap();
    let decay = (-PI * PI * grid.t_end).exp();
    traj.last()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - decay * (PI * grid.node_point(i)[0]).sin()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn heat_eigenfunction_error_drops_under_refinement() {
    // Δt small enough that the O(h²) part dominates
    let coarse = max_heat_error(15, 1500);
    let fine = max_heat_error(31, 3000);
    assert!(coarse < 5e-3, "{coarse:e}");
    assert!(coarse / fine >= 3.0, "{coarse:e} / {fine:e}");
}

#[test]
fn homogenized_identity_reproduces_the_heat_solution() {
    let grid = MacroGrid::new(1, 31, 0.1, 200).unwrap();
    let t = EffectiveTensor::constant(Regime::Subcritical, Tensor::identity(1));
    let h = solve_homogenized(&HomogenizedProblem::new(t, 1.0, &heat_data(), grid)).unwrap();
    let m = solve_micro(&MicroProblem::new(
        PeriodicMatrixField::identity(1),
        0.25,
        1.0,
        1.0,
        &heat_data(),
        grid,
    ))
    .unwrap();
    assert_eq!(h.values, m.values);
}

#[test]
fn heat_energy_follows_the_analytic_decay() {
    let grid = MacroGrid::new(1, 63, 0.1, 400).unwrap();
    let traj = solve_micro(&MicroProblem::new(
        PeriodicMatrixField::identity(1),
        0.5,
        1.0,
        1.0,
        &heat_data(),
        grid,
    ))
    .unwrap();
    let e = energy_functionals(&traj, 1.0);
    for (t, en) in e.times.iter().zip(&e.energy) {
        let exact = 0.25 * (-2.0 * PI * PI * t).exp();
        assert!((en - exact).abs() < 5e-3 * 0.25, "t = {t}: {en} vs {exact}");
    }
}

fn pme_final(n_t: usize) -> Vec<f64> {
    let grid = MacroGrid::new(1, 63, 0.05, n_t).unwrap();
    let prob = MicroProblem::new(PeriodicMatrixField::identity(1), 0.5, 1.0, 2.0, &heat_data(), grid);
    let traj = solve_micro(&prob).unwrap();
    traj.u_at(traj.n_levels() - 1)
}

#[test]
fn quadratic_porous_medium_self_converges_in_time() {
    let (a, b, c) = (pme_final(20), pme_final(40), pme_final(80));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    let order = (diff(&a, &b) / diff(&b, &c)).log2();
    assert!(order >= 0.9, "temporal order {order}");
}

#[test]
fn newton_converges_quadratically_on_nondegenerate_steps() {
    let field = PeriodicMatrixField::builtin(FieldSpec::trig1d_study()).unwrap();
    let grid = MacroGrid::new(1, 63, 0.05, 10).unwrap();
    let data = DataSpec {
        u0: InitialDatum::Sine { amplitude: 1.0 },
        f: SourceTerm::Constant { value: 1.0 },
    };
    for p in [0.5, 1.5] {
        let mut st = Stepper::micro(&MicroProblem::new(field.clone(), 0.125, 1.0, p, &data, grid)).unwrap();
        let mut checked = 0;
        for _ in 0..grid.n_t {
            let info = st.step().unwrap();
            let r = &info.residuals;
            if info.min_abs_v > 1e-3 && r.len() >= 3 {
                let ratio = r[r.len() - 1] / r[r.len() - 2];
                assert!(ratio <= 0.3, "p = {p}: residuals {r:?}");
                checked += 1;
            }
        }
        assert!(checked > 0, "p = {p}: no step with a Newton tail");
    }
}

#[test]
fn sourceless_energy_never_increases() {
    let field = PeriodicMatrixField::builtin(FieldSpec::trig1d_study()).unwrap();
    let grid = MacroGrid::new(1, 63, 0.1, 80).unwrap();
    for p in [0.5, 1.0, 1.5] {
        let traj = solve_micro(&MicroProblem::new(field.clone(), 0.125, 2.0, p, &heat_data(), grid)).unwrap();
        let e = energy_functionals(&traj, p);
        assert!(e.max_increase() <= 0.0, "p = {p}: {}", e.max_increase());
    }
}

#[test]
fn solutions_depend_continuously_on_the_initial_datum() {
    let field = PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap();
    let grid = MacroGrid::new(1, 63, 0.05, 64).unwrap();
    let other = DataSpec {
        u0: InitialDatum::Sine { amplitude: 0.3 },
        f: SourceTerm::Constant { value: 1.0 },
    };
    for (p, r) in [(0.5, 1.0), (1.5, 2.0), (0.5, 3.0)] {
        let rep = contraction_test(&field, 0.125, r, p, &DataSpec::default(), &other, grid).unwrap();
        assert!(rep.passed, "p = {p}, r = {r}: {rep:?}");
    }
}

#[test]
fn v_vanishes_on_the_boundary_in_2d() {
    let field = PeriodicMatrixField::builtin(FieldSpec::Trig2d {
        diag: 1.0,
        wave: 0.3,
        shear: 0.2,
        moving: true,
    })
    .unwrap();
    let grid = MacroGrid::new(2, 15, 0.02, 6).unwrap();
    let traj = solve_micro(&MicroProblem::new(field, 0.25, 1.0, 1.5, &DataSpec::default(), grid)).unwrap();
    assert_eq!(traj.boundary_max(), 0.0);
    let w: Vec<f64> = traj.u_at(traj.n_levels() - 1);
    assert!(hminus1_norm(&w, &grid).unwrap() > 0.0);
}
