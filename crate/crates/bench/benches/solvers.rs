use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use oscidiff::cellsolve::solve_cell;
use oscidiff::effmat::{homogenized_matrix, tabulate_ahom_critical};
use oscidiff::fields::FieldSpec;
use oscidiff::pdesolve::{DataSpec, MicroProblem, Stepper};
use oscidiff::{CellGrid, CellParameter, MacroGrid, PeriodicMatrixField, Regime};
use std::hint::black_box;

fn ys() -> PeriodicMatrixField {
    PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap()
}

fn cells(c: &mut Criterion) {
    let field = ys();
    let grid = CellGrid::default_for(1);
    let mut g = c.benchmark_group("cell");
    for (name, regime, param) in [
        ("subcritical", Regime::Subcritical, None),
        (
            "critical_fde",
            Regime::CriticalFde,
            Some(CellParameter::new(0.5, 1.0).unwrap()),
        ),
        (
            "critical_pme",
            Regime::CriticalPme,
            Some(CellParameter::new(1.5, 1.0).unwrap()),
        ),
    ] {
        g.bench_function(name, |b| {
            b.iter(|| solve_cell(regime, &field, &grid, param, 0).unwrap())
        });
    }
    let trig2d = PeriodicMatrixField::builtin(FieldSpec::Trig2d {
        diag: 1.0,
        wave: 0.3,
        shear: 0.2,
        moving: true,
    })
    .unwrap();
    let grid2 = CellGrid::new(24, 16).unwrap();
    g.sample_size(10);
    g.bench_function("subcritical_2d", |b| {
        b.iter(|| solve_cell(Regime::Subcritical, &trig2d, &grid2, None, 0).unwrap())
    });
    g.finish();
}

fn matrices(c: &mut Criterion) {
    let field = ys();
    let grid = CellGrid::new(32, 32).unwrap();
    let mut g = c.benchmark_group("ahom");
    g.bench_function("supercritical", |b| {
        b.iter(|| homogenized_matrix(Regime::Supercritical, &field, &grid, None).unwrap())
    });
    g.sample_size(10);
    g.bench_function("critical_table_p1.5", |b| {
        b.iter(|| tabulate_ahom_critical(&field, &grid, 1.5, &oscidiff::effmat::default_table_keys()).unwrap())
    });
    g.finish();
}

fn micro_steps(c: &mut Criterion) {
    let field = PeriodicMatrixField::builtin(FieldSpec::trig1d_study()).unwrap();
    let mut g = c.benchmark_group("micro_step");
    for p in [0.5, 1.0, 1.5] {
        let grid = MacroGrid::new(1, 255, 0.25, 1_000_000).unwrap();
        let prob = MicroProblem::new(field.clone(), 0.03125, 2.0, p, &DataSpec::default(), grid);
        let mut st = Stepper::micro(&prob).unwrap();
        g.bench_with_input(BenchmarkId::new("1d_n255", p), &p, |b, _| {
            b.iter(|| black_box(st.step().unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, cells, matrices, micro_steps);
criterion_main!(benches);
