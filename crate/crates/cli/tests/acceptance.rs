//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use common::{fixtures_dir, study_config, STUDIES};
use nalgebra::{DMatrix, DVector};
use oscidiff::cellsolve::solve_cell;
use oscidiff::effmat::{
    ellipticity_report, harmonic_mean_oracle_1d, homogenized_matrix, probe_vectors, skew_report,
    tabulate_ahom_critical, SANDWICH_SLACK, SYMMETRY_TOL,
};
use oscidiff::fields::{mean_ys, FieldSpec};
use oscidiff::harness::Fixture;
use oscidiff::pdesolve::{solve_micro, DataSpec, InitialDatum, MicroProblem, SourceTerm};
use oscidiff::{CellGrid, CellParameter, EffectiveTensor, MacroGrid, PeriodicMatrixField, Regime};
use oscidiff_cli::{run_command, Command, ExperimentConfig, Options, Outcome};
use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::process::ExitCode;

const ORACLE_1D_TOL: f64 = 1e-4;
const ORDER_MIN: f64 = 1.9;
const SUPERCRITICAL_TOL: f64 = 1e-8;
const SUBCRITICAL_TOL: f64 = 1e-4;
const MONOLITHIC_TOL: f64 = 1e-8;
const DEGENERATE_TOL: f64 = 1e-8;
const PME_MEAN_TOL: f64 = 1e-10;
const FDE_SUB_TOL: f64 = 1e-8;
const CONVERGENCE_FACTOR: f64 = 2.0;
const HEAT_RATIO_MIN: f64 = 3.0;

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: &str, title: &str, result: Result<String, String>) {
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id:>2} {title}: {detail}");
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn builtin(spec: FieldSpec) -> PeriodicMatrixField {
    PeriodicMatrixField::builtin(spec).unwrap()
}

fn scalar(t: &EffectiveTensor) -> f64 {
    t.as_constant().unwrap().get(0, 0)
}

fn midpoint(n: usize, f: impl Fn(f64) -> f64) -> f64 {
    (0..n).map(|i| f((i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64
}

fn classical_oracle() -> Result<String, String> {
    let field = builtin(FieldSpec::trig1d_static());
    let exact = 3f64.sqrt() / 4.0;
    let oracle = harmonic_mean_oracle_1d(&field, Regime::Classical).map_err(|e| e.to_string())?;
    if (oracle - exact).abs() > 1e-12 {
        return Err(format!("oracle {oracle} differs from √3/4"));
    }
    let mut worst_err: f64 = 0.0;
    let mut worst_order = f64::INFINITY;
    for regime in [Regime::Classical, Regime::Subcritical, Regime::Supercritical] {
        let errs: Vec<f64> = [4, 8, 16, 64]
            .iter()
            .map(|&m| {
                let (t, _) = homogenized_matrix(regime, &field, &CellGrid::new(m, 4).unwrap(), None).unwrap();
                (scalar(&t) - exact).abs()
            })
            .collect();
        worst_err = worst_err.max(errs[3]);
        for w in errs[..3].windows(2) {
            worst_order = worst_order.min((w[0] / w[1]).log2());
        }
    }
    ensure(
        worst_err <= ORACLE_1D_TOL && worst_order >= ORDER_MIN,
        format!("max error at M_y = 64 {worst_err:.2e}, min order on M_y = 4, 8, 16 {worst_order:.2}"),
    )
}

fn s_averaging() -> Result<String, String> {
    let field = builtin(FieldSpec::trig1d_ys());
    let grid = CellGrid::default_for(1);
    let (sup, _) = homogenized_matrix(Regime::Supercritical, &field, &grid, None).map_err(|e| e.to_string())?;
    let (sub, _) = homogenized_matrix(Regime::Subcritical, &field, &grid, None).map_err(|e| e.to_string())?;
    let quad = midpoint(100_000, |s| 0.25 * (4.0 - (TAU * s).cos().powi(2)).sqrt());
    let (d_sup, d_sub) = ((scalar(&sup) - 0.5).abs(), (scalar(&sub) - quad).abs());
    ensure(
        d_sup <= SUPERCRITICAL_TOL && d_sub <= SUBCRITICAL_TOL,
        format!("supercritical |a − 1/2| = {d_sup:.2e}, subcritical |a − quadrature| = {d_sub:.2e}"),
    )
}

fn monolithic(field: &PeriodicMatrixField, m_y: usize, m_s: usize, capacity: f64) -> Vec<f64> {
    let (h, hs) = (1.0 / m_y as f64, 1.0 / m_s as f64);
    let n = m_y * m_s;
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut b = DVector::<f64>::zeros(n + 1);
    let coef = |y: f64, s: f64| field.eval([y, 0.0], s).get(0, 0);
    let mass = capacity * h / hs;
    for j in 0..m_s {
        let s = (j as f64 + 0.5) * hs;
        let jm = (j + m_s - 1) % m_s;
        for i in 0..m_y {
            let row = j * m_y + i;
            let (al, ar) = (coef(i as f64 * h, s), coef((i + 1) as f64 * h, s));
            a[(row, row)] += (al + ar) / h + mass;
            a[(row, j * m_y + (i + m_y - 1) % m_y)] -= al / h;
            a[(row, j * m_y + (i + 1) % m_y)] -= ar / h;
            a[(row, jm * m_y + i)] -= mass;
            a[(row, n)] = 1.0;
            a[(n, row)] = 1.0;
            b[row] = ar - al;
        }
    }
    a.lu().solve(&b).unwrap().as_slice()[..n].to_vec()
}

fn critical_oracle() -> Result<String, String> {
    let field = builtin(FieldSpec::trig1d_ys());
    let grid = CellGrid::new(16, 16).unwrap();
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (regime, p, name) in [(Regime::CriticalFde, 0.5, "FDE"), (Regime::CriticalPme, 1.5, "PME")] {
        let param = CellParameter::new(p, 1.0).unwrap();
        let cell = solve_cell(regime, &field, &grid, Some(param), 0).map_err(|e| e.to_string())?;
        let reference = monolithic(&field, 16, 16, param.capacity(regime));
        let l2 = (cell
            .phi
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 256.0)
            .sqrt();
        worst = worst.max(l2);
        parts.push(format!("{name} {l2:.2e}"));
    }
    ensure(worst <= MONOLITHIC_TOL, format!("L² distance {}", parts.join(", ")))
}

fn degenerations() -> Result<String, String> {
    let field = builtin(FieldSpec::trig1d_static());
    let grid = CellGrid::new(32, 8).unwrap();
    let (reference, ref_cells) = homogenized_matrix(Regime::Classical, &field, &grid, None).unwrap();
    let mut spread: f64 = 0.0;
    for (regime, param) in [
        (Regime::Subcritical, None),
        (Regime::Supercritical, None),
        (Regime::CriticalFde, Some(CellParameter::new(0.5, 0.8).unwrap())),
        (Regime::CriticalPme, Some(CellParameter::new(1.5, 0.8).unwrap())),
    ] {
        let (t, cells) = homogenized_matrix(regime, &field, &grid, param).map_err(|e| e.to_string())?;
        spread = spread.max((scalar(&t) - scalar(&reference)).abs());
        for j in 0..cells[0].n_slices {
            for (a, b) in cells[0].slice(j).iter().zip(ref_cells[0].slice(0)) {
                spread = spread.max((a - b).abs());
            }
        }
    }
    let ys = builtin(FieldSpec::trig1d_ys());
    let grid = CellGrid::new(32, 16).unwrap();
    let pme = tabulate_ahom_critical(&ys, &grid, 1.5, &[0.0, 0.1, 1.0, 2.0]).map_err(|e| e.to_string())?;
    let d_pme = (pme.matrices()[0].get(0, 0) - mean_ys(&ys, &grid).get(0, 0)).abs();
    let fde = tabulate_ahom_critical(&ys, &grid, 0.5, &[0.0, 0.1, 1.0, 2.0]).map_err(|e| e.to_string())?;
    let (sub, _) = homogenized_matrix(Regime::Subcritical, &ys, &grid, None).map_err(|e| e.to_string())?;
    let d_fde = (fde.matrices()[0].get(0, 0) - scalar(&sub)).abs();
    ensure(
        spread <= DEGENERATE_TOL && d_pme <= PME_MEAN_TOL && d_fde <= FDE_SUB_TOL,
        format!(
            "(a) regime spread {spread:.2e}, (b) PME at 0 vs mean {d_pme:.2e}, (c) FDE at 0 vs subcritical {d_fde:.2e}"
        ),
    )
}

fn structure() -> Result<String, String> {
    let specs = [
        FieldSpec::trig1d_static(),
        FieldSpec::trig1d_ys(),
        FieldSpec::trig1d_study(),
        FieldSpec::Laminate2d {
            mean: 1.0,
            amplitude: 0.5,
        },
        FieldSpec::Trig2d {
            diag: 1.0,
            wave: 0.3,
            shear: 0.2,
            moving: true,
        },
        FieldSpec::Checkerboard {
            low: 0.5,
            high: 2.0,
            sharpness: 4.0,
        },
    ];
    let mut min_slack = f64::INFINITY;
    let mut count = 0;
    for spec in specs {
        let field = builtin(spec);
        let grid = if field.dim() == 1 {
            CellGrid::new(32, 16).unwrap()
        } else {
            CellGrid::new(16, 8).unwrap()
        };
        let mut tensors = Vec::new();
        let mut regimes = vec![Regime::Subcritical, Regime::Supercritical];
        if field.is_s_independent() {
            regimes.push(Regime::Classical);
        }
        for regime in regimes {
            tensors.push(
                homogenized_matrix(regime, &field, &grid, None)
                    .map_err(|e| e.to_string())?
                    .0,
            );
        }
        for p in [0.5, 1.5] {
            tensors.push(tabulate_ahom_critical(&field, &grid, p, &[0.0, 0.3, 1.0, 3.0]).map_err(|e| e.to_string())?);
        }
        let probes = probe_vectors(field.dim(), 64, 11);
        for t in tensors {
            let rep = ellipticity_report(&t, field.lambda(), field.lambda_max(), &probes).map_err(|e| e.to_string())?;
            min_slack = min_slack.min(rep.lower_slack.min(rep.upper_slack));
            count += 1;
        }
    }
    let trig2d = builtin(FieldSpec::Trig2d {
        diag: 1.0,
        wave: 0.3,
        shear: 0.2,
        moving: true,
    });
    let mut asym: f64 = 0.0;
    for regime in [Regime::Subcritical, Regime::Supercritical] {
        let (t, _) = homogenized_matrix(regime, &trig2d, &CellGrid::new(24, 16).unwrap(), None).unwrap();
        asym = asym.max(t.as_constant().unwrap().asymmetry());
    }
    let mut skew_ok = true;
    let mut skew_parts = Vec::new();
    for p in [0.5, 1.5] {
        let regime = Regime::from_exponents(2.0, p).unwrap();
        let param = CellParameter::new(p, 1.0).unwrap();
        let (t, cells) = homogenized_matrix(regime, &trig2d, &CellGrid::new(16, 32).unwrap(), Some(param)).unwrap();
        let rep = skew_report(&t, Some(&cells)).map_err(|e| e.to_string())?;
        let antisym = rep
            .integral
            .map_or(f64::INFINITY, |i| (i.skew_part() - rep.skew).max_abs());
        skew_ok &= rep.max_mismatch <= rep.tol && rep.skew.max_abs() > 0.0;
        skew_parts.push(format!(
            "p = {p}: |skew| {:.2e}, mismatch {:.2e} ≤ {:.2e} (antisymmetric parts {antisym:.1e})",
            rep.skew.max_abs(),
            rep.max_mismatch,
            rep.tol
        ));
    }
    ensure(
        min_slack >= -SANDWICH_SLACK && asym <= SYMMETRY_TOL && skew_ok,
        format!(
            "sandwich min slack {min_slack:.2e} over {count} matrices, 2D asymmetry {asym:.2e}, {}",
            skew_parts.join("; ")
        ),
    )
}

struct StudyResult {
    name: &'static str,
    outcome: Result<Outcome, String>,
    floor: f64,
}

fn column(o: &Outcome, table: &str, col: &str) -> Vec<f64> {
    o.table(table)
        .and_then(|t| t.column(col))
        .unwrap_or_default()
        .iter()
        .map(|v| v.as_f64().unwrap_or(f64::NAN))
        .collect()
}

fn strictly_decreasing(x: &[f64]) -> bool {
    x.len() >= 2 && x.windows(2).all(|w| w[1] < w[0])
}

fn run_studies(out: &Path) -> Vec<StudyResult> {
    STUDIES
        .iter()
        .map(|&(name, p, r)| {
            let opts = Options {
                out: out.join(name),
                jobs: 1,
                strict_rates: false,
                fixtures: Some(fixtures_dir()),
            };
            let floor =
                Fixture::load(&fixtures_dir().join(format!("{name}.json"))).map_or(f64::NAN, |f| f.grad_plain_floor);
            let outcome = run_command(Command::Converge, &study_config(name, p, r), &opts).map_err(|e| e.to_string());
            StudyResult { name, outcome, floor }
        })
        .collect()
}

fn convergence(studies: &[StudyResult]) -> Result<String, String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in studies {
        let o = s.outcome.as_ref().map_err(|e| format!("{}: {e}", s.name))?;
        let sol = column(o, "errors", "sol_err");
        let factor = sol[0] / sol[sol.len() - 1];
        ok &= strictly_decreasing(&sol) && factor >= CONVERGENCE_FACTOR;
        parts.push(format!("{} ×{factor:.2}", s.name));
    }
    ensure(ok, format!("strict decrease, coarse/fine factor {}", parts.join(", ")))
}

fn correctors(studies: &[StudyResult]) -> Result<String, String> {
    let mut ok = true;
    let mut margin = f64::INFINITY;
    for s in studies {
        let o = s.outcome.as_ref().map_err(|e| format!("{}: {e}", s.name))?;
        for col in ["grad_corr_err", "flux_corr_err", "dtime_corr_err"] {
            if !strictly_decreasing(&column(o, "errors", col)) {
                ok = false;
                println!("      {}: {col} not strictly decreasing", s.name);
            }
        }
        let plain = column(o, "errors", "grad_plain_err");
        ok &= s.floor > 0.0 && plain.iter().all(|&e| e >= s.floor);
        margin = margin.min(plain.iter().fold(f64::INFINITY, |m, &e| m.min(e / s.floor)));
        if let Some(e) = &o.failure {
            ok = false;
            println!("      {}: {e}", s.name);
        }
    }
    ensure(
        ok,
        format!("three corrector defects strictly decrease, min plain error / fixture floor {margin:.2}"),
    )
}

fn contracts(studies: &[StudyResult], out: &Path) -> Result<String, String> {
    let mut ok = true;
    let mut audited = 0;
    for s in studies {
        let o = s.outcome.as_ref().map_err(|e| format!("{}: {e}", s.name))?;
        let passed = o
            .table("estimates")
            .and_then(|t| t.column("passed"))
            .unwrap_or_default();
        ok &= !passed.is_empty() && passed.iter().all(|v| v.as_bool() == Some(true));
        audited += passed.len();
    }
    let mut contractions = 0;
    let mut energies = 0;
    for &(name, p, r) in &STUDIES {
        let mut cfg: ExperimentConfig = study_config(name, p, r);
        cfg.fixture = None;
        cfg.data = DataSpec {
            u0: InitialDatum::Sine { amplitude: 1.0 },
            f: SourceTerm::Zero,
        };
        cfg.grids.n_x = Some(63);
        cfg.grids.t_end = Some(0.05);
        let opts = Options {
            out: out.join(format!("audit_{name}")),
            jobs: 1,
            strict_rates: false,
            fixtures: None,
        };
        let o = run_command(Command::Audit, &cfg, &opts).map_err(|e| format!("{name}: {e}"))?;
        if let Some(e) = &o.failure {
            ok = false;
            println!("      {name}: {e}");
        }
        contractions += o.table("contraction").map_or(0, |t| t.rows.len());
        energies += o.table("energy").map_or(0, |t| t.rows.len());
    }
    ensure(
        ok && contractions == 15 && energies == 15,
        format!(
            "{contractions} contraction runs, {energies} sourceless energy runs, {audited} uniform-estimate checks"
        ),
    )
}

fn heat_error(n_x: usize, n_t: usize) -> f64 {
    let grid = MacroGrid::new(1, n_x, 0.1, n_t).unwrap();
    let data = DataSpec {
        u0: InitialDatum::Sine { amplitude: 1.0 },
        f: SourceTerm::Zero,
    };
    let traj = solve_micro(&MicroProblem::new(
        PeriodicMatrixField::identity(1),
        0.125,
        1.0,
        1.0,
        &data,
        grid,
    ))
    .unwrap();
    let decay = (-PI * PI * 0.1f64).exp();
    traj.last()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - decay * (PI * grid.node_point(i)[0]).sin()).abs())
        .fold(0.0, f64::max)
}

fn linear_sanity() -> Result<String, String> {
    let (coarse, fine) = (heat_error(15, 1500), heat_error(31, 3000));
    let ratio = coarse / fine;
    ensure(
        ratio >= HEAT_RATIO_MIN,
        format!("max error {coarse:.2e} → {fine:.2e}, ratio {ratio:.2}"),
    )
}

fn determinism(studies: &[StudyResult], out: &Path) -> Result<String, String> {
    let s = &studies[0];
    let first = out.join(s.name).join("converge.csv");
    let again = out.join("rerun");
    let (_, p, r) = STUDIES[0];
    let mut cfg = study_config(s.name, p, r);
    cfg.fixture = None;
    std::fs::create_dir_all(&again).unwrap();
    let cfg_path = again.join("input.json");
    std::fs::write(&cfg_path, cfg.echo()).unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_oscidiff"))
        .args(["converge", "--jobs", "1", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&again)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("binary exited with {}", status.status));
    }
    let a = std::fs::read(&first).map_err(|e| e.to_string())?;
    let b = std::fs::read(again.join("converge.csv")).map_err(|e| e.to_string())?;
    ensure(
        a == b && !a.is_empty(),
        format!("{} bytes, identical = {}", a.len(), a == b),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut gate = Gate { failed: 0 };
    gate.report("1", "classical 1D harmonic-mean oracle", classical_oracle());
    gate.report(
        "2",
        "time averaging in the supercritical and subcritical regimes",
        s_averaging(),
    );
    gate.report(
        "3",
        "critical cells against a monolithic space-time solve",
        critical_oracle(),
    );
    gate.report("4", "regime degenerations", degenerations());
    gate.report("5", "improved ellipticity, symmetry and skew part", structure());
    let studies = run_studies(tmp.path());
    gate.report("6", "homogenization convergence of the solution", convergence(&studies));
    gate.report(
        "7",
        "corrector witnesses and plain-gradient floor",
        correctors(&studies),
    );
    gate.report(
        "8",
        "contraction, energy dissipation and uniform estimates",
        contracts(&studies, tmp.path()),
    );
    gate.report("9", "heat equation eigenfunction under refinement", linear_sanity());
    gate.report(
        "10",
        "bitwise-deterministic converge output",
        determinism(&studies, tmp.path()),
    );
    if gate.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failed);
        ExitCode::FAILURE
    }
}
