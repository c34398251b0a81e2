//! Subcommands. Every command writes its artifacts, a `config.json` echo and
//! a `<command>.json` mirror of its tables into the output directory.

use crate::config::ExperimentConfig;
use crate::table::{num, Table};
use crate::{CliError, FIXTURES_ENV};
use oscidiff::cellsolve::{flux_constancy_defect, solve_cells, CorrectorSet};
use oscidiff::effmat::{self, ellipticity_report, probe_vectors, skew_report};
use oscidiff::harness::{
    self, check_plain_floor, run_convergence_study, study_correctors, trajectory_defects, Fixture, ACCEPTANCE_NOTE,
};
use oscidiff::pdesolve::{
    contraction_test, energy_functionals, run, DataSpec, HomogenizedProblem, InitialDatum, MicroProblem, RunOptions,
    SourceTerm, Stepper, Variable,
};
use oscidiff::{io, CellParameter, Error, PeriodicMatrixField, SpaceTimeField, NEWTON_TOL};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Cell,
    Ahom,
    Micro,
    Homog,
    Converge,
    Corrector,
    Audit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Cell => "cell",
            Command::Ahom => "ahom",
            Command::Micro => "micro",
            Command::Homog => "homog",
            Command::Converge => "converge",
            Command::Corrector => "corrector",
            Command::Audit => "audit",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub out: PathBuf,
    pub jobs: usize,
    pub strict_rates: bool,
    /// Fixture directory (defaults to `$OSCIDIFF_FIXTURES`).
    pub fixtures: Option<PathBuf>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            out: PathBuf::from("oscidiff-out"),
            jobs: 1,
            strict_rates: false,
            fixtures: std::env::var_os(FIXTURES_ENV).map(PathBuf::from),
        }
    }
}

/// Tables and files of one command. `failure` holds the first failed
/// assertion; artifacts are written regardless.
#[derive(Debug, Serialize)]
pub struct Outcome {
    pub command: Command,
    pub config: ExperimentConfig,
    pub tables: Vec<Table>,
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
    pub status: String,
    #[serde(skip)]
    pub failure: Option<CliError>,
}

impl Outcome {
    fn new(command: Command, config: &ExperimentConfig) -> Self {
        Outcome {
            command,
            config: config.clone(),
            tables: Vec::new(),
            files: Vec::new(),
            notes: Vec::new(),
            status: "ok".into(),
            failure: None,
        }
    }

    /// Records a failed assertion; only the first one is kept.
    fn fail(&mut self, e: impl Into<CliError>) {
        if self.failure.is_none() {
            self.failure = Some(e.into());
        }
    }

    fn write(&mut self, dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        self.files.push(p);
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in &self.tables {
            s.push_str(&t.render());
            s.push('\n');
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes") + "\n"
    }
}

/// Runs `cmd` on a worker pool of `opts.jobs` threads.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, opts: &Options) -> Result<Outcome, CliError> {
    let mut cfg = cfg.clone();
    cfg.out = Some(opts.out.clone());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    std::fs::create_dir_all(&opts.out)?;
    let mut outcome = Outcome::new(cmd, &cfg);
    outcome.write(&opts.out, "config.json", &cfg.echo())?;
    pool.install(|| match cmd {
        Command::Cell => cmd_cell(&cfg, opts, &mut outcome),
        Command::Ahom => cmd_ahom(&cfg, opts, &mut outcome),
        Command::Micro => cmd_micro(&cfg, opts, &mut outcome),
        Command::Homog => cmd_homog(&cfg, opts, &mut outcome),
        Command::Converge => cmd_converge(&cfg, opts, &mut outcome),
        Command::Corrector => cmd_corrector(&cfg, opts, &mut outcome),
        Command::Audit => cmd_audit(&cfg, opts, &mut outcome),
    })?;
    if let Some(f) = &outcome.failure {
        outcome.status = f.to_string();
    }
    let mirror = outcome.to_json();
    outcome.write(&opts.out, &format!("{}.json", cmd.name()), &mirror)?;
    Ok(outcome)
}

fn eps_tag(eps: f64) -> String {
    format!("eps{}", (-eps.log2()).round() as i64)
}

fn micro_traj_name(eps: f64) -> String {
    format!("micro_{}.traj", eps_tag(eps))
}

fn check_row(t: &mut Table, statement: &str, value: f64, bound: f64, passed: bool) {
    t.push(vec![statement.into(), num(value), num(bound), passed.into()]);
}

fn checks_table() -> Table {
    Table::new("checks", &["statement", "value", "bound", "passed"])
}

fn cmd_cell(cfg: &ExperimentConfig, opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let regime = cfg.regime()?;
    let grid = cfg.cell_grid(field.dim())?;
    let param = if regime.is_critical() {
        Some(CellParameter::new(cfg.p, cfg.u0abs)?)
    } else {
        None
    };
    let cells = solve_cells(regime, &field, &grid, param)?;
    let mut t = Table::new(
        "cell",
        &[
            "k",
            "regime",
            "max_abs_phi",
            "mean_defect",
            "periodicity_defect",
            "residual",
            "sweeps",
            "flux_constancy_defect",
        ],
    );
    for c in &cells {
        let flux = if c.dim == 1 {
            num(flux_constancy_defect(c, &field)?)
        } else {
            Value::Null
        };
        t.push(vec![
            (c.k + 1).into(),
            c.regime.name().into(),
            num(c.max_abs()),
            num(c.mean_defect),
            num(c.periodicity_defect),
            num(c.residual),
            c.sweeps.into(),
            flux,
        ]);
        out.write(&opts.out, &format!("cell_k{}.cell", c.k + 1), &io::write_cell(c))?;
    }
    out.tables.push(t);
    Ok(())
}

fn matrix_table(tensor: &oscidiff::EffectiveTensor) -> Table {
    let mut t = Table::new("ahom", &["u0abs", "a11", "a12", "a21", "a22"]);
    let keys: Vec<Option<f64>> = match tensor.keys() {
        Some(k) => k.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    for (k, m) in keys.iter().zip(tensor.matrices()) {
        let e = |i: usize, j: usize| {
            if i < m.dim && j < m.dim {
                num(m.get(i, j))
            } else {
                Value::Null
            }
        };
        t.push(vec![k.map_or(Value::Null, num), e(0, 0), e(0, 1), e(1, 0), e(1, 1)]);
    }
    t
}

fn cmd_ahom(cfg: &ExperimentConfig, opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let regime = cfg.regime()?;
    let grid = cfg.cell_grid(field.dim())?;
    let keys = cfg.table_keys.clone().unwrap_or_else(effmat::default_table_keys);
    let (tensor, skew) = if regime.is_critical() {
        let (tensor, _) = effmat::tabulate_critical(&field, &grid, cfg.p, &keys)?;
        let param = CellParameter::new(cfg.p, cfg.u0abs)?;
        let (single, cells) = effmat::homogenized_matrix(regime, &field, &grid, Some(param))?;
        (tensor, skew_report(&single, Some(&cells)))
    } else {
        let (tensor, _) = effmat::homogenized_matrix(regime, &field, &grid, None)?;
        let s = skew_report(&tensor, None);
        (tensor, s)
    };
    out.write(&opts.out, "ahom.txt", &io::write_ahom(&tensor))?;
    out.tables.push(matrix_table(&tensor));

    let mut checks = checks_table();
    let probes = probe_vectors(field.dim(), 64, cfg.seed);
    match ellipticity_report(&tensor, field.lambda(), field.lambda_max(), &probes) {
        Ok(r) => {
            check_row(
                &mut checks,
                "improved ellipticity lower bound",
                r.lower_slack,
                -effmat::SANDWICH_SLACK,
                true,
            );
            check_row(
                &mut checks,
                "improved ellipticity upper bound",
                r.upper_slack,
                -effmat::SANDWICH_SLACK,
                true,
            );
        }
        Err(e) => {
            let name = match &e {
                Error::BoundViolated { statement, .. } => statement.clone(),
                _ => "improved ellipticity bounds".into(),
            };
            check_row(&mut checks, &name, f64::NAN, -effmat::SANDWICH_SLACK, false);
            out.fail(e);
        }
    }
    let skew_name = if regime.is_critical() {
        "skew part equals the time-derivative corrector integral"
    } else {
        "symmetry of the homogenized matrix"
    };
    match skew {
        Ok(r) => {
            let value = if regime.is_critical() {
                r.max_mismatch
            } else {
                r.asymmetry
            };
            check_row(&mut checks, skew_name, value, r.tol, true);
        }
        Err(e) => {
            let value = match &e {
                Error::SymmetryViolated { defect } => *defect,
                Error::SkewFormulaMismatch { skew, integral, .. } => (skew - integral).abs(),
                _ => f64::NAN,
            };
            check_row(&mut checks, skew_name, value, f64::NAN, false);
            out.fail(e);
        }
    }
    out.tables.push(checks);
    Ok(())
}

fn micro_grid(cfg: &ExperimentConfig, field: &PeriodicMatrixField) -> Result<oscidiff::MacroGrid, CliError> {
    let settings = cfg.settings(field.dim())?;
    let eps_min = *cfg.eps.last().expect("validated");
    Ok(settings.macro_grid(field.dim(), eps_min, cfg.r)?)
}

fn newton_totals(traj: &SpaceTimeField) -> (usize, usize) {
    traj.diagnostics.iter().fold((0, 0), |(s, m), d| {
        (s + d.newton_iterations, m.max(d.newton_iterations))
    })
}

fn solve_micro_all(
    cfg: &ExperimentConfig,
    field: &PeriodicMatrixField,
    grid: oscidiff::MacroGrid,
    opts: RunOptions,
) -> Result<Vec<SpaceTimeField>, CliError> {
    let trajs = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let prob = MicroProblem::new(field.clone(), eps, cfg.r, cfg.p, &cfg.data, grid);
            run(Stepper::micro(&prob)?, opts)
        })
        .collect::<oscidiff::Result<Vec<_>>>()?;
    Ok(trajs)
}

fn cmd_micro(cfg: &ExperimentConfig, opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let grid = micro_grid(cfg, &field)?;
    let trajs = solve_micro_all(cfg, &field, grid, RunOptions::default())?;
    let mut t = Table::new(
        "micro",
        &[
            "eps",
            "n_t",
            "newton_total",
            "newton_max",
            "lp1_final",
            "energy_max_increase",
            "boundary_max",
        ],
    );
    for (&eps, traj) in cfg.eps.iter().zip(&trajs) {
        let (total, max) = newton_totals(traj);
        let e = energy_functionals(traj, cfg.p);
        let boundary = traj.boundary_max();
        t.push(vec![
            num(eps),
            grid.n_t.into(),
            total.into(),
            max.into(),
            num(*e.lp1_norms.last().expect("initial level")),
            num(e.max_increase()),
            num(boundary),
        ]);
        if boundary != 0.0 {
            out.fail(Error::BoundViolated {
                statement: "zero boundary trace of v".into(),
                detail: format!("ε = {eps}: max |v| on ∂Ω = {boundary:e}"),
            });
        }
        out.write(&opts.out, &micro_traj_name(eps), &io::write_traj(traj))?;
    }
    out.tables.push(t);
    Ok(())
}

fn cmd_homog(cfg: &ExperimentConfig, opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let settings = cfg.settings(field.dim())?;
    let grid = micro_grid(cfg, &field)?;
    let (tensor, _) = study_correctors(&field, cfg.p, cfg.r, &settings)?;
    out.write(&opts.out, "ahom.txt", &io::write_ahom(&tensor))?;
    let prob = HomogenizedProblem::new(tensor, cfg.p, &cfg.data, grid);
    let coupling = format!("{:?}", prob.coupling);
    let traj = run(Stepper::homogenized(&prob)?, RunOptions::default())?;
    let (total, max) = newton_totals(&traj);
    let e = energy_functionals(&traj, cfg.p);
    let mut t = Table::new(
        "homog",
        &[
            "t_end",
            "n_t",
            "coupling",
            "newton_total",
            "newton_max",
            "lp1_final",
            "clamped_lookups",
        ],
    );
    t.push(vec![
        num(grid.t_end),
        grid.n_t.into(),
        coupling.into(),
        total.into(),
        max.into(),
        num(*e.lp1_norms.last().expect("initial level")),
        traj.clamped_lookups.into(),
    ]);
    out.tables.push(t);
    out.write(&opts.out, "homog.traj", &io::write_traj(&traj))?;
    Ok(())
}

fn fixture_path(cfg: &ExperimentConfig, opts: &Options) -> Result<Option<PathBuf>, CliError> {
    let Some(name) = &cfg.fixture else {
        return Ok(None);
    };
    let dir = opts.fixtures.clone().ok_or_else(|| {
        CliError::MissingArtifact(format!("fixture \"{name}\" requested but {FIXTURES_ENV} is unset"))
    })?;
    let p = dir.join(format!("{name}.json"));
    if !p.is_file() {
        return Err(CliError::MissingArtifact(format!("fixture {}", p.display())));
    }
    Ok(Some(p))
}

fn cmd_converge(cfg: &ExperimentConfig, opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let settings = cfg.settings(field.dim())?;
    let fixture = fixture_path(cfg, opts)?;
    let report = run_convergence_study(&field, cfg.p, cfg.r, &cfg.eps, &cfg.data, &settings)?;
    for p in io::write_study(&report, &opts.out, "converge")? {
        out.files.push(p);
    }
    let mut t = Table::new(
        "errors",
        &[
            "eps",
            "sol_err",
            "sol_err_rho1",
            "grad_corr_err",
            "flux_corr_err",
            "dtime_corr_err",
            "grad_plain_err",
            "flux_plain_err",
        ],
    );
    for r in &report.rows {
        t.push(
            [
                r.eps,
                r.sol_err,
                r.sol_err_rho1,
                r.grad_corr_err,
                r.flux_corr_err,
                r.dtime_corr_err,
                r.grad_plain_err,
                r.flux_plain_err,
            ]
            .into_iter()
            .map(num)
            .collect(),
        );
    }
    out.tables.push(t);
    let mut rates = Table::new("rates", &["column", "fitted_rate", "strictly_decreasing"]);
    let rr = &report.rates;
    let m = &report.monotone;
    for (name, rate, mono) in [
        ("sol_err", rr.sol_err, Some(m.sol_err)),
        ("grad_corr_err", rr.grad_corr_err, Some(m.grad_corr_err)),
        ("flux_corr_err", rr.flux_corr_err, Some(m.flux_corr_err)),
        ("dtime_corr_err", rr.dtime_corr_err, Some(m.dtime_corr_err)),
        ("grad_plain_err", rr.grad_plain_err, None),
        ("flux_plain_err", rr.flux_plain_err, None),
    ] {
        rates.push(vec![
            name.into(),
            rate.map_or(Value::Null, num),
            mono.map_or(Value::Null, Value::from),
        ]);
    }
    out.tables.push(rates);
    let mut limits = Table::new("plain_limits", &["column", "two_scale_limit"]);
    limits.push(vec!["grad_plain_err".into(), num(report.grad_plain_limit)]);
    limits.push(vec!["flux_plain_err".into(), num(report.flux_plain_limit)]);
    out.tables.push(limits);
    if let Some(a) = &report.audit {
        out.tables.push(estimates_table(&a.checks));
    }
    out.notes.push(ACCEPTANCE_NOTE.into());
    if report.is_trivial() {
        out.notes
            .push("micro and homogenized problems coincide; rates undefined".into());
    }
    if let Some(cause) = &report.partial {
        out.fail(CliError::Solver(Error::Invalid(format!("partial report: {cause}"))));
    }
    if let Err(e) = report.check(opts.strict_rates) {
        out.fail(e);
    }
    if let Some(p) = fixture {
        let fx = Fixture::load(&p)?;
        if let Err(e) = check_plain_floor(&report, &fx) {
            out.fail(e);
        }
        out.notes.push(format!(
            "fixture {}: plain gradient floor {:e}",
            fx.name, fx.grad_plain_floor
        ));
    }
    Ok(())
}

fn load_traj(path: &Path) -> Result<SpaceTimeField, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    let t = io::parse_traj(&text)?;
    if t.variable != Variable::V {
        return Err(CliError::Config(format!("{}: expected a v-trajectory", path.display())));
    }
    Ok(t)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn cmd_corrector(cfg: &ExperimentConfig, _opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let settings = cfg.settings(field.dim())?;
    let (tensor, cells) = study_correctors(&field, cfg.p, cfg.r, &settings)?;
    let (homog, micro) = match &cfg.trajectories {
        Some(dir) => {
            let h = load_traj(&dir.join("homog.traj"))?;
            let m = cfg
                .eps
                .iter()
                .map(|&e| load_traj(&dir.join(micro_traj_name(e))))
                .collect::<Result<Vec<_>, _>>()?;
            (h, m)
        }
        None => {
            let grid = micro_grid(cfg, &field)?;
            let prob = HomogenizedProblem::new(tensor, cfg.p, &cfg.data, grid);
            let h = run(Stepper::homogenized(&prob)?, RunOptions::default())?;
            (h, solve_micro_all(cfg, &field, grid, RunOptions::default())?)
        }
    };
    corrector_table(cfg, &field, &cells, &homog, &micro, out)
}

fn corrector_table(
    cfg: &ExperimentConfig,
    field: &PeriodicMatrixField,
    cells: &CorrectorSet,
    homog: &SpaceTimeField,
    micro: &[SpaceTimeField],
    out: &mut Outcome,
) -> Result<(), CliError> {
    let mut t = Table::new(
        "corrector",
        &[
            "eps",
            "grad_corr_err",
            "flux_corr_err",
            "dtime_corr_err",
            "grad_plain_err",
        ],
    );
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for (&eps, traj) in cfg.eps.iter().zip(micro) {
        let d = trajectory_defects(traj, homog, cells, field, cfg.p, cfg.r, eps)?;
        cols[0].push(d.grad_corr);
        cols[1].push(d.flux_corr);
        cols[2].push(d.dtime_corr);
        t.push(vec![
            num(eps),
            num(d.grad_corr),
            num(d.flux_corr),
            num(d.dtime_corr),
            num(d.grad_plain),
        ]);
    }
    out.tables.push(t);
    let trivial = cols.iter().flatten().all(|&x| x <= 10.0 * NEWTON_TOL);
    if trivial {
        out.notes
            .push("all defects at solver tolerance (constant coefficients)".into());
        return Ok(());
    }
    for (col, statement) in cols.iter().zip([
        "gradient corrector convergence",
        "flux corrector convergence",
        "time-derivative corrector convergence",
    ]) {
        if !strictly_decreasing(col) {
            out.fail(Error::BoundViolated {
                statement: statement.into(),
                detail: "defects not strictly decreasing along the ε list".into(),
            });
        }
    }
    Ok(())
}

fn estimates_table(checks: &[harness::EstimateCheck]) -> Table {
    let mut t = Table::new("estimates", &["statement", "eps", "value", "bound", "passed"]);
    for c in checks {
        t.push(vec![
            c.statement.clone().into(),
            c.eps.map_or(Value::Null, num),
            num(c.value),
            num(c.bound),
            c.passed.into(),
        ]);
    }
    t
}

/// Second initial datum of the contraction test: the first one halved.
fn perturbed(data: &DataSpec) -> DataSpec {
    let amplitude = match data.u0 {
        InitialDatum::Zero => 0.5,
        InitialDatum::Sine { amplitude } => 0.5 * amplitude,
    };
    DataSpec {
        u0: InitialDatum::Sine { amplitude },
        f: data.f.clone(),
    }
}

fn cmd_audit(cfg: &ExperimentConfig, _opts: &Options, out: &mut Outcome) -> Result<(), CliError> {
    let field = cfg.field()?;
    let grid = micro_grid(cfg, &field)?;
    let trajs = solve_micro_all(
        cfg,
        &field,
        grid,
        RunOptions {
            stride: grid.n_t,
            audit: true,
        },
    )?;
    let series: Vec<(f64, &[oscidiff::pdesolve::StepDiagnostics])> = cfg
        .eps
        .iter()
        .zip(&trajs)
        .map(|(&e, t)| (e, t.diagnostics.as_slice()))
        .collect();
    let report = harness::uniform_estimate_report(&series, cfg.p, field.lambda(), field.lambda_max(), grid.dt());
    out.tables.push(estimates_table(&report.checks));
    if let Some(c) = report.first_failure() {
        out.fail(Error::BoundViolated {
            statement: c.statement.clone(),
            detail: format!(
                "ε = {:?}: value {:e} exceeds bound {:e} (+10%)",
                c.eps, c.value, c.bound
            ),
        });
    }

    if cfg.data.f == SourceTerm::Zero {
        let mut t = Table::new("energy", &["eps", "max_increase", "initial_energy", "passed"]);
        for (&eps, traj) in cfg.eps.iter().zip(&trajs) {
            let e = energy_functionals(traj, cfg.p);
            let e0 = e.energy[0];
            let inc = e.max_increase();
            let passed = inc <= 1e-13 * e0.max(f64::MIN_POSITIVE);
            t.push(vec![num(eps), num(inc), num(e0), passed.into()]);
            if !passed {
                out.fail(Error::BoundViolated {
                    statement: "energy dissipation without source".into(),
                    detail: format!("ε = {eps}: E increased by {inc:e}"),
                });
            }
        }
        out.tables.push(t);
    }

    let other = perturbed(&cfg.data);
    let reports = cfg
        .eps
        .par_iter()
        .map(|&eps| contraction_test(&field, eps, cfg.r, cfg.p, &cfg.data, &other, grid))
        .collect::<oscidiff::Result<Vec<_>>>()?;
    let mut t = Table::new("contraction", &["eps", "initial", "sup", "constant", "passed"]);
    for r in &reports {
        t.push(vec![
            num(r.eps),
            num(r.initial),
            num(r.sup),
            num(r.constant),
            r.passed.into(),
        ]);
        if !r.passed {
            out.fail(Error::BoundViolated {
                statement: "contraction in H⁻¹ under a change of initial datum".into(),
                detail: format!(
                    "ε = {}: sup {:e} exceeds {:e} × initial {:e}",
                    r.eps, r.sup, r.constant, r.initial
                ),
            });
        }
    }
    out.tables.push(t);
    Ok(())
}
