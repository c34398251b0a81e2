//! ε-sequence experiments: solution error against the homogenized limit,
//! corrector defects for gradient, flux and time derivative, and the audit of
//! the ε-uniform a priori estimates.
//!
//! Convergence is asserted through strict decrease along the ε list; fitted
//! rates are reported and only checked in strict mode.

use crate::cellsolve::{CellSolution, CorrectorSet, Regime};
use crate::effmat::{self, table_weights, EffectiveTensor};
use crate::error::{Error, Result};
use crate::fields::{sample_oscillating, CellGrid, MacroGrid, PeriodicMatrixField};
use crate::pdesolve::{
    is_dyadic, slot_means, slot_nodes, DataSpec, HomogenizedProblem, MicroProblem, SpaceTimeField, StepDiagnostics,
    Stepper,
};
use crate::stencil::Stencil;
use crate::tensor::Tensor;
use crate::NEWTON_TOL;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Labels the acceptance logic in every report.
pub const ACCEPTANCE_NOTE: &str =
    "no rates in ε are known; convergence is witnessed by strict decrease along the ε list";

/// Slack of the uniform-estimate audit.
pub const ESTIMATE_SLACK: f64 = 0.10;
/// Minimal fitted rate in strict mode.
pub const STRICT_RATE: f64 = 0.5;

fn default_keys() -> Vec<f64> {
    effmat::default_table_keys()
}

/// Discretization of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    /// Interior nodes per direction of the common macroscopic grid.
    pub n_x: usize,
    pub t_end: f64,
    /// Backward Euler steps per temporal period at the finest ε.
    pub steps_per_period: usize,
    pub min_steps: usize,
    pub cell: CellGrid,
    /// Overrides the regime derived from `(r, p)`.
    #[serde(default)]
    pub regime: Option<Regime>,
    #[serde(default = "default_keys")]
    pub table_keys: Vec<f64>,
    /// Record `H⁻¹` norms of `∂_t u` and `f` for the estimate audit.
    #[serde(default)]
    pub audit: bool,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            n_x: 255,
            t_end: 0.25,
            steps_per_period: 16,
            min_steps: 64,
            cell: CellGrid::default_for(1),
            regime: None,
            table_keys: default_keys(),
            audit: false,
        }
    }
}

impl StudySettings {
    /// Same study at twice the macroscopic resolution in space and time.
    pub fn doubled(&self) -> Self {
        StudySettings {
            n_x: 2 * (self.n_x + 1) - 1,
            steps_per_period: 2 * self.steps_per_period,
            min_steps: 2 * self.min_steps,
            ..self.clone()
        }
    }

    pub fn n_t(&self, eps_min: f64, r: f64) -> usize {
        let periods = self.t_end / eps_min.powf(r);
        ((self.steps_per_period as f64 * periods).ceil() as usize).max(self.min_steps)
    }

    pub fn macro_grid(&self, dim: usize, eps_min: f64, r: f64) -> Result<MacroGrid> {
        MacroGrid::new(dim, self.n_x, self.t_end, self.n_t(eps_min, r))
    }
}

/// Checks an ε list: dyadic entries, strictly decreasing.
pub fn validate_eps_list(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::invalid("empty ε list"));
    }
    if let Some(e) = eps.iter().find(|&&e| !is_dyadic(e)) {
        return Err(Error::invalid(format!("ε = {e} is not of the form 1/2^m")));
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("ε list must be strictly decreasing"));
    }
    Ok(())
}

/// Squared defects of one time level (or their time integrals).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Defects {
    pub grad_corr: f64,
    pub flux_corr: f64,
    pub dtime_corr: f64,
    pub grad_plain: f64,
    pub flux_plain: f64,
}

impl Defects {
    fn add_scaled(&mut self, o: &Defects, w: f64) {
        self.grad_corr += w * o.grad_corr;
        self.flux_corr += w * o.flux_corr;
        self.dtime_corr += w * o.dtime_corr;
        self.grad_plain += w * o.grad_plain;
        self.flux_plain += w * o.flux_plain;
    }
}

/// Fast variables of a macroscopic point.
#[inline]
fn fast(x: [f64; 2], t: f64, eps: f64, r: f64) -> ([f64; 2], f64) {
    ([x[0] / eps, x[1] / eps], t / eps.powf(r))
}

/// Defects at one time level.
///
/// `a_eps` and `a_hom` are slot coefficients; `u0abs` the slot means of
/// `|u₀|` selecting the critical corrector. Without `a_hom` the plain flux
/// defect is left at 0.
#[allow(clippy::too_many_arguments)]
pub fn level_defects(
    st: &Stencil,
    v_eps: &[f64],
    v_0: &[f64],
    a_eps: &[Tensor],
    a_hom: Option<&[Tensor]>,
    cells: &CorrectorSet,
    u0abs: &[f64],
    eps: f64,
    r: f64,
    t: f64,
) -> Result<Defects> {
    let dim = st.dim;
    let corr: Vec<[[f64; 2]; 2]> = st
        .coef_points
        .iter()
        .zip(u0abs)
        .map(|(&x, &u)| {
            let (y, s) = fast(x, t, eps, r);
            cells.grads(u, y, s)
        })
        .collect();
    let mut d = Defects::default();
    let mut flux = Vec::with_capacity(st.elements.len());
    for e in &st.elements {
        let slot = e.coef as usize;
        let ge = st.grad(e, v_eps);
        let g0 = st.grad(e, v_0);
        let c = &corr[slot];
        let mut defect = [0.0; 2];
        let mut plain = [0.0; 2];
        for i in 0..dim {
            plain[i] = ge[i] - g0[i];
            defect[i] = plain[i] - (0..dim).map(|k| g0[k] * c[k][i]).sum::<f64>();
        }
        let a = &a_eps[slot];
        let fd = a.apply(defect);
        d.grad_corr += e.weight * (defect[0] * defect[0] + defect[1] * defect[1]);
        d.grad_plain += e.weight * (plain[0] * plain[0] + plain[1] * plain[1]);
        d.flux_corr += e.weight * (fd[0] * fd[0] + fd[1] * fd[1]);
        if let Some(ah) = a_hom {
            let je = a.apply(ge);
            let jh = ah[slot].apply(g0);
            d.flux_plain += e.weight * ((je[0] - jh[0]).powi(2) + (je[1] - jh[1]).powi(2));
        }
        flux.push(fd);
    }
    d.dtime_corr = divergence_hminus1_sq(st, &flux)?;
    Ok(d)
}

/// `‖div F‖²_{H⁻¹}` for an element-wise flux `F`. In 1D this is the squared
/// `L²` norm of `F` minus its mean; in 2D a Dirichlet Poisson solve.
pub fn divergence_hminus1_sq(st: &Stencil, flux: &[[f64; 2]]) -> Result<f64> {
    if st.dim == 1 {
        let total: f64 = st.elements.iter().map(|e| e.weight).sum();
        let mean = st.elements.iter().zip(flux).map(|(e, f)| e.weight * f[0]).sum::<f64>() / total;
        return Ok(st
            .elements
            .iter()
            .zip(flux)
            .map(|(e, f)| e.weight * (f[0] - mean).powi(2))
            .sum());
    }
    divergence_hminus1_sq_poisson(st, flux)
}

/// `‖div F‖²_{H⁻¹}` through the discrete Poisson solve, any dimension.
pub fn divergence_hminus1_sq_poisson(st: &Stencil, flux: &[[f64; 2]]) -> Result<f64> {
    let n = st.n;
    let nx = (n as f64).powf(1.0 / st.dim as f64).round() as usize - 2;
    let grid = MacroGrid {
        dim: st.dim,
        n_x: nx,
        t_end: 1.0,
        n_t: 4,
    };
    let mut w = vec![0.0; n];
    st.scatter_flux(flux, &mut w);
    let vol = st.cell_volume();
    // div_h F = −(Σ_e w_e G_eᵀ F_e)/vol
    w.iter_mut().for_each(|x| *x = -*x / vol);
    Ok(crate::pdesolve::hminus1_norm(&w, &grid)?.powi(2))
}

fn expected_regime(field: &PeriodicMatrixField, cells: &CorrectorSet, p: f64, r: f64) -> Result<()> {
    let want = Regime::from_exponents(r, p).map_err(|e| Error::RegimeMismatch(e.to_string()))?;
    let have = cells.regime();
    if have == want || field.is_s_independent() && !have.is_critical() && !want.is_critical() {
        return Ok(());
    }
    if have == Regime::Classical && field.is_s_independent() {
        return Ok(());
    }
    Err(Error::RegimeMismatch(format!(
        "correctors are {} but (r, p) = ({r}, {p}) selects {}",
        have.name(),
        want.name()
    )))
}

/// Time integral of [`level_defects`] over two stored trajectories (every
/// level stored): the three corrector defects and the plain gradient error
/// (the plain flux error needs `a_hom` and stays 0).
pub fn trajectory_defects(
    u_eps: &SpaceTimeField,
    u_0: &SpaceTimeField,
    cells: &CorrectorSet,
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps: f64,
) -> Result<Defects> {
    expected_regime(field, cells, p, r)?;
    if u_eps.grid != u_0.grid || u_eps.levels != u_0.levels {
        return Err(Error::DimensionMismatch("trajectories live on different grids".into()));
    }
    if cells.dim() != u_eps.grid.dim || field.dim() != u_eps.grid.dim {
        return Err(Error::DimensionMismatch(
            "corrector and trajectory dimensions differ".into(),
        ));
    }
    let grid = u_eps.grid;
    if u_eps.levels.len() != grid.n_t + 1 {
        return Err(Error::invalid("corrector defects need every time level stored"));
    }
    let st = Stencil::dirichlet_macro(&grid);
    let nodes = slot_nodes(&st);
    let dt = grid.dt();
    let per_level: Vec<Defects> = (1..=grid.n_t)
        .into_par_iter()
        .map(|n| {
            let t = grid.time(n);
            let a_eps: Vec<Tensor> = st
                .coef_points
                .iter()
                .map(|&x| sample_oscillating(field, x, t, eps, r))
                .collect();
            let u0abs = slot_means(&nodes, &u_0.u_at(n));
            level_defects(
                &st,
                &u_eps.v_at(n),
                &u_0.v_at(n),
                &a_eps,
                None,
                cells,
                &u0abs,
                eps,
                r,
                t,
            )
        })
        .collect::<Result<_>>()?;
    let mut total = Defects::default();
    for d in &per_level {
        total.add_scaled(d, dt);
    }
    Ok(total)
}

/// `∫∫ |∇v_ε − ∇v₀ − Σ_k ∂_k v₀ ∇_yΦ_k(x/ε, t/ε^r)|²` over stored
/// trajectories (every level stored).
pub fn corrector_error(
    u_eps: &SpaceTimeField,
    u_0: &SpaceTimeField,
    cells: &CorrectorSet,
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps: f64,
) -> Result<f64> {
    trajectory_defects(u_eps, u_0, cells, field, p, r, eps).map(|d| d.grad_corr)
}

/// `∫ ‖j_ε − a_ε(∇v₀ + Σ_k ∂_k v₀ ∇_yΦ_k)‖²_{L²} dt`.
pub fn flux_corrector_error(
    u_eps: &SpaceTimeField,
    u_0: &SpaceTimeField,
    cells: &CorrectorSet,
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps: f64,
) -> Result<f64> {
    trajectory_defects(u_eps, u_0, cells, field, p, r, eps).map(|d| d.flux_corr)
}

/// `∫ ‖∂_t u_ε − ∂_t u₀ − div[a_ε(∇v₀ + Σ_k ∂_k v₀ ∇_yΦ_k) − j_hom]‖²_{H⁻¹} dt`,
/// evaluated as the `H⁻¹` norm of the divergence of the flux defect.
pub fn time_derivative_corrector_error(
    u_eps: &SpaceTimeField,
    u_0: &SpaceTimeField,
    cells: &CorrectorSet,
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps: f64,
) -> Result<f64> {
    trajectory_defects(u_eps, u_0, cells, field, p, r, eps).map(|d| d.dtime_corr)
}

/// Cell averages `⟨∇Φ_k·∇Φ_l⟩` and `⟨a(e_k+∇Φ_k)·a(e_l+∇Φ_l)⟩`.
pub fn flux_gram(cells: &[CellSolution], field: &PeriodicMatrixField) -> Tensor {
    let dim = field.dim();
    let grid = cells[0].grid;
    let st = Stencil::periodic_cell(dim, grid.m_y);
    let slices = if field.is_s_independent() { 1 } else { grid.m_s };
    let mut g = Tensor::zeros(dim);
    for j in 0..slices {
        let coef = st.cell_coefficients(field, &grid, grid.s_center(j));
        let grads: Vec<&[[f64; 2]]> = cells.iter().map(|c| c.grad_slice(j % c.n_slices)).collect();
        for (slot, a) in coef.iter().enumerate() {
            let cols: Vec<[f64; 2]> = (0..dim)
                .map(|k| {
                    let mut v = grads[k][slot];
                    v[k] += 1.0;
                    a.apply(v)
                })
                .collect();
            for k in 0..dim {
                for l in 0..dim {
                    g.m[k][l] += cols[k][0] * cols[l][0] + cols[k][1] * cols[l][1];
                }
            }
        }
    }
    g * (1.0 / (slices * st.n_slots()) as f64)
}

/// Two-scale limits of the plain gradient and flux errors as quadratic forms
/// in `∇v₀`, possibly tabulated against `|u₀|`.
#[derive(Clone, Debug)]
struct LimitForms {
    keys: Option<Vec<f64>>,
    grad: Vec<Tensor>,
    flux: Vec<Tensor>,
    ahom: Vec<Tensor>,
}

impl LimitForms {
    fn new(tensor: &EffectiveTensor, cells: &CorrectorSet, field: &PeriodicMatrixField) -> Self {
        let (keys, sets): (Option<Vec<f64>>, Vec<&[CellSolution]>) = match cells {
            CorrectorSet::Fixed(c) => (None, vec![c.as_slice()]),
            CorrectorSet::Table { keys, cells } => (Some(keys.clone()), cells.iter().map(|c| c.as_slice()).collect()),
        };
        LimitForms {
            keys,
            grad: tensor.corrector_gram.clone(),
            flux: sets.iter().map(|c| flux_gram(c, field)).collect(),
            ahom: tensor.matrices(),
        }
    }

    fn pick(&self, v: &[Tensor], u: f64) -> Tensor {
        match &self.keys {
            None => v[0],
            Some(k) => {
                let (i, th, _) = table_weights(k, u);
                if th == 0.0 {
                    v[i]
                } else {
                    v[i] * (1.0 - th) + v[i + 1] * th
                }
            }
        }
    }

    /// `(⟨|Σ ξ_k∇Φ_k|²⟩, ⟨|a(ξ+Σξ_k∇Φ_k)|²⟩ − |a_hom ξ|²)` at `ξ`.
    fn eval(&self, u: f64, xi: [f64; 2]) -> (f64, f64) {
        let g = self.pick(&self.grad, u).quad(xi);
        let f = self.pick(&self.flux, u).quad(xi);
        let j = self.pick(&self.ahom, u).apply(xi);
        (g, (f - j[0] * j[0] - j[1] * j[1]).max(0.0))
    }
}

/// One row of a convergence table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub eps: f64,
    /// `‖u_ε − u₀‖_{L²(0,T;L^{p+1})}`
    pub sol_err: f64,
    /// `‖u_ε − u₀‖_{L¹(0,T;L^{p+1})}`
    pub sol_err_rho1: f64,
    pub grad_corr_err: f64,
    pub flux_corr_err: f64,
    pub dtime_corr_err: f64,
    pub grad_plain_err: f64,
    pub flux_plain_err: f64,
}

pub const CSV_HEADER: &str = "eps,sol_err,grad_corr_err,flux_corr_err,dtime_corr_err,grad_plain_err,flux_plain_err";

/// Fitted log-log slopes; `None` where undefined (non-positive or
/// solver-level errors).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sol_err: Option<f64>,
    pub sol_err_rho1: Option<f64>,
    pub grad_corr_err: Option<f64>,
    pub flux_corr_err: Option<f64>,
    pub dtime_corr_err: Option<f64>,
    pub grad_plain_err: Option<f64>,
    pub flux_plain_err: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub sol_err: bool,
    pub sol_err_rho1: bool,
    pub grad_corr_err: bool,
    pub flux_corr_err: bool,
    pub dtime_corr_err: bool,
}

/// Per-ε solver statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub eps: f64,
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    pub clamped_lookups: usize,
    /// Largest `|v|` on `∂Ω` over all steps.
    pub boundary_max: f64,
}

/// Uniform-estimate checks of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateCheck {
    pub statement: String,
    pub eps: Option<f64>,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UniformEstimateAudit {
    pub checks: Vec<EstimateCheck>,
    pub passed: bool,
}

impl UniformEstimateAudit {
    pub fn first_failure(&self) -> Option<&EstimateCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub field_id: String,
    pub p: f64,
    pub r: f64,
    pub regime: Regime,
    pub data: DataSpec,
    pub settings: StudySettings,
    pub grid: MacroGrid,
    pub eps: Vec<f64>,
    pub rows: Vec<ErrorRow>,
    pub rates: Rates,
    pub monotone: Monotonicity,
    /// Two-scale limits of the plain gradient and flux errors, computed from
    /// the homogenized solution and the cell correctors.
    pub grad_plain_limit: f64,
    pub flux_plain_limit: f64,
    pub runs: Vec<RunSummary>,
    pub audit: Option<UniformEstimateAudit>,
    /// Set when the study stopped early; rows then cover the solved ε only.
    pub partial: Option<String>,
    pub note: String,
}

fn fit_rate(eps: &[f64], err: &[f64]) -> Option<f64> {
    if eps.len() < 2 || err.iter().any(|&e| !(e > 10.0 * NEWTON_TOL) || !e.is_finite()) {
        return None;
    }
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.len() >= 2 && v.windows(2).all(|w| w[1] < w[0])
}

impl ConvergenceReport {
    fn column(&self, f: impl Fn(&ErrorRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    fn finish(&mut self) {
        let eps = self.column(|r| r.eps);
        let cols: [Vec<f64>; 7] = [
            self.column(|r| r.sol_err),
            self.column(|r| r.sol_err_rho1),
            self.column(|r| r.grad_corr_err),
            self.column(|r| r.flux_corr_err),
            self.column(|r| r.dtime_corr_err),
            self.column(|r| r.grad_plain_err),
            self.column(|r| r.flux_plain_err),
        ];
        self.rates = Rates {
            sol_err: fit_rate(&eps, &cols[0]),
            sol_err_rho1: fit_rate(&eps, &cols[1]),
            grad_corr_err: fit_rate(&eps, &cols[2]),
            flux_corr_err: fit_rate(&eps, &cols[3]),
            dtime_corr_err: fit_rate(&eps, &cols[4]),
            grad_plain_err: fit_rate(&eps, &cols[5]),
            flux_plain_err: fit_rate(&eps, &cols[6]),
        };
        self.monotone = Monotonicity {
            sol_err: strictly_decreasing(&cols[0]),
            sol_err_rho1: strictly_decreasing(&cols[1]),
            grad_corr_err: strictly_decreasing(&cols[2]),
            flux_corr_err: strictly_decreasing(&cols[3]),
            dtime_corr_err: strictly_decreasing(&cols[4]),
        };
    }

    /// CSV with the fixed header; values in shortest round-trip form.
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.eps,
                r.sol_err,
                r.grad_corr_err,
                r.flux_corr_err,
                r.dtime_corr_err,
                r.grad_plain_err,
                r.flux_plain_err
            ));
        }
        s
    }

    /// Largest error among the solution and corrector columns.
    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.sol_err, r.grad_corr_err, r.flux_corr_err, r.dtime_corr_err])
            .fold(0.0, f64::max)
    }

    /// Whether every field entry is constant, i.e. micro and homogenized
    /// problems coincide and rates are undefined by construction.
    pub fn is_trivial(&self) -> bool {
        self.max_error() <= 10.0 * NEWTON_TOL
    }

    /// Asserts the convergence statements: strict decrease of the solution
    /// error and of the three corrector defects (and, in strict mode, fitted
    /// rates ≥ 0.5).
    pub fn check(&self, strict_rates: bool) -> Result<()> {
        if let Some(cause) = &self.partial {
            return Err(Error::BoundViolated {
                statement: "complete convergence study".into(),
                detail: cause.clone(),
            });
        }
        if self.is_trivial() {
            return Ok(());
        }
        let items = [
            (
                "homogenization convergence of the solution",
                self.monotone.sol_err,
                self.rates.sol_err,
            ),
            (
                "gradient corrector convergence",
                self.monotone.grad_corr_err,
                self.rates.grad_corr_err,
            ),
            (
                "flux corrector convergence",
                self.monotone.flux_corr_err,
                self.rates.flux_corr_err,
            ),
            (
                "time-derivative corrector convergence",
                self.monotone.dtime_corr_err,
                self.rates.dtime_corr_err,
            ),
        ];
        for (statement, mono, rate) in items {
            if !mono {
                return Err(Error::BoundViolated {
                    statement: statement.into(),
                    detail: "errors not strictly decreasing along the ε list".into(),
                });
            }
            if strict_rates && rate.is_none_or(|r| r < STRICT_RATE) {
                return Err(Error::BoundViolated {
                    statement: statement.into(),
                    detail: format!("fitted rate {rate:?} below {STRICT_RATE}"),
                });
            }
        }
        if let Some(a) = &self.audit {
            if let Some(c) = a.first_failure() {
                return Err(Error::BoundViolated {
                    statement: c.statement.clone(),
                    detail: format!("value {:e} exceeds bound {:e}", c.value, c.bound),
                });
            }
        }
        Ok(())
    }
}

struct EpsRun {
    eps: f64,
    stepper: Stepper,
    sol2: f64,
    sol1: f64,
    defects: Defects,
    diagnostics: Vec<StepDiagnostics>,
    newton: usize,
    newton_max: usize,
    boundary_max: f64,
    failure: Option<Error>,
}

/// Homogenized matrix and correctors of a study.
pub fn study_correctors(
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    settings: &StudySettings,
) -> Result<(EffectiveTensor, CorrectorSet)> {
    let regime = match settings.regime {
        Some(g) => g,
        None => Regime::from_exponents(r, p)?,
    };
    if regime.is_critical() {
        return effmat::tabulate_critical(field, &settings.cell, p, &settings.table_keys);
    }
    let (t, cells) = effmat::homogenized_matrix(regime, field, &settings.cell, None)?;
    Ok((t, CorrectorSet::Fixed(cells)))
}

/// Solves the oscillating problem for every ε and the homogenized problem
/// once, in lockstep on a common grid, accumulating all error functionals.
pub fn run_convergence_study(
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps_list: &[f64],
    data: &DataSpec,
    settings: &StudySettings,
) -> Result<ConvergenceReport> {
    validate_eps_list(eps_list)?;
    let eps_min = *eps_list.last().expect("validated");
    if (settings.n_x + 1) as f64 * eps_min < 8.0 {
        return Err(Error::invalid(format!(
            "n_x = {} gives fewer than 8 grid points per period at ε = {eps_min}",
            settings.n_x
        )));
    }
    let dim = field.dim();
    let grid = settings.macro_grid(dim, eps_min, r)?;
    let (tensor, cells) = study_correctors(field, p, r, settings)?;
    let regime = tensor.regime;
    let limits = LimitForms::new(&tensor, &cells, field);

    let hom = HomogenizedProblem::new(tensor, p, data, grid);
    let mut hstep = Stepper::homogenized(&hom)?;
    let mut runs: Vec<EpsRun> = eps_list
        .iter()
        .map(|&eps| {
            let prob = MicroProblem::new(field.clone(), eps, r, p, data, grid);
            let stepper = Stepper::micro(&prob)?;
            let d0 = stepper.diagnostics(settings.audit)?;
            Ok(EpsRun {
                eps,
                stepper,
                sol2: 0.0,
                sol1: 0.0,
                defects: Defects::default(),
                diagnostics: vec![d0],
                newton: 0,
                newton_max: 0,
                boundary_max: 0.0,
                failure: None,
            })
        })
        .collect::<Result<_>>()?;

    let st = Stencil::dirichlet_macro(&grid);
    let vol = st.cell_volume();
    let dt = grid.dt();
    let (mut grad_limit, mut flux_limit) = (0.0, 0.0);
    let mut clamped = 0;
    let mut partial = None;
    for n in 1..=grid.n_t {
        match hstep.step() {
            Ok(info) => clamped += info.clamped,
            Err(e) => {
                partial = Some(format!("homogenized solve failed at step {n}: {e}"));
                break;
            }
        }
        let t = grid.time(n);
        let u0abs = hstep.slot_mean_abs_u();
        for e in &st.elements {
            let slot = e.coef as usize;
            let g0 = st.grad(e, hstep.v());
            let (g, f) = limits.eval(u0abs[slot], g0);
            grad_limit += dt * e.weight * g;
            flux_limit += dt * e.weight * f;
        }
        let h = &hstep;
        let cells = &cells;
        let u0abs = &u0abs;
        let st = &st;
        runs.par_iter_mut().filter(|run| run.failure.is_none()).for_each(|run| {
            let res = (|| -> Result<()> {
                let info = run.stepper.step()?;
                run.newton += info.iterations;
                run.newton_max = run.newton_max.max(info.iterations);
                let ue = run.stepper.u();
                let u0 = h.u();
                let lp = ue
                    .iter()
                    .zip(u0)
                    .map(|(a, b)| vol * (a - b).abs().powf(p + 1.0))
                    .sum::<f64>()
                    .powf(1.0 / (p + 1.0));
                run.sol2 += dt * lp * lp;
                run.sol1 += dt * lp;
                let d = level_defects(
                    st,
                    run.stepper.v(),
                    h.v(),
                    run.stepper.coefficients(),
                    Some(h.coefficients()),
                    cells,
                    u0abs,
                    run.eps,
                    r,
                    t,
                )?;
                run.defects.add_scaled(&d, dt);
                let v = run.stepper.v();
                for (i, x) in v.iter().enumerate() {
                    if grid.is_boundary(i) {
                        run.boundary_max = run.boundary_max.max(x.abs());
                    }
                }
                run.diagnostics.push(run.stepper.diagnostics(settings.audit)?);
                Ok(())
            })();
            if let Err(e) = res {
                run.failure = Some(e);
            }
        });
        if let Some(run) = runs.iter().find(|r| r.failure.is_some()) {
            partial = Some(format!(
                "micro solve at ε = {} failed: {}",
                run.eps,
                run.failure.as_ref().expect("checked")
            ));
            break;
        }
    }

    let rows: Vec<ErrorRow> = runs
        .iter()
        .filter(|r| r.failure.is_none())
        .map(|r| ErrorRow {
            eps: r.eps,
            sol_err: r.sol2.sqrt(),
            sol_err_rho1: r.sol1,
            grad_corr_err: r.defects.grad_corr,
            flux_corr_err: r.defects.flux_corr,
            dtime_corr_err: r.defects.dtime_corr,
            grad_plain_err: r.defects.grad_plain,
            flux_plain_err: r.defects.flux_plain,
        })
        .collect();
    let summaries = runs
        .iter()
        .map(|r| RunSummary {
            eps: r.eps,
            newton_iterations: r.newton,
            max_newton_iterations: r.newton_max,
            clamped_lookups: clamped,
            boundary_max: r.boundary_max,
        })
        .collect();
    let audit = if settings.audit && partial.is_none() {
        let series: Vec<(f64, &[StepDiagnostics])> = runs.iter().map(|r| (r.eps, r.diagnostics.as_slice())).collect();
        Some(uniform_estimate_report(
            &series,
            p,
            field.lambda(),
            field.lambda_max(),
            dt,
        ))
    } else {
        None
    };
    let mut report = ConvergenceReport {
        field_id: field.id().to_string(),
        p,
        r,
        regime,
        data: data.clone(),
        settings: settings.clone(),
        grid,
        eps: eps_list.to_vec(),
        rows,
        rates: Rates::default(),
        monotone: Monotonicity::default(),
        grad_plain_limit: grad_limit,
        flux_plain_limit: flux_limit,
        runs: summaries,
        audit,
        partial,
        note: ACCEPTANCE_NOTE.to_string(),
    };
    report.finish();
    Ok(report)
}

/// Largest positive root of `X^q − q F X^{q−1} − c`.
pub fn largest_root(q: f64, f: f64, c: f64) -> f64 {
    let g = |x: f64| x.powf(q) - q * f * x.powf(q - 1.0) - c;
    let (mut lo, mut hi) = (0.0, q * f + c.powf(1.0 / q) + 1.0);
    if g(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Checks every run against the data-only right-hand sides of the uniform
/// estimates and checks ε-uniformity (each quantity's maximum over ε within
/// 10% of its value at the finest ε).
///
/// `runs` holds `(ε, diagnostics of levels 0..=n_t)`, finest ε last.
pub fn uniform_estimate_report(
    runs: &[(f64, &[StepDiagnostics])],
    p: f64,
    lambda: f64,
    lambda_max: f64,
    dt: f64,
) -> UniformEstimateAudit {
    let mut checks = Vec::new();
    let tol = 1.0 + ESTIMATE_SLACK;
    let mut push = |statement: &str, eps: Option<f64>, value: f64, bound: f64| {
        checks.push(EstimateCheck {
            statement: statement.to_string(),
            eps,
            value,
            bound,
            passed: value <= tol * bound + 1e-14,
        });
    };
    let mut uniform: Vec<(&str, Vec<f64>)> = vec![
        ("ε-uniform sup-in-time L^{p+1} norm", Vec::new()),
        ("ε-uniform L²(0,T;H¹₀) norm of v", Vec::new()),
        ("ε-uniform L²(0,T;H⁻¹) norm of ∂t u", Vec::new()),
        ("ε-uniform L²(0,T;H¹₀) norm of u", Vec::new()),
    ];
    for &(eps, d) in runs {
        let e = Some(eps);
        let steps = &d[1..];
        let lp1_0 = d[0].lp1_pow;
        let fh2: f64 = steps.iter().map(|s| dt * s.f_hminus1 * s.f_hminus1).sum();
        let sup_lp1 = d.iter().map(|s| s.lp1_pow).fold(0.0, f64::max);
        let grad_v: f64 = steps.iter().map(|s| dt * s.grad_v_sq).sum();
        let audited = steps.iter().any(|s| s.f_hminus1 > 0.0 || s.dtu_hminus1 > 0.0) || fh2 == 0.0;

        push(
            "uniform L^{p+1} bound of the energy estimate",
            e,
            sup_lp1,
            lp1_0 + (p + 1.0) / (2.0 * lambda) * fh2,
        );
        let diss_bound = (2.0 / lambda) * (lp1_0 / (p + 1.0) + fh2 / (2.0 * lambda));
        push(
            "uniform dissipation bound of the energy estimate",
            e,
            grad_v,
            diss_bound,
        );
        if audited {
            let dtu = steps
                .iter()
                .map(|s| dt * s.dtu_hminus1 * s.dtu_hminus1)
                .sum::<f64>()
                .sqrt();
            push(
                "uniform time-derivative bound",
                e,
                dtu,
                lambda_max * grad_v.sqrt() + fh2.sqrt(),
            );
            push(
                "uniform time-derivative bound (data only)",
                e,
                dtu,
                lambda_max * diss_bound.sqrt() + fh2.sqrt(),
            );
            uniform[2].1.push(dtu);
        }
        if p < 1.0 {
            let f2: f64 = steps.iter().map(|s| dt * s.f_l2).sum();
            let x = f2 + (f2 * f2 + d[0].l2_sq).sqrt();
            let sup_l2 = d.iter().map(|s| s.l2_sq).fold(0.0, f64::max);
            push("uniform L² bound for fast diffusion", e, sup_l2.sqrt(), x);
        }
        let q = 3.0 - p;
        let fq: f64 = steps.iter().map(|s| dt * s.f_l3mp).sum();
        let x = largest_root(q, fq, d[0].l3mp_pow);
        let sup_q = d.iter().map(|s| s.l3mp_pow).fold(0.0, f64::max).powf(1.0 / q);
        push("uniform L^{3-p} bound", e, sup_q, x);
        let grad_u: f64 = steps.iter().map(|s| dt * s.grad_u_sq).sum();
        push(
            "uniform L²(0,T;H¹₀) bound of u",
            e,
            lambda * p * (2.0 - p) * grad_u,
            x.powf(2.0 - p) * fq + d[0].l3mp_pow / q,
        );
        uniform[0].1.push(sup_lp1);
        uniform[1].1.push(grad_v);
        uniform[3].1.push(grad_u);
    }
    for (statement, vals) in uniform {
        if let Some(&finest) = vals.last() {
            let max = vals.iter().copied().fold(0.0, f64::max);
            push(statement, None, max, finest);
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    UniformEstimateAudit { checks, passed }
}

/// [`uniform_estimate_report`] over stored trajectories; fails with the
/// first violated statement.
pub fn audit_uniform_estimates(
    trajs: &[(f64, &SpaceTimeField)],
    p: f64,
    lambda: f64,
    lambda_max: f64,
) -> Result<UniformEstimateAudit> {
    let Some(&(_, first)) = trajs.first() else {
        return Err(Error::invalid("no trajectories to audit"));
    };
    let dt = first.grid.dt();
    let series: Vec<(f64, &[StepDiagnostics])> = trajs.iter().map(|(e, t)| (*e, t.diagnostics.as_slice())).collect();
    let report = uniform_estimate_report(&series, p, lambda, lambda_max, dt);
    if let Some(c) = report.first_failure() {
        return Err(Error::BoundViolated {
            statement: c.statement.clone(),
            detail: format!(
                "ε = {:?}: value {:e} exceeds bound {:e} (+10%)",
                c.eps, c.value, c.bound
            ),
        });
    }
    Ok(report)
}

/// Reference numbers of a study, produced by a doubled-resolution run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub field_id: String,
    pub p: f64,
    pub r: f64,
    pub eps: Vec<f64>,
    pub settings: StudySettings,
    pub rows: Vec<ErrorRow>,
    pub grad_plain_limit: f64,
    pub flux_plain_limit: f64,
    /// Half the two-scale limits: the plain errors must stay above these.
    pub grad_plain_floor: f64,
    pub flux_plain_floor: f64,
}

impl Fixture {
    pub fn from_report(name: &str, report: &ConvergenceReport) -> Self {
        Fixture {
            name: name.to_string(),
            field_id: report.field_id.clone(),
            p: report.p,
            r: report.r,
            eps: report.eps.clone(),
            settings: report.settings.clone(),
            rows: report.rows.clone(),
            grad_plain_limit: report.grad_plain_limit,
            flux_plain_limit: report.flux_plain_limit,
            grad_plain_floor: 0.5 * report.grad_plain_limit,
            flux_plain_floor: 0.5 * report.flux_plain_limit,
        }
    }

    pub fn load(path: &Path) -> Result<Fixture> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Runs a study at doubled resolution and packages it as a fixture.
pub fn make_fixture(
    name: &str,
    field: &PeriodicMatrixField,
    p: f64,
    r: f64,
    eps_list: &[f64],
    data: &DataSpec,
    settings: &StudySettings,
) -> Result<Fixture> {
    let report = run_convergence_study(field, p, r, eps_list, data, &settings.doubled())?;
    if let Some(cause) = report.partial {
        return Err(Error::invalid(format!("fixture run incomplete: {cause}")));
    }
    Ok(Fixture::from_report(name, &report))
}

/// Witness check against a fixture: the plain errors stay above the floor.
pub fn check_plain_floor(report: &ConvergenceReport, fixture: &Fixture) -> Result<()> {
    if !(fixture.grad_plain_floor > 0.0) {
        return Err(Error::BoundViolated {
            statement: "non-convergence of the plain gradient".into(),
            detail: format!("fixture floor {:e} is not positive", fixture.grad_plain_floor),
        });
    }
    for row in &report.rows {
        if !(row.grad_plain_err >= fixture.grad_plain_floor) {
            return Err(Error::BoundViolated {
                statement: "non-convergence of the plain gradient".into(),
                detail: format!(
                    "ε = {}: ‖∇v_ε − ∇v₀‖² = {:e} below floor {:e}",
                    row.eps, row.grad_plain_err, fixture.grad_plain_floor
                ),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldSpec;
    use crate::pdesolve::{run, solve_homogenized, solve_micro, InitialDatum, RunOptions, SourceTerm};

    fn small_settings() -> StudySettings {
        StudySettings {
            n_x: 63,
            t_end: 0.05,
            steps_per_period: 8,
            min_steps: 16,
            cell: CellGrid::new(32, 16).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn eps_list_validation() {
        assert!(validate_eps_list(&[0.25, 0.125]).is_ok());
        assert!(validate_eps_list(&[0.25, 1.0 / 3.0]).is_err());
        assert!(validate_eps_list(&[0.125, 0.25]).is_err());
        assert!(validate_eps_list(&[]).is_err());
    }

    #[test]
    fn constant_field_has_trivial_errors() {
        let f = PeriodicMatrixField::constant(Tensor::from_1d(0.6)).unwrap();
        let rep = run_convergence_study(&f, 0.5, 1.0, &[0.25, 0.125], &DataSpec::default(), &small_settings()).unwrap();
        assert!(rep.is_trivial(), "{:?}", rep.rows);
        assert!(rep.rates.sol_err.is_none());
        rep.check(true).unwrap();
    }

    #[test]
    fn zero_data_gives_zero_defects() {
        let f = PeriodicMatrixField::builtin(FieldSpec::trig1d_study()).unwrap();
        let rep = run_convergence_study(&f, 1.5, 1.0, &[0.25, 0.125], &DataSpec::zero(), &small_settings()).unwrap();
        for r in &rep.rows {
            assert_eq!(r.sol_err, 0.0);
            assert_eq!(r.grad_corr_err, 0.0);
            assert_eq!(r.dtime_corr_err, 0.0);
        }
    }

    #[test]
    fn one_dimensional_identity_matches_poisson_solve() {
        let grid = MacroGrid::new(1, 31, 1.0, 4).unwrap();
        let st = Stencil::dirichlet_macro(&grid);
        let flux: Vec<[f64; 2]> = (0..st.elements.len())
            .map(|i| [(i as f64 * 0.37).sin() + 0.2, 0.0])
            .collect();
        let a = divergence_hminus1_sq(&st, &flux).unwrap();
        let b = divergence_hminus1_sq_poisson(&st, &flux).unwrap();
        assert!((a - b).abs() < 1e-10 * a.max(1.0), "{a} {b}");
    }

    #[test]
    fn trajectory_and_lockstep_defects_agree() {
        let f = PeriodicMatrixField::builtin(FieldSpec::trig1d_study()).unwrap();
        let s = small_settings();
        let (p, r, eps) = (0.5, 1.0, 0.125);
        let rep = run_convergence_study(&f, p, r, &[eps], &DataSpec::default(), &s).unwrap();
        let (tensor, cells) = study_correctors(&f, p, r, &s).unwrap();
        let grid = rep.grid;
        let micro = solve_micro(&MicroProblem::new(f.clone(), eps, r, p, &DataSpec::default(), grid)).unwrap();
        let hom = solve_homogenized(&HomogenizedProblem::new(tensor, p, &DataSpec::default(), grid)).unwrap();
        let g = corrector_error(&micro, &hom, &cells, &f, p, r, eps).unwrap();
        let fl = flux_corrector_error(&micro, &hom, &cells, &f, p, r, eps).unwrap();
        let dt = time_derivative_corrector_error(&micro, &hom, &cells, &f, p, r, eps).unwrap();
        let row = rep.rows[0];
        assert!((g - row.grad_corr_err).abs() <= 1e-12 * g);
        assert!((fl - row.flux_corr_err).abs() <= 1e-12 * fl);
        assert!((dt - row.dtime_corr_err).abs() <= 1e-12 * dt);
        // a strided trajectory is rejected
        let coarse = run(
            Stepper::micro(&MicroProblem::new(f.clone(), eps, r, p, &DataSpec::default(), grid)).unwrap(),
            RunOptions {
                stride: 2,
                audit: false,
            },
        )
        .unwrap();
        assert!(corrector_error(&coarse, &hom, &cells, &f, p, r, eps).is_err());
        // wrong regime
        assert!(matches!(
            corrector_error(&micro, &hom, &cells, &f, p, 3.0, eps),
            Err(Error::RegimeMismatch(_))
        ));
    }

    #[test]
    fn largest_root_examples() {
        // q = 2: F + sqrt(F² + c)
        let x = largest_root(2.0, 0.3, 0.5);
        assert!((x - (0.3 + (0.09f64 + 0.5).sqrt())).abs() < 1e-12);
        // F = 0: c^{1/q}
        assert!((largest_root(2.5, 0.0, 2.0) - 2f64.powf(0.4)).abs() < 1e-12);
    }

    #[test]
    fn audit_of_heat_run_passes_and_zero_run_is_zero() {
        let grid = MacroGrid::new(1, 63, 0.1, 20).unwrap();
        let data = DataSpec {
            u0: InitialDatum::Sine { amplitude: 1.0 },
            f: SourceTerm::Constant { value: 1.0 },
        };
        let f = PeriodicMatrixField::identity(1);
        let t = run(
            Stepper::micro(&MicroProblem::new(f.clone(), 0.25, 1.0, 1.0, &data, grid)).unwrap(),
            RunOptions { stride: 1, audit: true },
        )
        .unwrap();
        let a = audit_uniform_estimates(&[(0.25, &t)], 1.0, 1.0, 1.0).unwrap();
        assert!(a.passed && a.checks.len() >= 6);
        let z = run(
            Stepper::micro(&MicroProblem::new(f, 0.25, 1.0, 0.5, &DataSpec::zero(), grid)).unwrap(),
            RunOptions { stride: 1, audit: true },
        )
        .unwrap();
        let a = audit_uniform_estimates(&[(0.25, &z)], 0.5, 1.0, 1.0).unwrap();
        assert!(a.checks.iter().all(|c| c.value == 0.0));
    }

    #[test]
    fn rate_fit_recovers_power_law() {
        let eps = [0.125, 0.0625, 0.03125];
        let err: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(1.5)).collect();
        assert!((fit_rate(&eps, &err).unwrap() - 1.5).abs() < 1e-12);
        assert!(fit_rate(&eps, &[1.0, 0.0, 1.0]).is_none());
    }
}
