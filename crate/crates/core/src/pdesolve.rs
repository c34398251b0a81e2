//! Backward Euler / Newton solvers for the oscillating problem and its
//! homogenized limit, written in the variable `v = |u|^{p-1}u`:
//!
//! ```text
//! h^N (β(v^{n+1}) − u^n)/Δt + K(t^{n+1}) v^{n+1} = h^N f(t^{n+1}),   β(v) = sign(v)|v|^{1/p}
//! ```
//!
//! with homogeneous Dirichlet data on `∂Ω` (boundary rows are `v = 0`).

use crate::effmat::{EffectiveTensor, TensorData};
use crate::error::{Error, Result};
use crate::fields::{sample_oscillating, MacroGrid, PeriodicMatrixField};
use crate::linalg::{self, CgOptions};
use crate::stencil::Stencil;
use crate::tensor::Tensor;
use crate::{DELTA_REG, NEWTON_TOL, SOLVER_TOL};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

const MAX_NEWTON: usize = 60;
const MAX_PICARD: usize = 200;
const MAX_HALVINGS: usize = 20;
const LINEAR_TOL: f64 = SOLVER_TOL * 1e-2;
/// Absolute stopping floor relative to the size of the step's terms.
const ROUNDOFF_FLOOR: f64 = 1e-14;

pub type InitialFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type SourceFn = Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>;

fn one() -> f64 {
    1.0
}

/// Built-in initial data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDatum {
    Zero,
    /// `amplitude · Π_i sin(π x_i)`.
    Sine {
        #[serde(default = "one")]
        amplitude: f64,
    },
}

/// Built-in source terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceTerm {
    Zero,
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub u0: InitialDatum,
    pub f: SourceTerm,
}

impl Default for DataSpec {
    /// `u⁰ = Π sin(πx_i)`, `f ≡ 1`.
    fn default() -> Self {
        DataSpec {
            u0: InitialDatum::Sine { amplitude: 1.0 },
            f: SourceTerm::Constant { value: 1.0 },
        }
    }
}

impl DataSpec {
    pub fn zero() -> Self {
        DataSpec {
            u0: InitialDatum::Zero,
            f: SourceTerm::Zero,
        }
    }

    pub fn u0_fn(&self, dim: usize) -> InitialFn {
        match self.u0 {
            InitialDatum::Zero => Arc::new(|_| 0.0),
            InitialDatum::Sine { amplitude } => Arc::new(move |x: [f64; 2]| {
                let mut v = amplitude * (PI * x[0]).sin();
                if dim == 2 {
                    v *= (PI * x[1]).sin();
                }
                v
            }),
        }
    }

    pub fn f_fn(&self) -> SourceFn {
        match self.f {
            SourceTerm::Zero => Arc::new(|_, _| 0.0),
            SourceTerm::Constant { value } => Arc::new(move |_, _| value),
        }
    }
}

/// Which variable a trajectory stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    U,
    V,
}

/// Scalars recorded after every step (and for the initial state).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    /// `‖u‖^{p+1}_{L^{p+1}}`
    pub lp1_pow: f64,
    /// `‖u‖²_{L²}`
    pub l2_sq: f64,
    /// `‖u‖^{3−p}_{L^{3−p}}`
    pub l3mp_pow: f64,
    /// `‖∇v‖²_{L²}`
    pub grad_v_sq: f64,
    /// `‖∇u‖²_{L²}`
    pub grad_u_sq: f64,
    /// `∫ a∇v·∇v` at the step's coefficient.
    pub dissipation: f64,
    /// `∫ f v`
    pub work: f64,
    /// `‖(u^n − u^{n−1})/Δt‖_{H⁻¹}` (0 for the initial state or when not audited).
    pub dtu_hminus1: f64,
    /// `‖f(t_n)‖_{H⁻¹}` (audited runs only).
    pub f_hminus1: f64,
    pub f_l2: f64,
    /// `‖f(t_n)‖_{L^{3−p}}`
    pub f_l3mp: f64,
    pub newton_iterations: usize,
    pub residual: f64,
}

/// Trajectory on a macroscopic grid; `values[l]` holds the nodes at step
/// `levels[l]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub grid: MacroGrid,
    pub variable: Variable,
    pub p: f64,
    pub levels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    /// One entry per step `0..=n_t`.
    pub diagnostics: Vec<StepDiagnostics>,
    /// Number of table lookups clamped to the hull (critical coupling).
    pub clamped_lookups: usize,
}

impl SpaceTimeField {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().expect("non-empty trajectory")
    }

    /// `u = sign(v)|v|^{1/p}` at stored level `l`.
    pub fn u_at(&self, l: usize) -> Vec<f64> {
        match self.variable {
            Variable::U => self.values[l].clone(),
            Variable::V => self.values[l].iter().map(|&v| beta(v, self.p)).collect(),
        }
    }

    pub fn v_at(&self, l: usize) -> Vec<f64> {
        match self.variable {
            Variable::V => self.values[l].clone(),
            Variable::U => self.values[l].iter().map(|&u| v_of_u(u, self.p)).collect(),
        }
    }

    /// Largest `|v|` on the boundary over all stored levels.
    pub fn boundary_max(&self) -> f64 {
        let mut m: f64 = 0.0;
        for vals in &self.values {
            for (i, x) in vals.iter().enumerate() {
                if self.grid.is_boundary(i) {
                    m = m.max(x.abs());
                }
            }
        }
        m
    }
}

#[inline]
pub fn beta(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        v
    } else {
        v.signum() * v.abs().powf(1.0 / p)
    }
}

#[inline]
fn beta_prime(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        1.0
    } else {
        v.abs().max(DELTA_REG).powf(1.0 / p - 1.0) / p
    }
}

#[inline]
pub fn v_of_u(u: f64, p: f64) -> f64 {
    if p == 1.0 {
        u
    } else {
        u.signum() * u.abs().powf(p)
    }
}

pub fn is_dyadic(eps: f64) -> bool {
    if !(eps > 0.0 && eps <= 1.0) {
        return false;
    }
    let m = -eps.log2();
    (m - m.round()).abs() < 1e-12
}

/// Oscillating problem.
#[derive(Clone)]
pub struct MicroProblem {
    pub field: PeriodicMatrixField,
    pub eps: f64,
    pub r: f64,
    pub p: f64,
    pub u0: InitialFn,
    pub f: SourceFn,
    pub grid: MacroGrid,
}

impl MicroProblem {
    pub fn new(field: PeriodicMatrixField, eps: f64, r: f64, p: f64, data: &DataSpec, grid: MacroGrid) -> Self {
        MicroProblem {
            u0: data.u0_fn(grid.dim),
            f: data.f_fn(),
            field,
            eps,
            r,
            p,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.field.dim() != self.grid.dim {
            return Err(Error::DimensionMismatch(format!(
                "field is {}D, grid is {}D",
                self.field.dim(),
                self.grid.dim
            )));
        }
        if !is_dyadic(self.eps) {
            return Err(Error::invalid(format!("ε = {} is not of the form 1/2^m", self.eps)));
        }
        if !(self.r > 0.0) {
            return Err(Error::invalid(format!("r must be positive, got {}", self.r)));
        }
        check_p(self.p)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::invalid(format!("p must be positive and finite, got {p}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Constant,
    CriticalTable,
}

#[derive(Clone)]
pub struct HomogenizedProblem {
    pub tensor: EffectiveTensor,
    pub p: f64,
    pub u0: InitialFn,
    pub f: SourceFn,
    pub grid: MacroGrid,
    pub coupling: Coupling,
}

impl HomogenizedProblem {
    pub fn new(tensor: EffectiveTensor, p: f64, data: &DataSpec, grid: MacroGrid) -> Self {
        let coupling = match tensor.data {
            TensorData::Constant { .. } => Coupling::Constant,
            TensorData::Table { .. } => Coupling::CriticalTable,
        };
        HomogenizedProblem {
            u0: data.u0_fn(grid.dim),
            f: data.f_fn(),
            tensor,
            p,
            grid,
            coupling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        check_p(self.p)?;
        if self.tensor.dim != self.grid.dim {
            return Err(Error::DimensionMismatch(format!(
                "tensor is {}D, grid is {}D",
                self.tensor.dim, self.grid.dim
            )));
        }
        match (self.coupling, &self.tensor.data) {
            (Coupling::Constant, TensorData::Constant { .. }) => Ok(()),
            (Coupling::CriticalTable, TensorData::Table { .. }) if self.tensor.regime.is_critical() => Ok(()),
            _ => Err(Error::RegimeMismatch(
                "table coupling needs a critical table; constant coupling a constant tensor".into(),
            )),
        }
    }
}

enum Coefficients {
    Micro {
        field: PeriodicMatrixField,
        eps: f64,
        r: f64,
    },
    Constant(Tensor),
    Table(EffectiveTensor),
}

/// Per-step information returned by [`Stepper::step`].
#[derive(Clone, Debug, Default)]
pub struct StepInfo {
    pub iterations: usize,
    /// `‖R‖` before every Newton update and after the last.
    pub residuals: Vec<f64>,
    /// Final residual relative to the residual of the previous state.
    pub relative_residual: f64,
    pub clamped: usize,
    /// Smallest interior `|v|` (degenerate steps have `|v| → 0` somewhere).
    pub min_abs_v: f64,
}

/// One backward Euler time stepper; drives both problems.
pub struct Stepper {
    grid: MacroGrid,
    st: Stencil,
    p: f64,
    f: SourceFn,
    coeffs: Coefficients,
    coef: Vec<Tensor>,
    slot_nodes: Vec<Vec<u32>>,
    boundary: Vec<bool>,
    v: Vec<f64>,
    u: Vec<f64>,
    u_prev: Vec<f64>,
    fvals: Vec<f64>,
    n: usize,
    last: StepInfo,
}

impl Stepper {
    fn build(grid: MacroGrid, p: f64, u0: &InitialFn, f: SourceFn, coeffs: Coefficients) -> Self {
        let st = Stencil::dirichlet_macro(&grid);
        let nn = grid.n_nodes();
        let boundary: Vec<bool> = (0..nn).map(|i| grid.is_boundary(i)).collect();
        let u: Vec<f64> = (0..nn)
            .map(|i| if boundary[i] { 0.0 } else { u0(grid.node_point(i)) })
            .collect();
        let v = u.iter().map(|&x| v_of_u(x, p)).collect();
        let slot_nodes = slot_nodes(&st);
        let coef = match &coeffs {
            Coefficients::Constant(a) => vec![*a; st.n_slots()],
            _ => vec![Tensor::zeros(grid.dim); st.n_slots()],
        };
        Stepper {
            grid,
            p,
            f,
            coeffs,
            coef,
            slot_nodes,
            boundary,
            u_prev: u.clone(),
            v,
            u,
            fvals: vec![0.0; nn],
            n: 0,
            st,
            last: StepInfo::default(),
        }
    }

    pub fn micro(prob: &MicroProblem) -> Result<Self> {
        prob.validate()?;
        Ok(Self::build(
            prob.grid,
            prob.p,
            &prob.u0,
            prob.f.clone(),
            Coefficients::Micro {
                field: prob.field.clone(),
                eps: prob.eps,
                r: prob.r,
            },
        ))
    }

    pub fn homogenized(prob: &HomogenizedProblem) -> Result<Self> {
        prob.validate()?;
        let coeffs = match prob.coupling {
            Coupling::Constant => Coefficients::Constant(prob.tensor.as_constant().expect("validated")),
            Coupling::CriticalTable => Coefficients::Table(prob.tensor.clone()),
        };
        let mut s = Self::build(prob.grid, prob.p, &prob.u0, prob.f.clone(), coeffs);
        if let Coefficients::Table(_) = s.coeffs {
            s.refresh_table_coefficients();
        }
        Ok(s)
    }

    pub fn grid(&self) -> &MacroGrid {
        &self.grid
    }
    pub fn stencil(&self) -> &Stencil {
        &self.st
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn u_prev(&self) -> &[f64] {
        &self.u_prev
    }
    pub fn step_index(&self) -> usize {
        self.n
    }
    pub fn time(&self) -> f64 {
        self.grid.time(self.n)
    }
    /// Slot coefficients used by the most recent step.
    pub fn coefficients(&self) -> &[Tensor] {
        &self.coef
    }
    /// Source values at the nodes for the most recent step.
    pub fn source(&self) -> &[f64] {
        &self.fvals
    }
    pub fn last_info(&self) -> &StepInfo {
        &self.last
    }

    fn set_micro_coefficients(&mut self, t: f64) {
        if let Coefficients::Micro { field, eps, r } = &self.coeffs {
            for (c, y) in self.coef.iter_mut().zip(&self.st.coef_points) {
                *c = sample_oscillating(field, *y, t, *eps, *r);
            }
        }
    }

    /// Mean of `|u|` over the nodes touching each coefficient slot.
    pub fn slot_mean_abs_u(&self) -> Vec<f64> {
        slot_means(&self.slot_nodes, &self.u)
    }

    /// Critical coupling: slot matrix at the slot mean of `|u|`.
    fn refresh_table_coefficients(&mut self) -> usize {
        let Coefficients::Table(t) = &self.coeffs else {
            return 0;
        };
        let mut clamped = 0;
        for (c, nodes) in self.coef.iter_mut().zip(&self.slot_nodes) {
            let m = slot_mean(nodes, &self.u);
            let (a, cl) = t.matrix_at(m);
            *c = a;
            clamped += cl as usize;
        }
        clamped
    }

    fn residual(&self, v: &[f64], out: &mut [f64]) {
        let vol = self.st.cell_volume();
        let dt = self.grid.dt();
        self.st.apply(&self.coef, v, out);
        for i in 0..v.len() {
            out[i] = if self.boundary[i] {
                v[i]
            } else {
                out[i] + vol * ((beta(v[i], self.p) - self.u_prev[i]) / dt - self.fvals[i])
            };
        }
    }

    fn newton_direction(&self, v: &[f64], rhs: &[f64], dx: &mut [f64]) -> Result<()> {
        let vol = self.st.cell_volume();
        let dt = self.grid.dt();
        let mass: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if self.boundary[i] {
                    0.0
                } else {
                    vol * beta_prime(x, self.p) / dt
                }
            })
            .collect();
        if self.grid.dim == 1 {
            let (mut lo, mut di, mut up) = self.st.tridiagonal(&self.coef);
            let n = v.len();
            for i in 0..n {
                if self.boundary[i] {
                    lo[i] = 0.0;
                    up[i] = 0.0;
                    di[i] = 1.0;
                } else {
                    di[i] += mass[i];
                    if i > 0 && self.boundary[i - 1] {
                        lo[i] = 0.0;
                    }
                    if i + 1 < n && self.boundary[i + 1] {
                        up[i] = 0.0;
                    }
                }
            }
            dx.copy_from_slice(&linalg::solve_tridiagonal(&lo, &di, &up, rhs));
            return Ok(());
        }
        let mut diag = self.st.diagonal(&self.coef);
        for i in 0..diag.len() {
            diag[i] = if self.boundary[i] { 1.0 } else { diag[i] + mass[i] };
        }
        let mut tmp = vec![0.0; v.len()];
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..x.len() {
                tmp[i] = if self.boundary[i] { 0.0 } else { x[i] };
            }
            self.st.apply(&self.coef, &tmp, y);
            for i in 0..x.len() {
                y[i] = if self.boundary[i] { x[i] } else { y[i] + mass[i] * x[i] };
            }
        };
        dx.iter_mut().for_each(|d| *d = 0.0);
        let symmetric = self.coef.iter().all(|c| c.asymmetry() <= 1e-14 * c.max_abs().max(1.0));
        if symmetric {
            linalg::cg(
                apply,
                rhs,
                dx,
                CgOptions {
                    tol: LINEAR_TOL,
                    max_iter: 10 * v.len(),
                    project_mean: false,
                    diagonal: Some(&diag),
                },
            )?;
        } else {
            linalg::bicgstab(apply, rhs, dx, LINEAR_TOL, 10 * v.len())?;
        }
        Ok(())
    }

    /// Advances one step.
    pub fn step(&mut self) -> Result<StepInfo> {
        let t = self.grid.time(self.n + 1);
        self.set_micro_coefficients(t);
        for i in 0..self.fvals.len() {
            self.fvals[i] = if self.boundary[i] {
                0.0
            } else {
                (self.f)(self.grid.node_point(i), t)
            };
        }
        std::mem::swap(&mut self.u_prev, &mut self.u);
        self.u.copy_from_slice(&self.u_prev);
        let vol = self.st.cell_volume();
        let dt = self.grid.dt();
        let floor = ROUNDOFF_FLOOR * vol * (linalg::norm(&self.u_prev) / dt + linalg::norm(&self.fvals));
        let mut scale = 0.0;
        let picard = matches!(self.coeffs, Coefficients::Table(_));
        let max_it = if picard { MAX_PICARD } else { MAX_NEWTON };
        let step = self.n + 1;
        let nn = self.v.len();
        let mut v = self.v.clone();
        let mut r = vec![0.0; nn];
        let mut trial = vec![0.0; nn];
        let mut r_trial = vec![0.0; nn];
        let mut dx = vec![0.0; nn];
        let mut info = StepInfo::default();
        loop {
            if picard {
                for i in 0..nn {
                    self.u[i] = beta(v[i], self.p);
                }
                info.clamped += self.refresh_table_coefficients();
            }
            self.residual(&v, &mut r);
            let rn = linalg::norm(&r);
            if info.residuals.is_empty() {
                scale = rn.max(f64::MIN_POSITIVE);
            }
            info.residuals.push(rn);
            if rn <= NEWTON_TOL * scale + floor {
                break;
            }
            if info.iterations >= max_it {
                return Err(Error::NewtonStalled {
                    step,
                    residual: rn / scale,
                });
            }
            let neg: Vec<f64> = r.iter().map(|x| -x).collect();
            self.newton_direction(&v, &neg, &mut dx)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for i in 0..nn {
                    trial[i] = v[i] + alpha * dx[i];
                }
                self.residual(&trial, &mut r_trial);
                if linalg::norm(&r_trial) < (1.0 - 1e-4 * alpha) * rn {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::StepRejected {
                    step,
                    residual: rn / scale,
                });
            }
            std::mem::swap(&mut v, &mut trial);
            info.iterations += 1;
        }
        info.relative_residual = info.residuals.last().copied().unwrap_or(0.0) / scale;
        info.min_abs_v = v
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.boundary[*i])
            .fold(f64::INFINITY, |m, (_, x)| m.min(x.abs()));
        for i in 0..nn {
            self.u[i] = beta(v[i], self.p);
        }
        self.v = v;
        self.n += 1;
        self.last = info.clone();
        Ok(info)
    }

    /// Diagnostics of the current state; `audit` adds the `H⁻¹` norm of the
    /// discrete time derivative.
    pub fn diagnostics(&self, audit: bool) -> Result<StepDiagnostics> {
        let vol = self.st.cell_volume();
        let p = self.p;
        let mut d = StepDiagnostics {
            t: self.time(),
            newton_iterations: self.last.iterations,
            residual: self.last.relative_residual,
            ..Default::default()
        };
        let (mut f2, mut fq) = (0.0, 0.0);
        for i in 0..self.u.len() {
            let a = self.u[i].abs();
            let f = self.fvals[i];
            d.lp1_pow += vol * a.powf(p + 1.0);
            d.l2_sq += vol * a * a;
            d.l3mp_pow += vol * a.powf(3.0 - p);
            d.work += vol * f * self.v[i];
            f2 += vol * f * f;
            fq += vol * f.abs().powf(3.0 - p);
        }
        d.f_l2 = f2.sqrt();
        d.f_l3mp = fq.powf(1.0 / (3.0 - p));
        d.grad_v_sq = self.st.grad_norm_sq(&self.v);
        d.grad_u_sq = self.st.grad_norm_sq(&self.u);
        if self.n > 0 {
            d.dissipation = self.st.energy(&self.coef, &self.v);
            if audit {
                let dt = self.grid.dt();
                let w: Vec<f64> = self.u.iter().zip(&self.u_prev).map(|(a, b)| (a - b) / dt).collect();
                d.dtu_hminus1 = hminus1_norm(&w, &self.grid)?;
                d.f_hminus1 = hminus1_norm(&self.fvals, &self.grid)?;
            }
        }
        Ok(d)
    }
}

/// Nodes touching every coefficient slot of a stencil.
pub fn slot_nodes(st: &Stencil) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); st.n_slots()];
    for e in &st.elements {
        let s: &mut Vec<u32> = &mut out[e.coef as usize];
        for d in 0..st.dim {
            for node in [e.pairs[d].0, e.pairs[d].1] {
                if !s.contains(&node) {
                    s.push(node);
                }
            }
        }
    }
    out
}

#[inline]
fn slot_mean(nodes: &[u32], x: &[f64]) -> f64 {
    nodes.iter().map(|&i| x[i as usize].abs()).sum::<f64>() / nodes.len() as f64
}

/// Per-slot mean of `|x|`.
pub fn slot_means(slot_nodes: &[Vec<u32>], x: &[f64]) -> Vec<f64> {
    slot_nodes.iter().map(|n| slot_mean(n, x)).collect()
}

/// Options of [`run`].
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Store every `stride`-th level (the final level is always stored).
    pub stride: usize,
    pub audit: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stride: 1,
            audit: false,
        }
    }
}

/// Runs a stepper to `T`, recording levels and diagnostics.
pub fn run(mut stepper: Stepper, opts: RunOptions) -> Result<SpaceTimeField> {
    let grid = *stepper.grid();
    let stride = opts.stride.max(1);
    let mut levels = vec![0];
    let mut values = vec![stepper.v().to_vec()];
    let mut diagnostics = vec![stepper.diagnostics(opts.audit)?];
    let mut clamped = 0;
    for n in 1..=grid.n_t {
        let info = stepper.step()?;
        clamped += info.clamped;
        diagnostics.push(stepper.diagnostics(opts.audit)?);
        if n % stride == 0 || n == grid.n_t {
            levels.push(n);
            values.push(stepper.v().to_vec());
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} homogenized-matrix lookups clamped to the table hull");
    }
    Ok(SpaceTimeField {
        grid,
        variable: Variable::V,
        p: stepper.p(),
        levels,
        values,
        diagnostics,
        clamped_lookups: clamped,
    })
}

/// Backward Euler solve of the oscillating problem; returns the `v`-trajectory.
pub fn solve_micro(prob: &MicroProblem) -> Result<SpaceTimeField> {
    run(Stepper::micro(prob)?, RunOptions::default())
}

pub fn solve_homogenized(prob: &HomogenizedProblem) -> Result<SpaceTimeField> {
    run(Stepper::homogenized(prob)?, RunOptions::default())
}

/// Discrete `‖w‖_{H⁻¹(Ω)} = ‖∇φ‖_{L²}` with `−Δφ = w`, `φ = 0` on `∂Ω`.
pub fn hminus1_norm(w: &[f64], grid: &MacroGrid) -> Result<f64> {
    let st = Stencil::dirichlet_macro(grid);
    let n = grid.n_nodes();
    if w.len() != n {
        return Err(Error::DimensionMismatch(format!("{} values for {n} nodes", w.len())));
    }
    let vol = st.cell_volume();
    let ident = vec![Tensor::identity(grid.dim); st.n_slots()];
    let rhs: Vec<f64> = (0..n)
        .map(|i| if grid.is_boundary(i) { 0.0 } else { vol * w[i] })
        .collect();
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let phi = if grid.dim == 1 {
        let (mut lo, mut di, mut up) = st.tridiagonal(&ident);
        for i in [0, n - 1] {
            lo[i] = 0.0;
            up[i] = 0.0;
            di[i] = 1.0;
        }
        lo[1] = 0.0;
        up[n - 2] = 0.0;
        linalg::solve_tridiagonal(&lo, &di, &up, &rhs)
    } else {
        let bnd: Vec<bool> = (0..n).map(|i| grid.is_boundary(i)).collect();
        let mut diag = st.diagonal(&ident);
        for i in 0..n {
            if bnd[i] {
                diag[i] = 1.0;
            }
        }
        let mut tmp = vec![0.0; n];
        let mut phi = vec![0.0; n];
        linalg::cg(
            |x, y| {
                for i in 0..n {
                    tmp[i] = if bnd[i] { 0.0 } else { x[i] };
                }
                st.apply(&ident, &tmp, y);
                for i in 0..n {
                    if bnd[i] {
                        y[i] = x[i];
                    }
                }
            },
            &rhs,
            &mut phi,
            CgOptions {
                tol: LINEAR_TOL,
                max_iter: 10 * n,
                project_mean: false,
                diagonal: Some(&diag),
            },
        )?;
        phi
    };
    Ok(st.grad_norm_sq(&phi).sqrt())
}

/// Energies `E(t_n) = ‖u‖^{p+1}_{p+1}/(p+1)` and the cumulative discrete
/// dissipation `Σ Δt ∫ a∇v·∇v`.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyFunctionals {
    pub times: Vec<f64>,
    pub lp1_norms: Vec<f64>,
    pub energy: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub work: Vec<f64>,
}

impl EnergyFunctionals {
    /// Largest increase `E(t_{n+1}) − E(t_n)` (≤ 0 for a dissipative run).
    pub fn max_increase(&self) -> f64 {
        self.energy
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn energy_functionals(traj: &SpaceTimeField, p: f64) -> EnergyFunctionals {
    let dt = traj.grid.dt();
    let mut out = EnergyFunctionals {
        times: Vec::new(),
        lp1_norms: Vec::new(),
        energy: Vec::new(),
        dissipation: Vec::new(),
        work: Vec::new(),
    };
    let (mut diss, mut work) = (0.0, 0.0);
    for (n, d) in traj.diagnostics.iter().enumerate() {
        if n > 0 {
            diss += dt * d.dissipation;
            work += dt * d.work;
        }
        out.times.push(d.t);
        out.lp1_norms.push(d.lp1_pow.powf(1.0 / (p + 1.0)));
        out.energy.push(d.lp1_pow / (p + 1.0));
        out.dissipation.push(diss);
        out.work.push(work);
    }
    out
}

/// `C_T = (Λ/λ)² exp(∫₀ᵀ ‖∂_s a(·, t/ε^r)‖_∞ dt / (λ ε^r))` for the `H⁻¹`
/// stability of two solutions.
pub fn contraction_constant(field: &PeriodicMatrixField, eps: f64, r: f64, t_end: f64) -> f64 {
    let lam = field.lambda();
    let ratio = (field.lambda_max() / lam).powi(2);
    if field.is_s_independent() {
        return ratio;
    }
    // ∫₀ᵀ g(t/ε^r) dt / ε^r = ∫₀^{T/ε^r} g(s) ds
    let periods = t_end / eps.powf(r);
    let g = |s: f64| field.ds_sup_norm(s, 32);
    let q = 256;
    let mean = (0..q).map(|i| g((i as f64 + 0.5) / q as f64)).sum::<f64>() / q as f64;
    let whole = periods.floor();
    let frac = periods - whole;
    let rem = (0..q).map(|i| g((i as f64 + 0.5) / q as f64 * frac)).sum::<f64>() * frac / q as f64;
    ratio * ((whole * mean + rem) / lam).exp()
}

/// Slack of the contraction test.
pub const CONTRACTION_SLACK: f64 = 0.05;

/// Outcome of two micro solves that differ only in the initial datum.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub eps: f64,
    /// `‖u⁰₁ − u⁰₂‖²_{H⁻¹}`
    pub initial: f64,
    /// `sup_n ‖u₁(tₙ) − u₂(tₙ)‖²_{H⁻¹}`
    pub sup: f64,
    pub constant: f64,
    pub passed: bool,
}

/// Steps both solves in lockstep and compares the `H⁻¹` distance against
/// [`contraction_constant`] with [`CONTRACTION_SLACK`].
pub fn contraction_test(
    field: &PeriodicMatrixField,
    eps: f64,
    r: f64,
    p: f64,
    data_1: &DataSpec,
    data_2: &DataSpec,
    grid: MacroGrid,
) -> Result<ContractionReport> {
    if data_1.f != data_2.f {
        return Err(Error::invalid("contraction test needs equal source terms"));
    }
    let mut a = Stepper::micro(&MicroProblem::new(field.clone(), eps, r, p, data_1, grid))?;
    let mut b = Stepper::micro(&MicroProblem::new(field.clone(), eps, r, p, data_2, grid))?;
    let dist = |a: &Stepper, b: &Stepper| -> Result<f64> {
        let d: Vec<f64> = a.u().iter().zip(b.u()).map(|(x, y)| x - y).collect();
        Ok(hminus1_norm(&d, &grid)?.powi(2))
    };
    let initial = dist(&a, &b)?;
    let mut sup = initial;
    for _ in 0..grid.n_t {
        a.step()?;
        b.step()?;
        sup = sup.max(dist(&a, &b)?);
    }
    let constant = contraction_constant(field, eps, r, grid.t_end);
    Ok(ContractionReport {
        eps,
        initial,
        sup,
        constant,
        passed: sup <= (1.0 + CONTRACTION_SLACK) * constant * initial,
    })
}
