//! Cell problems on the discrete torus.
//!
//! Every solver returns one [`CellSolution`] per direction `k`. Values live at
//! cell centres, gradients at the coefficient slots of the periodic stencil
//! (faces in 1D, cell corners in 2D). Time slices sit at `s_j = (j+½)h_s`.

use crate::effmat::table_weights;
use crate::error::{Error, Result};
use crate::fields::{CellGrid, PeriodicMatrixField};
use crate::linalg::{self, CgOptions};
use crate::stencil::Stencil;
use crate::tensor::Tensor;
use crate::{MAX_PERIOD_SWEEPS, PERIODIC_TOL, SOLVER_TOL};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Inner tolerance of each implicit step of the period map. Tighter than
/// [`SOLVER_TOL`] so that step errors stay below the periodicity tolerance.
const MARCH_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Classical,
    Subcritical,
    CriticalFde,
    CriticalPme,
    Supercritical,
}

impl Regime {
    /// Regime selected by the time-scale exponent `r` and the nonlinearity `p`.
    pub fn from_exponents(r: f64, p: f64) -> Result<Regime> {
        if !(r > 0.0) {
            return Err(Error::invalid(format!("r must be positive, got {r}")));
        }
        if r < 2.0 {
            Ok(Regime::Subcritical)
        } else if r > 2.0 {
            Ok(Regime::Supercritical)
        } else if p > 0.0 && p < 1.0 {
            Ok(Regime::CriticalFde)
        } else if p > 1.0 && p < 2.0 {
            Ok(Regime::CriticalPme)
        } else {
            Err(Error::invalid("critical regime requires p ≠ 1 and 0 < p < 2"))
        }
    }

    pub fn is_critical(self) -> bool {
        matches!(self, Regime::CriticalFde | Regime::CriticalPme)
    }

    /// Whether correctors depend on the fast time variable.
    pub fn is_time_dependent(self) -> bool {
        matches!(self, Regime::Subcritical | Regime::CriticalFde | Regime::CriticalPme)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Classical => "classical",
            Regime::Subcritical => "subcritical",
            Regime::CriticalFde => "critical-fde",
            Regime::CriticalPme => "critical-pme",
            Regime::Supercritical => "supercritical",
        }
    }

    pub fn parse(name: &str) -> Result<Regime> {
        Ok(match name {
            "classical" => Regime::Classical,
            "subcritical" => Regime::Subcritical,
            "critical-fde" => Regime::CriticalFde,
            "critical-pme" => Regime::CriticalPme,
            "supercritical" => Regime::Supercritical,
            other => return Err(Error::Parse(format!("unknown regime '{other}'"))),
        })
    }
}

/// Macroscopic input of the critical cell problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParameter {
    pub p: f64,
    pub u0abs: f64,
}

impl CellParameter {
    pub fn new(p: f64, u0abs: f64) -> Result<Self> {
        if !(p > 0.0 && p < 2.0) {
            return Err(Error::invalid(format!("p must lie in (0, 2), got {p}")));
        }
        if !(u0abs >= 0.0) || !u0abs.is_finite() {
            return Err(Error::invalid(format!("u0abs must be finite and ≥ 0, got {u0abs}")));
        }
        Ok(CellParameter { p, u0abs })
    }

    /// `(1/p)·|u₀|^{1−p}`, the capacity of the fast-diffusion cell problem.
    pub fn mu_fde(&self) -> f64 {
        if self.u0abs == 0.0 {
            return 0.0;
        }
        self.u0abs.powf(1.0 - self.p) / self.p
    }

    /// `p·|u₀|^{p−1}`, the diffusivity scale of the porous-medium cell problem.
    pub fn kappa_pme(&self) -> f64 {
        if self.u0abs == 0.0 {
            return 0.0;
        }
        self.p * self.u0abs.powf(self.p - 1.0)
    }

    /// Coefficient `c` of `c ∂_sΦ = div(a(∇Φ + e_k))` written for `Φ`:
    /// `μ_fde` for fast diffusion, `1/κ_pme` for porous medium.
    pub fn capacity(&self, regime: Regime) -> f64 {
        match regime {
            Regime::CriticalFde => self.mu_fde(),
            Regime::CriticalPme => {
                let k = self.kappa_pme();
                if k == 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / k
                }
            }
            _ => 0.0,
        }
    }
}

/// Discrete corrector `Φ_k` in one direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSolution {
    pub regime: Regime,
    pub dim: usize,
    pub grid: CellGrid,
    /// Zero-based direction index.
    pub k: usize,
    pub param: Option<CellParameter>,
    /// 1 for correctors independent of `s`, else `M_s`.
    pub n_slices: usize,
    /// Slice-major values at cell centres.
    pub phi: Vec<f64>,
    /// Porous-medium unknown with `Φ = κ Ψ`.
    pub psi: Option<Vec<f64>>,
    /// Slice-major gradients at the stencil slots.
    pub grad: Vec<[f64; 2]>,
    /// Largest relative residual over all linear solves.
    pub residual: f64,
    /// `max_s |⟨Φ(·,s)⟩_y|`.
    pub mean_defect: f64,
    /// `‖Φ(·,1) − Φ(·,0)‖_{L²}` reached by the period map (0 when not marched).
    pub periodicity_defect: f64,
    pub sweeps: usize,
}

impl CellSolution {
    pub fn n_space(&self) -> usize {
        self.grid.n_space(self.dim)
    }

    pub fn n_slots(&self) -> usize {
        self.n_space()
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.n_space();
        let j = if self.n_slices == 1 { 0 } else { j };
        &self.phi[j * n..(j + 1) * n]
    }

    pub fn grad_slice(&self, j: usize) -> &[[f64; 2]] {
        let n = self.n_slots();
        let j = if self.n_slices == 1 { 0 } else { j };
        &self.grad[j * n..(j + 1) * n]
    }

    /// `max |Φ|`.
    pub fn max_abs(&self) -> f64 {
        self.phi.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `∫₀¹ ‖Φ(·,s)‖²_{L²(□)} ds` by the midpoint rule.
    pub fn l2_norm_sq(&self) -> f64 {
        let vol = self.grid.hy().powi(self.dim as i32);
        vol * self.phi.iter().map(|v| v * v).sum::<f64>() / self.n_slices as f64
    }

    /// Capacity `c` of the marched problem, if any.
    pub fn capacity(&self) -> Option<f64> {
        match (self.regime, self.param) {
            (r, Some(p)) if r.is_critical() => Some(p.capacity(r)),
            _ => None,
        }
    }

    /// `Φ(y, s)`, periodic (bi)linear interpolation in `y` and linear in `s`.
    pub fn value_at(&self, y: [f64; 2], s: f64) -> f64 {
        let m = self.grid.m_y;
        let w = lattice_weights(self.dim, m, 0.5, y);
        self.interp_s(s, |j| {
            let sl = self.slice(j);
            w.iter().map(|&(i, c)| c * sl[i]).sum()
        })
    }

    /// `∇_yΦ(y, s)` interpolated from the slot gradients.
    pub fn grad_at(&self, y: [f64; 2], s: f64) -> [f64; 2] {
        let m = self.grid.m_y;
        let w = lattice_weights(self.dim, m, 1.0, y);
        let g0 = self.interp_s(s, |j| {
            let g = self.grad_slice(j);
            w.iter().map(|&(i, c)| c * g[i][0]).sum()
        });
        if self.dim == 1 {
            return [g0, 0.0];
        }
        let g1 = self.interp_s(s, |j| {
            let g = self.grad_slice(j);
            w.iter().map(|&(i, c)| c * g[i][1]).sum()
        });
        [g0, g1]
    }

    fn interp_s(&self, s: f64, f: impl Fn(usize) -> f64) -> f64 {
        if self.n_slices == 1 {
            return f(0);
        }
        let ms = self.n_slices;
        let t = crate::fields::wrap(s) * ms as f64 - 0.5;
        let j0 = t.floor();
        let theta = t - j0;
        let j0 = (j0 as i64).rem_euclid(ms as i64) as usize;
        let j1 = (j0 + 1) % ms;
        (1.0 - theta) * f(j0) + theta * f(j1)
    }
}

/// Interpolation weights on a periodic lattice `{(i + offset)h}` with `m`
/// points per direction.
pub(crate) fn lattice_weights(dim: usize, m: usize, offset: f64, y: [f64; 2]) -> Vec<(usize, f64)> {
    let axis = |x: f64| {
        let t = crate::fields::wrap(x) * m as f64 - offset;
        let i0 = t.floor();
        let th = t - i0;
        let i0 = (i0 as i64).rem_euclid(m as i64) as usize;
        (i0, (i0 + 1) % m, th)
    };
    let (a0, a1, ta) = axis(y[0]);
    if dim == 1 {
        return vec![(a0, 1.0 - ta), (a1, ta)];
    }
    let (b0, b1, tb) = axis(y[1]);
    vec![
        (a0 * m + b0, (1.0 - ta) * (1.0 - tb)),
        (a1 * m + b0, ta * (1.0 - tb)),
        (a0 * m + b1, (1.0 - ta) * tb),
        (a1 * m + b1, ta * tb),
    ]
}

fn check_k(field: &PeriodicMatrixField, k: usize) -> Result<()> {
    if k >= field.dim() {
        return Err(Error::DimensionMismatch(format!(
            "direction {k} out of range for N = {}",
            field.dim()
        )));
    }
    Ok(())
}

/// Slot gradients of one slice: the mean of the element gradients per slot.
fn slot_gradients(st: &Stencil, x: &[f64]) -> Vec<[f64; 2]> {
    let mut g = vec![[0.0; 2]; st.n_slots()];
    let mut count = vec![0u32; st.n_slots()];
    for e in &st.elements {
        let ge = st.grad(e, x);
        let c = e.coef as usize;
        g[c][0] += ge[0];
        g[c][1] += ge[1];
        count[c] += 1;
    }
    for (gi, &c) in g.iter_mut().zip(&count) {
        gi[0] /= c as f64;
        gi[1] /= c as f64;
    }
    g
}

/// `K Φ = b_k` on one slice, projected CG with Jacobi preconditioning.
fn solve_elliptic(st: &Stencil, coef: &[Tensor], k: usize, x: &mut [f64]) -> Result<f64> {
    let b = st.unit_load(coef, k);
    let diag = st.diagonal(coef);
    let info = linalg::cg(
        |v, out| st.apply(coef, v, out),
        &b,
        x,
        CgOptions {
            tol: SOLVER_TOL,
            max_iter: 10 * st.n,
            project_mean: true,
            diagonal: Some(&diag),
        },
    )?;
    Ok(info.relative_residual)
}

fn finish(
    regime: Regime,
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    k: usize,
    param: Option<CellParameter>,
    slices: Vec<Vec<f64>>,
    residual: f64,
) -> CellSolution {
    let dim = field.dim();
    let st = Stencil::periodic_cell(dim, grid.m_y);
    let n_slices = slices.len();
    let mut phi = Vec::with_capacity(n_slices * st.n);
    let mut grad = Vec::with_capacity(n_slices * st.n_slots());
    let mut mean_defect: f64 = 0.0;
    for x in &slices {
        mean_defect = mean_defect.max(linalg::mean(x).abs());
        grad.extend(slot_gradients(&st, x));
        phi.extend_from_slice(x);
    }
    CellSolution {
        regime,
        dim,
        grid: *grid,
        k,
        param,
        n_slices,
        phi,
        psi: None,
        grad,
        residual,
        mean_defect,
        periodicity_defect: 0.0,
        sweeps: 0,
    }
}

/// `−div_y(a(∇Φ_k + e_k)) = 0` for an `s`-independent field.
pub fn solve_classical_cell(field: &PeriodicMatrixField, grid: &CellGrid, k: usize) -> Result<CellSolution> {
    grid.validate()?;
    check_k(field, k)?;
    if !field.is_s_independent() {
        return Err(Error::RegimeMismatch(
            "classical cell problem needs an s-independent field".into(),
        ));
    }
    let st = Stencil::periodic_cell(field.dim(), grid.m_y);
    let coef = st.cell_coefficients(field, grid, 0.0);
    let mut x = vec![0.0; st.n];
    let res = solve_elliptic(&st, &coef, k, &mut x)?;
    Ok(finish(Regime::Classical, field, grid, k, None, vec![x], res))
}

/// Per-slice elliptic problems `−div_y(a(·, s_j)(∇Φ_k + e_k)) = 0`.
pub fn solve_subcritical_cell(field: &PeriodicMatrixField, grid: &CellGrid, k: usize) -> Result<CellSolution> {
    let (slices, res) = subcritical_slices(field, grid, k)?;
    Ok(finish(Regime::Subcritical, field, grid, k, None, slices, res))
}

fn subcritical_slices(field: &PeriodicMatrixField, grid: &CellGrid, k: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    grid.validate()?;
    check_k(field, k)?;
    let st = Stencil::periodic_cell(field.dim(), grid.m_y);
    if field.is_s_independent() {
        let coef = st.cell_coefficients(field, grid, 0.0);
        let mut x = vec![0.0; st.n];
        let res = solve_elliptic(&st, &coef, k, &mut x)?;
        return Ok((vec![x; grid.m_s], res));
    }
    let mut slices = Vec::with_capacity(grid.m_s);
    let mut res: f64 = 0.0;
    let mut x = vec![0.0; st.n];
    for j in 0..grid.m_s {
        let coef = st.cell_coefficients(field, grid, grid.s_center(j));
        let r = solve_elliptic(&st, &coef, k, &mut x).map_err(|e| with_slice(e, j))?;
        res = res.max(r);
        slices.push(x.clone());
    }
    Ok((slices, res))
}

fn with_slice(e: Error, j: usize) -> Error {
    match e {
        Error::SolverDiverged {
            residual, iterations, ..
        } => Error::SolverDiverged {
            residual,
            iterations,
            slice: Some(j),
        },
        other => other,
    }
}

/// Slot coefficients averaged over the `M_s` time slices.
pub fn s_averaged_coefficients(st: &Stencil, field: &PeriodicMatrixField, grid: &CellGrid) -> Vec<Tensor> {
    if field.is_s_independent() {
        return st.cell_coefficients(field, grid, 0.0);
    }
    let mut acc = vec![Tensor::zeros(field.dim()); st.n_slots()];
    for j in 0..grid.m_s {
        let c = st.cell_coefficients(field, grid, grid.s_center(j));
        for (a, b) in acc.iter_mut().zip(c) {
            *a = *a + b;
        }
    }
    let w = 1.0 / grid.m_s as f64;
    acc.into_iter().map(|a| a * w).collect()
}

/// Elliptic problem for the `s`-averaged coefficient `∫₀¹ a(·, s) ds`.
pub fn solve_supercritical_cell(field: &PeriodicMatrixField, grid: &CellGrid, k: usize) -> Result<CellSolution> {
    grid.validate()?;
    check_k(field, k)?;
    let st = Stencil::periodic_cell(field.dim(), grid.m_y);
    let coef = s_averaged_coefficients(&st, field, grid);
    let mut x = vec![0.0; st.n];
    let res = solve_elliptic(&st, &coef, k, &mut x)?;
    Ok(finish(Regime::Supercritical, field, grid, k, None, vec![x], res))
}

/// Outcome of [`march_periodic`].
struct Marched {
    slices: Vec<Vec<f64>>,
    defect: f64,
    sweeps: usize,
    residual: f64,
}

/// Time-periodic solution of `c h^N (X_j − X_{j−1})/h_s + K_j X_j = b_j`
/// by iterating the backward-Euler period map from `start`.
fn march_periodic(
    st: &Stencil,
    coefs: &[Vec<Tensor>],
    k: usize,
    capacity: f64,
    grid: &CellGrid,
    start: Vec<f64>,
) -> Result<Marched> {
    let ms = grid.m_s;
    let vol = st.cell_volume();
    let mass = capacity * vol / grid.hs();
    let loads: Vec<Vec<f64>> = coefs.iter().map(|c| st.unit_load(c, k)).collect();
    let diags: Vec<Vec<f64>> = coefs
        .iter()
        .map(|c| st.diagonal(c).into_iter().map(|d| d + mass).collect())
        .collect();
    let mut slices: Vec<Vec<f64>> = vec![start.clone(); ms];
    let mut prev = start;
    let mut rhs = vec![0.0; st.n];
    let mut residual: f64;
    for sweep in 1..=MAX_PERIOD_SWEEPS {
        let first = prev.clone();
        residual = 0.0;
        for j in 0..ms {
            let coef = &coefs[j % coefs.len()];
            let load = &loads[j % loads.len()];
            let diag = &diags[j % diags.len()];
            for i in 0..st.n {
                rhs[i] = load[i] + mass * prev[i];
            }
            let x = &mut slices[j];
            let info = linalg::cg(
                |v, out| {
                    st.apply(coef, v, out);
                    for (o, vi) in out.iter_mut().zip(v) {
                        *o += mass * vi;
                    }
                },
                &rhs,
                x,
                CgOptions {
                    tol: MARCH_TOL,
                    max_iter: 10 * st.n,
                    project_mean: true,
                    diagonal: Some(diag),
                },
            )
            .map_err(|e| with_slice(e, j))?;
            residual = residual.max(info.relative_residual);
            prev.copy_from_slice(x);
        }
        let defect = (vol * prev.iter().zip(&first).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sqrt();
        if defect <= PERIODIC_TOL {
            return Ok(Marched {
                slices,
                defect,
                sweeps: sweep,
                residual,
            });
        }
        if sweep == MAX_PERIOD_SWEEPS {
            return Err(Error::PeriodicityNotReached { defect, sweeps: sweep });
        }
    }
    unreachable!()
}

fn solve_critical(
    regime: Regime,
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: CellParameter,
    k: usize,
) -> Result<CellSolution> {
    grid.validate()?;
    check_k(field, k)?;
    let capacity = param.capacity(regime);
    let st = Stencil::periodic_cell(field.dim(), grid.m_y);
    let coefs: Vec<Vec<Tensor>> = if field.is_s_independent() {
        vec![st.cell_coefficients(field, grid, 0.0)]
    } else {
        (0..grid.m_s)
            .map(|j| st.cell_coefficients(field, grid, grid.s_center(j)))
            .collect()
    };
    // start from the elliptic solution of the last slice; for stationary
    // fields this is already the periodic orbit
    let mut start = vec![0.0; st.n];
    solve_elliptic(&st, coefs.last().expect("at least one slice"), k, &mut start)?;
    let m = march_periodic(&st, &coefs, k, capacity, grid, start)?;
    let mut sol = finish(regime, field, grid, k, Some(param), m.slices, m.residual);
    sol.periodicity_defect = m.defect;
    sol.sweeps = m.sweeps;
    Ok(sol)
}

/// Time-periodic fast-diffusion cell problem `μ ∂_sΦ = div_y(a(∇Φ + e_k))`.
/// With `u0abs = 0` the capacity vanishes and the per-slice elliptic
/// problems are solved instead.
pub fn solve_critical_cell_fde(
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: CellParameter,
    k: usize,
) -> Result<CellSolution> {
    if !(param.p > 0.0 && param.p < 1.0) {
        return Err(Error::RegimeMismatch(format!(
            "fast-diffusion cell problem needs 0 < p < 1, got p = {}",
            param.p
        )));
    }
    if param.u0abs == 0.0 {
        let (slices, res) = subcritical_slices(field, grid, k)?;
        return Ok(finish(Regime::CriticalFde, field, grid, k, Some(param), slices, res));
    }
    solve_critical(Regime::CriticalFde, field, grid, param, k)
}

/// Time-periodic porous-medium cell problem `∂_sΨ = div_y(a(κ∇Ψ + e_k))`,
/// returned as `Φ = κΨ` (and `Ψ`). With `u0abs = 0`, `Φ ≡ 0`.
pub fn solve_critical_cell_pme(
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: CellParameter,
    k: usize,
) -> Result<CellSolution> {
    if !(param.p > 1.0 && param.p < 2.0) {
        return Err(Error::RegimeMismatch(format!(
            "porous-medium cell problem needs 1 < p < 2, got p = {}",
            param.p
        )));
    }
    if param.u0abs == 0.0 {
        grid.validate()?;
        check_k(field, k)?;
        let n = grid.n_space(field.dim());
        let mut sol = finish(
            Regime::CriticalPme,
            field,
            grid,
            k,
            Some(param),
            vec![vec![0.0; n]; grid.m_s],
            0.0,
        );
        sol.psi = Some(vec![0.0; n * grid.m_s]);
        return Ok(sol);
    }
    let mut sol = solve_critical(Regime::CriticalPme, field, grid, param, k)?;
    let kappa = param.kappa_pme();
    sol.psi = Some(sol.phi.iter().map(|v| v / kappa).collect());
    Ok(sol)
}

/// Solves the cell problem of `regime` for one direction.
pub fn solve_cell(
    regime: Regime,
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: Option<CellParameter>,
    k: usize,
) -> Result<CellSolution> {
    let need = || param.ok_or_else(|| Error::invalid("critical regime needs a cell parameter (p, u0abs)"));
    match regime {
        Regime::Classical => solve_classical_cell(field, grid, k),
        Regime::Subcritical => solve_subcritical_cell(field, grid, k),
        Regime::Supercritical => solve_supercritical_cell(field, grid, k),
        Regime::CriticalFde => solve_critical_cell_fde(field, grid, need()?, k),
        Regime::CriticalPme => solve_critical_cell_pme(field, grid, need()?, k),
    }
}

/// All `N` directions, solved in parallel.
pub fn solve_cells(
    regime: Regime,
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: Option<CellParameter>,
) -> Result<Vec<CellSolution>> {
    (0..field.dim())
        .into_par_iter()
        .map(|k| solve_cell(regime, field, grid, param, k))
        .collect()
}

/// 1D only: `max_s (max_y − min_y)` of the discrete flux `a(∂_yΦ + 1)`.
pub fn flux_constancy_defect(cell: &CellSolution, field: &PeriodicMatrixField) -> Result<f64> {
    if cell.dim != 1 {
        return Err(Error::DimensionMismatch("flux constancy is a 1D check".into()));
    }
    let st = Stencil::periodic_cell(1, cell.grid.m_y);
    let mut worst: f64 = 0.0;
    for j in 0..cell.n_slices {
        let coef = match cell.regime {
            Regime::Supercritical => s_averaged_coefficients(&st, field, &cell.grid),
            _ => st.cell_coefficients(field, &cell.grid, cell.grid.s_center(j)),
        };
        let g = cell.grad_slice(j);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (c, gi) in coef.iter().zip(g) {
            let q = c.get(0, 0) * (gi[0] + 1.0);
            lo = lo.min(q);
            hi = hi.max(q);
        }
        worst = worst.max(hi - lo);
    }
    Ok(worst)
}

/// Correctors for every direction, either fixed or tabulated against `|u₀|`.
#[derive(Clone, Debug)]
pub enum CorrectorSet {
    Fixed(Vec<CellSolution>),
    Table {
        keys: Vec<f64>,
        /// `cells[i][k]` belongs to `keys[i]`.
        cells: Vec<Vec<CellSolution>>,
    },
}

impl CorrectorSet {
    pub fn dim(&self) -> usize {
        match self {
            CorrectorSet::Fixed(c) => c[0].dim,
            CorrectorSet::Table { cells, .. } => cells[0][0].dim,
        }
    }

    pub fn regime(&self) -> Regime {
        match self {
            CorrectorSet::Fixed(c) => c[0].regime,
            CorrectorSet::Table { cells, .. } => cells[0][0].regime,
        }
    }

    fn combine(&self, u0abs: f64, f: impl Fn(&[CellSolution]) -> [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        match self {
            CorrectorSet::Fixed(c) => f(c),
            CorrectorSet::Table { keys, cells } => {
                let (i, th, _) = table_weights(keys, u0abs);
                let a = f(&cells[i]);
                if th == 0.0 {
                    return a;
                }
                let b = f(&cells[i + 1]);
                let mut out = [[0.0; 2]; 2];
                for k in 0..2 {
                    for d in 0..2 {
                        out[k][d] = (1.0 - th) * a[k][d] + th * b[k][d];
                    }
                }
                out
            }
        }
    }

    /// `[∇_yΦ_k(y,s)]_k` (rows indexed by `k`).
    pub fn grads(&self, u0abs: f64, y: [f64; 2], s: f64) -> [[f64; 2]; 2] {
        self.combine(u0abs, |c| {
            let mut out = [[0.0; 2]; 2];
            for (k, cell) in c.iter().enumerate() {
                out[k] = cell.grad_at(y, s);
            }
            out
        })
    }

    /// `[Φ_k(y,s)]_k` in the first column.
    pub fn values(&self, u0abs: f64, y: [f64; 2], s: f64) -> [f64; 2] {
        let m = self.combine(u0abs, |c| {
            let mut out = [[0.0; 2]; 2];
            for (k, cell) in c.iter().enumerate() {
                out[k][0] = cell.value_at(y, s);
            }
            out
        });
        [m[0][0], m[1][0]]
    }
}

/// Node samples of a scalar or vector field over `Ω × (0,T)`.
#[derive(Clone, Debug)]
pub struct MacroSamples<T> {
    pub grid: crate::fields::MacroGrid,
    /// `values[n][node]` at time level `n` (`0..=n_t`).
    pub values: Vec<Vec<T>>,
}

impl<T: Copy> MacroSamples<T> {
    /// Value at the macroscopic node and time level nearest to `(x, t)`.
    pub fn nearest(&self, x: [f64; 2], t: f64) -> T {
        let g = &self.grid;
        let m = g.nodes_per_dir();
        let idx = |c: f64| ((c / g.h()).round().max(0.0) as usize).min(m - 1);
        let node = if g.dim == 1 {
            idx(x[0])
        } else {
            idx(x[0]) * m + idx(x[1])
        };
        let levels = self.values.len();
        let n = ((t / g.dt()).round().max(0.0) as usize).min(levels - 1);
        self.values[n][node]
    }
}

/// Evaluator of `z(x,t,y,s) = Σ_k ∂_{x_k}v₀(x,t) Φ_k(y,s)`.
pub struct CorrectorZ<'a> {
    cells: &'a CorrectorSet,
    grad_v0: &'a MacroSamples<[f64; 2]>,
    u0abs: Option<&'a MacroSamples<f64>>,
}

impl CorrectorZ<'_> {
    fn key(&self, x: [f64; 2], t: f64) -> f64 {
        self.u0abs.map_or(0.0, |u| u.nearest(x, t))
    }

    pub fn z(&self, x: [f64; 2], t: f64, y: [f64; 2], s: f64) -> f64 {
        let g = self.grad_v0.nearest(x, t);
        let phi = self.cells.values(self.key(x, t), y, s);
        (0..self.cells.dim()).map(|k| g[k] * phi[k]).sum()
    }

    pub fn grad_y_z(&self, x: [f64; 2], t: f64, y: [f64; 2], s: f64) -> [f64; 2] {
        let g = self.grad_v0.nearest(x, t);
        let gp = self.cells.grads(self.key(x, t), y, s);
        let mut out = [0.0; 2];
        for k in 0..self.cells.dim() {
            out[0] += g[k] * gp[k][0];
            out[1] += g[k] * gp[k][1];
        }
        out
    }
}

/// Builds the corrector evaluator; tabulated (critical) correctors need the
/// `|u₀|` samples that select the table entry.
pub fn assemble_corrector_z<'a>(
    cells: &'a CorrectorSet,
    grad_v0: &'a MacroSamples<[f64; 2]>,
    u0abs: Option<&'a MacroSamples<f64>>,
) -> Result<CorrectorZ<'a>> {
    let dim = cells.dim();
    if grad_v0.grid.dim != dim {
        return Err(Error::DimensionMismatch(format!(
            "correctors are {dim}D, macroscopic gradient is {}D",
            grad_v0.grid.dim
        )));
    }
    match cells {
        CorrectorSet::Fixed(c) => {
            if c.len() != dim || c.iter().enumerate().any(|(k, s)| s.k != k || s.regime != c[0].regime) {
                return Err(Error::RegimeMismatch(
                    "need one corrector per direction, all of the same regime".into(),
                ));
            }
        }
        CorrectorSet::Table { keys, cells: tab } => {
            if !cells.regime().is_critical() {
                return Err(Error::RegimeMismatch("tabulated correctors must be critical".into()));
            }
            if u0abs.is_none() {
                return Err(Error::RegimeMismatch("tabulated correctors need |u0| samples".into()));
            }
            if keys.len() != tab.len() || tab.iter().any(|c| c.len() != dim) {
                return Err(Error::RegimeMismatch("corrector table is incomplete".into()));
            }
        }
    }
    Ok(CorrectorZ { cells, grad_v0, u0abs })
}
