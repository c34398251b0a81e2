//! Homogenized matrices, critical-regime tables and their qualitative checks.

use crate::cellsolve::{s_averaged_coefficients, solve_cells, CellParameter, CellSolution, CorrectorSet, Regime};
use crate::error::{Error, Result};
use crate::fields::{CellGrid, PeriodicMatrixField};
use crate::stencil::Stencil;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Slack allowed in the ellipticity sandwich.
pub const SANDWICH_SLACK: f64 = 1e-8;
/// Symmetry tolerance for non-critical matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Constant `C` of the skew-part tolerance `C (h_y² + h_s)`.
pub const SKEW_TOL_CONSTANT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorData {
    Constant {
        matrix: Tensor,
    },
    /// Matrices keyed on `|u₀|`, interpolated linearly in `log(1 + |u₀|)`.
    Table {
        keys: Vec<f64>,
        matrices: Vec<Tensor>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensor {
    pub regime: Regime,
    pub dim: usize,
    pub p: Option<f64>,
    pub field_id: String,
    pub grid: CellGrid,
    pub data: TensorData,
    /// `∫₀¹ ‖Φ_k(·,s)‖²_{L²} ds`, one row per stored matrix.
    pub corrector_l2: Vec<Vec<f64>>,
    /// Gram matrix `∬ ∇Φ_j·∇Φ_k`, one per stored matrix.
    pub corrector_gram: Vec<Tensor>,
}

impl EffectiveTensor {
    pub fn constant(regime: Regime, matrix: Tensor) -> Self {
        EffectiveTensor {
            regime,
            dim: matrix.dim,
            p: None,
            field_id: "constant".into(),
            grid: CellGrid::default_for(matrix.dim),
            data: TensorData::Constant { matrix },
            corrector_l2: vec![vec![0.0; matrix.dim]],
            corrector_gram: vec![Tensor::zeros(matrix.dim)],
        }
    }

    pub fn matrices(&self) -> Vec<Tensor> {
        match &self.data {
            TensorData::Constant { matrix } => vec![*matrix],
            TensorData::Table { matrices, .. } => matrices.clone(),
        }
    }

    pub fn keys(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::Table { keys, .. } => Some(keys),
            _ => None,
        }
    }

    pub fn as_constant(&self) -> Option<Tensor> {
        match &self.data {
            TensorData::Constant { matrix } => Some(*matrix),
            _ => None,
        }
    }

    /// Matrix at `|u₀| = u0abs` and whether `u0abs` was clamped to the table hull.
    pub fn matrix_at(&self, u0abs: f64) -> (Tensor, bool) {
        match &self.data {
            TensorData::Constant { matrix } => (*matrix, false),
            TensorData::Table { keys, matrices } => {
                let (i, th, clamped) = table_weights(keys, u0abs);
                if th == 0.0 {
                    (matrices[i], clamped)
                } else {
                    (matrices[i] * (1.0 - th) + matrices[i + 1] * th, clamped)
                }
            }
        }
    }
}

/// Bracket `(i, θ, clamped)` of `u` in `keys` with weight linear in
/// `log(1 + u)`; values outside the hull clamp to the nearest end.
pub fn table_weights(keys: &[f64], u: f64) -> (usize, f64, bool) {
    let n = keys.len();
    if n == 1 || u <= keys[0] {
        return (0, 0.0, u < keys[0]);
    }
    if u >= keys[n - 1] {
        return (n - 2, 1.0, u > keys[n - 1]);
    }
    let i = keys.partition_point(|&k| k <= u) - 1;
    let (a, b) = (keys[i].ln_1p(), keys[i + 1].ln_1p());
    (i, (u.ln_1p() - a) / (b - a), false)
}

/// `{0}` plus 16 log-spaced points in `[10⁻³, 10]`.
pub fn default_table_keys() -> Vec<f64> {
    let mut keys = vec![0.0];
    let (lo, hi) = (1e-3f64.ln(), 10f64.ln());
    for i in 0..16 {
        keys.push((lo + (hi - lo) * i as f64 / 15.0).exp());
    }
    keys
}

/// Matrix, corrector `L²` norms and gradient Gram matrix from one set of
/// per-direction cell solutions.
fn assemble_matrix(cells: &[CellSolution], field: &PeriodicMatrixField, grid: &CellGrid) -> (Tensor, Vec<f64>, Tensor) {
    let dim = field.dim();
    let st = Stencil::periodic_cell(dim, grid.m_y);
    let regime = cells[0].regime;
    let n_slices = cells.iter().map(|c| c.n_slices).max().unwrap_or(1);
    let averaged;
    let static_coef;
    let coef_of = |j: usize| -> Vec<Tensor> { st.cell_coefficients(field, grid, grid.s_center(j)) };
    let (coef_fixed, per_slice): (Option<&Vec<Tensor>>, bool) = match regime {
        Regime::Supercritical => {
            averaged = s_averaged_coefficients(&st, field, grid);
            (Some(&averaged), false)
        }
        Regime::Classical => {
            static_coef = st.cell_coefficients(field, grid, 0.0);
            (Some(&static_coef), false)
        }
        _ if field.is_s_independent() => {
            static_coef = st.cell_coefficients(field, grid, 0.0);
            (Some(&static_coef), false)
        }
        _ => (None, true),
    };
    // time-dependent coefficients need every slice even if Φ ≡ const in s
    let slices = if per_slice { grid.m_s } else { n_slices };
    let mut a = Tensor::zeros(dim);
    let mut gram = Tensor::zeros(dim);
    for j in 0..slices {
        let owned;
        let coef = match coef_fixed {
            Some(c) => c,
            None => {
                owned = coef_of(j);
                &owned
            }
        };
        for (k, cell) in cells.iter().enumerate() {
            let q = st.flux_integral(coef, cell.slice(j), k);
            for i in 0..dim {
                a.m[i][k] += q[i];
            }
            for (l, other) in cells.iter().enumerate() {
                gram.m[l][k] += st.grad_inner(other.slice(j), cell.slice(j));
            }
        }
    }
    let w = 1.0 / slices as f64;
    let l2 = cells.iter().map(|c| c.l2_norm_sq()).collect();
    (a * w, l2, gram * w)
}

fn check_cells(cells: &[CellSolution], field: &PeriodicMatrixField, grid: &CellGrid) -> Result<()> {
    let dim = field.dim();
    if cells.len() != dim {
        return Err(Error::RegimeMismatch(format!(
            "need {dim} cell solutions, got {}",
            cells.len()
        )));
    }
    for (k, c) in cells.iter().enumerate() {
        if c.k != k || c.regime != cells[0].regime || c.grid != *grid || c.dim != dim || c.param != cells[0].param {
            return Err(Error::RegimeMismatch(
                "cell solutions must share regime, parameter and grid, ordered by direction".into(),
            ));
        }
    }
    Ok(())
}

/// `a_hom e_k = ∬ a (∇_yΦ_k + e_k)` by midpoint quadrature.
pub fn assemble_ahom(cells: &[CellSolution], field: &PeriodicMatrixField, grid: &CellGrid) -> Result<EffectiveTensor> {
    check_cells(cells, field, grid)?;
    let (a, l2, gram) = assemble_matrix(cells, field, grid);
    Ok(EffectiveTensor {
        regime: cells[0].regime,
        dim: field.dim(),
        p: cells[0].param.map(|p| p.p),
        field_id: field.id().to_string(),
        grid: *grid,
        data: TensorData::Constant { matrix: a },
        corrector_l2: vec![l2],
        corrector_gram: vec![gram],
    })
}

/// Convenience: solve the cells of `regime` and assemble.
pub fn homogenized_matrix(
    regime: Regime,
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    param: Option<CellParameter>,
) -> Result<(EffectiveTensor, Vec<CellSolution>)> {
    let cells = solve_cells(regime, field, grid, param)?;
    let t = assemble_ahom(&cells, field, grid)?;
    Ok((t, cells))
}

/// Critical-regime table and the correctors behind every entry.
pub fn tabulate_critical(
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    p: f64,
    keys: &[f64],
) -> Result<(EffectiveTensor, CorrectorSet)> {
    let regime = Regime::from_exponents(2.0, p)?;
    if keys.len() < 4 || keys[0] != 0.0 || keys.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(
            "table keys must be strictly increasing, start at 0 and have at least 4 entries",
        ));
    }
    type Entry = (Vec<CellSolution>, (Tensor, Vec<f64>, Tensor));
    let entries: Vec<Entry> = keys
        .par_iter()
        .map(|&u| {
            let wrap = |e: Error| Error::TableEntry {
                u0abs: u,
                source: Box::new(e),
            };
            let param = CellParameter::new(p, u).map_err(wrap)?;
            let cells = solve_cells(regime, field, grid, Some(param)).map_err(wrap)?;
            let m = assemble_matrix(&cells, field, grid);
            Ok((cells, m))
        })
        .collect::<Result<_>>()?;
    let mut matrices = Vec::new();
    let mut l2 = Vec::new();
    let mut gram = Vec::new();
    let mut cells = Vec::new();
    for (c, (a, n, g)) in entries {
        matrices.push(a);
        l2.push(n);
        gram.push(g);
        cells.push(c);
    }
    let tensor = EffectiveTensor {
        regime,
        dim: field.dim(),
        p: Some(p),
        field_id: field.id().to_string(),
        grid: *grid,
        data: TensorData::Table {
            keys: keys.to_vec(),
            matrices,
        },
        corrector_l2: l2,
        corrector_gram: gram,
    };
    Ok((
        tensor,
        CorrectorSet::Table {
            keys: keys.to_vec(),
            cells,
        },
    ))
}

/// Table of critical matrices over `keys` (cell solves run in parallel).
pub fn tabulate_ahom_critical(
    field: &PeriodicMatrixField,
    grid: &CellGrid,
    p: f64,
    keys: &[f64],
) -> Result<EffectiveTensor> {
    tabulate_critical(field, grid, p, keys).map(|(t, _)| t)
}

/// `j_hom = a_hom(|u₀|) ∇v₀`, plus whether the table lookup was clamped.
pub fn apply_checked(tensor: &EffectiveTensor, u0val: f64, grad_v0: [f64; 2]) -> ([f64; 2], bool) {
    let (m, clamped) = tensor.matrix_at(u0val.abs());
    (m.apply(grad_v0), clamped)
}

/// `j_hom = a_hom(|u₀|) ∇v₀`; warns when `|u₀|` leaves the table hull.
pub fn apply(tensor: &EffectiveTensor, u0val: f64, grad_v0: [f64; 2]) -> [f64; 2] {
    let (j, clamped) = apply_checked(tensor, u0val, grad_v0);
    if clamped {
        log::warn!("|u0| = {} outside the homogenized-matrix table; clamped", u0val.abs());
    }
    j
}

/// Deterministic unit probe vectors.
pub fn probe_vectors(dim: usize, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if dim == 1 {
                [
                    if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.1..2.0),
                    0.0,
                ]
            } else {
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r: f64 = rng.random_range(0.1..2.0);
                [r * th.cos(), r * th.sin()]
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EllipticityReport {
    /// `min (a_hom ξ·ξ − λ Σ_k (1 + ∫‖Φ_k‖²) ξ_k²)`
    pub lower_slack: f64,
    /// `min (Λ Σ_k (1 + ∫‖Φ_k‖²) ξ_k² − a_hom ξ·ξ)`
    pub upper_slack: f64,
    /// `min (a_hom ξ·ξ − λ (|ξ|² + ‖∇Φ_ξ‖²))`, the energy form of the lower bound.
    pub gradient_lower_slack: f64,
    pub witness_matrix: usize,
    pub witness_probe: [f64; 2],
    pub n_probes: usize,
}

/// Checks the improved ellipticity sandwich for every stored matrix.
pub fn ellipticity_report(
    tensor: &EffectiveTensor,
    lambda: f64,
    lambda_max: f64,
    probes: &[[f64; 2]],
) -> Result<EllipticityReport> {
    let mut rep = EllipticityReport {
        lower_slack: f64::INFINITY,
        upper_slack: f64::INFINITY,
        gradient_lower_slack: f64::INFINITY,
        witness_matrix: 0,
        witness_probe: [0.0; 2],
        n_probes: probes.len(),
    };
    let dim = tensor.dim;
    for (mi, m) in tensor.matrices().iter().enumerate() {
        let l2 = &tensor.corrector_l2[mi];
        let gram = &tensor.corrector_gram[mi];
        for xi in probes {
            let q = m.quad(*xi);
            let weighted: f64 = (0..dim).map(|k| (1.0 + l2[k]) * xi[k] * xi[k]).sum();
            let norm2: f64 = (0..dim).map(|k| xi[k] * xi[k]).sum();
            let lo = q - lambda * weighted;
            let hi = lambda_max * weighted - q;
            let glo = q - lambda * (norm2 + gram.quad(*xi));
            if lo.min(hi) < rep.lower_slack.min(rep.upper_slack) {
                rep.witness_matrix = mi;
                rep.witness_probe = *xi;
            }
            rep.lower_slack = rep.lower_slack.min(lo);
            rep.upper_slack = rep.upper_slack.min(hi);
            rep.gradient_lower_slack = rep.gradient_lower_slack.min(glo);
        }
    }
    for (slack, name) in [
        (rep.lower_slack, "improved ellipticity lower bound"),
        (rep.upper_slack, "improved ellipticity upper bound"),
    ] {
        if slack < -SANDWICH_SLACK {
            return Err(Error::BoundViolated {
                statement: name.into(),
                detail: format!(
                    "slack {slack:e} at matrix {} with ξ = {:?}",
                    rep.witness_matrix, rep.witness_probe
                ),
            });
        }
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct SkewReport {
    pub regime: Regime,
    /// `max |a − aᵀ|`
    pub asymmetry: f64,
    /// Skew part `(a − aᵀ)/2`.
    pub skew: Tensor,
    /// `c ∬ ∂_sΦ_k Φ_j` (critical regime only).
    pub integral: Option<Tensor>,
    pub max_mismatch: f64,
    pub tol: f64,
}

/// `c h^N Σ_j (X^k_j − X^k_{j−1})·X^i_j`, the discrete `c ∬ ∂_sΦ_k Φ_i`.
pub fn skew_integral(cells: &[CellSolution]) -> Tensor {
    let dim = cells[0].dim;
    let mut out = Tensor::zeros(dim);
    let Some(c) = cells[0].capacity() else {
        return out;
    };
    if !c.is_finite() || c == 0.0 || cells[0].n_slices == 1 {
        return out;
    }
    let vol = cells[0].grid.hy().powi(dim as i32);
    let ms = cells[0].n_slices;
    for (i, ci) in cells.iter().enumerate() {
        for (k, ck) in cells.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..ms {
                let cur = ck.slice(j);
                let prev = ck.slice((j + ms - 1) % ms);
                let xi = ci.slice(j);
                for n in 0..cur.len() {
                    acc += (cur[n] - prev[n]) * xi[n];
                }
            }
            out.m[i][k] = c * vol * acc;
        }
    }
    out
}

/// Symmetry (non-critical) or skew-part formula (critical) check. For the
/// critical regime `cells` are the correctors of the table entry at
/// `cells[0].param.u0abs`.
pub fn skew_report(tensor: &EffectiveTensor, cells: Option<&[CellSolution]>) -> Result<SkewReport> {
    if !tensor.regime.is_critical() {
        let asym = tensor.matrices().iter().fold(0.0f64, |m, a| m.max(a.asymmetry()));
        let skew = tensor.matrices()[0].skew_part();
        if asym > SYMMETRY_TOL {
            return Err(Error::SymmetryViolated { defect: asym });
        }
        return Ok(SkewReport {
            regime: tensor.regime,
            asymmetry: asym,
            skew,
            integral: None,
            max_mismatch: 0.0,
            tol: SYMMETRY_TOL,
        });
    }
    let cells = cells.ok_or_else(|| Error::RegimeMismatch("critical skew check needs the cell solutions".into()))?;
    let param = cells[0]
        .param
        .ok_or_else(|| Error::RegimeMismatch("cell solutions carry no (p, u0abs)".into()))?;
    if cells[0].regime != tensor.regime {
        return Err(Error::RegimeMismatch(format!(
            "tensor is {}, cells are {}",
            tensor.regime.name(),
            cells[0].regime.name()
        )));
    }
    let (m, _) = tensor.matrix_at(param.u0abs);
    let skew = m.skew_part();
    let integral = skew_integral(cells);
    let g = &cells[0].grid;
    let tol = SKEW_TOL_CONSTANT * (g.hy() * g.hy() + g.hs());
    let mut worst = 0.0f64;
    for j in 0..tensor.dim {
        for k in 0..tensor.dim {
            let d = (skew.m[j][k] - integral.m[j][k]).abs();
            if d > tol {
                return Err(Error::SkewFormulaMismatch {
                    j,
                    k,
                    skew: skew.m[j][k],
                    integral: integral.m[j][k],
                    tol,
                });
            }
            worst = worst.max(d);
        }
    }
    Ok(SkewReport {
        regime: tensor.regime,
        asymmetry: m.asymmetry(),
        skew,
        integral: Some(integral),
        max_mismatch: worst,
        tol,
    })
}

/// Reference homogenized coefficient of a 1D field by `10⁶`-point midpoint
/// quadrature of the harmonic-mean formulas, independent of the cell solver.
pub fn harmonic_mean_oracle_1d(field: &PeriodicMatrixField, regime: Regime) -> Result<f64> {
    if field.dim() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "harmonic-mean oracle is 1D, field is {}D",
            field.dim()
        )));
    }
    let a = |y: f64, s: f64| field.eval([y, 0.0], s).get(0, 0);
    let mid = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let harmonic_y = |s: f64, n: usize| n as f64 / (0..n).map(|i| 1.0 / a(mid(i, n), s)).sum::<f64>();
    if field.is_s_independent() {
        return match regime {
            Regime::CriticalFde | Regime::CriticalPme => Err(Error::RegimeMismatch(
                "no harmonic-mean formula for the critical regime".into(),
            )),
            _ => Ok(harmonic_y(0.0, 1_000_000)),
        };
    }
    let n = 1000;
    match regime {
        Regime::Subcritical => Ok((0..n).map(|j| harmonic_y(mid(j, n), n)).sum::<f64>() / n as f64),
        Regime::Supercritical => {
            let inv: f64 = (0..n)
                .map(|i| {
                    let y = mid(i, n);
                    let avg = (0..n).map(|j| a(y, mid(j, n))).sum::<f64>() / n as f64;
                    1.0 / avg
                })
                .sum();
            Ok(n as f64 / inv)
        }
        Regime::Classical => Err(Error::RegimeMismatch(
            "classical regime needs an s-independent field".into(),
        )),
        _ => Err(Error::RegimeMismatch(
            "no harmonic-mean formula for the critical regime".into(),
        )),
    }
}
