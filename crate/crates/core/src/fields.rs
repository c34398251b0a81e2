//! Periodic coefficient fields `a(y, s)` on the unit cell `[0,1)^N × [0,1)`,
//! together with the cell and macroscopic grids they are sampled on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

const TWO_PI: f64 = 2.0 * PI;

/// Regularity tag of a coefficient field.
///
/// Black-box evaluators cannot be checked for Hölder or time regularity, so
/// the tag is taken on trust and only used to emit warnings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    Continuous,
    C1InTime,
    Smooth,
}

/// Built-in analytic coefficient families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    /// `a ≡ A`; `matrix` is row-major `N×N`.
    Constant { matrix: Vec<f64> },
    /// 1D: `a(y,s) = mean + amplitude·sin(2πy)·g(s)` with
    /// `g(s) = offset + (1 − offset)·cos(2πs)` when `time_modulated`, else `g ≡ 1`.
    Trig1d {
        mean: f64,
        amplitude: f64,
        #[serde(default)]
        time_modulated: bool,
        #[serde(default)]
        offset: f64,
    },
    /// 2D laminate `a(y) = (mean + amplitude·sin(2πy₁))·I`.
    Laminate2d { mean: f64, amplitude: f64 },
    /// 2D full tensor with travelling-wave diagonal and a static shear term:
    ///
    /// ```text
    /// a11 = diag + wave·sin(2π(y1 + m s))
    /// a22 = diag + wave·cos(2π(y2 − m s))
    /// a12 = shear·sin(2πy1)·sin(2πy2)
    /// ```
    /// with `m = 1` if `moving`, else `0`.
    Trig2d {
        diag: f64,
        wave: f64,
        shear: f64,
        #[serde(default)]
        moving: bool,
    },
    /// 2D smoothed checkerboard `a = (m + δ·tanh(κ·sin 2πy₁·sin 2πy₂))·I`
    /// with `m = (low+high)/2`, `δ = (high−low)/2`.
    Checkerboard { low: f64, high: f64, sharpness: f64 },
}

impl FieldSpec {
    /// The canonical 1D example `(2 + sin 2πy)/4`.
    pub fn trig1d_static() -> Self {
        FieldSpec::Trig1d {
            mean: 0.5,
            amplitude: 0.25,
            time_modulated: false,
            offset: 0.0,
        }
    }

    /// `(2 + sin 2πy · cos 2πs)/4`.
    pub fn trig1d_ys() -> Self {
        FieldSpec::Trig1d {
            mean: 0.5,
            amplitude: 0.25,
            time_modulated: true,
            offset: 0.0,
        }
    }

    /// `1/2 + sin 2πy · (1 + cos 2πs)/8`: both the per-slice harmonic mean
    /// and the time average vary, so no regime has a trivial corrector.
    pub fn trig1d_study() -> Self {
        FieldSpec::Trig1d {
            mean: 0.5,
            amplitude: 0.25,
            time_modulated: true,
            offset: 0.5,
        }
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(match self {
            FieldSpec::Constant { matrix } => match matrix.len() {
                1 => 1,
                4 => 2,
                n => return Err(Error::invalid(format!("constant field needs 1 or 4 entries, got {n}"))),
            },
            FieldSpec::Trig1d { .. } => 1,
            FieldSpec::Laminate2d { .. } | FieldSpec::Trig2d { .. } | FieldSpec::Checkerboard { .. } => 2,
        })
    }

    fn eval(&self, y: [f64; 2], s: f64) -> Tensor {
        match *self {
            FieldSpec::Constant { ref matrix } => {
                if matrix.len() == 1 {
                    Tensor::from_1d(matrix[0])
                } else {
                    Tensor::from_2d(matrix[0], matrix[1], matrix[2], matrix[3])
                }
            }
            FieldSpec::Trig1d {
                mean,
                amplitude,
                time_modulated,
                offset,
            } => {
                let g = if time_modulated {
                    offset + (1.0 - offset) * (TWO_PI * s).cos()
                } else {
                    1.0
                };
                Tensor::from_1d(mean + amplitude * (TWO_PI * y[0]).sin() * g)
            }
            FieldSpec::Laminate2d { mean, amplitude } => Tensor::scalar(2, mean + amplitude * (TWO_PI * y[0]).sin()),
            FieldSpec::Trig2d {
                diag,
                wave,
                shear,
                moving,
            } => {
                let m = if moving { 1.0 } else { 0.0 };
                let a11 = diag + wave * (TWO_PI * (y[0] + m * s)).sin();
                let a22 = diag + wave * (TWO_PI * (y[1] - m * s)).cos();
                let a12 = shear * (TWO_PI * y[0]).sin() * (TWO_PI * y[1]).sin();
                Tensor::symmetric_2d(a11, a12, a22)
            }
            FieldSpec::Checkerboard { low, high, sharpness } => {
                let mid = 0.5 * (low + high);
                let half = 0.5 * (high - low);
                let w = (TWO_PI * y[0]).sin() * (TWO_PI * y[1]).sin();
                Tensor::scalar(2, mid + half * (sharpness * w).tanh())
            }
        }
    }

    /// Analytic `(λ, Λ)` and whether the field ignores `s`.
    fn bounds(&self) -> Result<(f64, f64, bool)> {
        let (lo, hi, s_indep) = match *self {
            FieldSpec::Constant { ref matrix } => {
                let t = if matrix.len() == 1 {
                    Tensor::from_1d(matrix[0])
                } else {
                    Tensor::from_2d(matrix[0], matrix[1], matrix[2], matrix[3])
                };
                if t.asymmetry() > 0.0 {
                    return Err(Error::AsymmetricCoefficient {
                        y: [0.0; 2],
                        s: 0.0,
                        defect: t.asymmetry(),
                    });
                }
                let (lo, hi) = t.sym_eig_range();
                (lo, hi, true)
            }
            FieldSpec::Trig1d {
                mean,
                amplitude,
                time_modulated,
                offset,
            } => {
                let g = if time_modulated {
                    offset.abs() + (1.0 - offset).abs()
                } else {
                    1.0
                };
                (mean - amplitude.abs() * g, mean + amplitude.abs() * g, !time_modulated)
            }
            FieldSpec::Laminate2d { mean, amplitude } => (mean - amplitude.abs(), mean + amplitude.abs(), true),
            FieldSpec::Trig2d {
                diag,
                wave,
                shear,
                moving,
            } => (
                diag - wave.abs() - shear.abs(),
                diag + wave.abs() + shear.abs(),
                !moving,
            ),
            FieldSpec::Checkerboard { low, high, sharpness } => {
                let mid = 0.5 * (low + high);
                let half = 0.5 * (high - low).abs();
                let t = sharpness.abs().tanh();
                (mid - half * t, mid + half * t, true)
            }
        };
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "field {self:?} is not uniformly elliptic (λ = {lo})"
            )));
        }
        Ok((lo, hi, s_indep))
    }
}

/// Coefficient tabulated on the node lattice `(i/M_y, j/M_s)`, interpolated
/// (bi/tri)linearly with periodic wrap.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedField {
    pub dim: usize,
    pub m_y: usize,
    pub m_s: usize,
    /// Node tensors; index `((i1 * m_y + i2) * m_s + j)` in 2D and
    /// `(i * m_s + j)` in 1D.
    pub nodes: Vec<Tensor>,
}

impl GriddedField {
    fn node(&self, i1: usize, i2: usize, j: usize) -> &Tensor {
        let (m, ms) = (self.m_y, self.m_s);
        let idx = if self.dim == 1 {
            (i1 % m) * ms + j % ms
        } else {
            ((i1 % m) * m + i2 % m) * ms + j % ms
        };
        &self.nodes[idx]
    }

    fn eval(&self, y: [f64; 2], s: f64) -> Tensor {
        let split = |x: f64, m: usize| {
            let t = x * m as f64;
            let i = t.floor();
            (i as usize % m, t - i)
        };
        let (i1, w1) = split(y[0], self.m_y);
        let (j, ws) = split(s, self.m_s);
        let mut acc = Tensor::zeros(self.dim);
        if self.dim == 1 {
            for (di, wi) in [(0, 1.0 - w1), (1, w1)] {
                for (dj, wj) in [(0, 1.0 - ws), (1, ws)] {
                    acc = acc + *self.node(i1 + di, 0, j + dj) * (wi * wj);
                }
            }
        } else {
            let (i2, w2) = split(y[1], self.m_y);
            for (d1, a1) in [(0, 1.0 - w1), (1, w1)] {
                for (d2, a2) in [(0, 1.0 - w2), (1, w2)] {
                    for (dj, aj) in [(0, 1.0 - ws), (1, ws)] {
                        acc = acc + *self.node(i1 + d1, i2 + d2, j + dj) * (a1 * a2 * aj);
                    }
                }
            }
        }
        acc
    }
}

pub type Evaluator = Arc<dyn Fn([f64; 2], f64) -> Tensor + Send + Sync>;

#[derive(Clone)]
enum Source {
    Builtin(FieldSpec),
    Gridded(Arc<GriddedField>),
    Custom(Evaluator),
}

/// A symmetric, uniformly elliptic, `□×J`-periodic matrix field.
#[derive(Clone)]
pub struct PeriodicMatrixField {
    dim: usize,
    source: Source,
    lambda: f64,
    lambda_max: f64,
    s_independent: bool,
    smoothness: Smoothness,
    id: String,
}

impl fmt::Debug for PeriodicMatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicMatrixField")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("lambda_max", &self.lambda_max)
            .field("s_independent", &self.s_independent)
            .finish()
    }
}

impl PeriodicMatrixField {
    pub fn builtin(spec: FieldSpec) -> Result<Self> {
        let dim = spec.dim()?;
        let (lambda, lambda_max, s_independent) = spec.bounds()?;
        let id = serde_json::to_string(&spec)?;
        Ok(PeriodicMatrixField {
            dim,
            source: Source::Builtin(spec),
            lambda,
            lambda_max,
            s_independent,
            smoothness: Smoothness::Smooth,
            id,
        })
    }

    pub fn constant(a: Tensor) -> Result<Self> {
        let matrix = if a.dim == 1 {
            vec![a.m[0][0]]
        } else {
            vec![a.m[0][0], a.m[0][1], a.m[1][0], a.m[1][1]]
        };
        Self::builtin(FieldSpec::Constant { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(Tensor::identity(dim)).expect("identity is elliptic")
    }

    /// Tabulated field; `(λ, Λ)` are the extreme node eigenvalues, which bound
    /// every interpolated value since interpolation is a convex combination.
    pub fn gridded(grid: GriddedField, id: impl Into<String>) -> Result<Self> {
        if grid.dim != 1 && grid.dim != 2 {
            return Err(Error::DimensionMismatch(format!("N = {}", grid.dim)));
        }
        let expected = grid.m_y.pow(grid.dim as u32) * grid.m_s;
        if grid.nodes.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} node tensors, got {}",
                grid.nodes.len()
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in &grid.nodes {
            let (a, b) = t.sym_eig_range();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        if !(lo > 0.0) {
            return Err(Error::invalid(format!(
                "gridded field is not uniformly elliptic (λ = {lo})"
            )));
        }
        let s_independent = (0..grid.nodes.len() / grid.m_s).all(|i| {
            let base = i * grid.m_s;
            grid.nodes[base..base + grid.m_s].iter().all(|t| *t == grid.nodes[base])
        });
        Ok(PeriodicMatrixField {
            dim: grid.dim,
            source: Source::Gridded(Arc::new(grid)),
            lambda: lo,
            lambda_max: hi,
            s_independent,
            smoothness: Smoothness::Continuous,
            id: id.into(),
        })
    }

    /// Arbitrary evaluator on the unit cell; the caller declares the bounds.
    pub fn custom<F>(
        dim: usize,
        f: F,
        lambda: f64,
        lambda_max: f64,
        s_independent: bool,
        smoothness: Smoothness,
    ) -> Result<Self>
    where
        F: Fn([f64; 2], f64) -> Tensor + Send + Sync + 'static,
    {
        if dim != 1 && dim != 2 {
            return Err(Error::DimensionMismatch(format!("N = {dim}")));
        }
        if !(lambda > 0.0 && lambda_max >= lambda) {
            return Err(Error::invalid(format!(
                "need 0 < λ ≤ Λ, got λ = {lambda}, Λ = {lambda_max}"
            )));
        }
        Ok(PeriodicMatrixField {
            dim,
            source: Source::Custom(Arc::new(f)),
            lambda,
            lambda_max,
            s_independent,
            smoothness,
            id: "custom".into(),
        })
    }

    /// Overrides the declared ellipticity constants.
    pub fn with_bounds(mut self, lambda: f64, lambda_max: f64) -> Self {
        self.lambda = lambda;
        self.lambda_max = lambda_max;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }
    pub fn is_s_independent(&self) -> bool {
        self.s_independent
    }
    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn spec(&self) -> Option<&FieldSpec> {
        match &self.source {
            Source::Builtin(s) => Some(s),
            _ => None,
        }
    }

    /// `a(y, s)` with both arguments wrapped into the unit cell first.
    pub fn eval(&self, y: [f64; 2], s: f64) -> Tensor {
        let y = [wrap(y[0]), if self.dim == 2 { wrap(y[1]) } else { 0.0 }];
        let s = wrap(s);
        match &self.source {
            Source::Builtin(spec) => spec.eval(y, s),
            Source::Gridded(g) => g.eval(y, s),
            Source::Custom(f) => f(y, s),
        }
    }

    /// `‖∂_s a(·, s)‖_∞` (operator norm, maximized over a `m×…` sample of
    /// the cell) by central differences.
    pub fn ds_sup_norm(&self, s: f64, m: usize) -> f64 {
        if self.s_independent {
            return 0.0;
        }
        let ds = 1e-6;
        let mut best: f64 = 0.0;
        let n2 = if self.dim == 2 { m } else { 1 };
        for i in 0..m {
            for j in 0..n2 {
                let y = [(i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64];
                let d = (self.eval(y, s + ds) - self.eval(y, s - ds)) * (0.5 / ds);
                let (lo, hi) = d.sym_eig_range();
                best = best.max(lo.abs()).max(hi.abs());
            }
        }
        best
    }
}

#[inline]
pub fn wrap(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// `a(x/ε, t/ε^r)` with periodic wrap.
pub fn sample_oscillating(field: &PeriodicMatrixField, x: [f64; 2], t: f64, eps: f64, r: f64) -> Tensor {
    debug_assert!(eps > 0.0 && r > 0.0);
    field.eval([x[0] / eps, x[1] / eps], t / eps.powf(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticityEstimate {
    pub lambda_est: f64,
    pub lambda_max_est: f64,
    pub witness_min: ([f64; 2], f64),
    pub witness_max: ([f64; 2], f64),
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Samples the field at `n_samples` quasi-random points and checks symmetry
/// and the sandwich `λ|ξ|² ≤ a ξ·ξ ≤ Λ|ξ|²`.
///
/// At each point the extreme Rayleigh quotients over all `ξ` are the extreme
/// eigenvalues, which are computed in closed form.
pub fn validate_ellipticity(field: &PeriodicMatrixField, n_samples: usize) -> Result<EllipticityEstimate> {
    const SLACK: f64 = 1e-12;
    let mut est = EllipticityEstimate {
        lambda_est: f64::INFINITY,
        lambda_max_est: f64::NEG_INFINITY,
        witness_min: ([0.0; 2], 0.0),
        witness_max: ([0.0; 2], 0.0),
    };
    for i in 1..=n_samples.max(1) {
        let (y, s) = if field.dim == 1 {
            ([halton(i, 2), 0.0], halton(i, 3))
        } else {
            ([halton(i, 2), halton(i, 3)], halton(i, 5))
        };
        let a = field.eval(y, s);
        let defect = a.asymmetry();
        if defect > SLACK * a.max_abs().max(1.0) {
            return Err(Error::AsymmetricCoefficient { y, s, defect });
        }
        let (lo, hi) = a.sym_eig_range();
        if lo < est.lambda_est {
            est.lambda_est = lo;
            est.witness_min = (y, s);
        }
        if hi > est.lambda_max_est {
            est.lambda_max_est = hi;
            est.witness_max = (y, s);
        }
    }
    if est.lambda_est < field.lambda - SLACK {
        let (y, s) = est.witness_min;
        return Err(Error::EllipticityViolation {
            y,
            s,
            value: est.lambda_est,
            lambda: field.lambda,
            lambda_max: field.lambda_max,
        });
    }
    if est.lambda_max_est > field.lambda_max + SLACK {
        let (y, s) = est.witness_max;
        return Err(Error::EllipticityViolation {
            y,
            s,
            value: est.lambda_max_est,
            lambda: field.lambda,
            lambda_max: field.lambda_max,
        });
    }
    Ok(est)
}

/// How the flux coefficient on a cell face is obtained from the field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceRule {
    /// Arithmetic mean of the values at the adjacent cell centres.
    ArithmeticMean,
    /// Field sampled at the face location itself.
    #[default]
    Midpoint,
}

/// Uniform periodic discretization of `□ × J`: `M_y` cells per spatial
/// direction (unknowns at cell centres) and `M_s` time slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    pub m_y: usize,
    pub m_s: usize,
    #[serde(default)]
    pub face_rule: FaceRule,
}

impl CellGrid {
    pub fn new(m_y: usize, m_s: usize) -> Result<Self> {
        let g = CellGrid {
            m_y,
            m_s,
            face_rule: FaceRule::Midpoint,
        };
        g.validate()?;
        Ok(g)
    }

    /// Default resolution for `dim`: `M_y = 64` (1D) or `48` (2D), `M_s = 64`.
    pub fn default_for(dim: usize) -> Self {
        CellGrid {
            m_y: if dim == 1 { 64 } else { 48 },
            m_s: 64,
            face_rule: FaceRule::Midpoint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_y < 4 || self.m_s < 2 {
            return Err(Error::invalid(format!(
                "cell grid needs M_y ≥ 4 and M_s ≥ 2, got M_y = {}, M_s = {}",
                self.m_y, self.m_s
            )));
        }
        Ok(())
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.m_y as f64
    }
    pub fn hs(&self) -> f64 {
        1.0 / self.m_s as f64
    }
    pub fn y_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hy()
    }
    pub fn s_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.hs()
    }
    pub fn n_space(&self, dim: usize) -> usize {
        self.m_y.pow(dim as u32)
    }
    /// Coordinates of cell centre `idx` (row-major, `y₁` slowest).
    pub fn point(&self, dim: usize, idx: usize) -> [f64; 2] {
        if dim == 1 {
            [self.y_center(idx), 0.0]
        } else {
            [self.y_center(idx / self.m_y), self.y_center(idx % self.m_y)]
        }
    }
}

/// `Ω = (0,1)^N` with `n_x` interior nodes per direction and `n_t` backward
/// Euler steps on `(0, T)`; homogeneous Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroGrid {
    pub dim: usize,
    pub n_x: usize,
    pub t_end: f64,
    pub n_t: usize,
}

impl MacroGrid {
    pub fn new(dim: usize, n_x: usize, t_end: f64, n_t: usize) -> Result<Self> {
        let g = MacroGrid { dim, n_x, t_end, n_t };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::DimensionMismatch(format!("N = {}", self.dim)));
        }
        if self.n_x < 8 || self.n_t < 4 || !(self.t_end > 0.0) {
            return Err(Error::invalid(format!(
                "macro grid needs n_x ≥ 8, n_t ≥ 4, T > 0; got n_x = {}, n_t = {}, T = {}",
                self.n_x, self.n_t, self.t_end
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n_x + 1) as f64
    }
    pub fn dt(&self) -> f64 {
        self.t_end / self.n_t as f64
    }
    /// Nodes per direction including the two boundary nodes.
    pub fn nodes_per_dir(&self) -> usize {
        self.n_x + 2
    }
    pub fn n_nodes(&self) -> usize {
        self.nodes_per_dir().pow(self.dim as u32)
    }
    pub fn node_point(&self, idx: usize) -> [f64; 2] {
        let m = self.nodes_per_dir();
        let h = self.h();
        if self.dim == 1 {
            [idx as f64 * h, 0.0]
        } else {
            [(idx / m) as f64 * h, (idx % m) as f64 * h]
        }
    }
    pub fn is_boundary(&self, idx: usize) -> bool {
        let m = self.nodes_per_dir();
        let edge = |i: usize| i == 0 || i == m - 1;
        if self.dim == 1 {
            edge(idx)
        } else {
            edge(idx / m) || edge(idx % m)
        }
    }
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }
}

/// Midpoint-rule mean `⟨a⟩_{y,s}` over the cell grid.
pub fn mean_ys(field: &PeriodicMatrixField, grid: &CellGrid) -> Tensor {
    let dim = field.dim();
    let n = grid.n_space(dim);
    let slices = if field.is_s_independent() { 1 } else { grid.m_s };
    let mut acc = Tensor::zeros(dim);
    for j in 0..slices {
        let s = grid.s_center(j);
        for idx in 0..n {
            acc = acc + field.eval(grid.point(dim, idx), s);
        }
    }
    acc * (1.0 / (n * slices) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trig_static() -> PeriodicMatrixField {
        PeriodicMatrixField::builtin(FieldSpec::trig1d_static()).unwrap()
    }

    #[test]
    fn identity_passes_with_unit_bounds() {
        let est = validate_ellipticity(&PeriodicMatrixField::identity(2), 256).unwrap();
        assert_eq!(est.lambda_est, 1.0);
        assert_eq!(est.lambda_max_est, 1.0);
    }

    #[test]
    fn trig_field_passes_with_exact_bounds() {
        let f = trig_static();
        assert_eq!((f.lambda(), f.lambda_max()), (0.25, 0.75));
        let est = validate_ellipticity(&f, 4096).unwrap();
        assert!(est.lambda_est >= 0.25 && est.lambda_est < 0.2501);
        assert!(est.lambda_max_est <= 0.75 && est.lambda_max_est > 0.7499);
    }

    #[test]
    fn overstated_lambda_is_rejected_near_three_quarters() {
        let f = trig_static().with_bounds(0.3, 0.75);
        match validate_ellipticity(&f, 4096) {
            Err(Error::EllipticityViolation { y, value, .. }) => {
                assert!((y[0] - 0.75).abs() < 0.01, "witness y = {}", y[0]);
                assert!(value < 0.3);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_custom_field_is_rejected() {
        let f = PeriodicMatrixField::custom(
            2,
            |_, _| Tensor::from_2d(1.0, 0.1, 0.0, 1.0),
            0.5,
            2.0,
            true,
            Smoothness::Smooth,
        )
        .unwrap();
        assert!(matches!(
            validate_ellipticity(&f, 16),
            Err(Error::AsymmetricCoefficient { .. })
        ));
    }

    #[test]
    fn oscillating_sample_examples() {
        let f = trig_static();
        let a = sample_oscillating(&f, [0.25, 0.0], 0.3, 0.25, 1.0);
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        let ys = PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap();
        let b = sample_oscillating(&ys, [0.3, 0.0], 0.7, 1.0, 2.0);
        assert_eq!(b, ys.eval([0.3, 0.0], 0.7));
        // s-independent: no t or r dependence
        let c1 = sample_oscillating(&f, [0.37, 0.0], 0.1, 0.125, 1.0);
        let c2 = sample_oscillating(&f, [0.37, 0.0], 0.9, 0.125, 3.0);
        assert_eq!(c1, c2);
    }

    #[test]
    fn mean_examples() {
        let g = CellGrid::new(64, 64).unwrap();
        let a = Tensor::symmetric_2d(2.0, 0.3, 1.0);
        let c = PeriodicMatrixField::constant(a).unwrap();
        assert!((mean_ys(&c, &g) - a).max_abs() < 1e-12);
        let ys = PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap();
        assert!((mean_ys(&ys, &g).get(0, 0) - 0.5).abs() < 1e-12);
        assert!((mean_ys(&trig_static(), &g).get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gridded_interpolation_reproduces_nodes_and_bounds() {
        let (m_y, m_s) = (4, 2);
        let nodes = (0..m_y * m_s)
            .map(|k| Tensor::from_1d(1.0 + (k / m_s) as f64 + 0.5 * (k % m_s) as f64))
            .collect();
        let g = GriddedField {
            dim: 1,
            m_y,
            m_s,
            nodes,
        };
        let f = PeriodicMatrixField::gridded(g, "test").unwrap();
        assert_eq!(f.eval([0.25, 0.0], 0.5).get(0, 0), 2.5);
        // halfway between node 3 and node 0 (wrap)
        assert!((f.eval([0.875, 0.0], 0.0).get(0, 0) - 2.5).abs() < 1e-14);
        assert_eq!(f.lambda(), 1.0);
        assert_eq!(f.lambda_max(), 4.5);
        validate_ellipticity(&f, 512).unwrap();
    }

    #[test]
    fn grids_validate_minimum_sizes() {
        assert!(CellGrid::new(3, 8).is_err());
        assert!(CellGrid::new(4, 1).is_err());
        assert!(MacroGrid::new(1, 7, 1.0, 4).is_err());
        assert!(MacroGrid::new(1, 8, 0.0, 4).is_err());
        assert!(MacroGrid::new(1, 8, 1.0, 4).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn spatial_and_temporal_periodicity(
                x in 0.0f64..1.0, t in 0.0f64..1.0,
                k in -4i32..4, m in 1u32..5, r in 0.5f64..3.0,
            ) {
                let f = PeriodicMatrixField::builtin(FieldSpec::Trig2d {
                    diag: 1.0, wave: 0.4, shear: 0.2, moving: true,
                }).unwrap();
                let eps = 0.5f64.powi(m as i32);
                let base = sample_oscillating(&f, [x, 0.3], t, eps, r);
                let shifted = sample_oscillating(&f, [x + eps * k as f64, 0.3], t, eps, r);
                prop_assert!((base - shifted).max_abs() < 1e-9);
                let later = sample_oscillating(&f, [x, 0.3], t + eps.powf(r), eps, r);
                prop_assert!((base - later).max_abs() < 1e-8);
            }

            #[test]
            fn mean_of_symmetric_field_is_symmetric(shear in -0.3f64..0.3, wave in 0.0f64..0.3) {
                let f = PeriodicMatrixField::builtin(FieldSpec::Trig2d {
                    diag: 1.0, wave, shear, moving: true,
                }).unwrap();
                let m = mean_ys(&f, &CellGrid::new(8, 4).unwrap());
                prop_assert!(m.asymmetry() < 1e-15);
            }
        }
    }
}
