use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coefficient is not symmetric at y={y:?}, s={s}: |a - a^T| = {defect:e}")]
    AsymmetricCoefficient { y: [f64; 2], s: f64, defect: f64 },

    #[error("ellipticity violated at y={y:?}, s={s}: Rayleigh quotient {value} outside [{lambda}, {lambda_max}]")]
    EllipticityViolation {
        y: [f64; 2],
        s: f64,
        value: f64,
        lambda: f64,
        lambda_max: f64,
    },

    #[error("linear solver did not converge{}: relative residual {residual:e} after {iterations} iterations", slice_note(*.slice))]
    SolverDiverged {
        residual: f64,
        iterations: usize,
        slice: Option<usize>,
    },

    #[error("time-periodic cell solve did not converge: defect {defect:e} after {sweeps} sweeps")]
    PeriodicityNotReached { defect: f64, sweeps: usize },

    #[error("Newton iteration stalled at step {step}: residual {residual:e}")]
    NewtonStalled { step: usize, residual: f64 },

    #[error("line search failed at step {step} after 20 halvings (residual {residual:e})")]
    StepRejected { step: usize, residual: f64 },

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{statement} violated: {detail}")]
    BoundViolated { statement: String, detail: String },

    #[error("homogenized matrix not symmetric: max |a - a^T| = {defect:e}")]
    SymmetryViolated { defect: f64 },

    #[error(
        "skew part ({j},{k}) = {skew:e} differs from the time-derivative integral {integral:e} by more than {tol:e}"
    )]
    SkewFormulaMismatch {
        j: usize,
        k: usize,
        skew: f64,
        integral: f64,
        tol: f64,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("critical cell solve failed at u0abs = {u0abs}: {source}")]
    TableEntry {
        u0abs: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn slice_note(slice: Option<usize>) -> String {
    match slice {
        Some(j) => format!(" at time slice {j}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
