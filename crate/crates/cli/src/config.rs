//! Experiment configuration: one JSON document per run.

use oscidiff::effmat::default_table_keys;
use oscidiff::fields::FieldSpec;
use oscidiff::harness::StudySettings;
use oscidiff::pdesolve::{is_dyadic, DataSpec};
use oscidiff::{io, CellGrid, PeriodicMatrixField, Regime, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

/// Where the coefficient field comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSource {
    /// An `oscidiff-field v1` file.
    File {
        file: PathBuf,
    },
    /// `study`, `static`, `ys`, `identity` or `identity2d`.
    Named(String),
    Spec(FieldSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    #[default]
    Auto,
    Classical,
    Subcritical,
    Critical,
    Supercritical,
}

/// Cell and macroscopic grids. Unset entries take dimension-dependent
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_x: Option<usize>,
    /// Fixed number of time steps; otherwise derived from `steps_per_period`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_steps: Option<usize>,
}

fn default_eps() -> Vec<f64> {
    vec![0.125, 0.0625, 0.03125]
}

fn default_u0abs() -> f64 {
    1.0
}

fn default_seed() -> u64 {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub field: FieldSource,
    pub p: f64,
    pub r: f64,
    #[serde(default)]
    pub regime: RegimeChoice,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Seed of the ellipticity probe vectors.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// `|u₀|` of the single critical cell solve used by `cell` and the skew check.
    #[serde(default = "default_u0abs")]
    pub u0abs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_keys: Option<Vec<f64>>,
    /// Record the estimate audit inside `converge`.
    #[serde(default)]
    pub audit: bool,
    /// Fixture name looked up in `$OSCIDIFF_FIXTURES` by `converge`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    /// Directory with `homog.traj` and `micro_eps<m>.traj` for `corrector`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<PathBuf>,
}

impl ExperimentConfig {
    /// A config with defaults for everything but the field and exponents.
    pub fn new(field: FieldSource, p: f64, r: f64) -> Self {
        ExperimentConfig {
            field,
            p,
            r,
            regime: RegimeChoice::Auto,
            grids: Grids::default(),
            eps: default_eps(),
            data: DataSpec::default(),
            out: None,
            seed: default_seed(),
            u0abs: default_u0abs(),
            table_keys: None,
            audit: false,
            fixture: None,
            trajectories: None,
        }
    }

    /// Parses and validates; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        let mut cfg: ExperimentConfig = match serde_json::from_value(value.clone()) {
            Ok(c) => c,
            Err(e) => return Err(CliError::Config(explain(&value, e))),
        };
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let FieldSource::File { file } = &mut cfg.field {
            rebase(file);
        }
        if let Some(t) = &mut cfg.trajectories {
            rebase(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        Self::parse(&text, &base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("field `{field}`: {msg}")));
        if !(self.p > 0.0 && self.p.is_finite()) {
            return bad("p", format!("must be positive, got {}", self.p));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad("r", format!("must be positive, got {}", self.r));
        }
        if let Err(e) = self.regime() {
            return bad("regime", e.to_string());
        }
        if self.eps.is_empty() {
            return bad("eps", "empty list".into());
        }
        if let Some(e) = self.eps.iter().find(|&&e| !is_dyadic(e)) {
            return bad("eps", format!("ε = {e} is not of the form 1/2^m"));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0] || w[1].is_nan()) {
            return bad("eps", "entries must be strictly decreasing".into());
        }
        if !(self.u0abs >= 0.0 && self.u0abs.is_finite()) {
            return bad("u0abs", format!("must be finite and ≥ 0, got {}", self.u0abs));
        }
        let g = &self.grids;
        if g.m_y.is_some_and(|m| m < 4) || g.m_s == Some(0) {
            return bad("grids", "need m_y ≥ 4 and m_s ≥ 1".into());
        }
        if g.n_x.is_some_and(|n| n < 3) || g.n_t == Some(0) {
            return bad("grids", "need n_x ≥ 3 and n_t ≥ 1".into());
        }
        if g.t_end.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("grids.t_end", "must be positive".into());
        }
        Ok(())
    }

    /// Regime after applying the override; `auto` follows `(r, p)`.
    pub fn regime(&self) -> oscidiff::Result<Regime> {
        match self.regime {
            RegimeChoice::Auto => Regime::from_exponents(self.r, self.p),
            RegimeChoice::Critical => Regime::from_exponents(2.0, self.p),
            RegimeChoice::Classical => Ok(Regime::Classical),
            RegimeChoice::Subcritical => Ok(Regime::Subcritical),
            RegimeChoice::Supercritical => Ok(Regime::Supercritical),
        }
    }

    pub fn field(&self) -> Result<PeriodicMatrixField, CliError> {
        let f = match &self.field {
            FieldSource::File { file } => io::read_field(file).map_err(|e| match e {
                oscidiff::Error::Io(io) => CliError::MissingArtifact(format!("{}: {io}", file.display())),
                e => CliError::Config(format!("field `field`: {}: {e}", file.display())),
            })?,
            FieldSource::Named(name) => match name.as_str() {
                "study" => PeriodicMatrixField::builtin(FieldSpec::trig1d_study())?,
                "static" => PeriodicMatrixField::builtin(FieldSpec::trig1d_static())?,
                "ys" => PeriodicMatrixField::builtin(FieldSpec::trig1d_ys())?,
                "identity" => PeriodicMatrixField::constant(Tensor::identity(1))?,
                "identity2d" => PeriodicMatrixField::constant(Tensor::identity(2))?,
                other => {
                    return Err(CliError::Config(format!(
                        "field `field`: unknown builtin \"{other}\" (study, static, ys, identity, identity2d)"
                    )))
                }
            },
            FieldSource::Spec(spec) => PeriodicMatrixField::builtin(spec.clone())
                .map_err(|e| CliError::Config(format!("field `field`: {e}")))?,
        };
        Ok(f)
    }

    pub fn cell_grid(&self, dim: usize) -> Result<CellGrid, CliError> {
        let d = CellGrid::default_for(dim);
        Ok(CellGrid::new(
            self.grids.m_y.unwrap_or(d.m_y),
            self.grids.m_s.unwrap_or(d.m_s),
        )?)
    }

    pub fn settings(&self, dim: usize) -> Result<StudySettings, CliError> {
        let d = StudySettings::default();
        let g = &self.grids;
        let (steps_per_period, min_steps) = match g.n_t {
            Some(n) => (0, n),
            None => (
                g.steps_per_period.unwrap_or(d.steps_per_period),
                g.min_steps.unwrap_or(d.min_steps),
            ),
        };
        Ok(StudySettings {
            n_x: g.n_x.unwrap_or(if dim == 1 { d.n_x } else { 63 }),
            t_end: g.t_end.unwrap_or(d.t_end),
            steps_per_period,
            min_steps,
            cell: self.cell_grid(dim)?,
            regime: Some(self.regime()?),
            table_keys: self.table_keys.clone().unwrap_or_else(default_table_keys),
            audit: self.audit,
        })
    }

    /// Pretty JSON echo; parsing it back yields an equal config.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Names the offending entry when typed deserialization fails.
fn explain(value: &serde_json::Value, err: serde_json::Error) -> String {
    if let Some(obj) = value.as_object() {
        if let Some(f) = obj.get("field") {
            let named = f.is_string() || f.get("file").is_some();
            if !named {
                if let Err(e) = serde_json::from_value::<FieldSpec>(f.clone()) {
                    return format!("field `field`: {e}");
                }
            }
        }
        for key in ["grids", "data"] {
            if let Some(v) = obj.get(key) {
                let r = match key {
                    "grids" => serde_json::from_value::<Grids>(v.clone()).err(),
                    _ => serde_json::from_value::<DataSpec>(v.clone()).err(),
                };
                if let Some(e) = r {
                    return format!("field `{key}`: {e}");
                }
            }
        }
    }
    err.to_string()
}
