#![allow(dead_code)]

use oscidiff_cli::{ExperimentConfig, FieldSource};
use std::path::PathBuf;

/// The default 1D convergence studies as `(fixture name, p, r)`.
pub const STUDIES: [(&str, f64, f64); 5] = [
    ("fde_r1", 0.5, 1.0),
    ("pme_r1", 1.5, 1.0),
    ("fde_r2", 0.5, 2.0),
    ("pme_r2", 1.5, 2.0),
    ("fde_r3", 0.5, 3.0),
];

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn study_config(name: &str, p: f64, r: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(FieldSource::Named("study".into()), p, r);
    cfg.fixture = Some(name.into());
    cfg.audit = true;
    cfg
}
