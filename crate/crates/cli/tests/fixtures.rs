//! Plain-error floors of the default studies, computed at doubled resolution.
//!
//! Regenerate with `cargo test -p oscidiff-cli --test fixtures -- --ignored`.

mod common;

use common::{fixtures_dir, study_config, STUDIES};
use oscidiff::harness::{make_fixture, Fixture};
use rayon::prelude::*;

#[test]
#[ignore = "doubled-resolution runs take several minutes"]
fn regenerate_fixtures() {
    std::fs::create_dir_all(fixtures_dir()).unwrap();
    STUDIES.par_iter().for_each(|&(name, p, r)| {
        let cfg = study_config(name, p, r);
        let field = cfg.field().unwrap();
        let fx = make_fixture(name, &field, p, r, &cfg.eps, &cfg.data, &cfg.settings(1).unwrap()).unwrap();
        fx.save(&fixtures_dir().join(format!("{name}.json"))).unwrap();
    });
}

#[test]
fn fixtures_match_the_current_study_setup() {
    for (name, p, r) in STUDIES {
        let fx = Fixture::load(&fixtures_dir().join(format!("{name}.json"))).unwrap();
        let cfg = study_config(name, p, r);
        assert_eq!(fx.settings, cfg.settings(1).unwrap().doubled(), "{name}");
        assert_eq!((fx.p, fx.r, &fx.eps), (p, r, &cfg.eps));
        assert_eq!(fx.field_id, cfg.field().unwrap().id());
        assert!(fx.grad_plain_floor > 0.0 && fx.grad_plain_floor == 0.5 * fx.grad_plain_limit);
    }
}
