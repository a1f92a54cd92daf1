use ksstokes::diagnostics::{check_invariants, InvariantBudget};
use ksstokes::oracle::{homogeneous_exact, HomogeneousSolution};
use ksstokes::scenario::{preset_config, read_csv, run};
use ksstokes::timestepper::{step_until, StepControl};
use proptest::prelude::*;

fn small(preset: &str, extra: &[String]) -> ksstokes::ScenarioConfig {
    let mut o = vec![
        "grid.dims=[8, 8]".to_string(),
        "t_end=0.6".to_string(),
        "sample_interval=0.05".to_string(),
        "rates.assert=false".to_string(),
    ];
    o.extend_from_slice(extra);
    preset_config(preset, &o).unwrap()
}

#[test]
fn stepper_tracks_the_homogeneous_closed_form() {
    let cfg = preset_config("homogeneous_oracle", &["grid.dims=[4, 4, 4]".into()]).unwrap();
    let params = cfg.model_params().unwrap();
    let ctrl = StepControl::new(2e-3).unwrap();
    let (rho0, m0, c0) = cfg.homogeneous_data().unwrap();
    let sol = HomogeneousSolution::new(rho0, m0, c0).unwrap();
    let mut s = cfg.initial_state().unwrap();
    for t in [0.5, 1.0, 2.0, 5.0] {
        while s.t < t {
            s = step_until(&s, &params, &ctrl, t).unwrap();
        }
        let (r, m, c) = homogeneous_exact(&sol, t);
        for (field, exact) in [(&s.rho, r), (&s.m, m), (&s.c, c)] {
            for v in field.values() {
                assert!((v - exact).abs() < 1e-3, "t = {t}: {v} vs {exact}");
            }
        }
    }
}

#[test]
fn csv_output_verifies_like_the_live_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let mut cfg = small("smalldata_m", &[]);
    cfg.output.csv = Some(csv.clone());
    let live = run(&cfg).unwrap();
    let offline = read_csv(&csv).unwrap();
    assert_eq!(offline.len(), live.records.len());
    let report = check_invariants(&offline, &InvariantBudget::default());
    assert!(report.passed(), "{report}");
    assert_eq!(report.to_string(), live.invariants.to_string());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_runs_keep_every_invariant(
        seed in 0u64..10_000,
        preset in prop::sample::select(vec!["bounded_regime", "smalldata_rho", "smalldata_m", "balanced"]),
        alpha in 0.0f64..1.0,
    ) {
        let cfg = small(preset, &[format!("seed={seed}"), format!("model.alpha={alpha}")]);
        let s = run(&cfg).unwrap();
        prop_assert!(s.passed(), "{}", s);
        prop_assert!(s.energy_k.is_finite());
    }
}
