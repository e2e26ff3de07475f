use csl_core::ensemble::{run_ensemble, EnsembleOptions};
use csl_core::noise::NoiseMode;
use csl_core::scenarios;
use csl_core::tolerance::MC_SIGMAS;

#[test]
fn importance_weights_average_to_one() {
    let sc = scenarios::two_level(1.0, 0.0, 0.7, 0.5, 0.5, 50).unwrap();
    let stats = run_ensemble(&sc, 4000, NoiseMode::Raw, 11, &EnsembleOptions::default()).unwrap();
    assert!(
        stats.weight_mean.consistent_with(1.0, MC_SIGMAS),
        "{:?}",
        stats.weight_mean
    );
}

#[test]
fn cooked_frequencies_follow_born_rule() {
    let sc = scenarios::two_level(1.0, -1.0, 0.3, 1.0, 4.0, 200).unwrap();
    let stats = run_ensemble(&sc, 3000, NoiseMode::Cooked, 5, &EnsembleOptions::default()).unwrap();
    let f = stats.frequency_of(1.0).unwrap();
    let se = (0.3_f64 * 0.7 / 3000.0).sqrt();
    assert!((f.frequency - 0.3).abs() <= MC_SIGMAS * se, "{f:?}");
}

#[test]
fn raw_and_cooked_agree_when_weights_are_tame() {
    // lambda (da)^2 T = 1: weights spread but ESS stays large
    let sc = scenarios::two_level(1.0, 0.0, 0.6, 1.0, 1.0, 100).unwrap();
    let raw = run_ensemble(&sc, 6000, NoiseMode::Raw, 21, &EnsembleOptions::default()).unwrap();
    let cooked = run_ensemble(&sc, 6000, NoiseMode::Cooked, 22, &EnsembleOptions::default()).unwrap();
    assert!(raw.headline_allowed());
    let fr = raw.frequency_of(1.0).unwrap();
    let fc = cooked.frequency_of(1.0).unwrap();
    let se = (fr.std_error.powi(2) + fc.std_error.powi(2)).sqrt();
    assert!((fr.frequency - fc.frequency).abs() <= MC_SIGMAS * se, "{fr:?} {fc:?}");
}

#[test]
fn same_seed_same_ensemble() {
    let sc = scenarios::qubit_dephasing(1.0, 0.5, 1.0, 50).unwrap();
    let a = run_ensemble(&sc, 300, NoiseMode::Cooked, 99, &EnsembleOptions::default()).unwrap();
    let b = run_ensemble(&sc, 300, NoiseMode::Cooked, 99, &EnsembleOptions::default()).unwrap();
    assert_eq!(a, b);
    let c = run_ensemble(&sc, 300, NoiseMode::Cooked, 100, &EnsembleOptions::default()).unwrap();
    assert_ne!(a.mean_a, c.mean_a);
}
