use csl_core::ensemble::{lindblad_propagate, DensityMatrix};
use csl_core::hilbert::{
    commutator, double_commutator, eigendecompose, expectation, herm_exp, interaction_picture, max_abs, random,
};
use csl_core::noise::{CollapseParams, TimeGrid};
use csl_core::postulate::{
    build_window_state, collapse_residual, eq1_residual, gaussian_state, orthogonalize, Generator, MomentumGrid,
    MomentumState, Superposition,
};
use csl_core::scenarios;
use csl_core::stats::pairwise_sum;
use csl_core::trajectory::{collapse_step, reduced_step};
use csl_core::C64;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exponential_is_unitary_and_composes(seed in any::<u64>(), dim in 2usize..7, s in -3.0..3.0f64, t in -3.0..3.0f64) {
        let h = random::hermitian(dim, &mut rng(seed));
        let us = herm_exp(&h, C64::new(0.0, s)).unwrap();
        let ut = herm_exp(&h, C64::new(0.0, t)).unwrap();
        let ust = herm_exp(&h, C64::new(0.0, s + t)).unwrap();
        let id = DMatrix::<C64>::identity(dim, dim);
        prop_assert!(max_abs(&(&us * us.adjoint() - &id)) < 1e-10);
        prop_assert!(max_abs(&(&us * &ut - &ust)) < 1e-10);
    }

    #[test]
    fn interaction_picture_keeps_spectrum(seed in any::<u64>(), dim in 2usize..7, t in -5.0..5.0f64, hbar in 0.2..3.0f64) {
        let mut r = rng(seed);
        let a = random::hermitian(dim, &mut r);
        let h = random::hermitian(dim, &mut r);
        let at = interaction_picture(&a, &h, t, hbar).unwrap();
        let e0 = eigendecompose(&a).unwrap().eigenvalues;
        let e1 = eigendecompose(&at).unwrap().eigenvalues;
        for (x, y) in e0.iter().zip(&e1) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn double_commutator_expectation_is_real(seed in any::<u64>(), dim in 2usize..7) {
        let mut r = rng(seed);
        let a = random::hermitian(dim, &mut r);
        let h = random::hermitian(dim, &mut r);
        let psi = random::state(dim, &mut r);
        let raw = commutator(a.matrix(), &commutator(a.matrix(), h.matrix()));
        let v = psi.as_dvector();
        let z = v.dotc(&(&raw * v));
        prop_assert!(z.im.abs() < 1e-10 * z.re.abs().max(1.0));
        let dc = double_commutator(&a, &h).unwrap();
        prop_assert!((expectation(&dc, &psi).unwrap() - z.re).abs() < 1e-10 * z.re.abs().max(1.0));
    }

    #[test]
    fn collapse_factor_is_reduced_factor_times_scalar(
        seed in any::<u64>(), dim in 2usize..6, w in -4.0..4.0f64, dt in 0.001..0.2f64, lambda in 0.1..2.0f64,
    ) {
        let mut r = rng(seed);
        let a = random::hermitian(dim, &mut r);
        let psi = random::state(dim, &mut r);
        let params = CollapseParams::new(lambda, 1.0).unwrap();
        let full = collapse_step(&psi, &a, w, dt, &params).unwrap();
        let reduced = reduced_step(&psi, &a, w, dt, &params).unwrap();
        let c = (-w * w * dt / (4.0 * lambda)).exp();
        for (x, y) in full.amplitudes().iter().zip(reduced.amplitudes()) {
            prop_assert!((x - y * c).norm() < 1e-12 * y.norm().max(1.0));
        }
    }

    #[test]
    fn lindblad_keeps_trace_and_hermiticity(seed in any::<u64>(), dim in 2usize..5, lambda in 0.1..1.0f64) {
        let sc = scenarios::random_matrix(dim, lambda, 1.0, 20, seed).unwrap();
        let rho0 = DensityMatrix::pure(sc.psi0()).unwrap();
        let series = lindblad_propagate(&rho0, &sc, 10).unwrap();
        for rho in &series.rhos {
            prop_assert!((rho.trace() - C64::new(1.0, 0.0)).norm() < 1e-10);
            prop_assert!(max_abs(&(rho - rho.adjoint())) < 1e-10);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive(xs in prop::collection::vec(-1e3..1e3f64, 0..300)) {
        let naive: f64 = xs.iter().sum();
        let scale: f64 = xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-12 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn momentum_position_round_trip(p1 in -6.0..-0.5f64, width in 0.5..5.0f64, n in 0u32..5, b in -20.0..20.0f64) {
        let g = MomentumGrid::new(1024, -8.0, 8.0).unwrap();
        let s = build_window_state(&g, p1, p1 + width, n, b).unwrap();
        let back = MomentumState::from_position(g, &s.to_position()).unwrap();
        for (x, y) in s.amplitudes().iter().zip(back.amplitudes()) {
            prop_assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn disjoint_windows_conserve_every_generator(
        lo in -7.0..-1.0f64, gap in 0.05..1.0f64, n1 in 0u32..5, n2 in 0u32..5,
        b1 in -10.0..10.0f64, b2 in -10.0..10.0f64, phase in 0.0..6.28f64,
        b in -50.0..50.0f64, a in -50.0..50.0f64, mass in 0.1..10.0f64,
    ) {
        let g = MomentumGrid::new(512, -8.0, 8.0).unwrap();
        let mid = lo + 0.5 * (7.0 + lo).max(0.5);
        let s1 = build_window_state(&g, lo, mid, n1, b1).unwrap();
        let s2 = build_window_state(&g, mid + gap, 7.5, n2, b2).unwrap();
        prop_assert_eq!(eq1_residual(&s1, &s2).unwrap(), 0.0);
        let sup = Superposition::new(
            C64::new(0.6, 0.0),
            C64::from_polar(0.8, phase),
            s1,
            s2,
        ).unwrap();
        let gp = Generator::Momentum { b };
        prop_assert!(collapse_residual(&sup, gp).unwrap() <= 1e-10);
        let ge = Generator::Energy { a, mass };
        prop_assert!(collapse_residual(&sup, ge).unwrap() <= 1e-10);
    }

    #[test]
    fn residual_ignores_compensated_phases(
        chi1 in 0.0..6.28f64, chi2 in 0.0..6.28f64, b in -10.0..10.0f64, shift in 1.0..6.0f64,
    ) {
        let g = MomentumGrid::new(512, -8.0, 8.0).unwrap();
        let s1 = gaussian_state(&g, -shift, 1.0, 0.3).unwrap();
        let s2 = orthogonalize(&s1, &gaussian_state(&g, shift, 0.8, -0.2).unwrap()).unwrap();
        let (a1, a2) = (C64::new(0.6, 0.0), C64::new(0.0, 0.8));
        let base = Superposition::new(a1, a2, s1.clone(), s2.clone()).unwrap();
        let rotate = |s: &MomentumState, chi: f64| {
            MomentumState::new(g, s.amplitudes().iter().map(|z| z * C64::from_polar(1.0, chi)).collect()).unwrap()
        };
        let turned = Superposition::new(
            a1 * C64::from_polar(1.0, -chi1),
            a2 * C64::from_polar(1.0, -chi2),
            rotate(&s1, chi1),
            rotate(&s2, chi2),
        ).unwrap();
        let gen = Generator::Momentum { b };
        let r0 = collapse_residual(&base, gen).unwrap();
        let r1 = collapse_residual(&turned, gen).unwrap();
        prop_assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn grid_spacing_duality(k in 8u32..14, lo in -10.0..0.0f64, span in 0.1..20.0f64) {
        let g = MomentumGrid::new(1 << k, lo, lo + span).unwrap();
        prop_assert!((g.dx() * g.dp() * (1u64 << k) as f64 - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }
}

#[test]
fn time_grid_rejects_zero_steps() {
    assert!(TimeGrid::new(1.0, 0).is_err());
}
