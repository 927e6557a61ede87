//! Property tests for scalar identities, transforms, metrics and the TAP update.

use std::collections::BTreeMap;

use faer::Mat;
use proptest::prelude::*;
use spiked_core::priors::Prior;
use spiked_core::spectra::{
    build_builtin_density, r_transform, BuiltinKind, PushforwardLaw, SpectralDensity,
};
use spiked_core::tap::{informative_init, metrics, run_tap, TapConfig};

fn prior_strategy() -> impl Strategy<Value = Prior> {
    prop_oneof![
        Just(Prior::rademacher()),
        (0.05f64..0.95).prop_map(|e| Prior::sparse_rademacher(e).unwrap()),
        (0.05f64..0.95).prop_map(|e| Prior::two_point(e).unwrap()),
        Just(Prior::gaussian()),
    ]
}

fn kind_strategy() -> impl Strategy<Value = BuiltinKind> {
    prop::sample::select(BuiltinKind::ALL.to_vec())
}

fn builtin(kind: BuiltinKind) -> SpectralDensity {
    build_builtin_density(kind, &BTreeMap::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nishimori_identity(prior in prior_strategy(), mhat in 0.0f64..60.0) {
        let (a, b) = prior.posterior_moments(mhat).unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn overlap_is_monotone_and_bounded(prior in prior_strategy(), a in 0.0f64..30.0, d in 0.0f64..5.0) {
        let lo = prior.overlap_of_snr(a).unwrap();
        let hi = prior.overlap_of_snr(a + d).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(hi >= lo - 1e-9);
    }

    #[test]
    fn denoiser_is_increasing_and_inside_hull(prior in prior_strategy(), a in -20.0f64..20.0, b in 0.0f64..10.0) {
        let lo = prior.denoise(a, b);
        let hi = prior.denoise(a + 0.1, b);
        prop_assert!(hi >= lo - 1e-12);
        if !prior.is_gaussian() {
            let min = prior.atoms().iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
            let max = prior.atoms().iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo >= min - 1e-12 && lo <= max + 1e-12);
        }
    }

    #[test]
    fn r_transform_inverts_stieltjes(kind in kind_strategy(), frac in 0.01f64..0.95) {
        let rho = builtin(kind);
        let law = PushforwardLaw::of_density(&rho);
        let (_, hi) = rho.support();
        let s = frac * law.stieltjes(hi + 0.05 * (hi - rho.support().0));
        let r = r_transform(&law, s).unwrap();
        let back = law.stieltjes(r + 1.0 / s);
        prop_assert!((back - s).abs() < 1e-10 * s.max(1.0), "{back} vs {s}");
    }

    #[test]
    fn density_is_normalized(kind in kind_strategy()) {
        let rho = builtin(kind);
        prop_assert!((rho.expect(|_| 1.0) - 1.0).abs() < 1e-6);
        prop_assert!(rho.mean().abs() < 1e-6);
        prop_assert!((rho.variance() - 1.0).abs() < 1e-6);
        prop_assert!(rho.pdf_values().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn stieltjes_decreases_above_support(kind in kind_strategy(), a in 0.01f64..3.0, d in 0.01f64..3.0) {
        let rho = builtin(kind);
        let law = PushforwardLaw::of_density(&rho);
        let hi = rho.support().1;
        prop_assert!(law.stieltjes(hi + a) > law.stieltjes(hi + a + d));
    }

    #[test]
    fn spike_metrics_identities(xs in prop::collection::vec(-2.0f64..2.0, 1..40), scale in -1.5f64..1.5) {
        let ms: Vec<f64> = xs.iter().enumerate().map(|(i, x)| scale * x + 0.1 * (i as f64).sin()).collect();
        let n = xs.len() as f64;
        let m = metrics(&ms, &xs, true).unwrap();
        let mut frob = 0.0;
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                frob += (xs[i] * xs[j] - ms[i] * ms[j]).powi(2);
            }
        }
        prop_assert!((m.mse_spike - frob / (n * n)).abs() < 1e-10 * (1.0 + frob / (n * n)));
        let neg: Vec<f64> = ms.iter().map(|v| -v).collect();
        let f = metrics(&neg, &xs, true).unwrap();
        prop_assert!((f.mse_spike - m.mse_spike).abs() < 1e-12);
        prop_assert!((f.mse_vector - m.mse_vector).abs() < 1e-12);
        prop_assert!(m.mse_spike >= 0.0 && m.mse_vector >= 0.0);
    }

    #[test]
    fn informative_start_has_requested_correlation(
        xs in prop::collection::vec(prop_oneof![Just(-1.0f64), Just(1.0f64)], 8..200),
        c in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let m = informative_init(&xs, c, seed).unwrap();
        let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xn = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let corr = m.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>() / (mn * xn);
        prop_assert!((corr - c).abs() < 1e-10);
        prop_assert!((mn * mn - xs.len() as f64).abs() < 1e-8);
    }

    #[test]
    fn tap_step_is_damped_denoiser(
        prior in prior_strategy(),
        tau in 0.0f64..0.99,
        gamma in 0.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let n = 16;
        let jy = Mat::from_fn(n, n, |i, j| 0.2 * (((i + j) as f64 + seed as f64).sin()));
        let m0: Vec<f64> = (0..n).map(|i| 0.7 * ((i as u64 * 31 + seed) as f64).cos()).collect();
        let cfg = TapConfig { tau, max_iter: 1, ..TapConfig::default() };
        let law = PushforwardLaw::point_mass(0.0);
        let run = run_tap(&jy, &prior, &law, &m0, &cfg, Some(gamma), None).unwrap();
        prop_assert_eq!(run.iterations, 1);
        prop_assert!(run.q_tilde_history[0] >= 0.0);
        for i in 0..n {
            let h: f64 = (0..n).map(|j| jy[(i, j)] * m0[j]).sum();
            let want = tau * m0[i] + (1.0 - tau) * prior.denoise(h, gamma);
            prop_assert!((run.m_final[i] - want).abs() < 1e-14);
        }
        prop_assert!(!(run.converged && run.diverged));
    }
}
