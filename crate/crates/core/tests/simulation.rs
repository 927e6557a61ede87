//! Finite-N checks of the TAP pipeline against theory.

use std::collections::BTreeMap;

use spiked_core::ensemble::{make_observation, SymmetricEigen};
use spiked_core::priors::Prior;
use spiked_core::replica::{select_at, ReplicaModel, SolverOptions};
use spiked_core::spectra::{
    build_builtin_density, effective_coupling, pushforward_law, BuiltinKind, Potential,
};
use spiked_core::tap::{
    informative_init, pca_init, pca_overlap_theory, run_tap_warm, run_trial, InitMode, OnsagerMode,
    TapConfig, TrialSetup,
};

#[test]
fn power_iteration_overlap_matches_theory() {
    let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
    let obs = make_observation(&Prior::rademacher(), &rho, 3.0, 1000, 21, false).unwrap();
    let p = pca_init(&obs.y, 1000, 21).unwrap();
    assert!(p.converged && !p.degenerate);
    let norm: f64 = p.vector.iter().map(|v| v * v).sum();
    assert!((norm - 1000.0).abs() < 1e-8);
    let cos = p
        .vector
        .iter()
        .zip(&obs.x_star)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .abs()
        / 1000.0;
    let theory = pca_overlap_theory(&rho, 3.0).unwrap().sqrt();
    assert!((cos - theory).abs() < 0.05, "{cos} vs {theory}");
    let (top, _) = SymmetricEigen::new(&obs.y).unwrap().top();
    assert!((p.eigenvalue - top).abs() < 1e-6);
}

#[test]
fn replica_consistent_start_is_stable() {
    let lambda = 3.0;
    let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
    let pot = Potential::for_density(&rho).unwrap();
    let prior = Prior::rademacher();
    let model = ReplicaModel::new(&rho, &pot, &prior, lambda).unwrap();
    let (sp, _) = select_at(&model, &SolverOptions::default()).unwrap();
    let jc = effective_coupling(&rho, &pot, lambda).unwrap();
    let law = pushforward_law(&rho, &jc);
    let obs = make_observation(&prior, &rho, lambda, 600, 5, false).unwrap();
    let jy = SymmetricEigen::new(&obs.y).unwrap().apply(|x| jc.j(x));
    let scale = sp.m_star.sqrt();
    let m0: Vec<f64> = informative_init(&obs.x_star, scale, 5)
        .unwrap()
        .iter()
        .map(|v| scale * v)
        .collect();
    for mode in [OnsagerMode::FixedFromReplica, OnsagerMode::Adaptive] {
        let cfg = TapConfig {
            max_iter: 50,
            tol: 1e-14,
            onsager_mode: mode,
            ..TapConfig::default()
        };
        let run = run_tap_warm(
            &jy,
            &prior,
            &law,
            &m0,
            &m0,
            &cfg,
            Some(sp.mhat_star),
            Some(&obs.x_star),
        )
        .unwrap();
        assert_eq!(run.q_tilde_history.len(), 50);
        for q in &run.q_tilde_history {
            assert!(
                (q - sp.m_star).abs() < 0.05,
                "{mode:?}: {q} vs {}",
                sp.m_star
            );
        }
    }
}

#[test]
fn zero_snr_trial_has_unit_spike_error() {
    let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
    let pot = Potential::for_density(&rho).unwrap();
    let prior = Prior::rademacher();
    let jc = effective_coupling(&rho, &pot, 0.0).unwrap();
    let law = pushforward_law(&rho, &jc);
    let setup = TrialSetup {
        rho: &rho,
        prior: &prior,
        coupling: &jc,
        law: &law,
        n: 200,
        config: TapConfig {
            onsager_mode: OnsagerMode::Adaptive,
            init_mode: InitMode::Informative(0.5),
            ..TapConfig::default()
        },
        replica_gamma: None,
        power_iters: 500,
    };
    let out = run_trial(&setup, 3).unwrap();
    assert!(out.run.converged);
    assert!((out.metrics().mse_spike - 1.0).abs() < 1e-6);
    let again = run_trial(&setup, 3).unwrap();
    assert_eq!(out.run.m_final, again.run.m_final);
}
