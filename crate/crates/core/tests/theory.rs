//! Cross-module oracles for the theory side: Gaussian reductions, spectral
//! PCA, state-evolution equivalence and the Q equation.

use std::collections::BTreeMap;

use spiked_core::oamp_se::replica_equivalence_check;
use spiked_core::priors::{sparse_rademacher_eps, Prior};
use spiked_core::replica::{phase_curve, select_at, Init, QConstant, ReplicaModel, SolverOptions};
use spiked_core::spectra::{
    build_builtin_density, effective_coupling, pushforward_law, r_transform, BuiltinKind,
    Potential, SpectralDensity,
};
use spiked_core::tap::{bbp_outlier, pca_overlap_theory};
use spiked_core::Error;

fn builtin(kind: BuiltinKind) -> SpectralDensity {
    build_builtin_density(kind, &BTreeMap::new()).unwrap()
}

#[test]
fn semicircle_coupling_and_r_transform() {
    let rho = builtin(BuiltinKind::Semicircle);
    let pot = Potential::gaussian();
    for lambda in [0.5, 1.0, 2.0, 3.0] {
        let jc = effective_coupling(&rho, &pot, lambda).unwrap();
        for k in 0..=20 {
            let x = -2.0 + 0.2 * k as f64;
            assert!((jc.j(x) - lambda * (x - lambda)).abs() < 1e-12);
        }
        let law = pushforward_law(&rho, &jc);
        let sup = law.stieltjes_sup();
        assert!((sup - 1.0 / lambda).abs() < 1e-4);
        for k in 1..=10 {
            let s = 0.1 * k as f64;
            match r_transform(&law, s) {
                Ok(r) => assert!(
                    (r - (lambda * lambda * s - lambda * lambda)).abs() < 1e-8,
                    "lambda {lambda} s {s}"
                ),
                Err(Error::OutsideRange { sup: got, .. }) => {
                    assert!(s >= sup);
                    assert_eq!(got, sup);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn gaussian_prior_gaussian_noise_closed_form() {
    let rho = builtin(BuiltinKind::Semicircle);
    let pot = Potential::gaussian();
    let opts = SolverOptions::default();
    for lambda in [0.5, 1.5, 2.0, 3.0] {
        let model = ReplicaModel::new(&rho, &pot, &Prior::gaussian(), lambda).unwrap();
        let (sp, _) = select_at(&model, &opts).unwrap();
        let want = (1.0 - 1.0 / (lambda * lambda)).max(0.0);
        assert!(
            (sp.m_star - want).abs() < 1e-4,
            "lambda {lambda}: {} vs {want}",
            sp.m_star
        );
    }
}

#[test]
fn spectral_pca_semicircle() {
    let rho = builtin(BuiltinKind::Semicircle);
    for lambda in [0.3, 0.7] {
        assert_eq!(pca_overlap_theory(&rho, lambda).unwrap(), 0.0);
    }
    assert!(pca_overlap_theory(&rho, 1.0).unwrap() < 1e-4);
    assert!((pca_overlap_theory(&rho, 2.0).unwrap() - 0.75).abs() < 1e-8);
    assert!((bbp_outlier(&rho, 2.0).unwrap() - 2.5).abs() < 1e-8);
    assert!(pca_overlap_theory(&rho, 0.0).is_err());
}

#[test]
fn gaussian_prior_overlap_is_spectral_pca() {
    let opts = SolverOptions::default();
    for kind in [
        BuiltinKind::Semicircle,
        BuiltinKind::Quartic,
        BuiltinKind::Sestic,
        BuiltinKind::MarchenkoPastur,
    ] {
        let rho = builtin(kind);
        let pot = Potential::for_density(&rho).unwrap();
        for lambda in [1.5, 2.0, 3.0] {
            let model = ReplicaModel::new(&rho, &pot, &Prior::gaussian(), lambda).unwrap();
            let (sp, _) = select_at(&model, &opts).unwrap();
            let pca = pca_overlap_theory(&rho, lambda).unwrap();
            assert!(
                (sp.m_star - pca).abs() < 1e-3,
                "{kind:?} {lambda}: {} vs {pca}",
                sp.m_star
            );
        }
    }
}

#[test]
fn state_evolution_matches_replica() {
    let rho = builtin(BuiltinKind::Sestic);
    let pot = Potential::for_density(&rho).unwrap();
    for prior in [
        Prior::rademacher(),
        Prior::sparse_rademacher(sparse_rademacher_eps()).unwrap(),
    ] {
        for lambda in [1.5, 2.5] {
            let rep = replica_equivalence_check(&rho, &pot, &prior, lambda).unwrap();
            assert!(!rep.basin_mismatch());
            assert!(rep.gap() < 1e-6, "{rep:?}");
            assert!(rep.sup_gap_phi < 1e-4);
        }
    }
}

/// Q = c + K Q by plain fixed-point iteration.
fn picard_q(model: &ReplicaModel, m: f64, mhat: f64) -> Option<Vec<f64>> {
    let h = model.h_values(m, mhat).unwrap();
    let k = model.q_kernel(&h);
    let c = ReplicaModel::q_constant(m, mhat, QConstant::Derived);
    let n = h.len();
    let mut q = vec![c; n];
    for _ in 0..20000 {
        let next: Vec<f64> = (0..n)
            .map(|i| c + (0..n).map(|j| k[(i, j)] * q[j]).sum::<f64>())
            .collect();
        let delta = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta < 1e-14 {
            return Some(q);
        }
    }
    None
}

#[test]
fn q_solve_matches_picard() {
    let opts = SolverOptions::default();
    for (kind, lambda) in [
        (BuiltinKind::Quartic, 1.5),
        (BuiltinKind::Sestic, 2.0),
        (BuiltinKind::MarchenkoPastur, 1.5),
    ] {
        let rho = builtin(kind);
        let pot = Potential::for_density(&rho).unwrap();
        let model = ReplicaModel::new(&rho, &pot, &Prior::rademacher(), lambda).unwrap();
        let sp = model.solve(Init::Informative, &opts).unwrap();
        let direct = model
            .solve_q(sp.m_star, sp.mhat_star, QConstant::Derived)
            .unwrap();
        let picard = picard_q(&model, sp.m_star, sp.mhat_star).expect("Picard iteration converges");
        let gap = direct
            .iter()
            .zip(&picard)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8, "{kind:?}: {gap:e}");
    }
}

#[test]
fn phase_curve_shape() {
    let rho = builtin(BuiltinKind::Quartic);
    let pot = Potential::for_density(&rho).unwrap();
    let grid: Vec<f64> = (0..=12).map(|k| 0.25 * k as f64).collect();
    let curve = phase_curve(
        &rho,
        &pot,
        &Prior::rademacher(),
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(curve.mi_per_component[0], 0.0);
    assert!((curve.mmse_spike[0] - 1.0).abs() < 1e-8);
    for w in curve.mmse_spike.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
    for w in curve.mi_per_component.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
    assert!(curve.fallback.iter().all(|f| !f));
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("lambda,m_star,mmse_spike,mmse_vector,mi,surrogate_snr\n"));
    assert_eq!(text.lines().count(), grid.len() + 1);
}
