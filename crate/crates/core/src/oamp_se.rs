//! Fixed point of the orthogonal-AMP state evolution and its equivalence
//! with the replica saddle point.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::priors::{Dmmse, Prior};
use crate::replica::{Init, ReplicaModel, SolverOptions};
use crate::spectra::{hilbert_pv, Potential, SpectralDensity};

/// phi(x) = (1 - pi lambda H(x))^2 + pi^2 lambda^2 rho(x)^2 with
/// pi H(x) the principal-value integral.
pub fn phi(rho: &SpectralDensity, lambda: f64, x: f64) -> Result<f64> {
    let pv = hilbert_pv(rho, x)?;
    let p = rho.pdf(x);
    Ok((1.0 - lambda * pv).powi(2) + (PI * lambda * p).powi(2))
}

#[derive(Debug, Clone)]
pub struct StateEvolutionPoint {
    pub theta: f64,
    pub omega: f64,
    pub phi_values: Vec<f64>,
    pub converged: bool,
    /// Gaussian prior: dmmse is identically one and theta vanishes.
    pub degenerate: bool,
    pub iterations: usize,
}

/// Settings for the state-evolution iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 5000,
        }
    }
}

fn omega_update(phi: &[f64], w: &[f64], theta: f64) -> Result<f64> {
    let (mut a, mut b) = (0.0, 0.0);
    for (&p, &wi) in phi.iter().zip(w) {
        let d = p + theta;
        if !(d > 0.0) {
            return Err(Error::numerical(format!(
                "phi + theta = {d} is not positive"
            )));
        }
        a += wi / d;
        b += wi * p / d;
    }
    Ok(1.0 - a / b)
}

/// theta = 1/dmmse(omega) - 1; infinite dmmse maps to the large-theta limit.
fn theta_of(prior: &Prior, omega: f64) -> Result<Option<f64>> {
    Ok(match prior.dmmse(omega)? {
        Dmmse::Finite(d) => Some(1.0 / d - 1.0),
        Dmmse::Infinite => None,
    })
}

pub fn se_fixed_point(
    rho: &SpectralDensity,
    prior: &Prior,
    lambda: f64,
    init_omega: f64,
) -> Result<StateEvolutionPoint> {
    se_fixed_point_with(rho, prior, lambda, init_omega, &SeOptions::default())
}

/// Damped alternation of theta = 1/dmmse(omega) - 1 and
/// omega = 1 - E[1/(phi + theta)] / E[phi/(phi + theta)].
pub fn se_fixed_point_with(
    rho: &SpectralDensity,
    prior: &Prior,
    lambda: f64,
    init_omega: f64,
    opts: &SeOptions,
) -> Result<StateEvolutionPoint> {
    if !(0.0..1.0).contains(&init_omega) {
        return Err(Error::invalid(format!(
            "initial omega must lie in [0, 1), got {init_omega}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let phi_values = rho
        .nodes()
        .iter()
        .map(|&x| phi(rho, lambda, x))
        .collect::<Result<Vec<f64>>>()?;
    let w = rho.weights();
    let mean_phi: f64 = phi_values.iter().zip(w).map(|(p, w)| p * w).sum();
    let degenerate = prior.is_gaussian();
    let mut omega = init_omega;
    let mut theta = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = match theta_of(prior, omega)? {
            Some(t) => {
                theta = t;
                omega_update(&phi_values, w, t)?
            }
            None => {
                theta = f64::INFINITY;
                1.0 - 1.0 / mean_phi
            }
        };
        let next = next.clamp(0.0, 1.0 - 1e-15);
        let delta = (1.0 - opts.damping) * (next - omega);
        omega += delta;
        if delta.abs() <= opts.tol {
            converged = true;
            break;
        }
    }
    if let Some(t) = theta_of(prior, omega)? {
        theta = t;
    }
    Ok(StateEvolutionPoint {
        theta,
        omega,
        phi_values,
        converged,
        degenerate,
        iterations,
    })
}

/// Side-by-side comparison of the mapped SE fixed point and the replica one.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub lambda: f64,
    pub theta: f64,
    pub omega: f64,
    pub m_se: f64,
    pub mhat_se: f64,
    pub m_replica: f64,
    pub mhat_replica: f64,
    /// sup |1 - phi - J| over nodes in the central 90% of the support.
    pub sup_gap_phi: f64,
    pub se_informative: bool,
    pub replica_informative: bool,
    pub se_converged: bool,
    pub replica_converged: bool,
    pub degenerate: bool,
}

impl EquivalenceReport {
    pub fn basin_mismatch(&self) -> bool {
        self.se_informative != self.replica_informative
    }

    /// max(|m_se - m_replica|, |mhat_se - mhat_replica|).
    pub fn gap(&self) -> f64 {
        (self.m_se - self.m_replica)
            .abs()
            .max((self.mhat_se - self.mhat_replica).abs())
    }
}

/// Starting omega for the informative SE branch.
pub const INFORMATIVE_OMEGA: f64 = 0.9;

/// Runs both solvers from informative starts and maps (theta, omega) to
/// (m, mhat) = (1 - mmse(omega), omega / (1 - omega)).
pub fn replica_equivalence_check(
    rho: &SpectralDensity,
    pot: &Potential,
    prior: &Prior,
    lambda: f64,
) -> Result<EquivalenceReport> {
    let se = se_fixed_point(rho, prior, lambda, INFORMATIVE_OMEGA)?;
    let mhat_se = se.omega / (1.0 - se.omega);
    let m_se = prior.overlap_of_snr(mhat_se)?;
    let model = ReplicaModel::new(rho, pot, prior, lambda)?;
    let sp = model.solve(Init::Informative, &SolverOptions::default())?;
    let (lo, hi) = rho.support();
    let margin = 0.05 * (hi - lo);
    let sup_gap_phi = rho
        .nodes()
        .iter()
        .zip(&se.phi_values)
        .zip(model.law().values())
        .filter(|((x, _), _)| **x >= lo + margin && **x <= hi - margin)
        .map(|((_, p), j)| (1.0 - p - j).abs())
        .fold(0.0, f64::max);
    let floor = prior.overlap_of_snr(0.0)? + 1e-6;
    Ok(EquivalenceReport {
        lambda,
        theta: se.theta,
        omega: se.omega,
        m_se,
        mhat_se,
        m_replica: sp.m_star,
        mhat_replica: sp.mhat_star,
        sup_gap_phi,
        se_informative: m_se > floor,
        replica_informative: sp.m_star > floor,
        se_converged: se.converged,
        replica_converged: sp.converged,
        degenerate: se.degenerate,
    })
}
