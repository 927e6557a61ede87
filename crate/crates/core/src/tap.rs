//! TAP iterations on the pre-processed matrix J(Y), their initializations,
//! error metrics and the spectral-PCA baseline.

use faer::{Col, Mat};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{make_observation, stream_rng, SymmetricEigen};
use crate::error::{Error, Result};
use crate::priors::Prior;
use crate::spectra::{r_transform, EffectiveCoupling, PushforwardLaw, SpectralDensity};

/// Stream offset for random starts of initializations.
pub const INIT_STREAM: u64 = 4;

/// Upper limit of q = |m|^2 / N before a run is declared diverged.
pub const DIVERGENCE_Q: f64 = 1.1;

/// Margin kept below the invertible range when clamping 1 - q.
pub const CLAMP_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnsagerMode {
    /// gamma^t = -R(1 - q^t).
    Adaptive,
    /// gamma fixed to the replica value mhat_*.
    FixedFromReplica,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Pca,
    /// Correlation c in (0, 1] with the ground truth.
    Informative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampPolicy {
    Error,
    ClampToRange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapConfig {
    pub tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub onsager_mode: OnsagerMode,
    pub init_mode: InitMode,
    pub clamp_policy: ClampPolicy,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig {
            tau: 0.9,
            max_iter: 2000,
            tol: 1e-7,
            onsager_mode: OnsagerMode::FixedFromReplica,
            init_mode: InitMode::Pca,
            clamp_policy: ClampPolicy::ClampToRange,
        }
    }
}

impl TapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid(format!(
                "tau must lie in [0, 1), got {}",
                self.tau
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        if let InitMode::Informative(c) = self.init_mode {
            check_correlation(c)?;
        }
        Ok(())
    }
}

fn check_correlation(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!(
            "initial correlation must lie in (0, 1], got {c}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse_spike: f64,
    pub mse_vector: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone)]
pub struct TapRun {
    pub m_final: Vec<f64>,
    pub q_tilde_history: Vec<f64>,
    pub gamma_history: Vec<f64>,
    /// Spike MSE after each update, empty without ground truth.
    pub mse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub clamp_warnings: usize,
    pub metrics: Option<Metrics>,
}

/// Overlap, spike MSE via the Gram identity and sign-aligned vector MSE.
pub fn metrics(m: &[f64], x_star: &[f64], sign_symmetric: bool) -> Result<Metrics> {
    if m.len() != x_star.len() || m.is_empty() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            m.len(),
            x_star.len()
        )));
    }
    let n = m.len() as f64;
    let xx: f64 = x_star.iter().map(|v| v * v).sum();
    let mm: f64 = m.iter().map(|v| v * v).sum();
    let mx: f64 = m.iter().zip(x_star).map(|(a, b)| a * b).sum();
    let mse_spike = ((xx * xx + mm * mm - 2.0 * mx * mx) / (n * n)).max(0.0);
    let s = if sign_symmetric && mx < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mse_vector = x_star
        .iter()
        .zip(m)
        .map(|(x, v)| (x - s * v).powi(2))
        .sum::<f64>()
        / n;
    Ok(Metrics {
        mse_spike,
        mse_vector,
        overlap: mx / n,
    })
}

/// Leading eigenvector estimate from power iteration.
#[derive(Debug, Clone)]
pub struct PcaInit {
    /// sqrt(N) times the unit eigenvector.
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
    pub converged: bool,
    /// The top eigenspace looks degenerate: two random starts disagree.
    pub degenerate: bool,
    pub iterations: usize,
}

fn unit_random(n: usize, seed: u64, stream: u64) -> Col<f64> {
    let mut rng = stream_rng(seed, stream);
    let v = Col::from_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let nrm = v.norm_l2();
    v * faer::Scale(1.0 / nrm)
}

struct Power {
    v: Col<f64>,
    rq: f64,
    converged: bool,
    iterations: usize,
}

/// Power iteration on Y - shift I with a Rayleigh-quotient stopping rule.
fn power(y: &Mat<f64>, shift: f64, start: Col<f64>, iters: usize) -> Power {
    let mut v = start;
    let mut rq = f64::NAN;
    for it in 1..=iters {
        let mut w = y * &v;
        if shift != 0.0 {
            w -= faer::Scale(shift) * &v;
        }
        let next_rq = v.transpose() * &w;
        let nrm = w.norm_l2();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Power {
                v,
                rq: next_rq + shift,
                converged: false,
                iterations: it,
            };
        }
        v = w * faer::Scale(1.0 / nrm);
        let done = (next_rq - rq).abs() <= 1e-10 * next_rq.abs().max(1.0);
        rq = next_rq;
        if done {
            return Power {
                v,
                rq: rq + shift,
                converged: true,
                iterations: it,
            };
        }
    }
    Power {
        v,
        rq: rq + shift,
        converged: false,
        iterations: iters,
    }
}

/// m0 = sqrt(N) v1(Y) for the algebraically largest eigenvalue.
pub fn pca_init(y: &Mat<f64>, power_iters: usize, seed: u64) -> Result<PcaInit> {
    let n = y.nrows();
    if n == 0 || y.ncols() != n {
        return Err(Error::invalid("matrix must be square and nonempty"));
    }
    if power_iters == 0 {
        return Err(Error::invalid("power_iters must be at least 1"));
    }
    let run = |stream: u64| -> Power {
        let first = power(y, 0.0, unit_random(n, seed, stream), power_iters);
        if first.rq >= 0.0 {
            return first;
        }
        // The dominant magnitude was the bottom of the spectrum.
        power(y, first.rq, unit_random(n, seed, stream), power_iters)
    };
    let a = run(INIT_STREAM);
    let b = run(INIT_STREAM + 1);
    let agreement = (a.v.transpose() * &b.v).abs();
    let scale = (n as f64).sqrt();
    Ok(PcaInit {
        vector: (0..n).map(|i| scale * a.v[i]).collect(),
        eigenvalue: a.rq,
        converged: a.converged,
        degenerate: agreement < 1.0 - 1e-3,
        iterations: a.iterations,
    })
}

/// sqrt(N) (c xhat + sqrt(1 - c^2) what) with what a random unit vector orthogonal to xhat.
pub fn informative_init(x_star: &[f64], c: f64, seed: u64) -> Result<Vec<f64>> {
    check_correlation(c)?;
    let n = x_star.len();
    let xn = x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(xn > 0.0) {
        return Err(Error::invalid("ground truth has zero norm"));
    }
    let xhat: Vec<f64> = x_star.iter().map(|v| v / xn).collect();
    let scale = (n as f64).sqrt();
    if c == 1.0 || n == 1 {
        return Ok(xhat.iter().map(|v| scale * v).collect());
    }
    let mut rng = stream_rng(seed, INIT_STREAM);
    let mut w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..2 {
        let p: f64 = w.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&xhat).for_each(|(a, b)| *a -= p * b);
    }
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(wn > 0.0) {
        return Err(Error::numerical("orthogonal direction collapsed"));
    }
    let s = (1.0 - c * c).sqrt();
    Ok(xhat
        .iter()
        .zip(&w)
        .map(|(x, w)| scale * (c * x + s * w / wn))
        .collect())
}

/// Squared overlap of the top eigenvector of Z + (lambda / N) X X^T with X.
///
/// Zero when 1/lambda >= g(hi+), otherwise -1 / (lambda^2 g'(z)) with g(z) = 1/lambda.
pub fn pca_overlap_theory(rho: &SpectralDensity, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let law = PushforwardLaw::of_density(rho);
    let s = 1.0 / lambda;
    if s >= law.stieltjes_sup() {
        return Ok(0.0);
    }
    let z = law.inverse_stieltjes(s)?;
    let gp: f64 = -law
        .values()
        .iter()
        .zip(law.weights())
        .map(|(v, w)| w / (z - v).powi(2))
        .sum::<f64>();
    Ok((-1.0 / (lambda * lambda * gp)).clamp(0.0, 1.0))
}

/// Location of the outlier eigenvalue, or the upper edge below threshold.
pub fn bbp_outlier(rho: &SpectralDensity, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let law = PushforwardLaw::of_density(rho);
    let s = 1.0 / lambda;
    if s >= law.stieltjes_sup() {
        return Ok(rho.support().1);
    }
    law.inverse_stieltjes(s)
}

/// Damped TAP iterations m^{t+1} = tau m^t + (1 - tau) eta(JY m^t + gamma^t m^{t-1}, gamma^t)
/// started from m^{-1} = 0.
pub fn run_tap(
    jy: &Mat<f64>,
    prior: &Prior,
    law: &PushforwardLaw,
    m0: &[f64],
    config: &TapConfig,
    replica_gamma: Option<f64>,
    truth: Option<&[f64]>,
) -> Result<TapRun> {
    let zeros = vec![0.0; m0.len()];
    run_tap_warm(jy, prior, law, m0, &zeros, config, replica_gamma, truth)
}

/// As [`run_tap`] with an explicit previous iterate m^{-1}.
#[allow(clippy::too_many_arguments)]
pub fn run_tap_warm(
    jy: &Mat<f64>,
    prior: &Prior,
    law: &PushforwardLaw,
    m0: &[f64],
    m_prev: &[f64],
    config: &TapConfig,
    replica_gamma: Option<f64>,
    truth: Option<&[f64]>,
) -> Result<TapRun> {
    config.validate()?;
    let n = m0.len();
    if m_prev.len() != n {
        return Err(Error::invalid("previous iterate length differs from m0"));
    }
    if n == 0 || jy.nrows() != n || jy.ncols() != n {
        return Err(Error::invalid(format!(
            "JY is {}x{} but m0 has length {n}",
            jy.nrows(),
            jy.ncols()
        )));
    }
    if let Some(x) = truth {
        if x.len() != n {
            return Err(Error::invalid("ground truth length differs from m0"));
        }
    }
    let nf = n as f64;
    let q0 = m0.iter().map(|v| v * v).sum::<f64>() / nf;
    if q0 > 1.0 + 1e-6 {
        return Err(Error::invalid(format!(
            "initial |m|^2 / N = {q0} exceeds 1"
        )));
    }
    let fixed = match config.onsager_mode {
        OnsagerMode::FixedFromReplica => {
            let g = replica_gamma
                .ok_or_else(|| Error::invalid("fixed Onsager mode needs the replica gamma"))?;
            if !g.is_finite() {
                return Err(Error::invalid(format!(
                    "replica gamma must be finite, got {g}"
                )));
            }
            Some(g)
        }
        OnsagerMode::Adaptive => None,
    };
    let sup = law.stieltjes_sup();
    let sign_symmetric = prior.is_sign_symmetric();
    let mut m = Col::from_fn(n, |i| m0[i]);
    let mut prev = Col::from_fn(n, |i| m_prev[i]);
    let mut run = TapRun {
        m_final: Vec::new(),
        q_tilde_history: Vec::new(),
        gamma_history: Vec::new(),
        mse_history: Vec::new(),
        iterations: 0,
        converged: false,
        diverged: false,
        clamp_warnings: 0,
        metrics: None,
    };
    let tau = config.tau;
    for _ in 0..config.max_iter {
        let q = m.squared_norm_l2() / nf;
        if !(0.0..=DIVERGENCE_Q).contains(&q) {
            run.diverged = true;
            break;
        }
        run.q_tilde_history.push(q);
        let gamma = match fixed {
            Some(g) => g,
            None => {
                let mut s = 1.0 - q;
                if s < 0.0 || s >= sup {
                    match config.clamp_policy {
                        ClampPolicy::Error if s >= sup => {
                            return Err(Error::OutsideRange { s, sup })
                        }
                        ClampPolicy::Error => {
                            return Err(Error::numerical(format!("1 - q = {s} is negative")));
                        }
                        ClampPolicy::ClampToRange => {
                            s = s.clamp(0.0, (sup - CLAMP_MARGIN).max(0.0));
                            run.clamp_warnings += 1;
                        }
                    }
                }
                -r_transform(law, s)?
            }
        };
        if prior.is_gaussian() && !(1.0 + gamma > 0.0) {
            return Err(Error::numerical(format!(
                "gaussian denoiser undefined at gamma = {gamma}"
            )));
        }
        run.gamma_history.push(gamma);
        let h = jy * &m + faer::Scale(gamma) * &prev;
        let next = Col::from_fn(n, |i| tau * m[i] + (1.0 - tau) * prior.denoise(h[i], gamma));
        let step = (&next - &m).norm_l2() / nf.sqrt();
        prev = std::mem::replace(&mut m, next);
        run.iterations += 1;
        if let Some(x) = truth {
            let mv: Vec<f64> = (0..n).map(|i| m[i]).collect();
            run.mse_history
                .push(metrics(&mv, x, sign_symmetric)?.mse_spike);
        }
        if !step.is_finite() {
            run.diverged = true;
            break;
        }
        if step <= config.tol {
            run.converged = true;
            break;
        }
    }
    run.m_final = (0..n).map(|i| m[i]).collect();
    if let Some(x) = truth {
        run.metrics = Some(metrics(&run.m_final, x, sign_symmetric)?);
    }
    Ok(run)
}

/// Fixed ingredients shared by all trials of one experiment.
#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub rho: &'a SpectralDensity,
    pub prior: &'a Prior,
    pub coupling: &'a EffectiveCoupling,
    pub law: &'a PushforwardLaw,
    pub n: usize,
    pub config: TapConfig,
    pub replica_gamma: Option<f64>,
    pub power_iters: usize,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub run: TapRun,
    pub pca: Option<PcaInit>,
}

impl TrialOutcome {
    pub fn metrics(&self) -> Metrics {
        self.run.metrics.expect("trials always carry ground truth")
    }
}

/// Sample an instance, pre-process it and run TAP from the configured start.
pub fn run_trial(setup: &TrialSetup<'_>, seed: u64) -> Result<TrialOutcome> {
    let obs = make_observation(
        setup.prior,
        setup.rho,
        setup.coupling.lambda(),
        setup.n,
        seed,
        false,
    )?;
    let jy = SymmetricEigen::new(&obs.y)?.apply(|x| setup.coupling.j(x));
    let (m0, pca) = match setup.config.init_mode {
        InitMode::Pca => {
            let p = pca_init(&obs.y, setup.power_iters, seed)?;
            (p.vector.clone(), Some(p))
        }
        InitMode::Informative(c) => (informative_init(&obs.x_star, c, seed)?, None),
    };
    let run = run_tap(
        &jy,
        setup.prior,
        setup.law,
        &m0,
        &setup.config,
        setup.replica_gamma,
        Some(&obs.x_star),
    )?;
    Ok(TrialOutcome { seed, run, pca })
}
