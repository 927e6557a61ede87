//! Replica fixed-point system, replica-symmetric free entropy and MMSE
//! curves.

use std::io::Write;

use faer::Mat;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::priors::Prior;
use crate::spectra::{
    effective_coupling, pushforward_law, r_transform, EffectiveCoupling, Potential, PushforwardLaw,
    SpectralDensity,
};

/// Starting point of the saddle iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Init {
    /// m0 = 1e-4.
    Uninformative,
    /// m0 = 1 - 1e-4.
    Informative,
}

impl Init {
    pub fn start(self) -> f64 {
        match self {
            Init::Uninformative => 1e-4,
            Init::Informative => 1.0 - 1e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Init::Uninformative => "uninformative",
            Init::Informative => "informative",
        }
    }
}

/// Constant term of the Q equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QConstant {
    /// mhat - m / (1 - m).
    #[default]
    Derived,
    /// mhat - 1 / (1 - m), as printed in the closed-form free entropy.
    Literal,
}

/// Saddle iteration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub q_constant: QConstant,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            damping: 0.5,
            tol: 1e-11,
            max_iter: 5000,
            q_constant: QConstant::Derived,
        }
    }
}

/// Residual bound a converged saddle point must meet.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// A solution of the fixed-point system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddlePoint {
    pub lambda: f64,
    pub m_star: f64,
    pub mhat_star: f64,
    pub f_rs: f64,
    pub init_label: Init,
    pub converged: bool,
    pub iterations: usize,
    /// |m(mhat) - m| at exit.
    pub residual: f64,
}

/// Density, potential, prior and SNR with the derived J and law of J(D).
#[derive(Debug, Clone)]
pub struct ReplicaModel {
    prior: Prior,
    coupling: EffectiveCoupling,
    law: PushforwardLaw,
}

impl ReplicaModel {
    pub fn new(rho: &SpectralDensity, pot: &Potential, prior: &Prior, lambda: f64) -> Result<Self> {
        let coupling = effective_coupling(rho, pot, lambda)?;
        let law = pushforward_law(rho, &coupling);
        Ok(ReplicaModel {
            prior: prior.clone(),
            coupling,
            law,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.coupling.lambda()
    }

    pub fn law(&self) -> &PushforwardLaw {
        &self.law
    }

    pub fn coupling(&self) -> &EffectiveCoupling {
        &self.coupling
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// mhat = -R_{J(Z)}(1 - m).
    pub fn mhat_of(&self, m: f64) -> Result<f64> {
        let s = 1.0 - m;
        let r = r_transform(&self.law, s)?;
        let mhat = -r;
        if mhat < 0.0 {
            if mhat > -1e-10 * (1.0 + self.law.edge_max().abs()) {
                return Ok(0.0);
            }
            return Err(Error::numerical(format!(
                "negative effective SNR {mhat} at 1 - m = {s}"
            )));
        }
        Ok(mhat)
    }

    /// Damped alternation of the two fixed-point equations.
    pub fn solve(&self, init: Init, opts: &SolverOptions) -> Result<SaddlePoint> {
        if !(0.0..1.0).contains(&opts.damping) || !(opts.tol > 0.0) {
            return Err(Error::invalid(
                "damping must lie in [0, 1) and tol must be positive",
            ));
        }
        let mut m = init.start();
        let mut iterations = 0;
        let mut settled = false;
        while iterations < opts.max_iter {
            iterations += 1;
            let mhat = self.mhat_of(m)?;
            let next = self.prior.overlap_of_snr(mhat)?;
            let dm = (1.0 - opts.damping) * (next - m);
            m = (m + dm).clamp(0.0, 1.0 - 1e-12);
            if dm.abs() <= opts.tol {
                settled = true;
                break;
            }
        }
        let mhat = self.mhat_of(m)?;
        let residual = (self.prior.overlap_of_snr(mhat)? - m).abs();
        let f_rs = self.free_entropy_rs(m, mhat, opts.q_constant)?;
        Ok(SaddlePoint {
            lambda: self.lambda(),
            m_star: m,
            mhat_star: mhat,
            f_rs,
            init_label: init,
            converged: settled && residual <= RESIDUAL_TOL,
            iterations,
            residual,
        })
    }

    /// H(x_i) = 1 / (1/(1-m) - mhat - J(x_i)) on the nodes.
    pub fn h_values(&self, m: f64, mhat: f64) -> Result<Vec<f64>> {
        if !(m < 1.0) {
            return Err(Error::invalid(format!("free entropy needs m < 1, got {m}")));
        }
        let zeta = 1.0 / (1.0 - m) - mhat;
        let nodes = self.coupling.density().nodes();
        self.law
            .values()
            .iter()
            .zip(nodes)
            .map(|(&j, &x)| {
                let h = 1.0 / (zeta - j);
                if h > 0.0 && h.is_finite() {
                    Ok(h)
                } else {
                    Err(Error::NonpositiveH { x })
                }
            })
            .collect()
    }

    /// Constant term of the Q equation.
    pub fn q_constant(m: f64, mhat: f64, qc: QConstant) -> f64 {
        match qc {
            QConstant::Derived => mhat - m / (1.0 - m),
            QConstant::Literal => mhat - 1.0 / (1.0 - m),
        }
    }

    /// Kernel K_ij = lambda^2 w_j divdiff(x_i, x_j) H_j.
    pub fn q_kernel(&self, h: &[f64]) -> Mat<f64> {
        let lam2 = self.lambda() * self.lambda();
        let w = self.coupling.density().weights();
        let n = h.len();
        Mat::from_fn(n, n, |i, j| lam2 * w[j] * self.coupling.kernel(i, j) * h[j])
    }

    /// Minimum-norm solution of (I - K) Q = c, checked for consistency.
    pub fn solve_q(&self, m: f64, mhat: f64, qc: QConstant) -> Result<Vec<f64>> {
        let h = self.h_values(m, mhat)?;
        self.solve_q_with(&h, Self::q_constant(m, mhat, qc))
    }

    fn solve_q_with(&self, h: &[f64], c: f64) -> Result<Vec<f64>> {
        let n = h.len();
        let k = self.q_kernel(h);
        let a = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - k[(i, j)]);
        if c == 0.0 || self.lambda() == 0.0 {
            return Ok(vec![c; n]);
        }
        let svd = a
            .svd()
            .map_err(|e| Error::Singular(format!("SVD failed: {e:?}")))?;
        let s = svd.S().column_vector();
        let smax = (0..n).map(|i| s[i]).fold(0.0, f64::max);
        let cut = 1e-12 * smax;
        let u = svd.U();
        let v = svd.V();
        let mut coef = vec![0.0; n];
        for (kk, ck) in coef.iter_mut().enumerate() {
            if s[kk] > cut {
                let proj: f64 = (0..n).map(|i| u[(i, kk)] * c).sum();
                *ck = proj / s[kk];
            }
        }
        let q: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|kk| v[(i, kk)] * coef[kk]).sum())
            .collect();
        let resid = (0..n)
            .map(|i| ((0..n).map(|j| a[(i, j)] * q[j]).sum::<f64>() - c).abs())
            .fold(0.0, f64::max);
        if !(resid <= 1e-8 * (1.0 + c.abs())) || q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular(format!(
                "(I - K) Q = c inconsistent, residual {resid:e}"
            )));
        }
        Ok(q)
    }

    /// Replica-symmetric potential f^RS(m, mhat).
    pub fn free_entropy_rs(&self, m: f64, mhat: f64, qc: QConstant) -> Result<f64> {
        let h = self.h_values(m, mhat)?;
        let c = Self::q_constant(m, mhat, qc);
        let q = self.solve_q_with(&h, c)?;
        let w = self.coupling.density().weights();
        let n = h.len();
        let lam2 = self.lambda() * self.lambda();
        let mut t1 = 0.0;
        if lam2 > 0.0 {
            for i in 0..n {
                let qi = w[i] * q[i] * h[i];
                if qi == 0.0 {
                    continue;
                }
                let row: f64 = (0..n)
                    .map(|j| w[j] * q[j] * h[j] * self.coupling.kernel(i, j))
                    .sum();
                t1 += qi * row;
            }
        }
        let t1 = -0.5 * lam2 * t1;
        let t2 = -m * m / (2.0 * (1.0 - m)) - 0.5 * (1.0 - m).ln() - 0.5 * m;
        let t3 = self.prior.log_partition(mhat)?;
        let t4: f64 = 0.5 * (0..n).map(|i| w[i] * h[i].ln()).sum::<f64>();
        let t5: f64 = -0.5 * (0..n).map(|i| w[i] * (c - q[i] * q[i]) * h[i]).sum::<f64>();
        Ok(t1 + t2 + t3 + t4 + t5)
    }

    /// Full free entropy f = f^RS - (lambda/2) E V'(D).
    pub fn free_entropy(&self, m: f64, mhat: f64, qc: QConstant) -> Result<f64> {
        let w = self.coupling.density().weights();
        let ev: f64 = self
            .coupling
            .dv_nodes()
            .iter()
            .zip(w)
            .map(|(d, w)| d * w)
            .sum();
        Ok(self.free_entropy_rs(m, mhat, qc)? - 0.5 * self.lambda() * ev)
    }
}

/// Solves the fixed-point system from the given start.
pub fn solve_fixed_point(
    rho: &SpectralDensity,
    pot: &Potential,
    prior: &Prior,
    lambda: f64,
    init: Init,
    damping: f64,
    tol: f64,
) -> Result<SaddlePoint> {
    let opts = SolverOptions {
        damping,
        tol,
        ..SolverOptions::default()
    };
    ReplicaModel::new(rho, pot, prior, lambda)?.solve(init, &opts)
}

/// f^RS(m, mhat) with the derived Q constant.
pub fn free_entropy_rs(
    rho: &SpectralDensity,
    pot: &Potential,
    prior: &Prior,
    lambda: f64,
    m: f64,
    mhat: f64,
) -> Result<f64> {
    ReplicaModel::new(rho, pot, prior, lambda)?.free_entropy_rs(m, mhat, QConstant::Derived)
}

/// Largest f_rs wins; values within 1e-12 go to the larger m_star.
pub fn select_solution(candidates: &[SaddlePoint]) -> Result<SaddlePoint> {
    let mut best: Option<SaddlePoint> = None;
    for c in candidates {
        best = Some(match best {
            None => *c,
            Some(b) if (c.f_rs - b.f_rs).abs() < 1e-12 => {
                if c.m_star > b.m_star {
                    *c
                } else {
                    b
                }
            }
            Some(b) if c.f_rs > b.f_rs => *c,
            Some(b) => b,
        });
    }
    best.ok_or_else(|| Error::invalid("no candidate saddle points"))
}

/// lambda_tilde = sqrt(-R(1 - m) / m).
pub fn gaussian_surrogate_snr(law: &PushforwardLaw, m_star: f64) -> Result<f64> {
    if !(m_star > 0.0 && m_star < 1.0) {
        return Err(Error::invalid(format!(
            "m_star must lie in (0, 1), got {m_star}"
        )));
    }
    let rad = -r_transform(law, 1.0 - m_star)? / m_star;
    if rad < 0.0 {
        return Err(Error::numerical(format!(
            "negative surrogate radicand {rad}"
        )));
    }
    Ok(rad.sqrt())
}

/// Replica curves over an SNR grid.
#[derive(Debug, Clone, Default)]
pub struct PhaseCurve {
    pub lambdas: Vec<f64>,
    pub m_star: Vec<f64>,
    pub mhat_star: Vec<f64>,
    pub mmse_spike: Vec<f64>,
    pub mmse_vector: Vec<f64>,
    pub mi_per_component: Vec<f64>,
    pub surrogate_snr: Vec<f64>,
    /// Grid points where no start converged and the smallest residual was kept.
    pub fallback: Vec<bool>,
}

impl PhaseCurve {
    /// CSV `lambda,m_star,mmse_spike,mmse_vector,mi,surrogate_snr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "lambda",
            "m_star",
            "mmse_spike",
            "mmse_vector",
            "mi",
            "surrogate_snr",
        ])?;
        for i in 0..self.lambdas.len() {
            w.write_record([
                self.lambdas[i].to_string(),
                self.m_star[i].to_string(),
                self.mmse_spike[i].to_string(),
                self.mmse_vector[i].to_string(),
                self.mi_per_component[i].to_string(),
                self.surrogate_snr[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Both starts at every grid point, selected by free entropy.
pub fn select_at(model: &ReplicaModel, opts: &SolverOptions) -> Result<(SaddlePoint, bool)> {
    let runs: Vec<Result<SaddlePoint>> = [Init::Uninformative, Init::Informative]
        .into_iter()
        .map(|i| model.solve(i, opts))
        .collect();
    let ok: Vec<SaddlePoint> = runs
        .iter()
        .filter_map(|r| r.as_ref().ok().copied())
        .collect();
    if ok.is_empty() {
        return Err(runs.into_iter().find_map(|r| r.err()).expect("two runs"));
    }
    let converged: Vec<SaddlePoint> = ok.iter().copied().filter(|s| s.converged).collect();
    if converged.is_empty() {
        let best = ok
            .into_iter()
            .min_by(|a, b| a.residual.total_cmp(&b.residual))
            .expect("nonempty");
        return Ok((best, true));
    }
    Ok((select_solution(&converged)?, false))
}

pub fn phase_curve(
    rho: &SpectralDensity,
    pot: &Potential,
    prior: &Prior,
    lambda_grid: &[f64],
    opts: &SolverOptions,
) -> Result<PhaseCurve> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite())
        || lambda_grid.windows(2).any(|p| p[1] < p[0])
    {
        return Err(Error::invalid(
            "lambda grid must be sorted, finite and nonnegative",
        ));
    }
    let base = ReplicaModel::new(rho, pot, prior, 0.0)?;
    let m0 = prior.overlap_of_snr(0.0)?;
    let f0 = base.free_entropy(m0, 0.0, opts.q_constant)?;
    let points: Vec<Result<(SaddlePoint, bool, f64, f64)>> = lambda_grid
        .par_iter()
        .map(|&lambda| {
            let model = ReplicaModel::new(rho, pot, prior, lambda)?;
            let (sp, fallback) = select_at(&model, opts)?;
            let f = model.free_entropy(sp.m_star, sp.mhat_star, opts.q_constant)?;
            let snr = surrogate_or_limit(model.law(), sp.m_star);
            Ok((sp, fallback, f, snr))
        })
        .collect();
    let mut curve = PhaseCurve::default();
    for (lambda, p) in lambda_grid.iter().zip(points) {
        let (sp, fallback, f, snr) = p?;
        curve.lambdas.push(*lambda);
        curve.m_star.push(sp.m_star);
        curve.mhat_star.push(sp.mhat_star);
        curve.mmse_spike.push(1.0 - sp.m_star * sp.m_star);
        curve.mmse_vector.push(1.0 - sp.m_star);
        curve
            .mi_per_component
            .push(if *lambda == 0.0 { 0.0 } else { f0 - f });
        curve.surrogate_snr.push(snr);
        curve.fallback.push(fallback);
    }
    Ok(curve)
}

/// Overlaps below this use the slope of -R at s = 1 for the surrogate SNR.
pub const SURROGATE_SLOPE_BELOW: f64 = 1e-4;

/// Surrogate SNR, continued to m -> 0 by the slope of -R at s = 1.
///
/// The slope (R(1) - R(1 - h)) / h cancels any quadrature offset in R(1),
/// which would otherwise dominate -R(1 - m) / m for tiny m.
fn surrogate_or_limit(law: &PushforwardLaw, m: f64) -> f64 {
    let v = if m < SURROGATE_SLOPE_BELOW {
        let h = SURROGATE_SLOPE_BELOW;
        match (r_transform(law, 1.0), r_transform(law, 1.0 - h)) {
            (Ok(a), Ok(b)) => Ok(((a - b) / h).max(0.0).sqrt()),
            _ => gaussian_surrogate_snr(law, m.max(1e-6)),
        }
    } else {
        gaussian_surrogate_snr(law, m.min(1.0 - 1e-12))
    };
    // Adding zero maps -0 to +0.
    v.map(|v| v + 0.0).unwrap_or(f64::NAN)
}
