//! Signal priors and scalar Gaussian-channel quantities.

use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::quadrature::gauss_hermite_normal;

/// Gauss–Hermite order used for smooth expectations over Z ~ N(0, 1).
pub const HERMITE_ORDER: usize = 61;

/// Paper value of the two-point sparsity.
pub const TWO_POINT_EPS: f64 = 0.125;

/// Paper value of the sparse Rademacher sparsity, sqrt(0.3).
pub fn sparse_rademacher_eps() -> f64 {
    0.3f64.sqrt()
}

fn hermite() -> Arc<(Vec<f64>, Vec<f64>)> {
    static RULE: OnceLock<Arc<(Vec<f64>, Vec<f64>)>> = OnceLock::new();
    RULE.get_or_init(|| Arc::new(gauss_hermite_normal(HERMITE_ORDER)))
        .clone()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorKind {
    Gaussian,
    Rademacher,
    TwoPoint { eps: f64 },
    SparseRademacher { eps: f64 },
    Custom,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Gaussian => "gaussian",
            PriorKind::Rademacher => "rademacher",
            PriorKind::TwoPoint { .. } => "two_point",
            PriorKind::SparseRademacher { .. } => "sparse_rademacher",
            PriorKind::Custom => "custom",
        }
    }
}

/// Signal law P_X: standard Gaussian or a finite list of atoms.
#[derive(Debug, Clone)]
pub struct Prior {
    kind: PriorKind,
    atoms: Vec<(f64, f64)>,
}

/// Divergence-free MMSE, infinite when 1/mmse - omega/(1 - omega) <= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dmmse {
    Finite(f64),
    Infinite,
}

impl Prior {
    pub fn gaussian() -> Self {
        Prior {
            kind: PriorKind::Gaussian,
            atoms: Vec::new(),
        }
    }

    pub fn rademacher() -> Self {
        Prior {
            kind: PriorKind::Rademacher,
            atoms: vec![(-1.0, 0.5), (1.0, 0.5)],
        }
    }

    /// eps^2 at 1/eps and 1 - eps^2 at zero. Its mean is eps.
    pub fn two_point(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        let e2 = eps * eps;
        Ok(Prior {
            kind: PriorKind::TwoPoint { eps },
            atoms: vec![(0.0, 1.0 - e2), (1.0 / eps, e2)],
        })
    }

    /// eps^2/2 at each of +-1/eps and 1 - eps^2 at zero.
    pub fn sparse_rademacher(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        let e2 = eps * eps;
        Ok(Prior {
            kind: PriorKind::SparseRademacher { eps },
            atoms: vec![
                (-1.0 / eps, 0.5 * e2),
                (0.0, 1.0 - e2),
                (1.0 / eps, 0.5 * e2),
            ],
        })
    }

    /// Finite atom list with zero mean and unit second moment.
    pub fn custom(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("custom prior needs at least one atom"));
        }
        if atoms.iter().any(|(v, p)| !v.is_finite() || !(*p >= 0.0)) {
            return Err(Error::invalid(
                "custom prior atoms must be finite with nonnegative probabilities",
            ));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let mean: f64 = atoms.iter().map(|(v, p)| v * p).sum();
        let second: f64 = atoms.iter().map(|(v, p)| v * v * p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "custom prior probabilities sum to {total}"
            )));
        }
        if mean.abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "custom prior has mean {mean}, expected 0"
            )));
        }
        if (second - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "custom prior has second moment {second}, expected 1"
            )));
        }
        Ok(Prior {
            kind: PriorKind::Custom,
            atoms,
        })
    }

    /// Builds a prior by name; `eps` has per-kind defaults.
    pub fn by_name(name: &str, eps: Option<f64>) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::gaussian()),
            "rademacher" => Ok(Self::rademacher()),
            "two_point" => Self::two_point(eps.unwrap_or(TWO_POINT_EPS)),
            "sparse_rademacher" => {
                Self::sparse_rademacher(eps.unwrap_or_else(sparse_rademacher_eps))
            }
            _ => Err(Error::Unknown {
                what: "prior kind",
                name: name.to_string(),
            }),
        }
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// Atoms as (value, probability); empty for the Gaussian prior.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_gaussian(&self) -> bool {
        self.kind == PriorKind::Gaussian
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    /// Whether x and -x have the same probability.
    pub fn is_sign_symmetric(&self) -> bool {
        if self.is_gaussian() {
            return true;
        }
        self.atoms.iter().all(|&(v, p)| {
            v == 0.0
                || self
                    .atoms
                    .iter()
                    .any(|&(u, q)| (u + v).abs() < 1e-12 && (p - q).abs() < 1e-12)
        })
    }

    /// Posterior mean of x under dP(x) exp(a x - b x^2 / 2).
    pub fn denoiser(&self, a: f64, b: f64) -> Result<f64> {
        if self.is_gaussian() && !(1.0 + b > 0.0) {
            return Err(Error::invalid(format!(
                "gaussian denoiser needs 1 + b > 0, got b = {b}"
            )));
        }
        Ok(self.denoise(a, b))
    }

    /// Unchecked denoiser for inner loops.
    #[inline]
    pub fn denoise(&self, a: f64, b: f64) -> f64 {
        if self.is_gaussian() {
            return a / (1.0 + b);
        }
        let mut top = f64::NEG_INFINITY;
        for &(x, p) in &self.atoms {
            if p > 0.0 {
                top = top.max(p.ln() + a * x - 0.5 * b * x * x);
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &(x, p) in &self.atoms {
            if p > 0.0 {
                let e = (p.ln() + a * x - 0.5 * b * x * x - top).exp();
                num += e * x;
                den += e;
            }
        }
        num / den
    }

    fn log_partition_atomic(&self, a: f64, b: f64) -> f64 {
        let mut top = f64::NEG_INFINITY;
        for &(x, p) in &self.atoms {
            if p > 0.0 {
                top = top.max(p.ln() + a * x - 0.5 * b * x * x);
            }
        }
        let s: f64 = self
            .atoms
            .iter()
            .filter(|a| a.1 > 0.0)
            .map(|&(x, p)| (p.ln() + a * x - 0.5 * b * x * x - top).exp())
            .sum();
        top + s.ln()
    }

    /// Quadrature over Z ~ N(0, 1) of f(z, x) summed over atoms x.
    ///
    /// The posterior mean is a smoothed step in z whose width shrinks like
    /// 1 / (sqrt(mhat) * spread), so the trapezoid spacing follows that width.
    fn expect_atomic(&self, mhat: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let lo = self.atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let hi = self
            .atoms
            .iter()
            .map(|a| a.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let spread = (hi - lo).max(1e-12);
        let h = (0.45 / (mhat.sqrt() * spread).max(1e-12)).min(0.2);
        let half = 10.0;
        let n = (half / h).ceil() as i64;
        let h = half / n as f64;
        let norm = h / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for k in -n..=n {
            let z = k as f64 * h;
            let wz = norm * (-0.5 * z * z).exp();
            for &(x, p) in &self.atoms {
                if p > 0.0 {
                    acc += wz * p * f(z, x);
                }
            }
        }
        acc
    }

    /// E[X <x>] and E[<x>^2] for the scalar channel sqrt(mhat) X + Z.
    pub fn posterior_moments(&self, mhat: f64) -> Result<(f64, f64)> {
        check_mhat(mhat)?;
        let sm = mhat.sqrt();
        if self.is_gaussian() {
            let rule = hermite();
            let (z, w) = (&rule.0, &rule.1);
            let (mut cross, mut sq) = (0.0, 0.0);
            for (&x, &wx) in z.iter().zip(w) {
                for (&zz, &wz) in z.iter().zip(w) {
                    let eta = self.denoise(sm * zz + mhat * x, mhat);
                    cross += wx * wz * x * eta;
                    sq += wx * wz * eta * eta;
                }
            }
            return Ok((cross, sq));
        }
        let cross = self.expect_atomic(mhat, |z, x| x * self.denoise(sm * z + mhat * x, mhat));
        let sq = self.expect_atomic(mhat, |z, x| self.denoise(sm * z + mhat * x, mhat).powi(2));
        Ok((cross, sq))
    }

    /// m(mhat) = E[X eta(sqrt(mhat) Z + mhat X, mhat)], clipped to [0, 1].
    pub fn overlap_of_snr(&self, mhat: f64) -> Result<f64> {
        check_mhat(mhat)?;
        if self.is_gaussian() {
            return Ok(mhat / (1.0 + mhat));
        }
        if mhat == 0.0 {
            let m = self.mean();
            return Ok((m * m).clamp(0.0, 1.0));
        }
        let sm = mhat.sqrt();
        let m = self.expect_atomic(mhat, |z, x| x * self.denoise(sm * z + mhat * x, mhat));
        Ok(m.clamp(0.0, 1.0))
    }

    /// 1 - m(mhat).
    pub fn scalar_mmse(&self, mhat: f64) -> Result<f64> {
        Ok(1.0 - self.overlap_of_snr(mhat)?)
    }

    /// E log int dP(x) exp((sqrt(mhat) Z + mhat X) x - mhat x^2 / 2).
    pub fn log_partition(&self, mhat: f64) -> Result<f64> {
        check_mhat(mhat)?;
        if self.is_gaussian() {
            return Ok(0.5 * mhat - 0.5 * (1.0 + mhat).ln());
        }
        let sm = mhat.sqrt();
        Ok(self.expect_atomic(mhat, |z, x| {
            self.log_partition_atomic(sm * z + mhat * x, mhat)
        }))
    }

    /// Divergence-free MMSE: 1/dmmse = 1/mmse - omega / (1 - omega) with
    /// mmse evaluated at mhat = omega / (1 - omega).
    pub fn dmmse(&self, omega: f64) -> Result<Dmmse> {
        if !(0.0..1.0).contains(&omega) {
            return Err(Error::invalid(format!(
                "omega must lie in [0, 1), got {omega}"
            )));
        }
        if self.is_gaussian() {
            return Ok(Dmmse::Finite(1.0));
        }
        let mhat = omega / (1.0 - omega);
        let mmse = self.scalar_mmse(mhat)?;
        let inv = 1.0 / mmse - mhat;
        if !(inv > 0.0) || !inv.is_finite() {
            return Ok(Dmmse::Infinite);
        }
        Ok(Dmmse::Finite(1.0 / inv))
    }

    /// Draws one value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_gaussian() {
            return StandardNormal.sample(rng);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(x, p) in &self.atoms {
            acc += p;
            if u < acc {
                return x;
            }
        }
        self.atoms.last().map(|a| a.0).unwrap_or(0.0)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!(
            "sparsity eps must lie in (0, 1], got {eps}"
        )));
    }
    Ok(())
}

fn check_mhat(mhat: f64) -> Result<()> {
    if !(mhat >= 0.0) || !mhat.is_finite() {
        return Err(Error::invalid(format!(
            "effective SNR must be finite and nonnegative, got {mhat}"
        )));
    }
    Ok(())
}

/// Reads `value,prob` rows into a custom prior.
pub fn read_prior_csv<R: Read>(input: R) -> Result<Prior> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["value", "prob"] {
        return Err(Error::Parse(format!(
            "expected header value,prob, got {:?}",
            headers
        )));
    }
    let mut atoms = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec.get(j)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 2)))
        };
        atoms.push((parse(0)?, parse(1)?));
    }
    Prior::custom(atoms)
}

/// Writes the atoms as `value,prob` rows.
pub fn write_prior_csv<W: Write>(prior: &Prior, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["value", "prob"])?;
    for (v, p) in prior.atoms() {
        w.write_record([v.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
