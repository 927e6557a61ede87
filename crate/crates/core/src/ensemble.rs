//! Teacher-student sampling, matrix functions and empirical spectra.

use std::io::{Read, Write};

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::priors::Prior;
use crate::spectra::{sample_eigenvalues_with, standardize, SpectralDensity};

/// Stream offsets used to split one seed into independent generators.
pub const SIGNAL_STREAM: u64 = 1;
pub const EIGENVALUE_STREAM: u64 = 2;
pub const BASIS_STREAM: u64 = 3;

/// Generator for `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A sampled instance Y = (lambda / N) X X^T + Z.
#[derive(Debug, Clone)]
pub struct Observation {
    pub y: Mat<f64>,
    pub x_star: Vec<f64>,
    pub z: Option<Mat<f64>>,
    pub lambda: f64,
    pub n: usize,
    pub seed: u64,
}

/// Haar orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Mat<f64>> {
    if n == 0 {
        return Err(Error::invalid("matrix size must be positive"));
    }
    let mut g = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            g[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let qr = g.qr();
    let mut q = qr.compute_Q();
    let r = qr.R();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

pub fn sample_haar_orthogonal(n: usize, seed: u64) -> Result<Mat<f64>> {
    haar_orthogonal(n, &mut stream_rng(seed, BASIS_STREAM))
}

/// O^T diag(d) O, exactly symmetric.
pub fn rotate_spectrum(o: &Mat<f64>, d: &[f64]) -> Mat<f64> {
    let n = d.len();
    let scaled = Mat::from_fn(n, n, |i, j| d[i] * o[(i, j)]);
    let z = o.transpose() * &scaled;
    symmetrize(&z)
}

pub fn symmetrize(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Z = O^T diag(d) O with d drawn i.i.d. from rho and O Haar.
pub fn sample_noise(rho: &SpectralDensity, n: usize, seed: u64) -> Result<Mat<f64>> {
    let d = sample_eigenvalues_with(rho, n, &mut stream_rng(seed, EIGENVALUE_STREAM))?;
    if d.iter().all(|v| *v == 0.0) {
        return Ok(Mat::zeros(n, n));
    }
    let o = sample_haar_orthogonal(n, seed)?;
    Ok(rotate_spectrum(&o, &d))
}

/// Samples X from the prior and assembles Y.
pub fn make_observation(
    prior: &Prior,
    rho: &SpectralDensity,
    lambda: f64,
    n: usize,
    seed: u64,
    retain_noise: bool,
) -> Result<Observation> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    let x: Vec<f64> = (0..n).map(|_| prior.sample(&mut rng)).collect();
    let z = sample_noise(rho, n, seed)?;
    let c = lambda / n as f64;
    let y = Mat::from_fn(n, n, |i, j| c * x[i] * x[j] + z[(i, j)]);
    Ok(Observation {
        y,
        x_star: x,
        z: retain_noise.then_some(z),
        lambda,
        n,
        seed,
    })
}

/// Eigen-decomposition with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

impl SymmetricEigen {
    pub fn new(m: &Mat<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid("matrix must be square"));
        }
        let e = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::numerical(format!("eigendecomposition failed: {e:?}")))?;
        let s = e.S().column_vector();
        let values = (0..m.nrows()).map(|i| s[i]).collect();
        Ok(SymmetricEigen {
            values,
            vectors: e.U().to_owned(),
        })
    }

    /// U diag(f(e)) U^T.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.values.len();
        let fe: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let u = &self.vectors;
        let scaled = Mat::from_fn(n, n, |i, j| u[(i, j)] * fe[j]);
        symmetrize(&(&scaled * u.transpose()))
    }

    /// Unit eigenvector of the largest eigenvalue.
    pub fn top(&self) -> (f64, Vec<f64>) {
        let n = self.values.len();
        let k = n - 1;
        (
            self.values[k],
            (0..n).map(|i| self.vectors[(i, k)]).collect(),
        )
    }
}

/// f applied to the eigenvalues of a symmetric matrix.
pub fn matrix_function_apply(m: &Mat<f64>, f: impl Fn(f64) -> f64) -> Result<Mat<f64>> {
    Ok(SymmetricEigen::new(m)?.apply(f))
}

/// Standardized eigenvalues after outlier removal.
#[derive(Debug, Clone)]
pub struct EmpiricalSpectrum {
    pub eigenvalues: Vec<f64>,
    pub removed_outliers: usize,
    pub shift: f64,
    pub scale: f64,
}

/// Drops the largest-magnitude values, standardizes the rest and smooths
/// them with a Gaussian kernel (Silverman bandwidth) on the observed range.
/// The smoothed density is itself standardized.
pub fn ingest_empirical_spectrum(
    values: &[f64],
    outliers_to_remove: usize,
) -> Result<(EmpiricalSpectrum, SpectralDensity)> {
    if values.is_empty() {
        return Err(Error::invalid("no eigenvalues supplied"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("eigenvalues must be finite"));
    }
    if outliers_to_remove >= values.len() {
        return Err(Error::invalid(format!(
            "cannot remove {outliers_to_remove} outliers from {} eigenvalues",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[outliers_to_remove..].to_vec();
    keep.sort_unstable();
    let kept: Vec<f64> = keep.iter().map(|&i| values[i]).collect();
    let n = kept.len() as f64;
    let shift = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::invalid(
            "eigenvalues have zero variance after outlier removal",
        ));
    }
    let scale = var.sqrt();
    let eigenvalues: Vec<f64> = kept.iter().map(|v| (v - shift) / scale).collect();
    let mut sorted = eigenvalues.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| {
        let t = p * (sorted.len() - 1) as f64;
        let k = t.floor() as usize;
        let f = t - k as f64;
        sorted[k] + f * (sorted[(k + 1).min(sorted.len() - 1)] - sorted[k])
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { 1f64.min(iqr / 1.34) } else { 1.0 };
    let bandwidth = 0.9 * spread * n.powf(-0.2);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if !(hi > lo) {
        return Err(Error::invalid("eigenvalues span a single point"));
    }
    let kde = SpectralDensity::kernel_smoothed(eigenvalues.clone(), bandwidth, lo, hi)?;
    let density = standardize(&kde)?;
    Ok((
        EmpiricalSpectrum {
            eigenvalues,
            removed_outliers: outliers_to_remove,
            shift,
            scale,
        },
        density,
    ))
}

/// One-column eigenvalue list; a non-numeric first row is taken as header.
pub fn read_eigenvalues_csv<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(0).unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("row {}: `{cell}`: {e}", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("no eigenvalues found".into()));
    }
    Ok(out)
}

/// Row-major little-endian f64 dump of Y plus a JSON sidecar.
pub fn write_observation<W1: Write, W2: Write>(
    obs: &Observation,
    mut data: W1,
    mut sidecar: W2,
) -> Result<()> {
    let n = obs.n;
    let mut buf = Vec::with_capacity(8 * n * n);
    for i in 0..n {
        for j in 0..n {
            buf.extend_from_slice(&obs.y[(i, j)].to_le_bytes());
        }
    }
    data.write_all(&buf)?;
    writeln!(
        sidecar,
        "{{\"n\": {}, \"lambda\": {}, \"seed\": {}}}",
        n, obs.lambda, obs.seed
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::spectra::{build_builtin_density, BuiltinKind};

    fn max_abs(a: &Mat<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                m = m.max(a[(i, j)].abs());
            }
        }
        m
    }

    #[test]
    fn haar_is_orthogonal_and_deterministic() {
        let o1 = sample_haar_orthogonal(1, 3).unwrap();
        assert!((o1[(0, 0)].abs() - 1.0).abs() < 1e-15);
        let o = sample_haar_orthogonal(50, 7).unwrap();
        let g = o.transpose() * &o;
        let eye = Mat::<f64>::identity(50, 50);
        assert!(max_abs(&(&g - &eye)) < 1e-10);
        assert_eq!(o, sample_haar_orthogonal(50, 7).unwrap());
        assert!(sample_haar_orthogonal(0, 1).is_err());
    }

    #[test]
    fn haar_column_statistics() {
        let n = 500;
        let o = sample_haar_orthogonal(n, 11).unwrap();
        let mean_abs: f64 = (0..n).map(|i| o[(i, 0)].abs()).sum::<f64>() / n as f64;
        let expected = (2.0 / (std::f64::consts::PI * n as f64)).sqrt();
        assert!(
            (mean_abs / expected - 1.0).abs() < 0.1,
            "{mean_abs} vs {expected}"
        );
    }

    #[test]
    fn observation_identity() {
        let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
        let obs = make_observation(&Prior::rademacher(), &rho, 1.5, 80, 4, true).unwrap();
        let z = obs.z.as_ref().unwrap();
        let x = &obs.x_star;
        assert!((x.iter().map(|v| v * v).sum::<f64>() - 80.0).abs() < 1e-12);
        for i in 0..80 {
            for j in 0..80 {
                assert_eq!(obs.y[(i, j)], obs.y[(j, i)]);
                assert!((obs.y[(i, j)] - 1.5 / 80.0 * x[i] * x[j] - z[(i, j)]).abs() < 1e-12);
            }
        }
        let zero = make_observation(&Prior::rademacher(), &rho, 0.0, 40, 4, true).unwrap();
        assert_eq!(&zero.y, zero.z.as_ref().unwrap());
        let atom = SpectralDensity::point_mass(0.0).unwrap();
        assert_eq!(max_abs(&sample_noise(&atom, 30, 1).unwrap()), 0.0);
        assert_eq!(
            sample_noise(&rho, 60, 9).unwrap(),
            sample_noise(&rho, 60, 9).unwrap()
        );
    }

    #[test]
    fn noise_spectrum_matches_samples() {
        let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
        let z = sample_noise(&rho, 300, 2).unwrap();
        let mut ez = SymmetricEigen::new(&z).unwrap().values;
        let mut d =
            sample_eigenvalues_with(&rho, 300, &mut stream_rng(2, EIGENVALUE_STREAM)).unwrap();
        d.sort_by(f64::total_cmp);
        ez.sort_by(f64::total_cmp);
        for (a, b) in d.iter().zip(&ez) {
            assert!((a - b).abs() < 1e-10);
        }
        // Rotational invariance.
        let q = sample_haar_orthogonal(300, 99).unwrap();
        let rotated = q.transpose() * &z * &q;
        let er = SymmetricEigen::new(&symmetrize(&rotated)).unwrap().values;
        for (a, b) in er.iter().zip(&ez) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn matrix_functions() {
        let rho = build_builtin_density(BuiltinKind::Semicircle, &BTreeMap::new()).unwrap();
        let m = sample_noise(&rho, 60, 5).unwrap();
        let id = matrix_function_apply(&m, |x| x).unwrap();
        assert!(max_abs(&(&id - &m)) < 1e-10);
        let c = matrix_function_apply(&m, |_| 2.5).unwrap();
        let eye = Mat::<f64>::identity(60, 60) * faer::Scale(2.5);
        assert!(max_abs(&(&c - &eye)) < 1e-10);
        let lam = 1.7;
        let j = matrix_function_apply(&m, |x| lam * x - lam * lam).unwrap();
        let expected = Mat::from_fn(60, 60, |i, k| {
            lam * m[(i, k)] - if i == k { lam * lam } else { 0.0 }
        });
        assert!(max_abs(&(&j - &expected)) < 1e-8);
    }

    #[test]
    fn ingestion_removes_outliers() {
        let rho = build_builtin_density(BuiltinKind::Semicircle, &BTreeMap::new()).unwrap();
        let mut v = sample_eigenvalues_with(&rho, 2000, &mut stream_rng(1, 0)).unwrap();
        for k in 0..8 {
            v.push(10.0 + k as f64);
        }
        let (ingested, density) = ingest_empirical_spectrum(&v, 8).unwrap();
        let n = ingested.eigenvalues.len() as f64;
        let mean = ingested.eigenvalues.iter().sum::<f64>() / n;
        let var = ingested
            .eigenvalues
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        assert_eq!(ingested.removed_outliers, 8);
        assert!(ingested.eigenvalues.iter().all(|x| x.abs() < 3.0));
        assert!(density.mean().abs() < 1e-8 && (density.variance() - 1.0).abs() < 1e-6);
        assert!(ingest_empirical_spectrum(&v, v.len()).is_err());
        assert!(ingest_empirical_spectrum(&[], 0).is_err());
    }

    #[test]
    fn eigenvalue_csv() {
        assert_eq!(
            read_eigenvalues_csv("eigenvalue\n1.5\n-2\n".as_bytes()).unwrap(),
            vec![1.5, -2.0]
        );
        assert!(read_eigenvalues_csv("".as_bytes()).is_err());
        assert!(read_eigenvalues_csv("1\nx\n".as_bytes()).is_err());
    }
}
