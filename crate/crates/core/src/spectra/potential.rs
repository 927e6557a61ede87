use std::sync::Arc;

use crate::error::{Error, Result};

use super::density::{Affine, BuiltinKind, SpectralDensity};
use super::transforms::hilbert_pv;

/// How V' was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    PvReconstructed,
}

#[derive(Debug, Clone)]
enum Model {
    Linear,
    Quartic { gamma: f64 },
    Sestic { xi: f64 },
    MarchenkoPastur { alpha: f64, sigma2: f64 },
    Reconstructed(Arc<SpectralDensity>),
}

/// Derivative V' of the matrix potential, expressed in the coordinates of
/// the density it was built for.
#[derive(Debug, Clone)]
pub struct Potential {
    model: Model,
    affine: Affine,
}

impl Potential {
    /// Gaussian ensemble, V'(x) = x.
    pub fn gaussian() -> Self {
        Potential {
            model: Model::Linear,
            affine: Affine::IDENTITY,
        }
    }

    /// Closed-form potential of a built-in density, following its affine map.
    pub fn analytic(rho: &SpectralDensity) -> Result<Self> {
        let kind = rho
            .builtin()
            .ok_or_else(|| Error::invalid("density has no closed-form potential"))?;
        let model = match (kind, rho.model_params()) {
            (BuiltinKind::Semicircle, _) => Model::Linear,
            (BuiltinKind::Quartic, ModelParams::Quartic(gamma)) => Model::Quartic { gamma },
            (BuiltinKind::Sestic, ModelParams::Sestic(xi)) => Model::Sestic { xi },
            (BuiltinKind::MarchenkoPastur, ModelParams::MarchenkoPastur(alpha, sigma2)) => {
                Model::MarchenkoPastur { alpha, sigma2 }
            }
            (BuiltinKind::TruncatedNormal, _) => {
                return Err(Error::invalid(
                    "truncated normal has no closed-form potential",
                ))
            }
            _ => return Err(Error::invalid("density has no closed-form potential")),
        };
        Ok(Potential {
            model,
            affine: rho.affine(),
        })
    }

    /// Closed form when available, principal-value reconstruction otherwise.
    pub fn for_density(rho: &SpectralDensity) -> Result<Self> {
        match Self::analytic(rho) {
            Ok(p) => Ok(p),
            Err(_) => potential_derivative_from_density(rho),
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self.model {
            Model::Reconstructed(_) => Provenance::PvReconstructed,
            _ => Provenance::Analytic,
        }
    }

    /// V'(x).
    pub fn dv(&self, x: f64) -> f64 {
        let s = self.affine.scale;
        let y = self.affine.to_raw(x);
        match &self.model {
            Model::Linear => s * y,
            Model::Quartic { gamma } => s * gamma * y.powi(3),
            Model::Sestic { xi } => s * xi * y.powi(5),
            Model::MarchenkoPastur { alpha, sigma2 } => {
                s * (1.0 / (alpha * sigma2) + (1.0 - 1.0 / alpha) / y)
            }
            Model::Reconstructed(rho) => reconstructed_dv(rho, x),
        }
    }

    /// V''(x); finite differences for reconstructed potentials.
    pub fn d2v(&self, x: f64) -> f64 {
        let s = self.affine.scale;
        let y = self.affine.to_raw(x);
        match &self.model {
            Model::Linear => s * s,
            Model::Quartic { gamma } => s * s * 3.0 * gamma * y * y,
            Model::Sestic { xi } => s * s * 5.0 * xi * y.powi(4),
            Model::MarchenkoPastur { alpha, .. } => -s * s * (1.0 - 1.0 / alpha) / (y * y),
            Model::Reconstructed(rho) => {
                let (lo, hi) = rho.support();
                let h = 1e-5 * (hi - lo);
                let inside = |t: f64| t > lo && t < hi;
                if inside(x - h) && inside(x + h) || !inside(x) {
                    (reconstructed_dv(rho, x + h) - reconstructed_dv(rho, x - h)) / (2.0 * h)
                } else if inside(x + h) {
                    (reconstructed_dv(rho, x + h) - reconstructed_dv(rho, x)) / h
                } else {
                    (reconstructed_dv(rho, x) - reconstructed_dv(rho, x - h)) / h
                }
            }
        }
    }
}

fn reconstructed_dv(rho: &SpectralDensity, x: f64) -> f64 {
    let (lo, hi) = rho.support();
    if x > lo && x < hi {
        2.0 * hilbert_pv(rho, x).expect("interior point")
    } else {
        2.0 * rho.expect(|t| 1.0 / (x - t))
    }
}

/// V'(x) = 2 PV int rho(l) / (x - l) dl inside the support, continued
/// outside by the ordinary integral.
pub fn potential_derivative_from_density(rho: &SpectralDensity) -> Result<Potential> {
    if rho.is_atom() {
        return Err(Error::invalid(
            "cannot reconstruct a potential from a point mass",
        ));
    }
    Ok(Potential {
        model: Model::Reconstructed(Arc::new(rho.clone())),
        affine: Affine::IDENTITY,
    })
}

/// Shape parameters of the underlying closed-form model.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ModelParams {
    Quartic(f64),
    Sestic(f64),
    MarchenkoPastur(f64, f64),
    Other,
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::spectra::{build_builtin_density, standardize};

    fn interior(rho: &SpectralDensity, frac: f64, n: usize) -> Vec<f64> {
        let (lo, hi) = rho.support();
        let w = hi - lo;
        (0..n)
            .map(|k| lo + w * (frac + (1.0 - 2.0 * frac) * k as f64 / (n - 1) as f64))
            .collect()
    }

    #[test]
    fn reconstruction_matches_closed_forms() {
        for kind in [
            BuiltinKind::Semicircle,
            BuiltinKind::Quartic,
            BuiltinKind::Sestic,
            BuiltinKind::MarchenkoPastur,
        ] {
            let raw = build_builtin_density(kind, &BTreeMap::new()).unwrap();
            for rho in [raw.clone(), standardize(&raw).unwrap()] {
                let exact = Potential::analytic(&rho).unwrap();
                let pv = potential_derivative_from_density(&rho).unwrap();
                assert_eq!(pv.provenance(), Provenance::PvReconstructed);
                let gap = interior(&rho, 0.05, 97)
                    .into_iter()
                    .map(|x| (exact.dv(x) - pv.dv(x)).abs())
                    .fold(0.0, f64::max);
                assert!(gap < 1e-8, "{kind:?} gap {gap}");
            }
        }
    }

    #[test]
    fn quartic_closed_form() {
        let rho = build_builtin_density(BuiltinKind::Quartic, &BTreeMap::new()).unwrap();
        let pot = Potential::analytic(&rho).unwrap();
        for &x in rho.nodes() {
            assert!((pot.dv(x) - 16.0 / 27.0 * x.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_normal_reconstruction_is_finite() {
        let rho = build_builtin_density(BuiltinKind::TruncatedNormal, &BTreeMap::new()).unwrap();
        assert!(Potential::analytic(&rho).is_err());
        let pot = Potential::for_density(&rho).unwrap();
        assert_eq!(pot.provenance(), Provenance::PvReconstructed);
        assert!(rho
            .nodes()
            .iter()
            .all(|&x| pot.dv(x).is_finite() && pot.d2v(x).is_finite()));
        // Odd symmetry of an even density.
        assert!(pot.dv(0.0).abs() < 1e-10);
    }
}
