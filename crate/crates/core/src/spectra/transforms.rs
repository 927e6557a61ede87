use crate::error::{Error, Result};

use super::density::{EdgeShape, SpectralDensity};
use super::potential::Potential;

/// Stieltjes transform E[1/(z - D)] for real z outside the support.
pub fn stieltjes_transform(rho: &SpectralDensity, z: f64) -> Result<f64> {
    let (lo, hi) = rho.support();
    if (lo..=hi).contains(&z) || !z.is_finite() {
        return Err(Error::invalid(format!(
            "z = {z} lies inside the support [{lo}, {hi}]"
        )));
    }
    Ok(rho.expect(|x| 1.0 / (z - x)))
}

/// Derivative of the Stieltjes transform, -E[1/(z - D)^2].
pub fn stieltjes_derivative(rho: &SpectralDensity, z: f64) -> Result<f64> {
    let (lo, hi) = rho.support();
    if (lo..=hi).contains(&z) || !z.is_finite() {
        return Err(Error::invalid(format!(
            "z = {z} lies inside the support [{lo}, {hi}]"
        )));
    }
    Ok(-rho.expect(|x| 1.0 / (z - x).powi(2)))
}

/// Principal value of the integral of rho(l) / (x - l) by singularity
/// subtraction.
pub fn hilbert_pv(rho: &SpectralDensity, x: f64) -> Result<f64> {
    let (lo, hi) = rho.support();
    if !(x > lo && x < hi) {
        return Err(Error::invalid(format!(
            "x = {x} is not strictly inside ({lo}, {hi})"
        )));
    }
    let px = rho.pdf(x);
    let eps = 1e-10 * (hi - lo);
    let mut dpx = None;
    let mut acc = 0.0;
    for ((&xk, &mk), &pk) in rho.nodes().iter().zip(rho.measure()).zip(rho.pdf_values()) {
        let d = x - xk;
        if d.abs() < eps {
            let dp = *dpx.get_or_insert_with(|| rho.pdf_derivative(x));
            acc -= mk * dp;
        } else {
            acc += mk * (pk - px) / d;
        }
    }
    Ok(acc + px * ((x - lo) / (hi - x)).ln())
}

/// Upper edge of the continuous support of a pushforward law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpperEdge {
    /// The Stieltjes transform stays finite at this edge.
    Soft(f64),
    /// The Stieltjes transform diverges at the top of the support.
    Unbounded,
}

/// Law of a real function of D ~ rho, carried on the quadrature nodes.
#[derive(Debug, Clone)]
pub struct PushforwardLaw {
    values: Vec<f64>,
    weights: Vec<f64>,
    edge_min: f64,
    edge_max: f64,
    upper: UpperEdge,
}

impl PushforwardLaw {
    /// Builds a law from atoms. `continuous_top` is the supremum of the
    /// underlying continuous function when the Stieltjes transform stays
    /// finite there.
    pub fn new(values: Vec<f64>, weights: Vec<f64>, continuous_top: Option<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::invalid(
                "law needs matching, nonempty values and weights",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(
                "law values must be finite and weights nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(format!("law weights sum to {total}")));
        }
        let edge_min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let edge_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = 1.0 + edge_max.abs().max(edge_min.abs());
        let upper = match continuous_top {
            Some(e) if e - edge_max > 1e-12 * scale => UpperEdge::Soft(e),
            _ => UpperEdge::Unbounded,
        };
        Ok(PushforwardLaw {
            values,
            weights,
            edge_min,
            edge_max,
            upper,
        })
    }

    /// Law of D itself.
    pub fn of_density(rho: &SpectralDensity) -> Self {
        let top = (rho.edges() == EdgeShape::SquareRoot).then_some(rho.support().1);
        Self::new(rho.nodes().to_vec(), rho.weights().to_vec(), top)
            .expect("density weights are normalized")
    }

    pub fn point_mass(at: f64) -> Self {
        Self::new(vec![at], vec![1.0], None).expect("valid atom")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn edge_min(&self) -> f64 {
        self.edge_min
    }

    pub fn edge_max(&self) -> f64 {
        self.edge_max
    }

    pub fn upper(&self) -> UpperEdge {
        self.upper
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Stieltjes transform of the law at z above the support.
    pub fn stieltjes(&self, z: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w / (z - v))
            .sum()
    }

    /// Supremum of the Stieltjes transform over z above the support; this is
    /// the largest argument the R-transform accepts.
    pub fn stieltjes_sup(&self) -> f64 {
        match self.upper {
            UpperEdge::Soft(e) => self.stieltjes(e),
            UpperEdge::Unbounded => f64::INFINITY,
        }
    }

    /// Inverse of the Stieltjes transform above the support.
    pub fn inverse_stieltjes(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(Error::invalid(format!(
                "inverse Stieltjes needs s > 0, got {s}"
            )));
        }
        Ok(r_transform(self, s)? + 1.0 / s)
    }
}

/// Law of J(D) with D ~ rho.
pub fn pushforward_law(rho: &SpectralDensity, jc: &EffectiveCoupling) -> PushforwardLaw {
    let values: Vec<f64> = (0..rho.nodes().len()).map(|i| jc.j_at_node(i)).collect();
    let top = if rho.edges() == EdgeShape::SquareRoot {
        let (lo, hi) = rho.support();
        let e = jc.j(lo).max(jc.j(hi));
        let vmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (e >= vmax).then_some(e)
    } else {
        None
    };
    PushforwardLaw::new(values, rho.weights().to_vec(), top)
        .expect("density weights are normalized")
}

/// R-transform R(s) = zeta(s) - 1/s where zeta inverts the Stieltjes
/// transform above the support.
///
/// With r = R(s) the defining equation is sum_i w_i (r - v_i) / (1 + s (r - v_i)) = 0,
/// which stays well conditioned as s -> 0 where R(0) is the mean. The left
/// side is increasing and concave in r, so safeguarded Newton converges
/// from any bracket.
pub fn r_transform(law: &PushforwardLaw, s: f64) -> Result<f64> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!(
            "R-transform argument must be finite and nonnegative, got {s}"
        )));
    }
    if s == 0.0 {
        return Ok(law.mean());
    }
    let sup = law.stieltjes_sup();
    if s >= sup {
        return Err(Error::OutsideRange { s, sup });
    }
    let floor = match law.upper {
        UpperEdge::Soft(e) => e,
        UpperEdge::Unbounded => law.edge_max,
    };
    let psi = |r: f64| -> (f64, f64) {
        let mut f = 0.0;
        let mut df = 0.0;
        for (v, w) in law.values.iter().zip(&law.weights) {
            let d = r - v;
            let q = 1.0 / (1.0 + s * d);
            f += w * d * q;
            df += w * q * q;
        }
        (f, df)
    };
    let mut a = floor - 1.0 / s;
    let mut b = law.edge_max.max(a);
    let mut r = law.mean().clamp(a, b);
    if r <= a {
        r = 0.5 * (a + b);
    }
    for _ in 0..300 {
        let (f, df) = psi(r);
        if f == 0.0 {
            return Ok(r);
        }
        if f < 0.0 {
            a = r;
        } else {
            b = r;
        }
        let tol = 4.0 * f64::EPSILON * (1.0 + r.abs());
        if b - a <= tol {
            return Ok(r);
        }
        let step = f / df;
        let mut next = r - step;
        if !(next > a && next < b) || !next.is_finite() {
            next = 0.5 * (a + b);
        } else if step.abs() <= tol {
            return Ok(next);
        }
        r = next;
    }
    Err(Error::numerical(format!(
        "R-transform root not located at s = {s}"
    )))
}

/// Optimal pre-processing function
/// J(x) = lambda V'(x) - lambda^2 E_D[(V'(x) - V'(D)) / (x - D)].
#[derive(Debug, Clone)]
pub struct EffectiveCoupling {
    rho: SpectralDensity,
    pot: Potential,
    lambda: f64,
    dv_nodes: Vec<f64>,
    d2v_nodes: Vec<f64>,
}

/// Separation below which the divided difference is replaced by V''.
pub const DIAGONAL_GAP: f64 = 1e-8;

impl EffectiveCoupling {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn density(&self) -> &SpectralDensity {
        &self.rho
    }

    pub fn potential(&self) -> &Potential {
        &self.pot
    }

    /// V' at the quadrature nodes.
    pub fn dv_nodes(&self) -> &[f64] {
        &self.dv_nodes
    }

    /// Divided difference (V'(x_i) - V'(x_j)) / (x_i - x_j) between nodes.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let x = self.rho.nodes();
        let d = x[i] - x[j];
        if d.abs() < DIAGONAL_GAP {
            0.5 * (self.d2v_nodes[i] + self.d2v_nodes[j])
        } else {
            (self.dv_nodes[i] - self.dv_nodes[j]) / d
        }
    }

    /// E_D[(V'(x) - V'(D)) / (x - D)].
    pub fn divided_mean(&self, x: f64) -> f64 {
        let dvx = self.pot.dv(x);
        let mut d2 = None;
        let mut acc = 0.0;
        for ((&xk, &wk), &dk) in self
            .rho
            .nodes()
            .iter()
            .zip(self.rho.weights())
            .zip(&self.dv_nodes)
        {
            let d = x - xk;
            acc += wk
                * if d.abs() < DIAGONAL_GAP {
                    *d2.get_or_insert_with(|| self.pot.d2v(x))
                } else {
                    (dvx - dk) / d
                };
        }
        acc
    }

    pub fn j(&self, x: f64) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        self.lambda * self.pot.dv(x) - self.lambda * self.lambda * self.divided_mean(x)
    }

    /// J at quadrature node `i`, reusing the cached V' values.
    pub fn j_at_node(&self, i: usize) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let n = self.dv_nodes.len();
        let w = self.rho.weights();
        let mean: f64 = (0..n).map(|k| w[k] * self.kernel(i, k)).sum();
        self.lambda * self.dv_nodes[i] - self.lambda * self.lambda * mean
    }
}

/// Builds J for the given density, potential and SNR.
pub fn effective_coupling(
    rho: &SpectralDensity,
    pot: &Potential,
    lambda: f64,
) -> Result<EffectiveCoupling> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let dv_nodes: Vec<f64> = rho.nodes().iter().map(|&x| pot.dv(x)).collect();
    let d2v_nodes: Vec<f64> = rho.nodes().iter().map(|&x| pot.d2v(x)).collect();
    if dv_nodes.iter().chain(&d2v_nodes).any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "potential is not finite on the quadrature nodes",
        ));
    }
    Ok(EffectiveCoupling {
        rho: rho.clone(),
        pot: pot.clone(),
        lambda,
        dv_nodes,
        d2v_nodes,
    })
}
