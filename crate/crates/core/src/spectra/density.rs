use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

use super::potential::ModelParams;

/// Number of quadrature nodes per support interval.
pub const QUAD_NODES: usize = 400;

/// Behaviour of the density at the support edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeShape {
    /// Density vanishes like a square root; nodes follow x = c + r sin(theta).
    SquareRoot,
    /// Density is bounded away from zero at the edges; plain Gauss–Legendre.
    Hard,
    /// Single atom.
    Atom,
}

impl EdgeShape {
    fn tag(self) -> &'static str {
        match self {
            EdgeShape::SquareRoot => "sqrt",
            EdgeShape::Hard => "hard",
            EdgeShape::Atom => "atom",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "sqrt" => Some(EdgeShape::SquareRoot),
            "hard" => Some(EdgeShape::Hard),
            "atom" => Some(EdgeShape::Atom),
            _ => None,
        }
    }
}

/// Built-in noise spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinKind {
    Semicircle,
    Quartic,
    Sestic,
    MarchenkoPastur,
    TruncatedNormal,
}

impl BuiltinKind {
    pub const ALL: [BuiltinKind; 5] = [
        BuiltinKind::Semicircle,
        BuiltinKind::Quartic,
        BuiltinKind::Sestic,
        BuiltinKind::MarchenkoPastur,
        BuiltinKind::TruncatedNormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinKind::Semicircle => "semicircle",
            BuiltinKind::Quartic => "quartic",
            BuiltinKind::Sestic => "sestic",
            BuiltinKind::MarchenkoPastur => "marchenko_pastur",
            BuiltinKind::TruncatedNormal => "truncated_normal",
        }
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            BuiltinKind::Semicircle => &[],
            BuiltinKind::Quartic => &["gamma", "a"],
            BuiltinKind::Sestic => &["xi", "a"],
            BuiltinKind::MarchenkoPastur => &["alpha", "sigma2"],
            BuiltinKind::TruncatedNormal => &["bound"],
        }
    }
}

impl FromStr for BuiltinKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "noise kind",
                name: s.to_string(),
            })
    }
}

/// Closed-form or tabulated density in raw coordinates.
#[derive(Debug, Clone)]
pub(crate) enum PdfModel {
    Semicircle,
    Quartic { gamma: f64, a: f64 },
    Sestic { xi: f64, a: f64 },
    MarchenkoPastur { alpha: f64, sigma2: f64 },
    Gaussian,
    Kde { samples: Vec<f64>, bandwidth: f64 },
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
    Atom,
}

impl PdfModel {
    fn eval(&self, x: f64, lo: f64, hi: f64) -> f64 {
        if !(lo..=hi).contains(&x) {
            return 0.0;
        }
        match self {
            PdfModel::Semicircle => (4.0 - x * x).max(0.0).sqrt() / (2.0 * PI),
            PdfModel::Quartic { gamma, a } => {
                let a2 = a * a;
                (2.0 * a2 * gamma + gamma * x * x) * (4.0 * a2 - x * x).max(0.0).sqrt() / (2.0 * PI)
            }
            PdfModel::Sestic { xi, a } => {
                let a2 = a * a;
                let x2 = x * x;
                (6.0 * a2 * a2 * xi + 2.0 * a2 * xi * x2 + xi * x2 * x2)
                    * (4.0 * a2 - x2).max(0.0).sqrt()
                    / (2.0 * PI)
            }
            PdfModel::MarchenkoPastur { alpha, sigma2 } => {
                let (lm, lp) = mp_edges(*alpha, *sigma2);
                ((lp - x) * (x - lm)).max(0.0).sqrt() / (2.0 * PI * sigma2 * alpha * x)
            }
            PdfModel::Gaussian => (-0.5 * x * x).exp() / (2.0 * PI).sqrt(),
            PdfModel::Kde { samples, bandwidth } => {
                let h = *bandwidth;
                let c = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
                c * samples
                    .iter()
                    .map(|s| (-0.5 * ((x - s) / h).powi(2)).exp())
                    .sum::<f64>()
            }
            PdfModel::Tabulated { xs, ys } => interpolate(xs, ys, x),
            PdfModel::Atom => 1.0,
        }
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x).clamp(1, n - 1);
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

pub(crate) fn mp_edges(alpha: f64, sigma2: f64) -> (f64, f64) {
    let r = alpha.sqrt();
    (sigma2 * (1.0 - r).powi(2), sigma2 * (1.0 + r).powi(2))
}

/// Affine change of variable: raw = shift + scale * x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        shift: 0.0,
        scale: 1.0,
    };

    pub fn to_raw(&self, x: f64) -> f64 {
        self.shift + self.scale * x
    }

    fn from_raw(&self, raw: f64) -> f64 {
        (raw - self.shift) / self.scale
    }
}

/// Quadrature representation of a noise eigenvalue law.
#[derive(Debug, Clone)]
pub struct SpectralDensity {
    label: String,
    builtin: Option<BuiltinKind>,
    model: Arc<PdfModel>,
    raw_support: (f64, f64),
    affine: Affine,
    pdf_scale: f64,
    support: (f64, f64),
    edges: EdgeShape,
    nodes: Vec<f64>,
    measure: Vec<f64>,
    pdf_values: Vec<f64>,
    weights: Vec<f64>,
    mean: f64,
    variance: f64,
}

impl SpectralDensity {
    fn from_model(
        label: String,
        builtin: Option<BuiltinKind>,
        model: PdfModel,
        raw_support: (f64, f64),
        edges: EdgeShape,
        affine: Affine,
    ) -> Result<Self> {
        let (rlo, rhi) = raw_support;
        if !(rlo.is_finite() && rhi.is_finite() && rlo <= rhi) {
            return Err(Error::invalid(format!("bad support [{rlo}, {rhi}]")));
        }
        let a = affine.from_raw(rlo);
        let b = affine.from_raw(rhi);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (nodes, measure) = match edges {
            EdgeShape::Atom => (vec![lo], vec![1.0]),
            EdgeShape::SquareRoot => {
                let (t, w) = gauss_legendre(QUAD_NODES);
                let c = 0.5 * (lo + hi);
                let r = 0.5 * (hi - lo);
                t.iter()
                    .zip(&w)
                    .map(|(&t, &w)| {
                        let th = 0.5 * PI * t;
                        (c + r * th.sin(), 0.5 * PI * w * r * th.cos())
                    })
                    .unzip()
            }
            EdgeShape::Hard => {
                let (t, w) = gauss_legendre(QUAD_NODES);
                let c = 0.5 * (lo + hi);
                let r = 0.5 * (hi - lo);
                t.iter().zip(&w).map(|(&t, &w)| (c + r * t, r * w)).unzip()
            }
        };
        let mut out = SpectralDensity {
            label,
            builtin,
            model: Arc::new(model),
            raw_support,
            affine,
            pdf_scale: 1.0,
            support: (lo, hi),
            edges,
            nodes,
            measure,
            pdf_values: Vec::new(),
            weights: Vec::new(),
            mean: 0.0,
            variance: 0.0,
        };
        out.pdf_values = out.nodes.iter().map(|&x| out.pdf(x)).collect();
        let raw: Vec<f64> = out
            .measure
            .iter()
            .zip(&out.pdf_values)
            .map(|(m, p)| m * p)
            .collect();
        let mass: f64 = raw.iter().sum();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::numerical(format!("density has mass {mass}")));
        }
        if edges != EdgeShape::Atom {
            out.pdf_scale = 1.0 / mass;
            for p in out.pdf_values.iter_mut() {
                *p /= mass;
            }
        }
        out.weights = raw.iter().map(|r| r / mass).collect();
        out.refresh_moments();
        Ok(out)
    }

    fn refresh_moments(&mut self) {
        let mean: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * x)
            .sum();
        let var: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x - mean).powi(2))
            .sum();
        self.mean = mean;
        self.variance = var;
    }

    /// Single atom at `at`.
    pub fn point_mass(at: f64) -> Result<Self> {
        if !at.is_finite() {
            return Err(Error::invalid("atom location must be finite"));
        }
        Self::from_model(
            format!("point_mass({at})"),
            None,
            PdfModel::Atom,
            (at, at),
            EdgeShape::Atom,
            Affine::IDENTITY,
        )
    }

    /// Tabulated density; the pdf is linearly interpolated between `xs`.
    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>, edges: EdgeShape) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::invalid(
                "tabulated density needs at least two matching points",
            ));
        }
        if xs.windows(2).any(|p| p[0] >= p[1]) || ys.iter().any(|y| !(*y >= 0.0)) {
            return Err(Error::invalid(
                "tabulated density needs increasing nodes and nonnegative values",
            ));
        }
        let support = (xs[0], xs[xs.len() - 1]);
        Self::from_model(
            "tabulated".into(),
            None,
            PdfModel::Tabulated { xs, ys },
            support,
            edges,
            Affine::IDENTITY,
        )
    }

    /// Gaussian-kernel density estimate restricted to `[lo, hi]`.
    pub fn kernel_smoothed(samples: Vec<f64>, bandwidth: f64, lo: f64, hi: f64) -> Result<Self> {
        if samples.is_empty() || !(bandwidth > 0.0) || !(lo < hi) {
            return Err(Error::invalid(
                "kernel density needs samples, a positive bandwidth and a proper range",
            ));
        }
        Self::from_model(
            "kde".into(),
            None,
            PdfModel::Kde { samples, bandwidth },
            (lo, hi),
            EdgeShape::Hard,
            Affine::IDENTITY,
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn builtin(&self) -> Option<BuiltinKind> {
        self.builtin
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn edges(&self) -> EdgeShape {
        self.edges
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights times density values, normalized to sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Quadrature weights for the Lebesgue measure on the support.
    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn pdf_values(&self) -> &[f64] {
        &self.pdf_values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Coordinate map from this density's variable to the raw model variable.
    pub fn affine(&self) -> Affine {
        self.affine
    }

    pub(crate) fn model_params(&self) -> ModelParams {
        match &*self.model {
            PdfModel::Quartic { gamma, .. } => ModelParams::Quartic(*gamma),
            PdfModel::Sestic { xi, .. } => ModelParams::Sestic(*xi),
            PdfModel::MarchenkoPastur { alpha, sigma2 } => {
                ModelParams::MarchenkoPastur(*alpha, *sigma2)
            }
            _ => ModelParams::Other,
        }
    }

    pub fn is_atom(&self) -> bool {
        self.edges == EdgeShape::Atom
    }

    /// Density at `x`; zero outside the support.
    pub fn pdf(&self, x: f64) -> f64 {
        if self.is_atom() {
            return if x == self.support.0 { 1.0 } else { 0.0 };
        }
        let (rlo, rhi) = self.raw_support;
        self.pdf_scale * self.affine.scale.abs() * self.model.eval(self.affine.to_raw(x), rlo, rhi)
    }

    /// Central-difference derivative of the pdf, one-sided near the edges.
    pub fn pdf_derivative(&self, x: f64) -> f64 {
        let (lo, hi) = self.support;
        let h = 1e-6 * (hi - lo).max(1e-300);
        if x - h <= lo {
            (self.pdf(x + h) - self.pdf(x)) / h
        } else if x + h >= hi {
            (self.pdf(x) - self.pdf(x - h)) / h
        } else {
            (self.pdf(x + h) - self.pdf(x - h)) / (2.0 * h)
        }
    }

    /// Quadrature expectation of `f(D)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Cumulative distribution at the knots `lo, mid(x0,x1), ..., hi`.
    pub(crate) fn cdf_knots(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes.len();
        let mut knots = Vec::with_capacity(n + 1);
        let mut cdf = Vec::with_capacity(n + 1);
        knots.push(self.support.0);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.weights[i];
            let k = if i + 1 < n {
                0.5 * (self.nodes[i] + self.nodes[i + 1])
            } else {
                self.support.1
            };
            knots.push(k);
            cdf.push(acc);
        }
        let last = cdf.len() - 1;
        cdf[last] = 1.0;
        (knots, cdf)
    }

    /// Grid CDF evaluated at `x` by linear interpolation between knots.
    pub fn grid_cdf(&self, x: f64) -> f64 {
        let (knots, cdf) = self.cdf_knots();
        if x <= knots[0] {
            return if self.is_atom() && x >= knots[0] {
                1.0
            } else {
                0.0
            };
        }
        interpolate(&knots, &cdf, x)
    }
}

fn get_param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64> {
    let v = params.get(key).copied().unwrap_or(default);
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::invalid(format!(
            "parameter `{key}` must be positive, got {v}"
        )));
    }
    Ok(v)
}

fn check_a(params: &BTreeMap<String, f64>, derived: f64) -> Result<()> {
    if let Some(&a) = params.get("a") {
        if !(a > 0.0) {
            return Err(Error::invalid(format!(
                "parameter `a` must be positive, got {a}"
            )));
        }
        if (a - derived).abs() > 1e-9 * derived {
            return Err(Error::invalid(format!(
                "parameter `a` = {a} inconsistent with unit mass; the normalization requires a = {derived}"
            )));
        }
    }
    Ok(())
}

/// Builds a built-in spectrum. Defaults: quartic gamma = 16/27, sestic
/// xi = 27/80, Marchenko–Pastur alpha = 0.2 centered to unit variance, normal law
/// truncated to [-5, 5] and rescaled to unit variance.
pub fn build_builtin_density(
    kind: BuiltinKind,
    params: &BTreeMap<String, f64>,
) -> Result<SpectralDensity> {
    if let Some(k) = params
        .keys()
        .find(|k| !kind.allowed_params().contains(&k.as_str()))
    {
        return Err(Error::Unknown {
            what: "parameter",
            name: format!("{k} for {}", kind.name()),
        });
    }
    let label = kind.name().to_string();
    match kind {
        BuiltinKind::Semicircle => SpectralDensity::from_model(
            label,
            Some(kind),
            PdfModel::Semicircle,
            (-2.0, 2.0),
            EdgeShape::SquareRoot,
            Affine::IDENTITY,
        ),
        BuiltinKind::Quartic => {
            let gamma = get_param(params, "gamma", 16.0 / 27.0)?;
            let a = (1.0 / (3.0 * gamma)).powf(0.25);
            check_a(params, a)?;
            SpectralDensity::from_model(
                label,
                Some(kind),
                PdfModel::Quartic { gamma, a },
                (-2.0 * a, 2.0 * a),
                EdgeShape::SquareRoot,
                Affine::IDENTITY,
            )
        }
        BuiltinKind::Sestic => {
            let xi = get_param(params, "xi", 27.0 / 80.0)?;
            let a = (1.0 / (10.0 * xi)).powf(1.0 / 6.0);
            check_a(params, a)?;
            SpectralDensity::from_model(
                label,
                Some(kind),
                PdfModel::Sestic { xi, a },
                (-2.0 * a, 2.0 * a),
                EdgeShape::SquareRoot,
                Affine::IDENTITY,
            )
        }
        BuiltinKind::MarchenkoPastur => {
            let alpha = get_param(params, "alpha", 0.2)?;
            if alpha >= 1.0 {
                return Err(Error::invalid(
                    "marchenko_pastur needs alpha < 1 (no atom at zero)",
                ));
            }
            let sigma2 = get_param(params, "sigma2", 1.0 / alpha.sqrt())?;
            let raw = SpectralDensity::from_model(
                label,
                Some(kind),
                PdfModel::MarchenkoPastur { alpha, sigma2 },
                mp_edges(alpha, sigma2),
                EdgeShape::SquareRoot,
                Affine::IDENTITY,
            )?;
            standardize(&raw)
        }
        BuiltinKind::TruncatedNormal => {
            let bound = get_param(params, "bound", 5.0)?;
            let raw = SpectralDensity::from_model(
                label.clone(),
                Some(kind),
                PdfModel::Gaussian,
                (-bound, bound),
                EdgeShape::Hard,
                Affine::IDENTITY,
            )?;
            let s = raw.variance().sqrt();
            SpectralDensity::from_model(
                label,
                Some(kind),
                PdfModel::Gaussian,
                (-bound, bound),
                EdgeShape::Hard,
                Affine {
                    shift: 0.0,
                    scale: s,
                },
            )
        }
    }
}

/// Affinely maps the density to mean 0 and variance 1.
pub fn standardize(rho: &SpectralDensity) -> Result<SpectralDensity> {
    if rho.is_atom() || !(rho.variance > 0.0) {
        return Err(Error::invalid(
            "cannot standardize a degenerate (single-atom) density",
        ));
    }
    let sd = rho.variance.sqrt();
    let affine = Affine {
        shift: rho.affine.to_raw(rho.mean),
        scale: rho.affine.scale * sd,
    };
    let mut out = SpectralDensity::from_model(
        rho.label.clone(),
        rho.builtin,
        (*rho.model).clone(),
        rho.raw_support,
        rho.edges,
        affine,
    )?;
    // Share the model instead of cloning it twice.
    out.model = Arc::clone(&rho.model);
    Ok(out)
}

/// Draws `n` i.i.d. eigenvalues by inverse CDF on the quadrature grid.
pub fn sample_eigenvalues(rho: &SpectralDensity, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_eigenvalues_with(rho, n, &mut rng)
}

pub(crate) fn sample_eigenvalues_with<R: Rng + ?Sized>(
    rho: &SpectralDensity,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if rho.is_atom() {
        return Ok(vec![rho.support.0; n]);
    }
    let (knots, cdf) = rho.cdf_knots();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let k = cdf.partition_point(|&c| c <= u).clamp(1, cdf.len() - 1);
            let span = cdf[k] - cdf[k - 1];
            let t = if span > 0.0 {
                (u - cdf[k - 1]) / span
            } else {
                0.5
            };
            knots[k - 1] + t * (knots[k] - knots[k - 1])
        })
        .collect())
}

/// Writes `node,weight,pdf` rows preceded by a support comment.
pub fn write_density_csv<W: Write>(rho: &SpectralDensity, mut out: W) -> Result<()> {
    writeln!(
        out,
        "# support={},{};edges={}",
        rho.support.0,
        rho.support.1,
        rho.edges.tag()
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "weight", "pdf"])?;
    for i in 0..rho.nodes.len() {
        w.write_record([
            rho.nodes[i].to_string(),
            rho.weights[i].to_string(),
            rho.pdf_values[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a density written by [`write_density_csv`]. Nodes and weights are
/// kept verbatim; the pdf between nodes is linearly interpolated.
pub fn read_density_csv<R: Read>(input: R) -> Result<SpectralDensity> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let mut support = None;
    let mut edges = EdgeShape::Hard;
    for line in text.lines().filter(|l| l.starts_with('#')) {
        for part in line.trim_start_matches('#').trim().split(';') {
            if let Some(v) = part.strip_prefix("support=") {
                let mut it = v.split(',').map(|s| s.trim().parse::<f64>());
                if let (Some(Ok(a)), Some(Ok(b))) = (it.next(), it.next()) {
                    support = Some((a, b));
                }
            } else if let Some(v) = part.strip_prefix("edges=") {
                edges = EdgeShape::from_tag(v.trim())
                    .ok_or_else(|| Error::Parse(format!("unknown edge tag `{v}`")))?;
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["node", "weight", "pdf"] {
        return Err(Error::Parse(format!(
            "expected header node,weight,pdf, got {:?}",
            headers
        )));
    }
    let (mut nodes, mut weights, mut pdfs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec.get(j)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 2)))
        };
        nodes.push(parse(0)?);
        weights.push(parse(1)?);
        pdfs.push(parse(2)?);
    }
    if nodes.is_empty() {
        return Err(Error::Parse("density file has no rows".into()));
    }
    if nodes.windows(2).any(|p| p[0] >= p[1])
        || weights.iter().any(|w| !(*w >= 0.0))
        || pdfs.iter().any(|p| !(*p >= 0.0))
    {
        return Err(Error::Parse(
            "density rows need increasing nodes and nonnegative weights".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Parse(format!("weights sum to {total}, expected 1")));
    }
    let (lo, hi) = support.unwrap_or((nodes[0], nodes[nodes.len() - 1]));
    if nodes.len() == 1 {
        return SpectralDensity::point_mass(nodes[0]);
    }
    let mut xs = vec![lo];
    let mut ys = vec![if edges == EdgeShape::SquareRoot {
        0.0
    } else {
        pdfs[0]
    }];
    for (x, p) in nodes.iter().zip(&pdfs) {
        if *x > lo && *x < hi {
            xs.push(*x);
            ys.push(*p);
        }
    }
    xs.push(hi);
    ys.push(if edges == EdgeShape::SquareRoot {
        0.0
    } else {
        pdfs[pdfs.len() - 1]
    });
    let measure = nodes
        .iter()
        .zip(&weights)
        .zip(&pdfs)
        .map(|((_, w), p)| if *p > 0.0 { w / p } else { 0.0 })
        .collect();
    let mut out = SpectralDensity {
        label: "tabulated".into(),
        builtin: None,
        model: Arc::new(PdfModel::Tabulated { xs, ys }),
        raw_support: (lo, hi),
        affine: Affine::IDENTITY,
        pdf_scale: 1.0,
        support: (lo, hi),
        edges,
        nodes,
        measure,
        pdf_values: pdfs,
        weights,
        mean: 0.0,
        variance: 0.0,
    };
    out.refresh_moments();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtin(kind: BuiltinKind) -> SpectralDensity {
        build_builtin_density(kind, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn builtins_have_unit_mass_and_variance() {
        for kind in BuiltinKind::ALL {
            let rho = builtin(kind);
            let total: f64 = rho.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "{kind:?}");
            assert!(
                (rho.variance() - 1.0).abs() < 1e-6,
                "{kind:?} var {}",
                rho.variance()
            );
            assert!(rho.pdf_values().iter().all(|p| *p >= 0.0));
            // The closed-form normalizations hold without the mass correction.
            if kind != BuiltinKind::TruncatedNormal {
                assert!(
                    (rho.pdf_scale - 1.0).abs() < 1e-10,
                    "{kind:?} {}",
                    rho.pdf_scale
                );
            }
        }
    }

    #[test]
    fn quartic_support_follows_normalization() {
        let rho = builtin(BuiltinKind::Quartic);
        let (lo, hi) = rho.support();
        assert!((hi - 3f64.sqrt()).abs() < 1e-12 && (lo + hi).abs() < 1e-12);
        let bad = BTreeMap::from([("a".to_string(), 0.75)]);
        assert!(build_builtin_density(BuiltinKind::Quartic, &bad).is_err());
    }

    #[test]
    fn marchenko_pastur_edges() {
        let rho = builtin(BuiltinKind::MarchenkoPastur);
        let s2 = 1.0 / 0.2f64.sqrt();
        let (lo, hi) = rho.support();
        assert!((lo - s2 * (1.0 - 0.2f64.sqrt()).powi(2) + s2).abs() < 1e-9);
        assert!((hi - s2 * (1.0 + 0.2f64.sqrt()).powi(2) + s2).abs() < 1e-9);
        assert!(rho.mean().abs() < 1e-10);
        assert!((rho.affine().shift - s2).abs() < 1e-10 && (rho.affine().scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn standardize_moments() {
        let rho = builtin(BuiltinKind::MarchenkoPastur);
        let unit = BTreeMap::from([("sigma2".to_string(), 1.0)]);
        let raw = build_builtin_density(BuiltinKind::MarchenkoPastur, &unit).unwrap();
        for d in [rho, raw] {
            let s = standardize(&d).unwrap();
            // Moment oracle by an independent midpoint rule on the raw pdf.
            let (lo, hi) = s.support();
            let n = 200_000;
            let h = (hi - lo) / n as f64;
            let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * h;
                let p = s.pdf(x) * h;
                m0 += p;
                m1 += p * x;
                m2 += p * x * x;
            }
            assert!((m0 - 1.0).abs() < 1e-5 && m1.abs() < 1e-5 && (m2 - 1.0).abs() < 1e-5);
            assert!(s.mean().abs() < 1e-8 && (s.variance() - 1.0).abs() < 1e-6);
        }
        let semi = builtin(BuiltinKind::Semicircle);
        let again = standardize(&semi).unwrap();
        for (a, b) in semi.nodes().iter().zip(again.nodes()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(standardize(&SpectralDensity::point_mass(0.0).unwrap()).is_err());
    }

    #[test]
    fn unknown_parameters_rejected() {
        let p = BTreeMap::from([("gama".to_string(), 1.0)]);
        assert!(build_builtin_density(BuiltinKind::Quartic, &p).is_err());
        let p = BTreeMap::from([("gamma".to_string(), -1.0)]);
        assert!(build_builtin_density(BuiltinKind::Quartic, &p).is_err());
        assert!("cubic".parse::<BuiltinKind>().is_err());
    }

    #[test]
    fn sampling_matches_grid() {
        let semi = builtin(BuiltinKind::Semicircle);
        let xs = sample_eigenvalues(&semi, 100_000, 3).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.02);
        assert_eq!(xs, sample_eigenvalues(&semi, 100_000, 3).unwrap());

        let quartic = builtin(BuiltinKind::Quartic);
        let mut xs = sample_eigenvalues(&quartic, 100_000, 11).unwrap();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = quartic.grid_cdf(x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks {ks}");
        assert!(sample_eigenvalues(&quartic, 0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rho = builtin(BuiltinKind::Quartic);
        let mut buf = Vec::new();
        write_density_csv(&rho, &mut buf).unwrap();
        let back = read_density_csv(buf.as_slice()).unwrap();
        assert_eq!(back.nodes(), rho.nodes());
        assert_eq!(back.weights(), rho.weights());
        assert_eq!(back.support(), rho.support());
        assert_eq!(back.edges(), EdgeShape::SquareRoot);
        assert!((back.pdf(0.3) - rho.pdf(0.3)).abs() < 1e-4);
    }
}
