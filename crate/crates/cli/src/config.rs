//! Experiment configuration: strict TOML parsing and validation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spiked_core::ensemble::{ingest_empirical_spectrum, read_eigenvalues_csv};
use spiked_core::priors::{read_prior_csv, Prior};
use spiked_core::replica::{QConstant, SolverOptions};
use spiked_core::spectra::{build_builtin_density, read_density_csv, BuiltinKind, SpectralDensity};
use spiked_core::tap::{ClampPolicy, InitMode, OnsagerMode, TapConfig};
use toml::Spanned;

use crate::error::CliError;

/// Smallest accepted matrix size.
pub const MIN_N: usize = 64;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    noise: Spanned<RawNoise>,
    #[serde(default)]
    prior: Option<Spanned<RawPrior>>,
    #[serde(default)]
    lambda_grid: Option<Spanned<Vec<f64>>>,
    #[serde(default)]
    lambda_range: Option<Spanned<RawRange>>,
    #[serde(default)]
    n: Option<Spanned<i64>>,
    #[serde(default)]
    trials: Option<Spanned<i64>>,
    #[serde(default)]
    seed: Option<Spanned<i64>>,
    #[serde(default)]
    outputs: Option<String>,
    #[serde(default)]
    tap: Option<Spanned<RawTap>>,
    #[serde(default)]
    replica: Option<Spanned<RawReplica>>,
    #[serde(default)]
    surrogate: Option<Spanned<RawSurrogate>>,
    #[serde(default)]
    ingest: Option<Spanned<RawIngest>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    kind: Spanned<String>,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    path: Option<Spanned<String>>,
    #[serde(default)]
    outliers: Option<Spanned<i64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    kind: Spanned<String>,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default)]
    path: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    start: f64,
    stop: f64,
    step: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTap {
    tau: Option<Spanned<f64>>,
    max_iter: Option<Spanned<i64>>,
    tol: Option<Spanned<f64>>,
    onsager: Option<Spanned<String>>,
    init: Option<Spanned<String>>,
    init_correlation: Option<Spanned<f64>>,
    clamp: Option<Spanned<String>>,
    power_iters: Option<Spanned<i64>>,
    trajectories: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReplica {
    damping: Option<Spanned<f64>>,
    tol: Option<Spanned<f64>>,
    max_iter: Option<Spanned<i64>>,
    q_constant: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurrogate {
    structured_seed: Option<Spanned<i64>>,
    surrogate_seed: Option<Spanned<i64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIngest {
    lambda: Option<Spanned<f64>>,
}

/// Where the noise spectrum comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum NoiseSpec {
    Builtin {
        kind: String,
        params: BTreeMap<String, f64>,
    },
    /// One-column eigenvalue list, smoothed after removing outliers.
    Eigenvalues { path: PathBuf, outliers: usize },
    /// Density table in the `x,density` format.
    Density { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PriorSpec {
    Named { kind: String, eps: Option<f64> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapSettings {
    pub tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub onsager: String,
    pub init: String,
    pub init_correlation: f64,
    pub clamp: String,
    pub power_iters: usize,
    pub trajectories: bool,
}

impl TapSettings {
    pub fn tap_config(&self) -> TapConfig {
        TapConfig {
            tau: self.tau,
            max_iter: self.max_iter,
            tol: self.tol,
            onsager_mode: if self.onsager == "adaptive" {
                OnsagerMode::Adaptive
            } else {
                OnsagerMode::FixedFromReplica
            },
            init_mode: if self.init == "pca" {
                InitMode::Pca
            } else {
                InitMode::Informative(self.init_correlation)
            },
            clamp_policy: if self.clamp == "error" {
                ClampPolicy::Error
            } else {
                ClampPolicy::ClampToRange
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub q_constant: String,
}

impl ReplicaSettings {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            damping: self.damping,
            tol: self.tol,
            max_iter: self.max_iter,
            q_constant: if self.q_constant == "literal" {
                QConstant::Literal
            } else {
                QConstant::Derived
            },
        }
    }
}

/// A validated experiment; serialized into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub noise: NoiseSpec,
    pub prior: PriorSpec,
    pub lambda_grid: Vec<f64>,
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub outputs: PathBuf,
    pub tap: TapSettings,
    pub replica: ReplicaSettings,
    pub ingest_lambda: Option<f64>,
}

/// Maps byte offsets of the source to line numbers.
struct Source<'a> {
    origin: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())]
            .matches('\n')
            .count()
            + 1
    }

    fn err<T>(&self, span: Range<usize>, msg: impl std::fmt::Display) -> Result<T, CliError> {
        Err(CliError::Validation(format!(
            "{}:{}: {msg}",
            self.origin,
            self.line(span)
        )))
    }
}

fn spanned<T: Clone>(v: &Spanned<T>) -> (T, Range<usize>) {
    (v.get_ref().clone(), v.span())
}

fn choice(
    src: &Source<'_>,
    v: &Option<Spanned<String>>,
    key: &str,
    allowed: &[&str],
    default: &str,
) -> Result<String, CliError> {
    match v {
        None => Ok(default.to_string()),
        Some(s) if allowed.contains(&s.get_ref().as_str()) => Ok(s.get_ref().clone()),
        Some(s) => src.err(
            s.span(),
            format!("`{key}` must be one of {allowed:?}, got `{}`", s.get_ref()),
        ),
    }
}

fn count(
    src: &Source<'_>,
    v: &Option<Spanned<i64>>,
    key: &str,
    min: i64,
    default: usize,
) -> Result<usize, CliError> {
    match v {
        None => Ok(default),
        Some(s) if *s.get_ref() >= min => Ok(*s.get_ref() as usize),
        Some(s) => src.err(
            s.span(),
            format!("`{key}` must be at least {min}, got {}", s.get_ref()),
        ),
    }
}

fn positive(
    src: &Source<'_>,
    v: &Option<Spanned<f64>>,
    key: &str,
    default: f64,
) -> Result<f64, CliError> {
    match v {
        None => Ok(default),
        Some(s) if *s.get_ref() > 0.0 && s.get_ref().is_finite() => Ok(*s.get_ref()),
        Some(s) => src.err(
            s.span(),
            format!("`{key}` must be positive and finite, got {}", s.get_ref()),
        ),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses and validates a configuration; relative paths resolve against `base`.
pub fn parse_config(text: &str, origin: &str, base: &Path) -> Result<Experiment, CliError> {
    let src = Source { origin, text };
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| src.line(s))
            .map(|l| format!("{l}: "))
            .unwrap_or_default();
        CliError::Validation(format!("{origin}:{line}{}", e.message()))
    })?;

    let noise_span = raw.noise.span();
    let noise_raw = raw.noise.into_inner();
    let (kind, kind_span) = spanned(&noise_raw.kind);
    let outliers = count(&src, &noise_raw.outliers, "outliers", 0, 0)?;
    let noise = match kind.as_str() {
        "file" | "density_file" => {
            let Some(path) = &noise_raw.path else {
                return src.err(noise_span, format!("noise kind `{kind}` needs `path`"));
            };
            if !noise_raw.params.is_empty() {
                return src.err(noise_span, "`params` only applies to built-in noise");
            }
            let path = resolve(base, path.get_ref());
            if kind == "file" {
                NoiseSpec::Eigenvalues { path, outliers }
            } else {
                NoiseSpec::Density { path }
            }
        }
        name => {
            let builtin: BuiltinKind = match name.parse() {
                Ok(k) => k,
                Err(e) => return src.err(kind_span, e),
            };
            if let Some(p) = &noise_raw.path {
                return src.err(
                    p.span(),
                    "`path` only applies to noise kind `file` or `density_file`",
                );
            }
            if let Err(e) = build_builtin_density(builtin, &noise_raw.params) {
                return src.err(noise_span, e);
            }
            NoiseSpec::Builtin {
                kind: builtin.name().to_string(),
                params: noise_raw.params,
            }
        }
    };

    let prior = match &raw.prior {
        None => PriorSpec::Named {
            kind: "rademacher".into(),
            eps: None,
        },
        Some(p) => {
            let (kind, span) = spanned(&p.get_ref().kind);
            if kind == "file" {
                let Some(path) = &p.get_ref().path else {
                    return src.err(p.span(), "prior kind `file` needs `path`");
                };
                PriorSpec::File {
                    path: resolve(base, path.get_ref()),
                }
            } else {
                if let Err(e) = Prior::by_name(&kind, p.get_ref().eps) {
                    return src.err(span, e);
                }
                PriorSpec::Named {
                    kind,
                    eps: p.get_ref().eps,
                }
            }
        }
    };

    let lambda_grid = match (&raw.lambda_grid, &raw.lambda_range) {
        (Some(_), Some(r)) => {
            return src.err(
                r.span(),
                "give either `lambda_grid` or `lambda_range`, not both",
            )
        }
        (Some(g), None) => {
            let (grid, span) = spanned(g);
            if grid.is_empty() {
                return src.err(span, "`lambda_grid` is empty");
            }
            if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return src.err(span, "`lambda_grid` entries must be finite and nonnegative");
            }
            if grid.windows(2).any(|w| w[1] < w[0]) {
                return src.err(span, "`lambda_grid` must be sorted in increasing order");
            }
            grid
        }
        (None, Some(r)) => {
            let span = r.span();
            let r = r.get_ref();
            if !(r.start >= 0.0 && r.stop >= r.start && r.step > 0.0)
                || !(r.start + r.stop + r.step).is_finite()
            {
                return src.err(span, "`lambda_range` needs 0 <= start <= stop and step > 0");
            }
            let k = ((r.stop - r.start) / r.step + 1e-9).floor() as usize;
            if k > 100_000 {
                return src.err(span, "`lambda_range` has too many points");
            }
            (0..=k).map(|i| r.start + i as f64 * r.step).collect()
        }
        (None, None) => return src.err(0..0, "missing `lambda_grid` or `lambda_range`"),
    };

    let n = count(&src, &raw.n, "n", MIN_N as i64, 2000)?;
    let trials = count(&src, &raw.trials, "trials", 1, 10)?;
    let seed = match &raw.seed {
        None => 0,
        Some(s) if *s.get_ref() >= 0 => *s.get_ref() as u64,
        Some(s) => return src.err(s.span(), "`seed` must be nonnegative"),
    };

    let default_tap = TapConfig::default();
    let tap = match &raw.tap {
        None => TapSettings {
            tau: default_tap.tau,
            max_iter: default_tap.max_iter,
            tol: default_tap.tol,
            onsager: "fixed_from_replica".into(),
            init: "pca".into(),
            init_correlation: 0.5f64.sqrt(),
            clamp: "clamp_to_range".into(),
            power_iters: 1000,
            trajectories: false,
        },
        Some(t) => {
            let t = t.get_ref();
            let tau = match &t.tau {
                None => default_tap.tau,
                Some(s) if (0.0..1.0).contains(s.get_ref()) => *s.get_ref(),
                Some(s) => {
                    return src.err(
                        s.span(),
                        format!("`tau` must lie in [0, 1), got {}", s.get_ref()),
                    )
                }
            };
            let init_correlation = match &t.init_correlation {
                None => 0.5f64.sqrt(),
                Some(s) if *s.get_ref() > 0.0 && *s.get_ref() <= 1.0 => *s.get_ref(),
                Some(s) => {
                    return src.err(
                        s.span(),
                        format!("`init_correlation` must lie in (0, 1], got {}", s.get_ref()),
                    )
                }
            };
            TapSettings {
                tau,
                max_iter: count(&src, &t.max_iter, "max_iter", 1, default_tap.max_iter)?,
                tol: positive(&src, &t.tol, "tol", default_tap.tol)?,
                onsager: choice(
                    &src,
                    &t.onsager,
                    "onsager",
                    &["fixed_from_replica", "adaptive"],
                    "fixed_from_replica",
                )?,
                init: choice(&src, &t.init, "init", &["pca", "informative"], "pca")?,
                init_correlation,
                clamp: choice(
                    &src,
                    &t.clamp,
                    "clamp",
                    &["clamp_to_range", "error"],
                    "clamp_to_range",
                )?,
                power_iters: count(&src, &t.power_iters, "power_iters", 1, 1000)?,
                trajectories: t.trajectories.unwrap_or(false),
            }
        }
    };

    let default_rep = SolverOptions::default();
    let replica = match &raw.replica {
        None => ReplicaSettings {
            damping: default_rep.damping,
            tol: default_rep.tol,
            max_iter: default_rep.max_iter,
            q_constant: "derived".into(),
        },
        Some(r) => {
            let r = r.get_ref();
            let damping = match &r.damping {
                None => default_rep.damping,
                Some(s) if (0.0..1.0).contains(s.get_ref()) => *s.get_ref(),
                Some(s) => {
                    return src.err(
                        s.span(),
                        format!("`damping` must lie in [0, 1), got {}", s.get_ref()),
                    )
                }
            };
            ReplicaSettings {
                damping,
                tol: positive(&src, &r.tol, "tol", default_rep.tol)?,
                max_iter: count(&src, &r.max_iter, "max_iter", 1, default_rep.max_iter)?,
                q_constant: choice(
                    &src,
                    &r.q_constant,
                    "q_constant",
                    &["derived", "literal"],
                    "derived",
                )?,
            }
        }
    };

    if let Some(s) = &raw.surrogate {
        let s = s.get_ref();
        let pick = |v: &Option<Spanned<i64>>| v.as_ref().map(|x| (*x.get_ref(), x.span()));
        let a = pick(&s.structured_seed).unwrap_or((seed as i64, 0..0));
        let b = pick(&s.surrogate_seed).unwrap_or((seed as i64, 0..0));
        if a.0 != b.0 {
            let span = if b.1.is_empty() { a.1 } else { b.1 };
            return src.err(
                span,
                format!(
                    "surrogate comparison needs paired seeds, got {} and {}",
                    a.0, b.0
                ),
            );
        }
        if a.0 != seed as i64 {
            return src.err(
                a.1,
                format!(
                    "paired seed {} differs from the experiment seed {seed}",
                    a.0
                ),
            );
        }
    }

    let ingest_lambda = match &raw.ingest {
        None => None,
        Some(i) => match &i.get_ref().lambda {
            None => None,
            Some(l) if *l.get_ref() >= 0.0 && l.get_ref().is_finite() => Some(*l.get_ref()),
            Some(l) => return src.err(l.span(), "`ingest.lambda` must be finite and nonnegative"),
        },
    };

    Ok(Experiment {
        noise,
        prior,
        lambda_grid,
        n,
        trials,
        seed,
        outputs: raw
            .outputs
            .map(|o| resolve(base, &o))
            .unwrap_or_else(|| base.join("out")),
        tap,
        replica,
        ingest_lambda,
    })
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<Experiment, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &path.display().to_string(), &base)
}

impl Experiment {
    /// Builds the noise density described by the configuration.
    pub fn density(&self) -> Result<SpectralDensity, CliError> {
        match &self.noise {
            NoiseSpec::Builtin { kind, params } => {
                Ok(build_builtin_density(kind.parse()?, params)?)
            }
            NoiseSpec::Eigenvalues { path, outliers } => {
                let values = read_eigenvalues_csv(open(path)?)?;
                Ok(ingest_empirical_spectrum(&values, *outliers)?.1)
            }
            NoiseSpec::Density { path } => Ok(read_density_csv(open(path)?)?),
        }
    }

    pub fn prior(&self) -> Result<Prior, CliError> {
        match &self.prior {
            PriorSpec::Named { kind, eps } => Ok(Prior::by_name(kind, *eps)?),
            PriorSpec::File { path } => Ok(read_prior_csv(open(path)?)?),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Experiment, CliError> {
        parse_config(text, "cfg.toml", Path::new("/base"))
    }

    #[test]
    fn defaults_follow_the_experimental_protocol() {
        let e = parse("lambda_grid = [1.0, 2.0]\n[noise]\nkind = \"quartic\"\n").unwrap();
        assert_eq!((e.n, e.trials, e.seed), (2000, 10, 0));
        assert_eq!(e.tap.tau, 0.9);
        assert_eq!(
            e.tap.tap_config().onsager_mode,
            OnsagerMode::FixedFromReplica
        );
        assert_eq!(
            e.prior,
            PriorSpec::Named {
                kind: "rademacher".into(),
                eps: None
            }
        );
        assert_eq!(e.outputs, PathBuf::from("/base/out"));
    }

    #[test]
    fn range_expands_inclusively() {
        let e = parse(
            "[noise]\nkind = \"semicircle\"\n[lambda_range]\nstart = 0.0\nstop = 3.0\nstep = 0.1\n",
        )
        .unwrap();
        assert_eq!(e.lambda_grid.len(), 31);
        assert!((e.lambda_grid[30] - 3.0).abs() < 1e-12);
    }

    fn message(r: Result<Experiment, CliError>) -> String {
        match r {
            Err(CliError::Validation(m)) => m,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let m = message(parse("[noise]\nkind = \"quartic\"\n\nlambda_grid = []\n"));
        assert!(m.contains("lambda_grid"), "{m}");
        let m = message(parse("lambda_grid = []\n[noise]\nkind = \"quartic\"\n"));
        assert!(m.starts_with("cfg.toml:1:") && m.contains("empty"), "{m}");
        let m = message(parse(
            "lambda_grid = [1.0]\nn = 10\n[noise]\nkind = \"quartic\"\n",
        ));
        assert!(
            m.starts_with("cfg.toml:2:") && m.contains("at least 64"),
            "{m}"
        );
        let m = message(parse(
            "lambda_grid = [1.0]\n[noise]\nkind = \"quartic\"\ncolour = 1\n",
        ));
        assert!(m.starts_with("cfg.toml:4:") && m.contains("colour"), "{m}");
        let m = message(parse("lambda_grid = [1.0]\n[noise]\nkind = \"cubic\"\n"));
        assert!(m.starts_with("cfg.toml:3:") && m.contains("cubic"), "{m}");
        let m = message(parse(
            "lambda_grid = [2.0, 1.0]\n[noise]\nkind = \"quartic\"\n",
        ));
        assert!(m.contains("sorted"), "{m}");
        let m = message(parse(
            "lambda_grid = [1.0]\n[noise]\nkind = \"quartic\"\n[tap]\ntau = 1.0\n",
        ));
        assert!(m.starts_with("cfg.toml:5:"), "{m}");
        let m = message(parse(
            "lambda_grid = [1.0]\ntrials = 0\n[noise]\nkind = \"quartic\"\n",
        ));
        assert!(m.contains("trials"), "{m}");
    }

    #[test]
    fn surrogate_seeds_must_pair() {
        let base = "lambda_grid = [2.0]\nseed = 4\n[noise]\nkind = \"quartic\"\n[surrogate]\n";
        assert!(parse(&format!("{base}structured_seed = 4\nsurrogate_seed = 4\n")).is_ok());
        let m = message(parse(&format!(
            "{base}structured_seed = 4\nsurrogate_seed = 5\n"
        )));
        assert!(m.starts_with("cfg.toml:7:") && m.contains("paired"), "{m}");
    }

    #[test]
    fn noise_file_needs_path() {
        let m = message(parse("lambda_grid = [1.0]\n[noise]\nkind = \"file\"\n"));
        assert!(m.contains("path"), "{m}");
        let e = parse(
            "lambda_grid = [1.0]\n[noise]\nkind = \"file\"\npath = \"ev.csv\"\noutliers = 8\n",
        )
        .unwrap();
        assert_eq!(
            e.noise,
            NoiseSpec::Eigenvalues {
                path: "/base/ev.csv".into(),
                outliers: 8
            }
        );
    }
}
