//! The experiment subcommands.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use spiked_core::ensemble::{ingest_empirical_spectrum, read_eigenvalues_csv};
use spiked_core::oamp_se::replica_equivalence_check;
use spiked_core::priors::Prior;
use spiked_core::replica::{
    gaussian_surrogate_snr, phase_curve, select_at, ReplicaModel, SaddlePoint,
};
use spiked_core::spectra::{
    build_builtin_density, effective_coupling, pushforward_law, write_density_csv, BuiltinKind,
    Potential, SpectralDensity,
};
use spiked_core::tap::{pca_overlap_theory, run_trial, OnsagerMode, TrialOutcome, TrialSetup};

use crate::config::{Experiment, NoiseSpec};
use crate::error::CliError;
use crate::output::Manifest;

/// Gap tolerance of the state-evolution equivalence report.
pub const EQUIVALENCE_TOL: f64 = 1e-6;

/// Theory objects shared by all trials of a command.
struct Theory {
    rho: SpectralDensity,
    pot: Potential,
    prior: Prior,
}

impl Theory {
    fn new(exp: &Experiment) -> Result<Self, CliError> {
        let rho = exp.density()?;
        let pot = Potential::for_density(&rho)?;
        Ok(Theory {
            rho,
            pot,
            prior: exp.prior()?,
        })
    }

    fn saddle(
        &self,
        exp: &Experiment,
        lambda: f64,
    ) -> Result<(ReplicaModel, SaddlePoint), CliError> {
        let model = ReplicaModel::new(&self.rho, &self.pot, &self.prior, lambda)?;
        let (sp, _) = select_at(&model, &exp.replica.solver_options())?;
        Ok((model, sp))
    }
}

/// Squared overlap of spectral PCA, zero at lambda = 0.
fn pca_overlap(rho: &SpectralDensity, lambda: f64) -> Result<f64, CliError> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(pca_overlap_theory(rho, lambda)?)
}

fn seeds(exp: &Experiment) -> Vec<u64> {
    (0..exp.trials as u64)
        .map(|i| exp.seed.wrapping_add(i))
        .collect()
}

/// Runs the trials concurrently and returns them in seed order.
fn run_trials(setup: &TrialSetup<'_>, seeds: &[u64]) -> Result<Vec<TrialOutcome>, CliError> {
    let out: Vec<spiked_core::Result<TrialOutcome>> =
        seeds.par_iter().map(|&s| run_trial(setup, s)).collect();
    Ok(out.into_iter().collect::<spiked_core::Result<Vec<_>>>()?)
}

/// Per-lambda summary over trials that did not diverge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResult {
    pub lambda: f64,
    pub included: usize,
    pub excluded: usize,
    pub mse_spike_mean: f64,
    pub mse_spike_std: Option<f64>,
    pub mse_vector_mean: f64,
    pub mse_vector_std: Option<f64>,
    pub replica_mmse: f64,
    pub pca_theory: f64,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (mean, std)
}

/// Aggregates in seed order; diverged trials are counted and left out.
pub fn aggregate(
    lambda: f64,
    outcomes: &[TrialOutcome],
    replica_mmse: f64,
    pca_theory: f64,
) -> AggregateResult {
    let kept: Vec<&TrialOutcome> = outcomes.iter().filter(|o| !o.run.diverged).collect();
    let spike: Vec<f64> = kept.iter().map(|o| o.metrics().mse_spike).collect();
    let vector: Vec<f64> = kept.iter().map(|o| o.metrics().mse_vector).collect();
    let (mse_spike_mean, mse_spike_std) = mean_std(&spike);
    let (mse_vector_mean, mse_vector_std) = mean_std(&vector);
    AggregateResult {
        lambda,
        included: kept.len(),
        excluded: outcomes.len() - kept.len(),
        mse_spike_mean,
        mse_spike_std,
        mse_vector_mean,
        mse_vector_std,
        replica_mmse,
        pca_theory,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into())
}

pub const TRIAL_HEADER: [&str; 9] = [
    "seed",
    "lambda",
    "iterations",
    "converged",
    "mse_spike",
    "mse_vector",
    "overlap",
    "clamp_warnings",
    "diverged",
];

fn trial_record(lambda: f64, o: &TrialOutcome) -> [String; 9] {
    let m = o.metrics();
    [
        o.seed.to_string(),
        lambda.to_string(),
        o.run.iterations.to_string(),
        o.run.converged.to_string(),
        m.mse_spike.to_string(),
        m.mse_vector.to_string(),
        m.overlap.to_string(),
        o.run.clamp_warnings.to_string(),
        o.run.diverged.to_string(),
    ]
}

/// Phase curve over the lambda grid.
pub fn cmd_replica_curve(exp: &Experiment, manifest: &mut Manifest) -> Result<(), CliError> {
    let theory = Theory::new(exp)?;
    let curve = phase_curve(
        &theory.rho,
        &theory.pot,
        &theory.prior,
        &exp.lambda_grid,
        &exp.replica.solver_options(),
    )?;
    let mut w = manifest.create_csv("phase_curve.csv")?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    let fallbacks = curve.fallback.iter().filter(|f| **f).count();
    println!(
        "replica-curve: {} grid points, {fallbacks} without a converged start",
        curve.lambdas.len()
    );
    Ok(())
}

/// Seeded TAP trials with per-trial and aggregate output.
pub fn cmd_tap_run(
    exp: &Experiment,
    manifest: &mut Manifest,
) -> Result<Vec<AggregateResult>, CliError> {
    let theory = Theory::new(exp)?;
    let seeds = seeds(exp);
    let mut trials_csv = csv::Writer::from_writer(manifest.create_csv("trials.csv")?);
    trials_csv.write_record(TRIAL_HEADER)?;
    trials_csv.flush()?;
    let mut aggregates = Vec::new();
    for &lambda in &exp.lambda_grid {
        let (_, sp) = theory.saddle(exp, lambda)?;
        let coupling = effective_coupling(&theory.rho, &theory.pot, lambda)?;
        let law = pushforward_law(&theory.rho, &coupling);
        let config = exp.tap.tap_config();
        let setup = TrialSetup {
            rho: &theory.rho,
            prior: &theory.prior,
            coupling: &coupling,
            law: &law,
            n: exp.n,
            config,
            replica_gamma: (config.onsager_mode == OnsagerMode::FixedFromReplica)
                .then_some(sp.mhat_star),
            power_iters: exp.tap.power_iters,
        };
        let outcomes = run_trials(&setup, &seeds)?;
        for o in &outcomes {
            trials_csv.write_record(trial_record(lambda, o))?;
        }
        trials_csv.flush()?;
        if exp.tap.trajectories {
            for o in &outcomes {
                let mut w = csv::Writer::from_writer(
                    manifest
                        .create_csv(&format!("trajectories/lambda_{lambda}_seed_{}.csv", o.seed))?,
                );
                w.write_record(["t", "q_tilde", "gamma"])?;
                for (t, (q, g)) in o
                    .run
                    .q_tilde_history
                    .iter()
                    .zip(&o.run.gamma_history)
                    .enumerate()
                {
                    w.write_record([t.to_string(), q.to_string(), g.to_string()])?;
                }
                w.flush()?;
            }
        }
        let o = pca_overlap(&theory.rho, lambda)?;
        let agg = aggregate(lambda, &outcomes, 1.0 - sp.m_star * sp.m_star, 1.0 - o * o);
        println!(
            "tap-run: lambda {lambda}: {} included, {} excluded, mean spike MSE {:.6}, replica {:.6}",
            agg.included, agg.excluded, agg.mse_spike_mean, agg.replica_mmse
        );
        aggregates.push(agg);
    }
    let mut w = csv::Writer::from_writer(manifest.create_csv("aggregate.csv")?);
    w.write_record([
        "lambda",
        "included",
        "excluded",
        "mse_spike_mean",
        "mse_spike_std",
        "mse_vector_mean",
        "mse_vector_std",
        "replica_mmse",
        "pca_theory",
    ])?;
    for a in &aggregates {
        w.write_record([
            a.lambda.to_string(),
            a.included.to_string(),
            a.excluded.to_string(),
            a.mse_spike_mean.to_string(),
            opt(a.mse_spike_std),
            a.mse_vector_mean.to_string(),
            opt(a.mse_vector_std),
            a.replica_mmse.to_string(),
            a.pca_theory.to_string(),
        ])?;
    }
    w.flush()?;
    let excluded: usize = aggregates.iter().map(|a| a.excluded).sum();
    println!("tap-run: {excluded} diverged trials excluded in total");
    Ok(aggregates)
}

/// State-evolution versus replica report over the grid.
pub fn cmd_oamp_check(
    exp: &Experiment,
    manifest: &mut Manifest,
) -> Result<serde_json::Value, CliError> {
    let theory = Theory::new(exp)?;
    let reports = exp
        .lambda_grid
        .par_iter()
        .map(|&l| replica_equivalence_check(&theory.rho, &theory.pot, &theory.prior, l))
        .collect::<spiked_core::Result<Vec<_>>>()?;
    let rows: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            json!({
                "lambda": r.lambda,
                "theta": r.theta,
                "omega": r.omega,
                "m_se": r.m_se,
                "mhat_se": r.mhat_se,
                "m_replica": r.m_replica,
                "mhat_replica": r.mhat_replica,
                "gap": r.gap(),
                "sup_gap_phi": r.sup_gap_phi,
                "basin_mismatch": r.basin_mismatch(),
                "se_converged": r.se_converged,
                "replica_converged": r.replica_converged,
                "degenerate": r.degenerate,
                "agree": !r.basin_mismatch() && r.gap() <= EQUIVALENCE_TOL,
            })
        })
        .collect();
    let degenerate = reports.iter().any(|r| r.degenerate);
    let value =
        json!({ "tolerance": EQUIVALENCE_TOL, "degenerate_prior": degenerate, "reports": rows });
    manifest.write_json("oamp_check.json", value.clone())?;
    let worst = reports.iter().map(|r| r.gap()).fold(0.0, f64::max);
    println!(
        "oamp-check: {} grid points, largest gap {worst:.3e}{}",
        reports.len(),
        if degenerate {
            " (degenerate prior)"
        } else {
            ""
        }
    );
    Ok(value)
}

/// Mean spike-MSE trajectory over non-diverged trials, padded with final values.
pub fn mean_trajectory(outcomes: &[TrialOutcome]) -> Vec<f64> {
    let kept: Vec<&TrialOutcome> = outcomes
        .iter()
        .filter(|o| !o.run.diverged && !o.run.mse_history.is_empty())
        .collect();
    let len = kept
        .iter()
        .map(|o| o.run.mse_history.len())
        .max()
        .unwrap_or(0);
    (0..len)
        .map(|t| {
            kept.iter()
                .map(|o| o.run.mse_history[t.min(o.run.mse_history.len() - 1)])
                .sum::<f64>()
                / kept.len() as f64
        })
        .collect()
}

/// Summary of the structured-versus-surrogate comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SurrogateSummary {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub replica_mmse: f64,
    pub structured_final: f64,
    pub surrogate_final: f64,
    pub gap: f64,
    pub structured_excluded: usize,
    pub surrogate_excluded: usize,
}

/// TAP on the structured model and on its Gaussian surrogate with paired seeds.
pub fn cmd_surrogate_compare(
    exp: &Experiment,
    manifest: &mut Manifest,
) -> Result<SurrogateSummary, CliError> {
    let [lambda] = exp.lambda_grid[..] else {
        return Err(CliError::Validation(format!(
            "surrogate-compare needs exactly one lambda, got {}",
            exp.lambda_grid.len()
        )));
    };
    let theory = Theory::new(exp)?;
    let (model, sp) = theory.saddle(exp, lambda)?;
    let lambda_tilde = if sp.m_star > 0.0 {
        gaussian_surrogate_snr(model.law(), sp.m_star)?
    } else {
        0.0
    };
    let semicircle = build_builtin_density(BuiltinKind::Semicircle, &Default::default())?;
    let gaussian = Potential::gaussian();
    let surrogate = Theory {
        rho: semicircle,
        pot: gaussian,
        prior: theory.prior.clone(),
    };
    let (_, ssp) = surrogate.saddle(exp, lambda_tilde)?;

    let coupling = effective_coupling(&theory.rho, &theory.pot, lambda)?;
    let law = pushforward_law(&theory.rho, &coupling);
    let s_coupling = effective_coupling(&surrogate.rho, &surrogate.pot, lambda_tilde)?;
    let s_law = pushforward_law(&surrogate.rho, &s_coupling);
    let config = exp.tap.tap_config();
    let fixed = config.onsager_mode == OnsagerMode::FixedFromReplica;
    let structured = TrialSetup {
        rho: &theory.rho,
        prior: &theory.prior,
        coupling: &coupling,
        law: &law,
        n: exp.n,
        config,
        replica_gamma: fixed.then_some(sp.mhat_star),
        power_iters: exp.tap.power_iters,
    };
    let paired = TrialSetup {
        rho: &surrogate.rho,
        coupling: &s_coupling,
        law: &s_law,
        replica_gamma: fixed.then_some(ssp.mhat_star),
        ..structured.clone()
    };
    let seeds = seeds(exp);
    let a = run_trials(&structured, &seeds)?;
    let b = run_trials(&paired, &seeds)?;

    let mut w = csv::Writer::from_writer(manifest.create_csv("surrogate_trials.csv")?);
    let mut header = vec!["model"];
    header.extend(TRIAL_HEADER);
    w.write_record(&header)?;
    for (name, outcomes, l) in [("structured", &a, lambda), ("surrogate", &b, lambda_tilde)] {
        for o in outcomes {
            let mut rec = vec![name.to_string()];
            rec.extend(trial_record(l, o));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let ta = mean_trajectory(&a);
    let tb = mean_trajectory(&b);
    let len = ta.len().max(tb.len());
    let at = |v: &[f64], t: usize| v.get(t).or(v.last()).copied().unwrap_or(f64::NAN);
    let mut w = csv::Writer::from_writer(manifest.create_csv("surrogate_trajectories.csv")?);
    w.write_record(["t", "structured_mse", "surrogate_mse"])?;
    for t in 0..len {
        w.write_record([
            (t + 1).to_string(),
            at(&ta, t).to_string(),
            at(&tb, t).to_string(),
        ])?;
    }
    w.flush()?;

    let structured_final = at(&ta, len.saturating_sub(1));
    let surrogate_final = at(&tb, len.saturating_sub(1));
    let summary = SurrogateSummary {
        lambda,
        lambda_tilde,
        replica_mmse: 1.0 - sp.m_star * sp.m_star,
        structured_final,
        surrogate_final,
        gap: (structured_final - surrogate_final).abs(),
        structured_excluded: a.iter().filter(|o| o.run.diverged).count(),
        surrogate_excluded: b.iter().filter(|o| o.run.diverged).count(),
    };
    manifest.write_json("surrogate_summary.json", serde_json::to_value(&summary)?)?;
    println!(
        "surrogate-compare: lambda {lambda} -> {lambda_tilde:.6}, final MSE {structured_final:.6} vs {surrogate_final:.6}, replica {:.6}",
        summary.replica_mmse
    );
    Ok(summary)
}

/// Smoothed density, V' and J tables and the phase curve of an eigenvalue file.
pub fn cmd_spectrum_ingest(exp: &Experiment, manifest: &mut Manifest) -> Result<(), CliError> {
    let NoiseSpec::Eigenvalues { path, outliers } = &exp.noise else {
        return Err(CliError::Validation(
            "spectrum-ingest needs noise kind `file` with an eigenvalue list".into(),
        ));
    };
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let values = read_eigenvalues_csv(std::io::BufReader::new(file))?;
    let (spectrum, rho) = ingest_empirical_spectrum(&values, *outliers)?;
    let pot = Potential::for_density(&rho)?;
    let prior = exp.prior()?;
    let lambda = exp.ingest_lambda.unwrap_or_else(|| {
        exp.lambda_grid
            .iter()
            .copied()
            .find(|l| *l > 0.0)
            .unwrap_or(1.0)
    });
    let coupling = effective_coupling(&rho, &pot, lambda)?;

    let mut w = manifest.create_csv("standardized_spectrum.csv")?;
    write_density_csv(&rho, &mut w)?;
    w.flush()?;

    let mut w = csv::Writer::from_writer(manifest.create_csv("potential.csv")?);
    w.write_record(["x", "v_prime"])?;
    for &x in rho.nodes() {
        w.write_record([x.to_string(), pot.dv(x).to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(manifest.create_csv("coupling.csv")?);
    w.write_record(["x", "j"])?;
    for &x in rho.nodes() {
        w.write_record([x.to_string(), coupling.j(x).to_string()])?;
    }
    w.flush()?;

    let curve = phase_curve(
        &rho,
        &pot,
        &prior,
        &exp.lambda_grid,
        &exp.replica.solver_options(),
    )?;
    let mut w = manifest.create_csv("phase_curve.csv")?;
    curve.write_csv(&mut w)?;
    w.flush()?;

    // Kolmogorov distance between the smoothed law and the retained eigenvalues.
    let a = rho.affine();
    let mut sorted: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .map(|e| (e - a.shift) / a.scale)
        .collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = rho.grid_cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    let var = spectrum.eigenvalues.iter().map(|v| v * v).sum::<f64>() / n;
    manifest.write_json(
        "ingest_summary.json",
        json!({
            "input_count": values.len(),
            "removed_outliers": spectrum.removed_outliers,
            "retained_count": spectrum.eigenvalues.len(),
            "raw_mean": spectrum.shift,
            "raw_std": spectrum.scale,
            "standardized_variance": var,
            "support": [rho.support().0, rho.support().1],
            "kolmogorov_distance": ks,
            "coupling_lambda": lambda,
        }),
    )?;
    println!(
        "spectrum-ingest: {} eigenvalues, {} removed, Kolmogorov distance {ks:.4}",
        values.len(),
        spectrum.removed_outliers
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use spiked_core::tap::{Metrics, TapRun};

    fn outcome(seed: u64, mse: f64, diverged: bool, history: Vec<f64>) -> TrialOutcome {
        TrialOutcome {
            seed,
            run: TapRun {
                m_final: vec![],
                q_tilde_history: vec![],
                gamma_history: vec![],
                mse_history: history,
                iterations: 1,
                converged: !diverged,
                diverged,
                clamp_warnings: 0,
                metrics: Some(Metrics {
                    mse_spike: mse,
                    mse_vector: mse,
                    overlap: 0.0,
                }),
            },
            pca: None,
        }
    }

    #[test]
    fn aggregation_excludes_diverged() {
        let runs = vec![
            outcome(0, 0.1, false, vec![]),
            outcome(1, 9.0, true, vec![]),
            outcome(2, 0.3, false, vec![]),
        ];
        let a = aggregate(2.0, &runs, 0.2, 0.5);
        assert_eq!((a.included, a.excluded), (2, 1));
        assert!((a.mse_spike_mean - 0.2).abs() < 1e-15);
        assert!((a.mse_spike_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        let one = aggregate(2.0, &runs[..1], 0.2, 0.5);
        assert_eq!(one.mse_spike_std, None);
        assert_eq!(opt(one.mse_spike_std), "n/a");
    }

    #[test]
    fn trajectories_pad_with_final_value() {
        let runs = vec![
            outcome(0, 0.0, false, vec![1.0, 0.5]),
            outcome(1, 0.0, false, vec![0.8, 0.4, 0.2, 0.1]),
            outcome(2, 0.0, true, vec![5.0]),
        ];
        assert_eq!(mean_trajectory(&runs), vec![0.9, 0.45, 0.35, 0.3]);
    }
}
