use csl_core::ensemble::{run_ensemble, EnsembleOptions, EnsembleStats};
use csl_core::ledger::{deterministic_ledger, LedgerOptions, LedgerReport};
use csl_core::noise::{rng_from_seed, NoiseMode};
use csl_core::postulate::{
    build_window_state, collapse_residual, eq1_residual, gaussian_state, gaussian_translate_overlap,
    moment_divergence_scan, orthogonalize, phase_symmetry, tail_exponent, Generator, MomentumGrid, MomentumState,
    Superposition,
};
use csl_core::stats::{linear_fit, Estimate};
use csl_core::{Error, C64};
use rand::Rng;
use serde_json::{json, Value};

use crate::acceptance::{self, AcceptanceOptions, Outcome};
use crate::config::{AnalysisSpec, EnvelopeSpec, PhaseSpec, ScenarioConfig, ScenarioSpec, StateSpec};
use crate::error::CliError;
use crate::output::{csv, Artifacts};

/// Residual at or below which a generator counts as conserved.
pub const CONSERVED: f64 = 1e-10;

/// Result of a command: files to write, lines to print, and whether the
/// command's own check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub artifacts: Artifacts,
    pub summary: Vec<String>,
    pub seeds: Vec<u64>,
    pub passed: bool,
}

fn estimate_json(e: &Estimate) -> Value {
    json!({ "mean": e.mean, "std_error": e.std_error })
}

fn ledger_json(rep: &LedgerReport) -> Value {
    let l = &rep.ledger;
    json!({
        "max_deviation": rep.max_deviation,
        "tolerance": rep.tolerance,
        "hamiltonian_norm": rep.hamiltonian_norm,
        "passes": rep.passes(),
        "quadrature_change": rep.quadrature_change,
        "propagation_change": rep.propagation_change,
        "drift_error": rep.drift_error,
        "system_slope": linear_fit(&l.times, &l.system).slope,
        "field_slope": linear_fit(&l.times, &l.field).slope,
        "window": rep.window.map(|w| json!({ "max_seam_mass": w.max_seam_mass, "ok": w.ok })),
    })
}

fn ledger_csv(rep: &LedgerReport) -> String {
    csv(&["t", "H_A", "H_w", "V", "total"], rep.ledger.rows())
}

fn ledger_options(cfg: &ScenarioConfig) -> LedgerOptions {
    LedgerOptions {
        samples: cfg.ledger.samples,
        max_doublings: cfg.ledger.max_doublings,
    }
}

fn config_json(cfg: &ScenarioConfig) -> Value {
    serde_json::to_value(cfg).expect("config serialises")
}

fn ensemble_json(stats: &EnsembleStats) -> Value {
    let headline = stats.headline_allowed();
    let frequencies: Vec<Value> = stats
        .outcome_frequencies
        .iter()
        .map(|f| json!({ "eigenvalue": f.eigenvalue, "frequency": f.frequency, "std_error": f.std_error }))
        .collect();
    let failures: Vec<Value> = stats
        .failures
        .iter()
        .map(|f| json!({ "index": f.index, "seed": f.seed, "error": f.error.to_string() }))
        .collect();
    json!({
        "mode": match stats.mode { NoiseMode::Raw => "raw", NoiseMode::Cooked => "cooked" },
        "master_seed": stats.master_seed,
        "trajectories": stats.n_trajectories,
        "failures": failures,
        "effective_sample_size": stats.effective_sample_size,
        "headline_allowed": headline,
        "weight_mean": estimate_json(&stats.weight_mean),
        "outcome_frequencies": if headline { Value::Array(frequencies) } else { Value::Null },
        "final_energy": if headline { estimate_json(&stats.final_energy) } else { Value::Null },
        "field_energy": stats.field_energy.filter(|_| headline).map(|e| estimate_json(&e)),
        "interaction_energy": if headline { estimate_json(&stats.interaction_energy) } else { Value::Null },
    })
}

/// Ensemble run plus the deterministic ledger.
pub fn run(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let ens = cfg.ensemble.ok_or_else(|| CliError::Config {
        path: "ensemble".into(),
        message: "missing table: the run command needs n, mode and master_seed".into(),
    })?;
    let sc = cfg.build()?;
    let opts = EnsembleOptions {
        law: ens.cooked_law.into(),
        field_energy: ens.field_energy,
        energy_series: true,
        ..EnsembleOptions::default()
    };
    let stats = run_ensemble(&sc, ens.n, ens.mode.into(), ens.master_seed, &opts)?;
    let rep = deterministic_ledger(&sc, &ledger_options(cfg))?;
    let stem = &cfg.output.stem;

    let mut summary = Vec::new();
    if let Some(w) = sc.resolution_warning() {
        summary.push(format!("warning: {w}"));
    }
    if !stats.headline_allowed() {
        summary.push(format!(
            "warning: effective sample size {:.1} is below {}; headline numbers suppressed",
            stats.effective_sample_size,
            csl_core::ensemble::MIN_EFFECTIVE_SAMPLES
        ));
    }
    if stats.headline_allowed() {
        for f in &stats.outcome_frequencies {
            summary.push(format!(
                "frequency({:.6}) = {:.6} +/- {:.6}",
                f.eigenvalue, f.frequency, f.std_error
            ));
        }
    }
    summary.push(format!(
        "ledger max deviation {:.3e} (tolerance {:.3e}) {}",
        rep.max_deviation,
        rep.tolerance,
        if rep.passes() { "pass" } else { "FAIL" }
    ));

    let mut artifacts = Artifacts::default();
    let mut report = json!({
        "scenario": config_json(cfg),
        "ensemble": ensemble_json(&stats),
        "ledger": ledger_json(&rep),
        "resolution_warning": sc.resolution_warning(),
    });
    if !stats.failures.is_empty() {
        report["ensemble"]["failure_count"] = json!(stats.failures.len());
    }
    artifacts.push_json(format!("{stem}_report.json"), &report);
    let series: Vec<Vec<f64>> = (0..stats.times.len())
        .map(|k| {
            let mut row = vec![stats.times[k], stats.mean_a[k]];
            if let Some(h) = &stats.mean_energy {
                row.push(h[k]);
            }
            row
        })
        .collect();
    let header: &[&str] = if stats.mean_energy.is_some() {
        &["t", "mean_A", "mean_H_A"]
    } else {
        &["t", "mean_A"]
    };
    artifacts.push(format!("{stem}_series.csv"), csv(header, series));
    artifacts.push(format!("{stem}_ledger.csv"), ledger_csv(&rep));
    let mut seeds = vec![ens.master_seed];
    if let ScenarioSpec::RandomMatrix { matrix_seed, .. } = cfg.scenario {
        seeds.push(matrix_seed);
    }
    Ok(CommandOutput {
        artifacts,
        summary,
        seeds,
        passed: true,
    })
}

/// Deterministic ledger only.
pub fn ledger(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let sc = cfg.build()?;
    let rep = deterministic_ledger(&sc, &ledger_options(cfg))?;
    let stem = &cfg.output.stem;
    let mut artifacts = Artifacts::default();
    artifacts.push(format!("{stem}_ledger.csv"), ledger_csv(&rep));
    artifacts.push_json(
        format!("{stem}_ledger.json"),
        &json!({ "scenario": config_json(cfg), "ledger": ledger_json(&rep) }),
    );
    let mut summary = vec![format!(
        "max conservation deviation {:.3e}, tolerance {:.3e}: {}",
        rep.max_deviation,
        rep.tolerance,
        if rep.passes() { "pass" } else { "FAIL" }
    )];
    if let Some(w) = rep.window {
        summary.push(format!("max seam mass {:.3e} ({})", w.max_seam_mass, if w.ok { "ok" } else { "violated" }));
    }
    let seeds = match cfg.scenario {
        ScenarioSpec::RandomMatrix { matrix_seed, .. } => vec![matrix_seed],
        _ => Vec::new(),
    };
    Ok(CommandOutput {
        artifacts,
        summary,
        seeds,
        passed: rep.passes(),
    })
}

fn build_state(grid: &MomentumGrid, s: &StateSpec) -> csl_core::Result<MomentumState> {
    match *s {
        StateSpec::Window { p1, p2, n, b } => build_window_state(grid, p1, p2, n, b),
        StateSpec::Gaussian { x0, sigma, p0 } => gaussian_state(grid, x0, sigma, p0),
    }
}

fn envelope(e: EnvelopeSpec) -> impl Fn(f64) -> f64 {
    move |p| (1.0 + e.tilt * p) * (-(p - e.center).powi(2) / (2.0 * e.width * e.width)).exp()
}

fn phase_profile(grid: &MomentumGrid, spec: &PhaseSpec) -> Box<dyn Fn(f64) -> f64> {
    match spec {
        PhaseSpec::Zero => Box::new(|_| 0.0),
        PhaseSpec::Polynomial { coeffs } => {
            let c = coeffs.clone();
            Box::new(move |p| c.iter().rev().fold(0.0, |acc, k| acc * p + k))
        }
        PhaseSpec::Random { seed } => {
            let mut rng = rng_from_seed(*seed);
            let table: Vec<f64> = (0..grid.n_points())
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let (p0, dp) = (grid.p_min(), grid.dp());
            Box::new(move |p| table[(((p - p0) / dp).round() as usize).min(table.len() - 1)])
        }
    }
}

struct Analysis {
    report: Value,
    csv: Option<(String, String)>,
    summary: String,
}

fn analyze(grid: &MomentumGrid, spec: &AnalysisSpec, stem: &str) -> Result<Analysis, CliError> {
    let name = spec.name();
    let file = |what: &str| format!("{stem}_{name}_{what}.csv");
    Ok(match spec {
        AnalysisSpec::Pair {
            first,
            second,
            alpha,
            relative_phase,
            b_scan,
            a_scan,
            mass,
            ..
        } => {
            let s1 = build_state(grid, first)?;
            let s2 = orthogonalize(&s1, &build_state(grid, second)?)?;
            let eq1 = eq1_residual(&s1, &s2)?;
            let sup = Superposition::new(
                C64::new(alpha[0], 0.0),
                C64::from_polar(alpha[1], *relative_phase),
                s1,
                s2,
            )?;
            let (bs, as_) = (b_scan.values(), a_scan.values());
            let mut rows = Vec::with_capacity(bs.len().max(as_.len()));
            let (mut max_p, mut max_e) = (0.0_f64, 0.0_f64);
            for i in 0..bs.len().max(as_.len()) {
                let b = bs.get(i).copied();
                let a = as_.get(i).copied();
                let rp = b
                    .map(|b| collapse_residual(&sup, Generator::Momentum { b }))
                    .transpose()?;
                let re = a
                    .map(|a| collapse_residual(&sup, Generator::Energy { a, mass: *mass }))
                    .transpose()?;
                max_p = max_p.max(rp.unwrap_or(0.0));
                max_e = max_e.max(re.unwrap_or(0.0));
                rows.push([
                    b.unwrap_or(f64::NAN),
                    rp.unwrap_or(f64::NAN),
                    a.unwrap_or(f64::NAN),
                    re.unwrap_or(f64::NAN),
                ]);
            }
            let verdict = if max_p <= CONSERVED && max_e <= CONSERVED {
                "conserving but non-localized"
            } else {
                "generic violation"
            };
            Analysis {
                report: json!({
                    "type": "pair",
                    "eq1_residual": eq1,
                    "max_momentum_residual": max_p,
                    "max_energy_residual": max_e,
                    "verdict": verdict,
                }),
                csv: Some((file("residuals"), csv(&["b", "residual_P", "a", "residual_E"], rows))),
                summary: format!("{name}: {verdict} (max residual P {max_p:.2e}, E {max_e:.2e})"),
            }
        }
        AnalysisSpec::Tail { state, .. } => {
            let s = build_state(grid, state)?;
            match tail_exponent(&s) {
                Ok(fit) => Analysis {
                    report: json!({
                        "type": "tail",
                        "exponent": fit.exponent,
                        "fit_range": [fit.x_range.0, fit.x_range.1],
                        "verdict": "power law",
                    }),
                    csv: Some((file("tail"), csv(&["x", "envelope"], fit.points.iter().map(|p| [p.0, p.1])))),
                    summary: format!("{name}: tail exponent {:.4}", fit.exponent),
                },
                Err(Error::FitRejected(reason)) => Analysis {
                    report: json!({ "type": "tail", "exponent": null, "verdict": "rejected", "reason": reason }),
                    csv: None,
                    summary: format!("{name}: fit rejected ({reason})"),
                },
                Err(e) => return Err(e.into()),
            }
        }
        AnalysisSpec::MomentScan { state, k, domains, .. } => {
            let scan = moment_divergence_scan(grid, |g| build_state(g, state), *k, domains)?;
            let verdict = scan.verdict.as_str();
            Analysis {
                report: json!({ "type": "moment_scan", "order": k, "verdict": verdict }),
                csv: Some((file("moments"), csv(&["L", "moment"], scan.moments.iter().map(|m| [m.0, m.1])))),
                summary: format!("{name}: <x^{k}> {verdict}"),
            }
        }
        AnalysisSpec::EqualPhase {
            r1, r2, theta, theta2, b_scan, ..
        } => {
            let (f1, f2) = (envelope(*r1), envelope(*r2));
            let t1 = phase_profile(grid, theta);
            let t2 = phase_profile(grid, theta2.as_ref().unwrap_or(theta));
            let rep = phase_symmetry(grid, (&f1, &*t1), (&f2, &*t2), &b_scan.values())?;
            let verdict = if rep.max_asymmetry <= 1e-8 { "symmetric" } else { "asymmetric" };
            Analysis {
                report: json!({
                    "type": "equal_phase",
                    "max_asymmetry": rep.max_asymmetry,
                    "overlap_at_zero": rep.overlap_at_zero,
                    "right_max": [rep.right_max.0, rep.right_max.1],
                    "left_max": [rep.left_max.0, rep.left_max.1],
                    "verdict": verdict,
                }),
                csv: Some((file("overlap"), csv(&["b", "abs_I"], rep.scan.iter().map(|p| [p.0, p.1])))),
                summary: format!("{name}: {verdict} (max asymmetry {:.2e})", rep.max_asymmetry),
            }
        }
        AnalysisSpec::GaussianTranslate { sigma, b, .. } => {
            let rows: Vec<[f64; 3]> = b
                .iter()
                .map(|&x| {
                    let o = gaussian_translate_overlap(*sigma, x)?;
                    Ok([x, o.ln_value, o.value()])
                })
                .collect::<csl_core::Result<_>>()?;
            let smallest = rows.iter().map(|r| r[1]).fold(f64::INFINITY, f64::min);
            Analysis {
                report: json!({
                    "type": "gaussian_translate",
                    "sigma": sigma,
                    "min_ln_overlap": smallest,
                    "verdict": "nonzero for every finite b",
                }),
                csv: Some((file("overlap"), csv(&["b", "ln_overlap", "overlap"], rows))),
                summary: format!("{name}: smallest overlap exp({smallest:.4e})"),
            }
        }
    })
}

pub fn postulate(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let ScenarioSpec::PostulateAnalysis { grid, analyses } = &cfg.scenario else {
        return Err(CliError::Config {
            path: "scenario.kind".into(),
            message: "the postulate command needs kind = \"postulate_analysis\"".into(),
        });
    };
    let grid = MomentumGrid::new(grid.n_points, grid.p_min, grid.p_max)?;
    let stem = &cfg.output.stem;
    let mut artifacts = Artifacts::default();
    let mut summary = Vec::new();
    let mut results = serde_json::Map::new();
    for spec in analyses {
        let a = analyze(&grid, spec, stem)?;
        results.insert(spec.name().to_string(), a.report);
        if let Some((file, text)) = a.csv {
            artifacts.push(file, text);
        }
        summary.push(a.summary);
    }
    let mut seeds: Vec<u64> = analyses
        .iter()
        .filter_map(|a| match a {
            AnalysisSpec::EqualPhase { theta, theta2, .. } => Some([Some(theta), theta2.as_ref()]),
            _ => None,
        })
        .flatten()
        .flatten()
        .filter_map(|p| match p {
            PhaseSpec::Random { seed } => Some(*seed),
            _ => None,
        })
        .collect();
    seeds.dedup();
    artifacts.push_json(
        format!("{stem}_postulate.json"),
        &json!({ "scenario": config_json(cfg), "analyses": Value::Object(results) }),
    );
    Ok(CommandOutput {
        artifacts,
        summary,
        seeds,
        passed: true,
    })
}

/// Runs the acceptance suite; `passed` is true iff every criterion passes.
pub fn verify(opts: &AcceptanceOptions) -> (Vec<Outcome>, bool) {
    let outcomes = acceptance::run_all(opts);
    let ok = outcomes.iter().all(|o| o.passed);
    (outcomes, ok)
}
