//! Scenario files.
//!
//! One scenario per TOML file. Every seed is explicit; there are no
//! wall-clock defaults.

use std::f64::consts::FRAC_PI_3;
use std::path::Path;

use csl_core::hilbert::{random, HermitianOperator, StateVector};
use csl_core::noise::{rng_from_seed, CollapseParams, CookedLaw, NoiseMode, TimeGrid};
use csl_core::scenarios::{self, FreeParticleSetup};
use csl_core::trajectory::Scenario;
use csl_core::C64;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub time: Option<TimeSpec>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
    #[serde(default)]
    pub ledger: LedgerSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    /// `H_A = 0`, `A = diag(a)`, `psi0 = c`.
    TwoLevel {
        a: [f64; 2],
        c: [f64; 2],
        lambda: f64,
        #[serde(default = "one")]
        hbar: f64,
    },
    /// `H_A = omega sigma_x`, `A = sigma_z`, Bloch initial state.
    QubitDephasing {
        omega: f64,
        lambda: f64,
        #[serde(default = "one")]
        hbar: f64,
        #[serde(default = "default_theta")]
        theta: f64,
        #[serde(default)]
        phi: f64,
    },
    FreeParticleGrid {
        points: usize,
        dx: f64,
        mass: f64,
        #[serde(default = "one")]
        hbar: f64,
        #[serde(default)]
        x0: f64,
        sigma: f64,
        #[serde(default)]
        k0: f64,
        lambda: f64,
    },
    RandomMatrix {
        dim: usize,
        lambda: f64,
        #[serde(default = "one")]
        hbar: f64,
        matrix_seed: u64,
    },
    PostulateAnalysis {
        grid: GridSpec,
        analyses: Vec<AnalysisSpec>,
    },
}

fn one() -> f64 {
    1.0
}

fn default_theta() -> f64 {
    FRAC_PI_3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Raw,
    Cooked,
}

impl From<ModeSpec> for NoiseMode {
    fn from(m: ModeSpec) -> Self {
        match m {
            ModeSpec::Raw => NoiseMode::Raw,
            ModeSpec::Cooked => NoiseMode::Cooked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawSpec {
    #[default]
    Mixture,
    LeadingOrder,
}

impl From<LawSpec> for CookedLaw {
    fn from(l: LawSpec) -> Self {
        match l {
            LawSpec::Mixture => CookedLaw::Mixture,
            LawSpec::LeadingOrder => CookedLaw::LeadingOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub n: usize,
    pub mode: ModeSpec,
    pub master_seed: u64,
    #[serde(default)]
    pub cooked_law: LawSpec,
    #[serde(default)]
    pub field_energy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSpec {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_doublings")]
    pub max_doublings: usize,
}

fn default_samples() -> usize {
    512
}

fn default_doublings() -> usize {
    4
}

impl Default for LedgerSpec {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            max_doublings: default_doublings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// File name prefix for every artifact.
    #[serde(default = "default_stem")]
    pub stem: String,
}

fn default_stem() -> String {
    "csl".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { stem: default_stem() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_points: usize,
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl ScanSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Window { p1: f64, p2: f64, n: u32, b: f64 },
    Gaussian { x0: f64, sigma: f64, p0: f64 },
}

/// `(1 + tilt p) exp(-(p - center)^2 / 2 width^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSpec {
    pub center: f64,
    pub width: f64,
    #[serde(default)]
    pub tilt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseSpec {
    Zero,
    /// `sum_k coeffs[k] p^k`.
    Polynomial { coeffs: Vec<f64> },
    /// Independent uniform phase per grid point.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisSpec {
    /// Conservation residuals of a two-branch superposition.
    Pair {
        name: String,
        first: StateSpec,
        second: StateSpec,
        #[serde(default = "equal_weights")]
        alpha: [f64; 2],
        #[serde(default)]
        relative_phase: f64,
        b_scan: ScanSpec,
        a_scan: ScanSpec,
        #[serde(default = "one")]
        mass: f64,
    },
    Tail {
        name: String,
        state: StateSpec,
    },
    MomentScan {
        name: String,
        state: StateSpec,
        k: u32,
        domains: Vec<f64>,
    },
    EqualPhase {
        name: String,
        r1: EnvelopeSpec,
        r2: EnvelopeSpec,
        theta: PhaseSpec,
        /// Phase of the second state when it differs from the first.
        #[serde(default)]
        theta2: Option<PhaseSpec>,
        b_scan: ScanSpec,
    },
    GaussianTranslate {
        name: String,
        sigma: f64,
        b: Vec<f64>,
    },
}

fn equal_weights() -> [f64; 2] {
    [std::f64::consts::FRAC_1_SQRT_2; 2]
}

impl AnalysisSpec {
    pub fn name(&self) -> &str {
        match self {
            AnalysisSpec::Pair { name, .. }
            | AnalysisSpec::Tail { name, .. }
            | AnalysisSpec::MomentScan { name, .. }
            | AnalysisSpec::EqualPhase { name, .. }
            | AnalysisSpec::GaussianTranslate { name, .. } => name,
        }
    }
}

fn bad(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be non-negative and finite, got {v}")))
    }
}

fn finite(path: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be finite, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("<file>", format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            bad(if path == "." { "<root>".into() } else { path }, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_postulate(&self) -> bool {
        matches!(self.scenario, ScenarioSpec::PostulateAnalysis { .. })
    }

    fn validate(&self) -> Result<(), CliError> {
        let stem = &self.output.stem;
        if stem.is_empty() || !stem.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(bad("output.stem", "use letters, digits, '_' or '-' only"));
        }
        if let Some(t) = &self.time {
            positive("time.t_end", t.t_end)?;
            if t.steps == 0 {
                return Err(bad("time.steps", "must be at least 1"));
            }
        }
        if let Some(e) = &self.ensemble {
            if e.n == 0 {
                return Err(bad("ensemble.n", "must be at least 1"));
            }
        }
        if self.ledger.samples < 2 {
            return Err(bad("ledger.samples", "must be at least 2"));
        }
        match &self.scenario {
            ScenarioSpec::TwoLevel { a, c, lambda, hbar } => {
                finite("scenario.a[0]", a[0])?;
                finite("scenario.a[1]", a[1])?;
                if a[0] == a[1] {
                    return Err(bad("scenario.a", "the two eigenvalues must differ"));
                }
                let norm = c[0] * c[0] + c[1] * c[1];
                if (norm - 1.0).abs() > 1e-10 {
                    return Err(bad("scenario.c", format!("|c1|^2 + |c2|^2 = {norm}, must be 1")));
                }
                non_negative("scenario.lambda", *lambda)?;
                positive("scenario.hbar", *hbar)?;
            }
            ScenarioSpec::QubitDephasing {
                omega,
                lambda,
                hbar,
                theta,
                phi,
            } => {
                finite("scenario.omega", *omega)?;
                non_negative("scenario.lambda", *lambda)?;
                positive("scenario.hbar", *hbar)?;
                finite("scenario.theta", *theta)?;
                finite("scenario.phi", *phi)?;
            }
            ScenarioSpec::FreeParticleGrid {
                points,
                dx,
                mass,
                hbar,
                x0,
                sigma,
                k0,
                lambda,
            } => {
                if *points < 4 || points % 2 != 0 {
                    return Err(bad("scenario.points", format!("need an even count >= 4, got {points}")));
                }
                positive("scenario.dx", *dx)?;
                positive("scenario.mass", *mass)?;
                positive("scenario.hbar", *hbar)?;
                positive("scenario.sigma", *sigma)?;
                finite("scenario.x0", *x0)?;
                finite("scenario.k0", *k0)?;
                non_negative("scenario.lambda", *lambda)?;
            }
            ScenarioSpec::RandomMatrix { dim, lambda, hbar, .. } => {
                if *dim < 2 {
                    return Err(bad("scenario.dim", "need at least two levels"));
                }
                non_negative("scenario.lambda", *lambda)?;
                positive("scenario.hbar", *hbar)?;
            }
            ScenarioSpec::PostulateAnalysis { grid, analyses } => {
                if grid.n_points < 256 || !grid.n_points.is_power_of_two() {
                    return Err(bad("scenario.grid.n_points", "need a power of two >= 256"));
                }
                finite("scenario.grid.p_min", grid.p_min)?;
                finite("scenario.grid.p_max", grid.p_max)?;
                if grid.p_max <= grid.p_min {
                    return Err(bad("scenario.grid.p_max", "must exceed p_min"));
                }
                if analyses.is_empty() {
                    return Err(bad("scenario.analyses", "list at least one analysis"));
                }
                let mut seen = std::collections::BTreeSet::new();
                for (i, a) in analyses.iter().enumerate() {
                    validate_analysis(&format!("scenario.analyses[{i}]"), a)?;
                    if !seen.insert(a.name()) {
                        return Err(bad(format!("scenario.analyses[{i}].name"), "duplicate analysis name"));
                    }
                }
            }
        }
        if !self.is_postulate() && self.time.is_none() {
            return Err(bad("time", "missing table: dynamical scenarios need t_end and steps"));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        let t = self.time.ok_or_else(|| bad("time", "missing table"))?;
        TimeGrid::new(t.t_end, t.steps).map_err(|e| bad("time", e.to_string()))
    }

    /// Builds the dynamical scenario; postulate configs have none.
    pub fn build(&self) -> Result<Scenario, CliError> {
        let grid = self.time_grid()?;
        let map = |e: csl_core::Error| CliError::Numerical(e);
        match &self.scenario {
            ScenarioSpec::TwoLevel { a, c, lambda, hbar } => {
                let psi0 = StateVector::new(vec![C64::new(c[0], 0.0), C64::new(c[1], 0.0)]).map_err(map)?;
                scenarios::dense(
                    HermitianOperator::zeros(2),
                    HermitianOperator::from_real_diagonal(a),
                    psi0,
                    CollapseParams::new(*lambda, *hbar).map_err(map)?,
                    grid,
                )
                .map_err(map)
            }
            ScenarioSpec::QubitDephasing {
                omega,
                lambda,
                hbar,
                theta,
                phi,
            } => scenarios::dense(
                HermitianOperator::pauli_x().scaled(*omega),
                HermitianOperator::pauli_z(),
                scenarios::bloch_state(*theta, *phi),
                CollapseParams::new(*lambda, *hbar).map_err(map)?,
                grid,
            )
            .map_err(map),
            ScenarioSpec::FreeParticleGrid {
                points,
                dx,
                mass,
                hbar,
                x0,
                sigma,
                k0,
                lambda,
            } => scenarios::free_particle(&FreeParticleSetup {
                points: *points,
                dx: *dx,
                mass: *mass,
                hbar: *hbar,
                x0: *x0,
                sigma: *sigma,
                k0: *k0,
                lambda: *lambda,
                t_end: grid.t_end(),
                steps: grid.steps(),
            })
            .map_err(map),
            ScenarioSpec::RandomMatrix {
                dim,
                lambda,
                hbar,
                matrix_seed,
            } => {
                let mut rng = rng_from_seed(*matrix_seed);
                let a = random::hermitian(*dim, &mut rng);
                let h = random::hermitian(*dim, &mut rng);
                let psi0 = random::state(*dim, &mut rng);
                scenarios::dense(h, a, psi0, CollapseParams::new(*lambda, *hbar).map_err(map)?, grid).map_err(map)
            }
            ScenarioSpec::PostulateAnalysis { .. } => Err(bad(
                "scenario.kind",
                "postulate_analysis has no dynamics; use the postulate subcommand",
            )),
        }
    }
}

fn validate_state(path: &str, s: &StateSpec) -> Result<(), CliError> {
    match s {
        StateSpec::Window { p1, p2, b, .. } => {
            finite(&format!("{path}.p1"), *p1)?;
            finite(&format!("{path}.b"), *b)?;
            if !(p2 > p1) {
                return Err(bad(format!("{path}.p2"), "must exceed p1"));
            }
        }
        StateSpec::Gaussian { x0, sigma, p0 } => {
            finite(&format!("{path}.x0"), *x0)?;
            positive(&format!("{path}.sigma"), *sigma)?;
            finite(&format!("{path}.p0"), *p0)?;
        }
    }
    Ok(())
}

fn validate_scan(path: &str, s: &ScanSpec) -> Result<(), CliError> {
    finite(&format!("{path}.min"), s.min)?;
    finite(&format!("{path}.max"), s.max)?;
    if s.count == 0 {
        return Err(bad(format!("{path}.count"), "must be at least 1"));
    }
    if s.max < s.min {
        return Err(bad(format!("{path}.max"), "must not be below min"));
    }
    Ok(())
}

fn validate_phase(path: &str, p: &PhaseSpec) -> Result<(), CliError> {
    if let PhaseSpec::Polynomial { coeffs } = p {
        for (i, c) in coeffs.iter().enumerate() {
            finite(&format!("{path}.coeffs[{i}]"), *c)?;
        }
    }
    Ok(())
}

fn validate_analysis(path: &str, a: &AnalysisSpec) -> Result<(), CliError> {
    let name = a.name();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(bad(format!("{path}.name"), "use letters, digits, '_' or '-' only"));
    }
    match a {
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
            validate_state(&format!("{path}.first"), first)?;
            validate_state(&format!("{path}.second"), second)?;
            let norm = alpha[0] * alpha[0] + alpha[1] * alpha[1];
            if (norm - 1.0).abs() > 1e-10 {
                return Err(bad(format!("{path}.alpha"), format!("|alpha1|^2 + |alpha2|^2 = {norm}, must be 1")));
            }
            finite(&format!("{path}.relative_phase"), *relative_phase)?;
            validate_scan(&format!("{path}.b_scan"), b_scan)?;
            validate_scan(&format!("{path}.a_scan"), a_scan)?;
            positive(&format!("{path}.mass"), *mass)?;
        }
        AnalysisSpec::Tail { state, .. } => validate_state(&format!("{path}.state"), state)?,
        AnalysisSpec::MomentScan { state, k, domains, .. } => {
            validate_state(&format!("{path}.state"), state)?;
            if *k == 0 || k % 2 != 0 {
                return Err(bad(format!("{path}.k"), "must be even and positive"));
            }
            if domains.len() < 3 {
                return Err(bad(format!("{path}.domains"), "need at least three domain sizes"));
            }
            for (i, d) in domains.iter().enumerate() {
                positive(&format!("{path}.domains[{i}]"), *d)?;
            }
        }
        AnalysisSpec::EqualPhase {
            r1, r2, theta, theta2, b_scan, ..
        } => {
            for (tag, r) in [("r1", r1), ("r2", r2)] {
                finite(&format!("{path}.{tag}.center"), r.center)?;
                positive(&format!("{path}.{tag}.width"), r.width)?;
                finite(&format!("{path}.{tag}.tilt"), r.tilt)?;
            }
            validate_phase(&format!("{path}.theta"), theta)?;
            if let Some(t) = theta2 {
                validate_phase(&format!("{path}.theta2"), t)?;
            }
            validate_scan(&format!("{path}.b_scan"), b_scan)?;
        }
        AnalysisSpec::GaussianTranslate { sigma, b, .. } => {
            positive(&format!("{path}.sigma"), *sigma)?;
            for (i, x) in b.iter().enumerate() {
                finite(&format!("{path}.b[{i}]"), *x)?;
            }
        }
    }
    Ok(())
}
