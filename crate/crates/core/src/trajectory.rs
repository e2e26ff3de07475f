//! Single-trajectory evolution under a noise path.
//!
//! A step from `t_k` to `t_k + dt` applies
//! `exp(-(dt/4 lambda)(w_k - 2 lambda A(t_k + dt/2))^2)`, with `A(t)` the
//! interaction-picture collapse operator. Internally the state lives in the
//! eigenbasis of `A` (see [`crate::dynamics`]) and only the reduced factor
//! `exp(dt (w_k A - lambda A^2))` is applied; the Gaussian prefactor
//! `exp(-w_k^2 dt / 4 lambda)` is a scalar and is added back in log space.

use std::sync::Arc;

use nalgebra::DVector;

use crate::dynamics::{Dynamics, Workspace};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{check_dims, HermitianOperator, StateVector, MAX_EXPONENT};
use crate::noise::{
    draw_cooked, rng_from_seed, CollapseParams, CookedLaw, NoiseMode, NoisePath, TimeGrid,
};
use crate::tolerance;
use crate::C64;

/// Model, initial state, collapse parameters and time grid.
#[derive(Debug, Clone)]
pub struct Scenario {
    dynamics: Arc<Dynamics>,
    psi0: StateVector,
    params: CollapseParams,
    grid: TimeGrid,
}

impl Scenario {
    pub fn new(
        dynamics: Arc<Dynamics>,
        psi0: StateVector,
        params: CollapseParams,
        grid: TimeGrid,
    ) -> Result<Self> {
        check_dims(dynamics.dim(), psi0.dim())?;
        if (psi0.norm_sqr().sqrt() - 1.0).abs() > tolerance::CONSTRUCTION {
            return Err(invalid(
                "psi0",
                format!("must be normalised, norm is {}", psi0.norm_sqr().sqrt()),
            ));
        }
        if (params.hbar - dynamics.hbar()).abs() > tolerance::CONSTRUCTION * params.hbar {
            return Err(invalid("hbar", "collapse parameters and model disagree"));
        }
        Ok(Self {
            dynamics,
            psi0,
            params,
            grid,
        })
    }

    pub fn dynamics(&self) -> &Arc<Dynamics> {
        &self.dynamics
    }

    pub fn psi0(&self) -> &StateVector {
        &self.psi0
    }

    pub fn params(&self) -> &CollapseParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hamiltonian(&self) -> HermitianOperator {
        self.dynamics.hamiltonian()
    }

    pub fn collapse_operator(&self) -> HermitianOperator {
        self.dynamics.collapse_operator()
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Self {
        Self {
            grid,
            ..self.clone()
        }
    }

    pub fn with_params(&self, params: CollapseParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    pub fn resolution_warning(&self) -> Option<String> {
        self.grid
            .resolution_warning(&self.params, self.dynamics.spectral_range())
    }
}

/// What [`evolve`] records besides the final state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvolveOptions {
    pub series: bool,
    /// Adds `<H_A>` to each series record.
    pub energy: bool,
    /// Keeps the interaction-picture state after every step.
    pub store_states: bool,
    pub field_energy: bool,
    /// Checkpoint spacing for the backward sweep; `0` picks `ceil(sqrt(S))`.
    pub checkpoint_stride: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            series: true,
            energy: false,
            store_states: false,
            field_energy: false,
            checkpoint_stride: 0,
        }
    }
}

impl EvolveOptions {
    pub fn minimal() -> Self {
        Self {
            series: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesRecord {
    pub t: f64,
    pub exp_a: f64,
    /// Squared norm of the reduced propagator applied to `psi0` up to `t`.
    pub norm2: f64,
    pub var_a: f64,
    pub energy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    /// Normalised interaction-picture state at `T`.
    pub final_state: StateVector,
    /// `ln ||psi_T||^2` for the full propagator, Gaussian prefactor included.
    pub log_norm2: f64,
    /// `ln` of the squared norm of the reduced propagator state.
    pub log_reduced_norm2: f64,
    /// Statistical weight: the importance weight in raw mode, 1 in cooked mode.
    pub weight: f64,
    pub mode: NoiseMode,
    pub path: NoisePath,
    pub series: Vec<SeriesRecord>,
    pub stored_states: Option<Vec<StateVector>>,
    /// Populations of the final state in the eigenbasis of `A(T)`.
    pub final_populations: Vec<f64>,
    pub final_energy: f64,
    pub field_energy_sample: Option<f64>,
    /// `<A (w_last - 2 lambda A)>` in the post-collapse state of the last step.
    pub interaction_sample: f64,
}

impl TrajectoryResult {
    /// The unnormalised state when its norm is representable.
    pub fn unnormalized_state(&self) -> Result<StateVector> {
        let half = 0.5 * self.log_norm2;
        if !(half.abs() < MAX_EXPONENT) {
            return Err(Error::Range {
                what: "final state norm",
                exponent: half,
            });
        }
        StateVector::from_dvector(self.final_state.as_dvector() * C64::new(half.exp(), 0.0))
    }

    pub fn metrics(&self, values: &[f64]) -> CollapseMetrics {
        metrics_from_populations(values, &self.final_populations)
    }
}

/// Per-step reduced collapse factors with overflow shift.
struct Collapse<'a> {
    values: &'a [f64],
    lambda: f64,
    dt: f64,
}

impl Collapse<'_> {
    /// Applies `exp(dt (w a_i - lambda a_i^2))`, renormalises, and returns
    /// the log of the norm that was divided out.
    fn apply(&self, v: &mut DVector<C64>, w: f64) -> Result<f64> {
        let shift = self
            .values
            .iter()
            .map(|&a| self.dt * (w * a - self.lambda * a * a))
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::Range {
                what: "collapse exponent",
                exponent: shift,
            });
        }
        for (z, &a) in v.iter_mut().zip(self.values) {
            *z *= (self.dt * (w * a - self.lambda * a * a) - shift).exp();
        }
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Range {
                what: "collapse step norm",
                exponent: shift,
            });
        }
        *v /= C64::new(norm, 0.0);
        Ok(shift + norm.ln())
    }
}

fn populations(v: &DVector<C64>) -> impl Iterator<Item = f64> + Clone + '_ {
    v.iter().map(|z| z.norm_sqr())
}

fn moments(values: &[f64], v: &DVector<C64>) -> (f64, f64) {
    let mean: f64 = populations(v).zip(values).map(|(p, a)| p * a).sum();
    let var: f64 = populations(v)
        .zip(values)
        .map(|(p, a)| p * (a - mean) * (a - mean))
        .sum();
    (mean, var)
}

enum Source<'a, R> {
    Path(&'a [f64]),
    Cooked { law: CookedLaw, rng: R },
}

struct Forward {
    series: Vec<SeriesRecord>,
    states: Option<Vec<StateVector>>,
    checkpoints: Vec<(DVector<C64>, f64)>,
    values: Vec<f64>,
    final_v: DVector<C64>,
    log_reduced: f64,
    interaction: f64,
}

fn run_forward<R: rand::Rng>(
    scenario: &Scenario,
    mut source: Source<'_, R>,
    opts: &EvolveOptions,
    stride: usize,
) -> Result<Forward> {
    let dynamics = scenario.dynamics.as_ref();
    let grid = scenario.grid;
    let dt = grid.dt();
    let values = dynamics.collapse_values();
    let lambda = scenario.params.lambda;
    let half = dynamics.free_step(0.5 * dt)?;
    let collapse = Collapse { values, lambda, dt };
    let mut ws = dynamics.workspace();
    let mut v = dynamics.to_collapse_basis(&scenario.psi0)?;
    let mut ell = 0.0;

    let steps = grid.steps();
    let mut series = Vec::with_capacity(if opts.series { steps + 1 } else { 0 });
    let mut states = opts.store_states.then(|| Vec::with_capacity(steps));
    let mut checkpoints = Vec::new();
    let mut noise = Vec::with_capacity(steps);
    let mut interaction = 0.0;

    let mut record = |k: usize, v: &DVector<C64>, ell: f64, ws: &mut Workspace| {
        if opts.series {
            let (exp_a, var_a) = moments(values, v);
            series.push(SeriesRecord {
                t: grid.time(k),
                exp_a,
                norm2: (2.0 * ell).exp(),
                var_a,
                energy: opts.energy.then(|| dynamics.energy(v, ws)),
            });
        }
    };
    record(0, &v, ell, &mut ws);

    for k in 0..steps {
        if opts.field_energy && k % stride == 0 {
            checkpoints.push((v.clone(), ell));
        }
        half.apply(&mut v, &mut ws);
        let w = match &mut source {
            Source::Path(p) => p[k],
            Source::Cooked { law, rng } => {
                draw_cooked(*law, values, populations(&v), &scenario.params, dt, rng)
            }
        };
        noise.push(w);
        ell += collapse.apply(&mut v, w)?;
        if k + 1 == steps {
            interaction = populations(&v)
                .zip(values)
                .map(|(p, a)| p * a * (w - 2.0 * lambda * a))
                .sum();
        }
        half.apply(&mut v, &mut ws);
        if let Some(states) = states.as_mut() {
            states.push(to_interaction(dynamics, &v, grid.time(k + 1))?);
        }
        record(k + 1, &v, ell, &mut ws);
    }
    Ok(Forward {
        series,
        states,
        checkpoints,
        values: noise,
        final_v: v,
        log_reduced: 2.0 * ell,
        interaction,
    })
}

fn to_interaction(dynamics: &Dynamics, v: &DVector<C64>, t: f64) -> Result<StateVector> {
    let mut u = v.clone();
    let mut ws = dynamics.workspace();
    dynamics.free_step(-t)?.apply(&mut u, &mut ws);
    dynamics.from_collapse_basis(&u)
}

/// Backward sweep for the per-path field-energy functional
/// `sum_j Z_j (w_{j+1} - w_{j-1}) / 2` (one-sided at the ends), where
/// `Z_j = Im <xi_j|A|phi_j> / ||phi_T||^2` at the collapse point of step `j`.
fn field_energy_sweep(
    scenario: &Scenario,
    fwd: &Forward,
    stride: usize,
) -> Result<f64> {
    let dynamics = scenario.dynamics.as_ref();
    let dt = scenario.grid.dt();
    let steps = scenario.grid.steps();
    let values = dynamics.collapse_values();
    let w = &fwd.values;
    if fwd.checkpoints.is_empty() || steps < 2 {
        return Ok(0.0);
    }
    let collapse = Collapse {
        values,
        lambda: scenario.params.lambda,
        dt,
    };
    let half = dynamics.free_step(0.5 * dt)?;
    let back = dynamics.free_step(-0.5 * dt)?;
    let mut ws = dynamics.workspace();
    let ell_t = 0.5 * fwd.log_reduced;

    let coefficient = |j: usize| {
        let mut c = 0.0;
        if j >= 1 {
            c += w[j] - w[j - 1];
        }
        if j + 1 < steps {
            c += w[j + 1] - w[j];
        }
        0.5 * c
    };

    let mut b = fwd.final_v.clone();
    let mut ell_b = 0.0;
    let mut total = 0.0;
    let mut segment: Vec<(DVector<C64>, f64)> = Vec::with_capacity(stride);
    for (c, (start_v, start_ell)) in fwd.checkpoints.iter().enumerate().rev() {
        let first = c * stride;
        let last = (first + stride).min(steps);
        segment.clear();
        let mut v = start_v.clone();
        let mut ell = *start_ell;
        for j in first..last {
            half.apply(&mut v, &mut ws);
            ell += collapse.apply(&mut v, w[j])?;
            segment.push((v.clone(), ell));
            half.apply(&mut v, &mut ws);
        }
        for j in (first..last).rev() {
            back.apply(&mut b, &mut ws);
            let (f, ell_f) = &segment[j - first];
            let overlap: C64 = b
                .iter()
                .zip(f.iter())
                .zip(values)
                .map(|((bz, fz), &a)| bz.conj() * fz * a)
                .sum();
            let scale = (ell_b + ell_f - ell_t).exp();
            total += coefficient(j) * overlap.im * scale;
            ell_b += collapse.apply(&mut b, w[j])?;
            back.apply(&mut b, &mut ws);
        }
    }
    Ok(total)
}

fn finish(
    scenario: &Scenario,
    fwd: Forward,
    opts: &EvolveOptions,
    stride: usize,
    mode: NoiseMode,
    seed: u64,
) -> Result<TrajectoryResult> {
    let dynamics = scenario.dynamics.as_ref();
    let lambda = scenario.params.lambda;
    let field_energy_sample = if opts.field_energy {
        Some(field_energy_sweep(scenario, &fwd, stride)?)
    } else {
        None
    };
    let path = NoisePath::new(scenario.grid, fwd.values, mode, seed)?;
    let log_norm2 = fwd.log_reduced - path.square_integral() / (2.0 * lambda);
    let weight = match mode {
        NoiseMode::Raw => fwd.log_reduced.exp(),
        NoiseMode::Cooked => 1.0,
    };
    if !weight.is_finite() {
        return Err(Error::Range {
            what: "importance weight",
            exponent: fwd.log_reduced,
        });
    }
    let mut ws = dynamics.workspace();
    let final_energy = dynamics.energy(&fwd.final_v, &mut ws);
    let final_populations = populations(&fwd.final_v).collect();
    let final_state = to_interaction(dynamics, &fwd.final_v, scenario.grid.t_end())?;
    Ok(TrajectoryResult {
        final_state,
        log_norm2,
        log_reduced_norm2: fwd.log_reduced,
        weight,
        mode,
        path,
        series: fwd.series,
        stored_states: fwd.states,
        final_populations,
        final_energy,
        field_energy_sample,
        interaction_sample: fwd.interaction,
    })
}

fn stride_for(opts: &EvolveOptions, steps: usize) -> usize {
    if opts.checkpoint_stride > 0 {
        opts.checkpoint_stride
    } else {
        ((steps as f64).sqrt().ceil() as usize).max(1)
    }
}

fn check_lambda(scenario: &Scenario) -> Result<()> {
    if scenario.params.lambda > 0.0 {
        Ok(())
    } else {
        Err(invalid("lambda", "trajectories need lambda > 0"))
    }
}

/// Evolves `psi0` along a given path.
pub fn evolve(scenario: &Scenario, path: &NoisePath, opts: EvolveOptions) -> Result<TrajectoryResult> {
    check_lambda(scenario)?;
    if path.grid != scenario.grid {
        return Err(invalid("path", "time grid differs from the scenario grid"));
    }
    let stride = stride_for(&opts, scenario.grid.steps());
    let fwd = run_forward::<rand_chacha::ChaCha8Rng>(
        scenario,
        Source::Path(&path.values),
        &opts,
        stride,
    )?;
    finish(scenario, fwd, &opts, stride, path.mode, path.seed)
}

/// Evolves `psi0` while drawing each `w_k` from its conditional physical law.
pub fn evolve_cooked(
    scenario: &Scenario,
    seed: u64,
    law: CookedLaw,
    opts: EvolveOptions,
) -> Result<TrajectoryResult> {
    check_lambda(scenario)?;
    let stride = stride_for(&opts, scenario.grid.steps());
    let rng = rng_from_seed(seed);
    let fwd = run_forward(scenario, Source::Cooked { law, rng }, &opts, stride)?;
    finish(scenario, fwd, &opts, stride, NoiseMode::Cooked, seed)
}

/// `||T exp(int dt (w A - lambda A^2)) psi0||^2` for a raw path.
pub fn importance_weight(scenario: &Scenario, path: &NoisePath) -> Result<f64> {
    if path.mode != NoiseMode::Raw {
        return Err(invalid("path", "importance weights need a raw-mode path"));
    }
    Ok(evolve(scenario, path, EvolveOptions::minimal())?.weight)
}

fn step_factor(
    psi: &StateVector,
    a_mid: &HermitianOperator,
    exponent: impl Fn(f64) -> f64,
) -> Result<StateVector> {
    check_dims(a_mid.dim(), psi.dim())?;
    let spec = a_mid.spectrum()?;
    let mut exps = Vec::with_capacity(spec.eigenvalues.len());
    for &a in &spec.eigenvalues {
        let e = exponent(a);
        if !(e <= MAX_EXPONENT) {
            return Err(Error::Range {
                what: "collapse step exponent",
                exponent: e,
            });
        }
        exps.push(e);
    }
    let mut coeffs = spec.vectors.adjoint() * psi.as_dvector();
    for (z, e) in coeffs.iter_mut().zip(&exps) {
        *z *= e.exp();
    }
    StateVector::from_dvector(&spec.vectors * coeffs)
}

/// `exp(-(dt/4 lambda)(w - 2 lambda A_mid)^2) psi`.
pub fn collapse_step(
    psi: &StateVector,
    a_mid: &HermitianOperator,
    w: f64,
    dt: f64,
    params: &CollapseParams,
) -> Result<StateVector> {
    let lambda = params.lambda;
    step_factor(psi, a_mid, |a| {
        -(dt / (4.0 * lambda)) * (w - 2.0 * lambda * a).powi(2)
    })
}

/// `exp(dt (w A_mid - lambda A_mid^2)) psi`.
pub fn reduced_step(
    psi: &StateVector,
    a_mid: &HermitianOperator,
    w: f64,
    dt: f64,
    params: &CollapseParams,
) -> Result<StateVector> {
    let lambda = params.lambda;
    step_factor(psi, a_mid, |a| dt * (w * a - lambda * a * a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseMetrics {
    pub variance: f64,
    pub nearest_eigenvalue: f64,
    /// `1 -` weight of the normalised state in the nearest eigenspace.
    pub distance: f64,
}

/// Metrics from populations over ascending eigenvalues; equal values within
/// the algebraic tolerance form one eigenspace.
pub fn metrics_from_populations(values: &[f64], pops: &[f64]) -> CollapseMetrics {
    let total: f64 = pops.iter().sum();
    let mean = pops.iter().zip(values).map(|(p, a)| p * a).sum::<f64>() / total;
    let variance = pops
        .iter()
        .zip(values)
        .map(|(p, a)| p * (a - mean) * (a - mean))
        .sum::<f64>()
        / total;
    let scale = values.iter().fold(1.0_f64, |m, a| m.max(a.abs()));
    let tol = tolerance::ALGEBRAIC * scale;
    let nearest = values
        .iter()
        .copied()
        .min_by(|a, b| (a - mean).abs().total_cmp(&(b - mean).abs()))
        .unwrap_or(0.0);
    let inside: f64 = pops
        .iter()
        .zip(values)
        .filter(|(_, a)| (*a - nearest).abs() <= tol)
        .map(|(p, _)| p)
        .sum();
    CollapseMetrics {
        variance,
        nearest_eigenvalue: nearest,
        distance: (1.0 - inside / total).max(0.0),
    }
}

pub fn collapse_metrics(psi: &StateVector, a: &HermitianOperator) -> Result<CollapseMetrics> {
    check_dims(a.dim(), psi.dim())?;
    if psi.is_degenerate() {
        return Err(Error::ZeroNorm);
    }
    let spec = a.spectrum()?;
    let coeffs = spec.vectors.adjoint() * psi.as_dvector();
    let pops: Vec<f64> = coeffs.iter().map(|z| z.norm_sqr()).collect();
    Ok(metrics_from_populations(&spec.eigenvalues, &pops))
}
