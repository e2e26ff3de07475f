//! Monte Carlo ensembles of trajectories and the deterministic
//! density-matrix evolution they average to.
//!
//! Dense models integrate `d rho_I/dt = -(lambda/2)[A(t),[A(t),rho_I]]` with
//! classical RK4 in the eigenbasis of `H_A`. The free-particle grid is too
//! large for dense matrix products and is propagated in the Schrödinger
//! frame by symmetric splitting (exact kinetic phases via FFT, exact
//! position dephasing) with Richardson extrapolation.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics::{Dynamics, FreeParticleGrid};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{check_dims, max_abs, HermitianOperator, StateVector};
use crate::noise::{derive_seed, sample_raw, CookedLaw, NoiseMode};
use crate::stats::{effective_sample_size, mean_estimate, pairwise_sum, weighted_estimate, Estimate};
use crate::tolerance;
use crate::trajectory::{evolve, evolve_cooked, EvolveOptions, Scenario, TrajectoryResult};
use crate::C64;

/// Raw-mode ensembles below this effective sample size get no headline
/// numbers.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

/// Fixed trajectory count per work unit. Results depend on it, not on the
/// number of threads.
pub const CHUNK: usize = 64;

/// Largest collapse-operator dimension for which outcome frequencies are
/// tabulated.
pub const MAX_OUTCOMES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let asym = max_abs(&(&m - m.adjoint()));
        if asym > tolerance::ALGEBRAIC {
            return Err(Error::NotHermitian {
                asymmetry: asym,
                tolerance: tolerance::ALGEBRAIC,
            });
        }
        let trace = m.trace();
        if (trace.re - 1.0).abs() > tolerance::ALGEBRAIC || trace.im.abs() > tolerance::ALGEBRAIC {
            return Err(invalid("rho", format!("trace must be 1, got {trace}")));
        }
        let herm = HermitianOperator::new((&m + m.adjoint()) * C64::new(0.5, 0.0))?;
        let lowest = herm.spectrum()?.eigenvalues[0];
        if lowest < -tolerance::ALGEBRAIC {
            return Err(invalid("rho", format!("negative eigenvalue {lowest}")));
        }
        Ok(Self { m })
    }

    pub fn pure(psi: &StateVector) -> Result<Self> {
        let v = psi.normalized()?;
        let m = v.as_dvector() * v.as_dvector().adjoint();
        Ok(Self { m })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn purity(&self) -> f64 {
        self.m.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn expectation(&self, op: &HermitianOperator) -> f64 {
        (op.matrix() * &self.m).trace().re
    }
}

/// Interaction-picture density matrices on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySeries {
    pub times: Vec<f64>,
    pub rhos: Vec<DMatrix<C64>>,
    /// RK4 substeps per output interval in the accepted run.
    pub substeps: usize,
    /// Largest elementwise change between the accepted run and the one with
    /// twice the step.
    pub halving_change: f64,
}

impl DensitySeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &DMatrix<C64> {
        self.rhos.last().expect("series is never empty")
    }
}

/// `-(lambda/2)(C + C^H - 2D)` with `C = A A rho`, `D = A rho A`.
fn lindblad_rhs(a: &DMatrix<C64>, rho: &DMatrix<C64>, half_lambda: f64) -> DMatrix<C64> {
    let b = a * rho;
    let c = a * &b;
    let d = &b * a;
    (&c + c.adjoint() - d * C64::new(2.0, 0.0)) * C64::new(-half_lambda, 0.0)
}

struct RotatingOperator {
    tilde: DMatrix<C64>,
    omega: DMatrix<f64>,
}

impl RotatingOperator {
    fn at(&self, t: f64) -> DMatrix<C64> {
        DMatrix::from_fn(self.tilde.nrows(), self.tilde.ncols(), |j, k| {
            self.tilde[(j, k)] * C64::from_polar(1.0, self.omega[(j, k)] * t)
        })
    }
}

fn rk4_series(
    rot: &RotatingOperator,
    rho0: &DMatrix<C64>,
    half_lambda: f64,
    interval: f64,
    outputs: usize,
    substeps: usize,
) -> Vec<DMatrix<C64>> {
    let h = interval / substeps as f64;
    let mut rho = rho0.clone();
    let mut out = Vec::with_capacity(outputs + 1);
    out.push(rho.clone());
    let two = C64::new(2.0, 0.0);
    let sixth = C64::new(h / 6.0, 0.0);
    let half_h = C64::new(0.5 * h, 0.0);
    let full_h = C64::new(h, 0.0);
    for j in 0..outputs {
        for s in 0..substeps {
            let t = j as f64 * interval + s as f64 * h;
            let a0 = rot.at(t);
            let a1 = rot.at(t + 0.5 * h);
            let a2 = rot.at(t + h);
            let k1 = lindblad_rhs(&a0, &rho, half_lambda);
            let k2 = lindblad_rhs(&a1, &(&rho + &k1 * half_h), half_lambda);
            let k3 = lindblad_rhs(&a1, &(&rho + &k2 * half_h), half_lambda);
            let k4 = lindblad_rhs(&a2, &(&rho + &k3 * full_h), half_lambda);
            rho += (k1 + k2 * two + k3 * two + k4) * sixth;
        }
        // keep exact Hermiticity; RK4 preserves it only up to rounding
        rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
        out.push(rho.clone());
    }
    out
}

/// Largest number of RK4 steps tried before giving up.
const MAX_RK4_STEPS: usize = 1 << 22;

/// `rho_I(t)` at `samples + 1` equally spaced times on `[0, T]`.
pub fn lindblad_propagate(
    rho0: &DensityMatrix,
    scenario: &Scenario,
    samples: usize,
) -> Result<DensitySeries> {
    let Dynamics::Dense(model) = scenario.dynamics().as_ref() else {
        return Err(invalid(
            "scenario",
            "dense Lindblad integration needs a dense model; use grid_lindblad",
        ));
    };
    check_dims(model.hamiltonian().dim(), rho0.dim())?;
    if samples == 0 {
        return Err(invalid("samples", "need at least one output interval"));
    }
    let t_end = scenario.grid().t_end();
    let lambda = scenario.params().lambda;
    let hbar = model.hbar();
    let hs = model.hamiltonian().spectrum()?;
    let w = &hs.vectors;
    let d = rho0.dim();
    let rot = RotatingOperator {
        tilde: w.adjoint() * model.collapse().matrix() * w,
        omega: DMatrix::from_fn(d, d, |j, k| (hs.eigenvalues[j] - hs.eigenvalues[k]) / hbar),
    };
    let rho_h = w.adjoint() * rho0.matrix() * w;

    let interval = t_end / samples as f64;
    let a_norm = model.collapse().norm()?;
    let e_spread = hs.eigenvalues[d - 1] - hs.eigenvalues[0];
    let rate = 2.0 * lambda * a_norm * a_norm + e_spread / hbar;
    let mut substeps = ((rate * interval / 0.01).ceil() as usize).max(1);

    let mut coarse = rk4_series(&rot, &rho_h, 0.5 * lambda, interval, samples, substeps);
    loop {
        let fine = rk4_series(&rot, &rho_h, 0.5 * lambda, interval, samples, 2 * substeps);
        let change = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max);
        substeps *= 2;
        if change < tolerance::STEP_HALVING {
            let rhos = fine.iter().map(|r| w * r * w.adjoint()).collect();
            return Ok(DensitySeries {
                times: (0..=samples).map(|j| j as f64 * interval).collect(),
                rhos,
                substeps,
                halving_change: change,
            });
        }
        if substeps * samples > MAX_RK4_STEPS {
            return Err(Error::NotConverged {
                what: "Lindblad RK4 step halving",
                achieved: change,
                required: tolerance::STEP_HALVING,
            });
        }
        coarse = fine;
    }
}

/// Linear functionals of the grid density matrix recorded by [`grid_lindblad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridObservable {
    Trace,
    Energy,
    MeanPosition,
    /// `Tr(x^2 rho)`.
    PositionSquare,
    /// `(lambda/2) Tr([x,[x,H]] rho)`, the field-energy integrand.
    FieldIntegrand,
    /// Probability on the `n` points closest to each side of the wrap seam.
    SeamMass(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    pub times: Vec<f64>,
    pub observables: Vec<GridObservable>,
    /// One column per observable, aligned with `times`.
    pub columns: Vec<Vec<f64>>,
    pub steps: usize,
    pub halving_change: f64,
}

impl GridSeries {
    pub fn column(&self, obs: GridObservable) -> Option<&[f64]> {
        self.observables
            .iter()
            .position(|o| *o == obs)
            .map(|i| self.columns[i].as_slice())
    }
}

struct GridPropagator<'a> {
    grid: &'a FreeParticleGrid,
    lambda: f64,
    kernel: Vec<C64>,
}

impl GridPropagator<'_> {
    fn measure(&self, rho: &DMatrix<C64>, obs: GridObservable) -> f64 {
        let n = self.grid.points();
        let x = self.grid.positions();
        let dx = self.grid.dx();
        match obs {
            GridObservable::Trace => rho.trace().re,
            GridObservable::MeanPosition => (0..n).map(|j| x[j] * rho[(j, j)].re).sum(),
            GridObservable::PositionSquare => (0..n).map(|j| x[j] * x[j] * rho[(j, j)].re).sum(),
            GridObservable::SeamMass(band) => self.grid.seam_mass(|j| rho[(j, j)].re, band),
            GridObservable::Energy => {
                // Tr(H rho) = sum_{j,l} h[(j-l) mod n] rho_{l j}
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..n {
                    let col = rho.column(l);
                    for j in 0..n {
                        acc += self.kernel[(l + n - j) % n] * col[j];
                    }
                }
                acc.re
            }
            GridObservable::FieldIntegrand => {
                // [x,[x,H]]_{jl} = (x_j - x_l)^2 H_{jl}
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..n {
                    let col = rho.column(l);
                    for j in 0..n {
                        let sep = (l as f64 - j as f64) * dx;
                        acc += self.kernel[(l + n - j) % n] * col[j] * (sep * sep);
                    }
                }
                0.5 * self.lambda * acc.re
            }
        }
    }

    /// One `D(h/2) U(h) D(h/2)` step repeated `count` times.
    fn advance(
        &self,
        rho: &mut DMatrix<C64>,
        dephase: &[f64],
        phases: &[C64],
        count: usize,
        scratch: &mut Vec<C64>,
    ) {
        let n = self.grid.points();
        let fft = self.grid.fft_plan();
        let ifft = self.grid.ifft_plan();
        let dephase_half = |rho: &mut DMatrix<C64>| {
            for l in 0..n {
                let mut col = rho.column_mut(l);
                for j in 0..n {
                    col[j] *= dephase[j.abs_diff(l)];
                }
            }
        };
        let unitary_columns = |rho: &mut DMatrix<C64>, scratch: &mut Vec<C64>| {
            for l in 0..n {
                let buf = &mut rho.as_mut_slice()[l * n..(l + 1) * n];
                fft.process_with_scratch(buf, scratch);
                for (z, p) in buf.iter_mut().zip(phases) {
                    *z *= p;
                }
                ifft.process_with_scratch(buf, scratch);
            }
        };
        for _ in 0..count {
            dephase_half(rho);
            unitary_columns(rho, scratch);
            rho.adjoint_mut();
            unitary_columns(rho, scratch);
            rho.adjoint_mut();
            dephase_half(rho);
        }
    }

    fn run(
        &self,
        rho0: &DMatrix<C64>,
        interval: f64,
        outputs: usize,
        substeps: usize,
        observables: &[GridObservable],
    ) -> Vec<Vec<f64>> {
        let n = self.grid.points();
        let h = interval / substeps as f64;
        let dx = self.grid.dx();
        let dephase: Vec<f64> = (0..n)
            .map(|m| {
                let sep = m as f64 * dx;
                (-0.5 * self.lambda * sep * sep * 0.5 * h).exp()
            })
            .collect();
        let phases = self.grid.propagator_phases(h);
        let scratch_len = self
            .grid
            .fft_plan()
            .get_inplace_scratch_len()
            .max(self.grid.ifft_plan().get_inplace_scratch_len());
        let mut scratch = vec![C64::new(0.0, 0.0); scratch_len];
        let mut rho = rho0.clone();
        let mut columns = vec![Vec::with_capacity(outputs + 1); observables.len()];
        let record = |rho: &DMatrix<C64>, columns: &mut Vec<Vec<f64>>| {
            for (c, &o) in columns.iter_mut().zip(observables) {
                c.push(self.measure(rho, o));
            }
        };
        record(&rho, &mut columns);
        for _ in 0..outputs {
            self.advance(&mut rho, &dephase, &phases, substeps, &mut scratch);
            record(&rho, &mut columns);
        }
        columns
    }
}

fn richardson(coarse: &[Vec<f64>], fine: &[Vec<f64>]) -> Vec<Vec<f64>> {
    coarse
        .iter()
        .zip(fine)
        .map(|(c, f)| c.iter().zip(f).map(|(a, b)| (4.0 * b - a) / 3.0).collect())
        .collect()
}

fn scaled_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs() / scale)
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Largest number of splitting steps tried before giving up.
const MAX_SPLIT_STEPS: usize = 1 << 14;

/// Deterministic evolution of `|psi0><psi0|` on the free-particle grid,
/// returning the requested observables at `samples + 1` times.
///
/// Successive Richardson-extrapolated runs are compared, halving the step
/// until the largest change (relative to each column's scale, floored at 1)
/// is below `tol`.
pub fn grid_lindblad(
    scenario: &Scenario,
    samples: usize,
    observables: &[GridObservable],
    tol: f64,
) -> Result<GridSeries> {
    let Dynamics::FreeParticle(grid) = scenario.dynamics().as_ref() else {
        return Err(invalid("scenario", "grid_lindblad needs the free-particle grid"));
    };
    if samples == 0 {
        return Err(invalid("samples", "need at least one output interval"));
    }
    let prop = GridPropagator {
        grid,
        lambda: scenario.params().lambda,
        kernel: grid.kinetic_kernel(),
    };
    let psi = scenario.psi0().as_dvector();
    let rho0 = psi * psi.adjoint();
    let t_end = scenario.grid().t_end();
    let interval = t_end / samples as f64;
    let mut substeps = 1;
    let s1 = prop.run(&rho0, interval, samples, substeps, observables);
    let mut s2 = prop.run(&rho0, interval, samples, 2 * substeps, observables);
    let mut r_prev = richardson(&s1, &s2);
    loop {
        let s4 = prop.run(&rho0, interval, samples, 4 * substeps, observables);
        let r = richardson(&s2, &s4);
        let change = scaled_change(&r_prev, &r);
        substeps *= 2;
        if change < tol {
            return Ok(GridSeries {
                times: (0..=samples).map(|j| j as f64 * interval).collect(),
                observables: observables.to_vec(),
                columns: r,
                steps: 2 * substeps * samples,
                halving_change: change,
            });
        }
        if 2 * substeps * samples > MAX_SPLIT_STEPS {
            return Err(Error::NotConverged {
                what: "grid splitting step halving",
                achieved: change,
                required: tol,
            });
        }
        s2 = s4;
        r_prev = r;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub law: CookedLaw,
    pub keep_states: bool,
    pub field_energy: bool,
    pub energy_series: bool,
    pub checkpoint_stride: usize,
    /// Fraction of trajectories that must succeed.
    pub min_success: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            law: CookedLaw::Mixture,
            keep_states: false,
            field_energy: false,
            energy_series: false,
            checkpoint_stride: 0,
            min_success: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeFrequency {
    pub eigenvalue: f64,
    pub frequency: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFailure {
    pub index: usize,
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mode: NoiseMode,
    pub master_seed: u64,
    pub n_trajectories: usize,
    pub failures: Vec<TrajectoryFailure>,
    /// Empty when `A` has more than [`MAX_OUTCOMES`] levels.
    pub outcome_frequencies: Vec<OutcomeFrequency>,
    pub times: Vec<f64>,
    pub mean_a: Vec<f64>,
    pub mean_energy: Option<Vec<f64>>,
    pub effective_sample_size: f64,
    /// Plain mean of the statistical weights (identically 1 in cooked mode).
    pub weight_mean: Estimate,
    pub final_energy: Estimate,
    pub field_energy: Option<Estimate>,
    pub interaction_energy: Estimate,
    /// Normalised interaction-picture final states with their weights.
    pub final_states: Option<Vec<(StateVector, f64)>>,
}

impl EnsembleStats {
    /// Raw ensembles with too few effective samples have no headline numbers.
    pub fn headline_allowed(&self) -> bool {
        self.mode == NoiseMode::Cooked || self.effective_sample_size >= MIN_EFFECTIVE_SAMPLES
    }

    pub fn frequency_of(&self, eigenvalue: f64) -> Option<OutcomeFrequency> {
        let tol = tolerance::ALGEBRAIC * eigenvalue.abs().max(1.0);
        self.outcome_frequencies
            .iter()
            .find(|f| (f.eigenvalue - eigenvalue).abs() <= tol)
            .copied()
    }
}

struct Record {
    weight: f64,
    outcome: Option<usize>,
    field: Option<f64>,
    interaction: f64,
    final_energy: f64,
}

#[derive(Default)]
struct ChunkOut {
    records: Vec<Record>,
    failures: Vec<TrajectoryFailure>,
    sum_a: Vec<f64>,
    sum_h: Vec<f64>,
    weight: f64,
    states: Vec<(StateVector, f64)>,
}

fn add_into(acc: &mut [f64], xs: &[f64]) {
    for (a, x) in acc.iter_mut().zip(xs) {
        *a += x;
    }
}

/// Pairwise elementwise sum of per-chunk vectors.
fn pairwise_vec(parts: &[&[f64]], len: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; len],
        1 => {
            let mut v = parts[0].to_vec();
            v.resize(len, 0.0);
            v
        }
        k => {
            let (a, b) = parts.split_at(k / 2);
            let mut left = pairwise_vec(a, len);
            add_into(&mut left, &pairwise_vec(b, len));
            left
        }
    }
}

/// Eigenspaces of the ascending collapse values, as `(value, first, last)`.
fn outcome_spaces(values: &[f64]) -> Vec<(f64, usize, usize)> {
    let scale = values.iter().fold(1.0_f64, |m, a| m.max(a.abs()));
    let tol = tolerance::ALGEBRAIC * scale;
    let mut spaces: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &a) in values.iter().enumerate() {
        match spaces.last_mut() {
            Some((rep, _, last)) if (a - *rep).abs() <= tol => *last = i,
            _ => spaces.push((a, i, i)),
        }
    }
    spaces
}

fn run_one(
    scenario: &Scenario,
    mode: NoiseMode,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<TrajectoryResult> {
    let eo = EvolveOptions {
        series: true,
        energy: opts.energy_series,
        store_states: false,
        field_energy: opts.field_energy,
        checkpoint_stride: opts.checkpoint_stride,
    };
    match mode {
        NoiseMode::Raw => {
            let path = sample_raw(*scenario.grid(), scenario.params(), seed);
            evolve(scenario, &path, eo)
        }
        NoiseMode::Cooked => evolve_cooked(scenario, seed, opts.law, eo),
    }
}

/// Runs `n` trajectories with seeds `derive_seed(master_seed, i)`.
///
/// Work is split into chunks of [`CHUNK`] trajectories; each chunk is
/// processed sequentially and chunk results are combined by pairwise
/// summation, so the output is independent of the thread count.
pub fn run_ensemble(
    scenario: &Scenario,
    n: usize,
    mode: NoiseMode,
    master_seed: u64,
    opts: &EnsembleOptions,
) -> Result<EnsembleStats> {
    if n == 0 {
        return Err(invalid("n", "need at least one trajectory"));
    }
    let values = scenario.dynamics().collapse_values();
    let spaces = (values.len() <= MAX_OUTCOMES).then(|| outcome_spaces(values));
    let steps = scenario.grid().steps();
    let n_chunks = n.div_ceil(CHUNK);

    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut out = ChunkOut {
                sum_a: vec![0.0; steps + 1],
                sum_h: vec![0.0; if opts.energy_series { steps + 1 } else { 0 }],
                ..ChunkOut::default()
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let seed = derive_seed(master_seed, i as u64);
                let res = match run_one(scenario, mode, seed, opts) {
                    Ok(r) => r,
                    Err(error) => {
                        out.failures.push(TrajectoryFailure { index: i, seed, error });
                        continue;
                    }
                };
                let w = res.weight;
                out.weight += w;
                for (k, rec) in res.series.iter().enumerate() {
                    out.sum_a[k] += w * rec.exp_a;
                    if let Some(e) = rec.energy {
                        out.sum_h[k] += w * e;
                    }
                }
                let outcome = spaces.as_ref().map(|sp| {
                    let m = res.metrics(values);
                    sp.iter()
                        .position(|(a, _, _)| *a == m.nearest_eigenvalue)
                        .unwrap_or_else(|| {
                            sp.iter()
                                .position(|(_, lo, hi)| {
                                    (values[*lo]..=values[*hi]).contains(&m.nearest_eigenvalue)
                                })
                                .unwrap_or(0)
                        })
                });
                out.records.push(Record {
                    weight: w,
                    outcome,
                    field: res.field_energy_sample,
                    interaction: res.interaction_sample,
                    final_energy: res.final_energy,
                });
                if opts.keep_states {
                    out.states.push((res.final_state, w));
                }
            }
            out
        })
        .collect();

    let failures: Vec<TrajectoryFailure> = chunks.iter().flat_map(|c| c.failures.clone()).collect();
    let succeeded = n - failures.len();
    if (succeeded as f64) < opts.min_success * n as f64 || succeeded == 0 {
        let first = failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or(Error::InsufficientSamples { needed: 1, got: 0 });
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: n,
            first: Box::new(first),
        });
    }

    let records: Vec<&Record> = chunks.iter().flat_map(|c| c.records.iter()).collect();
    let weights: Vec<f64> = records.iter().map(|r| r.weight).collect();
    let chunk_weights: Vec<f64> = chunks.iter().map(|c| c.weight).collect();
    let wsum = pairwise_sum(&chunk_weights);
    let estimate = |xs: &[f64]| match mode {
        NoiseMode::Raw => weighted_estimate(xs, &weights),
        NoiseMode::Cooked => mean_estimate(xs),
    };

    let outcome_frequencies = spaces
        .as_ref()
        .map(|sp| {
            sp.iter()
                .enumerate()
                .map(|(idx, (a, _, _))| {
                    let ind: Vec<f64> = records
                        .iter()
                        .map(|r| if r.outcome == Some(idx) { 1.0 } else { 0.0 })
                        .collect();
                    let e = estimate(&ind);
                    OutcomeFrequency {
                        eigenvalue: *a,
                        frequency: e.mean,
                        std_error: e.std_error,
                    }
                })
                .collect()
        })
        .unwrap_or_default();

    let mean_series = |get: fn(&ChunkOut) -> &[f64]| -> Vec<f64> {
        let parts: Vec<&[f64]> = chunks.iter().map(get).collect();
        pairwise_vec(&parts, steps + 1)
            .into_iter()
            .map(|s| s / wsum)
            .collect()
    };
    let mean_a = mean_series(|c| &c.sum_a);
    let mean_energy = opts.energy_series.then(|| mean_series(|c| &c.sum_h));

    let field_energy = opts.field_energy.then(|| {
        let xs: Vec<f64> = records.iter().map(|r| r.field.unwrap_or(0.0)).collect();
        estimate(&xs)
    });
    let inter: Vec<f64> = records.iter().map(|r| r.interaction).collect();
    let fe: Vec<f64> = records.iter().map(|r| r.final_energy).collect();

    let (weight_mean, ess) = match mode {
        NoiseMode::Raw => (mean_estimate(&weights), effective_sample_size(&weights)),
        NoiseMode::Cooked => (
            Estimate {
                mean: 1.0,
                std_error: 0.0,
            },
            succeeded as f64,
        ),
    };

    let final_states = opts
        .keep_states
        .then(|| chunks.iter().flat_map(|c| c.states.iter().cloned()).collect());

    Ok(EnsembleStats {
        mode,
        master_seed,
        n_trajectories: succeeded,
        failures,
        outcome_frequencies,
        times: (0..=steps).map(|k| scenario.grid().time(k)).collect(),
        mean_a,
        mean_energy,
        effective_sample_size: ess,
        weight_mean,
        final_energy: estimate(&fe),
        field_energy,
        interaction_energy: estimate(&inter),
        final_states,
    })
}

/// Ensemble average of the final projectors with elementwise standard
/// errors (modulus of the complex error).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDensity {
    pub rho: DensityMatrix,
    pub std_error: DMatrix<f64>,
}

pub fn ensemble_density_matrix(stats: &EnsembleStats) -> Result<EnsembleDensity> {
    let states = stats.final_states.as_ref().ok_or(Error::MissingStates)?;
    let first = states.first().ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    let d = first.0.dim();
    let weights: Vec<f64> = states.iter().map(|(_, w)| *w).collect();
    let mut mean = DMatrix::<C64>::zeros(d, d);
    let mut se = DMatrix::<f64>::zeros(d, d);
    let mut re = vec![0.0; states.len()];
    let mut im = vec![0.0; states.len()];
    for j in 0..d {
        for k in 0..d {
            for (i, (psi, _)) in states.iter().enumerate() {
                let v = psi.amplitudes();
                let z = v[j] * v[k].conj();
                re[i] = z.re;
                im[i] = z.im;
            }
            let (er, ei) = match stats.mode {
                NoiseMode::Raw => (weighted_estimate(&re, &weights), weighted_estimate(&im, &weights)),
                NoiseMode::Cooked => (mean_estimate(&re), mean_estimate(&im)),
            };
            mean[(j, k)] = C64::new(er.mean, ei.mean);
            se[(j, k)] = er.std_error.hypot(ei.std_error);
        }
    }
    Ok(EnsembleDensity {
        rho: DensityMatrix::new(mean)?,
        std_error: se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{self, FreeParticleSetup};

    #[test]
    fn commuting_diagonal_state_is_stationary() {
        let h = HermitianOperator::from_real_diagonal(&[0.3, -1.0, 2.0]);
        let a = HermitianOperator::from_real_diagonal(&[1.0, 0.0, -1.0]);
        let psi = StateVector::basis(3, 0);
        let p = crate::noise::CollapseParams::new(0.7, 1.0).unwrap();
        let g = crate::noise::TimeGrid::new(2.0, 10).unwrap();
        let sc = scenarios::dense(h, a, psi, p, g).unwrap();
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 0)] = C64::new(0.2, 0.0);
        m[(1, 1)] = C64::new(0.5, 0.0);
        m[(2, 2)] = C64::new(0.3, 0.0);
        let rho0 = DensityMatrix::new(m.clone()).unwrap();
        let s = lindblad_propagate(&rho0, &sc, 8).unwrap();
        for r in &s.rhos {
            assert!(max_abs(&(r - &m)) < 1e-14);
        }
    }

    #[test]
    fn two_level_off_diagonal_decay() {
        let (lambda, a1, a2) = (0.9, 1.0, -0.5);
        let sc = scenarios::two_level(a1, a2, 0.7, lambda, 5.0, 10).unwrap();
        let rho0 = DensityMatrix::pure(sc.psi0()).unwrap();
        let s = lindblad_propagate(&rho0, &sc, 50).unwrap();
        let c0 = rho0.matrix()[(0, 1)];
        for (t, r) in s.times.iter().zip(&s.rhos) {
            let want = c0 * (-0.5 * lambda * (a1 - a2) * (a1 - a2) * t).exp();
            assert!(((r[(0, 1)] - want) / want).norm() < 1e-8);
        }
    }

    #[test]
    fn qubit_sigma_x_decays_at_twice_lambda() {
        let (omega, lambda) = (1.1, 0.35);
        let sc = scenarios::qubit_dephasing(omega, lambda, 3.0, 10).unwrap();
        let rho0 = DensityMatrix::pure(sc.psi0()).unwrap();
        let s = lindblad_propagate(&rho0, &sc, 30).unwrap();
        let sx = HermitianOperator::pauli_x();
        let x0 = rho0.expectation(&sx);
        for (t, r) in s.times.iter().zip(&s.rhos) {
            // sigma_x commutes with H so its interaction-picture value is the physical one
            let got = (sx.matrix() * r).trace().re;
            assert!((got - x0 * (-2.0 * lambda * t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn maximally_mixed_is_fixed_point() {
        let sc = scenarios::two_level(1.0, -1.0, 0.5, 1.0, 1.0, 10).unwrap();
        let rho0 = DensityMatrix::maximally_mixed(2);
        let s = lindblad_propagate(&rho0, &sc, 4).unwrap();
        assert!(max_abs(&(s.last() - rho0.matrix())) < 1e-14);
    }

    #[test]
    fn density_matrix_validation() {
        let bad = DMatrix::from_diagonal_element(2, 2, C64::new(0.7, 0.0));
        assert!(DensityMatrix::new(bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[
            C64::new(1.2, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(-0.2, 0.0),
        ]);
        assert!(DensityMatrix::new(neg).is_err());
    }

    #[test]
    fn grid_lindblad_trace_and_seam() {
        let setup = FreeParticleSetup {
            points: 128,
            dx: 0.25,
            t_end: 0.5,
            steps: 10,
            ..FreeParticleSetup::default()
        };
        let sc = scenarios::free_particle(&setup).unwrap();
        let s = grid_lindblad(
            &sc,
            5,
            &[GridObservable::Trace, GridObservable::SeamMass(10)],
            1e-9,
        )
        .unwrap();
        for &tr in s.column(GridObservable::Trace).unwrap() {
            assert!((tr - 1.0).abs() < 1e-12);
        }
        assert!(s.column(GridObservable::SeamMass(10)).unwrap().iter().all(|&m| m < 1e-12));
    }

    #[test]
    fn grid_lindblad_matches_dense_rk4_on_small_grid() {
        let setup = FreeParticleSetup {
            points: 32,
            dx: 0.4,
            sigma: 1.0,
            k0: 0.8,
            lambda: 0.3,
            t_end: 0.6,
            steps: 10,
            ..FreeParticleSetup::default()
        };
        let sc = scenarios::free_particle(&setup).unwrap();
        let Dynamics::FreeParticle(g) = sc.dynamics().as_ref() else {
            unreachable!()
        };
        let dense = scenarios::dense(
            g.hamiltonian_operator(),
            HermitianOperator::from_real_diagonal(g.positions()),
            sc.psi0().clone(),
            *sc.params(),
            *sc.grid(),
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(sc.psi0()).unwrap();
        let ds = lindblad_propagate(&rho0, &dense, 6).unwrap();
        let gs = grid_lindblad(&sc, 6, &[GridObservable::Energy, GridObservable::PositionSquare], 1e-10)
            .unwrap();
        let h = g.hamiltonian_operator();
        let x2: Vec<f64> = g.positions().iter().map(|x| x * x).collect();
        let x2 = HermitianOperator::from_real_diagonal(&x2);
        for (i, r) in ds.rhos.iter().enumerate() {
            // energy is frame independent; x^2 needs the Schrödinger frame
            let e = (h.matrix() * r).trace().re;
            assert!((e - gs.columns[0][i]).abs() < 1e-8, "{e} vs {}", gs.columns[0][i]);
            let u = crate::hilbert::herm_exp(&h, C64::new(0.0, -ds.times[i])).unwrap();
            let rs = &u * r * u.adjoint();
            let q = (x2.matrix() * rs).trace().re;
            assert!((q - gs.columns[1][i]).abs() < 1e-8, "{q} vs {}", gs.columns[1][i]);
        }
    }

    #[test]
    fn single_trajectory_ensemble_reproduces_it() {
        let sc = scenarios::two_level(1.0, -1.0, 0.7, 1.0, 1.0, 50).unwrap();
        let stats = run_ensemble(&sc, 1, NoiseMode::Cooked, 9, &EnsembleOptions::default()).unwrap();
        let res = evolve_cooked(&sc, derive_seed(9, 0), CookedLaw::Mixture, EvolveOptions::default())
            .unwrap();
        assert_eq!(stats.n_trajectories, 1);
        assert_eq!(stats.mean_a, res.series.iter().map(|r| r.exp_a).collect::<Vec<_>>());
        assert_eq!(stats.interaction_energy.mean, res.interaction_sample);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let sc = scenarios::two_level(1.0, -1.0, 0.7, 1.0, 1.0, 20).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_ensemble(&sc, 300, NoiseMode::Raw, 4, &EnsembleOptions::default()))
                .unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn frequencies_sum_to_one() {
        let sc = scenarios::two_level(1.0, -1.0, 0.3, 1.0, 2.0, 40).unwrap();
        for mode in [NoiseMode::Raw, NoiseMode::Cooked] {
            let stats = run_ensemble(&sc, 200, mode, 1, &EnsembleOptions::default()).unwrap();
            let total: f64 = stats.outcome_frequencies.iter().map(|f| f.frequency).sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(stats.effective_sample_size <= 200.0 + 1e-9);
        }
    }
}
