//! Energy bookkeeping: system energy `Tr(H_A rho)`, field energy
//! `(lambda/2) int_0^T Tr([A(t),[A(t),H_A]] rho_I(t)) dt`, interaction energy
//! (zero in mean) and their constant sum.
//!
//! The field-energy integrand is evaluated with operators rebuilt through
//! [`interaction_picture`] at every sample time. It shares no code with the
//! RK4 integrator, which works in the eigenbasis of `H_A`.

use crate::dynamics::Dynamics;
use crate::ensemble::{grid_lindblad, lindblad_propagate, DensityMatrix, DensitySeries, EnsembleStats, GridObservable};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{check_dims, commutator, double_commutator, interaction_picture, trace_product, HermitianOperator};
use crate::stats::{cumulative_trapezoid, Estimate};
use crate::tolerance;
use crate::trajectory::Scenario;
use crate::C64;

/// Grid points on each side of the wrap seam that must stay empty.
pub const SEAM_BAND: usize = 10;

/// Largest probability tolerated inside the seam band.
pub const SEAM_MASS_LIMIT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    pub system: Vec<f64>,
    pub field: Vec<f64>,
    pub interaction: Vec<f64>,
    pub total: Vec<f64>,
}

impl EnergyLedger {
    pub fn new(times: Vec<f64>, system: Vec<f64>, field: Vec<f64>) -> Result<Self> {
        if system.len() != times.len() || field.len() != times.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                found: system.len().min(field.len()),
            });
        }
        let interaction = vec![0.0; times.len()];
        let total = system.iter().zip(&field).map(|(s, f)| s + f).collect();
        Ok(Self {
            times,
            system,
            field,
            interaction,
            total,
        })
    }

    /// `(t, H_A, H_w, V, total)` rows.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 5]> + '_ {
        (0..self.times.len()).map(|i| {
            [
                self.times[i],
                self.system[i],
                self.field[i],
                self.interaction[i],
                self.total[i],
            ]
        })
    }
}

/// `max_t |total(t) - total(0)|`.
pub fn conservation_check(ledger: &EnergyLedger) -> f64 {
    let t0 = ledger.total.first().copied().unwrap_or(0.0);
    ledger
        .total
        .iter()
        .map(|v| (v - t0).abs())
        .fold(0.0, f64::max)
}

/// `Tr(H_A rho_I(t))`; `H_A` commutes with its own evolution so no frame
/// change is needed.
pub fn system_energy(series: &DensitySeries, h: &HermitianOperator) -> Result<Vec<f64>> {
    if let Some(r) = series.rhos.first() {
        check_dims(h.dim(), r.nrows())?;
    }
    Ok(series
        .rhos
        .iter()
        .map(|r| trace_product(h.matrix(), r).re)
        .collect())
}

/// `(lambda/2) Tr([A(t),[A(t),H_A]] rho_I(t))` at each series time.
pub fn field_energy_integrand(scenario: &Scenario, series: &DensitySeries) -> Result<Vec<f64>> {
    let h = scenario.hamiltonian();
    let a = scenario.collapse_operator();
    let hbar = scenario.params().hbar;
    let half_lambda = 0.5 * scenario.params().lambda;
    series
        .times
        .iter()
        .zip(&series.rhos)
        .map(|(&t, rho)| {
            let at = interaction_picture(&a, &h, t, hbar)?;
            let dc = double_commutator(&at, &h)?;
            Ok(half_lambda * trace_product(dc.matrix(), rho).re)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub values: Vec<f64>,
    /// Largest change against the rule on every other point, relative to `scale`.
    pub halving_change: f64,
}

/// Cumulative trapezoid of `integrand` with a halving check: the rule on
/// every other sample must agree with the full rule to `QUADRATURE` relative
/// to `scale`.
pub fn field_energy_quadrature(times: &[f64], integrand: &[f64], scale: f64) -> Result<Quadrature> {
    if times.len() != integrand.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            found: integrand.len(),
        });
    }
    if times.len() < 3 || (times.len() - 1) % 2 != 0 {
        return Err(invalid("samples", "need an even number (>= 2) of intervals"));
    }
    let values = cumulative_trapezoid(times, integrand);
    let ct: Vec<f64> = times.iter().step_by(2).copied().collect();
    let ci: Vec<f64> = integrand.iter().step_by(2).copied().collect();
    let coarse = cumulative_trapezoid(&ct, &ci);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let change = coarse
        .iter()
        .zip(values.iter().step_by(2))
        .map(|(c, f)| (c - f).abs())
        .fold(0.0, f64::max)
        / scale;
    if change > tolerance::QUADRATURE {
        return Err(Error::NotConverged {
            what: "field-energy quadrature",
            achieved: change,
            required: tolerance::QUADRATURE,
        });
    }
    Ok(Quadrature {
        values,
        halving_change: change,
    })
}

/// Monte Carlo mean of the per-trajectory interaction functional.
pub fn interaction_energy_check(stats: &EnsembleStats) -> Result<Estimate> {
    if stats.n_trajectories < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: stats.n_trajectories,
        });
    }
    Ok(stats.interaction_energy)
}

/// `Tr(Q_I(t) rho_I(t))`, the Schrödinger-picture expectation of `Q`.
pub fn expectation_series(
    q: &HermitianOperator,
    scenario: &Scenario,
    series: &DensitySeries,
) -> Result<Vec<f64>> {
    let h = scenario.hamiltonian();
    let hbar = scenario.params().hbar;
    series
        .times
        .iter()
        .zip(&series.rhos)
        .map(|(&t, rho)| {
            let qt = interaction_picture(q, &h, t, hbar)?;
            Ok(trace_product(qt.matrix(), rho).re)
        })
        .collect()
}

/// `d<Q>/dT = (i/hbar) Tr([H_A, Q(t)] rho_I) - (lambda/2) Tr([A(t),[A(t),Q(t)]] rho_I)`.
/// The first term vanishes when `Q` commutes with `H_A`.
pub fn observable_drift(
    q: &HermitianOperator,
    scenario: &Scenario,
    series: &DensitySeries,
) -> Result<Vec<f64>> {
    let h = scenario.hamiltonian();
    let a = scenario.collapse_operator();
    check_dims(h.dim(), q.dim())?;
    let hbar = scenario.params().hbar;
    let half_lambda = 0.5 * scenario.params().lambda;
    series
        .times
        .iter()
        .zip(&series.rhos)
        .map(|(&t, rho)| {
            let at = interaction_picture(&a, &h, t, hbar)?;
            let qt = interaction_picture(q, &h, t, hbar)?;
            let collapse = -half_lambda * trace_product(double_commutator(&at, &qt)?.matrix(), rho).re;
            let hq = commutator(h.matrix(), qt.matrix());
            let unitary = (C64::new(0.0, 1.0 / hbar) * trace_product(&hq, rho)).re;
            Ok(collapse + unitary)
        })
        .collect()
}

/// Fourth-order finite differences on a uniform grid (one-sided at the ends).
pub fn finite_difference(times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 5 || times.len() != n {
        return Err(invalid("samples", "need at least five equally spaced samples"));
    }
    let h = (times[n - 1] - times[0]) / (n - 1) as f64;
    let f = values;
    let d = 12.0 * h;
    Ok((0..n)
        .map(|i| match i {
            0 => (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / d,
            1 => (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / d,
            i if i == n - 2 => {
                (3.0 * f[n - 1] + 10.0 * f[n - 2] - 18.0 * f[n - 3] + 6.0 * f[n - 4] - f[n - 5]) / d
            }
            i if i == n - 1 => {
                (25.0 * f[n - 1] - 48.0 * f[n - 2] + 36.0 * f[n - 3] - 16.0 * f[n - 4] + 3.0 * f[n - 5])
                    / d
            }
            i => (-f[i + 2] + 8.0 * f[i + 1] - 8.0 * f[i - 1] + f[i - 2]) / d,
        })
        .collect())
}

/// `max |fd - drift| / max |drift|` (absolute when the drift vanishes).
pub fn drift_consistency(times: &[f64], values: &[f64], drift: &[f64]) -> Result<f64> {
    let fd = finite_difference(times, values)?;
    let scale = drift.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let err = fd
        .iter()
        .zip(drift)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(if scale > 0.0 { err / scale } else { err })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowCheck {
    pub max_seam_mass: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerReport {
    pub ledger: EnergyLedger,
    /// `max_t |total(t) - total(0)|`.
    pub max_deviation: f64,
    /// `QUADRATURE * ||H_A||`.
    pub tolerance: f64,
    pub hamiltonian_norm: f64,
    pub quadrature_change: f64,
    /// Relative mismatch between finite-difference `dH_A/dT` and the drift law.
    pub drift_error: f64,
    pub propagation_change: f64,
    /// Only for the free-particle grid.
    pub window: Option<WindowCheck>,
}

impl LedgerReport {
    pub fn passes(&self) -> bool {
        self.max_deviation <= self.tolerance && self.window.is_none_or(|w| w.ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerOptions {
    /// Initial number of output intervals (rounded up to even).
    pub samples: usize,
    /// Times the sample count may be doubled to meet the quadrature check.
    pub max_doublings: usize,
}

impl Default for LedgerOptions {
    fn default() -> Self {
        Self {
            samples: 512,
            max_doublings: 4,
        }
    }
}

/// Fully deterministic ledger: system energy from the propagated density
/// matrix, field energy by quadrature of the double-commutator integrand.
pub fn deterministic_ledger(scenario: &Scenario, opts: &LedgerOptions) -> Result<LedgerReport> {
    let mut samples = opts.samples.max(2).next_multiple_of(2);
    let mut doublings = 0;
    loop {
        let attempt = match scenario.dynamics().as_ref() {
            Dynamics::Dense(_) => dense_ledger(scenario, samples),
            Dynamics::FreeParticle(_) => grid_ledger(scenario, samples),
        };
        match attempt {
            Err(Error::NotConverged { what, .. })
                if what == "field-energy quadrature" && doublings < opts.max_doublings =>
            {
                samples *= 2;
                doublings += 1;
            }
            other => return other,
        }
    }
}

fn dense_ledger(scenario: &Scenario, samples: usize) -> Result<LedgerReport> {
    let h = scenario.hamiltonian();
    let h_norm = h.norm()?;
    let rho0 = DensityMatrix::pure(scenario.psi0())?;
    let series = lindblad_propagate(&rho0, scenario, samples)?;
    let system = system_energy(&series, &h)?;
    let integrand = field_energy_integrand(scenario, &series)?;
    let quad = field_energy_quadrature(&series.times, &integrand, h_norm)?;
    let drift: Vec<f64> = integrand.iter().map(|f| -f).collect();
    let drift_error = drift_consistency(&series.times, &system, &drift)?;
    let ledger = EnergyLedger::new(series.times.clone(), system, quad.values)?;
    Ok(LedgerReport {
        max_deviation: conservation_check(&ledger),
        tolerance: tolerance::QUADRATURE * h_norm,
        hamiltonian_norm: h_norm,
        quadrature_change: quad.halving_change,
        drift_error,
        propagation_change: series.halving_change,
        window: None,
        ledger,
    })
}

fn grid_ledger(scenario: &Scenario, samples: usize) -> Result<LedgerReport> {
    let Dynamics::FreeParticle(grid) = scenario.dynamics().as_ref() else {
        unreachable!("caller dispatches on the model")
    };
    let h_norm = grid.energies().iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let obs = [
        GridObservable::Energy,
        GridObservable::FieldIntegrand,
        GridObservable::SeamMass(SEAM_BAND),
    ];
    let series = grid_lindblad(scenario, samples, &obs, tolerance::STEP_HALVING)?;
    let system = series.columns[0].clone();
    let integrand = &series.columns[1];
    let scale = integrand.iter().fold(0.0_f64, |m, f| m.max(f.abs())) * scenario.grid().t_end();
    let quad = field_energy_quadrature(&series.times, integrand, scale)?;
    let drift: Vec<f64> = integrand.iter().map(|f| -f).collect();
    let drift_error = drift_consistency(&series.times, &system, &drift)?;
    let max_seam_mass = series.columns[2].iter().fold(0.0_f64, |m, v| m.max(*v));
    let ledger = EnergyLedger::new(series.times.clone(), system, quad.values)?;
    Ok(LedgerReport {
        max_deviation: conservation_check(&ledger),
        tolerance: tolerance::QUADRATURE * h_norm,
        hamiltonian_norm: h_norm,
        quadrature_change: quad.halving_change,
        drift_error,
        propagation_change: series.halving_change,
        window: Some(WindowCheck {
            max_seam_mass,
            ok: max_seam_mass <= SEAM_MASS_LIMIT,
        }),
        ledger,
    })
}
