//! Ready-made scenarios used by the command line front end and the tests.

use std::sync::Arc;

use rand::Rng;

use crate::dynamics::{DenseModel, Dynamics, FreeParticleGrid};
use crate::error::{invalid, Result};
use crate::hilbert::{random, HermitianOperator, StateVector};
use crate::noise::{rng_from_seed, CollapseParams, TimeGrid};
use crate::trajectory::Scenario;
use crate::C64;

pub fn dense(
    h: HermitianOperator,
    a: HermitianOperator,
    psi0: StateVector,
    params: CollapseParams,
    grid: TimeGrid,
) -> Result<Scenario> {
    let model = DenseModel::new(h, a, params.hbar)?;
    Scenario::new(Arc::new(Dynamics::Dense(model)), psi0, params, grid)
}

/// `H_A = 0`, `A = diag(a1, a2)`, `psi0 = sqrt(p1)|a1> + sqrt(1-p1)|a2>`.
pub fn two_level(a1: f64, a2: f64, p1: f64, lambda: f64, t_end: f64, steps: usize) -> Result<Scenario> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(invalid("c1_sq", format!("must lie in [0, 1], got {p1}")));
    }
    if a1 == a2 {
        return Err(invalid("a", "the two eigenvalues must differ"));
    }
    let psi0 = StateVector::new(vec![C64::new(p1.sqrt(), 0.0), C64::new((1.0 - p1).sqrt(), 0.0)])?;
    dense(
        HermitianOperator::zeros(2),
        HermitianOperator::from_real_diagonal(&[a1, a2]),
        psi0,
        CollapseParams::new(lambda, 1.0)?,
        TimeGrid::new(t_end, steps)?,
    )
}

/// `cos(theta/2)|0> + e^{i phi} sin(theta/2)|1>`.
pub fn bloch_state(theta: f64, phi: f64) -> StateVector {
    StateVector::new(vec![
        C64::new((0.5 * theta).cos(), 0.0),
        C64::from_polar((0.5 * theta).sin(), phi),
    ])
    .expect("finite amplitudes")
}

/// `A = sigma_z`, `H_A = omega sigma_x`, starting from `psi0`.
pub fn qubit_dephasing_from(
    omega: f64,
    psi0: StateVector,
    lambda: f64,
    t_end: f64,
    steps: usize,
) -> Result<Scenario> {
    dense(
        HermitianOperator::pauli_x().scaled(omega),
        HermitianOperator::pauli_z(),
        psi0,
        CollapseParams::new(lambda, 1.0)?,
        TimeGrid::new(t_end, steps)?,
    )
}

/// Qubit dephasing from the Bloch state at `theta = pi/3`, `phi = 0`,
/// which has `<sigma_x> = sqrt(3)/2 > 0`.
pub fn qubit_dephasing(omega: f64, lambda: f64, t_end: f64, steps: usize) -> Result<Scenario> {
    qubit_dephasing_from(omega, bloch_state(std::f64::consts::FRAC_PI_3, 0.0), lambda, t_end, steps)
}

/// Random `H_A`, `A` (unit spectral norm) and pure state of dimension `dim`.
pub fn random_matrix(dim: usize, lambda: f64, t_end: f64, steps: usize, seed: u64) -> Result<Scenario> {
    let mut rng = rng_from_seed(seed);
    random_matrix_with(dim, lambda, t_end, steps, &mut rng)
}

pub fn random_matrix_with<R: Rng + ?Sized>(
    dim: usize,
    lambda: f64,
    t_end: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Scenario> {
    if dim < 2 {
        return Err(invalid("dim", "need at least two levels"));
    }
    let a = random::hermitian(dim, rng);
    let h = random::hermitian(dim, rng);
    let psi0 = random::state(dim, rng);
    dense(h, a, psi0, CollapseParams::new(lambda, 1.0)?, TimeGrid::new(t_end, steps)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeParticleSetup {
    pub points: usize,
    pub dx: f64,
    pub mass: f64,
    pub hbar: f64,
    pub x0: f64,
    pub sigma: f64,
    pub k0: f64,
    pub lambda: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for FreeParticleSetup {
    fn default() -> Self {
        Self {
            points: 1024,
            dx: 0.1,
            mass: 1.0,
            hbar: 1.0,
            x0: 0.0,
            sigma: 1.0,
            k0: 0.0,
            lambda: 0.5,
            t_end: 2.0,
            steps: 200,
        }
    }
}

pub fn free_particle(s: &FreeParticleSetup) -> Result<Scenario> {
    let g = FreeParticleGrid::new(s.points, s.dx, s.mass, s.hbar)?;
    let psi0 = g.gaussian_packet(s.x0, s.sigma, s.k0)?;
    Scenario::new(
        Arc::new(Dynamics::FreeParticle(g)),
        psi0,
        CollapseParams::new(s.lambda, s.hbar)?,
        TimeGrid::new(s.t_end, s.steps)?,
    )
}
