//! The two model realisations a scenario can use.
//!
//! Trajectories and density matrices are propagated in the eigenbasis of the
//! collapse operator `A`, where each collapse factor is diagonal. Moving
//! from the interaction picture with `A(t)` evaluated at step midpoints to
//! this frame turns one step into `U(dt/2) C_k U(dt/2)` with
//! `U(tau) = exp(-i H_A tau / hbar)` and `C_k` diagonal; the two are equal
//! exactly, not just to leading order.
//!
//! * [`DenseModel`]: arbitrary Hermitian `H_A` and `A` as dense matrices.
//! * [`FreeParticleGrid`]: `A = x` on a periodic grid of `N` points and
//!   `H_A = p^2/2m`, diagonal in the discrete Fourier basis.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};
use crate::hilbert::{check_dims, herm_exp, HermitianOperator, StateVector};
use crate::C64;

#[derive(Debug, Clone)]
pub enum Dynamics {
    Dense(DenseModel),
    FreeParticle(FreeParticleGrid),
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::Dense(m) => m.hamiltonian.dim(),
            Dynamics::FreeParticle(g) => g.points,
        }
    }

    pub fn hbar(&self) -> f64 {
        match self {
            Dynamics::Dense(m) => m.hbar,
            Dynamics::FreeParticle(g) => g.hbar,
        }
    }

    /// Eigenvalues of `A`, in the order of the collapse basis.
    pub fn collapse_values(&self) -> &[f64] {
        match self {
            Dynamics::Dense(m) => &m.a_values,
            Dynamics::FreeParticle(g) => &g.positions,
        }
    }

    pub fn spectral_range(&self) -> f64 {
        let v = self.collapse_values();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    pub fn to_collapse_basis(&self, psi: &StateVector) -> Result<DVector<C64>> {
        check_dims(self.dim(), psi.dim())?;
        Ok(match self {
            Dynamics::Dense(m) => m.a_vectors.adjoint() * psi.as_dvector(),
            Dynamics::FreeParticle(_) => psi.as_dvector().clone(),
        })
    }

    pub fn from_collapse_basis(&self, v: &DVector<C64>) -> Result<StateVector> {
        match self {
            Dynamics::Dense(m) => StateVector::from_dvector(&m.a_vectors * v),
            Dynamics::FreeParticle(_) => StateVector::from_dvector(v.clone()),
        }
    }

    /// `exp(-i H_A tau / hbar)` acting on collapse-basis vectors.
    pub fn free_step(&self, tau: f64) -> Result<HalfStep> {
        Ok(match self {
            Dynamics::Dense(m) => {
                HalfStep::Dense(herm_exp(&m.h_in_a, C64::new(0.0, -tau / m.hbar))?)
            }
            Dynamics::FreeParticle(g) => HalfStep::Grid {
                phases: g.propagator_phases(tau),
                fft: g.fft.clone(),
                ifft: g.ifft.clone(),
            },
        })
    }

    pub fn workspace(&self) -> Workspace {
        let n = self.dim();
        let scratch = match self {
            Dynamics::Dense(_) => 0,
            Dynamics::FreeParticle(g) => g
                .fft
                .get_inplace_scratch_len()
                .max(g.ifft.get_inplace_scratch_len()),
        };
        Workspace {
            tmp: DVector::zeros(n),
            scratch: vec![C64::new(0.0, 0.0); scratch],
        }
    }

    /// `<v|H_A|v>` for a collapse-basis vector (not normalised).
    pub fn energy(&self, v: &DVector<C64>, ws: &mut Workspace) -> f64 {
        match self {
            Dynamics::Dense(m) => {
                m.h_in_a.matrix().mul_to(v, &mut ws.tmp);
                v.dotc(&ws.tmp).re
            }
            Dynamics::FreeParticle(g) => g.energy(v.as_slice(), ws),
        }
    }

    pub fn hamiltonian(&self) -> HermitianOperator {
        match self {
            Dynamics::Dense(m) => m.hamiltonian.clone(),
            Dynamics::FreeParticle(g) => g.hamiltonian_operator(),
        }
    }

    pub fn collapse_operator(&self) -> HermitianOperator {
        match self {
            Dynamics::Dense(m) => m.collapse.clone(),
            Dynamics::FreeParticle(g) => HermitianOperator::from_real_diagonal(&g.positions),
        }
    }
}

/// Scratch buffers owned by one worker.
#[derive(Debug, Clone)]
pub struct Workspace {
    tmp: DVector<C64>,
    scratch: Vec<C64>,
}

/// Precomputed free propagator for a fixed time `tau`.
#[derive(Clone)]
pub enum HalfStep {
    Dense(DMatrix<C64>),
    Grid {
        phases: Vec<C64>,
        fft: Arc<dyn Fft<f64>>,
        ifft: Arc<dyn Fft<f64>>,
    },
}

impl std::fmt::Debug for HalfStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HalfStep::Dense(m) => write!(f, "HalfStep::Dense({}x{})", m.nrows(), m.ncols()),
            HalfStep::Grid { phases, .. } => write!(f, "HalfStep::Grid({})", phases.len()),
        }
    }
}

impl HalfStep {
    pub fn apply(&self, v: &mut DVector<C64>, ws: &mut Workspace) {
        match self {
            HalfStep::Dense(m) => {
                m.mul_to(v, &mut ws.tmp);
                std::mem::swap(v, &mut ws.tmp);
            }
            HalfStep::Grid { phases, fft, ifft } => {
                let buf = v.as_mut_slice();
                fft.process_with_scratch(buf, &mut ws.scratch);
                for (z, p) in buf.iter_mut().zip(phases) {
                    *z *= p;
                }
                ifft.process_with_scratch(buf, &mut ws.scratch);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseModel {
    hamiltonian: HermitianOperator,
    collapse: HermitianOperator,
    hbar: f64,
    a_values: Vec<f64>,
    a_vectors: DMatrix<C64>,
    h_in_a: HermitianOperator,
}

impl DenseModel {
    pub fn new(hamiltonian: HermitianOperator, collapse: HermitianOperator, hbar: f64) -> Result<Self> {
        check_dims(hamiltonian.dim(), collapse.dim())?;
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(invalid("hbar", format!("must be positive, got {hbar}")));
        }
        let spec = collapse.spectrum()?.clone();
        let h_in_a = HermitianOperator::new(
            spec.vectors.adjoint() * hamiltonian.matrix() * &spec.vectors,
        )?;
        Ok(Self {
            hamiltonian,
            collapse,
            hbar,
            a_values: spec.eigenvalues,
            a_vectors: spec.vectors,
            h_in_a,
        })
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.hamiltonian
    }

    pub fn collapse(&self) -> &HermitianOperator {
        &self.collapse
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }
}

/// Free particle on `N` points `x_j = (j - N/2) dx` with periodic wrap.
#[derive(Clone)]
pub struct FreeParticleGrid {
    points: usize,
    dx: f64,
    mass: f64,
    hbar: f64,
    positions: Vec<f64>,
    energies: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FreeParticleGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FreeParticleGrid")
            .field("points", &self.points)
            .field("dx", &self.dx)
            .field("mass", &self.mass)
            .field("hbar", &self.hbar)
            .finish()
    }
}

impl FreeParticleGrid {
    pub fn new(points: usize, dx: f64, mass: f64, hbar: f64) -> Result<Self> {
        if points < 4 || points % 2 != 0 {
            return Err(invalid("points", format!("need an even count >= 4, got {points}")));
        }
        for (name, v) in [("dx", dx), ("mass", mass), ("hbar", hbar)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        let half = (points / 2) as f64;
        let positions = (0..points).map(|j| (j as f64 - half) * dx).collect();
        let dk = 2.0 * PI / (points as f64 * dx);
        let energies = (0..points)
            .map(|m| {
                let k = if m < points / 2 {
                    m as f64
                } else {
                    m as f64 - points as f64
                } * dk;
                hbar * hbar * k * k / (2.0 * mass)
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            points,
            dx,
            mass,
            hbar,
            positions,
            energies,
            fft: planner.plan_fft_forward(points),
            ifft: planner.plan_fft_inverse(points),
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Kinetic energies in FFT order.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// `lambda hbar^2 / 2m`, the continuum heating rate under position collapse.
    pub fn heating_rate(&self, lambda: f64) -> f64 {
        lambda * self.hbar * self.hbar / (2.0 * self.mass)
    }

    pub(crate) fn fft_plan(&self) -> &Arc<dyn Fft<f64>> {
        &self.fft
    }

    pub(crate) fn ifft_plan(&self) -> &Arc<dyn Fft<f64>> {
        &self.ifft
    }

    /// Phases `exp(-i E_k tau / hbar) / N` (the `1/N` completes the
    /// unnormalised inverse transform).
    pub(crate) fn propagator_phases(&self, tau: f64) -> Vec<C64> {
        let norm = 1.0 / self.points as f64;
        self.energies
            .iter()
            .map(|&e| C64::from_polar(norm, -e * tau / self.hbar))
            .collect()
    }

    /// First row of the circulant kinetic matrix: `H_{jl} = h[(j - l) mod N]`.
    pub fn kinetic_kernel(&self) -> Vec<C64> {
        let mut h: Vec<C64> = self.energies.iter().map(|&e| C64::new(e, 0.0)).collect();
        self.ifft.process(&mut h);
        let norm = 1.0 / self.points as f64;
        h.iter_mut().for_each(|z| *z *= norm);
        h
    }

    pub fn hamiltonian_matrix(&self) -> DMatrix<C64> {
        let h = self.kinetic_kernel();
        let n = self.points;
        DMatrix::from_fn(n, n, |j, l| h[(j + n - l) % n])
    }

    pub fn hamiltonian_operator(&self) -> HermitianOperator {
        HermitianOperator::new(self.hamiltonian_matrix())
            .expect("circulant kinetic matrix is Hermitian")
    }

    /// `<v|H|v>` via one FFT.
    pub(crate) fn energy(&self, v: &[C64], ws: &mut Workspace) -> f64 {
        let buf = ws.tmp.as_mut_slice();
        buf.copy_from_slice(v);
        self.fft.process_with_scratch(buf, &mut ws.scratch);
        let norm = 1.0 / self.points as f64;
        buf.iter()
            .zip(&self.energies)
            .map(|(z, e)| z.norm_sqr() * e)
            .sum::<f64>()
            * norm
    }

    /// Normalised Gaussian wave packet with position spread `sigma`,
    /// centre `x0` and mean wavenumber `k0`.
    pub fn gaussian_packet(&self, x0: f64, sigma: f64, k0: f64) -> Result<StateVector> {
        if !(sigma > 0.0) {
            return Err(invalid("sigma", "must be positive"));
        }
        let amps: Vec<C64> = self
            .positions
            .iter()
            .map(|&x| {
                let g = (-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp();
                C64::from_polar(g, k0 * x)
            })
            .collect();
        StateVector::new(amps)?.normalized()
    }

    /// Probability within `band` points of the wrap seam (both edges).
    pub fn seam_mass(&self, density: impl Fn(usize) -> f64, band: usize) -> f64 {
        let n = self.points;
        (0..band.min(n / 2))
            .map(|j| density(j) + density(n - 1 - j))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{double_commutator, expectation};

    fn max_abs_vec(v: &DVector<C64>) -> f64 {
        v.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn grid_free_step_matches_dense_exponential() {
        let g = FreeParticleGrid::new(16, 0.5, 1.3, 0.8).unwrap();
        let dyn_grid = Dynamics::FreeParticle(g.clone());
        let psi = g.gaussian_packet(0.5, 1.0, 0.7).unwrap();
        let tau = 0.37;
        let mut v = dyn_grid.to_collapse_basis(&psi).unwrap();
        let mut ws = dyn_grid.workspace();
        dyn_grid.free_step(tau).unwrap().apply(&mut v, &mut ws);
        let u = herm_exp(&g.hamiltonian_operator(), C64::new(0.0, -tau / g.hbar())).unwrap();
        let want = u * psi.as_dvector();
        assert!(max_abs_vec(&(v - want)) < 1e-13);
    }

    #[test]
    fn grid_energy_matches_dense_expectation() {
        let g = FreeParticleGrid::new(32, 0.4, 0.9, 1.1).unwrap();
        let d = Dynamics::FreeParticle(g.clone());
        let psi = g.gaussian_packet(-0.3, 1.2, 1.1).unwrap();
        let mut ws = d.workspace();
        let e = d.energy(psi.as_dvector(), &mut ws);
        let want = expectation(&g.hamiltonian_operator(), &psi).unwrap();
        assert!((e - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn position_double_commutator_on_interior_packet() {
        // [x,[x,p^2/2m]] = -hbar^2/m for states away from the seam and Nyquist
        let (hbar, mass) = (0.7, 1.9);
        let g = FreeParticleGrid::new(256, 0.1, mass, hbar).unwrap();
        let psi = g.gaussian_packet(0.4, 1.0, 0.5).unwrap();
        let x = HermitianOperator::from_real_diagonal(g.positions());
        let dc = double_commutator(&x, &g.hamiltonian_operator()).unwrap();
        let got = expectation(&dc, &psi).unwrap();
        let want = -hbar * hbar / mass;
        assert!((got - want).abs() < 1e-8 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn dense_free_step_is_unitary() {
        let h = HermitianOperator::pauli_x().scaled(0.8);
        let a = HermitianOperator::pauli_z();
        let d = Dynamics::Dense(DenseModel::new(h, a, 1.0).unwrap());
        let HalfStep::Dense(m) = d.free_step(0.3).unwrap() else {
            unreachable!()
        };
        let gram = m.adjoint() * &m;
        assert!(crate::hilbert::max_abs(&(gram - DMatrix::<C64>::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn grid_rejects_odd_points() {
        assert!(FreeParticleGrid::new(7, 0.1, 1.0, 1.0).is_err());
    }
}
