//! Dense complex linear algebra on a finite Hilbert space.
//!
//! Every operator exponential goes through a full Hermitian
//! eigendecomposition. Spectra are memoised per operator with compute-once
//! semantics, so operators can be shared freely between trajectory workers.

use std::sync::OnceLock;

use nalgebra::{linalg::SymmetricEigen, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::tolerance;
use crate::C64;

/// Largest real exponent accepted before `exp` would overflow an `f64`.
pub const MAX_EXPONENT: f64 = 700.0;

/// Complex amplitude vector. May be unnormalised: its squared norm carries
/// probability weight.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: DVector<C64>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        Self::from_dvector(DVector::from_vec(amps))
    }

    pub fn from_dvector(amps: DVector<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(invalid("dim", "state must have at least one amplitude"));
        }
        if amps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("state amplitudes"));
        }
        Ok(Self { amps })
    }

    /// Computational basis vector `|i>`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut amps = DVector::zeros(dim);
        amps[i] = C64::new(1.0, 0.0);
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        self.amps.as_slice()
    }

    pub fn as_dvector(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn into_dvector(self) -> DVector<C64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum()
    }

    /// True when the state carries no weight at all.
    pub fn is_degenerate(&self) -> bool {
        self.norm_sqr() == 0.0
    }

    /// Unit-norm copy. A zero-norm state is an error, never silently fixed.
    pub fn normalized(&self) -> Result<Self> {
        let n2 = self.norm_sqr();
        if n2 == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self {
            amps: self.amps.unscale(n2.sqrt()),
        })
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.dotc(&other.amps)
    }
}

/// Dense self-adjoint matrix with a lazily computed, cached spectrum.
#[derive(Debug)]
pub struct HermitianOperator {
    matrix: DMatrix<C64>,
    spectrum: OnceLock<Spectrum>,
}

impl Clone for HermitianOperator {
    fn clone(&self) -> Self {
        let spectrum = OnceLock::new();
        if let Some(s) = self.spectrum.get() {
            let _ = spectrum.set(s.clone());
        }
        Self {
            matrix: self.matrix.clone(),
            spectrum,
        }
    }
}

impl PartialEq for HermitianOperator {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl HermitianOperator {
    /// Validates `max|M - M^H| <= 1e-12 max|M|` and stores the exact
    /// Hermitian part.
    pub fn new(matrix: DMatrix<C64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                found: matrix.ncols(),
            });
        }
        if matrix.nrows() == 0 {
            return Err(invalid("dim", "operator must be at least 1x1"));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("operator entries"));
        }
        let scale = max_abs(&matrix);
        let asymmetry = max_abs(&(&matrix - matrix.adjoint()));
        let tolerance = tolerance::CONSTRUCTION * scale;
        if asymmetry > tolerance {
            return Err(Error::NotHermitian {
                asymmetry,
                tolerance,
            });
        }
        Ok(Self::hermitian_part(matrix))
    }

    fn hermitian_part(matrix: DMatrix<C64>) -> Self {
        let sym = (&matrix + matrix.adjoint()).unscale(2.0);
        Self {
            matrix: sym,
            spectrum: OnceLock::new(),
        }
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let d = DVector::from_iterator(diag.len(), diag.iter().map(|&x| C64::new(x, 0.0)));
        Self {
            matrix: DMatrix::from_diagonal(&d),
            spectrum: OnceLock::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_real_diagonal(&vec![1.0; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_real_diagonal(&vec![0.0; dim])
    }

    pub fn pauli_x() -> Self {
        let (o, l) = (C64::new(0.0, 0.0), C64::new(1.0, 0.0));
        Self::hermitian_part(DMatrix::from_row_slice(2, 2, &[o, l, l, o]))
    }

    pub fn pauli_y() -> Self {
        let (o, i) = (C64::new(0.0, 0.0), C64::new(0.0, 1.0));
        Self::hermitian_part(DMatrix::from_row_slice(2, 2, &[o, -i, i, o]))
    }

    pub fn pauli_z() -> Self {
        Self::from_real_diagonal(&[1.0, -1.0])
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::hermitian_part(self.matrix.scale(factor))
    }

    /// Real linear combination `a*self + b*other`.
    pub fn combine(&self, a: f64, other: &HermitianOperator, b: f64) -> Result<Self> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self::hermitian_part(
            self.matrix.scale(a) + other.matrix.scale(b),
        ))
    }

    /// Memoised spectrum.
    pub fn spectrum(&self) -> Result<&Spectrum> {
        if let Some(s) = self.spectrum.get() {
            return Ok(s);
        }
        let s = eigendecompose(self)?;
        Ok(self.spectrum.get_or_init(|| s))
    }

    /// Spectral norm, `max |eigenvalue|`.
    pub fn norm(&self) -> Result<f64> {
        let s = self.spectrum()?;
        Ok(s.eigenvalues
            .iter()
            .fold(0.0_f64, |acc, &x| acc.max(x.abs())))
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        check_dims(self.dim(), psi.dim())?;
        StateVector::from_dvector(&self.matrix * psi.as_dvector())
    }
}

/// Eigenvalues in ascending order with phase-fixed eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl Spectrum {
    /// `U f(Λ) U^H`.
    pub fn map<F: Fn(f64) -> C64>(&self, f: F) -> DMatrix<C64> {
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let fj = f(lambda);
            for z in scaled.column_mut(j).iter_mut() {
                *z *= fj;
            }
        }
        scaled * self.vectors.adjoint()
    }

    pub fn reconstruct(&self) -> DMatrix<C64> {
        self.map(|x| C64::new(x, 0.0))
    }

    /// Groups eigenvalues closer than `tol` into eigenspaces; returns
    /// `(representative value, column indices)` pairs in ascending order.
    pub fn eigenspaces(&self, tol: f64) -> Vec<(f64, Vec<usize>)> {
        let mut spaces: Vec<(f64, Vec<usize>)> = Vec::new();
        for (i, &x) in self.eigenvalues.iter().enumerate() {
            match spaces.last_mut() {
                Some((rep, idx)) if (x - *rep).abs() <= tol => idx.push(i),
                _ => spaces.push((x, vec![i])),
            }
        }
        spaces
    }
}

/// Full Hermitian eigendecomposition.
pub fn eigendecompose(op: &HermitianOperator) -> Result<Spectrum> {
    let n = op.dim();
    let eig = SymmetricEigen::try_new(op.matrix.clone(), f64::EPSILON, 0).ok_or(
        Error::NotConverged {
            what: "Hermitian eigensolver",
            achieved: f64::NAN,
            required: f64::EPSILON,
        },
    )?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let largest = col.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        if let Some(lead) = col.iter().find(|z| z.norm() > 1e-8 * largest).copied() {
            let phase = lead.conj() / lead.norm();
            col *= phase;
        }
        vectors.set_column(dst, &col);
    }
    Ok(Spectrum {
        eigenvalues,
        vectors,
    })
}

/// `exp(scale * op)` through the spectrum.
pub fn herm_exp(op: &HermitianOperator, scale: C64) -> Result<DMatrix<C64>> {
    let spec = op.spectrum()?;
    for &x in &spec.eigenvalues {
        let exponent = scale.re * x;
        if exponent > MAX_EXPONENT || !exponent.is_finite() {
            return Err(Error::Range {
                what: "Hermitian exponential",
                exponent,
            });
        }
    }
    Ok(spec.map(|x| (scale * x).exp()))
}

/// `e^{iHt/hbar} A e^{-iHt/hbar}`.
pub fn interaction_picture(
    a: &HermitianOperator,
    h: &HermitianOperator,
    t: f64,
    hbar: f64,
) -> Result<HermitianOperator> {
    check_dims(a.dim(), h.dim())?;
    if t == 0.0 {
        return Ok(a.clone());
    }
    let u = herm_exp(h, C64::new(0.0, -t / hbar))?;
    let m = u.adjoint() * a.matrix() * u;
    Ok(HermitianOperator::hermitian_part(m))
}

/// `[A, B] = AB - BA` on raw matrices.
pub fn commutator(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a * b - b * a
}

/// `[A, [A, B]]`.
pub fn double_commutator(a: &HermitianOperator, b: &HermitianOperator) -> Result<HermitianOperator> {
    check_dims(a.dim(), b.dim())?;
    let inner = commutator(a.matrix(), b.matrix());
    Ok(HermitianOperator::hermitian_part(commutator(
        a.matrix(),
        &inner,
    )))
}

/// `<psi|op|psi> / <psi|psi>`.
pub fn expectation(op: &HermitianOperator, psi: &StateVector) -> Result<f64> {
    check_dims(op.dim(), psi.dim())?;
    let n2 = psi.norm_sqr();
    if n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let v = psi.as_dvector();
    let z = v.dotc(&(op.matrix() * v)) / n2;
    debug_assert!(z.im.abs() <= tolerance::ALGEBRAIC * z.norm().max(1.0));
    Ok(z.re)
}

/// `Tr(M rho)` for square matrices of equal size.
pub fn trace_product(m: &DMatrix<C64>, rho: &DMatrix<C64>) -> C64 {
    let n = m.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += m[(i, j)] * rho[(j, i)];
        }
    }
    acc
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Random ensembles used for scenario generation and property tests.
pub mod random {
    use super::*;

    fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> C64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) / std::f64::consts::SQRT_2
    }

    /// GUE-distributed Hermitian matrix rescaled to unit spectral norm.
    pub fn hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> HermitianOperator {
        let g = DMatrix::from_fn(dim, dim, |_, _| gaussian_complex(rng));
        let op = HermitianOperator::hermitian_part(&g + g.adjoint());
        let norm = op.norm().unwrap_or(1.0);
        if norm > 0.0 {
            op.scaled(1.0 / norm)
        } else {
            op
        }
    }

    /// Haar-distributed unitary from the QR decomposition of a Ginibre matrix.
    pub fn unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<C64> {
        let g = DMatrix::from_fn(dim, dim, |_, _| gaussian_complex(rng));
        let qr = g.qr();
        let (mut q, r) = qr.unpack();
        for j in 0..dim {
            let d = r[(j, j)];
            if d.norm() > 0.0 {
                let phase = d / d.norm();
                for z in q.column_mut(j).iter_mut() {
                    *z *= phase;
                }
            }
        }
        q
    }

    /// Uniformly random pure state (unit norm).
    pub fn state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> StateVector {
        let v = DVector::from_fn(dim, |_, _| gaussian_complex(rng));
        let n = v.norm();
        StateVector { amps: v.unscale(n) }
    }
}
