//! Momentum-grid analysis of energy-momentum conservation under the
//! textbook collapse postulate.
//!
//! Units have `hbar = 1`, so momenta and wavenumbers coincide. Momentum
//! samples are `p_j = p_min + j dp` for `j < n`; the dual position grid is
//! `x_m = (m - n/2) dx` with `dx = 2 pi / (n dp)`. The transform
//! `Phi(x) = (2 pi)^{-1/2} int dp e^{ipx} phi(p)` is evaluated exactly for the
//! sampled momentum function by one FFT; the result is its periodisation
//! with period `n dx`.

use std::f64::consts::PI;

use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::stats::linear_fit;
use crate::C64;

/// Orthogonality required of a constructed pair before any residual test.
pub const ORTHOGONALITY: f64 = 1e-8;

/// Smallest admissible number of momentum samples.
pub const MIN_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumGrid {
    n: usize,
    p_min: f64,
    p_max: f64,
}

impl MomentumGrid {
    /// `n` samples covering `[p_min, p_max)`.
    pub fn new(n: usize, p_min: f64, p_max: f64) -> Result<Self> {
        if n < MIN_POINTS || !n.is_power_of_two() {
            return Err(invalid(
                "n_points",
                format!("need a power of two >= {MIN_POINTS}, got {n}"),
            ));
        }
        if !(p_min.is_finite() && p_max.is_finite() && p_max > p_min) {
            return Err(invalid("p_range", format!("need p_min < p_max, got [{p_min}, {p_max}]")));
        }
        Ok(Self { n, p_min, p_max })
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.n as f64
    }

    pub fn dx(&self) -> f64 {
        2.0 * PI / (self.n as f64 * self.dp())
    }

    /// Period of the position grid.
    pub fn period(&self) -> f64 {
        self.n as f64 * self.dx()
    }

    pub fn momentum(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    pub fn momenta(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.momentum(j)).collect()
    }

    pub fn position(&self, m: usize) -> f64 {
        (m as f64 - (self.n / 2) as f64) * self.dx()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|m| self.position(m)).collect()
    }

    /// The same momentum range sampled `factor` times more finely.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.n * factor, self.p_min, self.p_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    grid: MomentumGrid,
    phi: Vec<C64>,
}

impl MomentumState {
    /// Normalises `phi` so that `sum |phi|^2 dp = 1`.
    pub fn new(grid: MomentumGrid, phi: Vec<C64>) -> Result<Self> {
        if phi.len() != grid.n {
            return Err(Error::DimensionMismatch {
                expected: grid.n,
                found: phi.len(),
            });
        }
        if phi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("momentum amplitudes"));
        }
        let norm2: f64 = phi.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dp();
        if !(norm2 > 0.0) {
            return Err(Error::ZeroNorm);
        }
        let s = C64::new(norm2.sqrt().recip(), 0.0);
        Ok(Self {
            grid,
            phi: phi.into_iter().map(|z| z * s).collect(),
        })
    }

    pub fn grid(&self) -> &MomentumGrid {
        &self.grid
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.phi
    }

    /// `int phi1^*(p) phi2(p) dp`.
    pub fn inner(&self, other: &MomentumState) -> Result<C64> {
        same_grid(self, other)?;
        Ok(self
            .phi
            .iter()
            .zip(&other.phi)
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            * self.grid.dp())
    }

    /// Position amplitudes on [`MomentumGrid::positions`].
    pub fn to_position(&self) -> Vec<C64> {
        let g = &self.grid;
        let n = g.n;
        let mut buf: Vec<C64> = self
            .phi
            .iter()
            .enumerate()
            .map(|(j, z)| if j % 2 == 0 { *z } else { -*z })
            .collect();
        FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
        let scale = g.dp() / (2.0 * PI).sqrt();
        buf.iter()
            .enumerate()
            .map(|(m, z)| z * C64::from_polar(scale, g.p_min * g.position(m)))
            .collect()
    }

    /// Inverse of [`MomentumState::to_position`].
    pub fn from_position(grid: MomentumGrid, psi: &[C64]) -> Result<Self> {
        let n = grid.n;
        if psi.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: psi.len(),
            });
        }
        let mut buf: Vec<C64> = psi
            .iter()
            .enumerate()
            .map(|(m, z)| z * C64::from_polar(1.0, -grid.p_min * grid.position(m)))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let scale = grid.dx() / (2.0 * PI).sqrt();
        let phi = buf
            .iter()
            .enumerate()
            .map(|(j, z)| if j % 2 == 0 { z * scale } else { -z * scale })
            .collect();
        Ok(Self { grid, phi })
    }
}

fn same_grid(a: &MomentumState, b: &MomentumState) -> Result<()> {
    if a.grid != b.grid {
        return Err(invalid("grid", "states live on different momentum grids"));
    }
    Ok(())
}

/// `(p2 - p)^n (p - p1)^n e^{-ipb}` on `[p1, p2]`, zero elsewhere. A window
/// edge that falls exactly on a sample gets half weight, the value the
/// Fourier sum of a jump converges to.
pub fn build_window_state(grid: &MomentumGrid, p1: f64, p2: f64, n: u32, b: f64) -> Result<MomentumState> {
    if !(grid.p_min < p1 && p1 < p2 && p2 < grid.p_max) {
        return Err(invalid(
            "window",
            format!(
                "need p_min < p1 < p2 < p_max, got {p1}, {p2} on [{}, {})",
                grid.p_min, grid.p_max
            ),
        ));
    }
    let edge = 1e-9 * grid.dp();
    let phi = grid
        .momenta()
        .into_iter()
        .map(|p| {
            if p < p1 - edge || p > p2 + edge {
                return C64::new(0.0, 0.0);
            }
            let on_edge = (p - p1).abs() <= edge || (p - p2).abs() <= edge;
            let mag = ((p2 - p).max(0.0) * (p - p1).max(0.0)).powi(n as i32);
            let w = if on_edge && n == 0 { 0.5 } else { 1.0 };
            C64::from_polar(w * mag, -p * b)
        })
        .collect();
    MomentumState::new(*grid, phi)
}

/// Gaussian with position spread `sigma_x` centred at `x0`, mean momentum `p0`.
pub fn gaussian_state(grid: &MomentumGrid, x0: f64, sigma_x: f64, p0: f64) -> Result<MomentumState> {
    if !(sigma_x > 0.0) {
        return Err(invalid("sigma", "must be positive"));
    }
    let sigma_p = 0.5 / sigma_x;
    let phi = grid
        .momenta()
        .into_iter()
        .map(|p| C64::from_polar((-(p - p0).powi(2) / (4.0 * sigma_p * sigma_p)).exp(), -p * x0))
        .collect();
    MomentumState::new(*grid, phi)
}

/// One projection of `phi2` off `phi1` followed by renormalisation.
pub fn orthogonalize(phi1: &MomentumState, phi2: &MomentumState) -> Result<MomentumState> {
    let c = phi1.inner(phi2)?;
    let phi: Vec<C64> = phi2
        .phi
        .iter()
        .zip(&phi1.phi)
        .map(|(b, a)| b - c * a)
        .collect();
    let out = MomentumState::new(phi2.grid, phi)?;
    let residual = phi1.inner(&out)?.norm();
    if residual > ORTHOGONALITY {
        return Err(Error::NotConverged {
            what: "orthogonalisation",
            achieved: residual,
            required: ORTHOGONALITY,
        });
    }
    Ok(out)
}

/// `max_p |phi2^*(p) phi1(p)|`.
pub fn eq1_residual(phi1: &MomentumState, phi2: &MomentumState) -> Result<f64> {
    same_grid(phi1, phi2)?;
    Ok(phi1
        .phi
        .iter()
        .zip(&phi2.phi)
        .map(|(a, b)| (b.conj() * a).norm())
        .fold(0.0, f64::max))
}

fn weighted_overlap(phi1: &MomentumState, phi2: &MomentumState, phase: impl Fn(f64) -> f64) -> Result<C64> {
    same_grid(phi1, phi2)?;
    let g = &phi1.grid;
    Ok(phi1
        .phi
        .iter()
        .zip(&phi2.phi)
        .enumerate()
        .map(|(j, (a, b))| b.conj() * a * C64::from_polar(1.0, phase(g.momentum(j))))
        .sum::<C64>()
        * g.dp())
}

/// `<Phi2| e^{ibP} |Phi1>`.
pub fn generating_overlap_p(phi1: &MomentumState, phi2: &MomentumState, b: f64) -> Result<C64> {
    weighted_overlap(phi1, phi2, |p| b * p)
}

/// `<Phi2| e^{i a P^2 / 2M} |Phi1>`.
pub fn generating_overlap_e(phi1: &MomentumState, phi2: &MomentumState, a: f64, mass: f64) -> Result<C64> {
    if !(mass > 0.0) {
        return Err(invalid("mass", "must be positive"));
    }
    weighted_overlap(phi1, phi2, |p| a * p * p / (2.0 * mass))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    pub alpha1: C64,
    pub alpha2: C64,
    pub phi1: MomentumState,
    pub phi2: MomentumState,
}

impl Superposition {
    pub fn new(alpha1: C64, alpha2: C64, phi1: MomentumState, phi2: MomentumState) -> Result<Self> {
        let total = alpha1.norm_sqr() + alpha2.norm_sqr();
        if (total - 1.0).abs() > crate::tolerance::ALGEBRAIC {
            return Err(invalid("alpha", format!("|alpha1|^2 + |alpha2|^2 = {total}, not 1")));
        }
        let overlap = phi1.inner(&phi2)?.norm();
        if overlap > ORTHOGONALITY {
            return Err(invalid("states", format!("overlap {overlap:e} exceeds {ORTHOGONALITY:e}")));
        }
        Ok(Self {
            alpha1,
            alpha2,
            phi1,
            phi2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// `e^{ibP}`.
    Momentum { b: f64 },
    /// `e^{i a P^2 / 2M}`.
    Energy { a: f64, mass: f64 },
}

/// `|alpha1^* alpha2 <Phi1|G|Phi2> + alpha1 alpha2^* <Phi2|G|Phi1>|`, the change
/// of `<G>` under collapse.
pub fn collapse_residual(sup: &Superposition, generator: Generator) -> Result<f64> {
    let overlap = |x: &MomentumState, y: &MomentumState| match generator {
        Generator::Momentum { b } => generating_overlap_p(x, y, b),
        Generator::Energy { a, mass } => generating_overlap_e(x, y, a, mass),
    };
    // overlap(x, y) = <y|G|x>
    let g12 = overlap(&sup.phi2, &sup.phi1)?;
    let g21 = overlap(&sup.phi1, &sup.phi2)?;
    Ok((sup.alpha1.conj() * sup.alpha2 * g12 + sup.alpha1 * sup.alpha2.conj() * g21).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailFit {
    pub exponent: f64,
    /// `(|x|, envelope)` points used in the fit.
    pub points: Vec<(f64, f64)>,
    pub x_range: (f64, f64),
}

/// Number of logarithmic bins in the far-field fit.
const TAIL_BINS: usize = 48;

/// Decay exponent of `|Phi(x)|` in the far field.
///
/// The envelope is the maximum of `|Phi|` in logarithmic bins of distance
/// from the peak, taken on both sides, from `period / 2^12` up to
/// `period / 2^5` or until the envelope nears roundoff. The upper end keeps
/// the periodic images (at distance `period - |x|`) small; the lower end sits
/// far outside the main peak when the momentum support spans a good fraction
/// of the grid.
pub fn tail_exponent(phi: &MomentumState) -> Result<TailFit> {
    check_resolved(phi)?;
    let g = phi.grid;
    let psi = phi.to_position();
    let mags: Vec<f64> = psi.iter().map(|z| z.norm()).collect();
    let (peak_idx, peak) = mags
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let period = g.period();
    let (x_lo, x_hi) = (period / 4096.0, period / 32.0);
    if x_lo < 4.0 * g.dx() {
        return Err(Error::FitRejected(format!(
            "grid of {} points is too small for a far-field fit",
            g.n
        )));
    }
    let ln_lo = x_lo.ln();
    let width = (x_hi.ln() - ln_lo) / TAIL_BINS as f64;
    let mut bins: Vec<(f64, f64)> = vec![(0.0, 0.0); TAIL_BINS];
    let n = g.n as isize;
    for (m, &v) in mags.iter().enumerate() {
        let mut offset = m as isize - peak_idx as isize;
        if offset > n / 2 {
            offset -= n;
        } else if offset < -n / 2 {
            offset += n;
        }
        let r = offset.unsigned_abs() as f64 * g.dx();
        if r < x_lo || r >= x_hi {
            continue;
        }
        let b = (((r.ln() - ln_lo) / width) as usize).min(TAIL_BINS - 1);
        if v > bins[b].1 {
            bins[b] = (r, v);
        }
    }
    // stop where the envelope approaches FFT roundoff
    let floor = 1e-11 * peak;
    let bins: Vec<(f64, f64)> = bins.into_iter().filter(|&(r, _)| r > 0.0).collect();
    if bins.first().is_none_or(|&(_, v)| v <= floor) {
        return Err(Error::FitRejected(format!(
            "envelope below {floor:e} at the start of the far field: super-polynomial decay"
        )));
    }
    let available = bins.len();
    let points: Vec<(f64, f64)> = bins.into_iter().take_while(|&(_, v)| v > floor).collect();
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    if points.len() < 8 || lx.last().unwrap() - lx.first().unwrap() < std::f64::consts::LN_10 {
        let reason = if points.len() < available {
            "envelope reaches roundoff within one decade: super-polynomial decay"
        } else {
            "less than one decade of far field"
        };
        return Err(Error::FitRejected(reason.into()));
    }
    let fit = linear_fit(&lx, &ly);
    // a power law is straight in log-log; reject visible curvature
    let worst = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - fit.intercept - fit.slope * x).abs())
        .fold(0.0, f64::max);
    if worst > 0.5 {
        return Err(Error::FitRejected(format!(
            "log-log residual {worst:.3} too large for a power law"
        )));
    }
    Ok(TailFit {
        exponent: -fit.slope,
        points,
        x_range: (x_lo, x_hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentVerdict {
    Divergent,
    Convergent,
    Inconclusive,
}

impl MomentVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            MomentVerdict::Divergent => "divergent",
            MomentVerdict::Convergent => "convergent",
            MomentVerdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentScan {
    pub order: u32,
    /// `(L, <x^k> restricted to |x - c| <= L/2)`.
    pub moments: Vec<(f64, f64)>,
    pub verdict: MomentVerdict,
}

/// Relative change below which successive moments count as converged.
pub const MOMENT_CONVERGED: f64 = 0.01;

/// Growth ratio per doubling above which moments count as divergent.
pub const MOMENT_DIVERGENT: f64 = 1.25;

/// `<x^k>` on growing domains.
///
/// The momentum range of `base` stays fixed, so the position spacing `dx`
/// stays fixed while the sample count doubles with the domain. For each
/// `L` the period is at least `2L`, and `|Phi|^2 (x - c)^k` is summed over
/// `|x - c| <= L/2` around the peak `c`.
pub fn moment_divergence_scan(
    base: &MomentumGrid,
    builder: impl Fn(&MomentumGrid) -> Result<MomentumState>,
    k: u32,
    domains: &[f64],
) -> Result<MomentScan> {
    if k == 0 || k % 2 != 0 {
        return Err(invalid("k", format!("moment order must be even and positive, got {k}")));
    }
    if domains.len() < 3 || domains.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("domains", "need at least three increasing domain sizes"));
    }
    let dx = 2.0 * PI / (base.p_max - base.p_min);
    let mut moments = Vec::with_capacity(domains.len());
    for &l in domains {
        let n = ((2.0 * l / dx).ceil() as usize).next_power_of_two().max(MIN_POINTS);
        let grid = MomentumGrid::new(n, base.p_min, base.p_max)?;
        let state = builder(&grid)?;
        check_resolved(&state)?;
        let psi = state.to_position();
        let dens: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
        let c_idx = dens
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        let c = grid.position(c_idx);
        let m: f64 = dens
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| {
                let r = grid.position(i) - c;
                (r.abs() <= 0.5 * l).then(|| d * r.powi(k as i32))
            })
            .sum::<f64>()
            * grid.dx();
        moments.push((l, m));
    }
    let ratios: Vec<f64> = moments.windows(2).map(|w| w[1].1 / w[0].1).collect();
    let last = *ratios.last().unwrap();
    let verdict = if (last - 1.0).abs() < MOMENT_CONVERGED {
        MomentVerdict::Convergent
    } else if ratios.iter().rev().take(2).all(|&r| r > MOMENT_DIVERGENT) {
        MomentVerdict::Divergent
    } else {
        MomentVerdict::Inconclusive
    };
    Ok(MomentScan {
        order: k,
        moments,
        verdict,
    })
}

/// Rejects states whose momentum support reaches the grid edges.
fn check_resolved(state: &MomentumState) -> Result<()> {
    let peak = state.phi.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    let edge = (state.grid.n / 100).max(1);
    let leak = state.phi[..edge]
        .iter()
        .chain(&state.phi[state.grid.n - edge..])
        .fold(0.0_f64, |m, z| m.max(z.norm()));
    if leak > 1e-8 * peak {
        return Err(invalid(
            "resolution",
            format!("momentum support reaches the grid edge (relative amplitude {leak:e})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryReport {
    /// `max_b ||I(b)| - |I(-b)||`.
    pub max_asymmetry: f64,
    /// `(b, |I(b)|)` at the largest overlap for `b > 0` and for `b < 0`.
    pub right_max: (f64, f64),
    pub left_max: (f64, f64),
    pub overlap_at_zero: f64,
    /// `(b, |I(b)|)` over the scan.
    pub scan: Vec<(f64, f64)>,
}

/// Builds `Phi_i = R_i(p) e^{i theta(p)}`, orthogonalises the pair and scans
/// `I(b) = int Phi2^*(x) Phi1(x + b) dx = <Phi2| e^{ibP} |Phi1>`.
pub fn equal_phase_symmetry(
    grid: &MomentumGrid,
    r1: impl Fn(f64) -> f64,
    r2: impl Fn(f64) -> f64,
    theta: impl Fn(f64) -> f64,
    b_values: &[f64],
) -> Result<SymmetryReport> {
    phase_symmetry(grid, (&r1, &theta), (&r2, &theta), b_values)
}

/// As [`equal_phase_symmetry`] with separate phase profiles.
pub fn phase_symmetry(
    grid: &MomentumGrid,
    first: (&dyn Fn(f64) -> f64, &dyn Fn(f64) -> f64),
    second: (&dyn Fn(f64) -> f64, &dyn Fn(f64) -> f64),
    b_values: &[f64],
) -> Result<SymmetryReport> {
    let build = |(r, theta): (&dyn Fn(f64) -> f64, &dyn Fn(f64) -> f64)| {
        MomentumState::new(
            *grid,
            grid.momenta()
                .into_iter()
                .map(|p| C64::from_polar(r(p), theta(p)))
                .collect(),
        )
    };
    let phi1 = build(first)?;
    let phi2 = orthogonalize(&phi1, &build(second)?)?;
    let mut scan = Vec::with_capacity(2 * b_values.len());
    let mut max_asymmetry = 0.0_f64;
    let mut right_max = (0.0, 0.0);
    let mut left_max = (0.0, 0.0);
    for &b in b_values {
        let plus = generating_overlap_p(&phi1, &phi2, b)?.norm();
        let minus = generating_overlap_p(&phi1, &phi2, -b)?.norm();
        max_asymmetry = max_asymmetry.max((plus - minus).abs());
        for (bb, v) in [(b, plus), (-b, minus)] {
            scan.push((bb, v));
            if bb > 0.0 && v > right_max.1 {
                right_max = (bb, v);
            }
            if bb < 0.0 && v > left_max.1 {
                left_max = (bb, v);
            }
        }
    }
    scan.sort_by(|a, b| a.0.total_cmp(&b.0));
    scan.dedup_by(|a, b| a.0 == b.0);
    Ok(SymmetryReport {
        max_asymmetry,
        right_max,
        left_max,
        overlap_at_zero: generating_overlap_p(&phi1, &phi2, 0.0)?.norm(),
        scan,
    })
}

/// `|<Gamma| e^{ibP} |Gamma>| = exp(-b^2 / 8 sigma^2)` for a Gaussian of
/// position spread `sigma`, kept in log form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslateOverlap {
    pub ln_value: f64,
}

impl TranslateOverlap {
    /// May underflow to zero although the overlap itself is positive.
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln_value / std::f64::consts::LN_10
    }
}

pub fn gaussian_translate_overlap(sigma: f64, b: f64) -> Result<TranslateOverlap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", "must be positive"));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("translation"));
    }
    Ok(TranslateOverlap {
        ln_value: -b * b / (8.0 * sigma * sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> MomentumGrid {
        MomentumGrid::new(n, -8.0, 8.0).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = grid(512);
        assert!((g.dx() * g.dp() * 512.0 - 2.0 * PI).abs() < 1e-12);
        assert!(MomentumGrid::new(100, 0.0, 1.0).is_err());
        assert!(MomentumGrid::new(128, 0.0, 1.0).is_err());
        assert!(MomentumGrid::new(256, 1.0, 1.0).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let g = grid(1024);
        let s = build_window_state(&g, -2.0, 3.0, 2, 1.5).unwrap();
        let back = MomentumState::from_position(g, &s.to_position()).unwrap();
        for (a, b) in s.amplitudes().iter().zip(back.amplitudes()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn position_norm_matches_momentum_norm() {
        let g = grid(1024);
        let s = gaussian_state(&g, 0.7, 1.3, 0.4).unwrap();
        let norm: f64 = s.to_position().iter().map(|z| z.norm_sqr()).sum::<f64>() * g.dx();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_centre_in_position_space() {
        let g = grid(1024);
        let x0 = 2.5;
        let s = gaussian_state(&g, x0, 0.8, 0.0).unwrap();
        let psi = s.to_position();
        let mean: f64 = psi
            .iter()
            .enumerate()
            .map(|(m, z)| z.norm_sqr() * g.position(m))
            .sum::<f64>()
            * g.dx();
        assert!((mean - x0).abs() < 1e-10);
    }

    #[test]
    fn flat_window_and_real_window() {
        let g = grid(512);
        let s = build_window_state(&g, -1.05, 2.05, 0, 0.7).unwrap();
        let support: Vec<_> = s.amplitudes().iter().filter(|z| z.norm() > 0.0).collect();
        let m0 = support[0].norm();
        assert!(support.iter().all(|z| (z.norm() - m0).abs() < 1e-12));
        let r = build_window_state(&g, -1.0, 2.0, 3, 0.0).unwrap();
        assert!(r.amplitudes().iter().all(|z| z.im == 0.0 && z.re >= 0.0));
    }

    #[test]
    fn window_outside_grid_is_rejected() {
        assert!(build_window_state(&grid(256), -9.0, 1.0, 0, 0.0).is_err());
    }

    #[test]
    fn identical_states_residual_is_peak_density() {
        let g = grid(512);
        let s = gaussian_state(&g, 0.0, 1.0, 0.0).unwrap();
        let peak = s.amplitudes().iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
        assert!((eq1_residual(&s, &s).unwrap() - peak).abs() < 1e-15);
    }

    #[test]
    fn gaussian_self_overlap_is_characteristic_function() {
        let g = MomentumGrid::new(2048, -12.0, 12.0).unwrap();
        let sigma = 1.4;
        let s = gaussian_state(&g, 0.3, sigma, 0.0).unwrap();
        for &b in &[0.0, 0.5, 2.0, 5.0] {
            let got = generating_overlap_p(&s, &s, b).unwrap().norm();
            let want = gaussian_translate_overlap(sigma, b).unwrap().value();
            assert!((got - want).abs() < 1e-12, "{b}: {got} vs {want}");
        }
    }

    #[test]
    fn translate_overlap_in_log_space() {
        assert_eq!(gaussian_translate_overlap(1.0, 0.0).unwrap().value(), 1.0);
        let o = gaussian_translate_overlap(2.0, 2.0).unwrap();
        assert!((o.value() - (-0.125_f64).exp()).abs() < 1e-15);
        let far = gaussian_translate_overlap(1.0, 100.0).unwrap();
        assert!(far.ln_value.is_finite() && far.ln_value < -690.0);
        assert!((far.ln_value + 1250.0).abs() < 1e-9);
    }

    #[test]
    fn energy_overlap_at_zero_is_plain_overlap() {
        let g = grid(512);
        let a = gaussian_state(&g, -1.0, 1.0, 0.5).unwrap();
        let b = gaussian_state(&g, 1.0, 0.7, -0.2).unwrap();
        let e = generating_overlap_e(&a, &b, 0.0, 3.0).unwrap();
        let plain = b.inner(&a).unwrap();
        assert!((e - plain).norm() < 1e-15);
    }

    #[test]
    fn residual_vanishes_with_a_zero_amplitude() {
        let g = grid(512);
        let a = gaussian_state(&g, -3.0, 1.0, 0.0).unwrap();
        let b = orthogonalize(&a, &gaussian_state(&g, 3.0, 1.0, 0.0).unwrap()).unwrap();
        let sup = Superposition::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0), a, b).unwrap();
        assert_eq!(collapse_residual(&sup, Generator::Momentum { b: 1.0 }).unwrap(), 0.0);
    }

    #[test]
    fn superposition_validation() {
        let g = grid(512);
        let a = gaussian_state(&g, -1.0, 1.0, 0.0).unwrap();
        let b = gaussian_state(&g, 1.0, 1.0, 0.0).unwrap();
        let h = C64::new(0.5_f64.sqrt(), 0.0);
        assert!(Superposition::new(h, h, a.clone(), b.clone()).is_err());
        let b = orthogonalize(&a, &b).unwrap();
        assert!(Superposition::new(h, h * 1.1, a.clone(), b.clone()).is_err());
        assert!(Superposition::new(h, h, a, b).is_ok());
    }

    #[test]
    fn gaussian_has_no_power_law_tail() {
        let g = MomentumGrid::new(1 << 14, -20.0, 20.0).unwrap();
        let s = gaussian_state(&g, 0.0, 2.0, 0.0).unwrap();
        assert!(matches!(tail_exponent(&s), Err(Error::FitRejected(_))));
    }

    fn tail_grid() -> MomentumGrid {
        MomentumGrid::new(1 << 16, -1.0, 1.0).unwrap()
    }

    #[test]
    fn truncated_gaussian_is_not_fitted() {
        let s = gaussian_state(&tail_grid(), 0.0, 2.0, 0.0).unwrap();
        assert!(matches!(tail_exponent(&s), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn flat_window_tail_is_one_over_x() {
        let s = build_window_state(&tail_grid(), -0.5, 0.5, 0, 0.0).unwrap();
        let fit = tail_exponent(&s).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.1, "{}", fit.exponent);
    }

    #[test]
    fn quadratic_zeros_give_cubic_tail() {
        let s = build_window_state(&tail_grid(), -0.5, 0.5, 2, 0.0).unwrap();
        let fit = tail_exponent(&s).unwrap();
        assert!((fit.exponent - 3.0).abs() < 0.3, "{}", fit.exponent);
    }

    #[test]
    fn tail_ignores_displacement() {
        let s = build_window_state(&tail_grid(), -0.5, 0.5, 0, 40.0).unwrap();
        let fit = tail_exponent(&s).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.1, "{}", fit.exponent);
    }

    fn scan(n: u32) -> MomentScan {
        let base = MomentumGrid::new(256, -2.0, 2.0).unwrap();
        let domains: Vec<f64> = (0..6).map(|i| 400.0 * 2f64.powi(i)).collect();
        moment_divergence_scan(&base, |g| build_window_state(g, -1.0, 1.0, n, 0.0), 2, &domains).unwrap()
    }

    #[test]
    fn flat_window_second_moment_diverges() {
        let s = scan(0);
        assert_eq!(s.verdict, MomentVerdict::Divergent, "{:?}", s.moments);
    }

    #[test]
    fn cubic_zeros_second_moment_converges() {
        let s = scan(3);
        assert_eq!(s.verdict, MomentVerdict::Convergent, "{:?}", s.moments);
    }

    #[test]
    fn gaussian_second_moment_is_sigma_squared() {
        let base = MomentumGrid::new(256, -6.0, 6.0).unwrap();
        let sigma = 1.5;
        let domains = [50.0, 100.0, 200.0, 400.0];
        let s = moment_divergence_scan(&base, |g| gaussian_state(g, 0.0, sigma, 0.0), 2, &domains).unwrap();
        assert_eq!(s.verdict, MomentVerdict::Convergent);
        let m = s.moments.last().unwrap().1;
        assert!((m - sigma * sigma).abs() < 1e-6, "{m}");
    }

    #[test]
    fn scan_rejects_unresolved_support() {
        let base = MomentumGrid::new(256, -1.0, 1.0).unwrap();
        let r = moment_divergence_scan(&base, |g| gaussian_state(g, 0.0, 0.2, 0.0), 2, &[10.0, 20.0, 40.0]);
        assert!(r.is_err());
    }

    #[test]
    fn disjoint_windows_conserve_both_generators() {
        let g = grid(1024);
        let a = build_window_state(&g, -3.0, -0.5, 4, 2.0).unwrap();
        let b = build_window_state(&g, 0.5, 3.0, 4, -2.0).unwrap();
        assert_eq!(eq1_residual(&a, &b).unwrap(), 0.0);
        let h = C64::new(0.5_f64.sqrt(), 0.0);
        let sup = Superposition::new(h, h * C64::new(0.0, 1.0), a, b).unwrap();
        for i in 0..100 {
            let x = -20.0 + 0.4 * i as f64;
            assert!(collapse_residual(&sup, Generator::Momentum { b: x }).unwrap() <= 1e-10);
            assert!(collapse_residual(&sup, Generator::Energy { a: x, mass: 1.0 }).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn displaced_gaussians_violate() {
        let g = grid(1024);
        let a = gaussian_state(&g, -5.0, 1.0, 0.0).unwrap();
        let b = orthogonalize(&a, &gaussian_state(&g, 5.0, 1.0, 0.0).unwrap()).unwrap();
        assert!(eq1_residual(&a, &b).unwrap() > 1e-4);
        let h = C64::new(0.5_f64.sqrt(), 0.0);
        let sup = Superposition::new(h, h, a, b).unwrap();
        let worst = (0..100)
            .map(|i| collapse_residual(&sup, Generator::Momentum { b: 0.2 * i as f64 }).unwrap())
            .fold(0.0, f64::max);
        assert!(worst >= 1e-4, "{worst}");
    }

    #[test]
    fn random_phases_break_symmetry() {
        use rand::{Rng, SeedableRng};
        let g = MomentumGrid::new(1024, -10.0, 10.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut draw = || -> Vec<f64> { (0..1024).map(|_| rng.random_range(0.0..2.0 * PI)).collect() };
        let (t1, t2) = (draw(), draw());
        let (p0, dp) = (g.p_min(), g.dp());
        let idx = move |p: f64| ((p - p0) / dp).round() as usize;
        let bs: Vec<f64> = (1..=40).map(|i| i as f64 * 0.25).collect();
        let r1 = |p: f64| (-(p - 1.0).powi(2)).exp();
        let r2 = |p: f64| (-(p + 0.5).powi(2) / 2.0).exp();
        let th1 = |p: f64| t1[idx(p)];
        let th2 = |p: f64| t2[idx(p)];
        let rep = phase_symmetry(&g, (&r1, &th1), (&r2, &th2), &bs).unwrap();
        assert!(rep.max_asymmetry > 1e-4, "{}", rep.max_asymmetry);
    }

    #[test]
    fn equal_phases_are_symmetric() {
        let g = MomentumGrid::new(1024, -10.0, 10.0).unwrap();
        let bs: Vec<f64> = (1..=40).map(|i| i as f64 * 0.25).collect();
        let rep = equal_phase_symmetry(
            &g,
            |p| (-(p - 1.0).powi(2)).exp(),
            |p| (-(p + 0.5).powi(2) / 2.0).exp() * (1.0 + 0.3 * p),
            |_| 0.0,
            &bs,
        )
        .unwrap();
        assert!(rep.max_asymmetry < 1e-10);
        assert!(rep.overlap_at_zero < 1e-8);
    }
}
