//! Time grids and sampling of the classical collapse field `w(t)`.
//!
//! `w` is piecewise constant: `w_k` holds on `[t_k, t_{k+1})`. Under the raw
//! (Gaussian reference) measure the `w_k` are i.i.d. `Normal(0, lambda/dt)`.
//! The physical ("cooked") law is sampled step by step inside
//! [`crate::trajectory`], where the current state is known.
//!
//! Units: `[w] = [lambda * A]`, inferred from the collapse exponent
//! `(w - 2 lambda A)^2 / lambda * dt` being dimensionless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::hilbert::{expectation, HermitianOperator, StateVector};

/// Above this value of `dt * lambda * (spectral range of A)^2` a
/// [`TimeGrid::resolution_warning`] is produced.
pub const RESOLUTION_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(invalid("t_end", format!("must be positive and finite, got {t_end}")));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        Ok(Self { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Left edge of step `k`; `time(steps) == t_end`.
    pub fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.steps as f64
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.time(k) + 0.5 * self.dt()
    }

    /// `dt * lambda * range^2`, the per-step collapse exponent scale.
    pub fn resolution(&self, params: &CollapseParams, spectral_range: f64) -> f64 {
        self.dt() * params.lambda * spectral_range * spectral_range
    }

    pub fn resolution_warning(&self, params: &CollapseParams, spectral_range: f64) -> Option<String> {
        let r = self.resolution(params, spectral_range);
        (r > RESOLUTION_LIMIT).then(|| {
            format!(
                "dt*lambda*range^2 = {r:.3e} exceeds {RESOLUTION_LIMIT}; the piecewise-constant noise discretisation is coarse"
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseParams {
    pub lambda: f64,
    pub hbar: f64,
}

impl CollapseParams {
    pub fn new(lambda: f64, hbar: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be non-negative, got {lambda}")));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(invalid("hbar", format!("must be positive, got {hbar}")));
        }
        Ok(Self { lambda, hbar })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// Zero-mean Gaussian reference measure; trajectories carry an
    /// importance weight.
    Raw,
    /// Physical law of `w`; every trajectory has unit weight.
    Cooked,
}

/// Conditional law used for cooked sampling of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CookedLaw {
    /// Exact conditional of the discretised model: pick eigenvalue `a_i` of
    /// the step operator with probability `|<a_i|psi>|^2`, then
    /// `w ~ Normal(2 lambda a_i, lambda/dt)`.
    #[default]
    Mixture,
    /// Leading order in `dt`: `w ~ Normal(2 lambda <A>, lambda/dt)`.
    LeadingOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoisePath {
    pub fn new(grid: TimeGrid, values: Vec<f64>, mode: NoiseMode, seed: u64) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(Error::DimensionMismatch {
                expected: grid.steps(),
                found: values.len(),
            });
        }
        if values.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("noise path"));
        }
        Ok(Self {
            grid,
            values,
            mode,
            seed,
        })
    }

    /// `(step, t_k, w_k)` rows, the layout of the debug path dump.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(k, &w)| (k, self.grid.time(k), w))
    }

    /// `sum_k w_k^2 dt`.
    pub fn square_integral(&self) -> f64 {
        let dt = self.grid.dt();
        self.values.iter().map(|w| w * w * dt).sum()
    }
}

/// SplitMix64 finaliser applied to `(master, index)`; gives each trajectory
/// its own reproducible stream seed.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// i.i.d. `w_k ~ Normal(0, lambda/dt)`.
pub fn sample_raw(grid: TimeGrid, params: &CollapseParams, seed: u64) -> NoisePath {
    let mut rng = rng_from_seed(seed);
    let sd = (params.lambda / grid.dt()).sqrt();
    let values = (0..grid.steps())
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    NoisePath {
        grid,
        values,
        mode: NoiseMode::Raw,
        seed,
    }
}

/// Drift of the physical noise law, `2 lambda <A(t)>`.
pub fn cooked_step_mean(
    a_t: &HermitianOperator,
    psi: &StateVector,
    params: &CollapseParams,
) -> Result<f64> {
    Ok(2.0 * params.lambda * expectation(a_t, psi)?)
}

/// One cooked draw given the step operator's eigenvalues and the
/// normalised populations of the current state in that eigenbasis.
pub fn draw_cooked<R: Rng + ?Sized>(
    law: CookedLaw,
    eigenvalues: &[f64],
    populations: impl Iterator<Item = f64> + Clone,
    params: &CollapseParams,
    dt: f64,
    rng: &mut R,
) -> f64 {
    let sd = (params.lambda / dt).sqrt();
    let centre = match law {
        CookedLaw::LeadingOrder => {
            let mean: f64 = populations.zip(eigenvalues).map(|(p, a)| p * a).sum();
            mean
        }
        CookedLaw::Mixture => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = eigenvalues[eigenvalues.len() - 1];
            for (p, &a) in populations.zip(eigenvalues) {
                acc += p;
                if u < acc {
                    pick = a;
                    break;
                }
            }
            pick
        }
    };
    let z: f64 = rng.sample(StandardNormal);
    2.0 * params.lambda * centre + sd * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_estimate;
    use crate::C64;

    fn grid() -> TimeGrid {
        TimeGrid::new(100.0, 10_000).unwrap()
    }

    #[test]
    fn raw_variance_within_chi_square_band() {
        let params = CollapseParams::with_lambda(1.0).unwrap();
        let path = sample_raw(grid(), &params, 11);
        let s = path.values.len() as f64;
        let mean = path.values.iter().sum::<f64>() / s;
        let var = path.values.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (s - 1.0);
        let target = params.lambda / grid().dt();
        // chi-square with 9999 dof: sd of var/target is sqrt(2/9999) = 1.4%,
        // so the 5% band is a 3.5 sigma window.
        assert!((var / target - 1.0).abs() < 0.05, "var ratio {}", var / target);
    }

    #[test]
    fn raw_is_deterministic_per_seed() {
        let params = CollapseParams::with_lambda(0.4).unwrap();
        assert_eq!(sample_raw(grid(), &params, 5), sample_raw(grid(), &params, 5));
    }

    #[test]
    fn distinct_seeds_are_uncorrelated() {
        let params = CollapseParams::with_lambda(1.0).unwrap();
        let a = sample_raw(grid(), &params, derive_seed(99, 0));
        let b = sample_raw(grid(), &params, derive_seed(99, 1));
        let s = a.values.len() as f64;
        let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() <= 3.0 / s.sqrt());
    }

    #[test]
    fn raw_moments_over_ensemble() {
        // increments consistent with Normal(0, lambda/dt) at 4 sigma over 500 paths
        let g = TimeGrid::new(1.0, 20).unwrap();
        let params = CollapseParams::with_lambda(2.0).unwrap();
        let sd = (params.lambda / g.dt()).sqrt();
        let z: Vec<f64> = (0..500)
            .flat_map(|i| sample_raw(g, &params, derive_seed(3, i)).values)
            .map(|w| w / sd)
            .collect();
        let m = mean_estimate(&z);
        assert!(m.mean.abs() < 4.0 * m.std_error);
        let sq: Vec<f64> = z.iter().map(|x| x * x).collect();
        let v = mean_estimate(&sq);
        assert!((v.mean - 1.0).abs() < 4.0 * v.std_error);
    }

    #[test]
    fn cooked_mean_cases() {
        let params = CollapseParams::with_lambda(0.7).unwrap();
        let a = HermitianOperator::from_real_diagonal(&[1.0, -1.0]);
        let up = StateVector::basis(2, 0);
        assert!((cooked_step_mean(&a, &up, &params).unwrap() - 1.4).abs() < 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let even = StateVector::new(vec![C64::new(s, 0.0), C64::new(s, 0.0)]).unwrap();
        assert!(cooked_step_mean(&a, &even, &params).unwrap().abs() < 1e-15);
        let zero = StateVector::new(vec![C64::new(0.0, 0.0); 2]).unwrap();
        assert!(cooked_step_mean(&a, &zero, &params).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(CollapseParams::new(-0.1, 1.0).is_err());
        assert!(CollapseParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn resolution_warning_threshold() {
        let p = CollapseParams::with_lambda(1.0).unwrap();
        assert!(TimeGrid::new(1.0, 100).unwrap().resolution_warning(&p, 2.0).is_none());
        assert!(TimeGrid::new(1.0, 10).unwrap().resolution_warning(&p, 2.0).is_some());
    }
}
