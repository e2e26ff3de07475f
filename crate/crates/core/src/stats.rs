//! Small statistical helpers shared by the ensemble and ledger code.

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Distance from `target` in units of the standard error.
    pub fn sigmas_from(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if self.std_error > 0.0 {
            d / self.std_error
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn consistent_with(&self, target: f64, sigmas: f64) -> bool {
        self.sigmas_from(target) <= sigmas
    }
}

/// Pairwise (cascade) summation. The result depends only on the order of
/// `xs`, never on how work was scheduled.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean and `s/sqrt(n)`.
pub fn mean_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            std_error: f64::NAN,
        };
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return Estimate {
            mean,
            std_error: 0.0,
        };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Estimate {
        mean,
        std_error: (var / n as f64).sqrt(),
    }
}

/// Self-normalised weighted mean with the delta-method standard error
/// `sqrt(sum w^2 (x - m)^2) / sum w`.
pub fn weighted_estimate(xs: &[f64], ws: &[f64]) -> Estimate {
    assert_eq!(xs.len(), ws.len());
    let wsum = pairwise_sum(ws);
    if xs.is_empty() || wsum <= 0.0 {
        return Estimate {
            mean: f64::NAN,
            std_error: f64::NAN,
        };
    }
    let wx: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| x * w).collect();
    let mean = pairwise_sum(&wx) / wsum;
    let dev: Vec<f64> = xs
        .iter()
        .zip(ws)
        .map(|(x, w)| (w * (x - mean)).powi(2))
        .collect();
    Estimate {
        mean,
        std_error: pairwise_sum(&dev).sqrt() / wsum,
    }
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(ws: &[f64]) -> f64 {
    let s = pairwise_sum(ws);
    let sq: Vec<f64> = ws.iter().map(|w| w * w).collect();
    let s2 = pairwise_sum(&sq);
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    LineFit {
        slope,
        intercept: my - slope * mx,
    }
}

/// Cumulative trapezoid rule; output has the same length as the input.
pub fn cumulative_trapezoid(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..x.len() {
        acc += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), 2475.0);
    }

    #[test]
    fn weighted_reduces_to_mean_for_unit_weights() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let e = weighted_estimate(&xs, &[1.0; 4]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        assert!((effective_sample_size(&[1.0; 4]) - 4.0).abs() < 1e-15);
        assert!((effective_sample_size(&[1.0, 0.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|t| 3.0 - 0.5 * t).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 3.0).abs() < 1e-13);
    }

    #[test]
    fn trapezoid_exact_for_linear() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|t| 2.0 * t + 1.0).collect();
        let c = cumulative_trapezoid(&x, &y);
        assert!((c[10] - 2.0).abs() < 1e-14);
    }
}
