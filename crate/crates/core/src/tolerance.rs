//! Global tolerance ladder.
//!
//! Floating-point identities and statistical agreement are kept on separate
//! rungs so a failing check says which kind of error it saw.

/// Construction-time checks (Hermiticity, normalisation of inputs).
pub const CONSTRUCTION: f64 = 1e-12;

/// Algebraic identities evaluated in floating point.
pub const ALGEBRAIC: f64 = 1e-10;

/// Quadratures and ODE integrations.
pub const QUADRATURE: f64 = 1e-6;

/// Monte Carlo agreement, in standard errors.
pub const MC_SIGMAS: f64 = 3.0;

/// Relative change allowed when halving the density-matrix time step.
pub const STEP_HALVING: f64 = 1e-8;
