//! Simulation and bookkeeping for the single-operator Continuous Spontaneous
//! Localization (CSL) collapse model.
//!
//! A classical white-noise field `w(t)` drives non-unitary collapse of a
//! statevector towards eigenstates of a Hermitian operator `A`, while `H_A`
//! generates the ordinary unitary motion. This crate provides
//!
//! * [`hilbert`]: dense Hermitian linear algebra (spectra, exponentials,
//!   interaction picture, commutators);
//! * [`noise`]: time grids and sampling of `w(t)`;
//! * [`dynamics`]: the two concrete models (dense matrices, periodic
//!   free-particle grid) with their half-step propagators;
//! * [`trajectory`]: single collapse trajectories, importance weights and the
//!   per-path field-energy estimator;
//! * [`ensemble`]: Monte Carlo ensembles and the deterministic density-matrix
//!   evolution they average to;
//! * [`ledger`]: system, field and interaction energy and their conserved sum;
//! * [`scenarios`]: ready-made two-level, qubit, random and free-particle
//!   set-ups;
//! * [`postulate`]: momentum-grid analysis of energy-momentum conservation
//!   under the textbook collapse postulate.
//!
//! No module performs file or network IO.

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod hilbert;
pub mod ledger;
pub mod noise;
pub mod postulate;
pub mod scenarios;
pub mod stats;
pub mod tolerance;
pub mod trajectory;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
