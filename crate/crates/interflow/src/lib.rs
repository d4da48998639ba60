//! Simulation and estimation for stochastic flows whose coefficients depend
//! on the transported measure.
//!
//! The moving parts:
//!
//! * [`kernels`]: mean-field interaction drifts, finite diffusion families,
//!   their derivatives and divergences, and the dissipativity report.
//! * [`flow`]: Euler-Maruyama stepping of particles, tracked flow points,
//!   Jacobians, and the log-determinant split into drift and martingale parts.
//! * [`detcalc`]: determinant derivative identities and the consistency check
//!   between the propagated Jacobian and the accumulated exponent.
//! * [`density`]: compactly supported initial densities and L^p moments of
//!   the transported density by change of variables along flow lines.
//! * [`asymptotics`]: Lyapunov and moment-Lyapunov estimators, the
//!   intermittency verdict, and contraction / clustering / martingale
//!   diagnostics.
//! * [`gamma`]: the bounded-cost transport metric on empirical measures.
//! * [`config`] / [`runner`]: declarative experiment files, orchestration,
//!   and the CSV / JSON output contracts in [`output`].

pub mod asymptotics;
pub mod config;
pub mod density;
pub mod detcalc;
pub mod error;
pub mod flow;
pub mod gamma;
pub mod kernels;
pub mod linalg;
pub mod noise;
pub mod output;
pub mod runner;

pub use error::{Error, Result};
