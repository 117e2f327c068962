//! Ambient power-grid simulation and dynamic-load parameter estimation.
//!
//! This crate simulates a power grid whose dynamic loads are driven by small
//! stochastic demand fluctuations, synthesizes PMU-style phasor measurements
//! from the trajectories, and recovers the loads' time constants from the
//! stationary covariance of the measured admittance series — no disturbance
//! or staged test required.
//!
//! The pieces, bottom up:
//!
//! * [`grid`] — static network model: admittance assembly, bus injections,
//!   Newton–Raphson power flow.
//! * [`cases`] — built-in WSCC 9-bus and IEEE 39-bus test systems with
//!   dynamic-load placements, plus a JSON case-file format.
//! * [`sim`] — stochastic structure-preserving DAE integration: swing
//!   dynamics, first-order load dynamics with Gaussian demand forcing, and a
//!   per-step algebraic network solve.
//! * [`pmu`] — phasor stream synthesis at a PMU reporting rate, measurement
//!   noise injection, and admittance recovery from voltage/current phasors.
//! * [`estimator`] — sample statistics, the closed-form covariance-based
//!   time-constant estimator, and the Lyapunov-equation machinery used to
//!   validate it.
//! * [`pipeline`] — one-call experiment runner chaining all of the above.

pub mod cases;
pub mod estimator;
pub mod grid;
pub mod pipeline;
pub mod pmu;
pub mod sim;

mod numfmt;

pub use numfmt::{fmt_f64, parse_f64};
