//! Coherent control of the two in-plane oscillation modes of an optically
//! levitated nanoparticle.
//!
//! Modulating the polarization angle of the trapping laser at the difference
//! of the two trap frequencies couples the x- and y-modes. In a frame rotating
//! with the modulation the slowly varying mode amplitudes obey a two-level
//! equation of motion, so the mode energies perform Rabi oscillations and the
//! two-mode state lives on a Bloch sphere. This crate provides
//!
//! * [`model`]: physical parameters, unit conventions and the flat config format,
//! * [`envelope`]: the exact two-mode envelope propagator and Bloch geometry,
//! * [`fullsim`]: a 2D Langevin simulation of the particle in the rotated trap,
//! * [`feedback`]: parametric feedback cooling/heating of a single mode,
//! * [`protocols`]: Rabi exchange, sympathetic cooling and energy-transfer cooling,
//! * [`analysis`]: Welch PSDs, Lorentzian and Rabi fits, and cooling-limit formulas,
//! * [`io`]: CSV / binary export of trajectories, traces and fit results.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod analysis;
pub mod envelope;
pub mod error;
pub mod feedback;
pub mod fullsim;
pub mod io;
pub mod model;
pub mod protocols;
pub mod rng;

pub use envelope::{BlochVector, EnvelopeParams, EnvelopeState};
pub use error::{Error, Result};
pub use fullsim::{MeasuredRecord, SimState, Trajectory};
pub use model::{BathParams, Config, DriveParams, NoiseModel, ParticleParams, TrapParams};
pub use protocols::{DriveSchedule, ProtocolTrace, RabiFit};
