//! Two-mode envelope dynamics in the frame rotating with the modulation.
//!
//! The complex amplitudes `(ā, b̄)` of the x- and y-mode obey
//!
//! ```text
//! i d/dt (ā, b̄)ᵀ = H (ā, b̄)ᵀ,
//! H = ½ [[ δ − iγ_a,     −A e^{−iψ} ],
//!        [ −A e^{+iψ},   −δ − iγ_b  ]]
//! ```
//!
//! with detuning `δ = ω_mod − ΔΩ`, coupling `A = φ₀ΔΩ` and drive phase `ψ`.
//! `ψ = 0` rotates the Bloch vector about e₁, `ψ = π/2` about e₂. Distinct
//! `γ_a`, `γ_b` model feedback damping on one mode; with `γ_a = γ_b` this is
//! the plain two-level equation with uniform decay.
//!
//! Amplitudes are normalized so that `|ā|²` and `|b̄|²` are the mode energies
//! in units of k_B·T₀. H is piecewise constant, so propagation uses the exact
//! matrix exponential rather than an ODE integrator.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;

use crate::model::{coupling_rate, DriveParams, TrapParams, K_B};

pub type C64 = Complex64;
pub type Propagator = Matrix2<C64>;

const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeState {
    pub a: C64,
    pub b: C64,
    pub t: f64,
}

impl EnvelopeState {
    pub fn new(a: C64, b: C64, t: f64) -> Self {
        Self { a, b, t }
    }

    /// State with the given energies (k_B·T₀ units) and relative phase `arg(b̄/ā)`.
    pub fn from_energies(e_x: f64, e_y: f64, phase: f64, t: f64) -> Self {
        Self {
            a: C64::new(e_x.max(0.0).sqrt(), 0.0),
            b: C64::from_polar(e_y.max(0.0).sqrt(), phase),
            t,
        }
    }

    /// Total population `|ā|² + |b̄|²`.
    pub fn population(&self) -> f64 {
        self.a.norm_sqr() + self.b.norm_sqr()
    }

    fn vector(&self) -> Vector2<C64> {
        Vector2::new(self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeParams {
    /// Detuning δ (rad/s).
    pub delta: f64,
    /// Coupling rate A (rad/s).
    pub coupling: f64,
    /// Energy damping of the x-mode (rad/s).
    pub gamma_a: f64,
    /// Energy damping of the y-mode (rad/s).
    pub gamma_b: f64,
    /// Drive phase ψ (rad).
    pub psi: f64,
}

impl EnvelopeParams {
    pub fn new(delta: f64, coupling: f64, gamma: f64) -> Self {
        Self {
            delta,
            coupling,
            gamma_a: gamma,
            gamma_b: gamma,
            psi: 0.0,
        }
    }

    /// Envelope parameters for a drive on a given trap. A disabled drive keeps
    /// its modulation frequency as frame reference and has zero coupling.
    pub fn from_drive(drive: &DriveParams, trap: &TrapParams, gamma_a: f64, gamma_b: f64) -> Self {
        let coupling = if drive.enabled {
            coupling_rate(drive.phi0, trap)
        } else {
            0.0
        };
        Self {
            delta: drive.omega_mod - trap.delta_omega(),
            coupling,
            gamma_a,
            gamma_b,
            psi: if drive.enabled { drive.psi } else { 0.0 },
        }
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.psi = psi;
        self
    }

    pub fn hamiltonian(&self) -> Matrix2<C64> {
        let off = -0.5 * self.coupling;
        Matrix2::new(
            C64::new(0.5 * self.delta, -0.5 * self.gamma_a),
            off * C64::from_polar(1.0, -self.psi),
            off * C64::from_polar(1.0, self.psi),
            C64::new(-0.5 * self.delta, -0.5 * self.gamma_b),
        )
    }
}

/// Coupling between action-normalized amplitudes in the rotating-wave limit
/// of the rotated trap, `φ₀ΔΩ·(Ω_x + Ω_y)/(2√(Ω_xΩ_y))`. Exceeds `φ₀ΔΩ` by a
/// factor `1 + (ΔΩ)²/(8Ω_xΩ_y) + …`, about 0.5 % for the default trap.
pub fn rwa_coupling(phi0: f64, trap: &TrapParams) -> f64 {
    coupling_rate(phi0, trap) * (trap.omega_x + trap.omega_y)
        / (2.0 * (trap.omega_x * trap.omega_y).sqrt())
}

/// Generalized Rabi frequency `√(A² + δ²)`.
pub fn rabi_frequency(params: &EnvelopeParams) -> f64 {
    params.coupling.hypot(params.delta)
}

/// Exact propagator `exp(−i H dt)`.
///
/// Writing `M = −i H dt = c·1 + K` with `K` traceless, `K² = s²·1` and
/// `exp(M) = e^c (cosh s · 1 + sinh(s)/s · K)`. Both `cosh` and `sinh(s)/s` are
/// even in `s`, so the branch of `√(s²)` is irrelevant and the formula holds
/// through the exceptional point where the eigenvectors coalesce.
pub fn propagator(params: &EnvelopeParams, dt: f64) -> Propagator {
    debug_assert!(dt >= 0.0, "negative time step");
    let m = params.hamiltonian() * C64::new(0.0, -dt);
    let c = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let k = m - Matrix2::identity() * c;
    let s2 = k[(0, 0)] * k[(0, 0)] + k[(0, 1)] * k[(1, 0)];
    let (cosh, sinhc) = cosh_sinhc(s2);
    (Matrix2::identity() * cosh + k * sinhc) * c.exp()
}

/// `(cosh s, sinh(s)/s)` as functions of `s²`.
fn cosh_sinhc(s2: C64) -> (C64, C64) {
    if s2.norm() < 1e-6 {
        // Taylor series; truncation error below 1e-25.
        let cosh = 1.0 + s2 / 2.0 + s2 * s2 / 24.0 + s2 * s2 * s2 / 720.0;
        let sinhc = 1.0 + s2 / 6.0 + s2 * s2 / 120.0 + s2 * s2 * s2 / 5040.0;
        (cosh, sinhc)
    } else {
        let s = s2.sqrt();
        (s.cosh(), s.sinh() / s)
    }
}

pub fn propagate(state: &EnvelopeState, params: &EnvelopeParams, dt: f64) -> EnvelopeState {
    let v = propagator(params, dt) * state.vector();
    EnvelopeState {
        a: v[0],
        b: v[1],
        t: state.t + dt,
    }
}

/// Time derivative of the state under `params`.
pub fn derivative(state: &EnvelopeState, params: &EnvelopeParams) -> (C64, C64) {
    let v = params.hamiltonian() * state.vector() * (-I);
    (v[0], v[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochVector {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// Total population `|ā|² + |b̄|²` (k_B·T₀ units).
    pub norm: f64,
    /// Set when the population vanishes and the direction is undefined.
    pub degenerate: bool,
}

impl BlochVector {
    pub fn length(&self) -> f64 {
        (self.e1 * self.e1 + self.e2 * self.e2 + self.e3 * self.e3).sqrt()
    }
}

/// Bloch vector of a state: north pole = all energy in x, south pole = all in y.
pub fn bloch_vector(state: &EnvelopeState) -> BlochVector {
    let pa = state.a.norm_sqr();
    let pb = state.b.norm_sqr();
    let n = pa + pb;
    if !(n > 0.0) {
        return BlochVector {
            e1: 0.0,
            e2: 0.0,
            e3: 0.0,
            norm: 0.0,
            degenerate: true,
        };
    }
    let cross = state.a.conj() * state.b;
    BlochVector {
        e1: 2.0 * cross.re / n,
        e2: 2.0 * cross.im / n,
        e3: (pa - pb) / n,
        norm: n,
        degenerate: false,
    }
}

/// Population decay rates `−2 Im λ` of the two eigenmodes of H, ascending.
pub fn decay_rates(params: &EnvelopeParams) -> (f64, f64) {
    let h = params.hamiltonian();
    let mean = 0.5 * (h[(0, 0)] + h[(1, 1)]);
    let half = 0.5 * (h[(0, 0)] - h[(1, 1)]);
    let root = (half * half + h[(0, 1)] * h[(1, 0)]).sqrt();
    let r1 = -2.0 * (mean + root).im;
    let r2 = -2.0 * (mean - root).im;
    (r1.min(r2), r1.max(r2))
}

/// Mode energies in joules, `E = |amplitude|²·k_B·T₀`.
pub fn mode_energies(state: &EnvelopeState, t0_kelvin: f64) -> (f64, f64) {
    mode_energies_weighted(state, t0_kelvin, ModeWeights::UNIT)
}

/// Energy per unit population of each mode (k_B·T₀ units).
///
/// The coupled two-mode motion conserves the total action `E_x/Ω_x + E_y/Ω_y`
/// rather than the total energy: a population moved from x to y gains energy
/// by `Ω_y/Ω_x`. With [`ModeWeights::from_trap`] the populations are actions
/// scaled by `√(Ω_xΩ_y)`, which makes the envelope energies agree with the full
/// simulation. [`ModeWeights::UNIT`] is the plain energy normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeWeights {
    pub x: f64,
    pub y: f64,
}

impl ModeWeights {
    pub const UNIT: Self = Self { x: 1.0, y: 1.0 };

    pub fn from_trap(trap: &TrapParams) -> Self {
        let reference = (trap.omega_x * trap.omega_y).sqrt();
        Self {
            x: trap.omega_x / reference,
            y: trap.omega_y / reference,
        }
    }

    /// Populations for given mode energies (k_B·T₀ units).
    pub fn populations(&self, e_x: f64, e_y: f64) -> (f64, f64) {
        (e_x / self.x, e_y / self.y)
    }

    /// Mode energies (k_B·T₀ units) of a state.
    pub fn energies(&self, state: &EnvelopeState) -> (f64, f64) {
        (self.x * state.a.norm_sqr(), self.y * state.b.norm_sqr())
    }
}

pub fn mode_energies_weighted(
    state: &EnvelopeState,
    t0_kelvin: f64,
    weights: ModeWeights,
) -> (f64, f64) {
    let kbt = K_B * t0_kelvin;
    let (ex, ey) = weights.energies(state);
    (ex * kbt, ey * kbt)
}

/// Measures the energy-exchange frequency by locating successive maxima of
/// `|b̄(t)|²` under constant `params`, starting from `init`.
///
/// Returns `None` when fewer than two maxima are found within `cycles`
/// nominal Rabi periods (e.g. `A = 0`).
pub fn measure_exchange_frequency(
    init: &EnvelopeState,
    params: &EnvelopeParams,
    cycles: usize,
) -> Option<f64> {
    let omega_r = rabi_frequency(params);
    if !(omega_r > 0.0) || params.coupling == 0.0 {
        return None;
    }
    let period = std::f64::consts::TAU / omega_r;
    let h = period / 64.0;
    let slope = |t: f64| {
        let s = propagate(init, params, t);
        let (_, db) = derivative(&s, params);
        2.0 * (s.b.conj() * db).re
    };

    let mut maxima = Vec::with_capacity(cycles + 1);
    let mut t0 = 0.5 * h;
    let mut s0 = slope(t0);
    let horizon = (cycles as f64 + 1.5) * period;
    while t0 < horizon && maxima.len() < cycles + 1 {
        let t1 = t0 + h;
        let s1 = slope(t1);
        if s0 > 0.0 && s1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            maxima.push(0.5 * (lo + hi));
        }
        t0 = t1;
        s0 = s1;
    }
    if maxima.len() < 2 {
        return None;
    }
    let n = maxima.len() - 1;
    Some(std::f64::consts::TAU * n as f64 / (maxima[n] - maxima[0]))
}
