//! Experiment scripts: Rabi exchange, sympathetic cooling and cooling by
//! energy transfer, each runnable on the envelope model or the full simulation.
//!
//! Both backends report observations on a common grid of `sample_interval`
//! as an estimated envelope state, from which the trace derives mode energies
//! (k_B·T₀ units) and the Bloch vector. The envelope backend propagates the
//! exact two-mode equations with action-normalized amplitudes; the full
//! simulation backend demodulates the (optionally noisy) detector record.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analysis::lsq::{levenberg_marquardt, LeastSquares, LmOptions};
use crate::analysis::{cooling_limit, linear_fit};
use crate::envelope::{
    bloch_vector, derivative, propagate, rabi_frequency, rwa_coupling, BlochVector, EnvelopeParams,
    EnvelopeState, ModeWeights,
};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, Mode};
use crate::fullsim::{
    amplitude_scale, demodulate_hann, envelope_from_amplitudes, init_with_energies,
    step_for_sample_rate, Physics, Simulator,
};
use crate::model::{coupling_rate, Config, DriveParams, InitSpec, NoiseModel};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Envelope,
    FullSim,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Envelope => "envelope",
            BackendKind::FullSim => "fullsim",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(BackendKind::Envelope),
            "fullsim" => Ok(BackendKind::FullSim),
            other => Err(Error::invalid(
                "run.backend",
                format!("unknown backend `{other}`"),
            )),
        }
    }
}

/// Piecewise-constant drive: time-ordered segments, each active from its
/// start until the next one. Before the first segment the drive is off.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriveSchedule {
    segments: Vec<(f64, DriveParams)>,
    events: Vec<(String, f64)>,
}

impl DriveSchedule {
    pub fn constant(drive: DriveParams) -> Self {
        Self {
            segments: vec![(0.0, drive)],
            events: Vec::new(),
        }
    }

    /// Drive off until `t_on`, then `drive`.
    pub fn switched_on(drive: DriveParams, t_on: f64) -> Self {
        let mut s = Self::constant(drive.switched_off());
        if t_on > 0.0 {
            s.segments.push((t_on, drive));
        } else {
            s.segments[0].1 = drive;
        }
        s.events.push(("coupling_on".into(), t_on));
        s
    }

    /// Appends a segment; starts must be strictly increasing.
    pub fn push(&mut self, start: f64, drive: DriveParams) -> Result<()> {
        if let Some(&(last, _)) = self.segments.last() {
            if !(start > last) {
                return Err(Error::Config(format!(
                    "drive segment at {start} s does not follow the segment at {last} s"
                )));
            }
        }
        self.segments.push((start, drive));
        Ok(())
    }

    pub fn mark(&mut self, name: &str, t: f64) {
        self.events.push((name.to_string(), t));
    }

    pub fn segments(&self) -> &[(f64, DriveParams)] {
        &self.segments
    }

    pub fn events(&self) -> &[(String, f64)] {
        &self.events
    }

    /// Drive active at `t`; `delta_omega` is the frame reference used when no
    /// segment has started yet.
    pub fn drive_at(&self, t: f64, delta_omega: f64) -> DriveParams {
        let k = self.segments.partition_point(|&(start, _)| start <= t);
        if k == 0 {
            DriveParams::off(self.segments.first().map_or(delta_omega, |s| s.1.omega_mod))
        } else {
            self.segments[k - 1].1
        }
    }
}

/// One observation of the two modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    /// Mode energies (k_B·T₀ units).
    pub e_x: f64,
    pub e_y: f64,
    pub bloch: BlochVector,
}

impl TracePoint {
    /// Share of the y-mode in the total population, `(1 − e₃)/2`.
    pub fn y_fraction(&self) -> f64 {
        0.5 * (1.0 - self.bloch.e3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub name: String,
    pub scheduled: f64,
    pub executed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolTrace {
    pub backend: BackendKind,
    pub seed: u64,
    pub points: Vec<TracePoint>,
    pub events: Vec<Event>,
}

impl ProtocolTrace {
    pub fn new(backend: BackendKind, seed: u64) -> Self {
        Self {
            backend,
            seed,
            points: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn log(&mut self, name: &str, scheduled: f64, executed: f64) {
        self.events.push(Event {
            name: name.to_string(),
            scheduled,
            executed,
        });
    }

    pub fn event(&self, name: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.name == name)
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn energies(&self, mode: Mode) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| match mode {
                Mode::X => p.e_x,
                Mode::Y => p.e_y,
            })
            .collect()
    }

    /// Points with `t0 ≤ t ≤ t1`.
    pub fn window(&self, t0: f64, t1: f64) -> &[TracePoint] {
        let a = self.points.partition_point(|p| p.t < t0);
        let b = self.points.partition_point(|p| p.t <= t1);
        &self.points[a..b.max(a)]
    }

    /// `(t, y-fraction)` series over `[t0, t1]`.
    pub fn y_fraction_series(&self, t0: f64, t1: f64) -> (Vec<f64>, Vec<f64>) {
        self.window(t0, t1)
            .iter()
            .map(|p| (p.t, p.y_fraction()))
            .unzip()
    }

    /// Linear interpolation of the energies at `t` (clamped to the ends).
    pub fn energies_at(&self, t: f64) -> Option<(f64, f64)> {
        let pts = &self.points;
        if pts.is_empty() {
            return None;
        }
        let k = pts.partition_point(|p| p.t < t);
        if k == 0 {
            return Some((pts[0].e_x, pts[0].e_y));
        }
        if k >= pts.len() {
            let p = pts[pts.len() - 1];
            return Some((p.e_x, p.e_y));
        }
        let (a, b) = (pts[k - 1], pts[k]);
        let f = (t - a.t) / (b.t - a.t);
        Some((a.e_x + f * (b.e_x - a.e_x), a.e_y + f * (b.e_y - a.e_y)))
    }

    fn push_state(&mut self, state: &EnvelopeState, weights: ModeWeights) {
        let (e_x, e_y) = weights.energies(state);
        self.points.push(TracePoint {
            t: state.t,
            e_x,
            e_y,
            bloch: bloch_vector(state),
        });
    }
}

/// Everything a protocol run needs from the configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub physics: Physics,
    pub noise: NoiseModel,
    pub backend: BackendKind,
    /// Requested integrator step for the full simulation.
    pub dt: Option<f64>,
    /// Spacing of energy observations (s).
    pub sample_interval: f64,
    pub seed: u64,
}

impl Experiment {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            physics: Physics::from_config(cfg),
            noise: cfg.noise,
            backend: cfg.run.backend,
            dt: cfg.run.dt,
            sample_interval: cfg.protocol.sample_interval,
            seed: cfg.seed,
        }
    }

    pub fn kbt(&self) -> f64 {
        self.physics.bath.kbt()
    }

    pub fn with_backend(mut self, backend: BackendKind) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Relative phase `arg(b̄/ā)` of the initial state; uniformly random from
    /// the run seed when not given.
    pub fn initial_phase(&self, init: &InitSpec) -> f64 {
        init.phase
            .unwrap_or_else(|| rng::stream(self.seed, 0).random_range(0.0..TAU))
    }

    /// Builds the configured backend with the drive off.
    pub fn start(
        &self,
        init: &InitSpec,
        omega_mod: f64,
        feedback: Option<FeedbackConfig>,
    ) -> Result<Backend> {
        if !(self.sample_interval > 0.0) {
            return Err(Error::invalid("protocol.sample_interval", "must be > 0"));
        }
        if let Some(fb) = &feedback {
            fb.validate()?;
        }
        let phase = self.initial_phase(init);
        Ok(match self.backend {
            BackendKind::Envelope => {
                Backend::Envelope(EnvelopeBackend::new(self, init, phase, omega_mod, feedback))
            }
            BackendKind::FullSim => Backend::FullSim(Box::new(FullSimBackend::new(
                self, init, phase, omega_mod, feedback,
            )?)),
        })
    }
}

/// Exact envelope propagation with optional detection noise on the
/// observed amplitudes.
#[derive(Debug, Clone)]
pub struct EnvelopeBackend {
    trap: crate::model::TrapParams,
    weights: ModeWeights,
    gamma_a: f64,
    gamma_b: f64,
    state: EnvelopeState,
    drive: DriveParams,
    interval: f64,
    next_sample: u64,
    /// Per-quadrature standard deviation of the observed ā and b̄.
    sigma: (f64, f64),
    rng: SimRng,
}

impl EnvelopeBackend {
    fn new(
        exp: &Experiment,
        init: &InitSpec,
        phase: f64,
        omega_mod: f64,
        feedback: Option<FeedbackConfig>,
    ) -> Self {
        let trap = exp.physics.trap;
        let weights = ModeWeights::from_trap(&trap);
        let (pa, pb) = weights.populations(init.e_x, init.e_y);
        let state = EnvelopeState::from_energies(pa, pb, phase, 0.0);
        let gamma = exp.physics.bath.gamma;
        let (mut gamma_a, mut gamma_b) = (gamma, gamma);
        if let Some(fb) = feedback {
            match fb.target_mode {
                Mode::X => gamma_a += fb.nominal_rate(&trap),
                Mode::Y => gamma_b += fb.nominal_rate(&trap),
            }
        }
        // A demodulation window of one sample interval gives a quadrature
        // variance S/interval on each position amplitude.
        let s = exp.noise.s_x_noise;
        let kbt = exp.kbt();
        let m = exp.physics.particle.mass;
        let quad = |omega: f64, w: f64| {
            amplitude_scale(omega, m, kbt, w) * (s / exp.sample_interval).sqrt()
        };
        Self {
            trap,
            weights,
            gamma_a,
            gamma_b,
            state,
            drive: DriveParams::off(omega_mod),
            interval: exp.sample_interval,
            next_sample: 0,
            sigma: (quad(trap.omega_x, weights.x), quad(trap.omega_y, weights.y)),
            rng: rng::stream(exp.seed, 3),
        }
    }

    pub fn state(&self) -> &EnvelopeState {
        &self.state
    }

    pub fn weights(&self) -> ModeWeights {
        self.weights
    }

    pub fn params(&self) -> EnvelopeParams {
        let mut p = EnvelopeParams::from_drive(&self.drive, &self.trap, self.gamma_a, self.gamma_b);
        if self.drive.enabled {
            p.coupling = rwa_coupling(self.drive.phi0, &self.trap);
        }
        p
    }

    fn observe(&mut self) -> EnvelopeState {
        let mut s = self.state;
        let (sa, sb) = self.sigma;
        if sa > 0.0 || sb > 0.0 {
            let mut n = || -> f64 { self.rng.sample(StandardNormal) };
            s.a += Complex64::new(n(), n()) * sa;
            s.b += Complex64::new(n(), n()) * sb;
        }
        s
    }

    fn advance_to(&mut self, t_end: f64, trace: &mut ProtocolTrace) {
        let params = self.params();
        loop {
            let ts = self.next_sample as f64 * self.interval;
            if ts > t_end {
                break;
            }
            let dt = (ts - self.state.t).max(0.0);
            self.state = propagate(&self.state, &params, dt);
            self.state.t = ts;
            let obs = self.observe();
            trace.push_state(&obs, self.weights);
            self.next_sample += 1;
        }
        if t_end > self.state.t {
            self.state = propagate(&self.state, &params, t_end - self.state.t);
            self.state.t = t_end;
        }
    }

    /// Exact time of the next e₃ extremum (`Crossing::PlaneE1E3`) or of the
    /// next north-pole approach (`Crossing::Pole`, maximum of e₃) under the
    /// current drive.
    pub fn next_crossing(&self, kind: Crossing) -> Option<f64> {
        let params = self.params();
        let omega_r = rabi_frequency(&params);
        if !(omega_r > 0.0) || params.coupling == 0.0 {
            return None;
        }
        let start = self.state;
        let slope = |t: f64| {
            let s = propagate(&start, &params, t);
            let (da, db) = derivative(&s, &params);
            let pa = s.a.norm_sqr();
            let pb = s.b.norm_sqr();
            let dpa = 2.0 * (s.a.conj() * da).re;
            let dpb = 2.0 * (s.b.conj() * db).re;
            let n = pa + pb;
            ((dpa - dpb) * n - (pa - pb) * (dpa + dpb)) / (n * n)
        };
        let period = TAU / omega_r;
        let h = period / 256.0;
        let accept = |s0: f64, s1: f64| match kind {
            Crossing::PlaneE1E3 => s0 * s1 <= 0.0 && s0 != s1,
            Crossing::Pole => s0 > 0.0 && s1 <= 0.0,
        };
        let mut t0 = 1e-9 * period;
        let mut s0 = slope(t0);
        while t0 < 2.0 * period {
            let t1 = t0 + h;
            let s1 = slope(t1);
            if accept(s0, s1) {
                let (mut lo, mut hi, slo) = (t0, t1, s0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if slope(mid) * slo > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(start.t + 0.5 * (lo + hi));
            }
            t0 = t1;
            s0 = s1;
        }
        None
    }
}

/// Full simulation plus detector: observations are Hann-window demodulations
/// of the measured x and y records, centred on the observation grid. A window
/// is an integer number (≥ 2) of beat periods `2π/ΔΩ`, so the other mode leaks
/// nothing; observations therefore trail the simulation by half a window.
#[derive(Debug, Clone)]
pub struct FullSimBackend {
    sim: Simulator,
    stride: u64,
    noise: NoiseModel,
    noise_rng: SimRng,
    xs: Vec<f64>,
    ys: Vec<f64>,
    window: usize,
    interval: f64,
    next_obs: u64,
    kbt: f64,
    weights: ModeWeights,
}

impl FullSimBackend {
    fn new(
        exp: &Experiment,
        init: &InitSpec,
        phase: f64,
        omega_mod: f64,
        feedback: Option<FeedbackConfig>,
    ) -> Result<Self> {
        let physics = exp.physics;
        let trap = physics.trap;
        let kbt = exp.kbt();
        let (dt, stride) = step_for_sample_rate(&physics, exp.noise.sample_rate, exp.dt)?;
        let start = init_with_energies(
            (init.e_x * kbt, init.e_y * kbt),
            (0.0, phase),
            &trap,
            &physics.particle,
        );
        let mut sim = Simulator::new(physics, dt, start, rng::stream(exp.seed, 1))?;
        sim.set_drive(DriveParams::off(omega_mod));
        sim.set_feedback(feedback);

        let beat = TAU / trap.delta_omega();
        let beats = (exp.sample_interval / beat).round().max(2.0);
        let window = (beats * beat * exp.noise.sample_rate).round() as usize;
        if (window as f64 / exp.noise.sample_rate) < 4.0 * TAU / trap.omega_x.min(trap.omega_y) {
            return Err(Error::Config(
                "demodulation window shorter than 4 mode periods".into(),
            ));
        }
        let mut backend = Self {
            sim,
            stride: stride as u64,
            noise: exp.noise,
            noise_rng: rng::stream(exp.seed, 4),
            xs: Vec::new(),
            ys: Vec::new(),
            window,
            interval: exp.sample_interval,
            next_obs: 0,
            kbt,
            weights: ModeWeights::from_trap(&trap),
        };
        backend.record_sample();
        // First observation whose window lies entirely after t = 0.
        let half = 0.5 * window as f64 / exp.noise.sample_rate;
        backend.next_obs = (half / exp.sample_interval).ceil() as u64;
        Ok(backend)
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    fn record_sample(&mut self) {
        let s = *self.sim.state();
        let sigma = self.noise.sample_variance().sqrt();
        let (nx, ny): (f64, f64) = if sigma > 0.0 {
            (
                self.noise_rng.sample(StandardNormal),
                self.noise_rng.sample(StandardNormal),
            )
        } else {
            (0.0, 0.0)
        };
        self.xs.push(s.x + sigma * nx);
        self.ys.push(s.y + sigma * ny);
    }

    fn advance_to(&mut self, t_end: f64, trace: &mut ProtocolTrace) -> Result<()> {
        let steps = self.sim.steps_for(t_end - self.sim.time());
        for _ in 0..steps {
            self.sim.step();
            if self.xs.len() as u64 * self.stride <= self.step_index() {
                self.record_sample();
            }
        }
        if !self.sim.state().is_finite() {
            return Err(Error::Config(format!(
                "simulation diverged at t = {}",
                self.sim.time()
            )));
        }
        self.emit(trace);
        Ok(())
    }

    fn step_index(&self) -> u64 {
        (self.sim.time() / self.sim.dt()).round() as u64
    }

    fn emit(&mut self, trace: &mut ProtocolTrace) {
        let rate = self.noise.sample_rate;
        let n = self.window;
        let phys = *self.sim.physics();
        loop {
            let t = self.next_obs as f64 * self.interval;
            let centre = (t * rate).round() as usize;
            let first = centre - n / 2;
            if first + n > self.xs.len() {
                break;
            }
            let cx = demodulate_hann(&self.xs, 0.0, rate, phys.trap.omega_x, first, n);
            let cy = demodulate_hann(&self.ys, 0.0, rate, phys.trap.omega_y, first, n);
            let state = envelope_from_amplitudes(
                cx.c,
                cy.c,
                cx.t,
                &phys.trap,
                phys.particle.mass,
                self.kbt,
                self.sim.drive().omega_mod,
                self.weights,
            );
            trace.push_state(&state, self.weights);
            self.next_obs += 1;
        }
    }

    fn energies(&self) -> (f64, f64) {
        let p = self.sim.physics();
        let s = self.sim.state();
        let m = p.particle.mass;
        (
            s.mode_energy(Mode::X, &p.trap, m) / self.kbt,
            s.mode_energy(Mode::Y, &p.trap, m) / self.kbt,
        )
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Backend {
    Envelope(EnvelopeBackend),
    FullSim(Box<FullSimBackend>),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Envelope(_) => BackendKind::Envelope,
            Backend::FullSim(_) => BackendKind::FullSim,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            Backend::Envelope(b) => b.state.t,
            Backend::FullSim(b) => b.sim.time(),
        }
    }

    pub fn drive(&self) -> DriveParams {
        match self {
            Backend::Envelope(b) => b.drive,
            Backend::FullSim(b) => b.sim.drive(),
        }
    }

    pub fn set_drive(&mut self, drive: DriveParams) {
        match self {
            Backend::Envelope(b) => b.drive = drive,
            Backend::FullSim(b) => b.sim.set_drive(drive),
        }
    }

    /// Advances to `t_end` (rounded to the integrator step for the full
    /// simulation), appending the observations completed on the way.
    pub fn advance_to(&mut self, t_end: f64, trace: &mut ProtocolTrace) -> Result<()> {
        match self {
            Backend::Envelope(b) => {
                b.advance_to(t_end, trace);
                Ok(())
            }
            Backend::FullSim(b) => b.advance_to(t_end, trace),
        }
    }

    /// True mode energies now (k_B·T₀ units), free of detection noise.
    pub fn energies(&self) -> (f64, f64) {
        match self {
            Backend::Envelope(b) => b.weights.energies(&b.state),
            Backend::FullSim(b) => b.energies(),
        }
    }

    /// Resolution of switch times (s).
    pub fn time_step(&self) -> f64 {
        match self {
            Backend::Envelope(_) => 0.0,
            Backend::FullSim(b) => b.sim.dt(),
        }
    }

    pub fn as_envelope(&self) -> Option<&EnvelopeBackend> {
        match self {
            Backend::Envelope(b) => Some(b),
            Backend::FullSim(_) => None,
        }
    }
}

/// Rabi exchange: coupling switched on at `t_on`, feedback off throughout.
pub fn run_rabi(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    t_on: f64,
    duration: f64,
) -> Result<ProtocolTrace> {
    run_switched(exp, init, drive, t_on, duration, None)
}

/// Rabi exchange with parametric feedback on one mode (normally y, with the
/// x-mode hot): coupling on at `t_on`.
pub fn run_sympathetic(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    t_on: f64,
    feedback: FeedbackConfig,
    duration: f64,
) -> Result<ProtocolTrace> {
    run_switched(exp, init, drive, t_on, duration, Some(feedback))
}

fn run_switched(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    t_on: f64,
    duration: f64,
    feedback: Option<FeedbackConfig>,
) -> Result<ProtocolTrace> {
    if !(duration >= 0.0) || !(t_on >= 0.0) {
        return Err(Error::invalid("run.duration", "times must be >= 0"));
    }
    let mut backend = exp.start(init, drive.omega_mod, feedback)?;
    let mut trace = ProtocolTrace::new(exp.backend, exp.seed);
    backend.advance_to(t_on.min(duration), &mut trace)?;
    if t_on <= duration && drive.enabled {
        backend.set_drive(drive);
        trace.log("coupling_on", t_on, backend.time());
    }
    backend.advance_to(duration, &mut trace)?;
    Ok(trace)
}

/// Fitted Rabi oscillation `offset + contrast·cos(ω_R t + phase)·e^{−decay (t − t_ref)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiFit {
    pub omega_r: f64,
    /// Phase at t = 0 (rad, in (−π, π]).
    pub phase: f64,
    /// Contrast at `t_ref`; always ≥ 0.
    pub contrast: f64,
    pub offset: f64,
    /// Amplitude decay rate (0 when not fitted).
    pub decay: f64,
    pub t_ref: f64,
    /// RMS residual relative to the contrast.
    pub residual: f64,
    pub samples: usize,
}

impl RabiFit {
    pub fn evaluate(&self, t: f64) -> f64 {
        self.offset
            + self.contrast
                * (self.omega_r * t + self.phase).cos()
                * (-self.decay * (t - self.t_ref)).exp()
    }

    pub fn period(&self) -> f64 {
        TAU / self.omega_r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiFitOptions {
    pub fit_decay: bool,
    pub max_residual: f64,
}

impl Default for RabiFitOptions {
    fn default() -> Self {
        Self {
            fit_decay: false,
            max_residual: 0.3,
        }
    }
}

struct CosineModel<'a> {
    t: &'a [f64],
    y: &'a [f64],
    t_c: f64,
    decay: bool,
}

impl LeastSquares for CosineModel<'_> {
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let g = if self.decay { p[4] } else { 0.0 };
        self.t
            .iter()
            .zip(self.y)
            .map(|(&t, &y)| {
                let u = t - self.t_c;
                p[0] + p[1] * (p[2] * u + p[3]).cos() * (-g * u).exp() - y
            })
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let np = if self.decay { 5 } else { 4 };
        let g = if self.decay { p[4] } else { 0.0 };
        let mut j = DMatrix::zeros(self.t.len(), np);
        for (i, &t) in self.t.iter().enumerate() {
            let u = t - self.t_c;
            let e = (-g * u).exp();
            let (s, c) = (p[2] * u + p[3]).sin_cos();
            j[(i, 0)] = 1.0;
            j[(i, 1)] = c * e;
            j[(i, 2)] = -p[1] * s * u * e;
            j[(i, 3)] = -p[1] * s * e;
            if self.decay {
                j[(i, 4)] = -p[1] * c * u * e;
            }
        }
        j
    }
}

/// Linear least squares of `offset + α cos(ωu) + β sin(ωu)`; returns
/// `(offset, contrast, phase, rss)`.
fn linear_cosine(t: &[f64], y: &[f64], t_c: f64, omega: f64) -> Option<(f64, f64, f64, f64)> {
    let n = t.len();
    let mut a = DMatrix::zeros(n, 3);
    for (i, &ti) in t.iter().enumerate() {
        let (s, c) = (omega * (ti - t_c)).sin_cos();
        a[(i, 0)] = 1.0;
        a[(i, 1)] = c;
        a[(i, 2)] = s;
    }
    let b = nalgebra::DVector::from_column_slice(y);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let rss = (&a * &sol - &b).norm_squared();
    // α cos + β sin = C cos(ωu + φ) with C cos φ = α, −C sin φ = β.
    let contrast = sol[1].hypot(sol[2]);
    let phase = (-sol[2]).atan2(sol[1]);
    Some((sol[0], contrast, phase, rss))
}

fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Least-squares fit of a Rabi cosine to an energy (or population-fraction)
/// series, starting from the frequency guess `omega_guess`.
pub fn estimate_rabi_phase(
    times: &[f64],
    values: &[f64],
    omega_guess: f64,
    opts: &RabiFitOptions,
) -> Result<RabiFit> {
    if times.len() != values.len() {
        return Err(Error::invalid(
            "series",
            "times and values differ in length",
        ));
    }
    if !(omega_guess > 0.0) {
        return Err(Error::invalid("omega_guess", "must be > 0"));
    }
    let n = times.len();
    let span = if n > 1 { times[n - 1] - times[0] } else { 0.0 };
    let cycles = span * omega_guess / TAU;
    if n < 8 || cycles < 2.0 * (1.0 - 1e-9) {
        return Err(Error::EstimationFailed(format!(
            "series spans {cycles:.2} Rabi cycles with {n} samples; need at least 2 cycles"
        )));
    }
    let t_c = 0.5 * (times[0] + times[n - 1]);

    // Coarse frequency scan with the linear sub-problem solved exactly.
    let mut best: Option<(f64, (f64, f64, f64, f64))> = None;
    for k in 0..=60 {
        let omega = omega_guess * (0.8f64).powf(1.0 - k as f64 / 30.0);
        if let Some(sol) = linear_cosine(times, values, t_c, omega) {
            if best.is_none_or(|(_, b)| sol.3 < b.3) {
                best = Some((omega, sol));
            }
        }
    }
    let (omega0, (offset0, contrast0, phase0, _)) =
        best.ok_or_else(|| Error::EstimationFailed("degenerate series".into()))?;

    let model = CosineModel {
        t: times,
        y: values,
        t_c,
        decay: opts.fit_decay,
    };
    let mut p0 = vec![offset0, contrast0, omega0, phase0];
    if opts.fit_decay {
        p0.push(0.0);
    }
    let lm = levenberg_marquardt(&model, &p0, &LmOptions::default());
    let p = lm.params;
    let (mut contrast, mut phase_c, omega) = (p[1], p[3], p[2]);
    if contrast < 0.0 {
        contrast = -contrast;
        phase_c += PI;
    }
    if !(omega > 0.5 * omega_guess && omega < 2.0 * omega_guess) || !omega.is_finite() {
        return Err(Error::EstimationFailed(format!(
            "fitted Rabi frequency {omega:e} rad/s left the window around {omega_guess:e} rad/s"
        )));
    }
    let rms = (lm.residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let residual = if contrast > 0.0 {
        rms / contrast
    } else {
        f64::INFINITY
    };
    if !(residual <= opts.max_residual) {
        return Err(Error::EstimationFailed(format!(
            "relative fit residual {residual:.3} exceeds {}",
            opts.max_residual
        )));
    }
    Ok(RabiFit {
        omega_r: omega,
        phase: wrap_phase(phase_c - omega * t_c),
        contrast,
        offset: p[0],
        decay: if opts.fit_decay { p[4] } else { 0.0 },
        t_ref: t_c,
        residual,
        samples: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    /// Passage of the Bloch vector through the e₁e₃-plane: any extremum of
    /// E_y under rotation about e₁.
    PlaneE1E3,
    /// North-pole passage: minimum of E_y.
    Pole,
}

/// First time after `after` at which the fitted cosine reaches the crossing.
pub fn predict_crossing(fit: &RabiFit, kind: Crossing, after: f64) -> f64 {
    let (w, phi) = (fit.omega_r, fit.phase);
    match kind {
        Crossing::PlaneE1E3 => {
            let k = ((w * after + phi) / PI).floor() + 1.0;
            (k * PI - phi) / w
        }
        Crossing::Pole => {
            let k = ((w * after + phi - PI) / TAU).floor() + 1.0;
            (PI + TAU * k - phi) / w
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchTiming {
    /// Switch times predicted from fits of the observed trace.
    Estimated,
    /// Exact switch times from the envelope state (envelope backend only).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSettings {
    /// Monitoring time per stage (s).
    pub monitor: f64,
    pub timing: SwitchTiming,
    pub fit: RabiFitOptions,
    /// Time recorded after the coupling is switched off (s).
    pub hold: f64,
}

impl TransferSettings {
    /// Monitoring `n_cycles` nominal Rabi periods of `drive` per stage.
    pub fn from_cycles(
        n_cycles: f64,
        drive: &DriveParams,
        exp: &Experiment,
        max_residual: f64,
    ) -> Self {
        let omega_r = nominal_rabi_frequency(drive, exp);
        Self {
            monitor: n_cycles * TAU / omega_r,
            timing: SwitchTiming::Estimated,
            fit: RabiFitOptions {
                fit_decay: false,
                max_residual,
            },
            hold: 0.0,
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        let exp = Experiment::from_config(cfg);
        Self::from_cycles(
            cfg.protocol.n_cycles,
            &cfg.drive,
            &exp,
            cfg.protocol.max_residual,
        )
    }
}

/// `√(A² + δ²)` with `A = φ₀ΔΩ`.
pub fn nominal_rabi_frequency(drive: &DriveParams, exp: &Experiment) -> f64 {
    let trap = &exp.physics.trap;
    coupling_rate(drive.phi0, trap).hypot(drive.omega_mod - trap.delta_omega())
}

#[derive(Debug)]
pub struct TransferOutcome {
    pub trace: ProtocolTrace,
    pub fits: Vec<RabiFit>,
    /// True mode energies at the end (k_B·T₀ units).
    pub final_energies: (f64, f64),
    /// Resolution of the executed switch times (s).
    pub timing_resolution: f64,
    /// Set when a stage failed; the trace is then partial.
    pub failure: Option<Error>,
}

impl TransferOutcome {
    pub fn final_y_fraction(&self) -> f64 {
        let (ex, ey) = self.final_energies;
        ey / (ex + ey)
    }
}

/// Cooling of the y-mode by energy transfer.
///
/// 1. Coupling on with the configured drive phase ψ (rotation about e₁);
///    monitor, fit, predict the next e₁e₃-plane crossing.
/// 2. At that time switch the phase to ψ + π/2 (rotation about e₂); monitor,
///    fit, predict the next minimum of E_y.
/// 3. Switch the coupling off there.
///
/// Feedback is off throughout.
pub fn run_energy_transfer(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    settings: &TransferSettings,
) -> Result<TransferOutcome> {
    if !drive.enabled || drive.phi0 == 0.0 {
        return Err(Error::invalid(
            "drive.phi0",
            "energy transfer needs a nonzero coupling",
        ));
    }
    if settings.timing == SwitchTiming::Oracle && exp.backend != BackendKind::Envelope {
        return Err(Error::Config(
            "oracle switch timing requires the envelope backend".into(),
        ));
    }
    let omega_guess = nominal_rabi_frequency(&drive, exp);
    let mut backend = exp.start(init, drive.omega_mod, None)?;
    let mut trace = ProtocolTrace::new(exp.backend, exp.seed);
    let mut fits = Vec::new();
    backend.advance_to(0.0, &mut trace)?;
    backend.set_drive(drive);
    trace.log("coupling_on", 0.0, backend.time());

    let stages = [
        (Crossing::PlaneE1E3, "phase_switch"),
        (Crossing::Pole, "coupling_off"),
    ];
    let mut failure = None;
    for (stage, (kind, event)) in stages.into_iter().enumerate() {
        let start = backend.time();
        backend.advance_to(start + settings.monitor, &mut trace)?;
        let now = backend.time();
        let target = match settings.timing {
            SwitchTiming::Oracle => backend
                .as_envelope()
                .and_then(|b| b.next_crossing(kind))
                .ok_or_else(|| {
                    Error::EstimationFailed(format!(
                        "stage {}: no crossing under the current drive",
                        stage + 1
                    ))
                }),
            SwitchTiming::Estimated => {
                let (t, f) = trace.y_fraction_series(start, now);
                estimate_rabi_phase(&t, &f, omega_guess, &settings.fit)
                    .map_err(|e| Error::EstimationFailed(format!("stage {}: {e}", stage + 1)))
                    .map(|fit| {
                        fits.push(fit);
                        predict_crossing(&fit, kind, now)
                    })
            }
        };
        let t_switch = match target {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        backend.advance_to(t_switch, &mut trace)?;
        let next = match kind {
            Crossing::PlaneE1E3 => drive.with_psi(drive.psi + FRAC_PI_2),
            Crossing::Pole => drive.switched_off(),
        };
        backend.set_drive(next);
        trace.log(event, t_switch, backend.time());
    }
    if failure.is_none() && settings.hold > 0.0 {
        let t = backend.time() + settings.hold;
        backend.advance_to(t, &mut trace)?;
    }
    Ok(TransferOutcome {
        trace,
        fits,
        final_energies: backend.energies(),
        timing_resolution: backend.time_step(),
        failure,
    })
}

/// Monte Carlo estimate of the energy-transfer cooling floor.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorReport {
    pub trials: usize,
    /// Monitoring time per stage (s).
    pub tau: f64,
    pub s_x_noise: f64,
    /// Mean final E_y over successful trials (k_B·T₀ units).
    pub mean: f64,
    pub stderr: f64,
    /// `½mΩ_y²S/τ` (k_B·T₀ units).
    pub predicted: f64,
    pub failures: usize,
    /// Final E_y per trial, `NaN` for failed trials.
    pub finals: Vec<f64>,
}

/// Repeats the energy-transfer protocol with per-trial seeds derived from
/// `exp.seed`, monitoring `tau` per stage. Runs on the rayon pool; results
/// do not depend on the number of threads.
pub fn cooling_floor_monte_carlo(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    tau: f64,
    trials: usize,
    fit: RabiFitOptions,
) -> Result<FloorReport> {
    if trials == 0 {
        return Err(Error::invalid("montecarlo.trials", "must be >= 1"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("montecarlo.tau", "must be > 0"));
    }
    let settings = TransferSettings {
        monitor: tau,
        timing: SwitchTiming::Estimated,
        fit,
        hold: 0.0,
    };
    let finals: Vec<Result<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let trial = exp.clone().with_seed(rng::derive_seed(exp.seed, i));
            let out = run_energy_transfer(&trial, init, drive, &settings)?;
            Ok(match out.failure {
                Some(_) => f64::NAN,
                None => out.final_energies.1,
            })
        })
        .collect();
    let finals = finals.into_iter().collect::<Result<Vec<f64>>>()?;
    let ok: Vec<f64> = finals.iter().copied().filter(|v| v.is_finite()).collect();
    let n = ok.len() as f64;
    let mean = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / n
    };
    let stderr = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    let predicted = if exp.noise.s_x_noise > 0.0 {
        cooling_limit(
            exp.physics.particle.mass,
            exp.physics.trap.omega_y,
            exp.noise.s_x_noise,
            tau,
        )?
        .e_min
            / exp.kbt()
    } else {
        0.0
    };
    Ok(FloorReport {
        trials,
        tau,
        s_x_noise: exp.noise.s_x_noise,
        mean,
        stderr,
        predicted,
        failures: trials - ok.len(),
        finals,
    })
}

/// Exponential decay rate of period-averaged energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub ci95: f64,
    pub r_squared: f64,
}

/// Fits `ln ⟨E⟩` against time, where `⟨E⟩` is averaged over consecutive
/// windows of length `period` (normally one Rabi period) within `[t0, t1]`.
pub fn fit_envelope_decay(
    times: &[f64],
    values: &[f64],
    t0: f64,
    t1: f64,
    period: f64,
) -> Result<DecayFit> {
    let mut centres = Vec::new();
    let mut logs = Vec::new();
    let mut start = t0;
    while start + period <= t1 * (1.0 + 1e-12) {
        let (mut sum, mut cnt) = (0.0, 0usize);
        for (&t, &v) in times.iter().zip(values) {
            if t >= start && t < start + period {
                sum += v;
                cnt += 1;
            }
        }
        if cnt > 0 && sum > 0.0 {
            centres.push(start + 0.5 * period);
            logs.push((sum / cnt as f64).ln());
        }
        start += period;
    }
    let fit = linear_fit(&centres, &logs)
        .ok_or_else(|| Error::FitFailed("fewer than three decay windows".into()))?;
    Ok(DecayFit {
        rate: -fit.slope,
        ci95: 1.96 * fit.slope_stderr,
        r_squared: fit.r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarkModeSweep {
    pub omega_mod: Vec<f64>,
    /// Mean observed E_y per modulation frequency (k_B·T₀ units).
    pub mean_e_y: Vec<f64>,
    pub omega_mod_peak: f64,
    /// `Ω_y − ω_mod,peak`.
    pub omega_x_estimate: f64,
}

/// Sweeps the modulation frequency while only the y-mode (feedback cooled) is
/// observed. Energy flows in from the hot x-mode when `ω_mod` matches the
/// splitting, so the peak of the mean E_y locates `Ω_x = Ω_y − ω_mod`.
pub fn dark_mode_sweep(
    exp: &Experiment,
    init: &InitSpec,
    drive: DriveParams,
    feedback: FeedbackConfig,
    omegas: &[f64],
    duration: f64,
) -> Result<DarkModeSweep> {
    if omegas.len() < 3 {
        return Err(Error::invalid(
            "sweep",
            "need at least three modulation frequencies",
        ));
    }
    let means = omegas
        .par_iter()
        .map(|&w| {
            let d = DriveParams::on(drive.phi0, w, drive.psi);
            let trace = run_sympathetic(exp, init, d, 0.0, feedback, duration)?;
            let ey = trace.energies(Mode::Y);
            Ok(ey.iter().sum::<f64>() / ey.len().max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let mut peak = omegas[k];
    if k > 0 && k + 1 < omegas.len() {
        // Parabola through the three points around the maximum.
        let (x0, x1, x2) = (omegas[k - 1], omegas[k], omegas[k + 1]);
        let (y0, y1, y2) = (means[k - 1], means[k], means[k + 1]);
        let den = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den;
        let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den;
        if a < 0.0 {
            peak = (-b / (2.0 * a)).clamp(x0, x2);
        }
    }
    Ok(DarkModeSweep {
        omega_mod: omegas.to_vec(),
        mean_e_y: means,
        omega_mod_peak: peak,
        omega_x_estimate: exp.physics.trap.omega_y - peak,
    })
}
