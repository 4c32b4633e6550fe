//! Full 2D stochastic dynamics in the polarization-rotated trap.
//!
//! The particle moves in `U(x, y) = ½m[Ω_x² x′² + Ω_y² y′²]` with
//! `(x′, y′)` the coordinates rotated by `−φ(t)`, feels gas damping γ with
//! the matching thermal force (`⟨F(t)F(t′)⟩ = 2mγk_BT₀ δ(t−t′)`) and an
//! optional parametric stiffness factor `1 + η(t)` from the feedback loop.
//! Integration uses a BAOAB splitting whose O-substep is the exact
//! Ornstein–Uhlenbeck update, so the stationary distribution is correct at
//! finite step and the conservative limit is velocity Verlet.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::envelope::{EnvelopeState, ModeWeights};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackController, Mode};
use crate::model::{BathParams, Config, DriveParams, NoiseModel, ParticleParams, TrapParams};
use crate::protocols::DriveSchedule;
use crate::rng::{self, SimRng};

/// Default integrator resolution: steps per shortest oscillation period.
pub const STEPS_PER_PERIOD: f64 = 200.0;
/// Coarsest allowed step, in steps per shortest period.
pub const MIN_STEPS_PER_PERIOD: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimState {
    pub x: f64,
    pub vx: f64,
    pub y: f64,
    pub vy: f64,
    pub t: f64,
}

impl SimState {
    pub fn is_finite(&self) -> bool {
        [self.x, self.vx, self.y, self.vy, self.t]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Bare-mode energy `½m(v² + Ω²q²)` (J).
    pub fn mode_energy(&self, mode: Mode, trap: &TrapParams, mass: f64) -> f64 {
        let (q, v) = self.coordinate(mode);
        let omega = trap.omega(mode);
        0.5 * mass * (v * v + omega * omega * q * q)
    }

    pub fn coordinate(&self, mode: Mode) -> (f64, f64) {
        match mode {
            Mode::X => (self.x, self.vx),
            Mode::Y => (self.y, self.vy),
        }
    }

    /// Slowly varying complex amplitude `C` with `q(t) = Re(C e^{−iΩt})` (m).
    pub fn complex_amplitude(&self, mode: Mode, trap: &TrapParams) -> Complex64 {
        let (q, v) = self.coordinate(mode);
        let omega = trap.omega(mode);
        Complex64::new(q, v / omega) * Complex64::from_polar(1.0, omega * self.t)
    }

    /// Envelope-model state equivalent to this phase-space point, in the frame
    /// of a modulation at `omega_mod`, with populations scaled by `weights`.
    pub fn envelope(
        &self,
        trap: &TrapParams,
        mass: f64,
        kbt: f64,
        omega_mod: f64,
        weights: ModeWeights,
    ) -> EnvelopeState {
        envelope_from_amplitudes(
            self.complex_amplitude(Mode::X, trap),
            self.complex_amplitude(Mode::Y, trap),
            self.t,
            trap,
            mass,
            kbt,
            omega_mod,
            weights,
        )
    }
}

/// Envelope state from the slowly varying position amplitudes `c_x`, `c_y`
/// (m) at time `t`, in the frame of a modulation at `omega_mod`.
#[allow(clippy::too_many_arguments)]
pub fn envelope_from_amplitudes(
    c_x: Complex64,
    c_y: Complex64,
    t: f64,
    trap: &TrapParams,
    mass: f64,
    kbt: f64,
    omega_mod: f64,
    weights: ModeWeights,
) -> EnvelopeState {
    let delta = omega_mod - trap.delta_omega();
    let frame = Complex64::from_polar(1.0, -0.5 * delta * t);
    let a = c_x * amplitude_scale(trap.omega_x, mass, kbt, weights.x) * frame;
    let b = c_y * amplitude_scale(trap.omega_y, mass, kbt, weights.y) * frame.conj();
    EnvelopeState::new(a, b, t)
}

/// Factor turning a position amplitude (m) into an envelope amplitude.
pub fn amplitude_scale(omega: f64, mass: f64, kbt: f64, weight: f64) -> f64 {
    (0.5 * mass * omega * omega / (kbt * weight)).sqrt()
}

/// Instantaneous actuator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    pub drive: DriveParams,
    /// Parametric stiffness factor η (held constant over a step).
    pub eta: f64,
}

impl Controls {
    pub fn drive_only(drive: DriveParams) -> Self {
        Self { drive, eta: 0.0 }
    }
}

/// Force of the harmonic potential rotated by `phi` (exact, not small-angle).
pub fn potential_force(
    x: f64,
    y: f64,
    phi: f64,
    trap: &TrapParams,
    particle: &ParticleParams,
) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    let xr = c * x + s * y;
    let yr = -s * x + c * y;
    let kx = trap.omega_x * trap.omega_x * xr;
    let ky = trap.omega_y * trap.omega_y * yr;
    let m = particle.mass;
    (-m * (kx * c - ky * s), -m * (kx * s + ky * c))
}

/// Static physics of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub trap: TrapParams,
    pub particle: ParticleParams,
    pub bath: BathParams,
    /// Thermal force on/off; friction always acts.
    pub thermal: bool,
}

impl Physics {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            trap: cfg.trap,
            particle: cfg.particle,
            bath: cfg.bath,
            thermal: cfg.run.thermal,
        }
    }

    pub fn shortest_period(&self) -> f64 {
        TAU / self.trap.max_omega()
    }

    /// Largest admissible step.
    pub fn max_dt(&self) -> f64 {
        self.shortest_period() / MIN_STEPS_PER_PERIOD
    }

    pub fn check_dt(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0) || dt >= self.max_dt() {
            return Err(Error::Config(format!(
                "time step {dt:e} s must be positive and below period/{MIN_STEPS_PER_PERIOD} = {:e} s",
                self.max_dt()
            )));
        }
        Ok(())
    }
}

/// Integrator step and recording stride chosen so that recorded samples fall
/// exactly on the detector sample grid.
pub fn step_for_sample_rate(
    physics: &Physics,
    sample_rate: f64,
    requested: Option<f64>,
) -> Result<(f64, usize)> {
    let interval = 1.0 / sample_rate;
    let target = requested.unwrap_or(physics.shortest_period() / STEPS_PER_PERIOD);
    physics.check_dt(target)?;
    let stride = (interval / target).ceil().max(1.0);
    let dt = interval / stride;
    physics.check_dt(dt)?;
    Ok((dt, stride as usize))
}

/// One BAOAB step. `rng` supplies the thermal kicks; with `physics.thermal`
/// false it is not touched.
pub fn step<R: Rng + ?Sized>(
    state: &SimState,
    controls: &Controls,
    physics: &Physics,
    dt: f64,
    rng: &mut R,
) -> Result<SimState> {
    physics.check_dt(dt)?;
    Ok(step_unchecked(state, controls, physics, dt, rng))
}

#[inline]
fn step_unchecked<R: Rng + ?Sized>(
    state: &SimState,
    controls: &Controls,
    physics: &Physics,
    dt: f64,
    rng: &mut R,
) -> SimState {
    let m = physics.particle.mass;
    let stiffness = 1.0 + controls.eta;
    let half = 0.5 * dt;
    let force = |x: f64, y: f64, t: f64| {
        let (fx, fy) = potential_force(
            x,
            y,
            controls.drive.angle(t),
            &physics.trap,
            &physics.particle,
        );
        (fx * stiffness / m, fy * stiffness / m)
    };

    let SimState {
        mut x,
        mut vx,
        mut y,
        mut vy,
        t,
    } = *state;

    let (ax, ay) = force(x, y, t);
    vx += half * ax;
    vy += half * ay;
    x += half * vx;
    y += half * vy;

    let gamma = physics.bath.gamma;
    if gamma > 0.0 {
        let c = (-gamma * dt).exp();
        vx *= c;
        vy *= c;
        if physics.thermal && physics.bath.temperature > 0.0 {
            let sigma = ((1.0 - c * c) * physics.bath.kbt() / m).sqrt();
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            vx += sigma * nx;
            vy += sigma * ny;
        }
    }

    x += half * vx;
    y += half * vy;
    let (ax, ay) = force(x, y, t + dt);
    vx += half * ax;
    vy += half * ay;

    SimState {
        x,
        vx,
        y,
        vy,
        t: t + dt,
    }
}

/// Stateful simulation loop: physics, actuator settings, feedback controller
/// and a private RNG stream.
#[derive(Debug, Clone)]
pub struct Simulator {
    physics: Physics,
    dt: f64,
    state: SimState,
    drive: DriveParams,
    feedback: Option<FeedbackController>,
    rng: SimRng,
    steps: u64,
    t_origin: f64,
}

impl Simulator {
    pub fn new(physics: Physics, dt: f64, init: SimState, rng: SimRng) -> Result<Self> {
        physics.check_dt(dt)?;
        if !init.is_finite() {
            return Err(Error::invalid("init", "non-finite initial state"));
        }
        Ok(Self {
            physics,
            dt,
            state: init,
            drive: DriveParams::off(physics.trap.delta_omega()),
            feedback: None,
            rng,
            steps: 0,
            t_origin: init.t,
        })
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.state.t
    }

    pub fn drive(&self) -> DriveParams {
        self.drive
    }

    pub fn set_drive(&mut self, drive: DriveParams) {
        self.drive = drive;
    }

    pub fn set_feedback(&mut self, cfg: Option<FeedbackConfig>) {
        self.feedback = cfg.map(|c| FeedbackController::new(c, &self.physics.trap, self.dt));
    }

    pub fn feedback(&self) -> Option<&FeedbackController> {
        self.feedback.as_ref()
    }

    /// Advances one step; returns the η applied.
    pub fn step(&mut self) -> f64 {
        let eta = match self.feedback.as_mut() {
            Some(fb) => {
                let (q, _) = self.state.coordinate(fb.config().target_mode);
                fb.update(q, self.state.t)
            }
            None => 0.0,
        };
        let controls = Controls {
            drive: self.drive,
            eta,
        };
        let mut next = step_unchecked(
            &self.state,
            &controls,
            &self.physics,
            self.dt,
            &mut self.rng,
        );
        self.steps += 1;
        // Time from the step counter; no accumulated rounding.
        next.t = self.t_origin + self.steps as f64 * self.dt;
        self.state = next;
        eta
    }

    /// Number of steps closest to `duration`.
    pub fn steps_for(&self, duration: f64) -> u64 {
        (duration / self.dt).round().max(0.0) as u64
    }
}

/// Uniformly sampled simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Spacing between records (s).
    pub interval: f64,
    /// Integrator step (s).
    pub dt: f64,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<SimState>,
    /// η at each record when a feedback loop was active.
    pub eta: Option<Vec<f64>>,
    /// Steps on which the feedback signal hit its clamp.
    pub clamp_count: u64,
}

impl Trajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|s| s.t)
    }

    pub fn positions(&self, mode: Mode) -> Vec<f64> {
        self.records.iter().map(|s| s.coordinate(mode).0).collect()
    }
}

/// Everything `run` needs besides the schedule.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub physics: Physics,
    pub dt: f64,
    /// Record every `stride` integrator steps.
    pub stride: usize,
    pub feedback: Option<FeedbackConfig>,
    pub config_hash: String,
}

impl RunSetup {
    /// Setup whose records land on the detector sample grid of `cfg.noise`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let physics = Physics::from_config(cfg);
        let (dt, stride) = step_for_sample_rate(&physics, cfg.noise.sample_rate, cfg.run.dt)?;
        let feedback = (cfg.feedback.gain > 0.0).then_some(cfg.feedback);
        Ok(Self {
            physics,
            dt,
            stride,
            feedback,
            config_hash: cfg.hash(),
        })
    }
}

/// Runs the full simulation from `init` for `duration` under a drive schedule.
/// Identical inputs give bit-identical trajectories.
pub fn run(
    setup: &RunSetup,
    schedule: &DriveSchedule,
    init: SimState,
    duration: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut sim = Simulator::new(setup.physics, setup.dt, init, rng::stream(seed, 1))?;
    sim.set_feedback(setup.feedback);
    let total = sim.steps_for(duration);
    let stride = setup.stride.max(1) as u64;

    let mut records = Vec::with_capacity((total / stride + 1) as usize);
    let mut eta_log = setup
        .feedback
        .map(|_| Vec::with_capacity(records.capacity()));
    records.push(*sim.state());
    if let Some(log) = eta_log.as_mut() {
        log.push(0.0);
    }
    for k in 1..=total {
        sim.set_drive(schedule.drive_at(sim.time(), setup.physics.trap.delta_omega()));
        let eta = sim.step();
        if k % stride == 0 {
            if !sim.state().is_finite() {
                return Err(Error::Config(format!(
                    "simulation diverged at t = {}",
                    sim.time()
                )));
            }
            records.push(*sim.state());
            if let Some(log) = eta_log.as_mut() {
                log.push(eta);
            }
        }
    }
    Ok(Trajectory {
        interval: setup.dt * stride as f64,
        dt: setup.dt,
        seed,
        config_hash: setup.config_hash.clone(),
        records,
        eta: eta_log,
        clamp_count: sim.feedback().map_or(0, |f| f.clamp_count()),
    })
}

/// Samples each mode from its Boltzmann distribution at the given temperature.
pub fn init_thermal<R: Rng + ?Sized>(
    temps: (f64, f64),
    trap: &TrapParams,
    particle: &ParticleParams,
    rng: &mut R,
) -> SimState {
    let m = particle.mass;
    let mut draw = |temp: f64, omega: f64| -> (f64, f64) {
        if temp <= 0.0 {
            return (0.0, 0.0);
        }
        let kt = crate::model::K_B * temp;
        let q: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        (q * (kt / (m * omega * omega)).sqrt(), v * (kt / m).sqrt())
    };
    let (x, vx) = draw(temps.0, trap.omega_x);
    let (y, vy) = draw(temps.1, trap.omega_y);
    SimState {
        x,
        vx,
        y,
        vy,
        t: 0.0,
    }
}

/// Deterministic start: exact mode energies (J) and complex-amplitude phases,
/// `q = X cos θ`, `v = ΩX sin θ`.
pub fn init_with_energies(
    energies: (f64, f64),
    phases: (f64, f64),
    trap: &TrapParams,
    particle: &ParticleParams,
) -> SimState {
    let m = particle.mass;
    let amp = |e: f64, omega: f64| (2.0 * e.max(0.0) / (m * omega * omega)).sqrt();
    let ax = amp(energies.0, trap.omega_x);
    let ay = amp(energies.1, trap.omega_y);
    SimState {
        x: ax * phases.0.cos(),
        vx: trap.omega_x * ax * phases.0.sin(),
        y: ay * phases.1.cos(),
        vy: trap.omega_y * ay * phases.1.sin(),
        t: 0.0,
    }
}

/// Detector output: positions on a uniform grid plus white Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredRecord {
    pub t0: f64,
    pub sample_rate: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub labels: [&'static str; 2],
}

impl MeasuredRecord {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn channel(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::X => &self.x,
            Mode::Y => &self.y,
        }
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.sample_rate
    }
}

/// Resamples a trajectory at the detector rate (linear interpolation, exact
/// when the grids coincide) and adds noise of one-sided PSD `s_x_noise`.
pub fn measure<R: Rng + ?Sized>(
    traj: &Trajectory,
    noise: &NoiseModel,
    rng: &mut R,
) -> MeasuredRecord {
    let recs = &traj.records;
    let labels = ["x_m", "y_m"];
    if recs.is_empty() {
        return MeasuredRecord {
            t0: 0.0,
            sample_rate: noise.sample_rate,
            x: Vec::new(),
            y: Vec::new(),
            labels,
        };
    }
    let t0 = recs[0].t;
    let span = recs[recs.len() - 1].t - t0;
    let n = (span * noise.sample_rate * (1.0 + 1e-12)).floor() as usize + 1;
    let sigma = noise.sample_variance().sqrt();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let pos = (k as f64 / noise.sample_rate) / traj.interval;
        let i = (pos.floor() as usize).min(recs.len() - 1);
        let frac = pos - i as f64;
        let (px, py) = if frac.abs() < 1e-9 || i + 1 >= recs.len() {
            (recs[i].x, recs[i].y)
        } else {
            let (a, b) = (&recs[i], &recs[i + 1]);
            (a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y))
        };
        let (nx, ny): (f64, f64) = if sigma > 0.0 {
            (rng.sample(StandardNormal), rng.sample(StandardNormal))
        } else {
            (0.0, 0.0)
        };
        x.push(px + sigma * nx);
        y.push(py + sigma * ny);
    }
    MeasuredRecord {
        t0,
        sample_rate: noise.sample_rate,
        x,
        y,
        labels,
    }
}

/// One demodulated window: centre time and complex amplitude `c` (m) with
/// `q(t) ≈ Re(c e^{−iω_ref t})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub t: f64,
    pub c: Complex64,
}

/// Windowed quadrature demodulation `c = (2/N) Σ q_n e^{iω t_n}` over
/// consecutive, non-overlapping windows of length `window`.
pub fn demodulate(
    samples: &[f64],
    t0: f64,
    sample_rate: f64,
    omega_ref: f64,
    window: f64,
) -> Result<Vec<Quadrature>> {
    demodulate_with_hop(samples, t0, sample_rate, omega_ref, window, window)
}

/// As [`demodulate`] with windows starting every `hop` seconds.
pub fn demodulate_with_hop(
    samples: &[f64],
    t0: f64,
    sample_rate: f64,
    omega_ref: f64,
    window: f64,
    hop: f64,
) -> Result<Vec<Quadrature>> {
    let period = TAU / omega_ref;
    if !(window >= 4.0 * period) {
        return Err(Error::Config(format!(
            "demodulation window {window:e} s must span at least 4 reference periods ({:e} s)",
            4.0 * period
        )));
    }
    let n = (window * sample_rate).round() as usize;
    let step = ((hop * sample_rate).round() as usize).max(1);
    if n < 2 {
        return Err(Error::Config(
            "demodulation window shorter than two samples".into(),
        ));
    }
    let dt = 1.0 / sample_rate;
    let rot = Complex64::from_polar(1.0, omega_ref * dt);
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= samples.len() {
        let ts = t0 + start as f64 * dt;
        let mut phasor = Complex64::from_polar(1.0, omega_ref * ts);
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &q) in samples[start..start + n].iter().enumerate() {
            if k % 1024 == 0 {
                // Re-anchor to keep the phasor recursion exact.
                phasor = Complex64::from_polar(1.0, omega_ref * (ts + k as f64 * dt));
            }
            acc += phasor * q;
            phasor *= rot;
        }
        out.push(Quadrature {
            t: ts + 0.5 * (n - 1) as f64 * dt,
            c: acc * (2.0 / n as f64),
        });
        start += step;
    }
    Ok(out)
}

/// Hann-weighted demodulation of `samples[start..start + n]`, normalized so a
/// steady tone at `omega_ref` returns its exact complex amplitude. Tones offset
/// by an integer multiple `k ≥ 2` of `sample_rate / n` are rejected exactly.
pub fn demodulate_hann(
    samples: &[f64],
    t0: f64,
    sample_rate: f64,
    omega_ref: f64,
    start: usize,
    n: usize,
) -> Quadrature {
    let dt = 1.0 / sample_rate;
    let ts = t0 + start as f64 * dt;
    let rot = Complex64::from_polar(1.0, omega_ref * dt);
    let mut phasor = Complex64::from_polar(1.0, omega_ref * ts);
    let mut acc = Complex64::new(0.0, 0.0);
    let mut norm = 0.0;
    for (k, &q) in samples[start..start + n].iter().enumerate() {
        if k % 1024 == 0 {
            phasor = Complex64::from_polar(1.0, omega_ref * (ts + k as f64 * dt));
        }
        let w = 0.5 - 0.5 * (TAU * (k as f64 + 0.5) / n as f64).cos();
        acc += phasor * (w * q);
        norm += w;
        phasor *= rot;
    }
    Quadrature {
        t: ts + 0.5 * (n - 1) as f64 * dt,
        c: acc * (2.0 / norm),
    }
}

/// Demodulates one channel of a measured record.
pub fn demodulate_record(
    record: &MeasuredRecord,
    mode: Mode,
    omega_ref: f64,
    window: f64,
) -> Result<Vec<Quadrature>> {
    demodulate(
        record.channel(mode),
        record.t0,
        record.sample_rate,
        omega_ref,
        window,
    )
}
