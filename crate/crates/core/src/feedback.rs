//! Parametric feedback on a single mode.
//!
//! A lock-in tracks the complex amplitude `C` of the target mode. From it the
//! controller builds the in-phase position and velocity estimates and sends
//!
//! ```text
//! η = s · gain · x̂ v̂ / (x_rms v_rms + ε),     s = +1 cool, −1 heat
//! ```
//!
//! to the trap stiffness. `x̂v̂` oscillates at 2Ω and the normalization makes
//! `|η| ≤ gain`, so on average the target energy obeys `dĖ = ∓(gain·Ω/2)·E`:
//! the loop acts as an added linear damping `γ_fb = gain·Ω/2`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fullsim::{init_with_energies, Physics, Simulator};
use crate::model::TrapParams;
use crate::rng;

/// Regularization of the amplitude normalization (m).
const EPS_AMPLITUDE: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    X,
    Y,
}

impl Mode {
    pub fn other(self) -> Self {
        match self {
            Mode::X => Mode::Y,
            Mode::Y => Mode::X,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::X => "x",
            Mode::Y => "y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackSign {
    Cool,
    Heat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackConfig {
    pub target_mode: Mode,
    pub gain: f64,
    pub sign: FeedbackSign,
    /// Clamp on |η|.
    pub eta_max: f64,
    /// Lock-in bandwidth (Hz).
    pub bandwidth: f64,
}

impl FeedbackConfig {
    pub fn cooling(target_mode: Mode, gain: f64) -> Self {
        Self {
            target_mode,
            gain,
            sign: FeedbackSign::Cool,
            eta_max: 0.1,
            bandwidth: 10e3,
        }
    }

    /// Gain giving an added damping `gamma_fb` on the target mode.
    pub fn gain_for_rate(gamma_fb: f64, target_mode: Mode, trap: &TrapParams) -> f64 {
        2.0 * gamma_fb / trap.omega(target_mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0) || !self.gain.is_finite() {
            return Err(Error::invalid("feedback.gain", "must be >= 0"));
        }
        if !(self.eta_max > 0.0 && self.eta_max <= 0.1) {
            return Err(Error::invalid("feedback.eta_max", "must lie in (0, 0.1]"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("feedback.bandwidth", "must be > 0"));
        }
        Ok(())
    }

    /// Added energy damping `gain·Ω/2` expected from the averaged loop
    /// (negative for heating).
    pub fn nominal_rate(&self, trap: &TrapParams) -> f64 {
        let rate = 0.5 * self.gain * trap.omega(self.target_mode);
        match self.sign {
            FeedbackSign::Cool => rate,
            FeedbackSign::Heat => -rate,
        }
    }
}

/// Stiffness signal from a lock-in amplitude estimate `c` at time `t`.
/// Returns `(η, clamped)`.
pub fn parametric_signal(c: Complex64, t: f64, omega: f64, cfg: &FeedbackConfig) -> (f64, bool) {
    if cfg.gain == 0.0 {
        return (0.0, false);
    }
    let z = c * Complex64::from_polar(1.0, -omega * t);
    let x_hat = z.re;
    let v_hat = omega * z.im;
    // x_rms·v_rms of a harmonic motion with amplitude |c|.
    let norm = 0.5 * omega * (c.norm_sqr() + EPS_AMPLITUDE * EPS_AMPLITUDE);
    let sign = match cfg.sign {
        FeedbackSign::Cool => 1.0,
        FeedbackSign::Heat => -1.0,
    };
    let eta = sign * cfg.gain * x_hat * v_hat / norm;
    if eta.abs() > cfg.eta_max {
        (eta.signum() * cfg.eta_max, true)
    } else {
        (eta, false)
    }
}

/// Closed-loop controller owned by one simulation loop.
#[derive(Debug, Clone)]
pub struct FeedbackController {
    cfg: FeedbackConfig,
    omega: f64,
    alpha: f64,
    estimate: Complex64,
    last_eta: f64,
    clamp_count: u64,
}

impl FeedbackController {
    pub fn new(cfg: FeedbackConfig, trap: &TrapParams, dt: f64) -> Self {
        Self {
            omega: trap.omega(cfg.target_mode),
            alpha: 1.0 - (-std::f64::consts::TAU * cfg.bandwidth * dt).exp(),
            cfg,
            estimate: Complex64::new(0.0, 0.0),
            last_eta: 0.0,
            clamp_count: 0,
        }
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.cfg
    }

    /// Feeds one position sample and returns the new η.
    pub fn update(&mut self, position: f64, t: f64) -> f64 {
        let mixed = Complex64::from_polar(2.0 * position, self.omega * t);
        self.estimate += (mixed - self.estimate) * self.alpha;
        let (eta, clamped) = parametric_signal(self.estimate, t, self.omega, &self.cfg);
        if clamped {
            self.clamp_count += 1;
        }
        self.last_eta = eta;
        eta
    }

    pub fn last_eta(&self) -> f64 {
        self.last_eta
    }

    /// Lock-in estimate of the complex amplitude (m).
    pub fn estimate(&self) -> Complex64 {
        self.estimate
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }
}

/// Result of a closed-loop decay experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackCalibration {
    /// Total energy decay rate of the target mode, bath plus feedback (rad/s).
    pub rate: f64,
    /// Half width of the 95 % confidence interval (rad/s).
    pub ci95: f64,
    pub r_squared: f64,
    pub samples: usize,
}

impl FeedbackCalibration {
    /// Feedback contribution alone.
    pub fn feedback_rate(&self, bath_gamma: f64) -> f64 {
        self.rate - bath_gamma
    }
}

/// Measures the closed-loop energy decay rate of the target mode.
///
/// The full simulation (thermal force disabled, drive off) starts with energy
/// `e0` (J) in the target mode; the bare-mode energy is sampled once per
/// period and `ln E` is fitted linearly.
pub fn calibrate_feedback_rate(
    physics: &Physics,
    cfg: &FeedbackConfig,
    dt: f64,
    e0: f64,
    duration: f64,
    seed: u64,
) -> Result<FeedbackCalibration> {
    cfg.validate()?;
    let mut quiet = *physics;
    quiet.thermal = false;
    let mode = cfg.target_mode;
    let energies = match mode {
        Mode::X => (e0, 0.0),
        Mode::Y => (0.0, e0),
    };
    let init = init_with_energies(energies, (0.0, 0.0), &quiet.trap, &quiet.particle);
    let mut sim = Simulator::new(quiet, dt, init, rng::stream(seed, 2))?;
    sim.set_feedback(Some(*cfg));

    let omega = quiet.trap.omega(mode);
    let per_sample = ((std::f64::consts::TAU / omega) / dt).round().max(1.0) as u64;
    let total = sim.steps_for(duration);
    // Let the lock-in settle before sampling.
    let settle = ((5.0 / (std::f64::consts::TAU * cfg.bandwidth)) / dt).ceil() as u64;

    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for k in 1..=total {
        sim.step();
        if k >= settle && k % per_sample == 0 {
            let e = sim
                .state()
                .mode_energy(mode, &quiet.trap, quiet.particle.mass);
            if e > 0.0 && e.is_finite() {
                ts.push(sim.time());
                logs.push(e.ln());
            }
        }
    }
    let fit = crate::analysis::linear_fit(&ts, &logs)
        .ok_or_else(|| Error::CalibrationFailed("too few energy samples".into()))?;
    // A flat log-energy (negligible decay) is a valid calibration even though
    // R² is meaningless there.
    if fit.r_squared < 0.9 && fit.residual_rms > 0.05 {
        return Err(Error::CalibrationFailed(format!(
            "energy decay is not exponential (R² = {:.3})",
            fit.r_squared
        )));
    }
    Ok(FeedbackCalibration {
        rate: -fit.slope,
        ci95: 1.96 * fit.slope_stderr,
        r_squared: fit.r_squared,
        samples: ts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fullsim::Physics;
    use crate::model::{hz_to_rad, BathParams, DriveParams, ParticleParams, K_B};
    use approx::assert_relative_eq;

    fn physics(gamma: f64) -> Physics {
        Physics {
            trap: TrapParams::reference(),
            particle: ParticleParams::reference(),
            bath: BathParams::new(300.0, gamma).unwrap(),
            thermal: false,
        }
    }

    fn dt(p: &Physics) -> f64 {
        p.shortest_period() / 200.0
    }

    #[test]
    fn zero_gain_gives_zero_signal() {
        let cfg = FeedbackConfig::cooling(Mode::Y, 0.0);
        for k in 0..100 {
            let (eta, _) =
                parametric_signal(Complex64::new(1e-8, 3e-9), k as f64 * 1e-7, 1e6, &cfg);
            assert_eq!(eta, 0.0);
        }
    }

    #[test]
    fn signal_is_bounded_by_gain() {
        let cfg = FeedbackConfig::cooling(Mode::Y, 0.05);
        for k in 0..1000 {
            let (eta, clamped) =
                parametric_signal(Complex64::new(1e-8, -4e-9), k as f64 * 1e-8, 8e5, &cfg);
            assert!(eta.abs() <= 0.05 + 1e-15);
            assert!(!clamped);
        }
    }

    fn run_loop(p: &Physics, cfg: FeedbackConfig, periods: f64) -> (f64, f64, Simulator) {
        let kbt = K_B * 300.0;
        let init = init_with_energies((kbt, kbt), (0.0, 0.4), &p.trap, &p.particle);
        let mut sim = Simulator::new(*p, dt(p), init, rng::from_seed(0)).unwrap();
        sim.set_feedback(Some(cfg));
        let n = sim.steps_for(periods * std::f64::consts::TAU / p.trap.omega_x);
        for _ in 0..n {
            sim.step();
        }
        let m = p.particle.mass;
        (
            sim.state().mode_energy(Mode::X, &p.trap, m) / kbt,
            sim.state().mode_energy(Mode::Y, &p.trap, m) / kbt,
            sim,
        )
    }

    #[test]
    fn cool_and_heat_signs() {
        let p = physics(0.0);
        let gain = FeedbackConfig::gain_for_rate(hz_to_rad(200.0), Mode::Y, &p.trap);
        let cool = FeedbackConfig::cooling(Mode::Y, gain);
        let heat = FeedbackConfig {
            sign: FeedbackSign::Heat,
            ..cool
        };
        let (_, ey_cool, _) = run_loop(&p, cool, 200.0);
        let (_, ey_heat, _) = run_loop(&p, heat, 200.0);
        assert!(ey_cool < 0.9, "{ey_cool}");
        assert!(ey_heat > 1.1, "{ey_heat}");
    }

    #[test]
    fn clamp_is_never_exceeded() {
        let p = physics(0.0);
        let cfg = FeedbackConfig {
            eta_max: 0.01,
            ..FeedbackConfig::cooling(Mode::Y, 0.05)
        };
        let kbt = K_B * 300.0;
        let init = init_with_energies((0.0, kbt), (0.0, 0.0), &p.trap, &p.particle);
        let mut sim = Simulator::new(p, dt(&p), init, rng::from_seed(0)).unwrap();
        sim.set_feedback(Some(cfg));
        for _ in 0..20_000 {
            let eta = sim.step();
            assert!(eta.abs() <= 0.01);
        }
        assert!(sim.feedback().unwrap().clamp_count() > 0);
    }

    #[test]
    fn energy_decreases_period_by_period() {
        let p = physics(0.0);
        let gain = FeedbackConfig::gain_for_rate(hz_to_rad(300.0), Mode::Y, &p.trap);
        let kbt = K_B * 300.0;
        let init = init_with_energies((0.0, kbt), (0.0, 0.0), &p.trap, &p.particle);
        let mut sim = Simulator::new(p, dt(&p), init, rng::from_seed(0)).unwrap();
        sim.set_feedback(Some(FeedbackConfig::cooling(Mode::Y, gain)));
        let per = sim.steps_for(std::f64::consts::TAU / p.trap.omega_y);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            for _ in 0..per {
                sim.step();
            }
            let e = sim.state().mode_energy(Mode::Y, &p.trap, p.particle.mass);
            assert!(e <= last * (1.0 + 1e-3), "{e} > {last}");
            last = e;
        }
    }

    #[test]
    fn feedback_on_y_leaves_x_alone() {
        let p = physics(0.0);
        let gain = FeedbackConfig::gain_for_rate(hz_to_rad(500.0), Mode::Y, &p.trap);
        let (ex, ey, sim) = run_loop(&p, FeedbackConfig::cooling(Mode::Y, gain), 100.0);
        assert_eq!(sim.drive(), DriveParams::off(p.trap.delta_omega()));
        assert!((ex - 1.0).abs() < 0.05, "{ex}");
        assert!(ey < 1.0);
    }

    #[test]
    fn open_loop_calibration_gives_bath_rate() {
        let p = physics(hz_to_rad(50.0));
        let cfg = FeedbackConfig::cooling(Mode::Y, 0.0);
        let cal = calibrate_feedback_rate(&p, &cfg, dt(&p), 1e-20, 5e-3, 1).unwrap();
        assert!(
            (cal.rate - p.bath.gamma).abs() <= cal.ci95.max(1e-3 * p.bath.gamma),
            "{cal:?}"
        );
    }

    #[test]
    fn calibrated_rate_grows_with_gain() {
        let p = physics(hz_to_rad(1.0));
        let mut last = 0.0;
        for gamma_fb in [50.0, 100.0, 200.0, 400.0] {
            let gain = FeedbackConfig::gain_for_rate(hz_to_rad(gamma_fb), Mode::Y, &p.trap);
            let cfg = FeedbackConfig::cooling(Mode::Y, gain);
            let cal =
                calibrate_feedback_rate(&p, &cfg, dt(&p), 1e-20, 4.0 / hz_to_rad(gamma_fb), 1)
                    .unwrap();
            assert!(cal.rate > last);
            assert_relative_eq!(
                cal.feedback_rate(p.bath.gamma),
                cfg.nominal_rate(&p.trap),
                max_relative = 0.05
            );
            last = cal.rate;
        }
    }
}
