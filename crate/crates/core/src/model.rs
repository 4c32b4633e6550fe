//! Physical parameters, unit conventions and configuration.
//!
//! Internally every frequency is angular (rad/s) and every quantity is SI.
//! Users speak ordinary frequency: the config file takes kHz/Hz/MHz values
//! and [`validate_config`] converts them once.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackSign, Mode};
use crate::protocols::BackendKind;
use crate::rng::DEFAULT_SEED;

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;

/// Default density of fused silica (kg/m³).
pub const SILICA_DENSITY: f64 = 2200.0;
/// Default bath temperature (K).
pub const ROOM_TEMPERATURE: f64 = 300.0;

#[inline]
pub fn hz_to_rad(f: f64) -> f64 {
    2.0 * PI * f
}

#[inline]
pub fn rad_to_hz(omega: f64) -> f64 {
    omega / (2.0 * PI)
}

/// Mass of a homogeneous sphere.
pub fn mass_from_geometry(diameter: f64, density: f64) -> Result<f64> {
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(Error::invalid(
            "diameter",
            format!("must be > 0, got {diameter}"),
        ));
    }
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::invalid(
            "density",
            format!("must be > 0, got {density}"),
        ));
    }
    Ok(density * (PI / 6.0) * diameter.powi(3))
}

/// Temperature of a single motional quantum, ħΩ/k_B.
pub fn ground_state_temperature(omega: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::invalid("omega", format!("must be > 0, got {omega}")));
    }
    Ok(HBAR * omega / K_B)
}

/// Mode coupling rate `A = φ₀ ΔΩ` produced by a polarization modulation of
/// amplitude `phi0`.
pub fn coupling_rate(phi0: f64, trap: &TrapParams) -> f64 {
    phi0 * trap.delta_omega()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    pub diameter: f64,
    pub density: f64,
    pub mass: f64,
}

impl ParticleParams {
    pub fn new(diameter: f64, density: f64) -> Result<Self> {
        let mass = mass_from_geometry(diameter, density)?;
        Ok(Self {
            diameter,
            density,
            mass,
        })
    }

    /// 136 nm silica sphere.
    pub fn reference() -> Self {
        Self::new(136e-9, SILICA_DENSITY).expect("valid constants")
    }
}

/// Bare trap eigenfrequencies (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapParams {
    pub omega_x: f64,
    pub omega_y: f64,
}

impl TrapParams {
    pub fn new(omega_x: f64, omega_y: f64) -> Result<Self> {
        if !(omega_x > 0.0) || !omega_x.is_finite() {
            return Err(Error::invalid("trap.omega_x", "must be > 0"));
        }
        if !(omega_y > 0.0) || !omega_y.is_finite() {
            return Err(Error::invalid("trap.omega_y", "must be > 0"));
        }
        if omega_x == omega_y {
            return Err(Error::invalid(
                "trap.omega_y",
                "degenerate trap: omega_x == omega_y",
            ));
        }
        Ok(Self { omega_x, omega_y })
    }

    /// 2π·115 kHz and 2π·141 kHz.
    pub fn reference() -> Self {
        Self::new(hz_to_rad(115e3), hz_to_rad(141e3)).expect("valid constants")
    }

    #[inline]
    pub fn delta_omega(&self) -> f64 {
        self.omega_y - self.omega_x
    }

    pub fn omega(&self, mode: Mode) -> f64 {
        match mode {
            Mode::X => self.omega_x,
            Mode::Y => self.omega_y,
        }
    }

    pub fn max_omega(&self) -> f64 {
        self.omega_x.max(self.omega_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathParams {
    /// Bath temperature T₀ (K).
    pub temperature: f64,
    /// Energy damping rate γ (rad/s).
    pub gamma: f64,
}

impl BathParams {
    pub fn new(temperature: f64, gamma: f64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::invalid("bath.temperature", "must be >= 0"));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::invalid("bath.gamma", "must be >= 0"));
        }
        Ok(Self { temperature, gamma })
    }

    /// k_B·T₀ (J).
    pub fn kbt(&self) -> f64 {
        K_B * self.temperature
    }
}

/// White position-detection noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// One-sided position-noise PSD (m²/Hz).
    pub s_x_noise: f64,
    /// Detector sample rate (Hz).
    pub sample_rate: f64,
}

impl NoiseModel {
    pub fn new(s_x_noise: f64, sample_rate: f64, trap: &TrapParams) -> Result<Self> {
        if !(s_x_noise >= 0.0) || !s_x_noise.is_finite() {
            return Err(Error::invalid("noise.s_x_noise", "must be >= 0"));
        }
        let nyquist = 2.0 * rad_to_hz(trap.max_omega());
        if !(sample_rate > nyquist) || !sample_rate.is_finite() {
            return Err(Error::invalid(
                "noise.sample_rate",
                format!("must exceed twice the highest mode frequency ({nyquist} Hz)"),
            ));
        }
        Ok(Self {
            s_x_noise,
            sample_rate,
        })
    }

    /// Variance of a single detector sample, `S·f_s/2`.
    pub fn sample_variance(&self) -> f64 {
        self.s_x_noise * self.sample_rate / 2.0
    }
}

/// Polarization-angle modulation `φ(t) = φ₀ cos(ω_mod t − ψ)`.
///
/// The sign of `ψ` is chosen so that the drive phase enters the envelope
/// coupling as `−A e^{∓iψ}`: `ψ = 0` rotates the Bloch vector about e₁ and
/// `ψ = π/2` about e₂ in both backends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveParams {
    pub phi0: f64,
    pub omega_mod: f64,
    pub psi: f64,
    pub enabled: bool,
}

impl DriveParams {
    pub fn on(phi0: f64, omega_mod: f64, psi: f64) -> Self {
        Self {
            phi0,
            omega_mod,
            psi,
            enabled: true,
        }
    }

    /// Drive switched off; `omega_mod` is kept as the rotating-frame reference.
    pub fn off(omega_mod: f64) -> Self {
        Self {
            phi0: 0.0,
            omega_mod,
            psi: 0.0,
            enabled: false,
        }
    }

    /// Resonant drive (`ω_mod = ΔΩ`).
    pub fn resonant(phi0: f64, trap: &TrapParams) -> Self {
        Self::on(phi0, trap.delta_omega(), 0.0)
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.psi = psi;
        self
    }

    pub fn switched_off(self) -> Self {
        Self::off(self.omega_mod)
    }

    pub fn validate(&self, max_phi0: f64) -> Result<()> {
        if !self.phi0.is_finite() || self.phi0.abs() >= max_phi0 {
            return Err(Error::invalid(
                "drive.phi0",
                format!("|phi0| must be < {max_phi0} (small-angle regime)"),
            ));
        }
        if self.enabled && !(self.omega_mod > 0.0) {
            return Err(Error::invalid(
                "drive.omega_mod",
                "must be > 0 when enabled",
            ));
        }
        if !self.psi.is_finite() {
            return Err(Error::invalid("drive.psi", "must be finite"));
        }
        Ok(())
    }

    /// Instantaneous polarization angle.
    #[inline]
    pub fn angle(&self, t: f64) -> f64 {
        if self.enabled {
            self.phi0 * (self.omega_mod * t - self.psi).cos()
        } else {
            0.0
        }
    }
}

/// Initial mode energies (k_B·T₀ units) and relative phase (random if `None`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub e_x: f64,
    pub e_y: f64,
    pub phase: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub duration: f64,
    /// Time the coupling drive is switched on (Rabi experiment).
    pub t_on: f64,
    pub backend: BackendKind,
    /// Integrator step for the full simulation; `None` selects the default.
    pub dt: Option<f64>,
    pub thermal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolSettings {
    /// Rabi cycles monitored per protocol stage.
    pub n_cycles: f64,
    /// Spacing of energy observations, equal to the demodulation window.
    pub sample_interval: f64,
    /// Relative fit residual above which estimation fails.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitSettings {
    pub q_factor: f64,
    /// Observation time; `None` means `Q/Ω`.
    pub tau: Option<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSettings {
    pub trials: usize,
    /// Monitoring time per protocol stage.
    pub tau: f64,
}

pub type RawConfig = BTreeMap<String, String>;

/// Validated configuration. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub particle: ParticleParams,
    pub trap: TrapParams,
    pub bath: BathParams,
    pub drive: DriveParams,
    pub max_phi0: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    pub init: InitSpec,
    pub run: RunSpec,
    pub feedback: FeedbackConfig,
    pub protocol: ProtocolSettings,
    pub limit: LimitSettings,
    pub montecarlo: MonteCarloSettings,
    canonical: RawConfig,
}

/// Documented keys with their defaults (`None`: optional, resolved at validation).
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("particle.diameter_nm", Some("136")),
    ("particle.density_kg_m3", Some("2200")),
    ("trap.f_x_khz", Some("115")),
    ("trap.f_y_khz", Some("141")),
    ("bath.temperature_k", Some("300")),
    ("bath.gamma_hz", Some("0.01")),
    ("drive.phi0_rad", Some("0.0115")),
    ("drive.f_mod_khz", None),
    ("drive.psi_rad", Some("0")),
    ("drive.t_on_ms", Some("0")),
    ("drive.max_phi0_rad", Some("0.7853981633974483")),
    ("noise.s_x_pm2_per_hz", Some("0")),
    ("noise.sample_rate_mhz", Some("2")),
    ("rng.seed", None),
    ("init.e_x_kbt", Some("1.5")),
    ("init.e_y_kbt", Some("0.25")),
    ("init.phase_rad", Some("random")),
    ("run.duration_ms", Some("20")),
    ("run.backend", Some("envelope")),
    ("sim.dt_ns", Some("auto")),
    ("sim.thermal", Some("true")),
    ("feedback.mode", Some("y")),
    ("feedback.sign", Some("cool")),
    ("feedback.gain", Some("0")),
    ("feedback.eta_max", Some("0.1")),
    ("feedback.bandwidth_khz", Some("10")),
    ("protocol.n_cycles", Some("3")),
    ("protocol.sample_interval_us", Some("100")),
    ("protocol.max_residual", Some("0.3")),
    ("limit.q_factor", Some("1e9")),
    ("limit.tau_s", Some("auto")),
    ("limit.mode", Some("y")),
    ("montecarlo.trials", Some("100")),
    ("montecarlo.tau_ms", Some("10")),
];

/// Parses the flat `key = value` format. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value",
                lineno + 1
            )));
        }
        if raw.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
    }
    Ok(raw)
}

/// Applies a `key=value` override on top of a raw config.
pub fn apply_override(raw: &mut RawConfig, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    raw.insert(key.trim().to_string(), value.trim().to_string());
    Ok(())
}

struct Fields<'a> {
    raw: &'a RawConfig,
    canonical: RawConfig,
}

impl Fields<'_> {
    fn text(&mut self, key: &str) -> Option<String> {
        let default = KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d);
        self.raw
            .get(key)
            .cloned()
            .or_else(|| default.map(str::to_string))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let text = self
            .text(key)
            .ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
        let value: f64 = text
            .parse()
            .map_err(|_| Error::invalid(key, format!("`{text}` is not a number")))?;
        if !value.is_finite() {
            return Err(Error::invalid(key, "must be finite"));
        }
        self.canonical.insert(key.to_string(), format!("{value}"));
        Ok(value)
    }

    /// Number or the literal `auto`/`random`.
    fn optional_f64(&mut self, key: &str, word: &str) -> Result<Option<f64>> {
        match self.text(key) {
            Some(t) if t == word => {
                self.canonical.insert(key.to_string(), word.to_string());
                Ok(None)
            }
            None => Ok(None),
            Some(_) => self.f64(key).map(Some),
        }
    }

    fn word(&mut self, key: &str, allowed: &[&str]) -> Result<String> {
        let text = self
            .text(key)
            .ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
        if !allowed.contains(&text.as_str()) {
            return Err(Error::invalid(
                key,
                format!("expected one of {allowed:?}, got `{text}`"),
            ));
        }
        self.canonical.insert(key.to_string(), text.clone());
        Ok(text)
    }

    fn positive(&mut self, key: &str) -> Result<f64> {
        let v = self.f64(key)?;
        if !(v > 0.0) {
            return Err(Error::invalid(key, format!("must be > 0, got {v}")));
        }
        Ok(v)
    }

    fn nonnegative(&mut self, key: &str) -> Result<f64> {
        let v = self.f64(key)?;
        if !(v >= 0.0) {
            return Err(Error::invalid(key, format!("must be >= 0, got {v}")));
        }
        Ok(v)
    }
}

/// Checks every key and invariant, fills defaults and converts to internal units.
pub fn validate_config(raw: &RawConfig) -> Result<Config> {
    if let Some(unknown) = raw
        .keys()
        .find(|k| !KEYS.iter().any(|(known, _)| known == k))
    {
        return Err(Error::Config(format!("unknown key `{unknown}`")));
    }
    let mut f = Fields {
        raw,
        canonical: RawConfig::new(),
    };

    let diameter = f.positive("particle.diameter_nm")? * 1e-9;
    let density = f.positive("particle.density_kg_m3")?;
    let particle = ParticleParams::new(diameter, density)?;

    let fx = f.positive("trap.f_x_khz")? * 1e3;
    let fy = f.positive("trap.f_y_khz")? * 1e3;
    if fx == fy {
        return Err(Error::invalid(
            "trap.f_y_khz",
            "degenerate trap: f_x == f_y",
        ));
    }
    let trap = TrapParams::new(hz_to_rad(fx), hz_to_rad(fy))?;

    let temperature = f.nonnegative("bath.temperature_k")?;
    let gamma = hz_to_rad(f.nonnegative("bath.gamma_hz")?);
    let bath = BathParams::new(temperature, gamma)?;

    let phi0 = f.f64("drive.phi0_rad")?;
    let f_mod_khz = match f.raw.get("drive.f_mod_khz") {
        Some(_) => f.positive("drive.f_mod_khz")?,
        None => {
            let resonant = (fy - fx) / 1e3;
            f.canonical
                .insert("drive.f_mod_khz".into(), format!("{resonant}"));
            resonant
        }
    };
    let psi = f.f64("drive.psi_rad")?;
    let t_on = f.nonnegative("drive.t_on_ms")? * 1e-3;
    let max_phi0 = f.positive("drive.max_phi0_rad")?;
    let drive = DriveParams::on(phi0, hz_to_rad(f_mod_khz * 1e3), psi);
    drive.validate(max_phi0)?;

    let s_x = f.nonnegative("noise.s_x_pm2_per_hz")? * 1e-24;
    let sample_rate = f.positive("noise.sample_rate_mhz")? * 1e6;
    let noise = NoiseModel::new(s_x, sample_rate, &trap)?;

    let seed = match f.raw.get("rng.seed") {
        Some(text) => text
            .parse::<u64>()
            .map_err(|_| Error::invalid("rng.seed", format!("`{text}` is not a u64")))?,
        None => DEFAULT_SEED,
    };
    f.canonical.insert("rng.seed".into(), seed.to_string());

    let init = InitSpec {
        e_x: f.nonnegative("init.e_x_kbt")?,
        e_y: f.nonnegative("init.e_y_kbt")?,
        phase: f.optional_f64("init.phase_rad", "random")?,
    };

    let duration = f.nonnegative("run.duration_ms")? * 1e-3;
    let backend = match f.word("run.backend", &["envelope", "fullsim"])?.as_str() {
        "fullsim" => BackendKind::FullSim,
        _ => BackendKind::Envelope,
    };
    let dt = f.optional_f64("sim.dt_ns", "auto")?.map(|ns| ns * 1e-9);
    if let Some(dt) = dt {
        if !(dt > 0.0) {
            return Err(Error::invalid("sim.dt_ns", "must be > 0"));
        }
    }
    let thermal = f.word("sim.thermal", &["true", "false"])? == "true";
    let run = RunSpec {
        duration,
        t_on,
        backend,
        dt,
        thermal,
    };

    let mode = parse_mode(&f.word("feedback.mode", &["x", "y"])?);
    let sign = match f.word("feedback.sign", &["cool", "heat"])?.as_str() {
        "heat" => FeedbackSign::Heat,
        _ => FeedbackSign::Cool,
    };
    let feedback = FeedbackConfig {
        target_mode: mode,
        gain: f.nonnegative("feedback.gain")?,
        sign,
        eta_max: f.positive("feedback.eta_max")?,
        bandwidth: f.positive("feedback.bandwidth_khz")? * 1e3,
    };
    feedback.validate()?;

    let protocol = ProtocolSettings {
        n_cycles: f.positive("protocol.n_cycles")?,
        sample_interval: f.positive("protocol.sample_interval_us")? * 1e-6,
        max_residual: f.positive("protocol.max_residual")?,
    };

    let limit = LimitSettings {
        q_factor: f.positive("limit.q_factor")?,
        tau: f.optional_f64("limit.tau_s", "auto")?,
        mode: parse_mode(&f.word("limit.mode", &["x", "y"])?),
    };
    if let Some(tau) = limit.tau {
        if !(tau > 0.0) {
            return Err(Error::invalid("limit.tau_s", "must be > 0"));
        }
    }

    let trials = f.positive("montecarlo.trials")?;
    if trials.fract() != 0.0 {
        return Err(Error::invalid("montecarlo.trials", "must be an integer"));
    }
    let montecarlo = MonteCarloSettings {
        trials: trials as usize,
        tau: f.positive("montecarlo.tau_ms")? * 1e-3,
    };

    Ok(Config {
        particle,
        trap,
        bath,
        drive,
        max_phi0,
        noise,
        seed,
        init,
        run,
        feedback,
        protocol,
        limit,
        montecarlo,
        canonical: f.canonical,
    })
}

fn parse_mode(s: &str) -> Mode {
    if s == "x" {
        Mode::X
    } else {
        Mode::Y
    }
}

impl Config {
    /// Reference parameter set with every default applied.
    pub fn reference() -> Self {
        validate_config(&RawConfig::new()).expect("defaults are valid")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        validate_config(&parse_config_text(text)?)
    }

    /// Canonical user-facing key/value form; validating it yields `self` again.
    pub fn to_raw(&self) -> RawConfig {
        self.canonical.clone()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.canonical {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the rendered config, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn kbt(&self) -> f64 {
        self.bath.kbt()
    }

    pub fn coupling_rate(&self) -> f64 {
        coupling_rate(self.drive.phi0, &self.trap)
    }

    pub fn detuning(&self) -> f64 {
        self.drive.omega_mod - self.trap.delta_omega()
    }

    /// Copy with one key overridden (re-validated).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.to_raw();
        raw.insert(key.to_string(), value.to_string());
        validate_config(&raw)
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::reference()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_particle_mass() {
        let m = mass_from_geometry(136e-9, 2200.0).unwrap();
        // 2200 · π/6 · (136e-9)³
        assert_relative_eq!(m, 2.90e-18, max_relative = 5e-3);
    }

    #[test]
    fn mass_rejects_degenerate_input() {
        assert!(mass_from_geometry(0.0, 2200.0).is_err());
        assert!(mass_from_geometry(1e-7, -1.0).is_err());
        assert!(mass_from_geometry(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn mass_scaling_symmetry() {
        let a = mass_from_geometry(2.0e-7, 1000.0).unwrap();
        let b = mass_from_geometry(1.0e-7, 8000.0).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-15);
    }

    #[test]
    fn ground_state_temperature_values() {
        let t = ground_state_temperature(hz_to_rad(141e3)).unwrap();
        assert_relative_eq!(t, 6.77e-6, max_relative = 1e-2);
        let t2 = ground_state_temperature(2.0 * hz_to_rad(141e3)).unwrap();
        assert_relative_eq!(t2, 2.0 * t, max_relative = 1e-15);
        assert_relative_eq!(
            ground_state_temperature(K_B / HBAR).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert!(ground_state_temperature(0.0).is_err());
    }

    #[test]
    fn coupling_rate_examples() {
        let trap = TrapParams::reference();
        assert_eq!(coupling_rate(0.0, &trap), 0.0);
        assert_relative_eq!(
            coupling_rate(0.01, &trap),
            hz_to_rad(260.0),
            max_relative = 1e-12
        );
        assert_eq!(coupling_rate(-0.01, &trap), -coupling_rate(0.01, &trap));
    }

    #[test]
    fn config_converts_khz_to_rad() {
        let cfg = Config::from_text("trap.f_x_khz = 115\n").unwrap();
        assert_eq!(cfg.trap.omega_x, 2.0 * PI * 115e3);
        assert_eq!(cfg.bath.temperature, 300.0);
        assert_eq!(cfg.particle.density, 2200.0);
    }

    #[test]
    fn config_rejects_degenerate_trap() {
        let err = Config::from_text("trap.f_x_khz = 120\ntrap.f_y_khz = 120").unwrap_err();
        assert!(err.to_string().contains("trap.f_y_khz"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_keys_and_syntax() {
        assert!(matches!(
            Config::from_text("trap.f_z_khz = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::from_text("trap.f_x_khz 115"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::from_text("rng.seed = 1\nrng.seed = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_names_failing_field() {
        let err = Config::from_text("bath.temperature_k = -3").unwrap_err();
        assert!(err.to_string().contains("bath.temperature_k"));
        let err = Config::from_text("drive.phi0_rad = 1.0").unwrap_err();
        assert!(err.to_string().contains("drive.phi0"));
        let err = Config::from_text("noise.sample_rate_mhz = 0.2").unwrap_err();
        assert!(err.to_string().contains("noise.sample_rate"));
    }

    #[test]
    fn resonant_modulation_is_the_default() {
        let cfg = Config::reference();
        assert_relative_eq!(cfg.detuning(), 0.0, epsilon = 1e-9);
        assert_eq!(cfg.to_raw()["drive.f_mod_khz"], "26");
    }

    #[test]
    fn validation_is_idempotent_on_defaults() {
        let cfg = Config::reference();
        let again = validate_config(&cfg.to_raw()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    proptest! {
        #[test]
        fn hz_rad_round_trip(f in 1e-3f64..1e9) {
            let back = rad_to_hz(hz_to_rad(f));
            prop_assert!(((back - f) / f).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn mass_is_monotone(d in 1e-9f64..1e-5, rho in 1.0f64..1e4, k in 1.001f64..3.0) {
            let m = mass_from_geometry(d, rho).unwrap();
            prop_assert!(mass_from_geometry(d * k, rho).unwrap() > m);
            prop_assert!(mass_from_geometry(d, rho * k).unwrap() > m);
        }

        #[test]
        fn validation_is_idempotent(
            fx in 50.0f64..200.0,
            df in 1.0f64..60.0,
            gamma in 0.0f64..1e4,
            phi0 in -0.5f64..0.5,
            temp in 0.0f64..1000.0,
        ) {
            let text = format!(
                "trap.f_x_khz = {fx}\ntrap.f_y_khz = {}\nbath.gamma_hz = {gamma}\n\
                 drive.phi0_rad = {phi0}\nbath.temperature_k = {temp}\nnoise.sample_rate_mhz = 5\n",
                fx + df
            );
            let cfg = Config::from_text(&text).unwrap();
            let again = validate_config(&cfg.to_raw()).unwrap();
            prop_assert_eq!(cfg, again);
        }
    }
}
