use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use modecoupling::analysis::{
    cooling_limit, energy_timeseries, fit_lorentzian, welch_psd, LorentzianGuess,
};
use modecoupling::envelope::{decay_rates, EnvelopeParams};
use modecoupling::feedback::Mode;
use modecoupling::fullsim::{self, init_with_energies, measure, RunSetup};
use modecoupling::io;
use modecoupling::model::{
    apply_override, ground_state_temperature, parse_config_text, validate_config, K_B,
};
use modecoupling::protocols::{
    cooling_floor_monte_carlo, estimate_rabi_phase, fit_envelope_decay, nominal_rabi_frequency,
    run_energy_transfer, run_rabi, run_sympathetic, Experiment, ProtocolTrace, RabiFitOptions,
    SwitchTiming, TransferSettings,
};
use modecoupling::{rng, Config, DriveSchedule, Error, Result};

use crate::manifest::{self, RunManifest};
use crate::{exit_code, plot, Backend, BackendArgs, Cli, Command, Common, ModeArg};

type Summary = Vec<(&'static str, String)>;

pub fn execute(cli: Cli, argv: Vec<String>) -> u8 {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.common);
    }
    let mut m = match RunManifest::begin(&cli.common.out, cli.command.name(), argv) {
        Ok(m) => m,
        Err(e) => {
            eprintln!(
                "error: cannot write the manifest in {}: {e}",
                cli.common.out.display()
            );
            return 2;
        }
    };
    let result = match cli.common.jobs {
        Some(0) => Err(Error::Config("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli, &mut m))),
        None => dispatch(&cli, &mut m),
    };
    let (code, message) = match result {
        Ok(()) => (0, None),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), Some(e.to_string()))
        }
    };
    if let Err(e) = m.finish(code as i32, message) {
        eprintln!("error: cannot finalize the manifest: {e}");
        return 2;
    }
    code
}

fn dispatch(cli: &Cli, m: &mut RunManifest) -> Result<()> {
    let common = &cli.common;
    let mut shorthand = Vec::new();
    match &cli.command {
        Command::Rabi(b) | Command::Sympathetic(b) | Command::Transfer { backend: b, .. } => {
            backend_override(b, &mut shorthand)
        }
        Command::Montecarlo {
            backend,
            trials,
            tau_ms,
        } => {
            backend_override(backend, &mut shorthand);
            if let Some(n) = trials {
                shorthand.push(format!("montecarlo.trials={n}"));
            }
            if let Some(t) = tau_ms {
                shorthand.push(format!("montecarlo.tau_ms={t}"));
            }
        }
        _ => {}
    }
    let cfg = load_config(common, &shorthand)?;
    m.seed = Some(cfg.seed);
    m.config_hash = Some(cfg.hash());
    m.emit(manifest::CONFIG_FILE, &cfg.render())?;
    let out = Output {
        m,
        plot: common.plot,
    };
    match &cli.command {
        Command::Rabi(_) => rabi(&cfg, out),
        Command::Sympathetic(_) => sympathetic(&cfg, out),
        Command::Transfer {
            oracle, hold_ms, ..
        } => transfer(&cfg, *oracle, *hold_ms, out),
        Command::Analyze {
            record,
            mode,
            segment,
            band_khz,
            window_us,
        } => analyze(&cfg, record, *mode, *segment, *band_khz, *window_us, out),
        Command::Limit => limit(&cfg, out),
        Command::Montecarlo { .. } => montecarlo(&cfg, out),
        Command::Simulate { binary } => simulate(&cfg, *binary, out),
        Command::Replay { .. } => unreachable!("handled before dispatch"),
    }
}

fn backend_override(b: &BackendArgs, out: &mut Vec<String>) {
    if let Some(kind) = b.backend {
        let name = match kind {
            Backend::Envelope => "envelope",
            Backend::Fullsim => "fullsim",
        };
        out.push(format!("run.backend={name}"));
    }
}

/// File, then `--override`s, then subcommand shorthands, then `--seed`.
pub fn load_config(common: &Common, shorthand: &[String]) -> Result<Config> {
    let text = match &common.config {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut raw = parse_config_text(&text)?;
    for o in common.overrides.iter().chain(shorthand) {
        apply_override(&mut raw, o)?;
    }
    if let Some(seed) = common.seed {
        raw.insert("rng.seed".into(), seed.to_string());
    }
    validate_config(&raw)
}

struct Output<'a> {
    m: &'a mut RunManifest,
    plot: bool,
}

impl Output<'_> {
    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        Ok(self.m.emit(name, contents)?)
    }

    fn csv(&mut self, name: &str, contents: &str, log_y: bool) -> Result<()> {
        self.text(name, contents)?;
        if self.plot {
            let header = contents.lines().next().unwrap_or("");
            let script = plot::script(name, header, log_y);
            self.text(&format!("{}.gp", name.trim_end_matches(".csv")), &script)?;
        }
        Ok(())
    }

    fn trace(&mut self, trace: &ProtocolTrace) -> Result<()> {
        self.csv("trace.csv", &io::trace_csv(trace), false)?;
        self.text("events.csv", &io::events_csv(trace))
    }

    fn summary(&mut self, kv: &Summary) -> Result<()> {
        self.text("summary.txt", &io::key_values(kv))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.m.dir().join(name)
    }
}

fn base_summary(cfg: &Config, trace: &ProtocolTrace) -> Summary {
    let mut kv: Summary = vec![
        ("backend", trace.backend.to_string()),
        ("seed", cfg.seed.to_string()),
        ("config_hash", cfg.hash()),
    ];
    if let Some(p) = trace.points.last() {
        kv.push(("observed_t_s", num(p.t)));
        kv.push(("observed_e_x_kbt", num(p.e_x)));
        kv.push(("observed_e_y_kbt", num(p.e_y)));
    }
    for e in &trace.events {
        kv.push((
            "event",
            format!(
                "{} scheduled={:e} executed={:e}",
                e.name, e.scheduled, e.executed
            ),
        ));
    }
    kv
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn fit_options(cfg: &Config) -> RabiFitOptions {
    RabiFitOptions {
        fit_decay: false,
        max_residual: cfg.protocol.max_residual,
    }
}

fn coupling_active(cfg: &Config) -> bool {
    cfg.drive.enabled && cfg.drive.phi0 != 0.0 && cfg.run.t_on < cfg.run.duration
}

fn rabi(cfg: &Config, mut out: Output) -> Result<()> {
    let exp = Experiment::from_config(cfg);
    let trace = run_rabi(&exp, &cfg.init, cfg.drive, cfg.run.t_on, cfg.run.duration)?;
    out.trace(&trace)?;
    let mut kv = base_summary(cfg, &trace);
    let nominal = nominal_rabi_frequency(&cfg.drive, &exp);
    let g = cfg.bath.gamma;
    let (r1, r2) = decay_rates(&EnvelopeParams::from_drive(&cfg.drive, &cfg.trap, g, g));
    kv.push(("predicted_decay_rates_per_s", format!("{r1:e} {r2:e}")));
    let mut failure = None;
    if coupling_active(cfg) {
        kv.push(("nominal_omega_r_rad_s", num(nominal)));
        let (t, f) = trace.y_fraction_series(cfg.run.t_on, cfg.run.duration);
        match estimate_rabi_phase(&t, &f, nominal, &fit_options(cfg)) {
            Ok(fit) => {
                kv.push(("fitted_omega_r_rad_s", num(fit.omega_r)));
                kv.push(("fitted_period_s", num(fit.period())));
                kv.push(("fitted_contrast", num(fit.contrast)));
                kv.push(("fit_residual", num(fit.residual)));
            }
            Err(e) => {
                kv.push(("rabi_fit", format!("failed: {e}")));
                failure = Some(e);
            }
        }
    } else {
        kv.push(("rabi_fit", "none: coupling off".into()));
    }
    out.summary(&kv)?;
    failure.map_or(Ok(()), Err)
}

fn sympathetic(cfg: &Config, mut out: Output) -> Result<()> {
    let fb = cfg.feedback;
    if fb.gain <= 0.0 {
        return Err(Error::InvalidParameter {
            field: "feedback.gain".into(),
            reason: "sympathetic cooling needs feedback.gain > 0".into(),
        });
    }
    let exp = Experiment::from_config(cfg);
    let trace = run_sympathetic(
        &exp,
        &cfg.init,
        cfg.drive,
        cfg.run.t_on,
        fb,
        cfg.run.duration,
    )?;
    out.trace(&trace)?;
    let mut kv = base_summary(cfg, &trace);
    let g = cfg.bath.gamma;
    let extra = fb.nominal_rate(&cfg.trap);
    let (ga, gb) = match fb.target_mode {
        Mode::X => (g + extra, g),
        Mode::Y => (g, g + extra),
    };
    let (r1, r2) = decay_rates(&EnvelopeParams::from_drive(&cfg.drive, &cfg.trap, ga, gb));
    kv.push(("feedback_rate_per_s", num(extra)));
    kv.push(("predicted_decay_rates_per_s", format!("{r1:e} {r2:e}")));

    let nominal = nominal_rabi_frequency(&cfg.drive, &exp);
    let period = if coupling_active(cfg) && nominal > 0.0 {
        TAU / nominal
    } else {
        10.0 * cfg.protocol.sample_interval
    };
    let mut failure = None;
    for (mode, key) in [
        (Mode::X, "fitted_decay_x_per_s"),
        (Mode::Y, "fitted_decay_y_per_s"),
    ] {
        let t0 = cfg.run.t_on + period;
        match fit_envelope_decay(
            &trace.times(),
            &trace.energies(mode),
            t0,
            cfg.run.duration,
            period,
        ) {
            Ok(d) => kv.push((
                key,
                format!("{:e} ci95={:e} r2={}", d.rate, d.ci95, d.r_squared),
            )),
            Err(e) => {
                kv.push((key, format!("failed: {e}")));
                failure.get_or_insert(e);
            }
        }
    }
    out.summary(&kv)?;
    failure.map_or(Ok(()), Err)
}

fn transfer(cfg: &Config, oracle: bool, hold_ms: f64, mut out: Output) -> Result<()> {
    let exp = Experiment::from_config(cfg);
    let mut settings = TransferSettings::from_config(cfg);
    if oracle {
        settings.timing = SwitchTiming::Oracle;
    }
    if hold_ms.is_nan() || hold_ms < 0.0 {
        return Err(Error::Config("--hold-ms must be >= 0".into()));
    }
    settings.hold = hold_ms * 1e-3;
    let outcome = run_energy_transfer(&exp, &cfg.init, cfg.drive, &settings)?;
    out.trace(&outcome.trace)?;
    let mut kv = base_summary(cfg, &outcome.trace);
    let (ex, ey) = outcome.final_energies;
    kv.push(("timing", if oracle { "oracle" } else { "estimated" }.into()));
    kv.push(("monitor_s", num(settings.monitor)));
    kv.push(("final_e_x_kbt", num(ex)));
    kv.push(("final_e_y_kbt", num(ey)));
    kv.push(("final_y_fraction", num(outcome.final_y_fraction())));
    kv.push(("timing_resolution_s", num(outcome.timing_resolution)));
    for (k, fit) in outcome.fits.iter().enumerate() {
        kv.push((
            "stage_fit",
            format!(
                "{} omega_r={:e} phase={} contrast={} residual={:e}",
                k + 1,
                fit.omega_r,
                fit.phase,
                fit.contrast,
                fit.residual
            ),
        ));
    }
    kv.push((
        "status",
        match &outcome.failure {
            None => "ok".into(),
            Some(e) => format!("failed: {e}"),
        },
    ));
    out.summary(&kv)?;
    outcome.failure.map_or(Ok(()), Err)
}

fn analyze(
    cfg: &Config,
    record: &Path,
    mode: ModeArg,
    segment: Option<usize>,
    band_khz: f64,
    window_us: f64,
    mut out: Output,
) -> Result<()> {
    let mode = match mode {
        ModeArg::X => Mode::X,
        ModeArg::Y => Mode::Y,
    };
    let rec = io::read_record(record)?;
    let series = rec.channel(mode);
    let seg = match segment {
        Some(n) => n,
        None => (1usize << 14).min(1 << series.len().max(2).ilog2()),
    };
    let psd = welch_psd(series, rec.sample_rate, seg, seg / 2)?;
    let omega_cfg = cfg.trap.omega(mode);
    let f_cfg = omega_cfg / TAU;
    let band = (f_cfg - band_khz * 1e3, f_cfg + band_khz * 1e3);
    let mass = cfg.particle.mass;
    let fit = LorentzianGuess::from_peak(&psd, band.0, band.1)
        .ok_or_else(|| {
            Error::FitFailed(format!("no PSD bins between {} and {} Hz", band.0, band.1))
        })
        .and_then(|g| fit_lorentzian(&psd, &g));
    out.csv("psd.csv", &io::psd_csv(&psd, fit.as_ref().ok()), true)?;

    let omega = fit.as_ref().map_or(omega_cfg, |f| f.omega0);
    let energy = energy_timeseries(&rec, mode, omega, mass, window_us * 1e-6, cfg.kbt())?;
    out.csv("energy.csv", &io::energy_csv(&energy), false)?;

    let mut kv: Summary = vec![
        ("record", record.display().to_string()),
        ("mode", mode.to_string()),
        ("samples", series.len().to_string()),
        ("sample_rate_hz", num(rec.sample_rate)),
        ("segment", seg.to_string()),
        ("resolution_hz", num(psd.resolution)),
        ("configured_f0_hz", num(f_cfg)),
    ];
    let result = match fit {
        Ok(f) => {
            kv.push(("status", "ok".into()));
            kv.push(("f0_hz", num(f.omega0 / TAU)));
            kv.push(("f0_stderr_hz", num(f.stderr(0) / TAU)));
            kv.push(("gamma_hz", num(f.gamma / TAU)));
            kv.push(("gamma_stderr_hz", num(f.stderr(1) / TAU)));
            kv.push(("s0", num(f.s0)));
            kv.push(("floor_m2_per_hz", num(f.floor)));
            kv.push(("area_m2", num(f.area())));
            kv.push(("temperature_k", num(f.temperature(mass))));
            kv.push(("log_residual_rms", num(f.log_residual_rms)));
            Ok(())
        }
        Err(e) => {
            kv.push(("status", format!("failed: {e}")));
            Err(e)
        }
    };
    out.text("fit.txt", &io::key_values(&kv))?;
    result
}

fn limit(cfg: &Config, mut out: Output) -> Result<()> {
    let mode = cfg.limit.mode;
    let omega = cfg.trap.omega(mode);
    let mass = cfg.particle.mass;
    let s = cfg.noise.s_x_noise;
    let tau = cfg.limit.tau.unwrap_or(cfg.limit.q_factor / omega);
    let (e_min, t_min) = if s == 0.0 {
        (0.0, 0.0)
    } else {
        let l = cooling_limit(mass, omega, s, tau)?;
        (l.e_min, l.t_min)
    };
    let t_ground = ground_state_temperature(omega)?;
    let verdict = if t_min < t_ground {
        "T_min < T_ground"
    } else {
        "T_min >= T_ground"
    };
    let kv: Summary = vec![
        ("mode", mode.to_string()),
        ("mass_kg", num(mass)),
        ("omega_rad_s", num(omega)),
        ("s_noise_m2_per_hz", num(s)),
        ("tau_s", num(tau)),
        ("e_min_j", num(e_min)),
        ("e_min_kbt", num(e_min / cfg.kbt())),
        ("t_min_k", num(t_min)),
        ("t_min", kelvin(t_min)),
        ("t_ground_k", num(t_ground)),
        ("t_ground", kelvin(t_ground)),
        ("occupation", num(e_min / (K_B * t_ground))),
        ("verdict", verdict.into()),
    ];
    let text = io::key_values(&kv);
    print!("{text}");
    out.text("limit.txt", &text)
}

/// Temperature with an SI prefix, e.g. `72.9 pK`.
fn kelvin(t: f64) -> String {
    if t == 0.0 {
        return "0 K".into();
    }
    let prefixes = [
        (1.0, ""),
        (1e-3, "m"),
        (1e-6, "u"),
        (1e-9, "n"),
        (1e-12, "p"),
        (1e-15, "f"),
    ];
    let (scale, p) = prefixes
        .iter()
        .find(|(scale, _)| t.abs() >= *scale)
        .copied()
        .unwrap_or((1e-15, "f"));
    format!("{:.1} {p}K", t / scale)
}

fn montecarlo(cfg: &Config, mut out: Output) -> Result<()> {
    let exp = Experiment::from_config(cfg);
    let r = cooling_floor_monte_carlo(
        &exp,
        &cfg.init,
        cfg.drive,
        cfg.montecarlo.tau,
        cfg.montecarlo.trials,
        fit_options(cfg),
    )?;
    let mut csv = String::from("trial,seed,final_E_y_kbt\n");
    for (k, v) in r.finals.iter().enumerate() {
        csv.push_str(&format!(
            "{k},{},{v:e}\n",
            rng::derive_seed(cfg.seed, k as u64)
        ));
    }
    out.csv("floor.csv", &csv, false)?;
    let kv: Summary = vec![
        ("backend", exp.backend.to_string()),
        ("seed", cfg.seed.to_string()),
        ("config_hash", cfg.hash()),
        ("trials", r.trials.to_string()),
        ("failures", r.failures.to_string()),
        ("tau_s", num(r.tau)),
        ("s_noise_m2_per_hz", num(r.s_x_noise)),
        ("mean_e_y_kbt", num(r.mean)),
        ("stderr_e_y_kbt", num(r.stderr)),
        ("predicted_e_min_kbt", num(r.predicted)),
    ];
    out.summary(&kv)?;
    if r.failures == r.trials {
        return Err(Error::EstimationFailed(format!(
            "all {} trials failed",
            r.trials
        )));
    }
    Ok(())
}

fn simulate(cfg: &Config, binary: bool, mut out: Output) -> Result<()> {
    let setup = RunSetup::from_config(cfg)?;
    let schedule = if cfg.drive.enabled {
        DriveSchedule::switched_on(cfg.drive, cfg.run.t_on)
    } else {
        DriveSchedule::constant(cfg.drive)
    };
    let exp = Experiment::from_config(cfg);
    let phase = exp.initial_phase(&cfg.init);
    let kbt = cfg.kbt();
    let init = init_with_energies(
        (cfg.init.e_x * kbt, cfg.init.e_y * kbt),
        (0.0, phase),
        &cfg.trap,
        &cfg.particle,
    );
    let traj = fullsim::run(&setup, &schedule, init, cfg.run.duration, cfg.seed)?;
    let name = if binary {
        "trajectory.bin"
    } else {
        "trajectory.csv"
    };
    if binary {
        io::write_trajectory_bin(&out.path(name), &traj)?;
    } else {
        io::write_trajectory_csv(&out.path(name), &traj)?;
    }
    out.m.track(name);
    out.m.track(&format!("{name}.meta"));
    let record = measure(&traj, &cfg.noise, &mut rng::stream(cfg.seed, 4));
    out.csv("record.csv", &io::record_csv(&record), false)?;
    let kv: Summary = vec![
        ("seed", cfg.seed.to_string()),
        ("config_hash", cfg.hash()),
        ("dt_s", num(traj.dt)),
        ("interval_s", num(traj.interval)),
        ("records", traj.records.len().to_string()),
        ("feedback_clamp_count", traj.clamp_count.to_string()),
    ];
    out.summary(&kv)
}

/// Strips run-specific flags from a stored argv and points it at the stored
/// resolved config and a new output directory.
fn replay_argv(stored: &[String], config: &Path, out: &Path) -> Vec<String> {
    let with_value = ["--config", "--seed", "--out", "--override"];
    let mut argv = Vec::new();
    let mut skip = false;
    for a in stored {
        if skip {
            skip = false;
            continue;
        }
        if with_value.contains(&a.as_str()) {
            skip = true;
            continue;
        }
        if with_value.iter().any(|f| a.starts_with(&format!("{f}="))) {
            continue;
        }
        argv.push(a.clone());
    }
    argv.push("--config".into());
    argv.push(config.display().to_string());
    argv.push("--out".into());
    argv.push(out.display().to_string());
    argv
}

fn replay(path: &Path, common: &Common) -> u8 {
    let stored = match manifest::read(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return 2;
        }
    };
    let Some(config) = stored.config.clone() else {
        eprintln!("error: {}: the run never resolved a config", path.display());
        return 2;
    };
    let argv = replay_argv(&stored.argv, &config, &common.out);
    let cli = match Cli::try_parse_from(
        std::iter::once("modecoupling".to_string()).chain(argv.iter().cloned()),
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: stored arguments do not parse: {e}");
            return 2;
        }
    };
    if matches!(cli.command, Command::Replay { .. }) {
        eprintln!("error: a replay manifest cannot be replayed");
        return 2;
    }
    let code = execute(cli, argv);
    let mut differ = Vec::new();
    for (name, hash) in &stored.artifacts {
        if name == manifest::CONFIG_FILE {
            continue;
        }
        let now = fs::read(common.out.join(name)).map(|b| {
            use sha2::Digest;
            hex::encode(sha2::Sha256::digest(&b))
        });
        if now.ok().as_deref() != Some(hash.as_str()) {
            differ.push(name.as_str());
        }
    }
    if differ.is_empty() {
        eprintln!("replay: all artifacts identical");
    } else {
        eprintln!("replay: artifacts differ: {}", differ.join(", "));
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_argv_drops_run_flags() {
        let stored: Vec<String> = [
            "transfer",
            "--config",
            "a.cfg",
            "--seed=3",
            "--override",
            "x=1",
            "--oracle",
            "--out",
            "o",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let argv = replay_argv(&stored, Path::new("r/config.resolved"), Path::new("new"));
        assert_eq!(
            argv,
            [
                "transfer",
                "--oracle",
                "--config",
                "r/config.resolved",
                "--out",
                "new"
            ]
        );
    }

    #[test]
    fn kelvin_prefixes() {
        assert_eq!(kelvin(7.29e-11), "72.9 pK");
        assert_eq!(kelvin(6.77e-6), "6.8 uK");
        assert_eq!(kelvin(300.0), "300.0 K");
        assert_eq!(kelvin(0.0), "0 K");
    }
}
