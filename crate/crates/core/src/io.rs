//! File formats.
//!
//! * Trajectory CSV: header `t_s,x_m,vx_ms,y_m,vy_ms` (plus `eta` when a
//!   feedback loop ran) and a sidecar `<file>.meta` of `key = value` lines
//!   holding the config hash, seed and step.
//! * Trajectory binary: records of five little-endian `f64`
//!   `(t, x, vx, y, vy)`, no header, same sidecar.
//! * Measured record CSV: `t_s,x_m,y_m`.
//! * Trace CSV: `t_s,E_x_kbt,E_y_kbt,e1,e2,e3`; event log
//!   `event,scheduled_s,executed_s`.
//!
//! Numbers are written in Rust's shortest round-trip exponent form, so equal
//! values always give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{EnergySeries, LorentzianFit, PsdEstimate};
use crate::error::{Error, Result};
use crate::fullsim::{MeasuredRecord, Trajectory};
use crate::protocols::{DarkModeSweep, ProtocolTrace};

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn trajectory_meta(traj: &Trajectory, layout: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format = {layout}");
    let _ = writeln!(s, "config_hash = {}", traj.config_hash);
    let _ = writeln!(s, "seed = {}", traj.seed);
    let _ = writeln!(s, "dt_s = {:e}", traj.dt);
    let _ = writeln!(s, "interval_s = {:e}", traj.interval);
    let _ = writeln!(s, "records = {}", traj.records.len());
    let _ = writeln!(s, "feedback_clamp_count = {}", traj.clamp_count);
    s
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from("t_s,x_m,vx_ms,y_m,vy_ms");
    if traj.eta.is_some() {
        s.push_str(",eta");
    }
    s.push('\n');
    for (k, r) in traj.records.iter().enumerate() {
        let _ = write!(s, "{:e},{:e},{:e},{:e},{:e}", r.t, r.x, r.vx, r.y, r.vy);
        if let Some(eta) = &traj.eta {
            let _ = write!(s, ",{:e}", eta[k]);
        }
        s.push('\n');
    }
    s
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, trajectory_csv(traj))?;
    fs::write(sidecar_path(path), trajectory_meta(traj, "csv"))?;
    Ok(())
}

pub fn write_trajectory_bin(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut bytes = Vec::with_capacity(traj.records.len() * 40);
    for r in &traj.records {
        for v in [r.t, r.x, r.vx, r.y, r.vy] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    fs::write(
        sidecar_path(path),
        trajectory_meta(traj, "f64le[t,x,vx,y,vy]"),
    )?;
    Ok(())
}

pub fn record_csv(rec: &MeasuredRecord) -> String {
    let mut s = String::from("t_s,x_m,y_m\n");
    for k in 0..rec.len() {
        let _ = writeln!(s, "{:e},{:e},{:e}", rec.time(k), rec.x[k], rec.y[k]);
    }
    s
}

pub fn write_record_csv(path: &Path, rec: &MeasuredRecord) -> Result<()> {
    fs::write(path, record_csv(rec))?;
    Ok(())
}

/// Reads a position record: a trajectory or measured-record CSV (columns
/// located by header name) or a binary trajectory (`.bin`). Timestamps must
/// be uniform.
pub fn read_record(path: &Path) -> Result<MeasuredRecord> {
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    let (t, x, y) = if path.extension().is_some_and(|e| e == "bin") {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % 40 != 0 {
            return Err(bad(format!(
                "{} bytes is not a whole number of 40-byte records",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let rows = vals.chunks_exact(5);
        let mut t = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in rows {
            t.push(r[0]);
            x.push(r[1]);
            y.push(r[3]);
        }
        (t, x, y)
    } else {
        let text = fs::read_to_string(path)?;
        parse_record_csv(&text).map_err(bad)?
    };
    if t.len() < 2 {
        return Err(bad("record needs at least two samples".into()));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(bad("timestamps must increase".into()));
    }
    for (k, w) in t.windows(2).enumerate() {
        if ((w[1] - w[0]) / dt - 1.0).abs() > 1e-6 {
            return Err(bad(format!("non-uniform sample spacing at row {}", k + 2)));
        }
    }
    Ok(MeasuredRecord {
        t0: t[0],
        sample_rate: 1.0 / dt,
        x,
        y,
        labels: ["x_m", "y_m"],
    })
}

type Columns = (Vec<f64>, Vec<f64>, Vec<f64>);

fn parse_record_csv(text: &str) -> std::result::Result<Columns, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        names
            .iter()
            .position(|n| *n == name)
            .ok_or(format!("missing column `{name}`"))
    };
    let (it, ix, iy) = (col("t_s")?, col("x_m")?, col("y_m")?);
    let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(format!(
                "row {} has {} fields, expected {}",
                k + 2,
                fields.len(),
                names.len()
            ));
        }
        let num = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|_| format!("row {}: `{}` is not a number", k + 2, fields[i]))
        };
        t.push(num(it)?);
        x.push(num(ix)?);
        y.push(num(iy)?);
    }
    Ok((t, x, y))
}

pub fn trace_csv(trace: &ProtocolTrace) -> String {
    let mut s = String::from("t_s,E_x_kbt,E_y_kbt,e1,e2,e3\n");
    for p in &trace.points {
        let _ = writeln!(
            s,
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            p.t, p.e_x, p.e_y, p.bloch.e1, p.bloch.e2, p.bloch.e3
        );
    }
    s
}

pub fn events_csv(trace: &ProtocolTrace) -> String {
    let mut s = String::from("event,scheduled_s,executed_s\n");
    for e in &trace.events {
        let _ = writeln!(s, "{},{:e},{:e}", e.name, e.scheduled, e.executed);
    }
    s
}

pub fn write_trace(trace_path: &Path, events_path: &Path, trace: &ProtocolTrace) -> Result<()> {
    fs::write(trace_path, trace_csv(trace))?;
    fs::write(events_path, events_csv(trace))?;
    Ok(())
}

/// PSD CSV; with a fit, a `model_m2_per_hz` column is added.
pub fn psd_csv(psd: &PsdEstimate, fit: Option<&LorentzianFit>) -> String {
    let mut s = String::from("f_hz,psd_m2_per_hz");
    if fit.is_some() {
        s.push_str(",model_m2_per_hz");
    }
    s.push('\n');
    for (f, p) in psd.freqs.iter().zip(&psd.psd) {
        let _ = write!(s, "{f:e},{p:e}");
        if let Some(fit) = fit {
            let _ = write!(s, ",{:e}", fit.model(*f));
        }
        s.push('\n');
    }
    s
}

pub fn energy_csv(series: &EnergySeries) -> String {
    let mut s = String::from("t_s,E_J,E_kbt\n");
    for k in 0..series.t.len() {
        let _ = writeln!(
            s,
            "{:e},{:e},{:e}",
            series.t[k], series.joules[k], series.kbt_units[k]
        );
    }
    s
}

pub fn sweep_csv(sweep: &DarkModeSweep) -> String {
    let mut s = String::from("f_mod_hz,mean_E_y_kbt\n");
    for (w, e) in sweep.omega_mod.iter().zip(&sweep.mean_e_y) {
        let _ = writeln!(s, "{:e},{e:e}", w / std::f64::consts::TAU);
    }
    s
}

/// Flat `key = value` report.
pub fn key_values(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fullsim::SimState;

    fn traj() -> Trajectory {
        Trajectory {
            interval: 5e-7,
            dt: 5e-8,
            seed: 7,
            config_hash: "abc".into(),
            records: (0..4)
                .map(|k| SimState {
                    x: k as f64 * 1e-9,
                    vx: 0.1,
                    y: -2e-9,
                    vy: 0.0,
                    t: k as f64 * 5e-7,
                })
                .collect(),
            eta: None,
            clamp_count: 0,
        }
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("modecoupling-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn csv_round_trip() {
        let p = tmp("traj.csv");
        write_trajectory_csv(&p, &traj()).unwrap();
        let rec = read_record(&p).unwrap();
        assert_eq!(rec.len(), 4);
        assert!((rec.sample_rate - 2e6).abs() < 1e-3);
        assert_eq!(rec.x[3], 3.0 * 1e-9);
        assert_eq!(rec.y[0], -2e-9);
        let meta = fs::read_to_string(sidecar_path(&p)).unwrap();
        assert!(meta.contains("seed = 7"));
        assert!(meta.contains("config_hash = abc"));
    }

    #[test]
    fn binary_round_trip() {
        let p = tmp("traj.bin");
        write_trajectory_bin(&p, &traj()).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 4 * 40);
        let rec = read_record(&p).unwrap();
        assert_eq!(rec.x[2], 2.0 * 1e-9);
    }

    #[test]
    fn rejects_bad_records() {
        let p = tmp("empty.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(read_record(&p), Err(Error::Config(_))));
        fs::write(&p, "t_s,x_m,y_m\n0,1,2\n1e-6,oops,2\n").unwrap();
        assert!(read_record(&p).is_err());
        fs::write(&p, "t_s,x_m,y_m\n0,1,2\n1e-6,1,2\n3e-6,1,2\n").unwrap();
        assert!(read_record(&p).is_err());
    }
}
