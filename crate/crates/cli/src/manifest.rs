//! Run manifest: written when a run starts and finalized when it ends.
//!
//! Format: `key = value` lines. `argv` repeats once per command-line argument,
//! `artifact` once per output file as `<name> sha256=<hex>`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub status: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    /// Output file names relative to the run directory.
    pub artifacts: Vec<String>,
    dir: PathBuf,
}

impl RunManifest {
    /// Creates the output directory and writes the initial manifest.
    pub fn begin(dir: &Path, command: &str, argv: Vec<String>) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let m = Self {
            command: command.to_string(),
            argv,
            status: "running".into(),
            seed: None,
            config_hash: None,
            exit_code: None,
            error: None,
            artifacts: Vec::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `contents` into the run directory and records it as an artifact.
    pub fn emit(&mut self, name: &str, contents: &str) -> io::Result<()> {
        fs::write(self.dir.join(name), contents)?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    /// Records a file already written into the run directory.
    pub fn track(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn finish(mut self, exit_code: i32, error: Option<String>) -> io::Result<()> {
        self.status = if exit_code == 0 { "ok" } else { "failed" }.into();
        self.exit_code = Some(exit_code);
        self.error = error;
        self.write()
    }

    fn render(&self) -> io::Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "status = {}", self.status);
        let _ = writeln!(s, "command = {}", self.command);
        for a in &self.argv {
            let _ = writeln!(s, "argv = {a}");
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config = {CONFIG_FILE}");
            let _ = writeln!(s, "config_hash = {h}");
        }
        if let Some(code) = self.exit_code {
            let _ = writeln!(s, "exit_code = {code}");
        }
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error = {}", e.replace('\n', " "));
        }
        for a in &self.artifacts {
            let bytes = fs::read(self.dir.join(a))?;
            let _ = writeln!(
                s,
                "artifact = {a} sha256={}",
                hex::encode(Sha256::digest(&bytes))
            );
        }
        Ok(s)
    }

    fn write(&self) -> io::Result<()> {
        fs::write(self.dir.join(FILE_NAME), self.render()?)
    }
}

/// Fields of a manifest on disk needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredManifest {
    pub argv: Vec<String>,
    pub config: Option<PathBuf>,
    pub artifacts: Vec<(String, String)>,
}

pub fn read(path: &Path) -> io::Result<StoredManifest> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = StoredManifest {
        argv: Vec::new(),
        config: None,
        artifacts: Vec::new(),
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once(" = ") else {
            continue;
        };
        match k {
            "argv" => out.argv.push(v.to_string()),
            "config" => out.config = Some(dir.join(v)),
            "artifact" => {
                if let Some((name, hash)) = v.split_once(" sha256=") {
                    out.artifacts.push((name.to_string(), hash.to_string()));
                }
            }
            _ => {}
        }
    }
    if out.argv.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "manifest has no argv lines",
        ));
    }
    Ok(out)
}
