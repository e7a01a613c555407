use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use evpan::io::{write_atomic, Config};

/// What a run did and everything needed to repeat it, written as
/// `manifest.txt` next to the outputs.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<(String, PathBuf)>,
    pub seed: u64,
    /// Per-stage times summed over scans, in insertion order.
    pub stages: Vec<(String, Duration)>,
    pub wall: Duration,
    pub notes: Vec<(String, String)>,
    pub config: Config,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, config_path: Option<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            config_path,
            inputs: Vec::new(),
            seed: config.seed,
            stages: Vec::new(),
            wall: Duration::ZERO,
            notes: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn add_stage(&mut self, name: &str, time: Duration) {
        match self.stages.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => *t += time,
            None => self.stages.push((name.to_string(), time)),
        }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "toolkit = evpan {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(p) = &self.config_path {
            let _ = writeln!(out, "config_file = {}", p.display());
        }
        for (name, path) in &self.inputs {
            let _ = writeln!(out, "input.{name} = {}", path.display());
        }
        for (name, t) in &self.stages {
            let _ = writeln!(out, "stage.{name}.seconds = {:.6}", t.as_secs_f64());
        }
        let _ = writeln!(out, "wall.seconds = {:.6}", self.wall.as_secs_f64());
        for (k, v) in &self.notes {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\n# configuration\n");
        out.push_str(&self.config.to_text());
        out
    }

    pub fn write(&self, dir: &Path) -> evpan::Result<()> {
        write_atomic(&dir.join("manifest.txt"), self.to_text().as_bytes())
    }
}
