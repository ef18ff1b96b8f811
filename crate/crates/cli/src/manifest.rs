//! Machine-readable record of one subcommand run, written next to its
//! outputs as `manifest.<command>.json`.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: PathBuf,
    /// Verbatim configuration, enough to re-run the stage in isolation.
    pub config_text: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub details: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &str, config_path: &Path, config_text: String, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.to_path_buf(),
            config_text,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
            details: Map::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }

    pub fn inputs(&mut self, ps: &[PathBuf]) {
        ps.iter().for_each(|p| self.input(p));
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn outputs(&mut self, ps: &[PathBuf]) {
        ps.iter().for_each(|p| self.output(p));
    }

    pub fn detail(&mut self, key: &str, value: Value) {
        self.details.insert(key.to_string(), value);
    }

    pub fn file_name(&self) -> String {
        format!("manifest.{}.json", self.command)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is plain data") + "\n"
    }
}
