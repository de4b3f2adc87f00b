use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use crate::GlobalArgs;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to rerun a subcommand.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub inputs: IndexMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub plot: bool,
    pub engine_version: String,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, g: &GlobalArgs) -> Self {
        let mut inputs = IndexMap::new();
        if let Some(c) = &g.config {
            inputs.insert("config".to_string(), c.clone());
        }
        Self {
            subcommand: subcommand.to_string(),
            status: "ok".into(),
            error: None,
            config: serde_json::Value::Null,
            inputs,
            outputs: Vec::new(),
            seed: g.seed,
            threads: g.threads,
            plot: g.plot,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: 0.0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), json)
    }
}
