use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchitectureDescriptor, Model};
use crate::nn::checkpoint::{read_param_store, write_param_store, ParamEntry};
use crate::nn::ParamStore;
use crate::preprocess::StandardizationStats;

/// A trained network plus everything needed to apply it to new rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub desc: ArchitectureDescriptor,
    pub roster: Vec<String>,
    pub stats: StandardizationStats,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    architecture: ArchitectureDescriptor,
    roster: Vec<String>,
    standardization: StandardizationStats,
    seed: u64,
    epoch: usize,
    val_loss: f64,
    tensor_store: String,
    params: Vec<ParamEntry>,
}

impl ModelCheckpoint {
    pub fn model(&self) -> Model {
        Model {
            desc: self.desc,
            params: self.params.clone(),
        }
    }

    /// Write `<stem>.json` and `<stem>.btr`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = format!("{stem}.btr");
        let params = write_param_store(&self.params, dir.join(&store))?;
        let manifest = Manifest {
            architecture: self.desc,
            roster: self.roster.clone(),
            standardization: self.stats.clone(),
            seed: self.seed,
            epoch: self.epoch,
            val_loss: self.val_loss,
            tensor_store: store,
            params,
        };
        let path = dir.join(format!("{stem}.json"));
        let json =
            serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        m.architecture.validate()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let params = read_param_store(dir.join(&m.tensor_store), &m.params)?;
        let expected = Model::build(m.architecture, 0)?.params;
        for (name, p) in expected.iter() {
            let got = params.get(name).map_err(|_| {
                Error::Integrity(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has the wrong shape"
                )));
            }
        }
        if m.standardization.channels() != m.roster.len() {
            return Err(Error::Integrity(
                "standardization does not match the roster".into(),
            ));
        }
        Ok(Self {
            desc: m.architecture,
            roster: m.roster,
            stats: m.standardization,
            seed: m.seed,
            epoch: m.epoch,
            val_loss: m.val_loss,
            params,
        })
    }
}
