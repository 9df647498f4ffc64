//! Windowed RoPE transformer backbone and its checkpoints.

pub mod attention;
pub mod backbone;
pub mod rope;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{window_attention, AttentionContext, AttentionVars};
pub use backbone::{
    timestep_features, transformer_block, Backbone, BackboneConfig, BackboneOutput, BlockVars,
    ForwardInputs,
};
pub use rope::{rope_rotate, RopeConfig};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

/// Role of a checkpointed parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
    Generator,
    Discriminator,
    Restorer,
}

/// `manifest.json` stored next to the parameter files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BackboneConfig,
    pub step: usize,
    /// Free-form stage label, e.g. `pretrain` or `distill 4->2`.
    pub stage: String,
    pub kind: CheckpointKind,
    /// Sampling steps the weights were trained for (1 for one-step models).
    #[serde(default)]
    pub sampling_steps: Option<usize>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Saves a backbone and its manifest into `dir`.
pub fn save_backbone(model: &Backbone, dir: &Path, manifest: &Manifest) -> Result<()> {
    if &manifest.config != model.config() {
        return Err(Error::Checkpoint("manifest config differs from the model".into()));
    }
    model.params().save(dir)?;
    manifest.write(dir)
}

/// Loads a backbone checkpoint (any kind; extra files such as discriminator heads are ignored).
pub fn load_backbone(dir: &Path) -> Result<(Backbone, Manifest)> {
    let manifest = Manifest::read(dir)?;
    let mut model = Backbone::new(manifest.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.params_mut().load_into(dir)?;
    Ok((model, manifest))
}
