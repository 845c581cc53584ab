use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CdsError, Result};
use crate::numerics::ParamStore;
use crate::training::adam::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Full training state: restoring one and continuing reproduces an
/// uninterrupted run bit for bit. Written as a single JSON document (the
/// float_roundtrip parser makes f64 values exact through the round trip).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: Config,
    pub ablation: String,
    /// Epochs completed so far (1-based count).
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng_state: [u64; 4],
    pub best_val_rmse5: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        use std::io::Write;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| {
            CdsError::Data(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CdsError::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}
