use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cascade, CascadeConfig, Stage};
use crate::autodiff::checkpoint;
use crate::error::{Error, Result};

const FORMAT: &str = "sdc-cascade";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const LOW: &str = "low.ckpt";
const HIGH: &str = "high.ckpt";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    /// Last completed training stage, if any.
    stage: Option<Stage>,
    config: CascadeConfig,
}

impl Cascade {
    /// Writes `dir/manifest.toml` plus one weight file per branch.
    pub fn save(&self, dir: impl AsRef<Path>, stage: Option<Stage>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            stage,
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        checkpoint::save(self.low.params(), &dir.join(LOW))?;
        checkpoint::save(self.high.params(), &dir.join(HIGH))
    }

    /// Inverse of [`Cascade::save`]; returns the recorded stage too.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Option<Stage>)> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", m.format, m.version)));
        }
        let mut c = Cascade::new(m.config, 0)?;
        for (store, file) in [(c.low.params_mut(), LOW), (c.high.params_mut(), HIGH)] {
            checkpoint::load_into(store, &dir.join(file)).map_err(|e| match e {
                Error::Checkpoint(msg) => Error::ConfigMismatch(format!("{file}: {msg}")),
                e => e,
            })?;
        }
        Ok((c, m.stage))
    }
}
