use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::BandSpec;
use crate::synth::SynthConfig;

/// Training run description, read from TOML. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// `[low, high]` Hz pairs used for per-band SDR in reports.
    #[serde(default = "default_bands")]
    pub bands: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of WAV files at the high branch rate.
    pub train_dir: Option<PathBuf>,
    /// Generated material, used when `train_dir` is absent.
    pub synth: Option<SynthConfig>,
    /// Resample files at other rates instead of rejecting them.
    #[serde(default)]
    pub auto_resample: bool,
}

fn default_bands() -> Vec<(f64, f64)> {
    [BandSpec::LOW, BandSpec::HIGH, BandSpec::INTERFACE]
        .iter()
        .map(|b| (b.low, b.high))
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(one_line(&e.to_string())))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.data.train_dir {
            fix(d);
        }
    }

    pub fn band_specs(&self) -> Result<Vec<BandSpec>> {
        self.bands.iter().map(|&(lo, hi)| BandSpec::new(lo, hi)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.band_specs()?;
        match (&self.data.train_dir, &self.data.synth) {
            (Some(d), None) => {
                if !d.is_dir() {
                    return Err(Error::InvalidConfig(format!("train_dir {} does not exist", d.display())));
                }
            }
            (None, Some(s)) => {
                s.validate()?;
                if s.sample_rate != self.train.cascade.branches[1].sample_rate {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic rate {} differs from the high branch rate",
                        s.sample_rate
                    )));
                }
            }
            _ => return Err(Error::InvalidConfig("set exactly one of data.train_dir and data.synth".into())),
        }
        let parent = self.output_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "parent of output_dir {} does not exist",
                self.output_dir.display()
            )));
        }
        Ok(())
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
