use std::path::{Path, PathBuf};

use pyragen::corpus::{ImageDir, ImageSource, SyntheticTextures};
use pyragen::trainer::TrainConfig;
use pyragen::{Error, Result};
use serde::{Deserialize, Serialize};

/// Procedurally generated texture set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSet {
    pub count: usize,
    pub seed: u64,
}

/// Either a directory of PNG files or a synthetic texture set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSet {
    pub dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticSet>,
}

impl DataSet {
    pub fn open(&self, size: usize, what: &str) -> Result<Box<dyn ImageSource>> {
        match (&self.dir, &self.synthetic) {
            (Some(dir), None) => Ok(Box::new(ImageDir::open(dir, size)?)),
            (None, Some(s)) => Ok(Box::new(SyntheticTextures::new(s.count, size, s.seed))),
            _ => Err(Error::Config(format!("{what}: set exactly one of `dir` and `synthetic`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reporting {
    /// Write a preview contact sheet every this many steps; 0 disables.
    pub sample_every: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Images shown in each preview.
    pub preview_images: usize,
}

impl Default for Reporting {
    fn default() -> Self {
        Reporting {
            sample_every: 500,
            checkpoint_every: 0,
            preview_images: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub out_dir: Option<PathBuf>,
    pub train_data: DataSet,
    #[serde(default)]
    pub eval_data: Option<DataSet>,
    #[serde(default)]
    pub reporting: Reporting,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Evaluation images, defaulting to the training set.
    pub fn eval_set(&self, size: usize) -> Result<Box<dyn ImageSource>> {
        self.eval_data.as_ref().unwrap_or(&self.train_data).open(size, "eval_data")
    }
}
