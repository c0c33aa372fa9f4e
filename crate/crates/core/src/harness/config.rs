//! Run configuration: a TOML file with one section per component.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{DataConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metalearn::{MaxEConfig, MetaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Meta-trained policy with local adaptation.
    Meta,
    Maxe,
    Global,
    Ft,
    Ia,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Maxe => "maxe",
            Mode::Global => "global",
            Mode::Ft => "ft",
            Mode::Ia => "ia",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(Mode::Meta),
            "maxe" => Ok(Mode::Maxe),
            "global" => Ok(Mode::Global),
            "ft" => Ok(Mode::Ft),
            "ia" => Ok(Mode::Ia),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected meta, maxe, global, ft or ia)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    /// Seed of the evaluation sessions, independent of training.
    pub eval_seed: u64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Parameter directory to evaluate; defaults to the best checkpoint of
    /// the mode's training run under `<out_dir>/checkpoints`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Support episodes for `adapt`, adaptation episodes for `ft`/`ia`,
    /// conversations for `chat`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Meta,
            seed: 0,
            eval_seed: 0,
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            episodes: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    /// Catalog generated by `pretrain` when the dataset directory holds none.
    pub synthetic: SyntheticSpec,
    pub data: DataConfig,
    pub meta: MetaConfig,
    pub maxe: MaxEConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the run seed into the component settings.
    pub fn resolved(mut self) -> Self {
        self.data.seed = self.run.seed;
        self.data.fm.seed = self.run.seed;
        self.meta.seed = self.run.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()
    }
}
