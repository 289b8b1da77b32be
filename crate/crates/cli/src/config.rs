use std::fs;
use std::path::{Path, PathBuf};

use daffnet_core::data::{SplitSpec, SynthConfig};
use daffnet_core::model::{DaffConfig, MapConfig};
use daffnet_core::training::{LossWeights, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Reads a JSON run configuration, or the defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing required `--{flag}` (or `{}` in --config)", flag.replace('-', "_"))))
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRun {
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub synth: SynthConfig,
}

impl Default for GenRun {
    fn default() -> Self {
        GenRun {
            out: None,
            threads: default_threads(),
            synth: SynthConfig::default(),
        }
    }
}

/// A dataset whose attribute labels come from a pseudo-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoSource {
    pub data: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapRun {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub split: SplitSpec,
    pub model: MapConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Drops the auxiliary class term from the training loss.
    pub ablate_dsl: bool,
    pub pseudo: Vec<PseudoSource>,
}

impl Default for MapRun {
    fn default() -> Self {
        MapRun {
            data: None,
            schema: None,
            out: None,
            seed: 0,
            threads: default_threads(),
            split: SplitSpec::default(),
            model: MapConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            ablate_dsl: false,
            pseudo: Vec::new(),
        }
    }
}

impl MapRun {
    /// Propagates the run seed and the ablation switch into the sections.
    pub fn resolve(&mut self) {
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        if self.ablate_dsl {
            self.loss.lambda_cls = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub split: SplitSpec,
}

impl Default for PseudoRun {
    fn default() -> Self {
        PseudoRun {
            checkpoint: None,
            data: Vec::new(),
            out: None,
            seed: 0,
            threads: default_threads(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaffRun {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub map_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub split: SplitSpec,
    pub model: DaffConfig,
    pub train: TrainConfig,
}

impl Default for DaffRun {
    fn default() -> Self {
        DaffRun {
            data: None,
            schema: None,
            map_checkpoint: None,
            out: None,
            seed: 0,
            threads: default_threads(),
            split: SplitSpec::default(),
            model: DaffConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DaffRun {
    pub fn resolve(&mut self) {
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        if !self.model.use_mfe {
            self.model.use_mae = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub split: SplitSpec,
    pub part: Part,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            checkpoint: None,
            data: None,
            out: None,
            seed: 0,
            threads: default_threads(),
            split: SplitSpec::default(),
            part: Part::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradRun {
    pub eps: f64,
    pub tol: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    /// Op whose backward rule is deliberately broken.
    pub corrupt: Option<String>,
}

impl Default for GradRun {
    fn default() -> Self {
        GradRun {
            eps: 1e-4,
            tol: 1e-4,
            out: None,
            seed: 0,
            threads: default_threads(),
            corrupt: None,
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

/// Writes `{"command": ..., <config fields>}` into `dir`.
pub fn write_resolved<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<(), CliError> {
    let path = dir.join(RESOLVED_CONFIG_FILE);
    let text = serde_json::to_string_pretty(&Resolved { command, config }).map_err(daffnet_core::Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}
