//! Run configuration: everything a `train` invocation needs, as one JSON
//! document.

use std::path::{Path, PathBuf};

use crate_alpha_core::data::SubspaceDatasetSpec;
use crate_alpha_core::layers::BlockVariant;
use crate_alpha_core::model::{InputSpec, ModelConfig, SizeName};
use crate_alpha_core::optim::TrainConfig;
use crate_alpha_core::srr::RateParams;
use crate_alpha_core::Precision;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "CRATE_ALPHA_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Cifar10 {
        /// Dataset root; falls back to `CRATE_ALPHA_DATA`.
        #[serde(default)]
        root: Option<PathBuf>,
        /// Use only the first `n` training images.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "yes")]
        augment: bool,
    },
    Subspace {
        #[serde(default)]
        spec: SubspaceDatasetSpec,
        /// Held-out samples drawn from the same subspaces.
        #[serde(default = "default_test_samples")]
        test_samples: usize,
    },
}

fn yes() -> bool {
    true
}

fn default_test_samples() -> usize {
    512
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Cifar10 {
            root: None,
            train_limit: None,
            test_limit: None,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Train rows are written every this many steps.
    pub log_every: usize,
    /// Rate diagnostics every this many steps; `None` means once per epoch.
    pub rates_every: Option<usize>,
    /// Checkpoint every this many steps; `None` means once per epoch.
    pub checkpoint_every: Option<usize>,
    /// Held-out samples used for rate diagnostics.
    pub diag_samples: usize,
    /// Training samples used to measure the training loss at the start and
    /// end of a run.
    pub train_eval_samples: usize,
    pub rates: RateParams,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            log_every: 50,
            rates_every: None,
            checkpoint_every: None,
            diag_samples: 64,
            train_eval_samples: 1024,
            rates: RateParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub diagnostics: DiagnosticsConfig,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::preset(SizeName::Tiny);
        model.input = InputSpec::Image {
            image_side: 32,
            channels: 3,
            patch: 4,
        };
        model.num_classes = 10;
        Self {
            model,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        canonical(&self.to_value())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.diagnostics.rates.validate().map_err(usage)?;
        if self.diagnostics.log_every == 0 {
            return Err(CliError::Usage("diagnostics.log_every must be at least 1".into()));
        }
        if let DataConfig::Subspace { spec, .. } = &self.data {
            spec.validate().map_err(usage)?;
            if self.model.input != spec.input() {
                return Err(CliError::Usage(format!(
                    "model.input {:?} does not match the subspace data ({:?})",
                    self.model.input,
                    spec.input()
                )));
            }
            if self.model.num_classes != spec.k_true {
                return Err(CliError::Usage(format!(
                    "model.num_classes {} must equal data.spec.k_true {}",
                    self.model.num_classes, spec.k_true
                )));
            }
        }
        Ok(())
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<String>,
    pub size: Option<String>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) -> Result<(), CliError> {
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(p) = self.precision {
            config.precision = p;
        }
        if let Some(out) = &self.out_dir {
            config.out_dir = out.clone();
        }
        if let Some(v) = &self.variant {
            config.model.variant = parse_variant(v)?;
        }
        if let Some(s) = &self.size {
            let size = parse_size(s)?;
            let (depth, width, heads) = size.dims().expect("presets have dims");
            config.model.size_name = size;
            config.model.depth = depth;
            config.model.width = width;
            config.model.heads = heads;
        }
        Ok(())
    }
}

pub fn parse_variant(name: &str) -> Result<BlockVariant, CliError> {
    BlockVariant::from_short_name(name)
        .ok_or_else(|| CliError::Usage(format!("unknown variant {name:?} (expected vanilla, oc, ocd or ocdr)")))
}

pub fn parse_size(name: &str) -> Result<SizeName, CliError> {
    SizeName::parse(name).filter(|s| s.dims().is_some()).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown size {name:?} (expected tiny, small, base, large or huge)"
        ))
    })
}

fn usage(e: crate_alpha_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// `serde_json::Value` keeps object keys sorted, so printing a value parsed
/// from any key order gives one canonical text.
pub fn canonical(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("JSON value prints")
}
