use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{equivalent_spec, ArchSpec, Ratio, Variant};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::init::InitConfig;
use crate::ops::Activation;
use crate::optim::{EveConfig, L2Coverage, OptimizerKind, SgdConfig, L2_LAMBDA};
use crate::tensor::Precision;

/// Named starting points for the network shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    #[default]
    Cifar,
    CifarReduced,
    Small,
    Miniature,
}

impl ArchPreset {
    pub fn spec(self, variant: Variant, classes: usize) -> ArchSpec {
        match self {
            ArchPreset::Cifar => ArchSpec::cifar(variant, classes),
            ArchPreset::CifarReduced => ArchSpec::cifar_reduced(variant, classes),
            ArchPreset::Small => ArchSpec::small(variant, classes),
            ArchPreset::Miniature => ArchSpec::miniature(variant, classes),
        }
    }
}

impl FromStr for ArchPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cifar" => Ok(ArchPreset::Cifar),
            "cifar_reduced" => Ok(ArchPreset::CifarReduced),
            "small" => Ok(ArchPreset::Small),
            "miniature" => Ok(ArchPreset::Miniature),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

/// Size of the generated corpus when the dataset is `synthetic`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 512,
            test: 256,
            classes: 10,
        }
    }
}

/// Everything a training or evaluation run needs. Loaded from TOML; unset
/// keys take the defaults of the reference training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub preset: ArchPreset,
    pub k: usize,
    pub activation: Activation,
    /// Explicit width multiplier. When absent, untied-chain variants are
    /// calibrated to the IRRCNN parameter count.
    pub width: Option<Ratio>,
    pub calibrate_width: bool,
    /// Full architecture; replaces `preset` when present.
    pub architecture: Option<ArchSpec>,
    pub dropout: f64,

    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
    pub augment: bool,

    pub optimizer: OptimizerKind,
    pub sgd: SgdConfig,
    pub eve: EveConfig,
    pub l2: f64,
    pub l2_coverage: L2Coverage,
    pub init: InitConfig,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    /// Fixed seeds and zeroed wall-clock columns so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Irrcnn,
            preset: ArchPreset::Cifar,
            k: 2,
            activation: Activation::Relu,
            width: None,
            calibrate_width: true,
            architecture: None,
            dropout: crate::arch::TRANSITION_DROPOUT,
            dataset: DatasetKind::Cifar10,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
            augment: true,
            optimizer: OptimizerKind::Sgd,
            sgd: SgdConfig::default(),
            eve: EveConfig::default(),
            l2: L2_LAMBDA,
            l2_coverage: L2Coverage::BlockWeights,
            init: InitConfig::default(),
            epochs: 350,
            batch_size: 128,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            precision: Precision::Standard,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes().unwrap_or(self.synthetic.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config(format!(
                "L2 strength {} is negative",
                self.l2
            )));
        }
        self.init.validate()?;
        if self.dataset == DatasetKind::Synthetic
            && (self.synthetic.classes < 2 || self.synthetic.train == 0)
        {
            return Err(Error::Config(
                "synthetic corpus needs ≥ 2 classes and ≥ 1 training image".into(),
            ));
        }
        self.arch()?;
        Ok(())
    }

    /// The architecture this run trains.
    pub fn arch(&self) -> Result<ArchSpec> {
        let mut base = match &self.architecture {
            Some(a) => a.clone(),
            None => self.preset.spec(Variant::Irrcnn, self.classes()),
        };
        base.classes = self.classes();
        base.k = self.k;
        base.activation = self.activation;
        for stage in &mut base.stages {
            stage.dropout = self.dropout;
        }
        if let Some(w) = self.width {
            base.width = w;
            let spec = base.with_variant(self.variant);
            spec.validate()?;
            return Ok(spec);
        }
        let spec = if self.calibrate_width {
            equivalent_spec(&base, self.variant)?
        } else {
            base.with_variant(self.variant)
        };
        spec.validate()?;
        Ok(spec)
    }
}
