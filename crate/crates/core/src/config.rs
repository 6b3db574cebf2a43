//! Experiment configuration: one serializable record holding every
//! hyperparameter, with defaults matching the experiments' reference
//! settings (window size 5, lambda 1000 for MNIST / 100 for CIFAR,
//! Adam at 1e-4).

use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::fedsim::FederatedConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which pipeline variant to run. Exactly one is active per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Obfuscating GAN + feature extractor + mixup.
    Full,
    /// Lambda forced to zero: the generator is a plain feature-space CGAN.
    NoObf,
    /// Discriminator consumes raw images instead of extracted features.
    NoExtractor,
    /// The federated model trains on generated images directly.
    NoMixup,
    /// Baseline: the federated model trains on the real images.
    NoDefense,
}

impl Branch {
    pub const ALL: [Branch; 5] = [
        Branch::Full,
        Branch::NoObf,
        Branch::NoExtractor,
        Branch::NoMixup,
        Branch::NoDefense,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Full => "full",
            Branch::NoObf => "no_obf",
            Branch::NoExtractor => "no_extractor",
            Branch::NoMixup => "no_mixup",
            Branch::NoDefense => "no_defense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Branch::Full),
            "no_obf" => Ok(Branch::NoObf),
            "no_extractor" => Ok(Branch::NoExtractor),
            "no_mixup" => Ok(Branch::NoMixup),
            "no_defense" => Ok(Branch::NoDefense),
            other => Err(Error::InvalidConfig(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root directory; falls back to `FEDVEIL_DATA_DIR`, then `./data`.
    pub root: Option<PathBuf>,
    /// Training subset size (None = whole split).
    pub train_limit: Option<usize>,
    /// Test subset size (None = whole split).
    pub test_limit: Option<usize>,
    /// Use the 20 coarse CIFAR-100 labels instead of the 100 fine ones.
    pub cifar100_coarse: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_limit: Some(10_000),
            test_limit: Some(2_000),
            cifar100_coarse: false,
        }
    }
}

/// Where the feature extractor kernels come from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Path to a pretrained first-conv weight file (raw little-endian f32,
    /// 64*3*7*7 values). When absent, seeded random kernels are used.
    pub weights_path: Option<PathBuf>,
    /// Expected SHA-256 of the weight file (hex); checked when set.
    pub weights_sha256: Option<String>,
    /// Seed for the random-kernel fallback.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Weight of the obfuscation loss; None picks 1000 for MNIST and 100
    /// for CIFAR.
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub label_embed_dim: usize,
    pub learning_rate: f64,
    /// Generator steps per discriminator step.
    pub gen_steps: usize,
    /// Generator feature width at the 4x4 stage.
    pub gen_base_channels: usize,
    /// Discriminator feature width after the first convolution.
    pub disc_base_channels: usize,
    /// Use the literal log(1 - D) generator loss instead of the
    /// non-saturating -log D form.
    pub saturating_generator_loss: bool,
    /// Real-label smoothing for the discriminator (0 disables; stabilizer,
    /// off by default).
    pub label_smoothing: f64,
    pub extractor: ExtractorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            epochs: 30,
            batch_size: 64,
            noise_dim: 100,
            label_embed_dim: 32,
            learning_rate: 1e-4,
            gen_steps: 1,
            gen_base_channels: 128,
            disc_base_channels: 64,
            saturating_generator_loss: false,
            label_smoothing: 0.0,
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Run the attacker stage of the pipeline.
    pub enabled: bool,
    /// Classes to attack; None attacks every class.
    pub classes: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    /// One conditional GAN over all classes instead of one GAN per class.
    pub conditional: bool,
    /// Reconstructions drawn per attacked class (fixed evaluation noise).
    pub reconstructions: usize,
    pub gen_base_channels: usize,
    pub disc_base_channels: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            classes: None,
            epochs: 30,
            batch_size: 64,
            conditional: false,
            reconstructions: 24,
            gen_base_channels: 64,
            disc_base_channels: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub branch: Branch,
    /// Expected per-window variance (v_e).
    pub expected_variance: f64,
    /// Window side length (s).
    pub window_size: usize,
    /// Mixing coefficient (mu).
    pub mu: f64,
    pub seed: u64,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub federated: FederatedConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            branch: Branch::Full,
            expected_variance: 0.4,
            window_size: 5,
            mu: 0.5,
            seed: 17,
            data: DataConfig::default(),
            gan: GanConfig::default(),
            federated: FederatedConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn dataset_name(&self) -> Result<DatasetName> {
        DatasetName::parse(&self.dataset)
    }

    /// The lambda in effect: explicit value, or the per-dataset default.
    pub fn lambda(&self) -> Result<f64> {
        if let Some(l) = self.gan.lambda {
            return Ok(l);
        }
        Ok(match self.dataset_name()? {
            DatasetName::Mnist => 1000.0,
            DatasetName::Cifar10 | DatasetName::Cifar100 => 100.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_name()?;
        if self.expected_variance < 0.0 {
            return Err(Error::InvalidConfig(
                "expected_variance must be non-negative".into(),
            ));
        }
        if self.window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidMixCoefficient(self.mu));
        }
        if self.lambda()? < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        if self.gan.batch_size == 0 || self.federated.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.gan.gen_steps == 0 {
            return Err(Error::InvalidConfig("gen_steps must be positive".into()));
        }
        self.federated.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Seed for one named pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage as u64)
    }
}

/// Pipeline stages that consume randomness. Each gets an independent
/// deterministic stream derived from the master seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stage {
    DataSubset = 1,
    Partition = 2,
    GanInit = 3,
    GanTraining = 4,
    Mixup = 5,
    Federated = 6,
    AttackerInit = 7,
    AttackerTraining = 8,
    Evaluation = 9,
}

/// SplitMix64 over (seed, stream): cheap, stable, and documented so runs
/// can be reproduced outside this crate.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
