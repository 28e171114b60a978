//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use porestack::autodiff::KlDirection;
use porestack::bulk::DEFAULT_STEPS;
use porestack::features::FeatureSet;
use porestack::models::{Family, ModelSpec};
use porestack::optim::AdamConfig;
use porestack::stacking::TrainConfig;
use porestack::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "experiment.toml";
pub const DEVICE_ENV: &str = "PORESTACK_DEVICE";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
    /// Best available backend; currently always the CPU.
    Auto,
}

impl Device {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(Device::Cpu),
            "auto" => Ok(Device::Auto),
            other => Err(CliError::unsupported(format!("device `{other}` is not available; use cpu or auto"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Ensemble directory, relative to the experiment directory.
    pub dir: PathBuf,
    /// Simulations produced by `generate`.
    pub simulations: usize,
    /// Simulations assigned to training; the rest validate.
    pub train_count: usize,
    /// Optional `[height, width]` border crop applied by `import`.
    pub crop: Option<[usize; 2]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            simulations: 6,
            train_count: 5,
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            batch_size: t.batch_size,
            epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

/// Architecture fields of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub modes: usize,
    pub fourier_layers: usize,
    pub u_fourier_layers: usize,
    pub tau_blocks: usize,
    pub alpha: f64,
    pub kl_direction: KlDirection,
}

impl FamilyConfig {
    pub fn from_spec(s: &ModelSpec) -> Self {
        Self {
            hidden: s.hidden,
            kernel: s.kernel,
            layers: s.layers,
            modes: s.modes,
            fourier_layers: s.fourier_layers,
            u_fourier_layers: s.u_fourier_layers,
            tau_blocks: s.tau_blocks,
            alpha: s.alpha,
            kl_direction: s.kl_direction,
        }
    }

    fn defaults(family: Family) -> Self {
        Self::from_spec(&ModelSpec::new(family, 1, 1, 1))
    }
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self::defaults(Family::Convlstm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub convlstm: FamilyConfig,
    pub ufno: FamilyConfig,
    pub tau: FamilyConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            convlstm: FamilyConfig::defaults(Family::Convlstm),
            ufno: FamilyConfig::defaults(Family::Ufno),
            tau: FamilyConfig::defaults(Family::Tau),
        }
    }
}

impl ModelsConfig {
    pub fn get(&self, family: Family) -> &FamilyConfig {
        match family {
            Family::Convlstm => &self.convlstm,
            Family::Ufno => &self.ufno,
            Family::Tau => &self.tau,
        }
    }

    pub fn get_mut(&mut self, family: Family) -> &mut FamilyConfig {
        match family {
            Family::Convlstm => &mut self.convlstm,
            Family::Ufno => &mut self.ufno,
            Family::Tau => &mut self.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BulkConfig {
    /// Time steps at which bulk properties are sampled.
    pub steps: Vec<usize>,
}

impl Default for BulkConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives simulation seeds, the split, initialization and batch order.
    pub seed: u64,
    pub device: Device,
    pub dtype: Dtype,
    /// Input frames per window.
    pub m: usize,
    /// Predicted frames per window.
    pub n: usize,
    /// Correction levels on top of the base network.
    pub levels: usize,
    /// Base-network input channels: 4 physical or 7 with engineered features.
    pub features: usize,
    pub families: Vec<Family>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub training: TrainingConfig,
    pub models: ModelsConfig,
    pub bulk: BulkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: Device::Cpu,
            dtype: Dtype::F32,
            m: 5,
            n: 5,
            levels: 3,
            features: 7,
            families: Family::ALL.to_vec(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            training: TrainingConfig::default(),
            models: ModelsConfig::default(),
            bulk: BulkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_set()?;
        if self.m == 0 || self.n == 0 {
            return Err(CliError::config("m and n must be positive"));
        }
        if self.families.is_empty() {
            return Err(CliError::config("at least one model family is required"));
        }
        if self.data.train_count == 0 || self.data.train_count >= self.data.simulations {
            return Err(CliError::config(format!(
                "data.train_count must be in 1..{}",
                self.data.simulations
            )));
        }
        self.synth.validate()?;
        self.train_config().validate()?;
        for &f in &self.families {
            self.spec(f)?.validate()?;
        }
        Ok(())
    }

    pub fn feature_set(&self) -> Result<FeatureSet> {
        FeatureSet::from_count(self.features).map_err(|e| CliError::config(e.to_string()))
    }

    /// Level-0 architecture of `family`.
    pub fn spec(&self, family: Family) -> Result<ModelSpec> {
        let f = self.models.get(family);
        Ok(ModelSpec {
            hidden: f.hidden,
            kernel: f.kernel,
            layers: f.layers,
            modes: f.modes,
            fourier_layers: f.fourier_layers,
            u_fourier_layers: f.u_fourier_layers,
            tau_blocks: f.tau_blocks,
            alpha: f.alpha,
            kl_direction: f.kl_direction,
            ..ModelSpec::new(family, self.m, self.n, self.feature_set()?.count())
        })
    }

    /// Training settings for one stage; `stream` separates the seeds of
    /// different families and levels.
    pub fn train_config_for(&self, stream: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, stream),
            ..self.train_config()
        }
    }

    fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            batch_size: t.batch_size,
            max_epochs: t.epochs,
            patience: t.patience,
            seed: self.seed,
        }
    }

    /// Configuration of the `i`-th generated simulation.
    pub fn synth_for(&self, i: usize) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, &format!("sim/{i}")),
            ..self.synth.clone()
        }
    }
}

/// Child seed for a named stream, stable across runs and platforms.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) >> 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_training_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.training.lr, 5e-4);
        assert_eq!(c.training.batch_size, 4);
        assert_eq!(c.training.epochs, 100);
        assert_eq!((c.training.beta1, c.training.beta2), (0.9, 0.999));
        assert_eq!(c.features, 7);
        c.validate().unwrap();
    }

    #[test]
    fn default_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("learning_rate = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("[training]\nlearnrate = 0.1").is_err());
    }

    #[test]
    fn bad_feature_count() {
        let err = ExperimentConfig::from_toml("features = 5").unwrap_err();
        assert_eq!(err.category.as_str(), "config");
    }

    #[test]
    fn spec_uses_family_fields() {
        let mut c = ExperimentConfig::default();
        c.models.ufno.modes = 3;
        c.features = 4;
        let s = c.spec(Family::Ufno).unwrap();
        assert_eq!((s.modes, s.in_channels, s.m, s.n), (3, 4, 5, 5));
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(0, "sim/0"), derive_seed(0, "sim/1"));
        assert_ne!(derive_seed(0, "sim/0"), derive_seed(1, "sim/0"));
        assert_eq!(derive_seed(7, "train/tau"), derive_seed(7, "train/tau"));
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            seed in 0u64..(1 << 62),
            lr in 1e-8f64..1.0,
            beta1 in 0.0f64..1.0,
            alpha in 0.0f64..10.0,
            k_min in 1e-12f64..1e-2,
            m in 1usize..10,
            levels in 0usize..4,
            four in any::<bool>(),
            crop in proptest::option::of((4usize..300, 4usize..300)),
            steps in proptest::collection::btree_set(0usize..200, 0..12),
        ) {
            let mut c = ExperimentConfig { seed, m, n: m, levels, ..ExperimentConfig::default() };
            c.features = if four { 4 } else { 7 };
            c.training.lr = lr;
            c.training.beta1 = beta1;
            c.models.tau.alpha = alpha;
            c.synth.k_min = k_min;
            c.data.crop = crop.map(|(h, w)| [h, w]);
            c.bulk.steps = steps.into_iter().collect();
            let text = c.to_toml().unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
