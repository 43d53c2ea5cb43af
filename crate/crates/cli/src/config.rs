//! Run configuration: a JSON document with every knob of every command.
//! Missing keys take defaults; unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dse_core::bridge::{BridgeSchedule, EpsSource};
use dse_core::despeckle::{BlindSpotConfig, KernelSelection, MaskReplacement};
use dse_core::latent::CodecTrainConfig;
use dse_core::metrics::SegmenterConfig;
use dse_core::synth::SceneSpec;
use dse_core::tile::SplitSpec;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub schedule: ScheduleConfig,
    /// Number of reverse sampling steps.
    pub steps: usize,
    pub eps: EpsConfig,
    pub codec: CodecConfig,
    pub train: TrainSection,
    pub codec_train: CodecTrainSection,
    pub despeckle: DespeckleConfig,
    pub blindspot: BlindSpotSection,
    pub speckle: SpeckleConfig,
    pub ensemble: EnsembleConfig,
    pub segmenter: SegmenterSection,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 20,
            scene: SceneConfig::default(),
            split: SplitConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 200,
            eps: EpsConfig::default(),
            codec: CodecConfig::default(),
            train: TrainSection::default(),
            codec_train: CodecTrainSection::default(),
            despeckle: DespeckleConfig::default(),
            blindspot: BlindSpotSection::default(),
            speckle: SpeckleConfig::default(),
            ensemble: EnsembleConfig::default(),
            segmenter: SegmenterSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub water_level: f64,
    pub smoothness: usize,
    pub looks: f64,
    pub n_timesteps: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            size: s.size,
            water_level: s.water_level,
            smoothness: s.smoothness,
            looks: s.looks,
            n_timesteps: s.n_timesteps,
        }
    }
}

impl SceneConfig {
    pub fn spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            size: self.size,
            water_level: self.water_level,
            smoothness: self.smoothness,
            looks: self.looks,
            seed,
            n_timesteps: self.n_timesteps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_frac: self.train,
            val_frac: self.val,
            test_frac: self.test,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub variance_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            variance_scale: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> dse_core::error::Result<BridgeSchedule> {
        BridgeSchedule::new(self.total_steps, self.variance_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsKindConfig {
    StandardNormal,
    /// Standardized EO latent values of the corpus at `paths.data`.
    TargetEmpirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsConfig {
    pub kind: EpsKindConfig,
    pub scale: f64,
}

impl Default for EpsConfig {
    fn default() -> Self {
        Self {
            kind: EpsKindConfig::StandardNormal,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Pool,
    /// Loaded from `paths.codec`.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Pool,
            factor: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub time_dim: usize,
    /// SAR acquisitions per example used as conditioning.
    pub temporal: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 2e-4,
            width: 32,
            time_dim: 32,
            temporal: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub latent_channels: usize,
    pub factor: usize,
    pub hidden: usize,
    pub batch_size: usize,
}

impl Default for CodecTrainSection {
    fn default() -> Self {
        let c = CodecTrainConfig::default();
        Self {
            epochs: c.epochs,
            lr: c.lr,
            latent_channels: c.latent_channels,
            factor: c.factor,
            hidden: c.hidden,
            batch_size: c.batch_size,
        }
    }
}

impl CodecTrainSection {
    pub fn build(&self, seed: u64) -> CodecTrainConfig {
        CodecTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            latent_channels: self.latent_channels,
            factor: self.factor,
            hidden: self.hidden,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DespeckleMethod {
    None,
    Kernel,
    /// Trained blind-spot network; loaded from `paths.denoiser` when set.
    Blindspot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DespeckleConfig {
    pub method: DespeckleMethod,
    pub selection: KernelSelection,
    /// Known looks enable analytic bias correction.
    pub looks: Option<f64>,
    /// Despeckle SAR inside the translation pipeline.
    pub in_pipeline: bool,
}

impl Default for DespeckleConfig {
    fn default() -> Self {
        Self {
            method: DespeckleMethod::Kernel,
            selection: KernelSelection::MinLocalVariance,
            looks: None,
            in_pipeline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlindSpotSection {
    pub mask_fraction: f64,
    pub replacement: MaskReplacement,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for BlindSpotSection {
    fn default() -> Self {
        let c = BlindSpotConfig::default();
        Self {
            mask_fraction: c.mask_fraction,
            replacement: c.replacement,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            hidden: c.hidden,
        }
    }
}

impl BlindSpotSection {
    pub fn build(&self, seed: u64, looks: Option<f64>) -> BlindSpotConfig {
        BlindSpotConfig {
            mask_fraction: self.mask_fraction,
            replacement: self.replacement,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            hidden: self.hidden,
            seed,
            looks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeckleConfig {
    pub looks: f64,
}

impl Default for SpeckleConfig {
    fn default() -> Self {
        Self { looks: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { k: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSection {
    pub hidden: usize,
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        let c = SegmenterConfig::default();
        Self {
            hidden: c.hidden,
            kernel: c.kernel,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
        }
    }
}

impl SegmenterSection {
    pub fn build(&self, seed: u64) -> SegmenterConfig {
        SegmenterConfig {
            hidden: self.hidden,
            kernel: self.kernel,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Input locations. Resolved to absolute paths before a run is recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub input: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
}

impl PathsConfig {
    fn resolve_one(p: &mut PathBuf) -> Result<(), CliError> {
        *p = std::fs::canonicalize(&*p).map_err(|e| CliError::Runtime(format!("input {}: {e}", p.display())))?;
        Ok(())
    }

    pub fn resolve(&mut self) -> Result<(), CliError> {
        for p in [&mut self.data, &mut self.model, &mut self.codec, &mut self.denoiser, &mut self.pred]
            .into_iter()
            .flatten()
        {
            Self::resolve_one(p)?;
        }
        for p in self.input.iter_mut().chain(self.runs.iter_mut()) {
            Self::resolve_one(p)?;
        }
        Ok(())
    }
}

/// Builds the reverse-process noise source. `pool` supplies raw values for
/// the target-empirical kind.
pub fn eps_source(cfg: &EpsConfig, pool: impl FnOnce() -> Result<Vec<f64>, CliError>) -> Result<EpsSource, CliError> {
    let src = match cfg.kind {
        EpsKindConfig::StandardNormal => EpsSource::standard_normal(cfg.scale),
        EpsKindConfig::TargetEmpirical => EpsSource::target_empirical(&pool()?, cfg.scale),
    };
    src.map_err(CliError::from)
}

/// Parses a config document. Accepts either a bare [`RunConfig`] or a
/// `run.json` record, whose `command` must match.
pub fn parse_config(text: &str, command: &str) -> Result<RunConfig, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
    let is_record = value.get("command").is_some() && value.get("config").is_some();
    let cfg_value = if is_record {
        let recorded = value["command"].as_str().unwrap_or_default();
        if recorded != command {
            return Err(CliError::Usage(format!(
                "run record is for `{recorded}`, not `{command}`"
            )));
        }
        value["config"].clone()
    } else {
        value
    };
    serde_json::from_value(cfg_value).map_err(|e| CliError::Usage(format!("config: {e}")))
}
