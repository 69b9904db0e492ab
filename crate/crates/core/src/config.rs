//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [model]      # DiTConfig
//! depth = 4
//!
//! [tasks]      # TaskMixture
//! warmup_fraction = 0.05
//! [tasks.weights]
//! MonoVideoNVS = 1.0
//!
//! [data]       # EpisodeParams
//! [optim]      # OptimConfig
//! [train]
//! steps = 20000
//! [sample]
//! [eval]
//! [ablate]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeParams;
use crate::error::{Error, Result};
use crate::model::{DiTConfig, TauSampling};
use crate::optim::OptimConfig;
use crate::tasking::TaskMixture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Episodes per step.
    pub batch: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Archives written by `gen-data` to train on instead of drawing
    /// episodes procedurally.
    pub data_dir: Option<PathBuf>,
    /// Diffusion-time distribution.
    pub tau: TauSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            checkpoint_every: 500,
            data_dir: None,
            tau: TauSampling::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub episodes: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { episodes: 16 }
    }
}

/// What `sample` generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: Option<PathBuf>,
    pub task: String,
    pub context_views: usize,
    pub context_frames: usize,
    pub target_views: usize,
    pub target_frames: usize,
    /// Forces the target camera path (`static`, `orbit`, ...).
    pub target_trajectory: Option<crate::world::TrajectoryKind>,
    pub episodes: usize,
    /// Euler steps.
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            task: "MonoVideoNVS".into(),
            context_views: 1,
            context_frames: 3,
            target_views: 1,
            target_frames: 3,
            target_trajectory: None,
            episodes: 4,
            steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes per evaluated task.
    pub episodes: usize,
    /// Euler steps used when sampling for evaluation.
    pub sampler_steps: usize,
    pub align_scale: bool,
    /// Frames per clip for held-out video evaluation (ablation).
    pub context_frames: usize,
    pub target_frames: usize,
    /// Where `eval` looks for `sample` output; defaults to `<out>/samples`.
    pub samples_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 16,
            sampler_steps: 10,
            align_scale: true,
            context_frames: 3,
            target_frames: 3,
            samples_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Training seeds; every variant is trained once per seed.
    pub seeds: Vec<u64>,
    /// Steps per variant and seed; `None` uses `train.steps`.
    pub steps: Option<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required, either here or on the command line.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub model: DiTConfig,
    pub tasks: TaskMixture,
    pub data: EpisodeParams,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub gen_data: GenDataConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            model: DiTConfig::default(),
            tasks: TaskMixture::default(),
            data: EpisodeParams::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            gen_data: GenDataConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("no seed: set `seed` in the config or pass --seed".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.model.validate()?;
        self.tasks.validate()?;
        self.data.validate()?;
        self.optim.validate()?;
        self.train.tau.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.eval.sampler_steps == 0 || self.sample.steps == 0 {
            return Err(Error::Config("sampler steps must be positive".into()));
        }
        let s = &self.sample;
        if s.target_views == 0 || s.target_frames == 0 {
            return Err(Error::Config("sample shapes must be positive".into()));
        }
        if self.eval.context_frames == 0 || self.eval.target_frames == 0 {
            return Err(Error::Config("eval shapes must be positive".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds is empty".into()));
        }
        let (w, h) = (self.data.width, self.data.height);
        if w % self.model.patch_s != 0 || h % self.model.patch_s != 0 {
            return Err(Error::Config(format!(
                "{w}x{h} frames do not divide into {} pixel patches",
                self.model.patch_s
            )));
        }
        Ok(())
    }
}
