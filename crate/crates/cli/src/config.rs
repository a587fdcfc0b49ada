//! Run configuration: one JSON document with a section per stage.
//!
//! Missing sections take the phantom-scale defaults; unknown keys anywhere
//! are rejected. The top-level `seed` overrides the per-section seeds.

use std::fs;
use std::path::{Path, PathBuf};

use ctlesion::cyclegan::{LossWeights, TrainConfig, TrainSetup};
use ctlesion::metrics::RegionAxes;
use ctlesion::nets::{DiscriminatorConfig, GeneratorConfig};
use ctlesion::phantom::PhantomSpec;
use ctlesion::pipeline::PreprocessConfig;
use ctlesion::postproc::PostprocConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsSection {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl NetsSection {
    pub fn phantom() -> Self {
        NetsSection {
            generator: GeneratorConfig::phantom(),
            discriminator: DiscriminatorConfig::phantom(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleganSection {
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl CycleganSection {
    pub fn phantom() -> Self {
        CycleganSection {
            train: TrainConfig::phantom(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub regions: RegionAxes,
    pub min_voxels: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            regions: RegionAxes::default(),
            min_voxels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub spec: PhantomSpec,
    pub train_healthy: usize,
    pub train_infected: usize,
    pub test: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            spec: PhantomSpec::default(),
            train_healthy: 20,
            train_infected: 20,
            test: 10,
        }
    }
}

/// Default locations, relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub run: PathBuf,
    pub segment: PathBuf,
    pub eval: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            run: "run".into(),
            segment: "segment".into(),
            eval: "eval".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "PreprocessConfig::phantom")]
    pub imgvol: PreprocessConfig,
    #[serde(default = "NetsSection::phantom")]
    pub nets: NetsSection,
    #[serde(default = "CycleganSection::phantom")]
    pub cyclegan: CycleganSection,
    #[serde(default)]
    pub postproc: PostprocConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::phantom()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Phantom,
    Paper,
}

impl RunConfig {
    pub fn phantom() -> Self {
        RunConfig {
            seed: 0,
            imgvol: PreprocessConfig::phantom(),
            nets: NetsSection::phantom(),
            cyclegan: CycleganSection::phantom(),
            postproc: PostprocConfig::default(),
            metrics: MetricsSection::default(),
            phantom: PhantomSection::default(),
            paths: Paths::default(),
        }
    }

    /// Published training settings at full 256-pixel resolution.
    pub fn paper() -> Self {
        let setup = TrainSetup::paper();
        RunConfig {
            imgvol: PreprocessConfig::paper(),
            nets: NetsSection {
                generator: setup.generator,
                discriminator: setup.discriminator,
            },
            cyclegan: CycleganSection {
                train: setup.train,
                weights: setup.weights,
            },
            ..Self::phantom()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Phantom => Self::phantom(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Push the top-level seed into every section that carries one.
    pub fn resolved(mut self) -> Self {
        self.cyclegan.train.seed = self.seed;
        self.postproc.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            generator: self.nets.generator.clone(),
            discriminator: self.nets.discriminator.clone(),
            train: self.cyclegan.train.clone(),
            weights: self.cyclegan.weights.clone(),
        }
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.imgvol.validate()?;
        self.setup().validate()?;
        self.postproc.validate()?;
        self.metrics.regions.validate()?;
        if self.metrics.min_voxels == 0 {
            return Err(CliError::Config("metrics.min_voxels must be >= 1".into()));
        }
        self.phantom.spec.validate()?;
        let p = &self.phantom;
        if p.train_healthy == 0 || p.train_infected == 0 || p.test == 0 {
            return Err(CliError::Config("phantom volume counts must all be >= 1".into()));
        }
        if self.imgvol.crop_side != self.nets.generator.input_side {
            return Err(CliError::Config(format!(
                "imgvol.crop_side {} must equal nets.generator.input_side {}",
                self.imgvol.crop_side, self.nets.generator.input_side
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
