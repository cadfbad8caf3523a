//! Run configuration: one structured-text file covering every subcommand,
//! with command-line flags overriding file values. Unknown keys are errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use viewfuse_core::fusion::FusionConfig;
use viewfuse_core::gta::GtaConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap for data-parallel sections; 0 = all cores, 1 = bit-exact.
    pub threads: usize,
    /// Arithmetic width. This build computes in f64 only.
    pub precision: Precision,
    pub synth: SynthConfig,
    pub fuse: FusionConfig,
    pub eval: EvalConfig,
    pub gta: GtaDemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            precision: Precision::F64,
            synth: SynthConfig::default(),
            fuse: FusionConfig::default(),
            eval: EvalConfig::default(),
            gta: GtaDemoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Preset name or path to a scene description file.
    pub scene: String,
    pub views: usize,
    pub resolution: usize,
    pub perturb_deg: f64,
    pub corrupt: Option<viewfuse_core::synth::CorruptionSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scene: "spherebox".into(),
            views: 16,
            resolution: 128,
            perturb_deg: 0.0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub chamfer_samples: usize,
    pub iou_resolution: usize,
    /// Marching-cubes resolution when the ground truth is an analytic scene.
    pub gt_mesh_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chamfer_samples: 100_000,
            iou_resolution: 128,
            gt_mesh_resolution: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GtaDemoConfig {
    pub steps: u64,
    /// Scales the 8k/16k/24k stage thresholds for desk-sized runs.
    pub stage_multiplier: f64,
    pub lr: f64,
    pub eval_every: u64,
    pub scenes: Vec<String>,
    pub views: usize,
    pub resolution: usize,
    pub net: GtaConfig,
}

impl Default for GtaDemoConfig {
    fn default() -> Self {
        GtaDemoConfig {
            steps: 1200,
            stage_multiplier: 0.04,
            lr: 1e-3,
            eval_every: 50,
            scenes: vec!["sphere".into(), "box".into()],
            views: 16,
            resolution: 64,
            net: GtaConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision == Precision::F32 {
            bail!("precision = \"f32\" is not available in this build; use \"f64\"");
        }
        Ok(())
    }

    /// Seed every stochastic component from the run seed.
    pub fn propagate_seed(&mut self) {
        self.fuse.seed = self.seed;
    }
}
