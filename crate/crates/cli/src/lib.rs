//! Library side of the command-line tool, split out so integration and
//! acceptance tests can drive the same code paths as the binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod meshio;
pub mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "viewfuse",
    version,
    about = "Multi-view-to-mesh fusion: synthetic scenes, de-conflict SDF fusion, evaluation, and the alignment-attention demo"
)]
pub struct Cli {
    /// Structured-text configuration file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap; 1 gives bit-exact runs, 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Arithmetic width (this build supports f64).
    #[arg(long, global = true)]
    pub precision: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render an analytic scene into a multi-view dataset directory.
    Synth {
        /// Scene preset (sphere, spherebox, box, torus, twoblobs) or a
        /// scene description file.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        views: Option<usize>,
        /// Image resolution (square).
        #[arg(long)]
        res: Option<usize>,
        /// Max recorded-pose rotation perturbation in degrees.
        #[arg(long)]
        perturb: Option<f64>,
        /// Corruption spec, e.g. "views=0,1,2,3:hue=120:brightness=0:half=left".
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a scene field against a dataset and extract the mesh.
    Fuse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted mesh or re-rendered images against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy latent denoiser and verify the staged noise schedule.
    GtaDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        stage_multiplier: Option<f64>,
    },
}

/// Parse a corruption spec string like
/// `views=0,1,2,3:hue=120:brightness=0.1:half=left`.
pub fn parse_corrupt_spec(spec: &str) -> Result<viewfuse_core::synth::CorruptionSpec> {
    use viewfuse_core::synth::{CorruptionSpec, HalfImage};
    let mut out = CorruptionSpec {
        views: Vec::new(),
        hue_deg: 0.0,
        brightness: 0.0,
        half_image: None,
    };
    for part in spec.split(':') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("corrupt spec entry '{part}' is not key=value"))?;
        match key {
            "views" => {
                out.views = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()?;
            }
            "hue" => out.hue_deg = value.parse()?,
            "brightness" => out.brightness = value.parse()?,
            "half" => {
                out.half_image = Some(match value {
                    "left" => HalfImage::Left,
                    "right" => HalfImage::Right,
                    "top" => HalfImage::Top,
                    "bottom" => HalfImage::Bottom,
                    other => anyhow::bail!("unknown half-image '{other}'"),
                });
            }
            other => anyhow::bail!("unknown corrupt spec key '{other}'"),
        }
    }
    Ok(out)
}

/// Resolve the effective configuration: file, then flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(precision) = &cli.precision {
        cfg.precision = match precision.as_str() {
            "f64" => config::Precision::F64,
            "f32" => config::Precision::F32,
            other => anyhow::bail!("unknown precision '{other}'"),
        };
    }
    match &cli.command {
        Command::Synth {
            scene,
            views,
            res,
            perturb,
            corrupt,
            ..
        } => {
            if let Some(s) = scene {
                cfg.synth.scene = s.clone();
            }
            if let Some(v) = views {
                cfg.synth.views = *v;
            }
            if let Some(r) = res {
                cfg.synth.resolution = *r;
            }
            if let Some(p) = perturb {
                cfg.synth.perturb_deg = *p;
            }
            if let Some(c) = corrupt {
                cfg.synth.corrupt = Some(parse_corrupt_spec(c)?);
            }
        }
        Command::GtaDemo {
            steps,
            stage_multiplier,
            ..
        } => {
            if let Some(s) = steps {
                cfg.gta.steps = *s;
            }
            if let Some(m) = stage_multiplier {
                cfg.gta.stage_multiplier = *m;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    cfg.propagate_seed();
    Ok(cfg)
}

/// Run a parsed command; errors map to exit codes in the binary.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        cfg.threads
    };
    // the pool is process-global; later calls with the same size are no-ops
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();

    match &cli.command {
        Command::Synth { out, .. } => commands::cmd_synth(&cfg, out),
        Command::Fuse { dataset, out } => commands::cmd_fuse(&cfg, dataset, out),
        Command::Eval { pred, gt, out } => commands::cmd_eval(&cfg, pred, gt, out),
        Command::GtaDemo { out, .. } => commands::cmd_gta_demo(&cfg, out),
    }
}

/// Exit code classification: 2 usage (handled by clap), 3 dataset
/// validation, 4 numerical abort, 1 anything else.
pub fn classify_error(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<commands::DatasetFailure>().is_some() {
            return 3;
        }
        if let Some(core) = cause.downcast_ref::<viewfuse_core::Error>() {
            return match core {
                viewfuse_core::Error::Dataset(_) => 3,
                viewfuse_core::Error::Numerical(_) => 4,
                _ => 1,
            };
        }
    }
    1
}
