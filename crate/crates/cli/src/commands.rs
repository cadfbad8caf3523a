//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array3;
use viewfuse_core::edm::NoiseSchedule;
use viewfuse_core::fusion::{self, FusionOutput};
use viewfuse_core::gta::{self, ConditionSet, GtaDenoiser};
use viewfuse_core::metrics::{self, OccupancyGrid, PointCloud};
use viewfuse_core::rng::{derive, Stream};
use viewfuse_core::synth::{self, AnalyticScene};

use crate::config::RunConfig;
use crate::dataset_io;
use crate::meshio;
use crate::report::{atomic_write, write_json, write_loss_curves, RunTimer};

/// Marker for dataset-validation failures (exit code 3).
#[derive(Debug)]
pub struct DatasetFailure(pub String);

impl std::fmt::Display for DatasetFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for DatasetFailure {}

fn as_dataset_failure(err: anyhow::Error) -> anyhow::Error {
    anyhow!(DatasetFailure(format!("{err:#}")))
}

fn load_scene(spec: &str) -> Result<AnalyticScene> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let scene: AnalyticScene =
            serde_json::from_str(&text).with_context(|| format!("parsing scene {spec}"))?;
        scene.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(scene)
    } else {
        AnalyticScene::preset(spec).map_err(|e| anyhow!("{e}"))
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let timer = RunTimer::start();
    let scene = load_scene(&cfg.synth.scene)?;
    let (set, truth) = synth::make_dataset(
        &scene,
        cfg.synth.views,
        cfg.synth.resolution,
        cfg.synth.perturb_deg,
        cfg.synth.corrupt.as_ref(),
        cfg.seed,
    )
    .map_err(|e| anyhow!("{e}"))?;
    dataset_io::save_dataset(out, &set, Some(&truth))?;
    log::info!(
        "wrote {} views at {}x{} to {}",
        set.n_views(),
        set.width,
        set.height,
        out.display()
    );
    timer.write_manifest(out, "synth", cfg.seed, cfg.threads, &cfg.synth)?;
    Ok(())
}

pub fn cmd_fuse(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    let timer = RunTimer::start();
    let set = dataset_io::validate_dataset(dataset_dir).map_err(as_dataset_failure)?;
    let truth = dataset_io::load_ground_truth(dataset_dir)?;

    let mut fuse_cfg = cfg.fuse.clone();
    fuse_cfg.seed = cfg.seed;
    let FusionOutput {
        model,
        state,
        report,
        renders,
    } = fusion::run_fusion(&set, &fuse_cfg).map_err(|e| match e {
        viewfuse_core::Error::Dataset(_) => as_dataset_failure(anyhow!("{e}")),
        other => anyhow!("{other}"),
    })?;

    std::fs::create_dir_all(out)?;

    let mesh = fusion::extract_mesh(&model, fuse_cfg.mesh_resolution).map_err(|e| anyhow!("{e}"))?;
    meshio::save_ply(&out.join("mesh.ply"), &mesh)?;

    if let Some(renders) = &renders {
        for (v, r) in renders.iter().enumerate() {
            let conflict_rgb = gray_to_rgb(&r.conflict);
            dataset_io::save_rgb(&out.join(format!("conflict_{v:04}.png")), &conflict_rgb)?;
            dataset_io::save_rgb(&out.join(format!("rerender_{v:04}.png")), &r.rgb)?;
        }
    } else {
        log::warn!("re-rendering disabled: conflict maps not written");
    }

    write_loss_curves(&out.join("loss_curves.csv"), &report.curves)?;

    // pose refinement summary, with errors against the truth when available
    #[derive(serde::Serialize)]
    struct PoseSummaryRow {
        view: usize,
        rotation_deg: f64,
        translation: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        rotation_error_vs_truth_deg: Option<f64>,
    }
    let truth_errors = truth
        .as_ref()
        .map(|t| fusion::pose_errors_vs_truth(&model, &set, t));
    let pose_rows: Vec<PoseSummaryRow> = (0..set.n_views())
        .map(|v| PoseSummaryRow {
            view: v,
            rotation_deg: report.pose_rotation_deg[v],
            translation: report.pose_translation_norm[v],
            rotation_error_vs_truth_deg: truth_errors.as_ref().map(|e| e[v]),
        })
        .collect();
    write_json(&out.join("pose_summary.json"), &pose_rows)?;

    #[derive(serde::Serialize)]
    struct FuseReport<'a> {
        skipped_steps: usize,
        excluded_views: &'a [usize],
        standard_ring: bool,
        mean_conflict_per_view: &'a [f64],
        per_view_psnr: &'a Option<Vec<f64>>,
        per_view_ssim: &'a Option<Vec<f64>>,
        mesh_vertices: usize,
        mesh_triangles: usize,
    }
    write_json(
        &out.join("report.json"),
        &FuseReport {
            skipped_steps: report.skipped_steps,
            excluded_views: &report.excluded_views,
            standard_ring: report.standard_ring,
            mean_conflict_per_view: &report.mean_conflict_per_view,
            per_view_psnr: &report.per_view_psnr,
            per_view_ssim: &report.per_view_ssim,
            mesh_vertices: mesh.n_vertices(),
            mesh_triangles: mesh.n_triangles(),
        },
    )?;

    crate::checkpoint::save_checkpoint(
        &out.join("checkpoint.bin"),
        &fuse_cfg,
        set.n_views(),
        &model,
        &state,
    )?;

    timer.write_manifest(out, "fuse", cfg.seed, cfg.threads, &fuse_cfg)?;
    log::info!("fusion complete: {} artifacts in {}", 6, out.display());
    Ok(())
}

fn gray_to_rgb(gray: &ndarray::Array2<f64>) -> Array3<f64> {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| gray[[y, x]])
}

#[derive(serde::Serialize)]
struct EvalReport {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    chamfer_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chamfer_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou_resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_view_psnr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_view_ssim: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ssim: Option<f64>,
    /// Intentionally unpopulated: perceptual metrics need a pretrained
    /// network this tool does not ship.
    lpips: Option<f64>,
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let timer = RunTimer::start();
    let report = if pred.extension().map(|e| e == "ply").unwrap_or(false) {
        eval_geometry(cfg, pred, gt)?
    } else if pred.is_dir() {
        eval_images(pred, gt)?
    } else {
        bail!(
            "--pred must be a .ply mesh or an image directory, got {}",
            pred.display()
        );
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_json(out, &report)?;
    if let Some(dir) = out.parent() {
        timer.write_manifest(dir, "eval", cfg.seed, cfg.threads, &cfg.eval)?;
    }
    log::info!("evaluation written to {}", out.display());
    Ok(())
}

fn eval_geometry(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<EvalReport> {
    let pred_mesh = meshio::load_ply(pred)?;
    let n_samples = cfg.eval.chamfer_samples;
    let res = cfg.eval.iou_resolution;

    // ground truth: either a mesh file or a dataset directory with an
    // analytic ground-truth record
    let (gt_cloud, gt_grid) = if gt.extension().map(|e| e == "ply").unwrap_or(false) {
        let gt_mesh = meshio::load_ply(gt)?;
        let cloud = PointCloud::new(gt_mesh.sample_surface(n_samples, cfg.seed ^ 0x9e37))
            .map_err(|e| anyhow!("{e}"))?;
        let grid = metrics::voxelize_mesh(&gt_mesh, res).map_err(|e| anyhow!("{e}"))?;
        (cloud, grid)
    } else if gt.is_dir() {
        let truth = dataset_io::load_ground_truth(gt)?
            .ok_or_else(|| anyhow!("{} has no ground_truth.json", gt.display()))?;
        let cloud = PointCloud::new(truth.scene.surface_samples(n_samples, cfg.seed ^ 0x9e37))
            .map_err(|e| anyhow!("{e}"))?;
        let grid = OccupancyGrid::from_inside_fn(res, |p| truth.scene.sdf(p) < 0.0)
            .map_err(|e| anyhow!("{e}"))?;
        (cloud, grid)
    } else {
        bail!("--gt must be a .ply mesh or a dataset directory");
    };

    let pred_cloud = PointCloud::new(pred_mesh.sample_surface(n_samples, cfg.seed ^ 0x51f1))
        .map_err(|e| anyhow!("{e}"))?;
    let chamfer = metrics::chamfer_distance(&pred_cloud, &gt_cloud);
    let pred_grid = metrics::voxelize_mesh(&pred_mesh, res).map_err(|e| anyhow!("{e}"))?;
    let iou = metrics::volume_iou(&pred_grid, &gt_grid).map_err(|e| anyhow!("{e}"))?;

    Ok(EvalReport {
        kind: "geometry".into(),
        chamfer_distance: Some(chamfer),
        volume_iou: Some(iou),
        chamfer_samples: Some(n_samples),
        iou_resolution: Some(res),
        per_view_psnr: None,
        per_view_ssim: None,
        mean_psnr: None,
        mean_ssim: None,
        lpips: None,
    })
}

fn eval_images(pred: &Path, gt: &Path) -> Result<EvalReport> {
    if !gt.is_dir() {
        bail!("--gt must be an image directory when --pred is one");
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for v in 0..10_000 {
        // prediction directories may use either naming convention
        let cand = [
            pred.join(format!("rerender_{v:04}.png")),
            pred.join(format!("rgb_{v:04}.png")),
        ];
        let Some(pred_path) = cand.iter().find(|p| p.is_file()) else {
            break;
        };
        let gt_path = gt.join(format!("rgb_{v:04}.png"));
        if !gt_path.is_file() {
            bail!("ground truth missing {}", gt_path.display());
        }
        let a = dataset_io::load_rgb(pred_path)?;
        let b = dataset_io::load_rgb(&gt_path)?;
        psnrs.push(metrics::psnr(&a, &b).map_err(|e| anyhow!("view {v}: {e}"))?);
        ssims.push(metrics::ssim(&a, &b).map_err(|e| anyhow!("view {v}: {e}"))?);
    }
    if psnrs.is_empty() {
        bail!("no matching image pairs under {}", pred.display());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        kind: "images".into(),
        chamfer_distance: None,
        volume_iou: None,
        chamfer_samples: None,
        iou_resolution: None,
        mean_psnr: Some(mean(&psnrs)),
        mean_ssim: Some(mean(&ssims)),
        per_view_psnr: Some(psnrs),
        per_view_ssim: Some(ssims),
        lpips: None,
    })
}

pub fn cmd_gta_demo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let timer = RunTimer::start();
    let g = &cfg.gta;
    let mut net_cfg = g.net.clone();
    net_cfg.n_views = g.views;

    // latents from synthetic multi-view sets, one per scene preset
    let mut latents = Vec::new();
    let mut conds = Vec::new();
    for (i, name) in g.scenes.iter().enumerate() {
        let scene = load_scene(name)?;
        let (set, _) = synth::make_dataset(&scene, g.views, g.resolution, 0.0, None, cfg.seed)
            .map_err(|e| anyhow!("{e}"))?;
        let grid = gta::derive_latents(&set, &net_cfg, cfg.seed).map_err(|e| anyhow!("{e}"))?;
        latents.push(grid);
        // the global condition vector identifies the conditioning scene
        use rand::Rng;
        let mut crng = derive(cfg.seed, Stream::LatentDerive, 100 + i as u64);
        let y = ndarray::Array2::from_shape_fn((1, net_cfg.y_dim), |_| crng.gen_range(-1.0..1.0));
        conds.push(ConditionSet {
            azimuths: set
                .views
                .iter()
                .map(|v| viewfuse_core::camera::azimuth_of(&v.pose))
                .collect(),
            y,
        });
    }
    gta::standardize(&mut latents);
    let scenes: Vec<_> = latents.into_iter().zip(conds).collect();

    let schedule = NoiseSchedule::staged()
        .scaled(g.stage_multiplier)
        .map_err(|e| anyhow!("{e}"))?;
    let expected_switches: Vec<u64> = schedule.stages[1..].iter().map(|s| s.0).collect();

    let mut denoiser = GtaDenoiser::new(net_cfg.clone(), cfg.seed).map_err(|e| anyhow!("{e}"))?;
    let report = gta::train_toy(
        &mut denoiser,
        &scenes,
        &schedule,
        g.steps,
        g.lr,
        cfg.seed,
        g.eval_every,
    )
    .map_err(|e| anyhow!("{e}"))?;

    std::fs::create_dir_all(out)?;
    let mut csv = String::from("step,train_loss,val_loss,p_mean,p_std\n");
    for p in &report.curve {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            p.step, p.train_loss, p.val_loss, p.p_mean, p.p_std
        );
    }
    atomic_write(&out.join("curves.csv"), csv.as_bytes())?;

    #[derive(serde::Serialize)]
    struct DemoReport {
        steps: u64,
        initial_val_loss: f64,
        final_val_loss: f64,
        val_loss_ratio: f64,
        expected_stage_switches: Vec<u64>,
        observed_stage_switches: Vec<u64>,
        stage_switches_verified: bool,
    }
    let verified = report.observed_stage_switches
        == expected_switches
            .iter()
            .copied()
            .filter(|&s| s < g.steps)
            .collect::<Vec<_>>();
    let demo = DemoReport {
        steps: g.steps,
        initial_val_loss: report.initial_val_loss,
        final_val_loss: report.final_val_loss,
        val_loss_ratio: report.final_val_loss / report.initial_val_loss,
        expected_stage_switches: expected_switches,
        observed_stage_switches: report.observed_stage_switches.clone(),
        stage_switches_verified: verified,
    };
    write_json(&out.join("report.json"), &demo)?;
    timer.write_manifest(out, "gta-demo", cfg.seed, cfg.threads, g)?;
    log::info!(
        "toy denoiser: val loss {:.4} -> {:.4} over {} steps (stage switches verified: {})",
        demo.initial_val_loss,
        demo.final_val_loss,
        g.steps,
        demo.stage_switches_verified
    );
    if !verified {
        bail!("stage switches did not occur at the scaled thresholds");
    }
    Ok(())
}
