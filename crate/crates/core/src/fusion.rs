//! De-conflict geometry fusion: the six-term objective, the training loop
//! over field + pose-refinement parameters, and textured mesh extraction.
//!
//! The color loss down-weights residuals by the rendered conflict:
//! `(1 − H_p)·‖C_p − Ĉ_p‖₂ + λ₀·H_p²`, so pixels the conflict field marks as
//! cross-view-inconsistent stop fighting over the shared appearance, at a
//! quadratic price that keeps H from absorbing everything. Normals, masks,
//! Eikonal, sparsity and gradient-smoothness terms complete the objective.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::camera::{CameraPose, Ray};
use crate::dataset::MultiViewSet;
use crate::field::{FieldConfig, SceneField};
use crate::math::{self, Vec3};
use crate::mesh::{marching_cubes, TriMesh};
use crate::params::{Adam, ParamBuilder, ParamGroup, ParameterSet};
use crate::render::{render_batch, PoseRefinement, RenderConfig};
use crate::rng::{derive, Stream};
use crate::synth::GroundTruth;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Conflict regularizer weight λ₀ in the de-conflict color loss.
    pub lambda0: f64,
    pub w_color: f64,
    pub w_normal: f64,
    pub w_mask: f64,
    pub w_eikonal: f64,
    pub w_sparse: f64,
    pub w_smooth: f64,
    pub iterations: usize,
    pub rays_per_batch: usize,
    /// Rays per tape chunk; bounds peak memory, not the math.
    pub chunk_rays: usize,
    pub lr_hash: f64,
    pub lr_mlp: f64,
    pub lr_pose: f64,
    /// Cosine-decay floor as a fraction of the initial rate.
    pub lr_min_factor: f64,
    /// Pose parameters join optimization after this many iterations.
    pub pose_warmup: usize,
    /// Conflict-net parameters join after this many iterations, so color
    /// supervision is at full strength while residuals are still large;
    /// otherwise the conflict saturates early and starves the color loss.
    pub conflict_warmup: usize,
    pub n_coarse: usize,
    pub n_importance: usize,
    pub stratified: bool,
    /// Weight threshold below which samples skip attribute evaluation.
    pub attr_weight_min: f64,
    pub n_reg_uniform: usize,
    pub n_reg_surface: usize,
    pub smooth_eps: f64,
    pub sparse_tau: f64,
    pub mesh_resolution: usize,
    pub seed: u64,
    pub conflict_enabled: bool,
    pub pose_enabled: bool,
    /// Re-render every view after training (PSNR/SSIM, conflict maps).
    pub rerender: bool,
    pub log_every: usize,
    pub field: FieldConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda0: 0.01,
            w_color: 1.0,
            w_normal: 1.0,
            w_mask: 1.0,
            w_eikonal: 0.1,
            w_sparse: 0.02,
            w_smooth: 0.02,
            iterations: 1500,
            rays_per_batch: 256,
            chunk_rays: 128,
            lr_hash: 1e-2,
            lr_mlp: 1e-3,
            lr_pose: 1e-4,
            lr_min_factor: 0.05,
            pose_warmup: 500,
            conflict_warmup: 300,
            n_coarse: 64,
            n_importance: 32,
            stratified: true,
            attr_weight_min: 1e-5,
            n_reg_uniform: 512,
            n_reg_surface: 512,
            smooth_eps: 1e-2,
            sparse_tau: 10.0,
            mesh_resolution: 128,
            seed: 0,
            conflict_enabled: true,
            pose_enabled: true,
            rerender: true,
            log_every: 50,
            field: FieldConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda0,
            self.w_color,
            self.w_normal,
            self.w_mask,
            self.w_eikonal,
            self.w_sparse,
            self.w_smooth,
        ];
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.rays_per_batch == 0 || self.chunk_rays == 0 {
            return Err(Error::Config("ray batch sizes must be > 0".into()));
        }
        if self.smooth_eps <= 0.0 {
            return Err(Error::Config("smooth_eps must be > 0".into()));
        }
        self.field.validate()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_importance: self.n_importance,
            stratified: self.stratified,
            bound_radius: 3f64.sqrt(),
            conflict_enabled: self.conflict_enabled,
            attr_weight_min: self.attr_weight_min,
        }
    }
}

// ---- loss terms (value-level forms mirror the differentiable graph) ------

/// De-conflict color loss over a pixel batch.
pub fn loss_color(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    conflict: &[f64],
    lambda0: f64,
) -> f64 {
    assert_eq!(rendered.len(), target.len());
    assert_eq!(rendered.len(), conflict.len());
    let mut total = 0.0;
    for ((c, t), &h) in rendered.iter().zip(target).zip(conflict) {
        debug_assert!((0.0..=1.0).contains(&h));
        let r = math::norm(math::sub(*c, *t));
        total += (1.0 - h) * r + lambda0 * h * h;
    }
    total / rendered.len() as f64
}

/// Cosine normal loss over foreground pixels: mean of (1 − ⟨n_r, n_t⟩).
pub fn loss_normal(rendered: &[[f64; 3]], target: &[[f64; 3]], fg: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((r, t), &keep) in rendered.iter().zip(target).zip(fg) {
        if keep {
            total += 1.0 - math::dot(*r, *t);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean squared mask error.
pub fn loss_mask(rendered: &[f64], target: &[f64]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    rendered
        .iter()
        .zip(target)
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        / rendered.len() as f64
}

/// Closed-form pointwise minimizer of the de-conflict color loss in H.
pub fn optimal_conflict(residual: f64, lambda0: f64) -> f64 {
    (residual / (2.0 * lambda0)).min(1.0)
}

/// Anything that can report an SDF and its spatial gradient at a point.
/// Implemented by the learned field and by analytic scenes, so regularizer
/// formulas can be validated against exact fields.
pub trait SdfProbe {
    fn probe_sdf(&self, x: Vec3) -> f64;
    fn probe_gradient(&self, x: Vec3) -> Vec3;
}

impl SdfProbe for crate::synth::AnalyticScene {
    fn probe_sdf(&self, x: Vec3) -> f64 {
        self.sdf(x)
    }
    fn probe_gradient(&self, x: Vec3) -> Vec3 {
        self.gradient(x)
    }
}

pub struct FieldProbe<'a> {
    pub field: &'a SceneField,
    pub params: &'a ParameterSet,
}

impl SdfProbe for FieldProbe<'_> {
    fn probe_sdf(&self, x: Vec3) -> f64 {
        self.field.eval_sdf(self.params, x).0
    }
    fn probe_gradient(&self, x: Vec3) -> Vec3 {
        self.field.eval_sdf_gradient(self.params, x)
    }
}

/// Eikonal residual: mean of (|∇s| − 1)².
pub fn reg_eikonal(probe: &impl SdfProbe, points: &[Vec3]) -> f64 {
    points
        .iter()
        .map(|&x| {
            let g = math::norm(probe.probe_gradient(x));
            (g - 1.0) * (g - 1.0)
        })
        .sum::<f64>()
        / points.len() as f64
}

/// Floater suppression: mean of exp(−τ·|s|).
pub fn reg_sparse(probe: &impl SdfProbe, points: &[Vec3], tau: f64) -> f64 {
    points
        .iter()
        .map(|&x| (-tau * probe.probe_sdf(x).abs()).exp())
        .sum::<f64>()
        / points.len() as f64
}

/// Gradient smoothness: mean of ‖∇s(x) − ∇s(x + ε·u)‖ over unit offsets u.
pub fn reg_smooth(probe: &impl SdfProbe, points: &[Vec3], dirs: &[Vec3], eps: f64) -> f64 {
    assert_eq!(points.len(), dirs.len());
    points
        .iter()
        .zip(dirs)
        .map(|(&x, &u)| {
            let g1 = probe.probe_gradient(x);
            let g2 = probe.probe_gradient(math::add(x, math::scale(u, eps)));
            math::norm(math::sub(g1, g2))
        })
        .sum::<f64>()
        / points.len() as f64
}

// ---- model + training -----------------------------------------------------

/// Field and pose-refinement parameters in one flat set.
pub struct FusionModel {
    pub field: SceneField,
    pub pose: PoseRefinement,
    pub params: ParameterSet,
}

impl FusionModel {
    pub fn new(mut field_cfg: FieldConfig, n_views: usize, seed: u64) -> Result<FusionModel> {
        field_cfg.n_views = n_views;
        field_cfg.validate()?;
        let mut rng = derive(seed, Stream::Init, 0);
        let mut builder = ParamBuilder::new();
        let field = SceneField::register(field_cfg, &mut builder, &mut rng);
        let pose = PoseRefinement::register(n_views, &mut builder);
        let mut params = builder.build();
        field.finalize_init(&mut params, &mut rng);
        Ok(FusionModel {
            field,
            pose,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub normal: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub sparse: f64,
    pub smooth: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &FusionConfig) -> f64 {
        cfg.w_color * self.color
            + cfg.w_normal * self.normal
            + cfg.w_mask * self.mask
            + cfg.w_eikonal * self.eikonal
            + cfg.w_sparse * self.sparse
            + cfg.w_smooth * self.smooth
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("color", self.color),
            ("normal", self.normal),
            ("mask", self.mask),
            ("eikonal", self.eikonal),
            ("sparse", self.sparse),
            ("smooth", self.smooth),
        ] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("loss term '{name}' is {v}")));
            }
        }
        Ok(())
    }
}

/// Optimizer state; resuming from a snapshot replays the exact trajectory.
pub struct TrainState {
    pub iteration: usize,
    pub skipped_steps: usize,
    pub adam: Adam,
    pub history: Vec<(usize, LossBreakdown)>,
    grad_buf: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &FusionModel) -> TrainState {
        TrainState {
            iteration: 0,
            skipped_steps: 0,
            adam: Adam::new(model.params.len()),
            history: Vec::new(),
            grad_buf: vec![0.0; model.params.len()],
        }
    }

    pub fn snapshot(&self, model: &FusionModel) -> Snapshot {
        let (m, v, t) = self.adam.state();
        Snapshot {
            params: model.params.read(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            adam_t: t,
            iteration: self.iteration,
            skipped_steps: self.skipped_steps,
        }
    }

    pub fn restore(&mut self, model: &mut FusionModel, snap: &Snapshot) {
        model.params.write(&snap.params);
        self.adam
            .restore(snap.adam_m.clone(), snap.adam_v.clone(), snap.adam_t);
        self.iteration = snap.iteration;
        self.skipped_steps = snap.skipped_steps;
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub iteration: usize,
    pub skipped_steps: usize,
}

/// One sampled supervision pixel.
struct RayTarget {
    ray: Ray,
    rgb: [f64; 3],
    normal: [f64; 3],
    mask: f64,
    fg: bool,
}

fn sample_ray_batch(
    dataset: &MultiViewSet,
    usable: &[usize],
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<RayTarget> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = usable[rng.gen_range(0..usable.len())];
        let view = &dataset.views[v];
        let x = rng.gen_range(0..dataset.width);
        let y = rng.gen_range(0..dataset.height);
        let ray = view
            .pose
            .ray(x as f64 + 0.5, y as f64 + 0.5)
            .expect("pixel in bounds");
        let mask = view.mask[[y, x]];
        out.push(RayTarget {
            ray,
            rgb: [
                view.rgb[[y, x, 0]],
                view.rgb[[y, x, 1]],
                view.rgb[[y, x, 2]],
            ],
            normal: dataset.decode_normal(v, y, x),
            mask,
            fg: mask > 0.5,
        });
    }
    out
}

fn const2(t: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    t.constant(ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap())
}

/// Differentiable six-term objective over one ray batch (built in chunks).
/// Returns the breakdown; gradients are accumulated into `grad_buf`.
fn batch_loss_and_grad(
    model: &FusionModel,
    cfg: &FusionConfig,
    targets: &[RayTarget],
    iteration: usize,
    grad_buf: &mut [f64],
) -> Result<LossBreakdown> {
    let n_total = targets.len();
    let fg_total = targets.iter().filter(|t| t.fg).count();
    let render_cfg = cfg.render_config();
    let mut breakdown = LossBreakdown::default();
    let mut surface_anchor: Vec<[f64; 3]> = Vec::new();

    let mut chunk_start = 0;
    let mut chunk_index = 0u64;
    while chunk_start < n_total {
        let chunk_end = (chunk_start + cfg.chunk_rays).min(n_total);
        let chunk = &targets[chunk_start..chunk_end];
        let nc = chunk.len();

        let mut rng = derive(
            cfg.seed,
            Stream::Stratified,
            ((iteration as u64) << 16) | chunk_index,
        );
        let mut t = Tape::new(&model.params);
        let rays: Vec<Ray> = chunk.iter().map(|c| c.ray).collect();
        let out = render_batch(
            &mut t,
            &model.field,
            Some(&model.pose),
            &rays,
            &render_cfg,
            if cfg.stratified { Some(&mut rng) } else { None },
        )?;
        surface_anchor.extend(out.surface_points.iter().copied());

        // color: (1-H)·‖C−Ĉ‖ + λ₀·H², summed here, normalized by the batch
        let target_rgb = const2(&mut t, nc, 3, chunk.iter().flat_map(|c| c.rgb).collect());
        let res = t.sub(out.color, target_rgb);
        let res2 = t.square(res);
        let res_sum = t.sum_axis(res2, 1);
        let rnorm = t.sqrt(res_sum); // (nc,1)
        let h = out.conflict;
        let neg_h = t.neg(h);
        let one_minus_h = t.add_scalar(neg_h, 1.0);
        let weighted = t.mul(one_minus_h, rnorm);
        let h2 = t.square(h);
        let h2s = t.scale(h2, cfg.lambda0);
        let per_ray_color = t.add(weighted, h2s);
        let color_sum = t.sum_all(per_ray_color);
        let color_term = t.scale(color_sum, 1.0 / n_total as f64);

        // mask: squared error, batch mean
        let target_mask = const2(&mut t, nc, 1, chunk.iter().map(|c| c.mask).collect());
        let mdiff = t.sub(out.mask, target_mask);
        let m2 = t.square(mdiff);
        let mask_sum = t.sum_all(m2);
        let mask_term = t.scale(mask_sum, 1.0 / n_total as f64);

        // normal: cosine loss over foreground pixels
        let fg_rows: Vec<i64> = chunk
            .iter()
            .enumerate()
            .filter(|(_, c)| c.fg)
            .map(|(i, _)| i as i64)
            .collect();
        let normal_term = if fg_rows.is_empty() || fg_total == 0 {
            t.scalar(0.0)
        } else {
            let nf = fg_rows.len();
            let rendered_fg = t.gather_rows(out.normal, std::sync::Arc::new(fg_rows));
            let target_fg = const2(
                &mut t,
                nf,
                3,
                chunk
                    .iter()
                    .filter(|c| c.fg)
                    .flat_map(|c| c.normal)
                    .collect(),
            );
            let prod = t.mul(rendered_fg, target_fg);
            let dots = t.sum_axis(prod, 1);
            let neg = t.neg(dots);
            let one_minus = t.add_scalar(neg, 1.0);
            let s = t.sum_all(one_minus);
            t.scale(s, 1.0 / fg_total as f64)
        };

        let cw = t.scale(color_term, cfg.w_color);
        let mw = t.scale(mask_term, cfg.w_mask);
        let nw = t.scale(normal_term, cfg.w_normal);
        let cm = t.add(cw, mw);
        let chunk_total = t.add(cm, nw);

        breakdown.color += t.value(color_term)[[0]];
        breakdown.mask += t.value(mask_term)[[0]];
        breakdown.normal += t.value(normal_term)[[0]];

        t.backward(chunk_total, grad_buf);
        drop(t);

        chunk_start = chunk_end;
        chunk_index += 1;
    }

    // regularizers on their own point set: uniform cube samples plus
    // perturbed near-surface anchors from this batch's renders
    {
        let mut rng = derive(cfg.seed, Stream::RegPoints, iteration as u64);
        let n_uni = cfg.n_reg_uniform;
        let mut pts: Vec<f64> = Vec::with_capacity((n_uni + cfg.n_reg_surface) * 3);
        for _ in 0..n_uni {
            for _ in 0..3 {
                pts.push(rng.gen_range(-1.0..1.0));
            }
        }
        let mut n_surf = 0;
        if !surface_anchor.is_empty() {
            for i in 0..cfg.n_reg_surface {
                let base = surface_anchor[i % surface_anchor.len()];
                for a in 0..3 {
                    pts.push((base[a] + rng.gen_range(-0.02..0.02)).clamp(-1.0, 1.0));
                }
                n_surf += 1;
            }
        }
        let n_pts = n_uni + n_surf;

        let mut dirs: Vec<f64> = Vec::with_capacity(n_pts * 3);
        for _ in 0..n_pts {
            let u = random_unit(&mut rng);
            dirs.extend_from_slice(&u);
        }

        let mut t = Tape::new(&model.params);
        let x1 = const2(&mut t, n_pts, 3, pts.clone());
        let offs: Vec<f64> = pts
            .iter()
            .zip(dirs.iter())
            .map(|(p, d)| p + cfg.smooth_eps * d)
            .collect();
        let x2 = const2(&mut t, n_pts, 3, offs);
        let x_all = t.concat(&[x1, x2], 0);
        let sdf_out = model.field.sdf_batch(&mut t, x_all, true);
        let grad = sdf_out.grad.unwrap();

        // eikonal over the base points
        let g1 = t.slice_axis(grad, 0, 0, n_pts);
        let g1n = t.norm_axis(g1, 1);
        let g1m = t.add_scalar(g1n, -1.0);
        let g1sq = t.square(g1m);
        let eik_term = t.mean_all(g1sq);

        // sparse over the uniform points only
        let s_uni = t.slice_axis(sdf_out.sdf, 0, 0, n_uni);
        let s_abs = t.abs(s_uni);
        let s_scaled = t.scale(s_abs, -cfg.sparse_tau);
        let s_exp = t.exp(s_scaled);
        let sparse_term = t.mean_all(s_exp);

        // smoothness between paired gradients
        let g2 = t.slice_axis(grad, 0, n_pts, 2 * n_pts);
        let gd = t.sub(g1, g2);
        let gd2 = t.square(gd);
        let gds = t.sum_axis(gd2, 1);
        let gdn = t.sqrt(gds);
        let smooth_term = t.mean_all(gdn);

        let ew = t.scale(eik_term, cfg.w_eikonal);
        let sw = t.scale(sparse_term, cfg.w_sparse);
        let mw = t.scale(smooth_term, cfg.w_smooth);
        let es = t.add(ew, sw);
        let reg_total = t.add(es, mw);

        breakdown.eikonal = t.value(eik_term)[[0]];
        breakdown.sparse = t.value(sparse_term)[[0]];
        breakdown.smooth = t.value(smooth_term)[[0]];

        t.backward(reg_total, grad_buf);
    }

    breakdown.check_finite()?;
    breakdown.total = breakdown.weighted_total(cfg);
    Ok(breakdown)
}

fn random_unit(rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0f64..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = math::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return math::scale(v, 1.0 / n);
        }
    }
}

fn cosine_lr_factor(iter: usize, total: usize, min_factor: f64) -> f64 {
    let t = (iter as f64 / total.max(1) as f64).clamp(0.0, 1.0);
    min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// The exact objective the optimizer sees at `iteration` (same ray batch,
/// same regularizer points), with gradients optionally accumulated. This is
/// the hook the finite-difference suites drive.
pub fn sampled_objective(
    model: &FusionModel,
    cfg: &FusionConfig,
    dataset: &MultiViewSet,
    usable: &[usize],
    iteration: usize,
    grad_buf: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let mut ray_rng = derive(cfg.seed, Stream::RayBatch, iteration as u64);
    let targets = sample_ray_batch(dataset, usable, cfg.rays_per_batch, &mut ray_rng);
    match grad_buf {
        Some(buf) => batch_loss_and_grad(model, cfg, &targets, iteration, buf),
        None => {
            let mut scratch = vec![0.0; model.params.len()];
            batch_loss_and_grad(model, cfg, &targets, iteration, &mut scratch)
        }
    }
}

/// One optimizer step. Non-finite gradients skip the update (logged and
/// counted); non-finite losses abort with the offending term named.
pub fn train_step(
    model: &mut FusionModel,
    state: &mut TrainState,
    dataset: &MultiViewSet,
    usable: &[usize],
    cfg: &FusionConfig,
) -> Result<LossBreakdown> {
    let iter = state.iteration;
    let mut ray_rng = derive(cfg.seed, Stream::RayBatch, iter as u64);
    let targets = sample_ray_batch(dataset, usable, cfg.rays_per_batch, &mut ray_rng);

    state.grad_buf.iter_mut().for_each(|g| *g = 0.0);
    let breakdown = batch_loss_and_grad(model, cfg, &targets, iter, &mut state.grad_buf)?;

    if state.grad_buf.iter().any(|g| !g.is_finite()) {
        log::warn!("iteration {iter}: non-finite gradient, skipping step");
        state.skipped_steps += 1;
        state.iteration += 1;
        return Ok(breakdown);
    }

    let lr_factor = cosine_lr_factor(iter, cfg.iterations, cfg.lr_min_factor);
    let pose_active = cfg.pose_enabled && iter >= cfg.pose_warmup;
    let conflict_active = iter >= cfg.conflict_warmup;
    let (lr_hash, lr_mlp, lr_pose) = (cfg.lr_hash, cfg.lr_mlp, cfg.lr_pose);
    state
        .adam
        .step(&mut model.params, &state.grad_buf, |g: &ParamGroup| {
            let base = if g.name.starts_with("field.hash") {
                lr_hash
            } else if g.name.starts_with("pose.") {
                if pose_active {
                    lr_pose
                } else {
                    0.0
                }
            } else if g.name.starts_with("field.conflict") || g.name.starts_with("field.view_embed")
            {
                if conflict_active {
                    lr_mlp
                } else {
                    0.0
                }
            } else {
                lr_mlp
            };
            base * lr_factor
        });

    state.iteration += 1;
    Ok(breakdown)
}

/// Value-level total loss with breakdown (the reporting form).
pub fn total_loss(breakdown: &LossBreakdown, cfg: &FusionConfig) -> Result<f64> {
    breakdown.check_finite()?;
    Ok(breakdown.weighted_total(cfg))
}

// ---- re-rendering and reports ---------------------------------------------

/// Full-view render products at dataset resolution.
pub struct ViewRender {
    pub rgb: Array3<f64>,
    /// RGB-encoded composite normal, (n+1)/2.
    pub normal: Array3<f64>,
    pub mask: Array2<f64>,
    pub conflict: Array2<f64>,
    pub depth: Array2<f64>,
}

/// Render a full view (no gradients), honoring the pose refinement.
pub fn render_view(
    model: &FusionModel,
    pose: &CameraPose,
    cfg: &FusionConfig,
) -> Result<ViewRender> {
    let (w, h) = (pose.width, pose.height);
    let render_cfg = RenderConfig {
        stratified: false,
        ..cfg.render_config()
    };
    let mut rgb = Array3::zeros((h, w, 3));
    let mut normal = Array3::zeros((h, w, 3));
    let mut mask = Array2::zeros((h, w));
    let mut conflict = Array2::zeros((h, w));
    let mut depth = Array2::zeros((h, w));

    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            pixels.push((x, y));
        }
    }
    for chunk in pixels.chunks(cfg.chunk_rays.max(64)) {
        let rays: Vec<Ray> = chunk
            .iter()
            .map(|&(x, y)| pose.ray(x as f64 + 0.5, y as f64 + 0.5).unwrap())
            .collect();
        let mut t = Tape::new(&model.params);
        let out = render_batch(
            &mut t,
            &model.field,
            Some(&model.pose),
            &rays,
            &render_cfg,
            None,
        )?;
        let (cv, nv, mv, hv, dv) = (
            t.value(out.color),
            t.value(out.normal),
            t.value(out.mask),
            t.value(out.conflict),
            t.value(out.depth),
        );
        for (i, &(x, y)) in chunk.iter().enumerate() {
            for c in 0..3 {
                rgb[[y, x, c]] = cv[[i, c]];
                normal[[y, x, c]] = (nv[[i, c]] + 1.0) / 2.0;
            }
            mask[[y, x]] = mv[[i, 0]];
            conflict[[y, x]] = hv[[i, 0]];
            depth[[y, x]] = dv[[i, 0]];
        }
    }
    Ok(ViewRender {
        rgb,
        normal,
        mask,
        conflict,
        depth,
    })
}

#[derive(Debug, Clone)]
pub struct FusionReport {
    pub curves: Vec<(usize, LossBreakdown)>,
    pub skipped_steps: usize,
    pub excluded_views: Vec<usize>,
    pub standard_ring: bool,
    /// Mean rendered conflict over foreground pixels, per view.
    pub mean_conflict_per_view: Vec<f64>,
    pub per_view_psnr: Option<Vec<f64>>,
    pub per_view_ssim: Option<Vec<f64>>,
    pub pose_rotation_deg: Vec<f64>,
    pub pose_translation_norm: Vec<f64>,
}

pub struct FusionOutput {
    pub model: FusionModel,
    pub state: TrainState,
    pub report: FusionReport,
    pub renders: Option<Vec<ViewRender>>,
}

/// Validate, train, and summarize. Mesh extraction is a separate call.
pub fn run_fusion(dataset: &MultiViewSet, cfg: &FusionConfig) -> Result<FusionOutput> {
    cfg.validate()?;
    let usable = dataset.validate()?;
    let excluded: Vec<usize> = (0..dataset.n_views())
        .filter(|v| !usable.contains(v))
        .collect();
    for &v in &excluded {
        log::warn!("view {v} excluded: degenerate mask");
    }
    let standard_ring = dataset.is_standard_ring();
    if !standard_ring {
        log::warn!(
            "dataset is not the standard 16-view elevation-0 ring ({} views)",
            dataset.n_views()
        );
    }

    let mut model = FusionModel::new(cfg.field.clone(), dataset.n_views(), cfg.seed)?;
    let mut state = TrainState::new(&model);

    while state.iteration < cfg.iterations {
        let b = train_step(&mut model, &mut state, dataset, &usable, cfg)?;
        let it = state.iteration - 1;
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log::info!(
                "iter {it}: total {:.5} color {:.5} normal {:.5} mask {:.5} eik {:.5}",
                b.total,
                b.color,
                b.normal,
                b.mask,
                b.eikonal
            );
            state.history.push((it, b));
        }
    }

    let mut report = FusionReport {
        curves: state.history.clone(),
        skipped_steps: state.skipped_steps,
        excluded_views: excluded,
        standard_ring,
        mean_conflict_per_view: Vec::new(),
        per_view_psnr: None,
        per_view_ssim: None,
        pose_rotation_deg: model.pose.rotation_degrees(&model.params),
        pose_translation_norm: (0..model.pose.n_views)
            .map(|v| math::norm(model.pose.translation(&model.params, v)))
            .collect(),
    };

    let renders = if cfg.rerender {
        let mut views = Vec::with_capacity(dataset.n_views());
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for v in 0..dataset.n_views() {
            let r = render_view(&model, &dataset.views[v].pose, cfg)?;
            psnrs.push(crate::metrics::psnr(&r.rgb, &dataset.views[v].rgb)?);
            ssims.push(crate::metrics::ssim(&r.rgb, &dataset.views[v].rgb)?);
            report
                .mean_conflict_per_view
                .push(mean_over_fg(&r.conflict, &r.mask));
            views.push(r);
        }
        report.per_view_psnr = Some(psnrs);
        report.per_view_ssim = Some(ssims);
        Some(views)
    } else {
        // cheap probe: subsampled pixels per view for the conflict summary
        for v in 0..dataset.n_views() {
            report
                .mean_conflict_per_view
                .push(probe_view_conflict(&model, &dataset.views[v].pose, cfg)?);
        }
        None
    };

    Ok(FusionOutput {
        model,
        state,
        report,
        renders,
    })
}

fn mean_over_fg(values: &Array2<f64>, mask: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, m) in values.iter().zip(mask.iter()) {
        if *m > 0.5 {
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn probe_view_conflict(model: &FusionModel, pose: &CameraPose, cfg: &FusionConfig) -> Result<f64> {
    let render_cfg = RenderConfig {
        stratified: false,
        ..cfg.render_config()
    };
    let stride = (pose.width / 24).max(1);
    let mut rays = Vec::new();
    let mut y = stride / 2;
    while y < pose.height {
        let mut x = stride / 2;
        while x < pose.width {
            rays.push(pose.ray(x as f64 + 0.5, y as f64 + 0.5)?);
            x += stride;
        }
        y += stride;
    }
    let mut t = Tape::new(&model.params);
    let out = render_batch(
        &mut t,
        &model.field,
        Some(&model.pose),
        &rays,
        &render_cfg,
        None,
    )?;
    let h = t.value(out.conflict);
    let m = t.value(out.mask);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..rays.len() {
        if m[[i, 0]] > 0.5 {
            total += h[[i, 0]];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Per-view rotation error (degrees) of the refined recorded poses against
/// the ground-truth poses.
pub fn pose_errors_vs_truth(
    model: &FusionModel,
    dataset: &MultiViewSet,
    truth: &GroundTruth,
) -> Vec<f64> {
    (0..dataset.n_views())
        .map(|v| {
            let r_delta = math::axis_angle_to_matrix(model.pose.rotation_vector(&model.params, v));
            let c2w_rec = dataset.views[v].pose.rotation_c2w();
            let c2w_eff = math::matmul3(&r_delta, &c2w_rec);
            math::rotation_distance(&c2w_eff, &truth.true_poses[v].rotation_c2w()).to_degrees()
        })
        .collect()
}

/// Extract the zero level set of the trained field as a triangle mesh with
/// vertex colors (queried with the outward normal as the view direction).
pub fn extract_mesh(model: &FusionModel, resolution: usize) -> Result<TriMesh> {
    if resolution < 64 {
        return Err(Error::Config(
            "mesh extraction resolution must be >= 64".into(),
        ));
    }
    let mut eval = |pts: &[Vec3]| -> Vec<f64> {
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(65536) {
            let mut t = Tape::new(&model.params);
            let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[chunk.len(), 3]), |ix| {
                chunk[ix[0]][ix[1]]
            }));
            let sdf = model.field.sdf_batch(&mut t, x, false);
            out.extend(t.value(sdf.sdf).iter().copied());
        }
        out
    };
    let mut mesh = marching_cubes(&mut eval, resolution)?;

    // vertex colors from the color head, view direction = outward normal
    let mut colors = Vec::with_capacity(mesh.n_vertices());
    for chunk in mesh.vertices.chunks(16384) {
        let mut t = Tape::new(&model.params);
        let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[chunk.len(), 3]), |ix| {
            chunk[ix[0]][ix[1]]
        }));
        let sdf = model.field.sdf_batch(&mut t, x, true);
        let grad = sdf.grad.unwrap();
        let gn = t.norm_axis(grad, 1);
        let gn = t.max_scalar(gn, 1e-12);
        let normal = t.div(grad, gn);
        let color = model.field.color_batch(&mut t, sdf.feat, x, normal, normal);
        let cv = t.value(color);
        for i in 0..chunk.len() {
            colors.push([cv[[i, 0]], cv[[i, 1]], cv[[i, 2]]]);
        }
    }
    mesh.colors = Some(colors);
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn color_loss_hand_cases() {
        // exact match, no conflict
        assert_eq!(
            loss_color(&[[0.2, 0.4, 0.6]], &[[0.2, 0.4, 0.6]], &[0.0], 0.01),
            0.0
        );
        // full down-weighting leaves only the regularizer
        let l = loss_color(&[[0.9, 0.1, 0.3]], &[[0.1, 0.1, 0.4]], &[1.0], 0.01);
        assert_relative_eq!(l, 0.01, epsilon = 1e-15);
        // direct substitution: H=0.5, residual 0.2, λ₀=0.01
        let l = loss_color(&[[0.2, 0.0, 0.0]], &[[0.0, 0.0, 0.0]], &[0.5], 0.01);
        assert_relative_eq!(l, 0.5 * 0.2 + 0.01 * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn color_loss_minimizer_matches_closed_form() {
        // numerically minimize over H for a fixed residual
        let residual = 0.015f64;
        let lambda0 = 0.01;
        let f = |h: f64| (1.0 - h) * residual + lambda0 * h * h;
        let mut best_h = 0.0;
        let mut best = f64::INFINITY;
        let steps = 2_000_000;
        for i in 0..=steps {
            let h = i as f64 / steps as f64;
            let v = f(h);
            if v < best {
                best = v;
                best_h = h;
            }
        }
        assert!((best_h - optimal_conflict(residual, lambda0)).abs() < 1e-6);
        // saturation branch
        assert_eq!(optimal_conflict(0.5, 0.01), 1.0);
    }

    #[test]
    fn color_loss_is_decreasing_in_h_below_the_optimum() {
        let residual = 0.2;
        let lambda0 = 0.01; // optimum clamps at 1
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let h = i as f64 / 100.0;
            let l = loss_color(&[[residual, 0.0, 0.0]], &[[0.0; 3]], &[h], lambda0);
            assert!(l < prev, "not strictly decreasing at h={h}");
            prev = l;
        }
    }

    #[test]
    fn normal_loss_hand_cases() {
        let up = [[0.0, 0.0, 1.0]];
        let down = [[0.0, 0.0, -1.0]];
        let side = [[1.0, 0.0, 0.0]];
        assert_eq!(loss_normal(&up, &up, &[true]), 0.0);
        assert_eq!(loss_normal(&up, &down, &[true]), 2.0);
        assert_eq!(loss_normal(&up, &side, &[true]), 1.0);
        // background pixels don't contribute
        assert_eq!(loss_normal(&up, &down, &[false]), 0.0);
    }

    #[test]
    fn mask_loss_hand_cases() {
        assert_eq!(loss_mask(&[0.3, 0.9], &[0.3, 0.9]), 0.0);
        assert_eq!(loss_mask(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        assert_eq!(loss_mask(&[0.5], &[0.0]), 0.25);
    }

    struct LinearSdf {
        dir: Vec3,
    }

    impl SdfProbe for LinearSdf {
        fn probe_sdf(&self, x: Vec3) -> f64 {
            math::dot(x, self.dir)
        }
        fn probe_gradient(&self, _x: Vec3) -> Vec3 {
            self.dir
        }
    }

    struct ScaledLinear {
        dir: Vec3,
    }

    impl SdfProbe for ScaledLinear {
        fn probe_sdf(&self, x: Vec3) -> f64 {
            2.0 * math::dot(x, self.dir)
        }
        fn probe_gradient(&self, _x: Vec3) -> Vec3 {
            math::scale(self.dir, 2.0)
        }
    }

    #[test]
    fn eikonal_on_exact_and_scaled_linear_fields() {
        let pts: Vec<Vec3> = (0..32)
            .map(|i| {
                let t = i as f64 / 32.0;
                [t - 0.5, 0.3 * t, -0.2]
            })
            .collect();
        let unit = LinearSdf {
            dir: math::normalize([1.0, 2.0, -0.5]),
        };
        assert_relative_eq!(reg_eikonal(&unit, &pts), 0.0, epsilon = 1e-15);
        let scaled = ScaledLinear {
            dir: math::normalize([1.0, 2.0, -0.5]),
        };
        assert_relative_eq!(reg_eikonal(&scaled, &pts), 1.0, epsilon = 1e-12);
    }

    struct ConstSdf(f64);
    impl SdfProbe for ConstSdf {
        fn probe_sdf(&self, _x: Vec3) -> f64 {
            self.0
        }
        fn probe_gradient(&self, _x: Vec3) -> Vec3 {
            [0.0; 3]
        }
    }

    #[test]
    fn sparse_regularizer_hand_cases() {
        let pts = vec![[0.0, 0.0, 0.0]; 8];
        assert_relative_eq!(reg_sparse(&ConstSdf(0.0), &pts, 10.0), 1.0);
        assert_relative_eq!(
            reg_sparse(&ConstSdf(0.1), &pts, 10.0),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert!(reg_sparse(&ConstSdf(100.0), &pts, 10.0) < 1e-300);
    }

    struct SphereSdf;
    impl SdfProbe for SphereSdf {
        fn probe_sdf(&self, x: Vec3) -> f64 {
            math::norm(x) - 0.5
        }
        fn probe_gradient(&self, x: Vec3) -> Vec3 {
            math::normalize(x)
        }
    }

    #[test]
    fn smooth_regularizer_is_zero_for_linear_and_curvature_scaled_for_sphere() {
        let pts: Vec<Vec3> = (0..64)
            .map(|i| {
                let th = i as f64 / 64.0 * std::f64::consts::PI * 2.0;
                [0.5 * th.cos(), 0.5 * th.sin(), 0.0]
            })
            .collect();
        let mut rng = derive(2, Stream::RegPoints, 0);
        let dirs: Vec<Vec3> = (0..64).map(|_| random_unit(&mut rng)).collect();
        let linear = LinearSdf {
            dir: [0.0, 0.0, 1.0],
        };
        assert_relative_eq!(reg_smooth(&linear, &pts, &dirs, 1e-2), 0.0, epsilon = 1e-15);
        // determinism under a fixed point/offset set
        assert_eq!(
            reg_smooth(&SphereSdf, &pts, &dirs, 1e-2),
            reg_smooth(&SphereSdf, &pts, &dirs, 1e-2)
        );
        // sphere gradient field: ‖∇s(x)−∇s(x+εu)‖ ≈ (ε/r)·|u_tangential|,
        // and E|u_t| over uniform unit u is π/4
        let got = reg_smooth(&SphereSdf, &pts, &dirs, 1e-2);
        let expected = 1e-2 / 0.5 * std::f64::consts::FRAC_PI_4;
        assert!(
            (got - expected).abs() / expected < 0.2,
            "got {got}, expected ≈ {expected}"
        );
    }

    #[test]
    fn breakdown_weighted_total_is_exact() {
        let cfg = FusionConfig::default();
        let b = LossBreakdown {
            total: 0.0,
            color: 0.11,
            normal: 0.07,
            mask: 0.05,
            eikonal: 0.2,
            sparse: 0.3,
            smooth: 0.15,
        };
        let expect = 1.0 * 0.11 + 1.0 * 0.07 + 1.0 * 0.05 + 0.1 * 0.2 + 0.02 * 0.3 + 0.02 * 0.15;
        assert!((total_loss(&b, &cfg).unwrap() - expect).abs() < 1e-12);
        let bad = LossBreakdown {
            eikonal: f64::NAN,
            ..b
        };
        match total_loss(&bad, &cfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("eikonal")),
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_interpolates_to_the_floor() {
        assert_relative_eq!(cosine_lr_factor(0, 100, 0.05), 1.0);
        assert_relative_eq!(cosine_lr_factor(100, 100, 0.05), 0.05, epsilon = 1e-12);
        let mid = cosine_lr_factor(50, 100, 0.05);
        assert_relative_eq!(mid, 0.05 + 0.95 * 0.5, epsilon = 1e-12);
    }
}
