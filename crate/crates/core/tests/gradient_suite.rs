//! Finite-difference verification of the full objective on a miniature
//! configuration: every loss term, every parameter group, and the
//! pose-refinement path.
//!
//! Central differences with h = 1e-4 in double precision against the
//! reverse-mode gradients the optimizer actually uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewfuse_core::dataset::MultiViewSet;
use viewfuse_core::field::FieldConfig;
use viewfuse_core::fusion::{sampled_objective, FusionConfig, FusionModel};
use viewfuse_core::gradcheck::max_rel_err;
use viewfuse_core::synth::{make_dataset, AnalyticScene};

// The alpha clamp is exactly zero over empty space, so a large FD step can
// straddle its kink on parameters that barely move a sample's SDF sign.
// A small step keeps the probability negligible while f64 roundoff noise
// stays orders of magnitude below the tolerance.
const FD_H: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;

fn miniature_setup() -> (FusionConfig, MultiViewSet, Vec<usize>, FusionModel) {
    let mut field = FieldConfig::miniature();
    // the check drives FD straight through the objective, so the conflict
    // net's feature inputs must not be gradient-stopped here
    field.detach_conflict_inputs = false;
    let cfg = FusionConfig {
        field,
        iterations: 40,
        rays_per_batch: 24,
        chunk_rays: 24,
        n_coarse: 12,
        n_importance: 0,
        stratified: false,
        attr_weight_min: 0.0,
        n_reg_uniform: 32,
        // near-surface anchors are sampled from detached render values and
        // move under FD perturbations; the check uses uniform points only
        n_reg_surface: 0,
        pose_warmup: 10,
        lr_pose: 1e-3,
        seed: 11,
        ..FusionConfig::default()
    };
    let scene = AnalyticScene::preset("spherebox").unwrap();
    let (dataset, _) = make_dataset(&scene, 4, 8, 0.0, None, 3).unwrap();
    let usable = dataset.validate().unwrap();
    let mut model = FusionModel::new(cfg.field.clone(), dataset.n_views(), cfg.seed).unwrap();

    // jitter every parameter: activates zero-initialized heads and pose
    // corrections while keeping render/target residuals far from the
    // curvature singularity of the color norm (a trained state would park
    // some residuals at ~1e-9, where no FD step is trustworthy)
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in model.params.data_mut() {
        *v += rng.gen_range(-1e-3..1e-3);
    }
    (cfg, dataset, usable, model)
}

/// FD-check touched parameters of every group (plus a sample of untouched
/// ones) against the analytic gradient of the full weighted objective.
fn check_config(cfg: &FusionConfig, label: &str) {
    let (_, dataset, usable, mut model) = {
        let (_base, d, u, m) = miniature_setup();
        (_base, d, u, m)
    };
    let iteration = 31;

    let mut grads = vec![0.0; model.params.len()];
    let breakdown =
        sampled_objective(&model, cfg, &dataset, &usable, iteration, Some(&mut grads)).unwrap();
    assert!(breakdown.total.is_finite());

    let grad_scale = grads.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    assert!(grad_scale > 0.0, "{label}: objective has no gradient");

    // every parameter with signal, plus a sample of zero-gradient entries
    let mut indices: Vec<usize> = Vec::new();
    let mut zeros_taken = 0;
    for (i, &g) in grads.iter().enumerate() {
        if g != 0.0 {
            indices.push(i);
        } else if zeros_taken < 200 && i % 17 == 0 {
            indices.push(i);
            zeros_taken += 1;
        }
    }

    let groups = model.params.groups().to_vec();
    let group_of = |i: usize| -> String {
        groups
            .iter()
            .find(|g| i >= g.offset && i < g.offset + g.len)
            .map(|g| g.name.clone())
            .unwrap_or_default()
    };

    let mut covered_groups = std::collections::HashSet::new();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for &i in &indices {
        covered_groups.insert(group_of(i));
        let orig = model.params.data()[i];
        model.params.data_mut()[i] = orig + FD_H;
        let fp = sampled_objective(&model, cfg, &dataset, &usable, iteration, None)
            .unwrap()
            .total;
        model.params.data_mut()[i] = orig - FD_H;
        let fm = sampled_objective(&model, cfg, &dataset, &usable, iteration, None)
            .unwrap()
            .total;
        model.params.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * FD_H);
        // tight absolute floor: f64 roundoff through the objective at this h
        if (grads[i] - fd).abs() < 1e-9 * (1.0 + grad_scale) {
            continue;
        }
        let err = max_rel_err(&[grads[i]], &[fd], 1e-6 * grad_scale.max(1e-6));
        if err > worst {
            worst = err;
            worst_at = format!("{} [{i}]", group_of(i));
        }
    }
    assert!(
        worst < REL_TOL,
        "{label}: worst relative error {worst:.3e} at {worst_at}"
    );
    println!(
        "[gradient-suite] {label}: {} params checked, worst rel err {worst:.3e}",
        indices.len()
    );
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let (cfg, _, _, _) = miniature_setup();
    check_config(&cfg, "full objective");
}

#[test]
fn color_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_normal = 0.0;
    cfg.w_mask = 0.0;
    cfg.w_eikonal = 0.0;
    cfg.w_sparse = 0.0;
    cfg.w_smooth = 0.0;
    check_config(&cfg, "de-conflict color loss");
}

#[test]
fn normal_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_color = 0.0;
    cfg.w_mask = 0.0;
    cfg.w_eikonal = 0.0;
    cfg.w_sparse = 0.0;
    cfg.w_smooth = 0.0;
    check_config(&cfg, "normal loss");
}

#[test]
fn mask_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_color = 0.0;
    cfg.w_normal = 0.0;
    cfg.w_eikonal = 0.0;
    cfg.w_sparse = 0.0;
    cfg.w_smooth = 0.0;
    check_config(&cfg, "mask loss");
}

#[test]
fn eikonal_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_color = 0.0;
    cfg.w_normal = 0.0;
    cfg.w_mask = 0.0;
    cfg.w_sparse = 0.0;
    cfg.w_smooth = 0.0;
    check_config(&cfg, "eikonal regularizer");
}

#[test]
fn sparse_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_color = 0.0;
    cfg.w_normal = 0.0;
    cfg.w_mask = 0.0;
    cfg.w_eikonal = 0.0;
    cfg.w_smooth = 0.0;
    check_config(&cfg, "sparse regularizer");
}

#[test]
fn smooth_term_gradients_match_finite_differences() {
    let (mut cfg, _, _, _) = miniature_setup();
    cfg.w_color = 0.0;
    cfg.w_normal = 0.0;
    cfg.w_mask = 0.0;
    cfg.w_eikonal = 0.0;
    cfg.w_sparse = 0.0;
    check_config(&cfg, "smoothness regularizer");
}

/// The pose path gets its own pass: nonzero refinements, active pose
/// gradient, every pose parameter checked.
#[test]
fn pose_refinement_path_matches_finite_differences() {
    let (cfg, dataset, usable, mut model) = miniature_setup();

    // move the refinements off zero so rotations are generic
    {
        let rot = model.params.group_by_name("pose.rot").unwrap();
        let trans = model.params.group_by_name("pose.trans").unwrap();
        for (k, v) in model.params.slice_mut(rot).iter_mut().enumerate() {
            *v = 0.01 * ((k as f64) * 0.7).sin();
        }
        for (k, v) in model.params.slice_mut(trans).iter_mut().enumerate() {
            *v = 0.005 * ((k as f64) * 1.3).cos();
        }
    }

    let iteration = 33;
    let mut grads = vec![0.0; model.params.len()];
    sampled_objective(&model, &cfg, &dataset, &usable, iteration, Some(&mut grads)).unwrap();

    let rot = model.params.group(model.params.group_by_name("pose.rot").unwrap()).clone();
    let trans = model
        .params
        .group(model.params.group_by_name("pose.trans").unwrap())
        .clone();
    let pose_indices: Vec<usize> = (rot.offset..rot.offset + rot.len)
        .chain(trans.offset..trans.offset + trans.len)
        .collect();
    let scale = pose_indices
        .iter()
        .fold(0.0f64, |a, &i| a.max(grads[i].abs()));
    assert!(scale > 0.0, "pose path carries no gradient");

    let mut worst = 0.0f64;
    for &i in &pose_indices {
        let orig = model.params.data()[i];
        model.params.data_mut()[i] = orig + FD_H;
        let fp = sampled_objective(&model, &cfg, &dataset, &usable, iteration, None)
            .unwrap()
            .total;
        model.params.data_mut()[i] = orig - FD_H;
        let fm = sampled_objective(&model, &cfg, &dataset, &usable, iteration, None)
            .unwrap()
            .total;
        model.params.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * FD_H);
        if (grads[i] - fd).abs() < 1e-9 * (1.0 + scale) {
            continue;
        }
        worst = worst.max(max_rel_err(&[grads[i]], &[fd], 1e-6 * scale));
    }
    assert!(worst < REL_TOL, "pose path worst rel err {worst:.3e}");
    println!("[gradient-suite] pose path: worst rel err {worst:.3e}");
}
