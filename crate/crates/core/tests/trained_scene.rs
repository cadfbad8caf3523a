//! Probes against a small trained fixture: a red sphere fused from 8
//! consistent views. The fixture trains once per test binary.

use std::sync::OnceLock;

use viewfuse_core::dataset::MultiViewSet;
use viewfuse_core::field::FieldConfig;
use viewfuse_core::fusion::{
    extract_mesh, reg_eikonal, run_fusion, FieldProbe, FusionConfig, FusionModel, FusionOutput,
};
use viewfuse_core::hashgrid::HashGridConfig;
use viewfuse_core::math;
use viewfuse_core::render::{render_pixel, RenderConfig};
use viewfuse_core::synth::{make_dataset, AnalyticScene};

struct Fixture {
    model: FusionModel,
    dataset: MultiViewSet,
    cfg: FusionConfig,
    scene: AnalyticScene,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let (dataset, _) = make_dataset(&scene, 8, 48, 0.0, None, 5).unwrap();
        let cfg = FusionConfig {
            field: FieldConfig {
                hash: HashGridConfig {
                    levels: 8,
                    base_res: 8,
                    max_res: 128,
                    features_per_level: 2,
                    table_size_log2: 15,
                },
                geom_hidden: 32,
                geom_feat: 11,
                color_hidden: 32,
                conflict_hidden: 24,
                view_embed_dim: 8,
                ..FieldConfig::default()
            },
            iterations: 900,
            rays_per_batch: 160,
            chunk_rays: 160,
            n_coarse: 40,
            n_importance: 16,
            pose_warmup: 300,
            conflict_warmup: 250,
            rerender: false,
            seed: 21,
            log_every: 100,
            ..FusionConfig::default()
        };
        let FusionOutput { model, .. } = run_fusion(&dataset, &cfg).unwrap();
        Fixture {
            model,
            dataset,
            cfg,
            scene,
        }
    })
}

/// Points on the true sphere, away from poles.
fn surface_probes(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let el = 0.8 * (i as f64 * 0.37).sin();
            [
                0.5 * el.cos() * az.cos(),
                0.5 * el.cos() * az.sin(),
                0.5 * el.sin(),
            ]
        })
        .collect()
}

#[test]
fn sdf_vanishes_on_the_true_surface() {
    let f = fixture();
    let mut worst = 0.0f64;
    for p in surface_probes(64) {
        let (s, _) = f.model.field.eval_sdf(&f.model.params, p);
        worst = worst.max(s.abs());
    }
    assert!(worst < 0.01, "max |s| on surface = {worst}");
}

#[test]
fn sdf_gradient_points_radially_outward() {
    let f = fixture();
    for p in surface_probes(32) {
        let g = f.model.field.eval_sdf_gradient(&f.model.params, p);
        let radial = math::normalize(p);
        let cos = math::dot(math::normalize(g), radial);
        assert!(
            cos > (5.0f64).to_radians().cos(),
            "gradient deviates {:.2}° at {p:?}",
            cos.acos().to_degrees()
        );
    }
}

#[test]
fn surface_color_is_dominantly_red() {
    let f = fixture();
    for p in surface_probes(16) {
        let n = math::normalize(f.model.field.eval_sdf_gradient(&f.model.params, p));
        let (_, feat) = f.model.field.eval_sdf(&f.model.params, p);
        let c = f
            .model
            .field
            .eval_color(&f.model.params, &feat, p, n, n)
            .unwrap();
        assert!(c[0] > c[1] && c[0] > c[2], "albedo ordering broken: {c:?}");
    }
}

#[test]
fn center_pixel_depth_matches_ray_sphere_intersection() {
    let f = fixture();
    let render_cfg = RenderConfig {
        stratified: false,
        attr_weight_min: 0.0,
        ..f.cfg.render_config()
    };
    for view in [0, 3, 5] {
        let pose = &f.dataset.views[view].pose;
        let ray = pose
            .ray(pose.principal_point[0], pose.principal_point[1])
            .unwrap();
        let out = render_pixel(&f.model.field, &f.model.params, &ray, None, &render_cfg).unwrap();
        // camera at radius 2.2 looking at the center of a 0.5 sphere
        let expected = 2.2 - 0.5;
        assert!(
            (out.depth - expected).abs() / expected < 0.02,
            "view {view}: depth {} vs {expected}",
            out.depth
        );
        assert!(out.mask > 0.99);
    }
}

#[test]
fn eikonal_residual_is_small_at_the_surface() {
    let f = fixture();
    let probe = FieldProbe {
        field: &f.model.field,
        params: &f.model.params,
    };
    let value = reg_eikonal(&probe, &surface_probes(64));
    assert!(value < 0.01, "eikonal residual {value}");
}

#[test]
fn conflict_stays_low_on_consistent_data() {
    let f = fixture();
    // mean rendered conflict over foreground pixels of a probe view
    let render_cfg = RenderConfig {
        stratified: false,
        ..f.cfg.render_config()
    };
    let pose = &f.dataset.views[2].pose;
    let mut total = 0.0;
    let mut count = 0;
    for y in (4..44).step_by(4) {
        for x in (4..44).step_by(4) {
            let ray = pose.ray(x as f64 + 0.5, y as f64 + 0.5).unwrap();
            let out =
                render_pixel(&f.model.field, &f.model.params, &ray, None, &render_cfg).unwrap();
            if out.mask > 0.5 {
                total += out.conflict;
                count += 1;
            }
        }
    }
    assert!(count > 10);
    let mean = total / count as f64;
    assert!(mean < 0.15, "mean conflict {mean}");
}

#[test]
fn extracted_mesh_matches_the_analytic_sphere() {
    let f = fixture();
    let mesh = extract_mesh(&f.model, 96).unwrap();
    mesh.check_watertight().unwrap();
    let mut bad = 0usize;
    for v in &mesh.vertices {
        if (math::norm(*v) - 0.5).abs() > 0.02 {
            bad += 1;
        }
    }
    assert!(
        (bad as f64) < 0.01 * mesh.n_vertices() as f64,
        "{bad}/{} vertices off the sphere",
        mesh.n_vertices()
    );
    // vertex colors lean red like the albedo
    let colors = mesh.colors.as_ref().unwrap();
    let reds = colors.iter().filter(|c| c[0] > c[1] && c[0] > c[2]).count();
    assert!(reds as f64 > 0.95 * colors.len() as f64);
    let _ = &f.scene;
}

#[test]
fn higher_mesh_resolution_reduces_chamfer_to_the_analytic_surface() {
    use viewfuse_core::metrics::{chamfer_distance, PointCloud};
    let f = fixture();
    let truth = PointCloud::new(f.scene.surface_samples(20_000, 1)).unwrap();
    let mut previous = f64::INFINITY;
    for res in [64, 128] {
        let mesh = extract_mesh(&f.model, res).unwrap();
        let cloud = PointCloud::new(mesh.sample_surface(20_000, 2)).unwrap();
        let cd = chamfer_distance(&cloud, &truth);
        assert!(cd < previous, "chamfer did not shrink: {cd} vs {previous}");
        previous = cd;
    }
}
