//! Synthetic ground-truth oracle: analytic SDF scenes sphere-traced into
//! multi-view datasets, with controllable pose perturbation and cross-view
//! inconsistency injection for the fusion ablations.
//!
//! Images are rendered from the *true* poses; perturbation corrupts only the
//! recorded poses (simulating generated-vs-query pose deviation).
//! Corruption (hue rotation, brightness) is applied to foreground pixels of
//! the affected views so the white background stays coherent with the masks.
//! All outputs are quantized to 8-bit levels, so exporting and re-importing
//! a dataset is lossless.

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;

use crate::camera::{ray_sphere_range, ring_poses, CameraPose};
use crate::dataset::{MultiViewSet, ViewData};
use crate::math::{self, Vec3};
use crate::rng::{derive, Stream};
use crate::{Error, Result};

pub const CAMERA_RADIUS: f64 = 2.2;
pub const CAMERA_FOV_DEG: f64 = 40.0;
const LIGHT_DIR: Vec3 = [0.442, -0.294, 0.847];
const AMBIENT: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
    Torus { center: Vec3, major: f64, minor: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// Union of primitives (min combination), all inside the unit cube.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

impl Shape {
    pub fn sdf(&self, x: Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => math::norm(math::sub(x, *center)) - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let p = math::sub(x, *center);
                let q = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                let outside = math::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let p = math::sub(x, *center);
                let l = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let q = [l - major, p[2]];
                (q[0] * q[0] + q[1] * q[1]).sqrt() - minor
            }
        }
    }

    /// Exact gradient away from medial axes and seams.
    pub fn gradient(&self, x: Vec3) -> Vec3 {
        match self {
            Shape::Sphere { center, .. } => math::normalize(math::sub(x, *center)),
            Shape::Box {
                center,
                half_extents,
            } => {
                let p = math::sub(x, *center);
                let q = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                if q[0] > 0.0 || q[1] > 0.0 || q[2] > 0.0 {
                    let o = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                    let g = math::normalize(o);
                    [
                        g[0] * p[0].signum(),
                        g[1] * p[1].signum(),
                        g[2] * p[2].signum(),
                    ]
                } else {
                    // inside: gradient along the least-deep axis
                    let mut axis = 0;
                    for a in 1..3 {
                        if q[a] > q[axis] {
                            axis = a;
                        }
                    }
                    let mut g = [0.0; 3];
                    g[axis] = p[axis].signum();
                    g
                }
            }
            Shape::Torus { center, major, .. } => {
                let p = math::sub(x, *center);
                let l = (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-12);
                let q0 = l - major;
                let qn = (q0 * q0 + p[2] * p[2]).sqrt().max(1e-12);
                [
                    q0 / qn * p[0] / l,
                    q0 / qn * p[1] / l,
                    p[2] / qn,
                ]
            }
        }
    }

    fn surface_area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Box { half_extents: h, .. } => {
                8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
            }
            Shape::Torus { major, minor, .. } => {
                4.0 * std::f64::consts::PI * std::f64::consts::PI * major * minor
            }
        }
    }

    fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match self {
            Shape::Sphere { center, radius } => {
                let d = random_unit(rng);
                math::add(*center, math::scale(d, *radius))
            }
            Shape::Box {
                center,
                half_extents: h,
            } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 0;
                for (a, &w) in areas.iter().enumerate() {
                    if u < w {
                        axis = a;
                        break;
                    }
                    u -= w;
                }
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [
                    rng.gen_range(-h[0]..h[0]),
                    rng.gen_range(-h[1]..h[1]),
                    rng.gen_range(-h[2]..h[2]),
                ];
                p[axis] = sign * h[axis];
                math::add(*center, p)
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => loop {
                let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let phi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                // area element ∝ R + r·cos(phi): rejection keeps it uniform
                let accept = (major + minor * phi.cos()) / (major + minor);
                if rng.gen::<f64>() <= accept {
                    let ring = major + minor * phi.cos();
                    return math::add(
                        *center,
                        [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()],
                    );
                }
            },
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = math::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return math::scale(v, 1.0 / n);
        }
    }
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        for p in &self.primitives {
            let inside_cube = match &p.shape {
                Shape::Sphere { center, radius } => {
                    center.iter().all(|c| c.abs() + radius <= 1.0)
                }
                Shape::Box {
                    center,
                    half_extents,
                } => (0..3).all(|a| center[a].abs() + half_extents[a] <= 1.0),
                Shape::Torus {
                    center,
                    major,
                    minor,
                } => {
                    center[0].abs() + major + minor <= 1.0
                        && center[1].abs() + major + minor <= 1.0
                        && center[2].abs() + minor <= 1.0
                }
            };
            if !inside_cube {
                return Err(Error::Config(
                    "primitive extends outside the unit cube".into(),
                ));
            }
            if p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Config("albedo outside [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Union SDF (exact for single primitives, min-combination otherwise).
    pub fn sdf(&self, x: Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.shape.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    fn nearest(&self, x: Vec3) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.primitives.iter().enumerate() {
            let d = p.shape.sdf(x);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn gradient(&self, x: Vec3) -> Vec3 {
        self.primitives[self.nearest(x)].shape.gradient(x)
    }

    pub fn albedo_at(&self, x: Vec3) -> [f64; 3] {
        self.primitives[self.nearest(x)].albedo
    }

    /// Area-weighted surface samples of the union (points inside another
    /// primitive are rejected).
    pub fn surface_samples(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = derive(seed, Stream::SynthScene, 1);
        let areas: Vec<f64> = self.primitives.iter().map(|p| p.shape.surface_area()).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut u = rng.gen_range(0.0..total);
            let mut pi = 0;
            for (i, &a) in areas.iter().enumerate() {
                if u < a {
                    pi = i;
                    break;
                }
                u -= a;
            }
            let p = self.primitives[pi].shape.sample_surface(&mut rng);
            // keep only points on the union boundary
            let other_inside = self
                .primitives
                .iter()
                .enumerate()
                .any(|(j, q)| j != pi && q.shape.sdf(p) < -1e-9);
            if !other_inside {
                out.push(p);
            }
        }
        out
    }

    /// Named presets used by the CLI and the test suites.
    pub fn preset(name: &str) -> Result<AnalyticScene> {
        let scene = match name {
            "sphere" => AnalyticScene {
                primitives: vec![Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, 0.0],
                        radius: 0.5,
                    },
                    albedo: [0.8, 0.2, 0.15],
                }],
            },
            "spherebox" => AnalyticScene {
                primitives: vec![
                    Primitive {
                        shape: Shape::Sphere {
                            center: [0.0, 0.0, 0.22],
                            radius: 0.34,
                        },
                        albedo: [0.8, 0.2, 0.15],
                    },
                    Primitive {
                        shape: Shape::Box {
                            center: [0.0, 0.0, -0.28],
                            half_extents: [0.38, 0.38, 0.2],
                        },
                        albedo: [0.2, 0.45, 0.8],
                    },
                ],
            },
            "box" => AnalyticScene {
                primitives: vec![Primitive {
                    shape: Shape::Box {
                        center: [0.0, 0.0, 0.0],
                        half_extents: [0.35, 0.35, 0.35],
                    },
                    albedo: [0.25, 0.7, 0.3],
                }],
            },
            "torus" => AnalyticScene {
                primitives: vec![Primitive {
                    shape: Shape::Torus {
                        center: [0.0, 0.0, 0.0],
                        major: 0.4,
                        minor: 0.15,
                    },
                    albedo: [0.85, 0.7, 0.2],
                }],
            },
            "twoblobs" => AnalyticScene {
                primitives: vec![
                    Primitive {
                        shape: Shape::Sphere {
                            center: [0.0, -0.32, 0.0],
                            radius: 0.24,
                        },
                        albedo: [0.8, 0.3, 0.2],
                    },
                    Primitive {
                        shape: Shape::Sphere {
                            center: [0.0, 0.32, 0.0],
                            radius: 0.24,
                        },
                        albedo: [0.2, 0.3, 0.8],
                    },
                ],
            },
            other => {
                return Err(Error::Config(format!("unknown scene preset '{other}'")));
            }
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Cross-view inconsistency injection: hue rotation (degrees around the gray
/// axis) and brightness scaling on the listed views, optionally restricted
/// to one half of the image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub views: Vec<usize>,
    pub hue_deg: f64,
    pub brightness: f64,
    pub half_image: Option<HalfImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HalfImage {
    Left,
    Right,
    Top,
    Bottom,
}

impl CorruptionSpec {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        for &v in &self.views {
            if v >= n_views {
                return Err(Error::Config(format!(
                    "corruption view {v} out of range (m = {n_views})"
                )));
            }
        }
        if self.hue_deg.abs() > 360.0 || self.brightness.abs() > 1.0 {
            return Err(Error::Config("corruption shift out of bounds".into()));
        }
        Ok(())
    }
}

/// Rotation of RGB values around the gray axis by `deg` degrees.
pub fn hue_rotation_matrix(deg: f64) -> math::Mat3 {
    let axis = math::scale([1.0, 1.0, 1.0], deg.to_radians() / 3f64.sqrt());
    math::axis_angle_to_matrix(axis)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sphere-trace one view from its pose. Returns float images prior to
/// quantization: rgb, encoded normal, mask.
pub fn raytrace_view(
    scene: &AnalyticScene,
    pose: &CameraPose,
) -> (Array3<f64>, Array3<f64>, Array2<f64>) {
    let (w, h) = (pose.width, pose.height);
    let light = math::normalize(LIGHT_DIR);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb_row = vec![1.0; w * 3];
            let mut nrm_row = vec![0.5; w * 3];
            let mut msk_row = vec![0.0; w];
            for x in 0..w {
                let ray = pose
                    .ray(x as f64 + 0.5, y as f64 + 0.5)
                    .expect("pixel in bounds");
                if let Some(hit) = sphere_trace(scene, ray.origin, ray.direction) {
                    let n = math::normalize(scene.gradient(hit));
                    let albedo = scene.albedo_at(hit);
                    let lambert = AMBIENT + (1.0 - AMBIENT) * math::dot(n, light).max(0.0);
                    for c in 0..3 {
                        rgb_row[x * 3 + c] = albedo[c] * lambert;
                        nrm_row[x * 3 + c] = (n[c] + 1.0) / 2.0;
                    }
                    msk_row[x] = 1.0;
                }
            }
            (rgb_row, nrm_row, msk_row)
        })
        .collect();

    let mut rgb = Array3::zeros((h, w, 3));
    let mut normal = Array3::zeros((h, w, 3));
    let mut mask = Array2::zeros((h, w));
    for (y, (r, n, m)) in rows.into_iter().enumerate() {
        for x in 0..w {
            for c in 0..3 {
                rgb[[y, x, c]] = r[x * 3 + c];
                normal[[y, x, c]] = n[x * 3 + c];
            }
            mask[[y, x]] = m[x];
        }
    }
    (rgb, normal, mask)
}

fn sphere_trace(scene: &AnalyticScene, origin: Vec3, dir: Vec3) -> Option<Vec3> {
    let (near, far) = ray_sphere_range(origin, dir, 3f64.sqrt())?;
    let mut t = near;
    for _ in 0..512 {
        let p = math::add(origin, math::scale(dir, t));
        let d = scene.sdf(p);
        if d < 1e-7 {
            return Some(p);
        }
        t += d;
        if t > far {
            return None;
        }
    }
    None
}

/// Everything the evaluator needs to score a fusion run against the truth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub scene: AnalyticScene,
    pub true_poses: Vec<CameraPose>,
    pub perturb_deg: f64,
    pub corruption: Option<CorruptionSpec>,
}

/// Build an m-view dataset: ring poses at elevation 0, optional recorded-pose
/// rotation perturbation (images stay rendered from true poses), optional
/// pixel corruption on selected views.
pub fn make_dataset(
    scene: &AnalyticScene,
    m: usize,
    resolution: usize,
    perturb_deg: f64,
    corruption: Option<&CorruptionSpec>,
    seed: u64,
) -> Result<(MultiViewSet, GroundTruth)> {
    if m < 4 {
        return Err(Error::Config("need at least 4 views".into()));
    }
    scene.validate()?;
    if let Some(c) = corruption {
        c.validate(m)?;
    }
    let true_poses = ring_poses(m, CAMERA_RADIUS, CAMERA_FOV_DEG, resolution, resolution);

    let mut views = Vec::with_capacity(m);
    for v in 0..m {
        let (mut rgb, mut normal, mask) = raytrace_view(scene, &true_poses[v]);

        if let Some(c) = corruption {
            if c.views.contains(&v) {
                let rot = hue_rotation_matrix(c.hue_deg);
                let (h, w) = (resolution, resolution);
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] <= 0.5 {
                            continue;
                        }
                        let in_half = match c.half_image {
                            None => true,
                            Some(HalfImage::Left) => x < w / 2,
                            Some(HalfImage::Right) => x >= w / 2,
                            Some(HalfImage::Top) => y < h / 2,
                            Some(HalfImage::Bottom) => y >= h / 2,
                        };
                        if !in_half {
                            continue;
                        }
                        let px = [
                            rgb[[y, x, 0]] * (1.0 + c.brightness),
                            rgb[[y, x, 1]] * (1.0 + c.brightness),
                            rgb[[y, x, 2]] * (1.0 + c.brightness),
                        ];
                        let shifted = math::matvec(&rot, px);
                        for ch in 0..3 {
                            rgb[[y, x, ch]] = shifted[ch].clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }

        rgb.mapv_inplace(quantize);
        normal.mapv_inplace(quantize);

        // recorded pose: world-frame rotation perturbation about the camera
        // center, meaningfully sized in (max/2, max] but never above max
        let pose = if perturb_deg > 0.0 {
            let mut rng = derive(seed, Stream::Perturb, v as u64);
            let angle = rng.gen_range(0.5 * perturb_deg..=perturb_deg).to_radians();
            let axis = random_unit(&mut rng);
            let r_pert = math::axis_angle_to_matrix(math::scale(axis, angle));
            let true_pose = &true_poses[v];
            let c2w = true_pose.rotation_c2w();
            let c2w_rec = math::matmul3(&r_pert, &c2w);
            let rotation = math::mat_t(&c2w_rec);
            let translation = math::scale(math::matvec(&rotation, true_pose.center()), -1.0);
            CameraPose {
                rotation,
                translation,
                ..true_pose.clone()
            }
        } else {
            true_poses[v].clone()
        };

        views.push(ViewData {
            rgb,
            normal,
            mask,
            pose,
        });
    }

    let set = MultiViewSet::new(views)?;
    Ok((
        set,
        GroundTruth {
            scene: scene.clone(),
            true_poses,
            perturb_deg,
            corruption: corruption.cloned(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn analytic_sdf_matches_hand_values() {
        let sphere = Shape::Sphere {
            center: [0.0; 3],
            radius: 0.5,
        };
        assert_relative_eq!(sphere.sdf([0.5, 0.0, 0.0]), 0.0, epsilon = 1e-15);
        assert_relative_eq!(sphere.sdf([1.0, 0.0, 0.0]), 0.5, epsilon = 1e-15);
        let bx = Shape::Box {
            center: [0.0; 3],
            half_extents: [0.3, 0.3, 0.3],
        };
        assert_relative_eq!(bx.sdf([0.0, 0.0, 0.0]), -0.3, epsilon = 1e-15);
    }

    #[test]
    fn sdf_gradients_are_unit_away_from_medial_axes() {
        let scene = AnalyticScene::preset("spherebox").unwrap();
        let mut rng = derive(3, Stream::SynthScene, 0);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 200 {
            let x = [
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
            ];
            // skip points near seams/medial structure where min-union kinks
            let d0 = scene.sdf(x);
            let dists: Vec<f64> = scene.primitives.iter().map(|p| p.shape.sdf(x)).collect();
            let mut sorted = dists.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.len() > 1 && (sorted[1] - sorted[0]).abs() < 0.05 {
                continue;
            }
            if d0.abs() < 0.02 || d0.abs() > 0.5 {
                continue;
            }
            let mut g = [0.0; 3];
            for a in 0..3 {
                let mut xp = x;
                xp[a] += h;
                let fp = scene.sdf(xp);
                xp[a] -= 2.0 * h;
                let fm = scene.sdf(xp);
                g[a] = (fp - fm) / (2.0 * h);
            }
            assert_relative_eq!(math::norm(g), 1.0, epsilon = 1e-3);
            // analytic gradient agrees with finite differences
            let ga = scene.gradient(x);
            for a in 0..3 {
                assert_relative_eq!(ga[a], g[a], epsilon = 1e-4);
            }
            checked += 1;
        }
    }

    #[test]
    fn silhouette_radius_matches_projection() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let res = 96;
        let pose = &ring_poses(8, CAMERA_RADIUS, CAMERA_FOV_DEG, res, res)[0];
        let (_, _, mask) = raytrace_view(scene_ref(&scene), pose);
        // max distance of a foreground pixel center from the principal point
        let mut max_r: f64 = 0.0;
        let mut count = 0usize;
        for y in 0..res {
            for x in 0..res {
                if mask[[y, x]] > 0.5 {
                    count += 1;
                    let dx = x as f64 + 0.5 - pose.principal_point[0];
                    let dy = y as f64 + 0.5 - pose.principal_point[1];
                    max_r = max_r.max((dx * dx + dy * dy).sqrt());
                }
            }
        }
        // exact silhouette radius of a sphere: f·r/sqrt(d² − r²)
        let (d, r) = (CAMERA_RADIUS, 0.5);
        let expected = pose.focal[0] * r / (d * d - r * r).sqrt();
        assert!(
            (max_r - expected).abs() <= 1.0,
            "measured {max_r}, expected {expected}"
        );
        // silhouette area within 2%
        let expected_area = std::f64::consts::PI * expected * expected;
        let measured = count as f64;
        assert!(
            (measured - expected_area).abs() / expected_area < 0.02,
            "area {measured} vs {expected_area}"
        );
    }

    fn scene_ref(s: &AnalyticScene) -> &AnalyticScene {
        s
    }

    #[test]
    fn rim_normals_are_perpendicular_to_view_axis() {
        // probe rays just inside the analytic silhouette circle; tangency
        // holds in the limit, pixel-center rims sit too far inside
        let scene = AnalyticScene::preset("sphere").unwrap();
        let res = 96;
        let pose = &ring_poses(8, CAMERA_RADIUS, CAMERA_FOV_DEG, res, res)[2];
        let (d, r) = (CAMERA_RADIUS, 0.5);
        let rho = pose.focal[0] * r / (d * d - r * r).sqrt();
        let mut checked = 0;
        for k in 0..32 {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / 32.0;
            let px = pose.principal_point[0] + (rho - 0.02) * theta.cos();
            let py = pose.principal_point[1] + (rho - 0.02) * theta.sin();
            let ray = pose.ray(px, py).unwrap();
            let Some(hit) = sphere_trace(&scene, ray.origin, ray.direction) else {
                continue;
            };
            let n = math::normalize(scene.gradient(hit));
            // tangency: the grazing sight line is perpendicular to the normal
            let cos = math::dot(n, ray.direction).abs();
            assert!(cos < (5.0f64).to_radians().sin(), "rim cos {cos}");
            checked += 1;
        }
        assert!(checked > 24);
    }

    #[test]
    fn dataset_without_perturbation_records_true_poses() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let (set, gt) = make_dataset(&scene, 6, 32, 0.0, None, 11).unwrap();
        for (v, view) in set.views.iter().enumerate() {
            assert_eq!(view.pose.rotation, gt.true_poses[v].rotation);
            assert_eq!(view.pose.translation, gt.true_poses[v].translation);
        }
    }

    #[test]
    fn perturbation_is_bounded_and_recorded_only() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let deg = 2.0;
        let (set, gt) = make_dataset(&scene, 8, 32, deg, None, 5).unwrap();
        for (v, view) in set.views.iter().enumerate() {
            let err = math::rotation_distance(
                &view.pose.rotation_c2w(),
                &gt.true_poses[v].rotation_c2w(),
            )
            .to_degrees();
            assert!(err <= deg + 1e-9, "view {v} error {err}");
            assert!(err >= deg * 0.5 - 1e-9, "view {v} error {err}");
            // camera center unchanged by a pure rotation perturbation
            let c_rec = view.pose.center();
            let c_true = gt.true_poses[v].center();
            assert!(math::norm(math::sub(c_rec, c_true)) < 1e-9);
        }
    }

    #[test]
    fn corruption_touches_only_affected_views() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let spec = CorruptionSpec {
            views: vec![1, 3],
            hue_deg: 120.0,
            brightness: 0.0,
            half_image: None,
        };
        let (clean, _) = make_dataset(&scene, 6, 32, 0.0, None, 7).unwrap();
        let (corrupt, gt) = make_dataset(&scene, 6, 32, 0.0, Some(&spec), 7).unwrap();
        assert_eq!(gt.corruption.as_ref().unwrap().views, vec![1, 3]);
        for v in 0..6 {
            let diff: f64 = (&corrupt.views[v].rgb - &clean.views[v].rgb)
                .iter()
                .map(|d| d.abs())
                .sum();
            if spec.views.contains(&v) {
                assert!(diff > 1.0, "view {v} should be corrupted");
            } else {
                assert_eq!(diff, 0.0, "view {v} should be untouched");
            }
            // masks and normals never change
            assert_eq!(corrupt.views[v].mask, clean.views[v].mask);
            assert_eq!(corrupt.views[v].normal, clean.views[v].normal);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = AnalyticScene::preset("spherebox").unwrap();
        let (a, _) = make_dataset(&scene, 4, 24, 1.0, None, 9).unwrap();
        let (b, _) = make_dataset(&scene, 4, 24, 1.0, None, 9).unwrap();
        for v in 0..4 {
            assert_eq!(a.views[v].rgb, b.views[v].rgb);
            assert_eq!(a.views[v].normal, b.views[v].normal);
            assert_eq!(a.views[v].mask, b.views[v].mask);
            assert_eq!(a.views[v].pose.rotation, b.views[v].pose.rotation);
        }
    }

    #[test]
    fn datasets_validate_and_flag_standard_ring() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let (set16, _) = make_dataset(&scene, 16, 24, 0.0, None, 1).unwrap();
        assert!(set16.is_standard_ring());
        let (set8, _) = make_dataset(&scene, 8, 24, 0.0, None, 1).unwrap();
        assert!(!set8.is_standard_ring());
        assert_eq!(set16.validate().unwrap().len(), 16);
    }
}
