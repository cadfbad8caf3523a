//! Camera extrinsics/intrinsics, ray generation, and the ring-of-views pose
//! convention used by the synthetic scenes.

use crate::math::{self, Mat3, Vec3};
use crate::Error;

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (`x_cam = R·x_world + t`), OpenCV axes: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub view_index: usize,
}

/// A single ray in world space.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub view_index: usize,
    pub pixel: [f64; 2],
}

impl CameraPose {
    pub fn validate(&self) -> Result<(), Error> {
        let err = math::orthonormality_error(&self.rotation);
        if err > 1e-6 {
            return Err(Error::Contract(format!(
                "camera {} rotation not orthonormal (err {err:.2e})",
                self.view_index
            )));
        }
        let det = math::det3(&self.rotation);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "camera {} rotation determinant {det} (expected +1)",
                self.view_index
            )));
        }
        if self.focal[0] <= 0.0 || self.focal[1] <= 0.0 {
            return Err(Error::Contract(format!(
                "camera {} non-positive focal length",
                self.view_index
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates (-Rᵀ·t).
    pub fn center(&self) -> Vec3 {
        let rt = math::mat_t(&self.rotation);
        math::scale(math::matvec(&rt, self.translation), -1.0)
    }

    /// Camera-to-world rotation (columns are the camera axes in world frame).
    pub fn rotation_c2w(&self) -> Mat3 {
        math::mat_t(&self.rotation)
    }

    /// World-space ray through an image-plane point in pixel units.
    /// Integer pixel (i, j) has its center at (i + 0.5, j + 0.5).
    pub fn ray(&self, px: f64, py: f64) -> Result<Ray, Error> {
        if !(0.0..=self.width as f64).contains(&px) || !(0.0..=self.height as f64).contains(&py) {
            return Err(Error::Contract(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let dir_cam = [
            (px - self.principal_point[0]) / self.focal[0],
            (py - self.principal_point[1]) / self.focal[1],
            1.0,
        ];
        let rt = math::mat_t(&self.rotation);
        let dir = math::normalize(math::matvec(&rt, dir_cam));
        Ok(Ray {
            origin: self.center(),
            direction: dir,
            view_index: self.view_index,
            pixel: [px, py],
        })
    }

    /// Project a world point; returns (px, py, depth-in-front).
    pub fn project(&self, x: Vec3) -> (f64, f64, f64) {
        let c = math::add(math::matvec(&self.rotation, x), self.translation);
        (
            self.principal_point[0] + self.focal[0] * c[0] / c[2],
            self.principal_point[1] + self.focal[1] * c[1] / c[2],
            c[2],
        )
    }
}

/// One ray per requested image-plane point.
pub fn generate_rays(pose: &CameraPose, pixels: &[(f64, f64)]) -> Result<Vec<Ray>, Error> {
    pixels.iter().map(|&(px, py)| pose.ray(px, py)).collect()
}

/// Look-at extrinsics: camera at `eye` looking toward `target`, `up`
/// approximately opposing the image y axis (y points down).
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> (Mat3, Vec3) {
    let forward = math::normalize(math::sub(target, eye));
    let right = math::normalize(math::cross(forward, up));
    let down = math::cross(forward, right);
    // rows of the world->camera rotation are the camera axes
    let rotation = [right, down, forward];
    let translation = math::scale(math::matvec(&rotation, eye), -1.0);
    (rotation, translation)
}

/// `m` poses evenly spaced in azimuth on a ring of the given radius at
/// elevation 0, all looking at the origin.
pub fn ring_poses(
    m: usize,
    radius: f64,
    fov_deg: f64,
    width: usize,
    height: usize,
) -> Vec<CameraPose> {
    let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    (0..m)
        .map(|v| {
            let az = 2.0 * std::f64::consts::PI * v as f64 / m as f64;
            let eye = [radius * az.cos(), radius * az.sin(), 0.0];
            let (rotation, translation) = look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
            CameraPose {
                rotation,
                translation,
                focal: [focal, focal],
                principal_point: [width as f64 / 2.0, height as f64 / 2.0],
                width,
                height,
                view_index: v,
            }
        })
        .collect()
}

/// Azimuth (radians) of a pose's camera center around the z axis.
pub fn azimuth_of(pose: &CameraPose) -> f64 {
    let c = pose.center();
    c[1].atan2(c[0])
}

/// Entry/exit distances of a ray against the sphere |x| = radius, if any.
pub fn ray_sphere_range(origin: Vec3, dir: Vec3, radius: f64) -> Option<(f64, f64)> {
    let b = math::dot(origin, dir);
    let c = math::dot(origin, origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= 1e-6 {
        return None;
    }
    Some((t0.max(1e-6), t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, norm, normalize, sub};
    use approx::assert_relative_eq;

    fn test_pose() -> CameraPose {
        ring_poses(8, 2.2, 40.0, 128, 128)[3].clone()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let pose = test_pose();
        let ray = pose
            .ray(pose.principal_point[0], pose.principal_point[1])
            .unwrap();
        // optical axis: from the camera center toward the origin (look-at target)
        let axis = normalize(sub([0.0, 0.0, 0.0], pose.center()));
        assert_relative_eq!(dot(ray.direction, axis), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn corner_rays_are_distinct_and_symmetric() {
        let pose = test_pose();
        let w = pose.width as f64;
        let h = pose.height as f64;
        let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
        let rays = generate_rays(&pose, &corners).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(norm(sub(rays[i].direction, rays[j].direction)) > 1e-6);
            }
        }
        // centered principal point: all corners at the same angle to the axis
        let axis = normalize(sub([0.0, 0.0, 0.0], pose.center()));
        let angles: Vec<f64> = rays.iter().map(|r| dot(r.direction, axis)).collect();
        for a in &angles[1..] {
            assert_relative_eq!(*a, angles[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn offset_by_focal_gives_45_degrees() {
        // focal chosen so center + focal stays inside the image bounds
        let w = 64usize;
        let f = w as f64 / 4.0;
        let pose = CameraPose {
            rotation: crate::math::IDENTITY3,
            translation: [0.0, 0.0, 0.0],
            focal: [f, f],
            principal_point: [w as f64 / 2.0, w as f64 / 2.0],
            width: w,
            height: w,
            view_index: 0,
        };
        // identity extrinsics: optical axis is +z
        let ray = pose
            .ray(pose.principal_point[0] + pose.focal[0], pose.principal_point[1])
            .unwrap();
        assert_relative_eq!(
            dot(ray.direction, [0.0, 0.0, 1.0]),
            (std::f64::consts::FRAC_PI_4).cos(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let pose = test_pose();
        assert!(pose.ray(-1.0, 4.0).is_err());
        assert!(pose.ray(5.0, 129.5).is_err());
    }

    #[test]
    fn ring_poses_are_valid_and_unit_determinant() {
        for pose in ring_poses(16, 2.2, 40.0, 64, 64) {
            pose.validate().unwrap();
            let c = pose.center();
            assert_relative_eq!(norm(c), 2.2, epsilon = 1e-9);
            assert_relative_eq!(c[2], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_range_straddles_origin_for_centered_ring() {
        let pose = test_pose();
        let ray = pose
            .ray(pose.principal_point[0], pose.principal_point[1])
            .unwrap();
        let (near, far) = ray_sphere_range(ray.origin, ray.direction, 3f64.sqrt()).unwrap();
        assert!(near > 0.0 && far > near);
        assert!(near < 2.2 && far > 2.2);
    }
}
