//! Geometry and image metrics: Chamfer distance, volume IoU, PSNR, SSIM.

use ndarray::{Array2, Array3};

use crate::math::{self, Vec3};
use crate::mesh::TriMesh;
use crate::{Error, Result};

/// A finite, non-empty set of 3-d points.
#[derive(Debug, Clone)]
pub struct PointCloud(pub Vec<Vec3>);

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud must be non-empty".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("point cloud has non-finite points".into()));
        }
        Ok(PointCloud(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// ---- exact nearest neighbors via a kd-tree ------------------------------

struct KdTree {
    points: Vec<Vec3>,
    // nodes in implicit order: index into `order`, split by median
    order: Vec<u32>,
}

impl KdTree {
    fn build(points: &[Vec3]) -> KdTree {
        let order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            order,
        };
        let n = tree.order.len();
        tree.sort_range(0, n, 0);
        tree
    }

    fn sort_range(&mut self, lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
        });
        self.sort_range(lo, mid, depth + 1);
        self.sort_range(mid + 1, hi, depth + 1);
    }

    /// Squared distance to the nearest stored point.
    fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.order.len(), 0, q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: Vec3, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.points[self.order[mid] as usize];
        let d = math::sub(p, q);
        let dist = math::dot(d, d);
        if dist < *best {
            *best = dist;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, best);
        if delta * delta < *best {
            self.search(far.0, far.1, depth + 1, q, best);
        }
    }
}

/// Symmetric mean of squared nearest-neighbor distances:
/// `½·mean_a min_b ‖a−b‖² + ½·mean_b min_a ‖a−b‖²`.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let ta = KdTree::build(&a.0);
    let tb = KdTree::build(&b.0);
    let mean_a: f64 = a.0.iter().map(|&p| tb.nearest_sq(p)).sum::<f64>() / a.len() as f64;
    let mean_b: f64 = b.0.iter().map(|&p| ta.nearest_sq(p)).sum::<f64>() / b.len() as f64;
    0.5 * mean_a + 0.5 * mean_b
}

/// Reference O(n²) Chamfer used as the oracle in tests.
pub fn chamfer_distance_bruteforce(a: &PointCloud, b: &PointCloud) -> f64 {
    let nn = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| {
                        let d = math::sub(p, q);
                        math::dot(d, d)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * nn(&a.0, &b.0) + 0.5 * nn(&b.0, &a.0)
}

// ---- volume IoU ----------------------------------------------------------

/// Binary occupancy over [-1,1]³ at `resolution³` voxels.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 32 {
            return Err(Error::Config("occupancy resolution must be >= 32".into()));
        }
        Ok(OccupancyGrid {
            resolution,
            cells: vec![false; resolution * resolution * resolution],
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn center(&self, i: usize) -> f64 {
        -1.0 + 2.0 * (i as f64 + 0.5) / self.resolution as f64
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Occupancy from any inside-test (e.g. an analytic SDF sign).
    pub fn from_inside_fn(resolution: usize, inside: impl Fn(Vec3) -> bool) -> Result<Self> {
        let mut g = OccupancyGrid::new(resolution)?;
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let p = [g.center(x), g.center(y), g.center(z)];
                    let idx = g.index(x, y, z);
                    g.cells[idx] = inside(p);
                }
            }
        }
        Ok(g)
    }
}

/// Voxelize a watertight mesh by parity ray casting along +x through voxel
/// centers. Fails when the mesh is not watertight.
pub fn voxelize_mesh(mesh: &TriMesh, resolution: usize) -> Result<OccupancyGrid> {
    mesh.check_watertight()?;
    let mut grid = OccupancyGrid::new(resolution)?;
    let res = resolution;

    // bin triangles by the (y, z) cells their bounding box covers
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); res * res];
    let to_cell = |v: f64| -> (usize, usize) {
        let c = ((v + 1.0) / 2.0 * res as f64).floor();
        let lo = c.clamp(0.0, (res - 1) as f64) as usize;
        (lo, lo)
    };
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &vi in tri {
            let v = mesh.vertices[vi as usize];
            ymin = ymin.min(v[1]);
            ymax = ymax.max(v[1]);
            zmin = zmin.min(v[2]);
            zmax = zmax.max(v[2]);
        }
        let (y0, _) = to_cell(ymin);
        let (y1, _) = to_cell(ymax);
        let (z0, _) = to_cell(zmin);
        let (z1, _) = to_cell(zmax);
        for z in z0..=z1 {
            for y in y0..=y1 {
                bins[z * res + y].push(t as u32);
            }
        }
    }

    // tiny deterministic offsets break exact edge/vertex alignments
    let eps_y = 2.718281e-9;
    let eps_z = 3.141592e-9;
    for z in 0..res {
        for y in 0..res {
            let oy = grid.center(y) + eps_y;
            let oz = grid.center(z) + eps_z;
            let mut crossings: Vec<f64> = Vec::new();
            for &t in &bins[z * res + y] {
                let tri = mesh.triangles[t as usize];
                if let Some(x) = ray_x_triangle(
                    oy,
                    oz,
                    mesh.vertices[tri[0] as usize],
                    mesh.vertices[tri[1] as usize],
                    mesh.vertices[tri[2] as usize],
                ) {
                    crossings.push(x);
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // walk voxel centers, counting crossings to the left
            let mut ci = 0usize;
            for x in 0..res {
                let cx = grid.center(x);
                while ci < crossings.len() && crossings[ci] < cx {
                    ci += 1;
                }
                if ci % 2 == 1 {
                    let idx = grid.index(x, y, z);
                    grid.cells[idx] = true;
                }
            }
        }
    }
    Ok(grid)
}

/// Intersection x-coordinate of the line (x, oy, oz) with a triangle.
fn ray_x_triangle(oy: f64, oz: f64, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    // 2-d barycentric test in the (y, z) plane
    let (v0y, v0z) = (c[1] - a[1], c[2] - a[2]);
    let (v1y, v1z) = (b[1] - a[1], b[2] - a[2]);
    let (v2y, v2z) = (oy - a[1], oz - a[2]);
    let den = v0y * v1z - v1y * v0z;
    if den.abs() < 1e-300 {
        return None;
    }
    let u = (v2y * v1z - v1y * v2z) / den;
    let v = (v0y * v2z - v2y * v0z) / den;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(a[0] + u * (c[0] - a[0]) + v * (b[0] - a[0]))
}

/// Intersection-over-union of two occupancy grids of equal resolution.
pub fn volume_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::Contract(format!(
            "grid resolutions differ: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0); // both empty: identical
    }
    Ok(inter as f64 / union as f64)
}

/// Volume IoU of two watertight meshes at the given voxel resolution.
pub fn volume_iou_meshes(a: &TriMesh, b: &TriMesh, resolution: usize) -> Result<f64> {
    let ga = voxelize_mesh(a, resolution)?;
    let gb = voxelize_mesh(b, resolution)?;
    volume_iou(&ga, &gb)
}

// ---- image metrics -------------------------------------------------------

/// PSNR cap reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1].
pub fn psnr(x: &Array3<f64>, y: &Array3<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Contract(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Rec. 601 luminance.
pub fn luminance(x: &Array3<f64>) -> Array2<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * x[[i, j, 0]] + 0.587 * x[[i, j, 1]] + 0.114 * x[[i, j, 2]]
    })
}

/// Windowed SSIM with an 11×11 Gaussian (σ = 1.5), stabilizers k1 = 0.01 and
/// k2 = 0.03, valid-mode windows, on luminance.
pub fn ssim(x: &Array3<f64>, y: &Array3<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    ssim_gray(&luminance(x), &luminance(y))
}

pub fn ssim_gray(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < WIN || w < WIN {
        return Err(Error::Contract(format!(
            "image {w}x{h} smaller than the {WIN}x{WIN} SSIM window"
        )));
    }

    let mut kernel = [0.0f64; WIN];
    let mut sum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - (WIN as f64 - 1.0) / 2.0;
        *k = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *k;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    // separable weighted-window moments
    let conv_h = |img: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((h, w - WIN + 1));
        for i in 0..h {
            for j in 0..w - WIN + 1 {
                let mut acc = 0.0;
                for k in 0..WIN {
                    acc += kernel[k] * img[[i, j + k]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };
    let conv_v = |img: &Array2<f64>| -> Array2<f64> {
        let (hh, ww) = (img.shape()[0], img.shape()[1]);
        let mut out = Array2::zeros((hh - WIN + 1, ww));
        for i in 0..hh - WIN + 1 {
            for j in 0..ww {
                let mut acc = 0.0;
                for k in 0..WIN {
                    acc += kernel[k] * img[[i + k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };
    let smooth = |img: &Array2<f64>| conv_v(&conv_h(img));

    let mu_x = smooth(x);
    let mu_y = smooth(y);
    let xx = smooth(&(x * x));
    let yy = smooth(&(y * y));
    let xy = smooth(&(x * y));

    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..mu_x.shape()[0] {
        for j in 0..mu_x.shape()[1] {
            let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
            let vx = xx[[i, j]] - mx * mx;
            let vy = yy[[i, j]] - my * my;
            let cov = xy[[i, j]] - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chamfer_hand_cases() {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer_distance(&a, &a), 0.0);
        assert_eq!(chamfer_distance(&a, &b), 1.0);
        assert_eq!(chamfer_distance(&b, &a), 1.0);
    }

    #[test]
    fn chamfer_matches_bruteforce_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cloud = |n: usize| {
            PointCloud::new(
                (0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ]
                    })
                    .collect(),
            )
            .unwrap()
        };
        let a = cloud(200);
        let b = cloud(200);
        let fast = chamfer_distance(&a, &b);
        let slow = chamfer_distance_bruteforce(&a, &b);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        // symmetry
        assert_eq!(fast, chamfer_distance(&b, &a));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(PointCloud::new(vec![]).is_err());
    }

    fn unit_box_mesh(center: Vec3, half: Vec3) -> TriMesh {
        // 12 triangles, outward orientation
        let mut v = Vec::new();
        for dz in [-1.0, 1.0] {
            for dy in [-1.0, 1.0] {
                for dx in [-1.0, 1.0] {
                    v.push([
                        center[0] + dx * half[0],
                        center[1] + dy * half[1],
                        center[2] + dz * half[2],
                    ]);
                }
            }
        }
        // corner order: bit0=x, bit1=y, bit2=z
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // z-
            [4, 5, 7, 6], // z+
            [0, 1, 5, 4], // y-
            [2, 6, 7, 3], // y+
            [0, 4, 6, 2], // x-
            [1, 3, 7, 5], // x+
        ];
        let mut triangles = Vec::new();
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        let mut mesh = TriMesh {
            vertices: v,
            triangles,
            colors: None,
        };
        if mesh.signed_volume() < 0.0 {
            for t in &mut mesh.triangles {
                t.swap(1, 2);
            }
        }
        mesh
    }

    #[test]
    fn iou_of_identical_and_disjoint_shapes() {
        let a = unit_box_mesh([0.0, 0.0, 0.0], [0.25, 0.25, 0.25]);
        let b = unit_box_mesh([0.6, 0.6, 0.6], [0.2, 0.2, 0.2]);
        assert_relative_eq!(volume_iou_meshes(&a, &a, 64).unwrap(), 1.0);
        assert_relative_eq!(volume_iou_meshes(&a, &b, 64).unwrap(), 0.0);
    }

    #[test]
    fn half_overlapping_boxes_have_iou_one_third() {
        // grid-aligned boxes: at resolution 64 the cell size is 1/32, and
        // all faces lie on voxel boundaries, so the count is exact
        let a = unit_box_mesh([-0.25, 0.0, 0.0], [0.25, 0.25, 0.25]);
        let b = unit_box_mesh([0.0, 0.0, 0.0], [0.25, 0.25, 0.25]);
        let iou = volume_iou_meshes(&a, &b, 64).unwrap();
        assert_relative_eq!(iou, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn open_mesh_is_rejected_for_voxelization() {
        let mut a = unit_box_mesh([0.0; 3], [0.25; 3]);
        a.triangles.pop();
        match voxelize_mesh(&a, 64) {
            Err(Error::NotWatertight(_)) => {}
            other => panic!("expected NotWatertight, got {other:?}"),
        }
    }

    #[test]
    fn occupancy_from_sdf_matches_mesh_voxelization() {
        let mesh = unit_box_mesh([0.1, 0.0, -0.1], [0.3, 0.2, 0.25]);
        let g_mesh = voxelize_mesh(&mesh, 64).unwrap();
        let g_sdf = OccupancyGrid::from_inside_fn(64, |p| {
            (p[0] - 0.1).abs() < 0.3 && p[1].abs() < 0.2 && (p[2] + 0.1).abs() < 0.25
        })
        .unwrap();
        let iou = volume_iou(&g_mesh, &g_sdf).unwrap();
        assert!(iou > 0.995, "iou {iou}");
    }

    #[test]
    fn psnr_hand_cases() {
        let x = Array3::from_elem((8, 8, 3), 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        // mse 0.01 -> 20 dB
        let y = x.mapv(|v| v + 0.1);
        assert_relative_eq!(psnr(&x, &y).unwrap(), 20.0, epsilon = 1e-9);
        let zero = Array3::zeros((8, 8, 3));
        let one = Array3::from_elem((8, 8, 3), 1.0);
        assert_relative_eq!(psnr(&zero, &one).unwrap(), 0.0, epsilon = 1e-12);
        let bad = Array3::zeros((4, 8, 3));
        assert!(psnr(&x, &bad).is_err());
    }

    #[test]
    fn ssim_identical_is_one_and_inverted_checker_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array3::from_shape_fn((24, 24, 3), |_| rng.gen_range(0.0..1.0));
        assert_relative_eq!(ssim(&x, &x).unwrap(), 1.0, epsilon = 1e-12);

        // binary checker and its inverse: structure anti-correlates
        let checker = Array3::from_shape_fn((24, 24, 3), |(i, j, _)| ((i + j) % 2) as f64);
        let inverted = checker.mapv(|v| 1.0 - v);
        let s = ssim(&checker, &inverted).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_constant_images_follow_stabilizer_convention() {
        let a = Array3::from_elem((16, 16, 3), 0.2);
        let b = Array3::from_elem((16, 16, 3), 0.8);
        // zero variance: structure term degenerates to 1, luminance < 1
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        assert_relative_eq!(ssim(&a, &b).unwrap(), expected, epsilon = 1e-12);
        // tiny image is rejected
        let small = Array3::from_elem((8, 8, 3), 0.2);
        assert!(ssim(&small, &small).is_err());
    }
}
