//! Triangle meshes and marching-cubes isosurface extraction over the
//! normalized cube [-1,1]³.
//!
//! Vertices are welded on lattice edges (each crossing is computed once and
//! shared), so the extracted surface is watertight wherever the field is
//! well-behaved and topology checks are meaningful.

use std::collections::HashMap;

use rand::Rng;

use crate::math::{self, Vec3};
use crate::mesh_tables::{EDGE_TABLE, TRI_TABLE};
use crate::rng::{derive, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in [0,1].
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Watertightness: every directed edge must be matched by exactly one
    /// reverse edge (consistent orientation, no boundary).
    pub fn check_watertight(&self) -> Result<()> {
        let mut directed: HashMap<(u32, u32), i64> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 {
                return Err(Error::NotWatertight(format!(
                    "directed edge ({a},{b}) used {count} times"
                )));
            }
            if directed.get(&(b, a)).copied().unwrap_or(0) != 1 {
                return Err(Error::NotWatertight(format!(
                    "edge ({a},{b}) has no opposite"
                )));
            }
        }
        Ok(())
    }

    /// Number of connected components over shared vertices.
    pub fn connected_components(&self) -> usize {
        if self.vertices.is_empty() {
            return 0;
        }
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(parent: &mut [u32], mut i: u32) -> u32 {
            while parent[i as usize] != i {
                parent[i as usize] = parent[parent[i as usize] as usize];
                i = parent[i as usize];
            }
            i
        }
        for tri in &self.triangles {
            let a = find(&mut parent, tri[0]);
            let b = find(&mut parent, tri[1]);
            parent[b as usize] = a;
            let c = find(&mut parent, tri[2]);
            parent[c as usize] = a;
        }
        let mut roots = std::collections::HashSet::new();
        for i in 0..self.vertices.len() as u32 {
            roots.insert(find(&mut parent, i));
        }
        roots.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let ab = math::sub(self.vertices[b as usize], self.vertices[a as usize]);
        let ac = math::sub(self.vertices[c as usize], self.vertices[a as usize]);
        0.5 * math::norm(math::cross(ab, ac))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed volume via the divergence theorem; positive for outward-facing
    /// orientation.
    pub fn signed_volume(&self) -> f64 {
        let mut v6 = 0.0;
        for tri in &self.triangles {
            let a = self.vertices[tri[0] as usize];
            let b = self.vertices[tri[1] as usize];
            let c = self.vertices[tri[2] as usize];
            v6 += math::dot(a, math::cross(b, c));
        }
        v6 / 6.0
    }

    /// Area-weighted uniform surface samples.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        assert!(!self.triangles.is_empty(), "cannot sample an empty mesh");
        let mut rng = derive(seed, Stream::SynthScene, 2);
        let mut cum = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cum.push(acc);
        }
        let total = acc;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.gen_range(0.0..total);
            let t = cum.partition_point(|&c| c < u).min(self.triangles.len() - 1);
            let [ia, ib, ic] = self.triangles[t];
            let (a, b, c) = (
                self.vertices[ia as usize],
                self.vertices[ib as usize],
                self.vertices[ic as usize],
            );
            let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let p = math::add(
                a,
                math::add(
                    math::scale(math::sub(b, a), r1),
                    math::scale(math::sub(c, a), r2),
                ),
            );
            out.push(p);
        }
        out
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGE_CORNERS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extract the zero level set of a scalar field over [-1,1]³ with
/// `resolution` cells per axis. The field callback evaluates a batch of
/// positions; negative = inside. Fails with `NoSurface` when the level set
/// is empty.
pub fn marching_cubes(
    field: &mut dyn FnMut(&[Vec3]) -> Vec<f64>,
    resolution: usize,
) -> Result<TriMesh> {
    if resolution < 2 {
        return Err(Error::Config("marching cubes needs resolution >= 2".into()));
    }
    let n = resolution + 1;
    let grid_pos = |i: usize| -1.0 + 2.0 * i as f64 / resolution as f64;

    // sample the corner lattice in z-slabs to bound batch sizes
    let mut values = vec![0.0f64; n * n * n];
    let slab = (4_000_000 / (n * n)).max(1);
    let mut z0 = 0;
    while z0 < n {
        let z1 = (z0 + slab).min(n);
        let mut pts = Vec::with_capacity((z1 - z0) * n * n);
        for z in z0..z1 {
            for y in 0..n {
                for x in 0..n {
                    pts.push([grid_pos(x), grid_pos(y), grid_pos(z)]);
                }
            }
        }
        let vals = field(&pts);
        assert_eq!(vals.len(), pts.len(), "field batch size mismatch");
        values[z0 * n * n..z1 * n * n].copy_from_slice(&vals);
        z0 = z1;
    }
    let value_at = |x: usize, y: usize, z: usize| -> f64 { values[(z * n + y) * n + x] };

    let mut mesh = TriMesh::default();
    // weld vertices by their lattice edge: (x, y, z, axis)
    let mut edge_vertices: HashMap<(usize, usize, usize, u8), u32> = HashMap::new();

    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let mut cube_index = 0usize;
                let mut corner_vals = [0.0f64; 8];
                for (ci, off) in CORNER_OFFSETS.iter().enumerate() {
                    let v = value_at(x + off[0], y + off[1], z + off[2]);
                    corner_vals[ci] = v;
                    if v < 0.0 {
                        cube_index |= 1 << ci;
                    }
                }
                if EDGE_TABLE[cube_index] == 0 {
                    continue;
                }

                let mut cell_edge_vertex = [u32::MAX; 12];
                for (e, &[c1, c2]) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[cube_index] & (1 << e) == 0 {
                        continue;
                    }
                    let o1 = CORNER_OFFSETS[c1];
                    let o2 = CORNER_OFFSETS[c2];
                    // canonical lattice-edge key: lower corner + axis
                    let axis = (0..3).find(|&a| o1[a] != o2[a]).unwrap();
                    let key = (
                        x + o1[0].min(o2[0]),
                        y + o1[1].min(o2[1]),
                        z + o1[2].min(o2[2]),
                        axis as u8,
                    );
                    let idx = *edge_vertices.entry(key).or_insert_with(|| {
                        let v1 = corner_vals[c1];
                        let v2 = corner_vals[c2];
                        let t = if (v2 - v1).abs() < 1e-300 {
                            0.5
                        } else {
                            (0.0 - v1) / (v2 - v1)
                        };
                        let p1 = [
                            grid_pos(x + o1[0]),
                            grid_pos(y + o1[1]),
                            grid_pos(z + o1[2]),
                        ];
                        let p2 = [
                            grid_pos(x + o2[0]),
                            grid_pos(y + o2[1]),
                            grid_pos(z + o2[2]),
                        ];
                        let p = math::add(p1, math::scale(math::sub(p2, p1), t.clamp(0.0, 1.0)));
                        mesh.vertices.push(p);
                        (mesh.vertices.len() - 1) as u32
                    });
                    cell_edge_vertex[e] = idx;
                }

                let tri_row = &TRI_TABLE[cube_index];
                let mut k = 0;
                while tri_row[k] != -1 {
                    let a = cell_edge_vertex[tri_row[k] as usize];
                    let b = cell_edge_vertex[tri_row[k + 1] as usize];
                    let c = cell_edge_vertex[tri_row[k + 2] as usize];
                    if a != b && b != c && a != c {
                        mesh.triangles.push([a, b, c]);
                    }
                    k += 3;
                }
            }
        }
    }

    if mesh.triangles.is_empty() {
        return Err(Error::NoSurface);
    }
    // orient outward (positive enclosed volume)
    if mesh.signed_volume() < 0.0 {
        for tri in &mut mesh.triangles {
            tri.swap(1, 2);
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::AnalyticScene;
    use approx::assert_relative_eq;

    fn sphere_field(r: f64) -> impl FnMut(&[Vec3]) -> Vec<f64> {
        move |pts: &[Vec3]| pts.iter().map(|p| math::norm(*p) - r).collect()
    }

    #[test]
    fn sphere_vertices_sit_on_the_sphere() {
        let mesh = marching_cubes(&mut sphere_field(0.5), 64).unwrap();
        assert!(mesh.n_vertices() > 1000);
        for v in &mesh.vertices {
            let r = math::norm(*v);
            assert!((r - 0.5).abs() < 0.005, "vertex radius {r}");
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_with_correct_volume_and_area() {
        let mesh = marching_cubes(&mut sphere_field(0.5), 48).unwrap();
        mesh.check_watertight().unwrap();
        assert_eq!(mesh.connected_components(), 1);
        let vol = mesh.signed_volume();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 0.5f64.powi(3);
        assert_relative_eq!(vol, expect, max_relative = 0.01);
        let area = mesh.surface_area();
        assert_relative_eq!(area, 4.0 * std::f64::consts::PI * 0.25, max_relative = 0.01);
    }

    #[test]
    fn two_separate_blobs_give_two_components() {
        let scene = AnalyticScene::preset("twoblobs").unwrap();
        let mut f = |pts: &[Vec3]| pts.iter().map(|p| scene.sdf(*p)).collect::<Vec<_>>();
        let mesh = marching_cubes(&mut f, 48).unwrap();
        mesh.check_watertight().unwrap();
        assert_eq!(mesh.connected_components(), 2);
    }

    #[test]
    fn empty_level_set_is_an_error() {
        let mut f = |pts: &[Vec3]| pts.iter().map(|_| 1.0).collect::<Vec<_>>();
        match marching_cubes(&mut f, 16) {
            Err(Error::NoSurface) => {}
            other => panic!("expected NoSurface, got {other:?}"),
        }
    }

    #[test]
    fn surface_samples_lie_on_the_surface_and_are_seeded() {
        let mesh = marching_cubes(&mut sphere_field(0.5), 32).unwrap();
        let a = mesh.sample_surface(500, 9);
        let b = mesh.sample_surface(500, 9);
        assert_eq!(a, b);
        for p in &a {
            assert!((math::norm(*p) - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let m1 = marching_cubes(&mut sphere_field(0.4), 24).unwrap();
        let m2 = marching_cubes(&mut sphere_field(0.4), 24).unwrap();
        assert_eq!(m1.vertices, m2.vertices);
        assert_eq!(m1.triangles, m2.triangles);
    }
}
