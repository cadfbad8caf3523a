//! PLY mesh IO: binary little-endian with per-vertex colors on write,
//! binary + ascii accepted on read.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use viewfuse_core::mesh::TriMesh;

use crate::report::atomic_write;

pub fn save_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    let n_v = mesh.n_vertices();
    let n_f = mesh.n_triangles();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {n_v}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {n_f}\nproperty list uchar int vertex_indices\nend_header\n"
    )?;
    let white = [1.0, 1.0, 1.0];
    for (i, v) in mesh.vertices.iter().enumerate() {
        for a in 0..3 {
            out.extend_from_slice(&(v[a] as f32).to_le_bytes());
        }
        let c = mesh
            .colors
            .as_ref()
            .map(|cs| cs[i])
            .unwrap_or(white);
        for ch in 0..3 {
            out.push((c[ch].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    for tri in &mesh.triangles {
        out.push(3u8);
        for &i in tri {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

struct PlyProperty {
    name: String,
    /// Byte width of the scalar; 0 marks the face list property.
    width: usize,
    is_float: bool,
}

pub fn load_ply(path: &Path) -> Result<TriMesh> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end]).context("ply header not utf-8")?;

    let mut format = None;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<PlyProperty> = Vec::new();
    let mut in_vertex = false;

    for line in header.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | ["comment", ..] | ["end_header"] => {}
            ["format", f, "1.0"] => format = Some(f.to_string()),
            ["element", "vertex", n] => {
                n_vertices = n.parse()?;
                in_vertex = true;
            }
            ["element", "face", n] => {
                n_faces = n.parse()?;
                in_vertex = false;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {}
            ["property", ty, name] if in_vertex => {
                let (width, is_float) = match *ty {
                    "float" | "float32" => (4, true),
                    "double" | "float64" => (8, true),
                    "uchar" | "uint8" | "char" | "int8" => (1, false),
                    "short" | "ushort" | "int16" | "uint16" => (2, false),
                    "int" | "uint" | "int32" | "uint32" => (4, false),
                    other => bail!("unsupported vertex property type {other}"),
                };
                vertex_props.push(PlyProperty {
                    name: name.to_string(),
                    width,
                    is_float,
                });
            }
            _ => {}
        }
    }
    let format = format.context("ply file missing format line")?;

    let mut mesh = TriMesh::default();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut has_color = false;

    match format.as_str() {
        "binary_little_endian" => {
            let mut cursor = header_end;
            let stride: usize = vertex_props.iter().map(|p| p.width).sum();
            for _ in 0..n_vertices {
                let mut pos = [0.0f64; 3];
                let mut col = [1.0f64; 3];
                let mut off = cursor;
                for p in &vertex_props {
                    let raw = &bytes[off..off + p.width];
                    let value = if p.is_float {
                        match p.width {
                            4 => f32::from_le_bytes(raw.try_into()?) as f64,
                            _ => f64::from_le_bytes(raw.try_into()?),
                        }
                    } else {
                        match p.width {
                            1 => raw[0] as f64,
                            2 => u16::from_le_bytes(raw.try_into()?) as f64,
                            _ => i32::from_le_bytes(raw.try_into()?) as f64,
                        }
                    };
                    match p.name.as_str() {
                        "x" => pos[0] = value,
                        "y" => pos[1] = value,
                        "z" => pos[2] = value,
                        "red" => {
                            col[0] = value / 255.0;
                            has_color = true;
                        }
                        "green" => col[1] = value / 255.0,
                        "blue" => col[2] = value / 255.0,
                        _ => {}
                    }
                    off += p.width;
                }
                cursor += stride;
                mesh.vertices.push(pos);
                colors.push(col);
            }
            for _ in 0..n_faces {
                let count = bytes[cursor] as usize;
                cursor += 1;
                if count != 3 {
                    bail!("only triangle faces are supported, found a {count}-gon");
                }
                let mut tri = [0u32; 3];
                for t in tri.iter_mut() {
                    *t = i32::from_le_bytes(bytes[cursor..cursor + 4].try_into()?) as u32;
                    cursor += 4;
                }
                mesh.triangles.push(tri);
            }
        }
        "ascii" => {
            let body = std::str::from_utf8(&bytes[header_end..])?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for _ in 0..n_vertices {
                let line = lines.next().context("truncated vertex list")?;
                let nums: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()?;
                let mut pos = [0.0; 3];
                let mut col = [1.0; 3];
                for (p, value) in vertex_props.iter().zip(nums) {
                    match p.name.as_str() {
                        "x" => pos[0] = value,
                        "y" => pos[1] = value,
                        "z" => pos[2] = value,
                        "red" => {
                            col[0] = value / 255.0;
                            has_color = true;
                        }
                        "green" => col[1] = value / 255.0,
                        "blue" => col[2] = value / 255.0,
                        _ => {}
                    }
                }
                mesh.vertices.push(pos);
                colors.push(col);
            }
            for _ in 0..n_faces {
                let line = lines.next().context("truncated face list")?;
                let nums: Vec<i64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()?;
                if nums.first() != Some(&3) {
                    bail!("only triangle faces are supported");
                }
                mesh.triangles
                    .push([nums[1] as u32, nums[2] as u32, nums[3] as u32]);
            }
        }
        other => bail!("unsupported ply format {other}"),
    }

    if has_color {
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .context("not a ply file (no end_header)")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_preserves_geometry_and_color() {
        let mesh = TriMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            colors: Some(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        };
        let dir = std::env::temp_dir().join("viewfuse_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tri.ply");
        save_ply(&path, &mesh).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.n_vertices(), 3);
        assert_eq!(back.triangles, mesh.triangles);
        let colors = back.colors.unwrap();
        assert_eq!(colors[0], [1.0, 0.0, 0.0]);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
    }
}
