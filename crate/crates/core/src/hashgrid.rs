//! Multiresolution hash-grid positional encoding over the cube [-1,1]³.
//!
//! Geometrically growing per-level grids, dense-indexed while the lattice
//! fits the table and hashed above that. Interpolation uses quintic-eased
//! corner weights, which makes the encoding C² in the position: the analytic
//! spatial Jacobian is continuous across cell faces and survives central
//! finite-difference checks, which plain trilinear weights do not.
//!
//! The tape op evaluates, per point, the encoding E and (optionally) its
//! Jacobian wrt position, laid out as `[E | Jx | Jy | Jz]` blocks of width
//! `levels × features` each. The backward pass scatters into the hash tables
//! and, for the Jacobian blocks, applies the interpolation Hessian so that
//! losses built on ∇s backpropagate exactly.

use ndarray::{ArrayD, IxDyn};

use crate::params::{GroupId, ParameterSet};
use crate::Error;

const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_res: usize,
    pub max_res: usize,
    pub features_per_level: usize,
    pub table_size_log2: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            base_res: 16,
            max_res: 2048,
            features_per_level: 2,
            table_size_log2: 19,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash grid needs >=1 level and feature".into()));
        }
        if self.base_res < 2 || self.max_res < self.base_res {
            return Err(Error::Config(
                "hash grid resolutions must satisfy 2 <= base <= max".into(),
            ));
        }
        let res = self.level_resolutions();
        if self.levels > 1 && res.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "hash grid level resolutions must grow strictly".into(),
            ));
        }
        Ok(())
    }

    /// Per-level cell counts, growing geometrically from base to max.
    pub fn level_resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.base_res];
        }
        let b = ((self.max_res as f64).ln() - (self.base_res as f64).ln())
            / (self.levels as f64 - 1.0);
        (0..self.levels)
            .map(|l| ((self.base_res as f64) * (b * l as f64).exp()).round() as usize)
            .collect()
    }

    fn level_table_len(&self, res: usize) -> usize {
        let dense = (res + 1) * (res + 1) * (res + 1);
        dense.min(1usize << self.table_size_log2)
    }

    /// Total scalar count of all level tables.
    pub fn table_param_len(&self) -> usize {
        self.level_resolutions()
            .iter()
            .map(|&r| self.level_table_len(r) * self.features_per_level)
            .sum()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

#[derive(Debug, Clone)]
struct LevelSpec {
    res: usize,
    table_len: usize,
    /// Offset in features (scalars) from the start of the group.
    offset: usize,
    hashed: bool,
}

#[derive(Debug)]
pub struct HashGridCtx {
    pub group: GroupId,
    pub features: usize,
    pub with_jacobian: bool,
    levels: Vec<LevelSpec>,
    out_dim: usize,
}

impl HashGridCtx {
    pub fn new(cfg: &HashGridConfig, group: GroupId, with_jacobian: bool) -> Self {
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut offset = 0;
        for res in cfg.level_resolutions() {
            let table_len = cfg.level_table_len(res);
            let dense = (res + 1) * (res + 1) * (res + 1);
            levels.push(LevelSpec {
                res,
                table_len,
                offset,
                hashed: dense > table_len,
            });
            offset += table_len * cfg.features_per_level;
        }
        HashGridCtx {
            group,
            features: cfg.features_per_level,
            with_jacobian,
            levels,
            out_dim: cfg.output_dim(),
        }
    }

    pub fn out_cols(&self) -> usize {
        if self.with_jacobian {
            4 * self.out_dim
        } else {
            self.out_dim
        }
    }
}

#[inline]
fn corner_index(spec: &LevelSpec, ix: usize, iy: usize, iz: usize) -> usize {
    if spec.hashed {
        let h = (ix as u64).wrapping_mul(HASH_PRIMES[0])
            ^ (iy as u64).wrapping_mul(HASH_PRIMES[1])
            ^ (iz as u64).wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (spec.table_len - 1)
    } else {
        (iz * (spec.res + 1) + iy) * (spec.res + 1) + ix
    }
}

/// Quintic ease, first and second derivatives.
#[inline]
fn ease(t: f64) -> (f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        t3 * (10.0 - 15.0 * t + 6.0 * t2),
        30.0 * t2 * (1.0 - t) * (1.0 - t),
        60.0 * t - 180.0 * t2 + 120.0 * t3,
    )
}

struct PointLevel {
    cell: [usize; 3],
    /// eased weight factor per axis for corner bit 1, i.e. e(t)
    e: [f64; 3],
    de: [f64; 3],
    dde: [f64; 3],
    /// du/dx per axis (0 where the position was clamped)
    scale: [f64; 3],
}

fn locate(x: &[f64], res: usize) -> PointLevel {
    let mut cell = [0usize; 3];
    let mut e = [0.0; 3];
    let mut de = [0.0; 3];
    let mut dde = [0.0; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        let inside = x[a].abs() <= 1.0;
        let xc = x[a].clamp(-1.0, 1.0);
        let u = (xc + 1.0) * 0.5 * res as f64;
        let mut i = u.floor();
        if i as usize >= res {
            i = (res - 1) as f64;
        }
        let t = u - i;
        let (et, det, ddet) = ease(t);
        cell[a] = i as usize;
        e[a] = et;
        de[a] = det;
        dde[a] = ddet;
        scale[a] = if inside { 0.5 * res as f64 } else { 0.0 };
    }
    PointLevel {
        cell,
        e,
        de,
        dde,
        scale,
    }
}

pub fn forward(ctx: &HashGridCtx, x: &ArrayD<f64>, params: &ParameterSet) -> ArrayD<f64> {
    let n = x.shape()[0];
    assert_eq!(x.shape()[1], 3, "hash grid expects (N, 3) positions");
    let xs = x.as_slice().expect("positions layout");
    let table = params.slice(ctx.group);
    let f = ctx.features;
    let ld = ctx.out_dim;
    let cols = ctx.out_cols();
    let mut out = vec![0.0f64; n * cols];

    for p in 0..n {
        let xp = &xs[p * 3..p * 3 + 3];
        let row = &mut out[p * cols..(p + 1) * cols];
        for (l, spec) in ctx.levels.iter().enumerate() {
            let loc = locate(xp, spec.res);
            // branch-free per-axis factors indexed by the corner bit
            let fax = [
                [1.0 - loc.e[0], loc.e[0]],
                [1.0 - loc.e[1], loc.e[1]],
                [1.0 - loc.e[2], loc.e[2]],
            ];
            let dfx = [
                [-loc.de[0] * loc.scale[0], loc.de[0] * loc.scale[0]],
                [-loc.de[1] * loc.scale[1], loc.de[1] * loc.scale[1]],
                [-loc.de[2] * loc.scale[2], loc.de[2] * loc.scale[2]],
            ];
            for c in 0..8usize {
                let bx = c & 1;
                let by = (c >> 1) & 1;
                let bz = (c >> 2) & 1;
                let (fx, fy, fz) = (fax[0][bx], fax[1][by], fax[2][bz]);
                let w = fx * fy * fz;
                let idx = corner_index(
                    spec,
                    loc.cell[0] + bx,
                    loc.cell[1] + by,
                    loc.cell[2] + bz,
                );
                let base = spec.offset + idx * f;
                let col0 = l * f;
                if ctx.with_jacobian {
                    let wx = dfx[0][bx] * fy * fz;
                    let wy = fx * dfx[1][by] * fz;
                    let wz = fx * fy * dfx[2][bz];
                    for k in 0..f {
                        let t = table[base + k];
                        let col = col0 + k;
                        row[col] += w * t;
                        row[ld + col] += wx * t;
                        row[2 * ld + col] += wy * t;
                        row[3 * ld + col] += wz * t;
                    }
                } else {
                    for k in 0..f {
                        row[col0 + k] += w * table[base + k];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, cols]), out).unwrap()
}

/// Accumulates cotangents into the hash tables and into the position
/// gradient. `g` has the forward output layout; `gx` is (N, 3).
pub fn backward(
    ctx: &HashGridCtx,
    x: &ArrayD<f64>,
    g: &ArrayD<f64>,
    params: &ParameterSet,
    param_grads: &mut [f64],
    gx: &mut ArrayD<f64>,
) {
    let n = x.shape()[0];
    let xs = x.as_slice().expect("positions layout");
    let gs = g.as_slice().expect("cotangent layout");
    let table = params.slice(ctx.group);
    let group_offset = params.group(ctx.group).offset;
    let f = ctx.features;
    let ld = ctx.out_dim;
    let cols = ctx.out_cols();
    let gxs = gx.as_slice_mut().expect("gx layout");

    for p in 0..n {
        let xp = &xs[p * 3..p * 3 + 3];
        let grow = &gs[p * cols..(p + 1) * cols];
        let gxp_base = p * 3;
        for (l, spec) in ctx.levels.iter().enumerate() {
            let loc = locate(xp, spec.res);
            let s = loc.scale;
            for c in 0..8usize {
                let b = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let mut fax = [0.0; 3];
                let mut dfax = [0.0; 3];
                let mut ddfax = [0.0; 3];
                for a in 0..3 {
                    if b[a] == 1 {
                        fax[a] = loc.e[a];
                        dfax[a] = loc.de[a];
                        ddfax[a] = loc.dde[a];
                    } else {
                        fax[a] = 1.0 - loc.e[a];
                        dfax[a] = -loc.de[a];
                        ddfax[a] = -loc.dde[a];
                    }
                }
                let w = fax[0] * fax[1] * fax[2];
                // dw/dt_a and d²w/dt_a dt_b
                let dw = [
                    dfax[0] * fax[1] * fax[2],
                    fax[0] * dfax[1] * fax[2],
                    fax[0] * fax[1] * dfax[2],
                ];
                let idx = corner_index(
                    spec,
                    loc.cell[0] + b[0],
                    loc.cell[1] + b[1],
                    loc.cell[2] + b[2],
                );
                let tbase = spec.offset + idx * f;
                for k in 0..f {
                    let col = l * f + k;
                    let ge = grow[col];
                    let tval = table[tbase + k];
                    // table gradient: encoding path
                    let mut gt = ge * w;
                    if ctx.with_jacobian {
                        let gj = [grow[ld + col], grow[2 * ld + col], grow[3 * ld + col]];
                        // table gradient: jacobian path
                        gt += gj[0] * s[0] * dw[0] + gj[1] * s[1] * dw[1] + gj[2] * s[2] * dw[2];
                        // position gradient: second-order (Hessian of w) path
                        for bx_axis in 0..3 {
                            let mut acc = 0.0;
                            for a in 0..3 {
                                let d2 = if a == bx_axis {
                                    ddfax[a] * fax[(a + 1) % 3] * fax[(a + 2) % 3]
                                } else {
                                    let other = 3 - a - bx_axis;
                                    dfax[a] * dfax[bx_axis] * fax[other]
                                };
                                acc += gj[a] * s[a] * d2;
                            }
                            gxs[gxp_base + bx_axis] += acc * s[bx_axis] * tval;
                        }
                    }
                    param_grads[group_offset + tbase + k] += gt;
                    // position gradient: encoding path (value of the jacobian)
                    for a in 0..3 {
                        gxs[gxp_base + a] += ge * s[a] * dw[a] * tval;
                    }
                }
            }
        }
    }
}
