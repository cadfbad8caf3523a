//! Differentiable volume rendering along camera rays.
//!
//! A batch of rays is rendered on one tape: per-view rigid pose corrections
//! rotate/translate ray origins and directions, sample positions are built
//! from constant depths (stratified coarse bins plus importance draws from a
//! detached coarse pass), and color/normal/mask/conflict/depth are
//! composited with weights `w_k = α_k · Π_{j<k}(1 − α_j)`. Everything is
//! differentiable with respect to field and pose parameters.
//!
//! The near/far range comes from intersecting the *unrefined* ray with the
//! scene bounding sphere, so sample depths are genuinely constant with
//! respect to pose parameters and gradients stay exact.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::camera::{ray_sphere_range, Ray};
use crate::field::SceneField;
use crate::math::{self, Vec3};
use crate::params::{GroupId, Init, ParamBuilder, ParameterSet};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Learnable per-view rigid correction: axis-angle rotation and translation,
/// shared by every ray of the view. Zero-initialized (identity).
#[derive(Debug, Clone)]
pub struct PoseRefinement {
    pub n_views: usize,
    rot: GroupId,
    trans: GroupId,
}

impl PoseRefinement {
    pub fn register(n_views: usize, b: &mut ParamBuilder) -> PoseRefinement {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rot = b.add("pose.rot", &[n_views, 3], Init::Zeros, 1.0, &mut rng);
        let trans = b.add("pose.trans", &[n_views, 3], Init::Zeros, 1.0, &mut rng);
        PoseRefinement {
            n_views,
            rot,
            trans,
        }
    }

    pub fn rotation_vector(&self, ps: &ParameterSet, view: usize) -> Vec3 {
        let r = ps.slice(self.rot);
        [r[view * 3], r[view * 3 + 1], r[view * 3 + 2]]
    }

    pub fn translation(&self, ps: &ParameterSet, view: usize) -> Vec3 {
        let t = ps.slice(self.trans);
        [t[view * 3], t[view * 3 + 1], t[view * 3 + 2]]
    }

    /// Rotation magnitude per view in degrees (for reports).
    pub fn rotation_degrees(&self, ps: &ParameterSet) -> Vec<f64> {
        (0..self.n_views)
            .map(|v| math::norm(self.rotation_vector(ps, v)).to_degrees())
            .collect()
    }

    /// Apply the correction to a single ray (value-level path).
    pub fn apply(&self, ps: &ParameterSet, ray: &Ray) -> Ray {
        let r = math::axis_angle_to_matrix(self.rotation_vector(ps, ray.view_index));
        let t = self.translation(ps, ray.view_index);
        let origin = math::add(math::matvec(&r, ray.origin), t);
        let direction = math::normalize(math::matvec(&r, ray.direction));
        Ray {
            origin,
            direction,
            ..*ray
        }
    }

    /// Stacked per-view rotation matrices `(m, 3, 3)` on the tape, built via
    /// Rodrigues coefficients that are differentiable at zero angle.
    pub fn rotations_var(&self, t: &mut Tape) -> Var {
        // skew(v) flattened row-major as a linear map of v
        #[rustfmt::skip]
        let skew_map: Vec<f64> = vec![
             0.0,  0.0,  0.0,
             0.0,  0.0, -1.0,
             0.0,  1.0,  0.0,
             0.0,  0.0,  1.0,
             0.0,  0.0,  0.0,
            -1.0,  0.0,  0.0,
             0.0, -1.0,  0.0,
             1.0,  0.0,  0.0,
             0.0,  0.0,  0.0,
        ];
        let m = self.n_views;
        let rot = t.param(self.rot);
        let skew = t.constant(ArrayD::from_shape_vec(IxDyn(&[9, 3]), skew_map).unwrap());
        let skew_t = t.swap_axes(skew, 0, 1);
        let eye = t.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[3, 3]),
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
        );
        let mut per_view = Vec::with_capacity(m);
        for v in 0..m {
            let dr = t.slice_axis(rot, 0, v, v + 1); // (1,3)
            let dr2 = t.square(dr);
            let u = t.sum_axis(dr2, 1); // (1,1)
            let a = t.rot_coef_a(u);
            let b = t.rot_coef_b(u);
            let kflat = t.matmul(dr, skew_t); // (1,9)
            let k = t.reshape(kflat, &[3, 3]);
            let k2 = t.matmul(k, k);
            let ak = t.mul(a, k);
            let bk2 = t.mul(b, k2);
            let s = t.add(ak, bk2);
            let r = t.add(eye, s);
            per_view.push(t.reshape(r, &[1, 3, 3]));
        }
        t.concat(&per_view, 0)
    }

    pub fn trans_var(&self, t: &mut Tape) -> Var {
        t.param(self.trans)
    }
}

/// Value-level form of the per-ray refinement operation.
pub fn apply_pose_refinement(ray: &Ray, refinement: &PoseRefinement, ps: &ParameterSet) -> Ray {
    refinement.apply(ps, ray)
}

/// Depths of `n` samples in `[near, far)`: one per equal bin, at the bin
/// midpoint, or jittered uniformly within the bin when `stratified`.
pub fn sample_points(
    near: f64,
    far: f64,
    n: usize,
    stratified: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    if !(near > 0.0 && near < far) {
        return Err(Error::Contract(format!(
            "sample_points needs 0 < near < far, got [{near}, {far}]"
        )));
    }
    if n < 2 {
        return Err(Error::Contract("sample_points needs n >= 2".into()));
    }
    let dt = (far - near) / n as f64;
    let mut depths = Vec::with_capacity(n);
    let mut intervals = Vec::with_capacity(n);
    for k in 0..n {
        let lo = near + k as f64 * dt;
        let u = if stratified { rng.gen::<f64>() } else { 0.5 };
        depths.push(lo + u * dt);
        intervals.push((lo, lo + dt));
    }
    Ok((depths, intervals))
}

/// Unbiased SDF-to-opacity conversion (logistic CDF ratio), clamped at 0.
pub fn sdf_to_alpha(s_k: f64, s_k1: f64, inv_std: f64) -> f64 {
    assert!(inv_std > 0.0, "inv_std must be positive");
    let phi = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let pk = phi(inv_std * s_k);
    let pk1 = phi(inv_std * s_k1);
    ((pk - pk1) / pk).max(0.0)
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    pub stratified: bool,
    /// Bounding sphere radius for near/far; √3 circumscribes the cube.
    pub bound_radius: f64,
    /// When disabled the conflict head is not evaluated and H_p ≡ 0.
    pub conflict_enabled: bool,
    /// Samples whose compositing weight falls below this threshold skip the
    /// normal/color/conflict evaluation (they still shape alpha and mask).
    /// Zero keeps every sample and reproduces the textbook compositing sums
    /// exactly; training configs raise it to spend network evaluations only
    /// where weight lives.
    pub attr_weight_min: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 64,
            n_importance: 32,
            stratified: true,
            bound_radius: 3f64.sqrt(),
            conflict_enabled: true,
            attr_weight_min: 0.0,
        }
    }
}

/// Per-pixel render products (value level).
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub normal: [f64; 3],
    pub mask: f64,
    pub conflict: f64,
    pub depth: f64,
}

/// Per-batch render products on the tape, aligned with the input ray order.
pub struct RenderVars {
    pub color: Var,
    pub normal: Var,
    pub mask: Var,
    pub conflict: Var,
    pub depth: Var,
    /// Detached highest-weight sample position per contributing ray (used
    /// for near-surface regularizer sampling).
    pub surface_points: Vec<[f64; 3]>,
}

/// Importance-sample `n` new depths from a piecewise-constant weight
/// distribution over the intervals between `ts`.
fn importance_sample(
    ts: &[f64],
    weights: &[f64],
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    let k = weights.len();
    debug_assert_eq!(ts.len(), k + 1);
    let floor = 0.01 / k as f64;
    let mut cdf = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for &w in weights {
        acc += w.max(0.0) + floor;
        cdf.push(acc);
    }
    let total = acc;
    let mut jitter: Box<dyn FnMut() -> f64> = match rng {
        Some(r) => Box::new(move || r.gen::<f64>()),
        None => Box::new(|| 0.5),
    };
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let u = (j as f64 + jitter()) / n as f64 * total;
        let mut lo = 0usize;
        let mut hi = k;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let seg = (cdf[lo + 1] - cdf[lo]).max(1e-300);
        let frac = ((u - cdf[lo]) / seg).clamp(0.0, 1.0);
        out.push(ts[lo] + frac * (ts[lo + 1] - ts[lo]));
    }
    out
}

/// Render a batch of rays. Outputs follow the input ray order; rays that
/// miss the bounding sphere composite pure background (white, zero mask).
pub fn render_batch(
    t: &mut Tape,
    field: &SceneField,
    refinement: Option<&PoseRefinement>,
    rays: &[Ray],
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RenderVars> {
    let n_total = rays.len();
    if n_total == 0 {
        return Err(Error::Contract("render_batch needs at least one ray".into()));
    }
    if let Some(r) = refinement {
        for ray in rays {
            if ray.view_index >= r.n_views {
                return Err(Error::Dataset(format!(
                    "ray view index {} exceeds refinement views {}",
                    ray.view_index, r.n_views
                )));
            }
        }
    }

    // partition into rays that intersect the bounding sphere and rays that miss
    let mut hit_idx = Vec::new();
    let mut miss_idx = Vec::new();
    let mut ranges = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        match ray_sphere_range(ray.origin, ray.direction, cfg.bound_radius) {
            Some(r) => {
                hit_idx.push(i);
                ranges.push(r);
            }
            None => miss_idx.push(i),
        }
    }
    let nh = hit_idx.len();
    let nm = miss_idx.len();

    let (hit_vars, surface_points) = if nh > 0 {
        let hit_rays: Vec<Ray> = hit_idx.iter().map(|&i| rays[i]).collect();
        render_hit_rays(t, field, refinement, &hit_rays, &ranges, cfg, rng.as_deref_mut())?
    } else {
        (None, Vec::new())
    };

    if nm == 0 {
        let (color, normal, mask, conflict, depth) = hit_vars.expect("all rays hit");
        return Ok(RenderVars {
            color,
            normal,
            mask,
            conflict,
            depth,
            surface_points,
        });
    }

    // reassemble in input order with background constants for missed rays
    let mut perm = vec![0i64; n_total];
    for (pos, &i) in hit_idx.iter().enumerate() {
        perm[i] = pos as i64;
    }
    for (pos, &i) in miss_idx.iter().enumerate() {
        perm[i] = (nh + pos) as i64;
    }
    let perm = Arc::new(perm);
    let assemble = |t: &mut Tape, hit: Option<Var>, width: usize, bg: f64| -> Var {
        let miss = t.constant(ArrayD::from_elem(IxDyn(&[nm, width]), bg));
        let parts = match hit {
            Some(h) => t.concat(&[h, miss], 0),
            None => miss,
        };
        t.gather_rows(parts, perm.clone())
    };

    let (c, n_, m, h, d) = match hit_vars {
        Some(v) => (Some(v.0), Some(v.1), Some(v.2), Some(v.3), Some(v.4)),
        None => (None, None, None, None, None),
    };
    Ok(RenderVars {
        color: assemble(t, c, 3, 1.0),
        normal: assemble(t, n_, 3, 0.0),
        mask: assemble(t, m, 1, 0.0),
        conflict: assemble(t, h, 1, 0.0),
        depth: assemble(t, d, 1, 0.0),
        surface_points,
    })
}

type HitVars = (Var, Var, Var, Var, Var);

fn render_hit_rays(
    t: &mut Tape,
    field: &SceneField,
    refinement: Option<&PoseRefinement>,
    rays: &[Ray],
    ranges: &[(f64, f64)],
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Option<HitVars>, Vec<[f64; 3]>)> {
    let n = rays.len();
    let origins = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |ix| rays[ix[0]].origin[ix[1]]);
    let dirs = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |ix| rays[ix[0]].direction[ix[1]]);
    let o0 = t.constant(origins);
    let d0 = t.constant(dirs);

    // refined ray origins/directions (absent refinement = raw rays)
    let (o, d) = match refinement {
        Some(r) => {
            let rots = r.rotations_var(t); // (m,3,3)
            let trans = r.trans_var(t); // (m,3)
            let views: Arc<Vec<i64>> = Arc::new(rays.iter().map(|r| r.view_index as i64).collect());
            let rg = t.gather_rows(rots, views.clone()); // (n,3,3)
            let tg = t.gather_rows(trans, views); // (n,3)
            let o3 = t.reshape(o0, &[n, 3, 1]);
            let d3 = t.reshape(d0, &[n, 3, 1]);
            let ro = t.bmm(rg, o3);
            let rd = t.bmm(rg, d3);
            let ro = t.reshape(ro, &[n, 3]);
            let rd = t.reshape(rd, &[n, 3]);
            let o = t.add(ro, tg);
            let dn = t.norm_axis(rd, 1);
            let d = t.div(rd, dn);
            (o, d)
        }
        None => (o0, d0),
    };

    // coarse depths (constants with respect to all parameters)
    let kc = cfg.n_coarse;
    let mut ts: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &(near, far) in ranges {
        let dt = (far - near) / kc as f64;
        let mut row = Vec::with_capacity(kc);
        for k in 0..kc {
            let u = match rng.as_deref_mut() {
                Some(r) if cfg.stratified => r.gen::<f64>(),
                _ => 0.5,
            };
            row.push(near + (k as f64 + u) * dt);
        }
        ts.push(row);
    }

    // importance pass: detached coarse SDF -> weights -> extra depths
    if cfg.n_importance > 0 {
        let ov = t.value(o).clone();
        let dv = t.value(d).clone();
        let inv_std = field.inv_std_value(t.params());
        let mut coarse_x = Vec::with_capacity(n * kc * 3);
        for i in 0..n {
            for &tk in &ts[i] {
                for a in 0..3 {
                    coarse_x.push(ov[[i, a]] + tk * dv[[i, a]]);
                }
            }
        }
        let s_coarse = {
            let mut probe = Tape::new(t.params());
            let xv = probe.constant(ArrayD::from_shape_vec(IxDyn(&[n * kc, 3]), coarse_x).unwrap());
            let out = field.sdf_batch(&mut probe, xv, false);
            probe.value(out.sdf).clone()
        };
        for i in 0..n {
            let s_row: Vec<f64> = (0..kc).map(|k| s_coarse[[i * kc + k, 0]]).collect();
            let w: Vec<f64> = {
                let mut trans = 1.0;
                let mut out = Vec::with_capacity(kc - 1);
                for k in 0..kc - 1 {
                    let a = sdf_to_alpha(s_row[k], s_row[k + 1], inv_std);
                    out.push(a * trans);
                    trans *= 1.0 - a;
                }
                out
            };
            let extra = importance_sample(&ts[i], &w, cfg.n_importance, rng.as_deref_mut());
            ts[i].extend(extra);
            ts[i].sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
    }

    let k = ts[0].len();
    debug_assert!(ts.iter().all(|row| row.len() == k));

    // sample positions x = o + t·d  →  (n·k, 3)
    let ts_flat: Vec<f64> = ts.iter().flatten().copied().collect();
    let ts_c = t.constant(ArrayD::from_shape_vec(IxDyn(&[n, k, 1]), ts_flat).unwrap());
    let o3 = t.reshape(o, &[n, 1, 3]);
    let d3 = t.reshape(d, &[n, 1, 3]);
    let td = t.mul(ts_c, d3);
    let x3 = t.add(o3, td);
    let x = t.reshape(x3, &[n * k, 3]);

    // opacity pass: SDF only, every sample
    let sdf_out = field.sdf_batch(t, x, false);

    // alphas from consecutive sample SDF pairs
    let s2 = t.reshape(sdf_out.sdf, &[n, k]);
    let s_k = t.slice_axis(s2, 1, 0, k - 1);
    let s_k1 = t.slice_axis(s2, 1, 1, k);
    let inv_std = field.inv_std(t); // (1,1)
    let zk = t.mul(s_k, inv_std);
    let zk1 = t.mul(s_k1, inv_std);
    let phi_k = t.sigmoid(zk);
    let phi_k1 = t.sigmoid(zk1);
    let dphi = t.sub(phi_k, phi_k1);
    let ratio = t.div(dphi, phi_k);
    let alpha = t.relu(ratio); // (n, k-1)

    // transmittance and weights
    let neg_alpha = t.neg(alpha);
    let one_minus = t.add_scalar(neg_alpha, 1.0);
    let trans = t.exclusive_cumprod(one_minus);
    let w = t.mul(alpha, trans); // (n, k-1)
    let w3 = t.reshape(w, &[n, k - 1, 1]);

    // attribute pass only where weight lives: rows of x (excluding each
    // ray's last sample, which never carries weight) above the threshold
    let wv0 = t.value(w).clone();
    let kept: Vec<i64> = (0..n)
        .flat_map(|i| (0..k - 1).map(move |j| (i, j)))
        .filter(|&(i, j)| wv0[[i, j]] > cfg.attr_weight_min)
        .map(|(i, j)| (i * k + j) as i64)
        .collect();
    let n_kept = kept.len();

    let (c_fg, n_raw, conflict) = if n_kept > 0 {
        let kept_rc = Arc::new(kept.clone());
        let x_kept = t.gather_rows(x, kept_rc);
        let attr = field.sdf_batch(t, x_kept, true);
        let grad = attr.grad.expect("gradient requested");
        let dir_idx: Arc<Vec<i64>> = Arc::new(kept.iter().map(|&r| r / k as i64).collect());
        let d_ps = t.gather_rows(d, dir_idx);
        let gnorm = t.norm_axis(grad, 1);
        let gnorm = t.max_scalar(gnorm, 1e-12);
        let normal_ps = t.div(grad, gnorm);
        let color_ps = field.color_batch(t, attr.feat, x_kept, d_ps, normal_ps);
        let conflict_ps = if cfg.conflict_enabled {
            let views: Vec<usize> = kept
                .iter()
                .map(|&r| rays[r as usize / k].view_index)
                .collect();
            Some(field.conflict_batch(t, color_ps, attr.feat, d_ps, &views, x_kept)?)
        } else {
            None
        };

        // scatter the sparse attribute rows back onto the (ray, sample)
        // lattice, weight them, and sum over samples
        let scatter_idx: Arc<Vec<i64>> = Arc::new(
            kept.iter()
                .map(|&r| {
                    let i = r as usize / k;
                    let j = r as usize % k;
                    (i * (k - 1) + j) as i64
                })
                .collect(),
        );
        let composite = |t: &mut Tape, attr: Var, width: usize| -> Var {
            let dense = t.scatter_rows(attr, scatter_idx.clone(), n * (k - 1));
            let a3 = t.reshape(dense, &[n, k - 1, width]);
            let prod = t.mul(w3, a3);
            let s = t.sum_axis(prod, 1);
            t.reshape(s, &[n, width])
        };
        let c_fg = composite(t, color_ps, 3);
        let n_raw = composite(t, normal_ps, 3);
        let conflict = match conflict_ps {
            Some(h) => composite(t, h, 1),
            None => t.constant(ArrayD::zeros(IxDyn(&[n, 1]))),
        };
        (c_fg, n_raw, conflict)
    } else {
        (
            t.constant(ArrayD::zeros(IxDyn(&[n, 3]))),
            t.constant(ArrayD::zeros(IxDyn(&[n, 3]))),
            t.constant(ArrayD::zeros(IxDyn(&[n, 1]))),
        )
    };

    let mask = {
        let s = t.sum_axis(w, 1);
        t.reshape(s, &[n, 1])
    };

    // white background for color, zero elsewhere
    let neg_mask = t.neg(mask);
    let bg = t.add_scalar(neg_mask, 1.0);
    let color = t.add(c_fg, bg);

    // normalized composite normal (zero where the mask is empty)
    let nn = t.norm_axis(n_raw, 1);
    let nn = t.max_scalar(nn, 1e-12);
    let normal = t.div(n_raw, nn);

    // expected depth over the ray weights
    let tk_rep: Vec<f64> = ts
        .iter()
        .flat_map(|row| row[..k - 1].iter().copied())
        .collect();
    let tk_c = t.constant(ArrayD::from_shape_vec(IxDyn(&[n, k - 1]), tk_rep).unwrap());
    let wt = t.mul(w, tk_c);
    let num = t.sum_axis(wt, 1);
    let denom = t.max_scalar(mask, 1e-10);
    let depth = t.div(num, denom);

    // detached surface anchors: the highest-weight sample per ray
    let wv = t.value(w).clone();
    let xv = t.value(x).clone();
    let mut surface_points = Vec::new();
    for i in 0..n {
        let mut best = 0usize;
        let mut best_w = -1.0;
        for j in 0..k - 1 {
            if wv[[i, j]] > best_w {
                best_w = wv[[i, j]];
                best = j;
            }
        }
        if best_w > 1e-4 {
            let row = i * k + best;
            surface_points.push([xv[[row, 0]], xv[[row, 1]], xv[[row, 2]]]);
        }
    }

    Ok((Some((color, normal, mask, conflict, depth)), surface_points))
}

/// Render one pixel at value level (throwaway tape).
pub fn render_pixel(
    field: &SceneField,
    ps: &ParameterSet,
    ray: &Ray,
    refinement: Option<&PoseRefinement>,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let mut t = Tape::new(ps);
    let vars = render_batch(&mut t, field, refinement, std::slice::from_ref(ray), cfg, None)?;
    let c = t.value(vars.color);
    let n = t.value(vars.normal);
    Ok(RenderOutput {
        color: [c[[0, 0]], c[[0, 1]], c[[0, 2]]],
        normal: [n[[0, 0]], n[[0, 1]], n[[0, 2]]],
        mask: t.value(vars.mask)[[0, 0]],
        conflict: t.value(vars.conflict)[[0, 0]],
        depth: t.value(vars.depth)[[0, 0]],
    })
}
