//! The learnable implicit scene: hash-grid encoder, geometry (SDF) network,
//! color network, conflict network, per-view embeddings, and the learnable
//! opacity sharpness.
//!
//! The geometry network carries an explicit spatial Jacobian through the
//! graph (forward-mode columns propagated with tape ops), so `∇s` is an
//! ordinary differentiable value: losses on normals, Eikonal residuals and
//! gradient smoothness backpropagate into every parameter exactly.
//!
//! The SDF starts as a sphere: the network output is added to the analytic
//! bias `|x| − r`, with the output layer initialized near zero. Inside is
//! negative.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::hashgrid::{HashGridConfig, HashGridCtx};
use crate::params::{GroupId, Init, ParamBuilder, ParameterSet};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub hash: HashGridConfig,
    pub geom_hidden: usize,
    /// Width of the geometry feature vector fed to the color/conflict nets.
    pub geom_feat: usize,
    pub color_hidden: usize,
    pub conflict_hidden: usize,
    pub view_embed_dim: usize,
    pub n_views: usize,
    /// Softplus sharpness of the geometry net's hidden activations.
    pub geom_beta: f64,
    pub init_sphere_radius: f64,
    pub inv_std_init: f64,
    pub conflict_bias_init: f64,
    /// Stop gradients on the color/geometry features entering the conflict
    /// net (the production default). The finite-difference suites disable
    /// this so the checked objective is differentiable end to end.
    pub detach_conflict_inputs: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hash: HashGridConfig::default(),
            geom_hidden: 64,
            geom_feat: 15,
            color_hidden: 64,
            conflict_hidden: 64,
            view_embed_dim: 8,
            n_views: 16,
            geom_beta: 10.0,
            init_sphere_radius: 0.5,
            inv_std_init: 20.0,
            conflict_bias_init: -3.0,
            detach_conflict_inputs: true,
        }
    }
}

impl FieldConfig {
    /// Tiny configuration for the finite-difference gradient suites: coarse
    /// grids keep the encoding smooth at FD step sizes and the parameter
    /// count low enough to sweep exhaustively.
    pub fn miniature() -> Self {
        FieldConfig {
            hash: HashGridConfig {
                levels: 3,
                base_res: 4,
                max_res: 12,
                features_per_level: 2,
                table_size_log2: 10,
            },
            geom_hidden: 16,
            geom_feat: 7,
            color_hidden: 16,
            conflict_hidden: 16,
            view_embed_dim: 4,
            n_views: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        if self.n_views == 0 {
            return Err(Error::Config("field needs at least one view".into()));
        }
        if self.geom_feat == 0 || self.geom_hidden == 0 {
            return Err(Error::Config("geometry net dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct MlpGroups {
    w: Vec<GroupId>,
    b: Vec<GroupId>,
}

/// Group handles of one field inside a `ParameterSet`.
#[derive(Debug, Clone)]
pub struct SceneField {
    pub cfg: FieldConfig,
    hash: GroupId,
    geom: MlpGroups,
    color: MlpGroups,
    conflict: MlpGroups,
    view_embed: GroupId,
    log_inv_std: GroupId,
    ctx_plain: Arc<HashGridCtx>,
    ctx_jac: Arc<HashGridCtx>,
}

/// Batched SDF evaluation products on a tape.
pub struct SdfBatch {
    /// (N, 1) signed distances.
    pub sdf: Var,
    /// (N, feat) geometry features.
    pub feat: Var,
    /// (N, 3) spatial gradient of the SDF, present when requested.
    pub grad: Option<Var>,
}

fn register_mlp<R: Rng>(
    b: &mut ParamBuilder,
    prefix: &str,
    dims: &[usize],
    rng: &mut R,
) -> MlpGroups {
    let mut w = Vec::new();
    let mut bias = Vec::new();
    for i in 0..dims.len() - 1 {
        w.push(b.add(
            &format!("{prefix}.w{i}"),
            &[dims[i], dims[i + 1]],
            Init::Xavier {
                fan_in: dims[i],
                fan_out: dims[i + 1],
            },
            1.0,
            rng,
        ));
        bias.push(b.add(
            &format!("{prefix}.b{i}"),
            &[1, dims[i + 1]],
            Init::Zeros,
            1.0,
            rng,
        ));
    }
    MlpGroups { w, b: bias }
}

impl SceneField {
    /// Register all field parameter groups on a builder. Call
    /// [`SceneField::finalize_init`] on the built set to apply the head
    /// initialization conventions.
    pub fn register(cfg: FieldConfig, b: &mut ParamBuilder, rng: &mut ChaCha8Rng) -> SceneField {
        let hash = b.add(
            "field.hash",
            &[cfg.hash.table_param_len()],
            Init::Uniform(-1e-4, 1e-4),
            1.0,
            rng,
        );
        let enc_dim = cfg.hash.output_dim();
        let geom = register_mlp(
            b,
            "field.geom",
            &[enc_dim + 3, cfg.geom_hidden, cfg.geom_hidden, 1 + cfg.geom_feat],
            rng,
        );
        let color = register_mlp(
            b,
            "field.color",
            &[cfg.geom_feat + 9, cfg.color_hidden, cfg.color_hidden, 3],
            rng,
        );
        let conflict = register_mlp(
            b,
            "field.conflict",
            &[
                3 + cfg.geom_feat + 3 + cfg.view_embed_dim + 3,
                cfg.conflict_hidden,
                cfg.conflict_hidden,
                1,
            ],
            rng,
        );
        let view_embed = b.add(
            "field.view_embed",
            &[cfg.n_views, cfg.view_embed_dim],
            Init::Zeros,
            1.0,
            rng,
        );
        let log_inv_std = b.add(
            "field.log_inv_std",
            &[1, 1],
            Init::Const(cfg.inv_std_init.ln()),
            1.0,
            rng,
        );
        let ctx_plain = Arc::new(HashGridCtx::new(&cfg.hash, hash, false));
        let ctx_jac = Arc::new(HashGridCtx::new(&cfg.hash, hash, true));
        SceneField {
            cfg,
            hash,
            geom,
            color,
            conflict,
            view_embed,
            log_inv_std,
            ctx_plain,
            ctx_jac,
        }
    }

    /// Convenience constructor owning a fresh `ParameterSet`.
    pub fn new(cfg: FieldConfig, seed: u64) -> (SceneField, ParameterSet) {
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Init, 0);
        let mut b = ParamBuilder::new();
        let field = Self::register(cfg, &mut b, &mut rng);
        let mut ps = b.build();
        field.finalize_init(&mut ps, &mut rng);
        (field, ps)
    }

    /// Head initialization: near-zero geometry output so the SDF starts at
    /// the sphere bias, and a zero conflict head with logistic bias so h
    /// starts near zero and color supervision dominates early.
    pub fn finalize_init(&self, ps: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        for v in ps.slice_mut(*self.geom.w.last().unwrap()) {
            *v = rng.gen_range(-1e-4..1e-4);
        }
        for v in ps.slice_mut(*self.conflict.w.last().unwrap()) {
            *v = 0.0;
        }
        let bias = ps.slice_mut(*self.conflict.b.last().unwrap());
        bias[0] = self.cfg.conflict_bias_init;
    }

    pub fn n_views(&self) -> usize {
        self.cfg.n_views
    }

    pub fn hash_group(&self) -> GroupId {
        self.hash
    }

    pub fn inv_std(&self, t: &mut Tape) -> Var {
        let p = t.param(self.log_inv_std);
        t.exp(p)
    }

    pub fn inv_std_value(&self, ps: &ParameterSet) -> f64 {
        ps.slice(self.log_inv_std)[0].exp()
    }

    fn mlp_forward(&self, t: &mut Tape, groups: &MlpGroups, mut h: Var, beta: f64) -> Var {
        let n_layers = groups.w.len();
        for i in 0..n_layers {
            let w = t.param(groups.w[i]);
            let b = t.param(groups.b[i]);
            h = t.linear(h, w, b);
            if i + 1 < n_layers {
                h = t.softplus(h, beta);
            }
        }
        h
    }

    /// Hash-encode positions `(N, 3)`; clamped to the cube by construction.
    pub fn encode_batch(&self, t: &mut Tape, x: Var) -> Var {
        t.hashgrid(x, self.ctx_plain.clone())
    }

    /// Batched SDF (+feature, + optional exact spatial gradient) evaluation.
    pub fn sdf_batch(&self, t: &mut Tape, x: Var, with_grad: bool) -> SdfBatch {
        let d = self.cfg.hash.output_dim();
        let n = t.shape(x)[0];
        let beta = self.cfg.geom_beta;

        let (enc, jenc) = if with_grad {
            let out = t.hashgrid(x, self.ctx_jac.clone());
            let enc = t.slice_axis(out, 1, 0, d);
            let jx = t.slice_axis(out, 1, d, 2 * d);
            let jy = t.slice_axis(out, 1, 2 * d, 3 * d);
            let jz = t.slice_axis(out, 1, 3 * d, 4 * d);
            (enc, Some([jx, jy, jz]))
        } else {
            (t.hashgrid(x, self.ctx_plain.clone()), None)
        };

        let input = t.concat(&[enc, x], 1);
        // Jacobian of the input wrt x_a: [J_enc_a | e_a]
        let jin = jenc.map(|j| {
            let mut out = Vec::with_capacity(3);
            for a in 0..3 {
                let mut unit = ArrayD::zeros(IxDyn(&[n, 3]));
                for i in 0..n {
                    unit[[i, a]] = 1.0;
                }
                let e = t.constant(unit);
                out.push(t.concat(&[j[a], e], 1));
            }
            out
        });

        let mut h = input;
        let mut jh = jin;
        let n_layers = self.geom.w.len();
        for i in 0..n_layers {
            let w = t.param(self.geom.w[i]);
            let b = t.param(self.geom.b[i]);
            let z = t.linear(h, w, b);
            let jz = jh.map(|j| {
                let mut out = Vec::with_capacity(3);
                for a in 0..3 {
                    out.push(t.matmul(j[a], w));
                }
                out
            });
            if i + 1 < n_layers {
                h = t.softplus(z, beta);
                jh = jz.map(|j| {
                    let sp = t.softplus_prime(z, beta);
                    let mut out = Vec::with_capacity(3);
                    for a in 0..3 {
                        out.push(t.mul(sp, j[a]));
                    }
                    out
                });
            } else {
                h = z;
                jh = jz;
            }
        }

        let s_raw = t.slice_axis(h, 1, 0, 1);
        let feat = t.slice_axis(h, 1, 1, 1 + self.cfg.geom_feat);

        // analytic sphere bias |x| - r (softened at the origin)
        let x2 = t.square(x);
        let r2 = t.sum_axis(x2, 1);
        let r2 = t.add_scalar(r2, 1e-12);
        let rr = t.sqrt(r2);
        let bias = t.add_scalar(rr, -self.cfg.init_sphere_radius);
        let sdf = t.add(s_raw, bias);

        let grad = jh.map(|j| {
            let mut cols = Vec::with_capacity(3);
            for a in 0..3 {
                let js = t.slice_axis(j[a], 1, 0, 1);
                let xa = t.slice_axis(x, 1, a, a + 1);
                let jb = t.div(xa, rr);
                cols.push(t.add(js, jb));
            }
            t.concat(&cols, 1)
        });

        SdfBatch { sdf, feat, grad }
    }

    /// Color head: rgb in (0,1) from (feature, position, direction, normal).
    pub fn color_batch(&self, t: &mut Tape, feat: Var, x: Var, dir: Var, normal: Var) -> Var {
        let input = t.concat(&[feat, x, dir, normal], 1);
        let out = self.mlp_forward(t, &self.color, input, 1.0);
        t.sigmoid(out)
    }

    /// Conflict head: h in (0,1). By default the color/geometry features are
    /// detached so conflicts are explained by the conflict net alone, not by
    /// degrading the shared features.
    pub fn conflict_batch(
        &self,
        t: &mut Tape,
        color: Var,
        feat: Var,
        dir: Var,
        view_idx: &[usize],
        x: Var,
    ) -> Result<Var> {
        for &v in view_idx {
            if v >= self.cfg.n_views {
                return Err(Error::Dataset(format!(
                    "view index {v} out of range for {} views",
                    self.cfg.n_views
                )));
            }
        }
        let (fc, fg) = if self.cfg.detach_conflict_inputs {
            (t.detach(color), t.detach(feat))
        } else {
            (color, feat)
        };
        let l = t.embed(self.view_embed, Arc::new(view_idx.to_vec()));
        let input = t.concat(&[fc, fg, dir, l, x], 1);
        let out = self.mlp_forward(t, &self.conflict, input, 1.0);
        Ok(t.sigmoid(out))
    }

    // ---- single-point conveniences (throwaway tapes) --------------------

    pub fn encode_position(&self, ps: &ParameterSet, x: [f64; 3]) -> Vec<f64> {
        let mut t = Tape::new(ps);
        let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
        let e = self.encode_batch(&mut t, xv);
        t.value(e).iter().copied().collect()
    }

    pub fn eval_sdf(&self, ps: &ParameterSet, x: [f64; 3]) -> (f64, Vec<f64>) {
        let mut t = Tape::new(ps);
        let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
        let out = self.sdf_batch(&mut t, xv, false);
        (
            t.value(out.sdf)[[0, 0]],
            t.value(out.feat).iter().copied().collect(),
        )
    }

    /// Exact spatial gradient of the SDF (the same value the renderer uses).
    pub fn eval_sdf_gradient(&self, ps: &ParameterSet, x: [f64; 3]) -> [f64; 3] {
        let mut t = Tape::new(ps);
        let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
        let out = self.sdf_batch(&mut t, xv, true);
        let g = t.value(out.grad.unwrap());
        [g[[0, 0]], g[[0, 1]], g[[0, 2]]]
    }

    pub fn eval_color(
        &self,
        ps: &ParameterSet,
        feat: &[f64],
        x: [f64; 3],
        dir: [f64; 3],
        normal: [f64; 3],
    ) -> Result<[f64; 3]> {
        for (name, v) in [("direction", dir), ("normal", normal)] {
            let n = crate::math::norm(v);
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Contract(format!(
                    "eval_color expects unit {name}, got |v| = {n}"
                )));
            }
        }
        if feat.len() != self.cfg.geom_feat {
            return Err(Error::Contract(format!(
                "geometry feature width {} (expected {})",
                feat.len(),
                self.cfg.geom_feat
            )));
        }
        let mut t = Tape::new(ps);
        let f = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, feat.len()]), feat.to_vec()).unwrap());
        let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
        let dv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), dir.to_vec()).unwrap());
        let nv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), normal.to_vec()).unwrap());
        let c = self.color_batch(&mut t, f, xv, dv, nv);
        let v = t.value(c);
        Ok([v[[0, 0]], v[[0, 1]], v[[0, 2]]])
    }

    pub fn eval_conflict(
        &self,
        ps: &ParameterSet,
        color: [f64; 3],
        feat: &[f64],
        dir: [f64; 3],
        view: usize,
        x: [f64; 3],
    ) -> Result<f64> {
        let mut t = Tape::new(ps);
        let c = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), color.to_vec()).unwrap());
        let f = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, feat.len()]), feat.to_vec()).unwrap());
        let dv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), dir.to_vec()).unwrap());
        let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
        let h = self.conflict_batch(&mut t, c, f, dv, &[view], xv)?;
        Ok(t.value(h)[[0, 0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use rand::{Rng, SeedableRng};

    fn small_field() -> (SceneField, ParameterSet) {
        let cfg = FieldConfig {
            hash: HashGridConfig {
                levels: 4,
                base_res: 4,
                max_res: 24,
                features_per_level: 2,
                table_size_log2: 12,
            },
            geom_hidden: 32,
            geom_feat: 7,
            color_hidden: 24,
            conflict_hidden: 24,
            view_embed_dim: 4,
            n_views: 6,
            ..FieldConfig::default()
        };
        SceneField::new(cfg, 42)
    }

    #[test]
    fn fresh_field_is_a_sphere_inside_negative() {
        let (field, ps) = small_field();
        let (s_origin, _) = field.eval_sdf(&ps, [0.0, 0.0, 0.0]);
        assert!(s_origin < 0.0, "origin should be inside: {s_origin}");
        let (s_corner, _) = field.eval_sdf(&ps, [1.0, 1.0, 1.0]);
        assert!(s_corner > 0.0, "corner should be outside: {s_corner}");
    }

    #[test]
    fn encode_is_deterministic_and_zero_for_zero_tables() {
        let (field, mut ps) = small_field();
        let a = field.encode_position(&ps, [0.3, -0.2, 0.7]);
        let b = field.encode_position(&ps, [0.3, -0.2, 0.7]);
        assert_eq!(a, b);
        for v in ps.slice_mut(field.hash) {
            *v = 0.0;
        }
        let e = field.encode_position(&ps, [0.0, 0.0, 0.0]);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_continuity_is_order_delta() {
        let (field, ps) = small_field();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let delta = 1e-4;
        for _ in 0..100 {
            let x: [f64; 3] = [
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
            ];
            let mut x1 = x;
            x1[rng.gen_range(0..3)] += delta;
            let (e0, e1) = (field.encode_position(&ps, x), field.encode_position(&ps, x1));
            for (a, b) in e0.iter().zip(&e1) {
                assert!((a - b).abs() <= 1.0 * delta, "slope too steep: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sdf_gradient_matches_central_differences() {
        let (field, mut ps) = small_field();
        // give the tables real content so the grid contributes to gradients
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for v in ps.slice_mut(field.hash) {
            *v = rng.gen_range(-0.05..0.05);
        }
        let h = 1e-4;
        for _ in 0..64 {
            let x: [f64; 3] = [
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            ];
            let g = field.eval_sdf_gradient(&ps, x);
            for a in 0..3 {
                let mut xp = x;
                xp[a] += h;
                let (fp, _) = field.eval_sdf(&ps, xp);
                xp[a] -= 2.0 * h;
                let (fm, _) = field.eval_sdf(&ps, xp);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    rel_err(g[a], fd, 1e-3) < 1e-3,
                    "axis {a} at {x:?}: analytic {} vs fd {fd}",
                    g[a]
                );
            }
        }
    }

    #[test]
    fn gradient_evaluation_is_deterministic() {
        let (field, ps) = small_field();
        let g1 = field.eval_sdf_gradient(&ps, [0.21, -0.43, 0.11]);
        let g2 = field.eval_sdf_gradient(&ps, [0.21, -0.43, 0.11]);
        assert_eq!(g1, g2);
    }

    #[test]
    fn color_is_bounded_and_zero_head_gives_mid_gray() {
        let (field, mut ps) = small_field();
        let feat = vec![0.3; field.cfg.geom_feat];
        let c = field
            .eval_color(&ps, &feat, [0.1, 0.2, 0.3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
            .unwrap();
        assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));

        for v in ps.slice_mut(*field.color.w.last().unwrap()) {
            *v = 0.0;
        }
        for v in ps.slice_mut(*field.color.b.last().unwrap()) {
            *v = 0.0;
        }
        let c = field
            .eval_color(&ps, &feat, [0.1, 0.2, 0.3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
            .unwrap();
        for v in c {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn non_unit_direction_or_normal_is_rejected() {
        let (field, ps) = small_field();
        let feat = vec![0.0; field.cfg.geom_feat];
        assert!(field
            .eval_color(&ps, &feat, [0.0; 3], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0])
            .is_err());
        assert!(field
            .eval_color(&ps, &feat, [0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.5, 0.0])
            .is_err());
    }

    #[test]
    fn conflict_starts_near_zero_and_validates_views() {
        let (field, ps) = small_field();
        let feat = vec![0.1; field.cfg.geom_feat];
        let h = field
            .eval_conflict(&ps, [0.4, 0.4, 0.4], &feat, [1.0, 0.0, 0.0], 2, [0.0; 3])
            .unwrap();
        let expected = 1.0 / (1.0 + 3.0f64.exp());
        assert!((h - expected).abs() < 1e-12, "h = {h}");
        assert!(h < 0.06);

        assert!(field
            .eval_conflict(&ps, [0.4; 3], &feat, [1.0, 0.0, 0.0], 99, [0.0; 3])
            .is_err());
    }

    #[test]
    fn conflict_gradients_do_not_touch_geometry_or_color_weights() {
        let (field, ps) = small_field();
        let mut t = Tape::new(&ps);
        let x = t.constant(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.1; 6]).unwrap());
        let out = field.sdf_batch(&mut t, x, false);
        let dirs = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let c = field.color_batch(&mut t, out.feat, x, dirs, dirs);
        let h = field
            .conflict_batch(&mut t, c, out.feat, dirs, &[0, 1], x)
            .unwrap();
        let loss = t.mean_all(h);
        let mut pg = vec![0.0; ps.len()];
        t.backward(loss, &mut pg);

        let geom_w0 = ps.group(field.geom.w[0]).clone();
        assert!(pg[geom_w0.offset..geom_w0.offset + geom_w0.len]
            .iter()
            .all(|&g| g == 0.0));
        let color_w0 = ps.group(field.color.w[0]).clone();
        assert!(pg[color_w0.offset..color_w0.offset + color_w0.len]
            .iter()
            .all(|&g| g == 0.0));
        // but the conflict net itself does
        let cb = ps.group(*field.conflict.b.last().unwrap()).clone();
        assert!(pg[cb.offset..cb.offset + cb.len].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn outputs_stay_bounded_over_random_probes() {
        let (field, ps) = small_field();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let x = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen_range(-2.0..2.0));
        let mut t = Tape::new(&ps);
        let xv = t.constant(x);
        let out = field.sdf_batch(&mut t, xv, false);
        let dirs = {
            let mut d = ArrayD::zeros(IxDyn(&[n, 3]));
            for i in 0..n {
                let v = crate::math::normalize([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(1e-3..1.0),
                ]);
                for a in 0..3 {
                    d[[i, a]] = v[a];
                }
            }
            t.constant(d)
        };
        let c = field.color_batch(&mut t, out.feat, xv, dirs, dirs);
        let views: Vec<usize> = (0..n).map(|i| i % field.cfg.n_views).collect();
        let h = field
            .conflict_batch(&mut t, c, out.feat, dirs, &views, xv)
            .unwrap();
        assert!(t.value(out.sdf).iter().all(|v| v.is_finite()));
        assert!(t.value(c).iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(t.value(h).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
