//! Desk-scale latent transformer with geometry/texture alignment attention.
//!
//! Latents carry the RGB halves and normal-map halves of all views in one
//! tensor `(2·nv·b, d, c)` with the RGB half first. Alignment attention lets
//! every token attend the key/value tokens of *both* halves of its own
//! row pair, so texture and geometry exchange information; the block applies
//! it at the spatial level (tokens = pixels of one frame) and, after a
//! rearrange, at the temporal level (tokens = views at one pixel).
//!
//! All residual branches end in zero-initialized projections, so a fresh
//! block is the identity, and the wrapped denoiser starts at
//! `D(x; σ) = c_skip·x`.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::dataset::MultiViewSet;
use crate::edm::{NoiseSchedule, Preconditioner};
use crate::params::{Adam, GroupId, Init, ParamBuilder, ParameterSet};
use crate::rng::{derive, Stream};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// Token tensor `(2·nv·b, d, c)`; the first `nv·b` rows are the RGB half,
/// the second the normal half. Within a half, rows are view-major.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub data: Array3<f64>,
    pub nv: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentGrid {
    pub fn new(data: Array3<f64>, nv: usize, b: usize, h: usize, w: usize) -> Result<Self> {
        let rows = data.shape()[0];
        let d = data.shape()[1];
        if rows != 2 * nv * b {
            return Err(Error::Contract(format!(
                "latent rows {rows} != 2·nv·b = {}",
                2 * nv * b
            )));
        }
        if rows % 2 != 0 {
            return Err(Error::Contract("latent rows must split into two halves".into()));
        }
        if d != h * w {
            return Err(Error::Contract(format!("token count {d} != h·w = {}", h * w)));
        }
        Ok(LatentGrid { data, nv, b, h, w })
    }

    pub fn rows(&self) -> usize {
        2 * self.nv * self.b
    }

    pub fn d(&self) -> usize {
        self.h * self.w
    }

    pub fn c(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn row_index(&self, domain: usize, view: usize, batch: usize) -> usize {
        domain * self.nv * self.b + view * self.b + batch
    }

    pub fn zeros_like(&self) -> LatentGrid {
        LatentGrid {
            data: Array3::zeros(self.data.raw_dim()),
            ..self.clone()
        }
    }

    pub fn map2<F: Fn(f64, f64) -> f64>(&self, other: &LatentGrid, f: F) -> LatentGrid {
        let mut out = self.clone();
        ndarray::Zip::from(&mut out.data)
            .and(&other.data)
            .for_each(|o, &b| *o = f(*o, b));
        out
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-view camera condition (azimuth on the elevation-0 ring) plus a global
/// condition vector standing in for the conditioning-image embedding. Task
/// conditioning is carried by the latent layout: the first half of the rows
/// is the color task, the second the geometry task.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub azimuths: Vec<f64>,
    /// Global condition tokens (rows of length `y_dim`).
    pub y: Array2<f64>,
}

impl ConditionSet {
    pub fn validate(&self, nv: usize, y_dim: usize) -> Result<()> {
        if self.azimuths.len() != nv {
            return Err(Error::Contract(format!(
                "condition set has {} camera angles for {nv} views",
                self.azimuths.len()
            )));
        }
        if self.y.shape()[1] != y_dim || self.y.shape()[0] == 0 {
            return Err(Error::Contract(format!(
                "global condition shape {:?} incompatible with y_dim {y_dim}",
                self.y.shape()
            )));
        }
        Ok(())
    }

    /// One-hot task rows: exactly one task per half.
    pub fn task_one_hot(domain: usize) -> [f64; 2] {
        match domain {
            0 => [1.0, 0.0],
            _ => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GtaConfig {
    pub channels: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub y_dim: usize,
    pub n_views: usize,
    pub batch: usize,
    pub tokens_h: usize,
    pub tokens_w: usize,
    pub sigma_data: f64,
}

impl Default for GtaConfig {
    fn default() -> Self {
        GtaConfig {
            channels: 32,
            n_heads: 2,
            n_blocks: 2,
            y_dim: 16,
            n_views: 16,
            batch: 1,
            tokens_h: 8,
            tokens_w: 8,
            sigma_data: 1.0,
        }
    }
}

impl GtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.n_heads != 0 {
            return Err(Error::Config("channels must divide evenly into heads".into()));
        }
        if self.n_views == 0 || self.batch == 0 || self.n_blocks == 0 {
            return Err(Error::Config("degenerate transformer configuration".into()));
        }
        Ok(())
    }
}

// ---- attention primitives --------------------------------------------------

/// Multi-head scaled dot-product attention over 3-d vars:
/// q `(R, Tq, C)`, k/v `(R, Tk, C)` → `(R, Tq, C)`.
fn mha(t: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
    let (r, tq, c) = {
        let s = t.shape(q);
        (s[0], s[1], s[2])
    };
    let tk = t.shape(k)[1];
    let hd = c / n_heads;
    let split = |t: &mut Tape, x: Var, tokens: usize| -> Var {
        let x4 = t.reshape(x, &[r, tokens, n_heads, hd]);
        let x4 = t.swap_axes(x4, 1, 2);
        t.reshape(x4, &[r * n_heads, tokens, hd])
    };
    let q3 = split(t, q, tq);
    let k3 = split(t, k, tk);
    let v3 = split(t, v, tk);
    let kt = t.swap_axes(k3, 1, 2);
    let scores = t.bmm(q3, kt);
    let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
    let att = t.softmax(scores);
    let out = t.bmm(att, v3);
    let out4 = t.reshape(out, &[r, n_heads, tq, hd]);
    let out4 = t.swap_axes(out4, 1, 2);
    t.reshape(out4, &[r, tq, c])
}

/// Alignment attention on a `(R, T, C)` var: queries from every row, keys
/// and values from the row's half-pair with RGB and normal tokens
/// concatenated along the token axis.
pub fn alignment_attention_var(
    t: &mut Tape,
    z: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    n_heads: usize,
) -> Result<Var> {
    let (r, tok, c) = {
        let s = t.shape(z);
        (s[0], s[1], s[2])
    };
    if r % 2 != 0 {
        return Err(Error::Contract(format!(
            "alignment attention needs an even row count (rgb/normal halves), got {r}"
        )));
    }
    let proj = |t: &mut Tape, w: Var| -> Var {
        let z2 = t.reshape(z, &[r * tok, c]);
        let p = t.matmul(z2, w);
        t.reshape(p, &[r, tok, c])
    };
    let q = proj(t, wq);
    let k = proj(t, wk);
    let v = proj(t, wv);

    let half = r / 2;
    let cat_halves = |t: &mut Tape, x: Var| -> Var {
        let rgb = t.slice_axis(x, 0, 0, half);
        let norm = t.slice_axis(x, 0, half, r);
        let cat = t.concat(&[rgb, norm], 1); // (half, 2T, C)
        t.concat(&[cat, cat], 0) // row i and i+half see the same pair
    };
    let k_cat = cat_halves(t, k);
    let v_cat = cat_halves(t, v);
    Ok(mha(t, q, k_cat, v_cat, n_heads))
}

/// Value-level alignment attention (the bare operation with its weights).
pub struct AlignmentWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub n_heads: usize,
}

pub fn alignment_attention(z: &LatentGrid, w: &AlignmentWeights) -> Result<LatentGrid> {
    let ps = ParameterSet::empty();
    let mut t = Tape::new(&ps);
    let zv = t.constant(z.data.clone().into_dyn());
    let wq = t.constant(w.wq.clone().into_dyn());
    let wk = t.constant(w.wk.clone().into_dyn());
    let wv = t.constant(w.wv.clone().into_dyn());
    let out = alignment_attention_var(&mut t, zv, wq, wk, wv, w.n_heads)?;
    let data = t
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    Ok(LatentGrid { data, ..z.clone() })
}

// ---- rearranges -------------------------------------------------------------

/// Spatial layout `(2·nv·b, h·w, c)` → temporal layout `(2·b·h·w, nv, c)`.
pub fn rearrange_to_temporal(t: &mut Tape, z: Var, nv: usize, b: usize, h: usize, w: usize) -> Var {
    let c = t.shape(z)[2];
    let z6 = t.reshape(z, &[2, nv, b, h, w, c]);
    let z6 = t.swap_axes(z6, 1, 2); // (2,b,nv,h,w,c)
    let z6 = t.swap_axes(z6, 2, 3); // (2,b,h,nv,w,c)
    let z6 = t.swap_axes(z6, 3, 4); // (2,b,h,w,nv,c)
    t.reshape(z6, &[2 * b * h * w, nv, c])
}

/// Inverse of [`rearrange_to_temporal`].
pub fn rearrange_to_spatial(t: &mut Tape, z: Var, nv: usize, b: usize, h: usize, w: usize) -> Var {
    let c = t.shape(z)[2];
    let z6 = t.reshape(z, &[2, b, h, w, nv, c]);
    let z6 = t.swap_axes(z6, 3, 4); // (2,b,h,nv,w,c)
    let z6 = t.swap_axes(z6, 2, 3); // (2,b,nv,h,w,c)
    let z6 = t.swap_axes(z6, 1, 2); // (2,nv,b,h,w,c)
    t.reshape(z6, &[2 * nv * b, h * w, c])
}

// ---- the network -------------------------------------------------------------

#[derive(Debug, Clone)]
struct LnGroups {
    gamma: GroupId,
    beta: GroupId,
}

#[derive(Debug, Clone)]
struct ResGroups {
    ln: LnGroups,
    w1: GroupId,
    b1: GroupId,
    wcond: GroupId,
    w2: GroupId,
    b2: GroupId,
}

#[derive(Debug, Clone)]
struct AttnGroups {
    ln: LnGroups,
    wq: GroupId,
    wk: GroupId,
    wv: GroupId,
    wo: GroupId,
}

#[derive(Debug, Clone)]
struct CrossGroups {
    ln: LnGroups,
    wq: GroupId,
    wk: GroupId,
    wv: GroupId,
    wo: GroupId,
}

#[derive(Debug, Clone)]
struct ConvGroups {
    ln: LnGroups,
    wm: GroupId,
    w0: GroupId,
    wp: GroupId,
}

#[derive(Debug, Clone)]
struct BlockGroups {
    res_s: ResGroups,
    self_s: AttnGroups,
    align_s: AttnGroups,
    cross_s: CrossGroups,
    conv: ConvGroups,
    res_t: ResGroups,
    self_t: AttnGroups,
    align_t: AttnGroups,
    cross_t: CrossGroups,
}

/// Transformer with alignment attention at the spatial and temporal levels.
pub struct GtaNet {
    pub cfg: GtaConfig,
    label_w: GroupId,
    label_b: GroupId,
    noise_w1: GroupId,
    noise_b1: GroupId,
    noise_w2: GroupId,
    noise_b2: GroupId,
    in_w: GroupId,
    in_b: GroupId,
    out_w: GroupId,
    out_b: GroupId,
    blocks: Vec<BlockGroups>,
}

const NOISE_FOURIER: usize = 8;

impl GtaNet {
    pub fn register(cfg: GtaConfig, b: &mut ParamBuilder, rng: &mut ChaCha8Rng) -> Result<GtaNet> {
        cfg.validate()?;
        let c = cfg.channels;
        let xavier = |i: usize, o: usize| Init::Xavier {
            fan_in: i,
            fan_out: o,
        };
        let ln = |name: String, b: &mut ParamBuilder, rng: &mut ChaCha8Rng| LnGroups {
            gamma: b.add(&format!("{name}.g"), &[1, 1, c], Init::Const(1.0), 1.0, rng),
            beta: b.add(&format!("{name}.b"), &[1, 1, c], Init::Zeros, 1.0, rng),
        };
        let res = |name: String, b: &mut ParamBuilder, rng: &mut ChaCha8Rng| ResGroups {
            ln: ln(format!("{name}.ln"), b, rng),
            w1: b.add(&format!("{name}.w1"), &[c, 2 * c], xavier(c, 2 * c), 1.0, rng),
            b1: b.add(&format!("{name}.b1"), &[1, 2 * c], Init::Zeros, 1.0, rng),
            wcond: b.add(&format!("{name}.wc"), &[c, 2 * c], xavier(c, 2 * c), 1.0, rng),
            w2: b.add(&format!("{name}.w2"), &[2 * c, c], Init::Zeros, 1.0, rng),
            b2: b.add(&format!("{name}.b2"), &[1, c], Init::Zeros, 1.0, rng),
        };
        let attn = |name: String, b: &mut ParamBuilder, rng: &mut ChaCha8Rng| AttnGroups {
            ln: ln(format!("{name}.ln"), b, rng),
            wq: b.add(&format!("{name}.wq"), &[c, c], xavier(c, c), 1.0, rng),
            wk: b.add(&format!("{name}.wk"), &[c, c], xavier(c, c), 1.0, rng),
            wv: b.add(&format!("{name}.wv"), &[c, c], xavier(c, c), 1.0, rng),
            wo: b.add(&format!("{name}.wo"), &[c, c], Init::Zeros, 1.0, rng),
        };
        let cross = |name: String, b: &mut ParamBuilder, rng: &mut ChaCha8Rng| CrossGroups {
            ln: ln(format!("{name}.ln"), b, rng),
            wq: b.add(&format!("{name}.wq"), &[c, c], xavier(c, c), 1.0, rng),
            wk: b.add(
                &format!("{name}.wk"),
                &[cfg.y_dim, c],
                xavier(cfg.y_dim, c),
                1.0,
                rng,
            ),
            wv: b.add(
                &format!("{name}.wv"),
                &[cfg.y_dim, c],
                xavier(cfg.y_dim, c),
                1.0,
                rng,
            ),
            wo: b.add(&format!("{name}.wo"), &[c, c], Init::Zeros, 1.0, rng),
        };
        let conv = |name: String, b: &mut ParamBuilder, rng: &mut ChaCha8Rng| ConvGroups {
            ln: ln(format!("{name}.ln"), b, rng),
            wm: b.add(&format!("{name}.wm"), &[c, c], Init::Zeros, 1.0, rng),
            w0: b.add(&format!("{name}.w0"), &[c, c], Init::Zeros, 1.0, rng),
            wp: b.add(&format!("{name}.wp"), &[c, c], Init::Zeros, 1.0, rng),
        };

        let label_w = b.add("gta.label.w", &[6, c], xavier(6, c), 1.0, rng);
        let label_b = b.add("gta.label.b", &[1, c], Init::Zeros, 1.0, rng);
        let noise_w1 = b.add(
            "gta.noise.w1",
            &[2 * NOISE_FOURIER, c],
            xavier(2 * NOISE_FOURIER, c),
            1.0,
            rng,
        );
        let noise_b1 = b.add("gta.noise.b1", &[1, c], Init::Zeros, 1.0, rng);
        let noise_w2 = b.add("gta.noise.w2", &[c, c], xavier(c, c), 1.0, rng);
        let noise_b2 = b.add("gta.noise.b2", &[1, c], Init::Zeros, 1.0, rng);
        let in_w = b.add("gta.in.w", &[c, c], xavier(c, c), 1.0, rng);
        let in_b = b.add("gta.in.b", &[1, c], Init::Zeros, 1.0, rng);
        let out_w = b.add("gta.out.w", &[c, c], Init::Zeros, 1.0, rng);
        let out_b = b.add("gta.out.b", &[1, c], Init::Zeros, 1.0, rng);

        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockGroups {
                res_s: res(format!("gta.b{i}.res_s"), b, rng),
                self_s: attn(format!("gta.b{i}.self_s"), b, rng),
                align_s: attn(format!("gta.b{i}.align_s"), b, rng),
                cross_s: cross(format!("gta.b{i}.cross_s"), b, rng),
                conv: conv(format!("gta.b{i}.conv"), b, rng),
                res_t: res(format!("gta.b{i}.res_t"), b, rng),
                self_t: attn(format!("gta.b{i}.self_t"), b, rng),
                align_t: attn(format!("gta.b{i}.align_t"), b, rng),
                cross_t: cross(format!("gta.b{i}.cross_t"), b, rng),
            })
            .collect();

        Ok(GtaNet {
            cfg,
            label_w,
            label_b,
            noise_w1,
            noise_b1,
            noise_w2,
            noise_b2,
            in_w,
            in_b,
            out_w,
            out_b,
            blocks,
        })
    }

    pub fn new(cfg: GtaConfig, seed: u64) -> Result<(GtaNet, ParameterSet)> {
        let mut rng = derive(seed, Stream::Init, 1);
        let mut b = ParamBuilder::new();
        let net = Self::register(cfg, &mut b, &mut rng)?;
        Ok((net, b.build()))
    }

    fn layer_norm(&self, t: &mut Tape, z: Var, ln: &LnGroups) -> Var {
        let mu = t.mean_axis(z, 2);
        let centered = t.sub(z, mu);
        let sq = t.square(centered);
        let var = t.mean_axis(sq, 2);
        let var = t.add_scalar(var, 1e-6);
        let std = t.sqrt(var);
        let normed = t.div(centered, std);
        let g = t.param(ln.gamma);
        let b = t.param(ln.beta);
        let scaled = t.mul(normed, g);
        t.add(scaled, b)
    }

    /// Per-row conditioning vector: projected camera/task label plus the
    /// noise-level embedding, shape `(rows, 1, c)`.
    fn row_cond(&self, t: &mut Tape, sigma: f64, cond: &ConditionSet, temporal: bool) -> Var {
        let cfg = &self.cfg;
        let (nv, b) = (cfg.n_views, cfg.batch);
        let (h, w) = (cfg.tokens_h, cfg.tokens_w);
        let rows = if temporal { 2 * b * h * w } else { 2 * nv * b };
        // label rows: [sin az, cos az, sin el, cos el, task0, task1];
        // temporal rows mix all views, so the camera part is zeroed there
        let mut label = Array2::<f64>::zeros((rows, 6));
        for r in 0..rows {
            let domain = if temporal { r / (b * h * w) } else { r / (nv * b) };
            if !temporal {
                let v = (r % (nv * b)) / b;
                let az = cond.azimuths[v];
                label[[r, 0]] = az.sin();
                label[[r, 1]] = az.cos();
                label[[r, 2]] = 0.0;
                label[[r, 3]] = 1.0;
            }
            let task = ConditionSet::task_one_hot(domain);
            label[[r, 4]] = task[0];
            label[[r, 5]] = task[1];
        }
        let label = t.constant(label.into_dyn());
        let lw = t.param(self.label_w);
        let lb = t.param(self.label_b);
        let label_emb = t.linear(label, lw, lb); // (rows, c)

        // fourier features of c_noise through a small MLP
        let cn = sigma.ln() / 4.0;
        let mut feats = Vec::with_capacity(2 * NOISE_FOURIER);
        for k in 0..NOISE_FOURIER {
            let f = (2f64).powi(k as i32) * cn;
            feats.push(f.sin());
            feats.push(f.cos());
        }
        let nf = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2 * NOISE_FOURIER]), feats).unwrap());
        let nw1 = t.param(self.noise_w1);
        let nb1 = t.param(self.noise_b1);
        let ne = t.linear(nf, nw1, nb1);
        let ne = t.softplus(ne, 1.0);
        let nw2 = t.param(self.noise_w2);
        let nb2 = t.param(self.noise_b2);
        let noise_emb = t.linear(ne, nw2, nb2); // (1, c)

        let combined = t.add(label_emb, noise_emb);
        t.reshape(combined, &[rows, 1, cfg.channels])
    }

    fn res_block(&self, t: &mut Tape, z: Var, g: &ResGroups, cond: Var) -> Var {
        let (rows, tok, c) = {
            let s = t.shape(z);
            (s[0], s[1], s[2])
        };
        let normed = self.layer_norm(t, z, &g.ln);
        let flat = t.reshape(normed, &[rows * tok, c]);
        let w1 = t.param(g.w1);
        let b1 = t.param(g.b1);
        let h1 = t.linear(flat, w1, b1);
        let h1 = t.reshape(h1, &[rows, tok, 2 * c]);
        // conditioning shift
        let wc = t.param(g.wcond);
        let cond2 = t.reshape(cond, &[rows, c]);
        let shift = t.matmul(cond2, wc);
        let shift = t.reshape(shift, &[rows, 1, 2 * c]);
        let h1 = t.add(h1, shift);
        let h2 = t.softplus(h1, 1.0);
        let h2f = t.reshape(h2, &[rows * tok, 2 * c]);
        let w2 = t.param(g.w2);
        let b2 = t.param(g.b2);
        let out = t.linear(h2f, w2, b2);
        let out = t.reshape(out, &[rows, tok, c]);
        t.add(z, out)
    }

    fn self_attention(&self, t: &mut Tape, z: Var, g: &AttnGroups) -> Var {
        let (rows, tok, c) = {
            let s = t.shape(z);
            (s[0], s[1], s[2])
        };
        let normed = self.layer_norm(t, z, &g.ln);
        let flat = t.reshape(normed, &[rows * tok, c]);
        let proj = |t: &mut Tape, w: GroupId| -> Var {
            let wv = t.param(w);
            let p = t.matmul(flat, wv);
            t.reshape(p, &[rows, tok, c])
        };
        let q = proj(t, g.wq);
        let k = proj(t, g.wk);
        let v = proj(t, g.wv);
        let att = mha(t, q, k, v, self.cfg.n_heads);
        let att_flat = t.reshape(att, &[rows * tok, c]);
        let wo = t.param(g.wo);
        let out = t.matmul(att_flat, wo);
        let out = t.reshape(out, &[rows, tok, c]);
        t.add(z, out)
    }

    fn align_attention(&self, t: &mut Tape, z: Var, g: &AttnGroups) -> Result<Var> {
        let (rows, tok, c) = {
            let s = t.shape(z);
            (s[0], s[1], s[2])
        };
        let normed = self.layer_norm(t, z, &g.ln);
        let wq = t.param(g.wq);
        let wk = t.param(g.wk);
        let wv = t.param(g.wv);
        let att = alignment_attention_var(t, normed, wq, wk, wv, self.cfg.n_heads)?;
        let att_flat = t.reshape(att, &[rows * tok, c]);
        let wo = t.param(g.wo);
        let out = t.matmul(att_flat, wo);
        let out = t.reshape(out, &[rows, tok, c]);
        Ok(t.add(z, out))
    }

    fn cross_attention(&self, t: &mut Tape, z: Var, g: &CrossGroups, cond: &ConditionSet) -> Var {
        let (rows, tok, c) = {
            let s = t.shape(z);
            (s[0], s[1], s[2])
        };
        let normed = self.layer_norm(t, z, &g.ln);
        let flat = t.reshape(normed, &[rows * tok, c]);
        let wq = t.param(g.wq);
        let q = t.matmul(flat, wq);
        let q = t.reshape(q, &[rows, tok, c]);

        let ky = cond.y.shape()[0];
        let y = t.constant(cond.y.clone().into_dyn());
        let wk = t.param(g.wk);
        let wv = t.param(g.wv);
        let k = t.matmul(y, wk); // (ky, c)
        let v = t.matmul(y, wv);
        let k3 = t.reshape(k, &[1, ky, c]);
        let v3 = t.reshape(v, &[1, ky, c]);
        let idx: Arc<Vec<i64>> = Arc::new(vec![0; rows]);
        let k3 = t.gather_rows(k3, idx.clone());
        let v3 = t.gather_rows(v3, idx);
        let att = mha(t, q, k3, v3, self.cfg.n_heads);
        let att_flat = t.reshape(att, &[rows * tok, c]);
        let wo = t.param(g.wo);
        let out = t.matmul(att_flat, wo);
        let out = t.reshape(out, &[rows, tok, c]);
        t.add(z, out)
    }

    /// Temporal residual convolution over the view axis (kernel 3, zero
    /// padding), applied in the spatial layout.
    fn temporal_conv(&self, t: &mut Tape, z: Var, g: &ConvGroups) -> Var {
        let cfg = &self.cfg;
        let (nv, b) = (cfg.n_views, cfg.batch);
        let rows = 2 * nv * b;
        let (tok, c) = {
            let s = t.shape(z);
            (s[1], s[2])
        };
        let normed = self.layer_norm(t, z, &g.ln);
        let shift = |offset: i64| -> Arc<Vec<i64>> {
            Arc::new(
                (0..rows as i64)
                    .map(|r| {
                        let within = r % (nv * b) as i64;
                        let v = within / b as i64;
                        let nv_i = nv as i64;
                        if v + offset < 0 || v + offset >= nv_i {
                            -1
                        } else {
                            r + offset * b as i64
                        }
                    })
                    .collect(),
            )
        };
        let zm = t.gather_rows(normed, shift(-1));
        let zp = t.gather_rows(normed, shift(1));
        let apply = |t: &mut Tape, x: Var, w: GroupId| -> Var {
            let flat = t.reshape(x, &[rows * tok, c]);
            let wv = t.param(w);
            let p = t.matmul(flat, wv);
            t.reshape(p, &[rows, tok, c])
        };
        let am = apply(t, zm, g.wm);
        let a0 = apply(t, normed, g.w0);
        let ap = apply(t, zp, g.wp);
        let s = t.add(am, a0);
        let s = t.add(s, ap);
        t.add(z, s)
    }

    /// One GTA-infused transformer block: spatial ResBlock, SelfAttention,
    /// AlignmentAttention, CrossAttention, temporal convolution; rearrange to
    /// the temporal layout; temporal ResBlock, SelfAttention,
    /// AlignmentAttention, CrossAttention; rearrange back.
    fn block(&self, t: &mut Tape, mut z: Var, g: &BlockGroups, sigma: f64, cond: &ConditionSet) -> Result<Var> {
        let cfg = &self.cfg;
        let cond_s = self.row_cond(t, sigma, cond, false);
        z = self.res_block(t, z, &g.res_s, cond_s);
        z = self.self_attention(t, z, &g.self_s);
        z = self.align_attention(t, z, &g.align_s)?;
        z = self.cross_attention(t, z, &g.cross_s, cond);
        z = self.temporal_conv(t, z, &g.conv);

        z = rearrange_to_temporal(t, z, cfg.n_views, cfg.batch, cfg.tokens_h, cfg.tokens_w);
        let cond_t = self.row_cond(t, sigma, cond, true);
        z = self.res_block(t, z, &g.res_t, cond_t);
        z = self.self_attention(t, z, &g.self_t);
        z = self.align_attention(t, z, &g.align_t)?;
        z = self.cross_attention(t, z, &g.cross_t, cond);
        z = rearrange_to_spatial(t, z, cfg.n_views, cfg.batch, cfg.tokens_h, cfg.tokens_w);
        Ok(z)
    }

    /// Inner network F on the tape: input/output projections around the
    /// block stack. Shape-preserving.
    pub fn forward_var(&self, t: &mut Tape, z: Var, sigma: f64, cond: &ConditionSet) -> Result<Var> {
        let cfg = &self.cfg;
        cond.validate(cfg.n_views, cfg.y_dim)?;
        let (rows, tok, c) = {
            let s = t.shape(z);
            (s[0], s[1], s[2])
        };
        if rows != 2 * cfg.n_views * cfg.batch || tok != cfg.tokens_h * cfg.tokens_w || c != cfg.channels
        {
            return Err(Error::Contract(format!(
                "latent shape ({rows},{tok},{c}) does not match the configuration"
            )));
        }
        let flat = t.reshape(z, &[rows * tok, c]);
        let iw = t.param(self.in_w);
        let ib = t.param(self.in_b);
        let mut h = t.linear(flat, iw, ib);
        let hr = t.reshape(h, &[rows, tok, c]);
        let mut zc = hr;
        for g in &self.blocks {
            zc = self.block(t, zc, g, sigma, cond)?;
        }
        h = t.reshape(zc, &[rows * tok, c]);
        let ow = t.param(self.out_w);
        let ob = t.param(self.out_b);
        let out = t.linear(h, ow, ob);
        Ok(t.reshape(out, &[rows, tok, c]))
    }

    /// Run one block as the public shape-preserving operation.
    pub fn gta_block(
        &self,
        ps: &ParameterSet,
        z: &LatentGrid,
        cond: &ConditionSet,
        sigma: f64,
    ) -> Result<LatentGrid> {
        cond.validate(self.cfg.n_views, self.cfg.y_dim)?;
        let mut t = Tape::new(ps);
        let zv = t.constant(z.data.clone().into_dyn());
        let out = self.block(&mut t, zv, &self.blocks[0], sigma, cond)?;
        let data = t
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        Ok(LatentGrid { data, ..z.clone() })
    }
}

// ---- denoising --------------------------------------------------------------

/// Anything that maps (noisy latents, σ) to an estimate of the clean latents.
pub trait Denoiser {
    fn denoise(&self, noisy: &LatentGrid, sigma: f64, cond: &ConditionSet) -> Result<LatentGrid>;
}

/// Test denoiser that knows the answer.
pub struct OracleDenoiser {
    pub x0: LatentGrid,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, _noisy: &LatentGrid, _sigma: f64, _cond: &ConditionSet) -> Result<LatentGrid> {
        Ok(self.x0.clone())
    }
}

/// The preconditioned learned denoiser D(x; σ) = c_skip·x + c_out·F(c_in·x).
pub struct GtaDenoiser {
    pub net: GtaNet,
    pub params: ParameterSet,
}

impl GtaDenoiser {
    pub fn new(cfg: GtaConfig, seed: u64) -> Result<GtaDenoiser> {
        let (net, params) = GtaNet::new(cfg, seed)?;
        Ok(GtaDenoiser { net, params })
    }

    fn precond(&self) -> Preconditioner {
        Preconditioner {
            sigma_data: self.net.cfg.sigma_data,
            ..Default::default()
        }
    }

    pub fn denoise_var(&self, t: &mut Tape, noisy: Var, sigma: f64, cond: &ConditionSet) -> Result<Var> {
        let p = self.precond();
        let scaled = t.scale(noisy, p.c_in(sigma)?);
        let f = self.net.forward_var(t, scaled, sigma, cond)?;
        let fo = t.scale(f, p.c_out(sigma)?);
        let skip = t.scale(noisy, p.c_skip(sigma)?);
        Ok(t.add(skip, fo))
    }

    /// λ(σ)-weighted denoising loss for a given (σ, noise) draw, with the
    /// per-half means reported alongside the total.
    pub fn training_loss_with_noise(
        &self,
        clean: &LatentGrid,
        sigma: f64,
        noise: &LatentGrid,
        cond: &ConditionSet,
    ) -> Result<(f64, f64, f64)> {
        let p = self.precond();
        let weight = p.weight(sigma)?;
        let mut t = Tape::new(&self.params);
        let noisy = clean.map2(noise, |c, n| c + sigma * n);
        let nv = t.constant(noisy.data.clone().into_dyn());
        let d = self.denoise_var(&mut t, nv, sigma, cond)?;
        let cv = t.constant(clean.data.clone().into_dyn());
        let diff = t.sub(d, cv);
        let sq = t.square(diff);
        let half = clean.rows() / 2;
        let rgb = t.slice_axis(sq, 0, 0, half);
        let nrm = t.slice_axis(sq, 0, half, clean.rows());
        let rgb_m = t.mean_all(rgb);
        let nrm_m = t.mean_all(nrm);
        let total = t.mean_all(sq);
        Ok((
            weight * t.value(total)[[0]],
            weight * t.value(rgb_m)[[0]],
            weight * t.value(nrm_m)[[0]],
        ))
    }

    /// Draw σ from the active stage and noise from `rng`, then score.
    pub fn training_loss(
        &self,
        clean: &LatentGrid,
        precond: &Preconditioner,
        cond: &ConditionSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let sigma = precond.sample_sigma(rng);
        let noise = gaussian_like(clean, rng);
        Ok(self.training_loss_with_noise(clean, sigma, &noise, cond)?.0)
    }

    /// Differentiable training loss; gradients go to `grad_buf`.
    fn training_step_grad(
        &self,
        clean: &LatentGrid,
        sigma: f64,
        noise: &LatentGrid,
        cond: &ConditionSet,
        grad_buf: &mut [f64],
    ) -> Result<f64> {
        let p = self.precond();
        let weight = p.weight(sigma)?;
        let mut t = Tape::new(&self.params);
        let noisy = clean.map2(noise, |c, n| c + sigma * n);
        let nv = t.constant(noisy.data.clone().into_dyn());
        let d = self.denoise_var(&mut t, nv, sigma, cond)?;
        let cv = t.constant(clean.data.clone().into_dyn());
        let diff = t.sub(d, cv);
        let sq = t.square(diff);
        let mean = t.mean_all(sq);
        let loss = t.scale(mean, weight);
        t.backward(loss, grad_buf);
        Ok(t.value(loss)[[0]])
    }
}

impl Denoiser for GtaDenoiser {
    fn denoise(&self, noisy: &LatentGrid, sigma: f64, cond: &ConditionSet) -> Result<LatentGrid> {
        let mut t = Tape::new(&self.params);
        let nv = t.constant(noisy.data.clone().into_dyn());
        let d = self.denoise_var(&mut t, nv, sigma, cond)?;
        let data = t
            .value(d)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        Ok(LatentGrid {
            data,
            ..noisy.clone()
        })
    }
}

pub fn gaussian_like(template: &LatentGrid, rng: &mut ChaCha8Rng) -> LatentGrid {
    use rand_distr::{Distribution, StandardNormal};
    let mut out = template.zeros_like();
    for v in out.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    out
}

/// One deterministic first-order (Euler) update from σ to σ′ < σ. Both
/// halves move jointly through the shared denoiser.
pub fn denoise_step(
    denoiser: &dyn Denoiser,
    x: &LatentGrid,
    sigma: f64,
    sigma_next: f64,
    cond: &ConditionSet,
) -> Result<LatentGrid> {
    if sigma_next >= sigma || sigma <= 0.0 || sigma_next < 0.0 {
        return Err(Error::Contract(format!(
            "denoise step needs sigma > sigma_next >= 0, got {sigma} -> {sigma_next}"
        )));
    }
    let d = denoiser.denoise(x, sigma, cond)?;
    // dx/dσ = (x − D(x;σ))/σ
    let scale = (sigma_next - sigma) / sigma;
    Ok(x.map2(&d, |xi, di| xi + scale * (xi - di)))
}

/// Run the full Euler sampler over a σ ladder ending at 0.
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: &ConditionSet,
    template: &LatentGrid,
    ladder: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid> {
    if ladder.len() < 2 {
        return Err(Error::Config("sigma ladder too short".into()));
    }
    let noise = gaussian_like(template, rng);
    let mut x = noise;
    for v in x.data.iter_mut() {
        *v *= ladder[0];
    }
    for w in ladder.windows(2) {
        x = denoise_step(denoiser, &x, w[0], w[1], cond)?;
    }
    Ok(x)
}

// ---- toy latent derivation and training --------------------------------------

/// Deterministic featurizer from a multi-view set to a latent grid: box
/// downsample each rgb/normal image to the token grid, project 3 channels to
/// `c` with a fixed seeded matrix. Standardization to unit scale is applied
/// by the caller across the dataset.
pub fn derive_latents(set: &MultiViewSet, cfg: &GtaConfig, proj_seed: u64) -> Result<LatentGrid> {
    let (th, tw, c) = (cfg.tokens_h, cfg.tokens_w, cfg.channels);
    if set.n_views() != cfg.n_views {
        return Err(Error::Contract(format!(
            "set has {} views, configuration expects {}",
            set.n_views(),
            cfg.n_views
        )));
    }
    let mut rng = derive(proj_seed, Stream::LatentDerive, 0);
    let proj = Array2::from_shape_fn((3, c), |_| rng.gen_range(-1.0..1.0) / (3f64).sqrt());

    let mut data = Array3::<f64>::zeros((2 * cfg.n_views * cfg.batch, th * tw, c));
    let (h, w) = (set.height, set.width);
    for (v, view) in set.views.iter().enumerate() {
        for (domain, img) in [(0usize, &view.rgb), (1usize, &view.normal)] {
            let row = domain * cfg.n_views * cfg.batch + v * cfg.batch;
            for ty in 0..th {
                for tx in 0..tw {
                    // box average over the source patch
                    let y0 = ty * h / th;
                    let y1 = ((ty + 1) * h / th).max(y0 + 1);
                    let x0 = tx * w / tw;
                    let x1 = ((tx + 1) * w / tw).max(x0 + 1);
                    let mut mean = [0.0f64; 3];
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for ch in 0..3 {
                                mean[ch] += img[[y, x, ch]];
                            }
                        }
                    }
                    for m in mean.iter_mut() {
                        *m /= count;
                    }
                    for ch_out in 0..c {
                        let mut acc = 0.0;
                        for (ch_in, m) in mean.iter().enumerate() {
                            acc += m * proj[[ch_in, ch_out]];
                        }
                        data[[row, ty * tw + tx, ch_out]] = acc;
                    }
                }
            }
        }
    }
    LatentGrid::new(data, cfg.n_views, cfg.batch, th, tw)
}

/// Shift and scale a collection of latents to zero mean, unit variance.
pub fn standardize(latents: &mut [LatentGrid]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut count = 0usize;
    for l in latents.iter() {
        mean += l.data.sum();
        count += l.data.len();
    }
    mean /= count as f64;
    let mut var = 0.0;
    for l in latents.iter() {
        var += l.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    var /= count as f64;
    let std = var.sqrt().max(1e-12);
    for l in latents.iter_mut() {
        l.data.mapv_inplace(|v| (v - mean) / std);
    }
    (mean, std)
}

/// Training curve entry for the toy denoiser.
#[derive(Debug, Clone, Copy)]
pub struct ToyCurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

pub struct ToyTrainReport {
    pub curve: Vec<ToyCurvePoint>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// Steps at which the stage lookup changed, as observed during the run.
    pub observed_stage_switches: Vec<u64>,
}

/// Train the toy denoiser on fixed latents with the staged noise schedule.
/// Validation uses frozen (σ, noise) draws so it measures denoising, not
/// sampling luck.
pub fn train_toy(
    denoiser: &mut GtaDenoiser,
    scenes: &[(LatentGrid, ConditionSet)],
    schedule: &NoiseSchedule,
    steps: u64,
    lr: f64,
    seed: u64,
    eval_every: u64,
) -> Result<ToyTrainReport> {
    schedule.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let sigma_data = denoiser.net.cfg.sigma_data;

    // frozen validation draws
    let val_draws: Vec<(usize, f64, LatentGrid)> = {
        let mut rng = derive(seed, Stream::ValNoise, 0);
        let p = schedule.preconditioner_at(0, sigma_data);
        (0..8)
            .map(|i| {
                let scene = i % scenes.len();
                let sigma = p.sample_sigma(&mut rng);
                let noise = gaussian_like(&scenes[scene].0, &mut rng);
                (scene, sigma, noise)
            })
            .collect()
    };
    let eval = |d: &GtaDenoiser| -> Result<f64> {
        let mut total = 0.0;
        for (scene, sigma, noise) in &val_draws {
            let (l, _, _) =
                d.training_loss_with_noise(&scenes[*scene].0, *sigma, noise, &scenes[*scene].1)?;
            total += l;
        }
        Ok(total / val_draws.len() as f64)
    };

    let mut adam = Adam::new(denoiser.params.len());
    let mut grad_buf = vec![0.0; denoiser.params.len()];
    let initial_val_loss = eval(denoiser)?;
    let mut curve = Vec::new();
    let mut switches = Vec::new();
    let mut last_stage = schedule.lookup(0);

    for step in 0..steps {
        let stage = schedule.lookup(step);
        if stage != last_stage {
            switches.push(step);
            last_stage = stage;
        }
        let p = schedule.preconditioner_at(step, sigma_data);
        let mut rng = derive(seed, Stream::NoiseDraw, step);
        let scene = (step as usize) % scenes.len();
        let sigma = p.sample_sigma(&mut rng);
        let noise = gaussian_like(&scenes[scene].0, &mut rng);

        grad_buf.iter_mut().for_each(|g| *g = 0.0);
        let train_loss = denoiser.training_step_grad(
            &scenes[scene].0,
            sigma,
            &noise,
            &scenes[scene].1,
            &mut grad_buf,
        )?;
        if grad_buf.iter().any(|g| !g.is_finite()) {
            log::warn!("toy step {step}: non-finite gradient, skipped");
            continue;
        }
        adam.step(&mut denoiser.params, &grad_buf, |_| lr);

        if step % eval_every == 0 || step + 1 == steps {
            let val_loss = eval(denoiser)?;
            curve.push(ToyCurvePoint {
                step,
                train_loss,
                val_loss,
                p_mean: stage.0,
                p_std: stage.1,
            });
        }
    }
    let final_val_loss = eval(denoiser)?;
    Ok(ToyTrainReport {
        curve,
        initial_val_loss,
        final_val_loss,
        observed_stage_switches: switches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn small_cfg(nv: usize, b: usize) -> GtaConfig {
        GtaConfig {
            channels: 8,
            n_heads: 2,
            n_blocks: 1,
            y_dim: 4,
            n_views: nv,
            batch: b,
            tokens_h: 2,
            tokens_w: 2,
            sigma_data: 1.0,
        }
    }

    fn random_grid(cfg: &GtaConfig, seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(
            (2 * cfg.n_views * cfg.batch, cfg.tokens_h * cfg.tokens_w, cfg.channels),
            |_| rng.gen_range(-1.0..1.0),
        );
        LatentGrid::new(data, cfg.n_views, cfg.batch, cfg.tokens_h, cfg.tokens_w).unwrap()
    }

    fn cond_for(cfg: &GtaConfig, seed: u64) -> ConditionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionSet {
            azimuths: (0..cfg.n_views)
                .map(|v| 2.0 * std::f64::consts::PI * v as f64 / cfg.n_views as f64)
                .collect(),
            y: Array2::from_shape_fn((2, cfg.y_dim), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn rearrange_round_trip_is_element_exact() {
        let cfg = small_cfg(3, 2);
        let grid = random_grid(&cfg, 1);
        let ps = ParameterSet::empty();
        let mut t = Tape::new(&ps);
        let z = t.constant(grid.data.clone().into_dyn());
        let zt = rearrange_to_temporal(&mut t, z, 3, 2, 2, 2);
        assert_eq!(t.shape(zt), &[2 * 2 * 2 * 2, 3, 8]);
        let back = rearrange_to_spatial(&mut t, zt, 3, 2, 2, 2);
        assert_eq!(t.value(back), t.value(z));
    }

    #[test]
    fn rearrange_places_views_on_the_token_axis() {
        // row (dom, v, b), token p, channel c maps to row (dom, b, p), token v
        let cfg = small_cfg(3, 2);
        let mut grid = random_grid(&cfg, 2);
        // tag one element uniquely
        let r = grid.row_index(1, 2, 1);
        grid.data[[r, 3, 5]] = 77.25;
        let ps = ParameterSet::empty();
        let mut t = Tape::new(&ps);
        let z = t.constant(grid.data.clone().into_dyn());
        let zt = rearrange_to_temporal(&mut t, z, 3, 2, 2, 2);
        // temporal row = ((dom·b + b_i)·h + y)·w + x with (y,x) from token 3
        let tr = ((1 * 2 + 1) * 2 + 1) * 2 + 1;
        assert_eq!(t.value(zt)[[tr, 2, 5]], 77.25);
    }

    #[test]
    fn alignment_attention_matches_naive_loop_oracle() {
        let cfg = small_cfg(2, 1);
        let grid = random_grid(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg.channels;
        let w = AlignmentWeights {
            wq: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wk: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wv: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            n_heads: cfg.n_heads,
        };
        let fast = alignment_attention(&grid, &w).unwrap();
        let slow = naive_alignment_attention(&grid, &w);
        assert!(
            fast.max_abs_diff(&slow) < 1e-6,
            "max diff {}",
            fast.max_abs_diff(&slow)
        );
    }

    /// Direct transcription with explicit loops: project, chunk the rows
    /// into rgb/normal halves, concatenate keys/values on the token axis,
    /// then per-head softmax attention.
    fn naive_alignment_attention(z: &LatentGrid, w: &AlignmentWeights) -> LatentGrid {
        let (rows, tok, c) = (z.rows(), z.d(), z.c());
        let nh = w.n_heads;
        let hd = c / nh;
        let half = rows / 2;
        let project = |m: &Array2<f64>| -> Array3<f64> {
            let mut out = Array3::zeros((rows, tok, c));
            for r in 0..rows {
                for p in 0..tok {
                    for o in 0..c {
                        let mut acc = 0.0;
                        for i in 0..c {
                            acc += z.data[[r, p, i]] * m[[i, o]];
                        }
                        out[[r, p, o]] = acc;
                    }
                }
            }
            out
        };
        let q = project(&w.wq);
        let k = project(&w.wk);
        let v = project(&w.wv);
        let mut out = z.zeros_like();
        for r in 0..rows {
            let pair = r % half;
            // concatenated tokens: (source row, token)
            let kv_rows = [pair, pair + half];
            for head in 0..nh {
                let c0 = head * hd;
                for p in 0..tok {
                    let mut logits = Vec::with_capacity(2 * tok);
                    for &src in &kv_rows {
                        for pk in 0..tok {
                            let mut dot = 0.0;
                            for dch in 0..hd {
                                dot += q[[r, p, c0 + dch]] * k[[src, pk, c0 + dch]];
                            }
                            logits.push(dot / (hd as f64).sqrt());
                        }
                    }
                    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let s: f64 = weights.iter().sum();
                    for wgt in weights.iter_mut() {
                        *wgt /= s;
                    }
                    for dch in 0..hd {
                        let mut acc = 0.0;
                        for (j, &src) in kv_rows.iter().enumerate() {
                            for pk in 0..tok {
                                acc += weights[j * tok + pk] * v[[src, pk, c0 + dch]];
                            }
                        }
                        out.data[[r, p, c0 + dch]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn duplicated_halves_reduce_to_vanilla_self_attention() {
        let cfg = small_cfg(2, 1);
        let mut grid = random_grid(&cfg, 5);
        let half = grid.rows() / 2;
        // make the normal half identical to the rgb half
        for r in 0..half {
            for p in 0..grid.d() {
                for ch in 0..grid.c() {
                    grid.data[[half + r, p, ch]] = grid.data[[r, p, ch]];
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg.channels;
        let w = AlignmentWeights {
            wq: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wk: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wv: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            n_heads: cfg.n_heads,
        };
        let aligned = alignment_attention(&grid, &w).unwrap();

        // vanilla per-row self-attention over the rgb half alone
        let ps = ParameterSet::empty();
        let mut t = Tape::new(&ps);
        let zh = t.constant(
            grid.data
                .slice(ndarray::s![0..half, .., ..])
                .to_owned()
                .into_dyn(),
        );
        let wq = t.constant(w.wq.clone().into_dyn());
        let wk = t.constant(w.wk.clone().into_dyn());
        let wv = t.constant(w.wv.clone().into_dyn());
        let proj = |t: &mut Tape, w: Var| -> Var {
            let z2 = t.reshape(zh, &[half * grid.d(), c]);
            let p = t.matmul(z2, w);
            t.reshape(p, &[half, grid.d(), c])
        };
        let q = proj(&mut t, wq);
        let k = proj(&mut t, wk);
        let v = proj(&mut t, wv);
        let vanilla = mha(&mut t, q, k, v, w.n_heads);
        let vv = t.value(vanilla);
        for r in 0..half {
            for p in 0..grid.d() {
                for ch in 0..c {
                    let expect = vv[[r, p, ch]];
                    assert!((aligned.data[[r, p, ch]] - expect).abs() < 1e-6);
                    assert!((aligned.data[[half + r, p, ch]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn indivisible_rows_are_rejected_with_layout_error() {
        let ps = ParameterSet::empty();
        let mut t = Tape::new(&ps);
        let z = t.constant(ArrayD::zeros(IxDyn(&[3, 4, 8])));
        let w = t.constant(ArrayD::zeros(IxDyn(&[8, 8])));
        match alignment_attention_var(&mut t, z, w, w, w, 2) {
            Err(Error::Contract(msg)) => assert!(msg.contains("halves")),
            other => panic!("expected layout error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn alignment_attention_is_equivariant_to_view_permutation() {
        let cfg = small_cfg(4, 1);
        let grid = random_grid(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = cfg.channels;
        let w = AlignmentWeights {
            wq: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wk: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            wv: Array2::from_shape_fn((c, c), |_| rng.gen_range(-0.5..0.5)),
            n_heads: 2,
        };
        let out = alignment_attention(&grid, &w).unwrap();

        // permute views consistently in both halves
        let perm = [2usize, 0, 3, 1];
        let mut permuted = grid.clone();
        for dom in 0..2 {
            for (v_new, &v_old) in perm.iter().enumerate() {
                for p in 0..grid.d() {
                    for ch in 0..c {
                        permuted.data[[grid.row_index(dom, v_new, 0), p, ch]] =
                            grid.data[[grid.row_index(dom, v_old, 0), p, ch]];
                    }
                }
            }
        }
        let out_p = alignment_attention(&permuted, &w).unwrap();
        for dom in 0..2 {
            for (v_new, &v_old) in perm.iter().enumerate() {
                for p in 0..grid.d() {
                    for ch in 0..c {
                        let a = out_p.data[[grid.row_index(dom, v_new, 0), p, ch]];
                        let b = out.data[[grid.row_index(dom, v_old, 0), p, ch]];
                        assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fresh_blocks_are_the_identity() {
        for (nv, b) in [(2, 1), (4, 2), (16, 1)] {
            let cfg = small_cfg(nv, b);
            let (net, ps) = GtaNet::new(cfg.clone(), 11).unwrap();
            let grid = random_grid(&cfg, 12);
            let cond = cond_for(&cfg, 13);
            let out = net.gta_block(&ps, &grid, &cond, 1.0).unwrap();
            assert_eq!(out.data.shape(), grid.data.shape());
            assert_eq!(out.data, grid.data);
        }
    }

    #[test]
    fn condition_view_mismatch_is_an_error() {
        let cfg = small_cfg(4, 1);
        let (net, ps) = GtaNet::new(cfg.clone(), 14).unwrap();
        let grid = random_grid(&cfg, 15);
        let bad = ConditionSet {
            azimuths: vec![0.0; 3],
            y: Array2::zeros((1, cfg.y_dim)),
        };
        assert!(net.gta_block(&ps, &grid, &bad, 1.0).is_err());
    }

    #[test]
    fn zero_inner_network_gives_pure_skip_denoiser() {
        let cfg = small_cfg(2, 1);
        let den = GtaDenoiser::new(cfg.clone(), 16).unwrap();
        let grid = random_grid(&cfg, 17);
        let cond = cond_for(&cfg, 18);
        let sigma = 0.7;
        let out = den.denoise(&grid, sigma, &cond).unwrap();
        let cs = Preconditioner::default().c_skip(sigma).unwrap();
        for (o, g) in out.data.iter().zip(grid.data.iter()) {
            assert_relative_eq!(*o, cs * g, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_single_step_to_zero_returns_x0() {
        let cfg = small_cfg(2, 1);
        let x0 = random_grid(&cfg, 19);
        let cond = cond_for(&cfg, 20);
        let oracle = OracleDenoiser { x0: x0.clone() };
        let mut noisy = x0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = gaussian_like(&x0, &mut rng);
        noisy = noisy.map2(&noise, |c, n| c + 5.0 * n);
        let out = denoise_step(&oracle, &noisy, 5.0, 0.0, &cond).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-12);
        // reversed sigmas are rejected
        assert!(denoise_step(&oracle, &noisy, 1.0, 2.0, &cond).is_err());
    }

    #[test]
    fn full_sampler_with_oracle_reconstructs_x0() {
        let cfg = small_cfg(2, 1);
        let x0 = random_grid(&cfg, 22);
        let cond = cond_for(&cfg, 23);
        let oracle = OracleDenoiser { x0: x0.clone() };
        let ladder = crate::edm::sigma_ladder(12, 40.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let out = sample(&oracle, &cond, &x0, &ladder, &mut rng).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6, "diff {}", out.max_abs_diff(&x0));
    }

    #[test]
    fn init_training_loss_matches_closed_form() {
        // with D = c_skip·x the per-element expected loss is
        // λ(σ)·((1−c_skip)²·E[x²] + c_skip²·σ²)
        let cfg = small_cfg(2, 1);
        let den = GtaDenoiser::new(cfg.clone(), 25).unwrap();
        let clean = random_grid(&cfg, 26);
        let cond = cond_for(&cfg, 27);
        let sigma = 0.8;
        let p = Preconditioner::default();
        let cs = p.c_skip(sigma).unwrap();
        let x2 = clean.data.iter().map(|v| v * v).sum::<f64>() / clean.data.len() as f64;
        let expected = p.weight(sigma).unwrap() * ((1.0 - cs) * (1.0 - cs) * x2 + cs * cs * sigma * sigma);

        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let trials = 400;
        let mut total = 0.0;
        for _ in 0..trials {
            let noise = gaussian_like(&clean, &mut rng);
            total += den
                .training_loss_with_noise(&clean, sigma, &noise, &cond)
                .unwrap()
                .0;
        }
        let mc = total / trials as f64;
        assert!(
            (mc - expected).abs() / expected < 0.05,
            "mc {mc} vs closed form {expected}"
        );
    }

    #[test]
    fn symmetric_halves_give_identical_per_half_losses() {
        let cfg = small_cfg(2, 1);
        let den = GtaDenoiser::new(cfg.clone(), 29).unwrap();
        let mut clean = random_grid(&cfg, 30);
        let half = clean.rows() / 2;
        for r in 0..half {
            for p in 0..clean.d() {
                for ch in 0..clean.c() {
                    clean.data[[half + r, p, ch]] = clean.data[[r, p, ch]];
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut noise = gaussian_like(&clean, &mut rng);
        for r in 0..half {
            for p in 0..clean.d() {
                for ch in 0..clean.c() {
                    noise.data[[half + r, p, ch]] = noise.data[[r, p, ch]];
                }
            }
        }
        let cond = cond_for(&cfg, 32);
        let (total, rgb, nrm) = den
            .training_loss_with_noise(&clean, 1.3, &noise, &cond)
            .unwrap();
        assert_relative_eq!(rgb, nrm, max_relative = 1e-12);
        assert!(total >= 0.0 && rgb >= 0.0);
    }

    #[test]
    fn latents_standardize_to_unit_scale() {
        let cfg = GtaConfig {
            n_views: 4,
            ..small_cfg(4, 1)
        };
        let scene = crate::synth::AnalyticScene::preset("sphere").unwrap();
        let (set, _) = crate::synth::make_dataset(&scene, 4, 16, 0.0, None, 3).unwrap();
        let mut latents = vec![derive_latents(&set, &cfg, 7).unwrap()];
        let (_, _) = standardize(&mut latents);
        let n = latents[0].data.len() as f64;
        let mean = latents[0].data.sum() / n;
        let var = latents[0].data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert_relative_eq!(var, 1.0, epsilon = 1e-9);
    }
}
