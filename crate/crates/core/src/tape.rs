//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A `Tape` records eagerly evaluated operations; `backward` walks the record
//! in reverse and accumulates cotangents. Parameter leaves are bound to
//! groups of a [`ParameterSet`](crate::params::ParameterSet) and their
//! gradients land directly in a caller-supplied flat buffer, so gradient
//! accumulation across batches is a plain sequential `+=` and therefore
//! deterministic.
//!
//! The op set is the minimum the renderer, the fusion losses, and the latent
//! transformer need. Spatial SDF gradients are built *into* the graph
//! (forward-mode Jacobians expressed through these ops plus the dedicated
//! hash-grid node), which is what makes losses on `∇s` differentiable with
//! respect to parameters without a second-order engine.

use std::sync::Arc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::hashgrid::{self, HashGridCtx};
use crate::params::{GroupId, ParameterSet};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(GroupId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    GatherRows(Var, Arc<Vec<i64>>),
    Embed(GroupId, Arc<Vec<usize>>),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var, f64),
    SoftplusPrime(Var, f64),
    Relu(Var),
    MaxScalar(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    ExclusiveCumprod(Var),
    Detach,
    HashGrid(Var, Arc<HashGridCtx>),
    RotCoefA(Var),
    RotCoefB(Var),
    ScatterRows(Var, Arc<Vec<i64>>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

/// Per-node cotangents produced by [`Tape::backward`]; leaf gradients for
/// non-parameter inputs (e.g. positions) are read from here.
pub struct NodeGrads(Vec<Option<ArrayD<f64>>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.0[v.0].as_ref()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a cotangent back down to `shape` (inverse of broadcasting).
fn unbroadcast(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] > 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary_bcast(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// sin(sqrt(u))/sqrt(u) and its derivative in u, series-stabilized near 0.
/// Used to build Rodrigues rotations that stay differentiable at zero angle.
fn rot_coef_a(u: f64) -> (f64, f64) {
    if u < 1e-4 {
        (1.0 - u / 6.0 + u * u / 120.0, -1.0 / 6.0 + u / 60.0)
    } else {
        let s = u.sqrt();
        let a = s.sin() / s;
        let da = (s * s.cos() - s.sin()) / (2.0 * s * s * s);
        (a, da)
    }
}

/// (1 - cos(sqrt(u)))/u and its derivative in u.
fn rot_coef_b(u: f64) -> (f64, f64) {
    if u < 1e-4 {
        (0.5 - u / 24.0 + u * u / 720.0, -1.0 / 24.0 + u / 360.0)
    } else {
        let s = u.sqrt();
        let b = (1.0 - s.cos()) / u;
        let db = (0.5 * s * s.sin() - 1.0 + s.cos()) / (u * u);
        (b, db)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, a: ArrayD<f64>) -> Var {
        let a = if a.is_standard_layout() {
            a
        } else {
            a.as_standard_layout().to_owned()
        };
        self.push(a, Op::Const)
    }

    pub fn constant2(&mut self, a: ndarray::Array2<f64>) -> Var {
        self.constant(a.into_dyn())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Leaf bound to a parameter group; backward lands in the flat buffer.
    pub fn param(&mut self, g: GroupId) -> Var {
        let value = self.params.to_array(g);
        self.push(value, Op::Param(g))
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner mismatch");
        let (nb, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((nb, m, n));
        for i in 0..nb {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), Op::Bmm(a, b))
    }

    pub fn swap_axes(&mut self, a: Var, ax0: usize, ax1: usize) -> Var {
        let mut v = self.value(a).view();
        v.swap_axes(ax0, ax1);
        let v = v.as_standard_layout().to_owned();
        self.push(v, Op::SwapAxes(a, ax0, ax1))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape numel mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Slice(a, axis, start, end))
    }

    /// Gather along axis 0; index -1 yields a zero slice (used for shifted
    /// temporal convolutions with zero padding).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<i64>>) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        shape[0] = idx.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (j, &i) in idx.iter().enumerate() {
            if i >= 0 {
                out.index_axis_mut(Axis(0), j)
                    .assign(&av.index_axis(Axis(0), i as usize));
            }
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Inverse of `gather_rows`: row `j` of the input lands on row `idx[j]`
    /// of a zeroed output with `n_rows` rows (duplicates accumulate,
    /// index -1 drops the row).
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<i64>>, n_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape()[0], idx.len(), "scatter index count");
        let mut shape = av.shape().to_vec();
        shape[0] = n_rows;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (j, &i) in idx.iter().enumerate() {
            if i >= 0 {
                let mut row = out.index_axis_mut(Axis(0), i as usize);
                row += &av.index_axis(Axis(0), j);
            }
        }
        self.push(out, Op::ScatterRows(a, idx))
    }

    /// Row lookup in a parameter group viewed as an `(n, dim)` table.
    pub fn embed(&mut self, g: GroupId, idx: Arc<Vec<usize>>) -> Var {
        let group = self.params.group(g);
        assert_eq!(group.shape.len(), 2, "embed expects a 2-d group");
        let (n, dim) = (group.shape[0], group.shape[1]);
        let table = self.params.slice(g);
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), dim));
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < n, "embed index out of range");
            out.row_mut(j)
                .assign(&ndarray::ArrayView1::from(&table[i * dim..(i + 1) * dim]));
        }
        self.push(out.into_dyn(), Op::Embed(g, idx))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Square root with a clamped backward (`g / (2·max(y, 1e-12))`) so that
    /// guarded norms at exactly zero stay finite.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| softplus(x, beta));
        self.push(v, Op::Softplus(a, beta))
    }

    /// d/dx softplus_beta(x) = sigmoid(beta·x), as a graph value so Jacobian
    /// propagation through activations is itself differentiable.
    pub fn softplus_prime(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| sigmoid(beta * x));
        self.push(v, Op::SoftplusPrime(a, beta))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(v, Op::MaxScalar(a, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let v = self
            .value(a)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .mapv(|x| x / n);
        self.push(v, Op::MeanAxis(a, axis))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let mut s = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in lane.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    /// `out[i, k] = prod_{j < k} a[i, j]` on a 2-d input (transmittance).
    pub fn exclusive_cumprod(&mut self, a: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let (n, k) = (av.shape()[0], av.shape()[1]);
        let mut out = ndarray::Array2::<f64>::zeros((n, k));
        for i in 0..n {
            let mut acc = 1.0;
            for j in 0..k {
                out[[i, j]] = acc;
                acc *= av[[i, j]];
            }
        }
        self.push(out.into_dyn(), Op::ExclusiveCumprod(a))
    }

    /// Value pass-through that blocks gradients.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    /// Multiresolution hash-grid encoding of positions `(N, 3)`; see
    /// [`crate::hashgrid`] for the output layout.
    pub fn hashgrid(&mut self, x: Var, ctx: Arc<HashGridCtx>) -> Var {
        let v = hashgrid::forward(&ctx, self.value(x), self.params);
        self.push(v, Op::HashGrid(x, ctx))
    }

    pub fn rot_coef_a(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|u| rot_coef_a(u).0);
        self.push(v, Op::RotCoefA(a))
    }

    pub fn rot_coef_b(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|u| rot_coef_b(u).0);
        self.push(v, Op::RotCoefB(a))
    }

    // ---- composites ----------------------------------------------------

    /// Row-wise linear layer `x·W + b` with `W` of shape (in, out), `b` (out,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Euclidean norm along `axis` (kept), guarded for zero vectors.
    pub fn norm_axis(&mut self, a: Var, axis: usize) -> Var {
        let sq = self.square(a);
        let s = self.sum_axis(sq, axis);
        self.sqrt(s)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter-bound gradients are
    /// accumulated (`+=`) into `param_grads`, which must match the parameter
    /// count of the bound `ParameterSet`.
    pub fn backward(&self, loss: Var, param_grads: &mut [f64]) -> NodeGrads {
        assert_eq!(param_grads.len(), self.params.len(), "grad buffer size");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(IxDyn(self.value(loss).shape())));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                // Leaf gradients are kept so callers can read input cotangents;
                // interior cotangents are consumed to bound peak memory.
                Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Param(gid) => {
                    let group = self.params.group(*gid);
                    for (dst, src) in param_grads[group.offset..group.offset + group.len]
                        .iter_mut()
                        .zip(g.iter())
                    {
                        *dst += *src;
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, unbroadcast(g.clone(), self.shape(*a)));
                    self.accum(&mut grads, *b, unbroadcast(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, unbroadcast(g.clone(), self.shape(*a)));
                    self.accum(&mut grads, *b, unbroadcast(g.mapv(|x| -x), self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = binary_bcast(&g, self.value(*b), |x, y| x * y);
                    let gb = binary_bcast(&g, self.value(*a), |x, y| x * y);
                    self.accum(&mut grads, *a, unbroadcast(ga, self.shape(*a)));
                    self.accum(&mut grads, *b, unbroadcast(gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let ga = binary_bcast(&g, self.value(*b), |x, y| x / y);
                    let gb_full = {
                        let va = self.value(*a);
                        let vb = self.value(*b);
                        let shape = broadcast_shape(va.shape(), vb.shape());
                        let av = va.broadcast(IxDyn(&shape)).unwrap();
                        let bv = vb.broadcast(IxDyn(&shape)).unwrap();
                        let mut out = ArrayD::zeros(IxDyn(&shape));
                        ndarray::Zip::from(&mut out)
                            .and(&g)
                            .and(&av)
                            .and(&bv)
                            .for_each(|o, &gg, &x, &y| *o = -gg * x / (y * y));
                        out
                    };
                    self.accum(&mut grads, *a, unbroadcast(ga, self.shape(*a)));
                    self.accum(&mut grads, *b, unbroadcast(gb_full, self.shape(*b)));
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                    let ga = g2.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&g2).into_dyn();
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Bmm(a, b) => {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                    let nb = av.shape()[0];
                    let mut ga = ndarray::Array3::<f64>::zeros((nb, av.shape()[1], av.shape()[2]));
                    let mut gb = ndarray::Array3::<f64>::zeros((nb, bv.shape()[1], bv.shape()[2]));
                    for i in 0..nb {
                        let gi = g3.index_axis(Axis(0), i);
                        ga.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                        gb.index_axis_mut(Axis(0), i)
                            .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                    }
                    self.accum(&mut grads, *a, ga.into_dyn());
                    self.accum(&mut grads, *b, gb.into_dyn());
                }
                Op::SwapAxes(a, ax0, ax1) => {
                    let mut gv = g.view();
                    gv.swap_axes(*ax0, *ax1);
                    self.accum(&mut grads, *a, gv.as_standard_layout().to_owned());
                }
                Op::Reshape(a) => {
                    let ga = g
                        .into_shape_with_order(IxDyn(self.shape(*a)))
                        .expect("reshape backward");
                    self.accum(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let extent = self.shape(*p)[*axis];
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + extent))
                            .as_standard_layout()
                            .to_owned();
                        self.accum(&mut grads, *p, gp);
                        start += extent;
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let mut ga = ArrayD::<f64>::zeros(IxDyn(self.shape(*a)));
                    ga.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                        .assign(&g);
                    self.accum(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = ArrayD::<f64>::zeros(IxDyn(self.shape(*a)));
                    for (j, &i) in idx.iter().enumerate() {
                        if i >= 0 {
                            let mut row = ga.index_axis_mut(Axis(0), i as usize);
                            row += &g.index_axis(Axis(0), j);
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::Embed(gid, idx) => {
                    let group = self.params.group(*gid);
                    let dim = group.shape[1];
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    for (j, &i) in idx.iter().enumerate() {
                        let base = group.offset + i * dim;
                        for d in 0..dim {
                            param_grads[base + d] += g2[[j, d]];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::AddScalar(a) => {
                    self.accum(&mut grads, *a, g);
                }
                Op::Neg(a) => {
                    self.accum(&mut grads, *a, g.mapv(|x| -x));
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[id].value;
                    self.accum(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(y)
                        .for_each(|gg, &yy| *gg /= 2.0 * yy.max(1e-12));
                    self.accum(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &x| *gg *= 2.0 * x);
                    self.accum(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &x| *gg *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&self.nodes[id].value)
                        .for_each(|gg, &y| *gg *= y * (1.0 - y));
                    self.accum(&mut grads, *a, ga);
                }
                Op::Softplus(a, beta) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &x| *gg *= sigmoid(*beta * x));
                    self.accum(&mut grads, *a, ga);
                }
                Op::SoftplusPrime(a, beta) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&self.nodes[id].value)
                        .for_each(|gg, &y| *gg *= *beta * y * (1.0 - y));
                    self.accum(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &x| *gg *= if x > 0.0 { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, ga);
                }
                Op::MaxScalar(a, c) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &x| *gg *= if x > *c { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g[[0]];
                    self.accum(&mut grads, *a, ArrayD::from_elem(IxDyn(self.shape(*a)), gv));
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len().max(1) as f64;
                    let gv = g[[0]] / n;
                    self.accum(&mut grads, *a, ArrayD::from_elem(IxDyn(self.shape(*a)), gv));
                }
                Op::SumAxis(a, _axis) => {
                    let ga = g
                        .broadcast(IxDyn(self.shape(*a)))
                        .expect("sum_axis backward")
                        .to_owned();
                    self.accum(&mut grads, *a, ga);
                }
                Op::MeanAxis(a, axis) => {
                    let n = self.shape(*a)[*axis] as f64;
                    let ga = g
                        .broadcast(IxDyn(self.shape(*a)))
                        .expect("mean_axis backward")
                        .mapv(|x| x / n);
                    self.accum(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[id].value;
                    let last = y.ndim() - 1;
                    let mut ga = g;
                    // g_in = y ⊙ (g − Σ g⊙y) per lane
                    for (mut glane, ylane) in ga
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                    {
                        let dot: f64 = glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum();
                        for (gg, &yy) in glane.iter_mut().zip(ylane.iter()) {
                            *gg = yy * (*gg - dot);
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::ExclusiveCumprod(a) => {
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let yv = self.nodes[id]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let mut ga = ndarray::Array2::<f64>::zeros((n, k));
                    // da[j] = out[j] · S[j], S[j] = g[j+1] + a[j+1]·S[j+1]
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in (0..k).rev() {
                            if j + 1 < k {
                                s = g2[[i, j + 1]] + av[[i, j + 1]] * s;
                            }
                            ga[[i, j]] = yv[[i, j]] * s;
                        }
                    }
                    self.accum(&mut grads, *a, ga.into_dyn());
                }
                Op::Detach => {}
                Op::HashGrid(x, ctx) => {
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(self.shape(*x)));
                    hashgrid::backward(ctx, self.value(*x), &g, self.params, param_grads, &mut gx);
                    self.accum(&mut grads, *x, gx);
                }
                Op::RotCoefA(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &u| *gg *= rot_coef_a(u).1);
                    self.accum(&mut grads, *a, ga);
                }
                Op::RotCoefB(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gg, &u| *gg *= rot_coef_b(u).1);
                    self.accum(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, idx) => {
                    let mut shape = self.shape(*a).to_vec();
                    shape[0] = idx.len();
                    let mut ga = ArrayD::<f64>::zeros(IxDyn(&shape));
                    for (j, &i) in idx.iter().enumerate() {
                        if i >= 0 {
                            ga.index_axis_mut(Axis(0), j)
                                .assign(&g.index_axis(Axis(0), i as usize));
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
            }
        }
        NodeGrads(grads)
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        debug_assert_eq!(g.shape(), self.shape(v), "cotangent shape mismatch");
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_input_grad, max_rel_err};
    use crate::params::{Init, ParamBuilder};
    use approx::assert_relative_eq;
    use ndarray::{arr2, ArrayD};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-check gradients of `build` with respect to its single input array.
    fn check_input_grad(
        shape: &[usize],
        build: impl Fn(&mut Tape, Var) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let ps = ParameterSet::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng);

        let eval = |x: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new(&ps);
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            let l = t.sum_all(y);
            t.value(l)[[0]]
        };

        let mut t = Tape::new(&ps);
        let xv = t.constant(x0.clone());
        let y = build(&mut t, xv);
        let l = t.sum_all(y);
        let mut pg = vec![];
        let grads = t.backward(l, &mut pg);
        let ga = grads.get(xv).expect("input grad").clone();

        let gfd = fd_input_grad(&x0, 1e-5, eval);
        let err = max_rel_err(ga.as_slice().unwrap(), gfd.as_slice().unwrap(), 1e-6);
        assert!(err < tol, "rel err {err} exceeds {tol}");
    }

    #[test]
    fn elementwise_op_gradients_match_fd() {
        check_input_grad(&[3, 4], |t, x| t.exp(x), 1, 1e-6);
        check_input_grad(&[3, 4], |t, x| t.sigmoid(x), 2, 1e-6);
        check_input_grad(&[3, 4], |t, x| t.softplus(x, 3.0), 3, 1e-6);
        check_input_grad(&[3, 4], |t, x| t.softplus_prime(x, 3.0), 4, 1e-6);
        check_input_grad(&[3, 4], |t, x| t.square(x), 5, 1e-6);
        check_input_grad(
            &[3, 4],
            |t, x| {
                let y = t.square(x);
                let y = t.add_scalar(y, 0.3);
                t.sqrt(y)
            },
            6,
            1e-6,
        );
        check_input_grad(&[2, 5], |t, x| t.scale(x, -2.5), 7, 1e-6);
        check_input_grad(&[2, 5], |t, x| t.neg(x), 8, 1e-6);
    }

    #[test]
    fn broadcasting_binary_gradients_match_fd() {
        check_input_grad(
            &[4, 3],
            |t, x| {
                let b = t.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3]), |ix| 0.3 + ix[1] as f64));
                let y = t.mul(x, b);
                let c = t.constant(ArrayD::from_shape_fn(IxDyn(&[4, 1]), |ix| 1.0 + ix[0] as f64));
                t.div(y, c)
            },
            10,
            1e-6,
        );
        check_input_grad(
            &[4, 1],
            |t, x| {
                let b = t.constant(ArrayD::from_shape_fn(IxDyn(&[4, 5]), |ix| {
                    0.1 * (ix[0] * 5 + ix[1]) as f64 + 0.4
                }));
                t.sub(b, x)
            },
            11,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bmm_gradients_match_fd() {
        check_input_grad(
            &[4, 3],
            |t, x| {
                let w = t.constant(ArrayD::from_shape_fn(IxDyn(&[3, 6]), |ix| {
                    ((ix[0] + 2 * ix[1]) as f64).sin()
                }));
                t.matmul(x, w)
            },
            20,
            1e-6,
        );
        check_input_grad(
            &[2, 3, 4],
            |t, x| {
                let w = t.constant(ArrayD::from_shape_fn(IxDyn(&[2, 4, 5]), |ix| {
                    ((ix[0] + ix[1] + 3 * ix[2]) as f64).cos()
                }));
                t.bmm(x, w)
            },
            21,
            1e-6,
        );
    }

    #[test]
    fn reduction_and_softmax_gradients_match_fd() {
        check_input_grad(&[3, 5], |t, x| t.mean_axis(x, 1), 30, 1e-6);
        check_input_grad(&[3, 5], |t, x| t.sum_axis(x, 0), 31, 1e-6);
        check_input_grad(
            &[2, 4],
            |t, x| {
                let s = t.softmax(x);
                t.square(s)
            },
            32,
            1e-6,
        );
    }

    #[test]
    fn structural_op_gradients_match_fd() {
        check_input_grad(
            &[4, 6],
            |t, x| {
                let a = t.slice_axis(x, 1, 0, 2);
                let b = t.slice_axis(x, 1, 2, 6);
                let c = t.concat(&[b, a], 1);
                t.swap_axes(c, 0, 1)
            },
            40,
            1e-6,
        );
        check_input_grad(
            &[5, 3],
            |t, x| {
                let idx = Arc::new(vec![2i64, 0, -1, 4, 2]);
                t.gather_rows(x, idx)
            },
            41,
            1e-6,
        );
        check_input_grad(&[3, 4], |t, x| t.reshape(x, &[2, 6]), 42, 1e-6);
        check_input_grad(
            &[5, 3],
            |t, x| {
                // scatter with a duplicate and a dropped row, then square so
                // accumulation order matters to the value
                let idx = Arc::new(vec![1i64, 4, 1, -1, 0]);
                let s = t.scatter_rows(x, idx, 6);
                t.square(s)
            },
            43,
            1e-6,
        );
    }

    #[test]
    fn cumprod_gradient_matches_fd() {
        // keep inputs away from 0 so products stay well-conditioned
        check_input_grad(
            &[3, 6],
            |t, x| {
                let y = t.sigmoid(x);
                let y = t.scale(y, 0.8);
                let y = t.add_scalar(y, 0.1);
                t.exclusive_cumprod(y)
            },
            50,
            1e-5,
        );
    }

    #[test]
    fn rot_coef_gradients_match_fd_incl_near_zero() {
        check_input_grad(
            &[4, 1],
            |t, x| {
                let u = t.square(x);
                let a = t.rot_coef_a(u);
                let b = t.rot_coef_b(u);
                t.mul(a, b)
            },
            60,
            1e-5,
        );
        // series matches the closed form at the same u just above the switch
        let u = 1.01e-4;
        let (a_closed, _) = rot_coef_a(u);
        let a_series = 1.0 - u / 6.0 + u * u / 120.0;
        assert_relative_eq!(a_closed, a_series, max_relative = 1e-12);
        let (b_closed, _) = rot_coef_b(u);
        let b_series = 0.5 - u / 24.0 + u * u / 720.0;
        assert_relative_eq!(b_closed, b_series, max_relative = 1e-10);
    }

    #[test]
    fn param_and_embed_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut b = ParamBuilder::new();
        let w = b.add("w", &[3, 4], Init::Normal(0.6), 1.0, &mut rng);
        let table = b.add("emb", &[5, 2], Init::Normal(0.6), 1.0, &mut rng);
        let mut ps = b.build();

        let eval = |ps: &ParameterSet| -> f64 {
            let mut t = Tape::new(ps);
            let wv = t.param(w);
            let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| {
                0.3 * (ix[0] as f64) - 0.2 * (ix[1] as f64) + 0.5
            }));
            let y = t.matmul(x, wv);
            let e = t.embed(table, Arc::new(vec![1, 4, 1, 3]));
            let es = t.sum_all(e);
            let ys = t.sum_all(y);
            let sq = t.square(ys);
            let l = t.add(sq, es);
            t.value(l)[[0]]
        };

        let mut pg = vec![0.0; ps.len()];
        {
            let mut t = Tape::new(&ps);
            let wv = t.param(w);
            let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| {
                0.3 * (ix[0] as f64) - 0.2 * (ix[1] as f64) + 0.5
            }));
            let y = t.matmul(x, wv);
            let e = t.embed(table, Arc::new(vec![1, 4, 1, 3]));
            let es = t.sum_all(e);
            let ys = t.sum_all(y);
            let sq = t.square(ys);
            let l = t.add(sq, es);
            t.backward(l, &mut pg);
        }

        let idxs: Vec<usize> = (0..ps.len()).collect();
        let fd = crate::gradcheck::fd_param_grads(&mut ps, &idxs, 1e-5, |p| eval(p));
        let err = max_rel_err(&pg, &fd, 1e-7);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let ps = ParameterSet::empty();
        let mut t = Tape::new(&ps);
        let x = t.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let d = t.detach(x);
        let y = t.square(d);
        let l = t.sum_all(y);
        let mut pg = vec![];
        let grads = t.backward(l, &mut pg);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn batch_rows_are_independent_of_batch_size() {
        // row i of x·W must be bit-identical whether computed in a batch of 8
        // or alone; the renderer's batch-splitting invariance rests on this
        let ps = ParameterSet::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = randn(&[8, 16], &mut rng);
        let w = randn(&[16, 12], &mut rng);

        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let prod = t.matmul(xv, wv);
        let full = t.value(prod).clone();

        for i in 0..8 {
            let mut t2 = Tape::new(&ps);
            let row = x
                .index_axis(Axis(0), i)
                .to_owned()
                .insert_axis(Axis(0));
            let rv = t2.constant(row.into_dyn());
            let wv2 = t2.constant(w.clone());
            let prod2 = t2.matmul(rv, wv2);
            let one = t2.value(prod2).clone();
            for j in 0..12 {
                assert_eq!(full[[i, j]].to_bits(), one[[0, j]].to_bits());
            }
        }
    }
}
