//! Flat parameter storage shared by the scene field, pose refinement, and
//! the toy denoiser, plus the Adam optimizer that updates it.
//!
//! All learnable scalars live in one `Vec<f64>`; named groups carve it into
//! shaped views. Gradients are accumulated into a plain `&mut [f64]` of the
//! same length, which keeps gradient reduction across ray chunks a sequential,
//! deterministic `+=`.

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    /// Per-group learning-rate multiplier applied on top of the base rate.
    pub lr_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ParameterSet {
    data: Vec<f64>,
    groups: Vec<ParamGroup>,
}

/// Initialization recipe for a parameter group.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    Normal(f64),
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Default)]
pub struct ParamBuilder {
    data: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        lr_scale: f64,
        rng: &mut R,
    ) -> GroupId {
        assert!(
            !self.groups.iter().any(|g| g.name == name),
            "duplicate parameter group {name}"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat(0.0).take(len)),
            Init::Const(c) => self.data.extend(std::iter::repeat(c).take(len)),
            Init::Uniform(lo, hi) => self
                .data
                .extend((0..len).map(|_| rng.gen_range(lo..hi))),
            Init::Normal(std) => {
                use rand_distr::{Distribution, Normal};
                let d = Normal::new(0.0, std).expect("normal init");
                self.data.extend((0..len).map(|_| d.sample(rng)));
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                self.data.extend((0..len).map(|_| rng.gen_range(-a..a)));
            }
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            offset,
            len,
            shape: shape.to_vec(),
            lr_scale,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn build(self) -> ParameterSet {
        ParameterSet {
            data: self.data,
            groups: self.groups,
        }
    }
}

/// Handle to a parameter group inside a `ParameterSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupId(pub usize);

impl ParameterSet {
    pub fn empty() -> Self {
        ParameterSet {
            data: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn group_by_name(&self, name: &str) -> Option<GroupId> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .map(GroupId)
    }

    pub fn slice(&self, id: GroupId) -> &[f64] {
        let g = &self.groups[id.0];
        &self.data[g.offset..g.offset + g.len]
    }

    pub fn slice_mut(&mut self, id: GroupId) -> &mut [f64] {
        let g = self.groups[id.0].clone();
        &mut self.data[g.offset..g.offset + g.len]
    }

    pub fn view(&self, id: GroupId) -> ArrayViewD<'_, f64> {
        let g = &self.groups[id.0];
        ArrayViewD::from_shape(IxDyn(&g.shape), self.slice(id)).expect("group shape")
    }

    pub fn to_array(&self, id: GroupId) -> ArrayD<f64> {
        self.view(id).to_owned()
    }

    /// Flat read of every learnable scalar.
    pub fn read(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Flat write; the source must match the parameter count exactly.
    pub fn write(&mut self, values: &[f64]) {
        assert_eq!(
            values.len(),
            self.data.len(),
            "parameter count mismatch on write"
        );
        self.data.copy_from_slice(values);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Adam with per-group learning-rate scaling. `step` applies one update from
/// an externally accumulated gradient buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            // Hash-grid gradients are sparse and small; a tiny eps keeps the
            // effective step from collapsing on rarely touched entries.
            eps: 1e-15,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One optimizer step. `group_lr` maps each group to its base learning
    /// rate for this step (already including any schedule); the group's own
    /// `lr_scale` is applied on top.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &[f64],
        group_lr: impl Fn(&ParamGroup) -> f64,
    ) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let groups = params.groups.clone();
        let data = params.data_mut();
        for g in &groups {
            let lr = group_lr(&g) * g.lr_scale;
            for i in g.offset..g.offset + g.len {
                let grad = grads[i];
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                // Untouched-and-never-touched entries stay exactly zero; skip
                // them so sparse hash-table traffic stays proportional to use.
                if grad == 0.0 && *m == 0.0 && *v == 0.0 {
                    continue;
                }
                *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
                *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
                let mh = *m / bc1;
                let vh = *v / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, t: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn parameter_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = ParamBuilder::new();
        b.add("a", &[3, 4], Init::Normal(0.5), 1.0, &mut rng);
        b.add("b", &[5], Init::Uniform(-1.0, 1.0), 1.0, &mut rng);
        let mut ps = b.build();
        let before = ps.read();
        ps.write(&before);
        assert_eq!(ps.read(), before);
        assert_eq!(ps.len(), 17);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new();
        let g = b.add("w", &[2], Init::Const(1.0), 1.0, &mut rng);
        let mut ps = b.build();
        let mut adam = Adam::new(ps.len());
        adam.step(&mut ps, &[0.5, -0.5], |_| 0.1);
        let w = ps.slice(g);
        assert!(w[0] < 1.0 && w[1] > 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new();
        b.add("w", &[4], Init::Normal(1.0), 1.0, &mut rng);
        let mut ps = b.build();
        let before = ps.read();
        let mut adam = Adam::new(ps.len());
        adam.step(&mut ps, &[0.0; 4], |_| 0.1);
        assert_eq!(ps.read(), before);
    }
}
