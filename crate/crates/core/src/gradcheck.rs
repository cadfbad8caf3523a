//! Central finite-difference utilities shared by the gradient test suites.

use ndarray::ArrayD;

use crate::params::ParameterSet;

/// Central differences of `f` with respect to selected parameter entries.
pub fn fd_param_grads(
    ps: &mut ParameterSet,
    idxs: &[usize],
    h: f64,
    mut f: impl FnMut(&ParameterSet) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let orig = ps.data()[i];
        ps.data_mut()[i] = orig + h;
        let fp = f(ps);
        ps.data_mut()[i] = orig - h;
        let fm = f(ps);
        ps.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Central differences of a scalar function of a dense array input.
pub fn fd_input_grad(
    x: &ArrayD<f64>,
    h: f64,
    f: impl Fn(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative error between two gradient vectors. Entries are compared
/// as |a−b| / max(floor, |a|, |b|); the floor keeps near-zero entries from
/// dominating with meaningless ratios.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / floor.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Relative error of two scalars with the same floor convention.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / floor.max(a.abs()).max(b.abs())
}
