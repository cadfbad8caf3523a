//! Component-level timing: hash grid, geometry net with/without Jacobian,
//! full render, optimizer overhead.

use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewfuse_core::field::{FieldConfig, SceneField};
use viewfuse_core::tape::Tape;

fn main() {
    let (field, ps) = SceneField::new(FieldConfig::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 24_832; // 256 rays x 97 samples
    let x = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen_range(-0.9..0.9));

    let time = |label: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            f();
        }
        println!("{label}: {:.3}s", t0.elapsed().as_secs_f64() / reps as f64);
    };

    time("sdf fwd (no jac)", &mut || {
        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let out = field.sdf_batch(&mut t, xv, false);
        std::hint::black_box(t.value(out.sdf).sum());
    });

    time("sdf fwd (jac)", &mut || {
        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let out = field.sdf_batch(&mut t, xv, true);
        std::hint::black_box(t.value(out.sdf).sum());
    });

    time("sdf fwd+bwd (jac)", &mut || {
        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let out = field.sdf_batch(&mut t, xv, true);
        let g = out.grad.unwrap();
        let gs = t.sum_all(g);
        let ss = t.sum_all(out.sdf);
        let l = t.add(gs, ss);
        let mut pg = vec![0.0; ps.len()];
        t.backward(l, &mut pg);
        std::hint::black_box(pg[0]);
    });

    time("full pipeline fwd+bwd (jac+color+conflict)", &mut || {
        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let out = field.sdf_batch(&mut t, xv, true);
        let g = out.grad.unwrap();
        let gn = t.norm_axis(g, 1);
        let gn = t.max_scalar(gn, 1e-12);
        let nrm = t.div(g, gn);
        let c = field.color_batch(&mut t, out.feat, xv, nrm, nrm);
        let views = vec![0usize; n];
        let h = field
            .conflict_batch(&mut t, c, out.feat, nrm, &views, xv)
            .unwrap();
        let cs = t.sum_all(c);
        let hs = t.sum_all(h);
        let ss = t.sum_all(out.sdf);
        let l1 = t.add(cs, hs);
        let l = t.add(l1, ss);
        let mut pg = vec![0.0; ps.len()];
        t.backward(l, &mut pg);
        std::hint::black_box(pg[0]);
    });

    let grads = vec![0.0f64; ps.len()];
    let mut ps2 = ps.clone();
    let mut adam = viewfuse_core::params::Adam::new(ps.len());
    time("adam step (all-zero grads)", &mut || {
        adam.step(&mut ps2, &grads, |_| 1e-2);
    });
    let mut buf = vec![1.0f64; ps.len()];
    time("zero grad buffer", &mut || {
        buf.iter_mut().for_each(|g| *g = 0.0);
        std::hint::black_box(buf[17]);
    });
}
