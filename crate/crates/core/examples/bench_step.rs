//! Rough per-iteration cost probe for the fusion loop.

use std::time::Instant;

use viewfuse_core::fusion::{train_step, FusionConfig, FusionModel, TrainState};
use viewfuse_core::synth::{make_dataset, AnalyticScene};

fn main() {
    let scene = AnalyticScene::preset("spherebox").unwrap();
    let t0 = Instant::now();
    let (dataset, _) = make_dataset(&scene, 16, 128, 0.0, None, 1).unwrap();
    println!("dataset render: {:.2}s", t0.elapsed().as_secs_f64());

    let cfg = FusionConfig::default();
    let usable = dataset.validate().unwrap();
    let mut model = FusionModel::new(cfg.field.clone(), dataset.n_views(), cfg.seed).unwrap();
    println!("params: {}", model.params.len());
    let mut state = TrainState::new(&model);

    let t1 = Instant::now();
    let n = 60;
    for _ in 0..n {
        let b = train_step(&mut model, &mut state, &dataset, &usable, &cfg).unwrap();
        if state.iteration % 5 == 0 {
            println!("iter {} total {:.4}", state.iteration, b.total);
        }
    }
    let per = t1.elapsed().as_secs_f64() / n as f64;
    println!(
        "{} iters in {:.2}s -> {:.3}s/iter; {:.1} min for {} iters",
        n,
        t1.elapsed().as_secs_f64(),
        per,
        per * cfg.iterations as f64 / 60.0,
        cfg.iterations
    );
}
