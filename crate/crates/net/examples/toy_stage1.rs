use hacseg_core::augment::CorruptionSpec;
use hacseg_core::synth::make_synthetic_dataset;
use hacseg_net::trainer::*;
use hacseg_net::{HacConfig, ParamStore};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let frames: Vec<_> = make_synthetic_dataset(16, 64, 8).into_iter().map(|s| s.image).collect();
    let p = ParamStore::init(&HacConfig::toy(), 42).unwrap();
    let spec = CorruptionSpec::default();
    let t = std::time::Instant::now();
    let m0 = reconstruction_mse(&p, &frames, &spec).unwrap();
    let mut plan = TrainPlan::stage1();
    plan.base_lr = lr;
    plan.warmup_epochs = 1.0;
    plan.epochs = 13;
    plan.max_iters = Some(200);
    let r = run_stage1(&p, &plan, &frames).unwrap();
    let m1 = reconstruction_mse(&p, &frames, &spec).unwrap();
    println!("lr {lr} mse {m0:.5} -> {m1:.5} ratio {:.3} trend {:?} time {:?}", m1 / m0, loss_trend(&r.losses), t.elapsed());
}
