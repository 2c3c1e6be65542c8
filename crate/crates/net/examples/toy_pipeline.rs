use hacseg_core::synth::make_synthetic_dataset;
use hacseg_net::trainer::*;
use hacseg_net::{HacConfig, ParamStore};

fn arg(i: usize, d: f64) -> f64 {
    std::env::args().nth(i).map(|s| s.parse().unwrap()).unwrap_or(d)
}

fn main() {
    env_logger::init();
    let (e1, e2, e3) = (arg(1, 2.0) as usize, arg(2, 10.0) as usize, arg(3, 3.0) as usize);
    let lrs = [arg(4, 2e-3), arg(5, 5e-4), arg(6, 2e-3)];
    let data: Vec<Labeled> = make_synthetic_dataset(200, 64, 2024).into_iter().map(Into::into).collect();
    let (train, rest) = data.split_at(160);
    let (val, test) = rest.split_at(20);
    let p = ParamStore::init(&HacConfig::toy(), 42).unwrap();
    let t = std::time::Instant::now();
    let frames: Vec<_> = train.iter().map(|f| f.image.clone()).collect();
    let toy = |mut plan: TrainPlan, epochs| {
        plan.base_lr = lrs[plan.stage.number() as usize - 1];
        plan.warmup_epochs = 1.0;
        plan.epochs = epochs;
        plan.min_path_px = 12;
        plan
    };
    let r1 = run_stage1(&p, &toy(TrainPlan::stage1(), e1), &frames).unwrap();
    println!("s1 {:?} {:?}", loss_trend(&r1.losses), t.elapsed());
    let r2 = run_stage2(&p, &toy(TrainPlan::stage2(), e2), train, val).unwrap();
    println!("s2 {:?} best {:?} {:?}", loss_trend(&r2.losses), r2.best_epoch, t.elapsed());
    for e in &r2.epochs { print!("{:.3} ", e.val_dice.unwrap()); }
    println!();
    if e3 == 0 {
        return;
    }
    let r3 = run_stage3(&p, &toy(TrainPlan::stage3(), e3), train, val).unwrap();
    println!("s3 {:?} best {:?} {:?}", loss_trend(&r3.losses), r3.best_epoch, t.elapsed());
    for e in &r3.epochs { print!("{:.3} ", e.val_dice.unwrap()); }
    println!();
    let ev = evaluate(&p, test).unwrap();
    for m in ["dice", "cl_dice", "precision", "sensitivity"] {
        println!("{m}: pa {:?} phac {:?}", ev.mean("pa", m), ev.mean("phac", m));
    }
}
