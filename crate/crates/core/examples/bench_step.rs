use strsep::datagen::{case_study_spec, generate};
use strsep::trainer::{init_state, train_step, TrainConfig};
use std::time::Instant;

fn main() {
    let ds = generate(&case_study_spec(1)).unwrap();
    let cfg = TrainConfig::default();
    let mut st = init_state(&ds.observations, &cfg).unwrap();
    // warmup
    for _ in 0..3 { train_step(&mut st, &ds.observations, &cfg, None).unwrap(); }
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n { train_step(&mut st, &ds.observations, &cfg, None).unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("per-step: {:.1} ms -> 3000 steps ~ {:.1} min, 3 seeds ~ {:.1} min", dt*1e3, dt*3000.0/60.0, dt*9000.0/60.0);
}
