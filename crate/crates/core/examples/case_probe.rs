// scratch probe: case-study MAC trajectory with default config
use strsep::datagen::{case_study_spec, generate};
use strsep::eval::match_sources;
use strsep::trainer::{init_state, train_step, TrainConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let ds = generate(&case_study_spec(seed)).unwrap();
    let x = ds.references.as_ref().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.max_iterations = steps;
    let mut st = init_state(&ds.observations, &cfg).unwrap();
    let t0 = std::time::Instant::now();
    for n in 1..=steps {
        let rec = train_step(&mut st, &ds.observations, &cfg, None).unwrap();
        if n % 100 == 0 || n == steps {
            let m = match_sources(&st.model.sources, x).unwrap();
            println!(
                "iter {:>5}  total {:>12.4}  rec {:>12.4}  str {:>8.4}  sep {:>8.4}  mac {:.4}  perm {:?}  pbar {:?}  [{:.0}s]",
                n, rec.loss_total, rec.loss_rec, rec.loss_str, rec.loss_sep, m.mac, m.permutation,
                rec.expected_scale.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
