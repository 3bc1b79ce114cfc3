use oreyolo::config::TrainConfig;
use oreyolo::runner::train;
use oreyolo::synthetic::generate_synthetic;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = 320;
    cfg.batch_size = bs;
    cfg.epochs = epochs;
    cfg.eval_every = 1000; // skip eval in this benchmark
    cfg.seed = 3;
    let samples = generate_synthetic(n, 7, 320).unwrap();
    let dir = std::env::temp_dir().join("oreyolo-train-bench");
    let t0 = Instant::now();
    let report = train(&cfg, samples, &dir, false).unwrap();
    let el = t0.elapsed();
    let imgs = report.steps_run * bs;
    println!(
        "bs{bs}: {} steps, {:?} total, {:.2}s/step, {:.3}s/img  loss {:.3}->{:.3}",
        report.steps_run,
        el,
        el.as_secs_f64() / report.steps_run as f64,
        el.as_secs_f64() / imgs as f64,
        report.initial_loss,
        report.final_loss
    );
    let _ = std::fs::remove_dir_all(&dir);
}
