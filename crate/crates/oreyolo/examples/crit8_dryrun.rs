use oreyolo::config::TrainConfig;
use oreyolo::runner::train;
use oreyolo::synthetic::generate_synthetic;
use std::time::Instant;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = 320;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.seed = 7;
    cfg.eval_every = 3;
    cfg.early_stop_map50 = Some(0.5);
    let samples = generate_synthetic(200, 7, 320).unwrap();
    let dir = std::env::temp_dir().join("oreyolo-crit8");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let report = train(&cfg, samples, &dir, false).unwrap();
    println!(
        "epochs {} steps {} elapsed {:?} best mAP50 {:.4}",
        report.epochs_run,
        report.steps_run,
        t0.elapsed(),
        report.best_map50
    );
    println!("{}", report.csv);
}
