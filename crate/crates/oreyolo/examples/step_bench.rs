use oreyolo::config::TrainConfig;
use oreyolo::data::image_to_tensor;
use oreyolo::loss::{total_loss, BatchTargets};
use oreyolo::model::{deterministic_init, Model};
use oreyolo::synthetic::generate_synthetic;
use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use std::time::Instant;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = 320;
    let device = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
    let model = Model::new(&vb, &cfg.model).unwrap();
    deterministic_init(&varmap, 0).unwrap();

    let samples = generate_synthetic(8, 1, 320).unwrap();
    let imgs: Vec<_> = samples.iter().map(|s| image_to_tensor(&s.image, 320, &device).unwrap()).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let batch = Tensor::cat(&refs, 0).unwrap();
    let labels: Vec<_> = samples.iter().map(|s| s.labels.clone()).collect();
    let targets = BatchTargets::assign(&labels, &cfg.model.anchors, 320).unwrap();

    let mut best_fwd = f64::MAX;
    let mut best_loss = f64::MAX;
    let mut best_bwd = f64::MAX;
    for _ in 0..4 {
        let t0 = Instant::now();
        let preds = model.forward(&batch).unwrap();
        // force materialization
        let _ = preds[0].sum_all().unwrap().to_scalar::<f32>().unwrap();
        let t_fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let (_bd, loss) = total_loss(&preds, &targets, &cfg.loss, &cfg.model.anchors, 2, 320, 0.005).unwrap();
        let t_loss = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let _grads = loss.backward().unwrap();
        let t_bwd = t2.elapsed().as_secs_f64();
        best_fwd = best_fwd.min(t_fwd);
        best_loss = best_loss.min(t_loss);
        best_bwd = best_bwd.min(t_bwd);
    }
    println!("full bs8@320: fwd {best_fwd:.3}s loss {best_loss:.3}s bwd {best_bwd:.3}s");
}
