//! Training, evaluation, and prediction engines behind the CLI.

use crate::augment::{mixup, mosaic};
use crate::checkpoint::{apply_weights, load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{LrSchedule, TrainConfig};
use crate::data::{
    image_to_tensor, split_dataset, write_split_manifests, BoxLabel, DatasetSample,
};
use crate::draw::annotate;
use crate::error::{Error, Result};
use crate::head::{decode_predictions, Detection};
use crate::loss::{total_loss, BatchTargets, LossBreakdown};
use crate::metrics::{evaluate_detections, EvalResult};
use crate::model::{deterministic_init, Model};
use crate::nms::nms;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Decoupled-weight-decay adaptive optimizer with a fused single-pass
/// update; master copies live host-side so one step costs a handful of
/// linear passes instead of a dozen tensor ops per variable.
struct FusedAdamW {
    vars: Vec<Var>,
    master: Vec<Vec<f32>>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl FusedAdamW {
    fn new(varmap: &VarMap, lr: f64, beta1: f64, weight_decay: f64) -> Result<Self> {
        // fixed name order so two runs visit variables identically
        let data = varmap.data().lock().unwrap();
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        let mut vars = Vec::with_capacity(named.len());
        let mut master = Vec::with_capacity(named.len());
        for (_, var) in named {
            let flat = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            master.push(flat);
            vars.push(var.clone());
        }
        let m = master.iter().map(|w| vec![0f32; w.len()]).collect();
        let v = master.iter().map(|w| vec![0f32; w.len()]).collect();
        Ok(FusedAdamW {
            vars,
            master,
            m,
            v,
            t: 0,
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let step_scale = (lr / bc1) as f32;
        let eps = self.eps as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        for (i, var) in self.vars.iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
            let w = &mut self.master[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..w.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let vhat_sqrt = (v[j] * inv_bc2).sqrt();
                w[j] = decay * w[j] - step_scale * m[j] / (vhat_sqrt + eps);
            }
            let t = Tensor::from_vec(w.clone(), var.dims(), var.device())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub struct TrainReport {
    pub csv: String,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_map50: f64,
    pub final_eval: Option<EvalResult>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn build_model(cfg: &TrainConfig) -> Result<(VarMap, Model)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let model = Model::new(&vb, &cfg.model)?;
    deterministic_init(&varmap, cfg.seed)?;
    model.init_head_priors(&varmap)?;
    Ok((varmap, model))
}

fn optimizer(varmap: &VarMap, cfg: &TrainConfig) -> Result<FusedAdamW> {
    FusedAdamW::new(varmap, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
}

fn batch_tensors(
    samples: &[&DatasetSample],
    input_size: usize,
    device: &Device,
) -> Result<(Tensor, Vec<Vec<BoxLabel>>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        images.push(image_to_tensor(&s.image, input_size, device)?);
        labels.push(s.labels.clone());
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok((Tensor::cat(&refs, 0)?, labels))
}

fn train_step(
    model: &Model,
    opt: &mut FusedAdamW,
    cfg: &TrainConfig,
    batch: &[&DatasetSample],
    device: &Device,
) -> Result<LossBreakdown> {
    let (images, labels) = batch_tensors(batch, cfg.model.input_size, device)?;
    let preds = model.forward(&images)?;
    let targets = BatchTargets::assign(&labels, &cfg.model.anchors, cfg.model.input_size)?;
    let (breakdown, loss) = total_loss(
        &preds,
        &targets,
        &cfg.loss,
        &cfg.model.anchors,
        cfg.model.num_classes,
        cfg.model.input_size,
        cfg.label_smoothing,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::Data(format!(
            "training diverged: non-finite loss {breakdown:?}"
        )));
    }
    opt.backward_step(&loss)?;
    Ok(breakdown)
}

/// Check that every referenced class id fits the configured class count.
fn check_class_range(samples: &[DatasetSample], num_classes: usize) -> Result<()> {
    for s in samples {
        for l in &s.labels {
            if l.class_id >= num_classes {
                return Err(Error::invalid_config(format!(
                    "sample {} references class {} but the model has {} classes",
                    s.id, l.class_id, num_classes
                )));
            }
        }
    }
    Ok(())
}

/// Run detection over a set of samples with the model's operating thresholds
/// and score the results.
pub fn evaluate_model(
    model: &Model,
    samples: &[DatasetSample],
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split has no images".into()));
    }
    check_class_range(samples, cfg.model.num_classes)?;
    let device = Device::Cpu;
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let x = image_to_tensor(&s.image, cfg.model.input_size, &device)?;
        let raw = model.forward(&x)?;
        let candidates = decode_predictions(
            &raw,
            &cfg.model.anchors,
            cfg.model.input_size,
            cfg.model.num_classes,
        )?;
        let dets = nms(&candidates, cfg.nms_iou, cfg.confidence);
        per_image.push((dets, s.labels.clone()));
    }
    evaluate_detections(
        &per_image,
        cfg.model.input_size as f64,
        cfg.model.input_size as f64,
    )
}

/// Train on the given samples. `overfit_one_batch` trains on one fixed batch
/// (no augmentation, no split) and stops once the loss falls below 5% of its
/// initial value or after 200 steps.
pub fn train(
    cfg: &TrainConfig,
    samples: Vec<DatasetSample>,
    out_dir: &Path,
    overfit_one_batch: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_class_range(&samples, cfg.model.num_classes)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let (varmap, model) = build_model(cfg)?;
    let mut opt = optimizer(&varmap, cfg)?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");

    if overfit_one_batch {
        if samples.is_empty() {
            return Err(Error::Data("no samples to overfit".into()));
        }
        let batch: Vec<&DatasetSample> =
            samples.iter().take(cfg.batch_size.min(samples.len())).collect();
        let mut csv = String::from("step,box_loss,obj_loss,cls_loss,total\n");
        let mut initial = 0.0;
        let mut last = 0.0;
        let mut steps = 0;
        for step in 0..200 {
            let b = train_step(&model, &mut opt, cfg, &batch, &device)?;
            let _ = writeln!(
                csv,
                "{step},{:.6},{:.6},{:.6},{:.6}",
                b.box_loss, b.obj_loss, b.cls_loss, b.total
            );
            if step == 0 {
                initial = b.total;
            }
            last = b.total;
            steps = step + 1;
            if b.total < 0.05 * initial {
                break;
            }
        }
        save_checkpoint(&last_path, cfg, steps as u32, &varmap)?;
        let csv_path = out_dir.join("train_log.csv");
        std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
        return Ok(TrainReport {
            csv,
            epochs_run: 0,
            steps_run: steps,
            initial_loss: initial,
            final_loss: last,
            best_map50: 0.0,
            final_eval: None,
            best_checkpoint: best_path,
            last_checkpoint: last_path,
        });
    }

    let (train_set, val_set, test_set) = split_dataset(samples, (0.7, 0.2, 0.1), cfg.seed)?;
    write_split_manifests(out_dir, &train_set, &val_set, &test_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let csv_path = out_dir.join("train_log.csv");
    let mut csv = String::from("epoch,box_loss,obj_loss,cls_loss,val_map50,val_map50_95\n");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let mut best_map50 = -1.0f64;
    let mut final_eval: Option<EvalResult> = None;
    let mut initial_loss = 0.0;
    let mut final_loss = 0.0;
    let mut steps_run = 0usize;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        if cfg.lr_schedule == LrSchedule::Cosine && cfg.epochs > 1 {
            let t = epoch as f64 / (cfg.epochs - 1) as f64;
            let factor = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            opt.set_learning_rate(cfg.learning_rate * factor);
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // per-sample composition: mosaic and mixup at their configured rates
            let processed: Vec<DatasetSample> = {
                let mut out = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut s = train_set[i].clone();
                    if train_set.len() >= 4 && rng.gen_bool(cfg.mosaic_prob) {
                        let pick = |rng: &mut ChaCha8Rng| {
                            let j = rng.gen_range(0..train_set.len());
                            &train_set[j]
                        };
                        let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
                        s = mosaic([&train_set[i], a, b, c], &mut rng)?;
                    }
                    if train_set.len() >= 2 && rng.gen_bool(cfg.mixup_prob) {
                        let j = rng.gen_range(0..train_set.len());
                        let partner = &train_set[j];
                        if partner.image.dimensions() == s.image.dimensions() {
                            let lambda = rng.gen_range(0.35..0.65);
                            s = mixup(&s, partner, lambda)?;
                        }
                    }
                    out.push(s);
                }
                out
            };
            let batch: Vec<&DatasetSample> = processed.iter().collect();
            let b = train_step(&model, &mut opt, cfg, &batch, &device)?;
            if steps_run == 0 {
                initial_loss = b.total;
            }
            final_loss = b.total;
            steps_run += 1;
            sums.0 += b.box_loss;
            sums.1 += b.obj_loss;
            sums.2 += b.cls_loss;
            batches += 1;
        }
        epochs_run = epoch + 1;

        let do_eval = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (map50_s, map5095_s) = if do_eval && !val_set.is_empty() {
            let eval = evaluate_model(&model, &val_set, cfg)?;
            let m50 = eval.overall.map50;
            let m5095 = eval.overall.map50_95;
            if m50 > best_map50 {
                best_map50 = m50;
                save_checkpoint(&best_path, cfg, (epoch + 1) as u32, &varmap)?;
            }
            final_eval = Some(eval);
            (format!("{m50:.6}"), format!("{m5095:.6}"))
        } else {
            (String::new(), String::new())
        };
        let n = batches.max(1) as f64;
        let line = format!(
            "{epoch},{:.6},{:.6},{:.6},{map50_s},{map5095_s}\n",
            sums.0 / n,
            sums.1 / n,
            sums.2 / n
        );
        csv.push_str(&line);
        std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

        if let Some(target) = cfg.early_stop_map50 {
            if best_map50 >= target {
                break 'epochs;
            }
        }
    }

    save_checkpoint(&last_path, cfg, epochs_run as u32, &varmap)?;
    if best_map50 < 0.0 {
        // no evaluation ran; keep a best checkpoint anyway
        save_checkpoint(&best_path, cfg, epochs_run as u32, &varmap)?;
        best_map50 = 0.0;
    }
    let _ = test_set; // held out; evaluated via the eval command

    Ok(TrainReport {
        csv,
        epochs_run,
        steps_run,
        initial_loss,
        final_loss,
        best_map50,
        final_eval,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Load a checkpoint and rebuild its model.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Model, VarMap, u32)> {
    let ckpt: Checkpoint = load_checkpoint(path)?;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let model = Model::new(&vb, &ckpt.config.model)?;
    apply_weights(&varmap, &ckpt)?;
    Ok((ckpt.config, model, varmap, ckpt.epoch))
}

/// Run detection on image files, writing an annotated copy and a detection
/// line file per input. Unreadable images produce a warning and are skipped.
/// Returns (output image path, detection count) per processed image.
pub fn predict(
    checkpoint: &Path,
    images: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<(PathBuf, usize)>> {
    let (cfg, model, _varmap, _epoch) = load_model(checkpoint)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let mut results = Vec::new();
    for path in images {
        let image = match image::open(path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                eprintln!("warning: cannot read {}: {e}", path.display());
                continue;
            }
        };
        let x = image_to_tensor(&image, cfg.model.input_size, &device)?;
        let raw = model.forward(&x)?;
        let candidates = decode_predictions(
            &raw,
            &cfg.model.anchors,
            cfg.model.input_size,
            cfg.model.num_classes,
        )?;
        let mut dets = nms(&candidates, cfg.nms_iou, cfg.confidence);
        // map from model-input coordinates back to the original image
        let sx = image.width() as f64 / cfg.model.input_size as f64;
        let sy = image.height() as f64 / cfg.model.input_size as f64;
        for d in dets.iter_mut() {
            d.x1 *= sx;
            d.x2 *= sx;
            d.y1 *= sy;
            d.y2 *= sy;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let annotated = annotate(&image, &dets);
        let img_out = out_dir.join(format!("{stem}_pred.png"));
        annotated.save(&img_out)?;
        let mut lines = dets.iter().map(Detection::to_line).collect::<Vec<_>>().join("\n");
        if !lines.is_empty() {
            lines.push('\n');
        }
        let txt_out = out_dir.join(format!("{stem}.txt"));
        std::fs::write(&txt_out, lines).map_err(|e| Error::io(&txt_out, e))?;
        results.push((img_out, dets.len()));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.input_size = 64;
        cfg.model.num_classes = 2;
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.seed = 7;
        cfg.mosaic_prob = 0.5;
        cfg.mixup_prob = 0.5;
        cfg
    }

    #[test]
    fn initial_loss_is_finite_and_positive() {
        let cfg = tiny_cfg();
        let samples = generate_synthetic(6, 3, 64).unwrap();
        let dir = std::env::temp_dir().join(format!("oreyolo-train-{}", std::process::id()));
        let report = train(&cfg, samples, &dir, true).unwrap();
        assert!(report.initial_loss.is_finite() && report.initial_loss > 0.0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn seeded_runs_produce_identical_logs() {
        let cfg = tiny_cfg();
        let samples = generate_synthetic(6, 3, 64).unwrap();
        let dir1 = std::env::temp_dir().join(format!("oreyolo-d1-{}", std::process::id()));
        let dir2 = std::env::temp_dir().join(format!("oreyolo-d2-{}", std::process::id()));
        let r1 = train(&cfg, samples.clone(), &dir1, false).unwrap();
        let r2 = train(&cfg, samples, &dir2, false).unwrap();
        assert_eq!(r1.csv, r2.csv);
        let _ = std::fs::remove_dir_all(&dir1);
        let _ = std::fs::remove_dir_all(&dir2);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let cfg = tiny_cfg();
        let samples = generate_synthetic(6, 3, 64).unwrap();
        let dir = std::env::temp_dir().join(format!("oreyolo-ckrt-{}", std::process::id()));
        let report = train(&cfg, samples.clone(), &dir, true).unwrap();
        let (cfg2, model, _vm, _e) = load_model(&report.last_checkpoint).unwrap();
        assert_eq!(cfg2.model.input_size, 64);
        let eval = evaluate_model(&model, &samples[..3], &cfg2).unwrap();
        assert!(eval.overall.map50 >= 0.0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn evaluating_zero_images_is_a_data_error() {
        let cfg = tiny_cfg();
        let (_vm, model) = build_model(&cfg).unwrap();
        assert!(matches!(
            evaluate_model(&model, &[], &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn overfit_single_image_then_eval_scores_full_map() {
        let mut cfg = tiny_cfg();
        cfg.batch_size = 1;
        let samples: Vec<_> = generate_synthetic(3, 5, 64)
            .unwrap()
            .into_iter()
            .take(1)
            .collect();
        let dir = std::env::temp_dir().join(format!("oreyolo-ov1-{}", std::process::id()));
        let report = train(&cfg, samples.clone(), &dir, true).unwrap();
        assert!(report.final_loss < 0.05 * report.initial_loss);
        let (cfg2, model, _vm, _e) = load_model(&report.last_checkpoint).unwrap();
        let eval = evaluate_model(&model, &samples, &cfg2).unwrap();
        assert!(
            (eval.overall.map50 - 1.0).abs() < 1e-9,
            "memorized image should score mAP50 = 1.0, got {}",
            eval.overall.map50
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn predict_with_fresh_weights_copies_image_and_writes_empty_detections() {
        // untrained head priors keep every confidence below the threshold
        let cfg = tiny_cfg();
        let dir = std::env::temp_dir().join(format!("oreyolo-pred-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (varmap, _model) = build_model(&cfg).unwrap();
        let ckpt = dir.join("fresh.ckpt");
        crate::checkpoint::save_checkpoint(&ckpt, &cfg, 0, &varmap).unwrap();

        let sample = generate_synthetic(1, 2, 64).unwrap().remove(0);
        let img_path = dir.join("input.png");
        sample.image.save(&img_path).unwrap();
        let out_dir = dir.join("out");
        let results = predict(&ckpt, &[img_path.clone()], &out_dir).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].1, 0, "fresh weights should emit no detections");
        let annotated = image::open(&results[0].0).unwrap().to_rgb8();
        assert_eq!(annotated.as_raw(), sample.image.as_raw(), "no boxes means an unmodified copy");
        let txt = std::fs::read_to_string(out_dir.join("input.txt")).unwrap();
        assert!(txt.is_empty());
        // unreadable image: warn and continue
        let missing = dir.join("missing.png");
        let results = predict(&ckpt, &[missing, img_path], &out_dir).unwrap();
        assert_eq!(results.len(), 1);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let mut cfg = tiny_cfg();
        cfg.model.num_classes = 1;
        let samples = generate_synthetic(6, 3, 64).unwrap();
        // synthetic data contains class 1 somewhere in six samples
        if samples.iter().any(|s| s.labels.iter().any(|l| l.class_id == 1)) {
            assert!(matches!(
                train(&cfg, samples, Path::new("/tmp/oreyolo-unused"), true),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
