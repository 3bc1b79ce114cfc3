//! Model profiling: exact parameter counts, analytic FLOP counts (2 FLOPs
//! per multiply-accumulate, convolutions and attention products only), and
//! measured single-image throughput.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{param_count, Model};
use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct ProfileReport {
    pub param_count: usize,
    pub gflops: f64,
    /// Measured batch-1 frames per second; hardware-dependent, reported only.
    pub fps: f64,
    pub input_size: usize,
}

impl ProfileReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params={}", self.param_count);
        let _ = writeln!(s, "params_millions={:.3}", self.param_count as f64 / 1e6);
        let _ = writeln!(s, "gflops={:.3}", self.gflops);
        let _ = writeln!(s, "fps={:.2}", self.fps);
        let _ = writeln!(s, "input_size={}", self.input_size);
        s
    }
}

/// Build the model described by `cfg` and report parameters, GFLOPs at the
/// configured input size, and measured FPS (`timed_runs` forwards after one
/// warmup; 0 skips timing).
pub fn profile_config(cfg: &ModelConfig, timed_runs: usize) -> Result<ProfileReport> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let model = Model::new(&vb, cfg)?;
    let params = param_count(&varmap);
    let gflops = 2.0 * model.macs(cfg.input_size) as f64 / 1e9;
    let fps = if timed_runs == 0 {
        0.0
    } else {
        let x = Tensor::zeros(
            (1, 3, cfg.input_size, cfg.input_size),
            DType::F32,
            &Device::Cpu,
        )?;
        let _ = model.forward(&x)?; // warmup
        let t0 = Instant::now();
        for _ in 0..timed_runs {
            let _ = model.forward(&x)?;
        }
        timed_runs as f64 / t0.elapsed().as_secs_f64()
    };
    Ok(ProfileReport {
        param_count: params,
        gflops,
        fps,
        input_size: cfg.input_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NeckKind, SppKind};

    fn cfg(use_ema: bool, neck: NeckKind, spp: SppKind) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.use_ema = use_ema;
        c.neck_kind = neck;
        c.spp_kind = spp;
        c
    }

    #[test]
    fn param_count_is_invariant_to_input_size() {
        let mut a = cfg(true, NeckKind::Afpn, SppKind::Sppfcspc);
        let pa = profile_config(&a, 0).unwrap();
        a.input_size = 320;
        let pb = profile_config(&a, 0).unwrap();
        assert_eq!(pa.param_count, pb.param_count);
        // conv-trunk FLOPs scale ~4x when the side doubles
        let ratio = pa.gflops / pb.gflops;
        assert!((ratio - 4.0).abs() < 0.2, "flops ratio {ratio}");
    }

    #[test]
    fn published_parameter_budgets() {
        // Totals in the published tables: base 1.710M, +attention 1.749M,
        // +progressive neck 1.848M, +cross-stage pooling 3.317M, full 3.458M.
        let base = profile_config(&cfg(false, NeckKind::Pan, SppKind::Sppf), 0).unwrap();
        let ema = profile_config(&cfg(true, NeckKind::Pan, SppKind::Sppf), 0).unwrap();
        let afpn = profile_config(&cfg(false, NeckKind::Afpn, SppKind::Sppf), 0).unwrap();
        let sppc = profile_config(&cfg(false, NeckKind::Pan, SppKind::Sppfcspc), 0).unwrap();
        let full = profile_config(&cfg(true, NeckKind::Afpn, SppKind::Sppfcspc), 0).unwrap();

        let within = |got: usize, want: f64, tol: f64| {
            (got as f64 - want).abs() <= tol * want
        };
        assert!(within(base.param_count, 1.710e6, 0.05), "base {}", base.param_count);
        assert!(within(sppc.param_count, 3.317e6, 0.05), "sppc {}", sppc.param_count);
        assert!(within(full.param_count, 3.458e6, 0.05), "full {}", full.param_count);
        let ema_delta = ema.param_count - base.param_count;
        assert!(
            (ema_delta as f64 - 0.039e6).abs() <= 0.30 * 0.039e6,
            "attention delta {ema_delta}"
        );
        let afpn_delta = afpn.param_count - base.param_count;
        assert!(
            (afpn_delta as f64 - 0.138e6).abs() <= 0.30 * 0.138e6,
            "neck delta {afpn_delta}"
        );
        // strict ordering across the five rows
        assert!(base.param_count < ema.param_count);
        assert!(ema.param_count < afpn.param_count);
        assert!(afpn.param_count < sppc.param_count);
        assert!(sppc.param_count < full.param_count);
    }

    #[test]
    fn published_flop_budgets() {
        let full = profile_config(&cfg(true, NeckKind::Afpn, SppKind::Sppfcspc), 0).unwrap();
        let sppf = profile_config(&cfg(true, NeckKind::Afpn, SppKind::Sppf), 0).unwrap();
        assert!(
            (full.gflops - 6.3).abs() <= 0.15 * 6.3,
            "full gflops {}",
            full.gflops
        );
        assert!(
            (sppf.gflops - 5.0).abs() <= 0.15 * 5.0,
            "sppf-variant gflops {}",
            sppf.gflops
        );
    }
}
