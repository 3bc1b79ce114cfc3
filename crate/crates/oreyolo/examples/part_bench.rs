use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::config::{ModelConfig, SppKind};
use oreyolo::model::{deterministic_init, Backbone};
use oreyolo::neck::Afpn;
use oreyolo::sppf::{SppBlock, SppSpec};
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed().as_secs_f64() }).fold(f64::MAX, f64::min)
}

fn main() {
    let dev = Device::Cpu;
    let cfg = ModelConfig::default();
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let backbone = Backbone::new(&vb.pp("bb"), &cfg).unwrap();
    let spp = SppBlock::new(&vb.pp("spp"), SppSpec::new(SppKind::Sppfcspc, 256)).unwrap();
    let afpn = Afpn::new(&vb.pp("neck"), [64, 128, 256], 1).unwrap();
    deterministic_init(&varmap, 0).unwrap();

    let x = Tensor::randn(0f32, 1f32, (8, 3, 320, 320), &dev).unwrap();

    let t_bb_f = best_of(3, || {
        let (p3, _p4, _p5) = backbone.forward(&x).unwrap();
        let _ = p3.sum_all().unwrap().to_scalar::<f32>().unwrap();
    });
    let t_bb = best_of(3, || {
        let (p3, p4, p5) = backbone.forward(&x).unwrap();
        let s = ((p3.sum_all().unwrap() + p4.sum_all().unwrap()).unwrap() + p5.sum_all().unwrap()).unwrap();
        let _ = s.backward().unwrap();
    });
    println!("backbone fwd {t_bb_f:.3}s  fwd+bwd {t_bb:.3}s");

    // spp alone on detached p5
    let p5 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 256, 10, 10), &dev).unwrap()).unwrap();
    let t_spp = best_of(3, || {
        let y = spp.forward(p5.as_tensor()).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    });
    println!("sppfcspc fwd+bwd {t_spp:.3}s");

    let p3 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 64, 40, 40), &dev).unwrap()).unwrap();
    let p4 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 128, 20, 20), &dev).unwrap()).unwrap();
    let t_neck = best_of(3, || {
        let (a, b, c) = afpn.forward(p3.as_tensor(), p4.as_tensor(), p5.as_tensor()).unwrap();
        let s = ((a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap() + c.sum_all().unwrap()).unwrap();
        let _ = s.backward().unwrap();
    });
    println!("afpn fwd+bwd {t_neck:.3}s");
}
