use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::blocks::{ConvBlock, Csp3};
use oreyolo::ema::EmaConfig;
use oreyolo::model::deterministic_init;
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed().as_secs_f64() }).fold(f64::MAX, f64::min)
}

fn main() {
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);

    let stem = ConvBlock::cbm(&vb.pp("stem"), 3, 16, 6, 2).unwrap();
    let down0 = ConvBlock::cbs(&vb.pp("d0"), 16, 32, 3, 2).unwrap();
    let stage0 = Csp3::new(&vb.pp("s0"), 32, 32, 1, true, Some(EmaConfig { channels: 32, groups: 8 })).unwrap();
    let stage0_plain = Csp3::new(&vb.pp("s0p"), 32, 32, 1, true, None).unwrap();
    let down1 = ConvBlock::cbs(&vb.pp("d1"), 32, 64, 3, 2).unwrap();
    let stage1 = Csp3::new(&vb.pp("s1"), 64, 64, 1, true, Some(EmaConfig { channels: 64, groups: 8 })).unwrap();
    let down2 = ConvBlock::cbs(&vb.pp("d2"), 64, 128, 3, 2).unwrap();
    let stage2 = Csp3::new(&vb.pp("s2"), 128, 128, 2, true, Some(EmaConfig { channels: 128, groups: 8 })).unwrap();
    let down3 = ConvBlock::cbs(&vb.pp("d3"), 128, 256, 3, 2).unwrap();
    let stage3 = Csp3::new(&vb.pp("s3"), 256, 256, 1, true, None).unwrap();
    deterministic_init(&varmap, 0).unwrap();

    let x320 = Tensor::randn(0f32, 1f32, (8, 3, 320, 320), &dev).unwrap();
    println!("stem @320      {:.3}", best_of(3, || {
        let y = stem.forward(&x320).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    let v160 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 16, 160, 160), &dev).unwrap()).unwrap();
    let x160 = v160.as_tensor().clone();
    println!("down0 @160     {:.3}", best_of(3, || {
        let y = down0.forward(&x160).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    let v80 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 32, 80, 80), &dev).unwrap()).unwrap();
    let x80 = v80.as_tensor().clone();
    println!("stage0+EMA @80 {:.3}", best_of(3, || {
        let y = stage0.forward(&x80).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    println!("stage0 plain   {:.3}", best_of(3, || {
        let y = stage0_plain.forward(&x80).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    println!("down1 @80      {:.3}", best_of(3, || {
        let y = down1.forward(&x80).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    let v40 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 64, 40, 40), &dev).unwrap()).unwrap();
    let x40 = v40.as_tensor().clone();
    println!("stage1+EMA @40 {:.3}", best_of(3, || {
        let y = stage1.forward(&x40).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    println!("down2 @40      {:.3}", best_of(3, || {
        let y = down2.forward(&x40).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    let v20 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 128, 20, 20), &dev).unwrap()).unwrap();
    let x20 = v20.as_tensor().clone();
    println!("stage2+EMA @20 {:.3}", best_of(3, || {
        let y = stage2.forward(&x20).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    println!("down3 @20      {:.3}", best_of(3, || {
        let y = down3.forward(&x20).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    let v10 = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 256, 10, 10), &dev).unwrap()).unwrap();
    let x10 = v10.as_tensor().clone();
    println!("stage3 @10     {:.3}", best_of(3, || {
        let y = stage3.forward(&x10).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
}
