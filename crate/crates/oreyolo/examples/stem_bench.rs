use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::nn::{mish, silu, Conv2d, GroupNorm};
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed().as_secs_f64() }).fold(f64::MAX, f64::min)
}

fn main() {
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let conv = Conv2d::new(&vb.pp("c"), 3, 16, 6, 2, 2, 1, false).unwrap();
    let gn = GroupNorm::new(&vb.pp("g"), 16, 8).unwrap();
    let x = Tensor::randn(0f32, 1f32, (8, 3, 320, 320), &dev).unwrap();

    println!("conv fwd        {:.3}", best_of(3, || { let _ = conv.forward(&x).unwrap(); }));
    let y = conv.forward(&x).unwrap();
    println!("gn fwd          {:.3}", best_of(3, || { let _ = gn.forward(&y).unwrap(); }));
    let z = gn.forward(&y).unwrap();
    println!("mish fwd        {:.3}", best_of(3, || { let _ = mish(&z).unwrap(); }));
    println!("silu fwd        {:.3}", best_of(3, || { let _ = silu(&z).unwrap(); }));
    println!("conv+gn+mish fwd+bwd {:.3}", best_of(3, || {
        let y = conv.forward(&x).unwrap();
        let y = gn.forward(&y).unwrap();
        let y = mish(&y).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
    println!("conv-only fwd+bwd {:.3}", best_of(3, || {
        let y = conv.forward(&x).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
}
