use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::nn::Conv2d;
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed().as_secs_f64() }).fold(f64::MAX, f64::min)
}

fn main() {
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let xv = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 32, 80, 80), &dev).unwrap()).unwrap();
    let x = xv.as_tensor().clone();
    for (name, groups, bias) in [("plain g1", 1usize, false), ("grouped g8", 8, true), ("grouped g8 nobias", 8, false)] {
        let conv = Conv2d::new(&vb.pp(name), 32, 32, 3, 1, 1, groups, bias).unwrap();
        let f = best_of(3, || { let _ = conv.forward(&x).unwrap(); });
        let fb = best_of(3, || {
            let y = conv.forward(&x).unwrap();
            let _ = y.sum_all().unwrap().backward().unwrap();
        });
        println!("{name:18} fwd {f:.3}  fwd+bwd {fb:.3}");
    }
}
