use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::ema::{directional_pool, global_avg_pool2d};
use oreyolo::nn::{bmm, sigmoid, softmax, Conv2d, GroupNorm};
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed().as_secs_f64() }).fold(f64::MAX, f64::min)
}

fn main() {
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let (b, c, g, h, w) = (8usize, 32usize, 8usize, 80usize, 80usize);
    let cg = c / g;
    let conv1x1 = Conv2d::new(&vb.pp("c1"), c, c, 1, 1, 0, g, true).unwrap();
    let conv3x3 = Conv2d::new(&vb.pp("c3"), c, c, 3, 1, 1, g, true).unwrap();
    let norm = GroupNorm::new(&vb.pp("n"), c, c).unwrap();
    let xv = Var::from_tensor(&Tensor::randn(0f32, 1f32, (b, c, h, w), &dev).unwrap()).unwrap();
    let x = xv.as_tensor().clone();

    let stage = |upto: usize| -> Tensor {
        let (h_prof, w_prof) = directional_pool(&x).unwrap();
        if upto == 0 { return (h_prof + w_prof.transpose(2, 3).unwrap()).unwrap(); }
        let w_prof_t = w_prof.transpose(2, 3).unwrap();
        let profiles = Tensor::cat(&[&h_prof, &w_prof_t], 2).unwrap().contiguous().unwrap();
        let mixed = conv1x1.forward(&profiles).unwrap();
        if upto == 1 { return mixed; }
        let gate_h = sigmoid(&mixed.narrow(2, 0, h).unwrap().contiguous().unwrap()).unwrap().reshape((b * c, h, 1)).unwrap();
        let gate_w = sigmoid(&mixed.narrow(2, h, w).unwrap().contiguous().unwrap()).unwrap().reshape((b * c, 1, w)).unwrap();
        let gate2d = bmm(&gate_h, &gate_w).unwrap().reshape((b, c, h, w)).unwrap();
        let gated = (&x * gate2d).unwrap();
        if upto == 2 { return gated; }
        let x1 = norm.forward(&gated).unwrap();
        if upto == 3 { return x1; }
        let x2 = conv3x3.forward(&x).unwrap();
        if upto == 4 { return (x1 + x2).unwrap(); }
        let x2c = x2;
        let z1 = global_avg_pool2d(&x1).unwrap().reshape((b, g, 1, cg)).unwrap();
        let z2 = global_avg_pool2d(&x2c).unwrap().reshape((b, g, 1, cg)).unwrap();
        let z1 = softmax(&z1, 3).unwrap();
        let z2 = softmax(&z2, 3).unwrap();
        let f1 = x1.reshape((b, g, cg, h * w)).unwrap();
        let f2 = x2c.reshape((b, g, cg, h * w)).unwrap();
        let m1 = bmm(&z1.reshape((b * g, 1, cg)).unwrap(), &f2.reshape((b * g, cg, h * w)).unwrap()).unwrap();
        let m2 = bmm(&z2.reshape((b * g, 1, cg)).unwrap(), &f1.reshape((b * g, cg, h * w)).unwrap()).unwrap();
        if upto == 5 { return (m1 + m2).unwrap(); }
        let attn = sigmoid(&(m1 + m2).unwrap()).unwrap();
        let ones = Tensor::ones((cg, 1), x.dtype(), x.device()).unwrap();
        let attn_full = bmm(&ones, &attn.reshape((b * g, 1, h * w)).unwrap()).unwrap();
        (x.reshape((b * g, cg, h * w)).unwrap() * attn_full).unwrap().reshape((b, c, h, w)).unwrap()
    };

    for (name, upto) in [
        ("pools", 0usize), ("conv1x1", 1), ("gates", 2), ("norm", 3),
        ("conv3x3", 4), ("descriptors", 5), ("full", 6),
    ] {
        let t = best_of(3, || {
            let y = stage(upto);
            let _ = y.sum_all().unwrap().backward().unwrap();
        });
        println!("upto {name:12} fwd+bwd {t:.3}");
    }
}
