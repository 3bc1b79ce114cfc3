use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use oreyolo::ema::{EmaAttention, EmaConfig};
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> std::time::Duration {
    f();
    (0..n)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed()
        })
        .min()
        .unwrap()
}

fn main() {
    let dev = Device::Cpu;

    // EMA total
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let ema = EmaAttention::new(&vb, EmaConfig { channels: 32, groups: 8 }).unwrap();
    let xv = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 32, 80, 80), &dev).unwrap()).unwrap();
    let x = xv.as_tensor().clone();
    println!("EMA fwd      {:?}", best_of(5, || { let _ = ema.forward(&x).unwrap(); }));
    println!("EMA fwd+bwd  {:?}", best_of(5, || {
        let y = ema.forward(&x).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));

    // batched matmul patterns of the grouped branches
    let a = Tensor::randn(0f32, 1f32, (8usize, 36usize, 6400usize), &dev).unwrap();
    let w = Tensor::randn(0f32, 1f32, (8usize, 4usize, 36usize), &dev).unwrap();
    println!("bmm (8,[8],4,36x6400) {:?}", best_of(5, || {
        let _ = w.broadcast_matmul(&a.reshape((1, 8, 36, 6400)).unwrap().broadcast_as((8, 8, 36, 6400)).unwrap().contiguous().unwrap()).unwrap();
    }));
    // same flops as one dense gemm
    let wd = Tensor::randn(0f32, 1f32, (32usize, 288usize), &dev).unwrap();
    let ad = Tensor::randn(0f32, 1f32, (8usize, 288usize, 6400usize), &dev).unwrap();
    println!("dense (32,288)x(288,6400)x8 {:?}", best_of(5, || {
        let _ = wd.broadcast_matmul(&ad).unwrap();
    }));

    // gemv-style descriptor products
    let z = Tensor::randn(0f32, 1f32, (64usize, 1usize, 4usize), &dev).unwrap();
    let f = Tensor::randn(0f32, 1f32, (64usize, 4usize, 6400usize), &dev).unwrap();
    println!("desc matmul (64 x (1,4)x(4,6400)) {:?}", best_of(5, || {
        let _ = z.matmul(&f).unwrap();
    }));

    // directional pooling costs
    println!("mean_keepdim(3) {:?}", best_of(5, || { let _ = x.mean_keepdim(3).unwrap(); }));
    println!("mean_keepdim(2) {:?}", best_of(5, || { let _ = x.mean_keepdim(2).unwrap(); }));

    // conv k3s2 16->32 @160
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let conv = oreyolo::nn::Conv2d::new(&vb, 16, 32, 3, 2, 1, 1, false).unwrap();
    let cv = Var::from_tensor(&Tensor::randn(0f32, 1f32, (8, 16, 160, 160), &dev).unwrap()).unwrap();
    let cx = cv.as_tensor().clone();
    println!("conv k3s2 fwd     {:?}", best_of(5, || { let _ = conv.forward(&cx).unwrap(); }));
    println!("conv k3s2 fwd+bwd {:?}", best_of(5, || {
        let y = conv.forward(&cx).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
}
