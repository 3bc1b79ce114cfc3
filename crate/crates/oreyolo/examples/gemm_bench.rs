use candle_core::{Device, Tensor};
use std::time::Instant;

fn main() {
    let dev = Device::Cpu;
    for (m, k, n) in [(256usize, 2304usize, 6400usize), (64, 576, 6400), (32, 144, 25600), (16, 108, 25600)] {
        let a = Tensor::randn(0f32, 1f32, (m, k), &dev).unwrap();
        let b = Tensor::randn(0f32, 1f32, (k, n), &dev).unwrap();
        let _ = a.matmul(&b).unwrap();
        let t0 = Instant::now();
        let iters = 5;
        for _ in 0..iters {
            let _ = a.matmul(&b).unwrap();
        }
        let el = t0.elapsed().as_secs_f64() / iters as f64;
        let gflop = 2.0 * (m * k * n) as f64 / 1e9;
        println!("({m:4},{k:5},{n:5}): {:.1} ms  {:.1} GFLOP/s", el * 1e3, gflop / el);
    }
}
