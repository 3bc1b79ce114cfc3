use candle_core::{Device, Tensor, Var};
use gemm::{gemm, Parallelism};
use std::time::Instant;

fn best_of(n: usize, mut f: impl FnMut()) -> std::time::Duration {
    f();
    (0..n).map(|_| { let t0 = Instant::now(); f(); t0.elapsed() }).min().unwrap()
}

fn main() {
    let dev = Device::Cpu;
    let (m, k, l, b) = (32usize, 144usize, 6400usize, 8usize);
    let w: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 * 0.1).collect();
    let u: Vec<f32> = (0..b * k * l).map(|i| (i % 7) as f32 * 0.1).collect();
    let g: Vec<f32> = (0..b * m * l).map(|i| (i % 5) as f32 * 0.1).collect();

    // fwd-style: y_b = w (M,K) x u_b (K,L), row-major
    let mut y = vec![0f32; b * m * l];
    println!("raw fwd gemm {:?}", best_of(5, || {
        for bi in 0..b {
            unsafe {
                gemm(m, l, k,
                    y[bi * m * l..].as_mut_ptr(), 1, l as isize, false,
                    w.as_ptr(), 1, k as isize,
                    u[bi * k * l..].as_ptr(), 1, l as isize,
                    0f32, 1f32, false, false, false,
                    Parallelism::Rayon(0));
            }
        }
    }));

    // dW = sum_b grad_b (M,L) x u_b^T (L,K)  -> transposed rhs via strides
    let mut dw = vec![0f32; m * k];
    println!("raw dW gemm (B^T strided) {:?}", best_of(5, || {
        for v in dw.iter_mut() { *v = 0.0; }
        for bi in 0..b {
            unsafe {
                gemm(m, k, l,
                    dw.as_mut_ptr(), 1, k as isize, true,
                    g[bi * m * l..].as_ptr(), 1, l as isize,
                    u[bi * k * l..].as_ptr(), l as isize, 1,  // (L,K) view of (K,L): cs=L? rs=1
                    1f32, 1f32, false, false, false,
                    Parallelism::Rayon(0));
            }
        }
    }));

    // dU_b = w^T (K,M) x grad_b (M,L)
    let mut du = vec![0f32; b * k * l];
    println!("raw dU gemm (A^T strided) {:?}", best_of(5, || {
        for bi in 0..b {
            unsafe {
                gemm(k, l, m,
                    du[bi * k * l..].as_mut_ptr(), 1, l as isize, false,
                    w.as_ptr(), k as isize, 1, // (K,M) view of (M,K)
                    g[bi * m * l..].as_ptr(), 1, l as isize,
                    0f32, 1f32, false, false, false,
                    Parallelism::Rayon(0));
            }
        }
    }));

    // candle comparison
    let wt = Var::from_tensor(&Tensor::randn(0f32, 1f32, (m, k), &dev).unwrap()).unwrap();
    let ut = Var::from_tensor(&Tensor::randn(0f32, 1f32, (b, k, l), &dev).unwrap()).unwrap();
    println!("candle bmm fwd+bwd {:?}", best_of(3, || {
        let y = wt.as_tensor().broadcast_matmul(ut.as_tensor()).unwrap();
        let _ = y.sum_all().unwrap().backward().unwrap();
    }));
}
