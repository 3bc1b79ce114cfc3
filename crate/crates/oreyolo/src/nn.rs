//! Low-level differentiable building blocks on top of the tensor backend.
//!
//! Convolutions are expressed as an explicit unfold (shifted views gathered
//! along the channel axis) followed by a single matmul. Forward results are
//! bit-identical to the backend's native conv2d, but the backward pass then
//! consists of plain GEMMs instead of transposed-convolution kernels, which
//! is several times faster on CPU for the deeper layers of this model.

use crate::error::Result;
use candle_core::{Tensor, D};
use candle_nn::VarBuilder;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Marks unfold positions that fall into the zero padding.
const PAD_SENTINEL: u32 = u32::MAX;

/// Raw row-major GEMM: dst (m, n) = lhs (m, k) x rhs (k, l), with optional
/// accumulation and logical transposes expressed through strides.
trait GemmFloat: num_like::Float {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        n: usize,
        k: usize,
        dst: *mut Self,
        dst_rs: isize,
        accumulate: bool,
        lhs: *const Self,
        lhs_cs: isize,
        lhs_rs: isize,
        rhs: *const Self,
        rhs_cs: isize,
        rhs_rs: isize,
    );
}

macro_rules! impl_gemm_float {
    ($ty:ty) => {
        impl GemmFloat for $ty {
            unsafe fn gemm_raw(
                m: usize,
                n: usize,
                k: usize,
                dst: *mut Self,
                dst_rs: isize,
                accumulate: bool,
                lhs: *const Self,
                lhs_cs: isize,
                lhs_rs: isize,
                rhs: *const Self,
                rhs_cs: isize,
                rhs_rs: isize,
            ) {
                gemm::gemm(
                    m,
                    n,
                    k,
                    dst,
                    1,
                    dst_rs,
                    accumulate,
                    lhs,
                    lhs_cs,
                    lhs_rs,
                    rhs,
                    rhs_cs,
                    rhs_rs,
                    if accumulate { 1.0 } else { 0.0 },
                    1.0,
                    false,
                    false,
                    false,
                    gemm::Parallelism::Rayon(0),
                )
            }
        }
    };
}
impl_gemm_float!(f32);
impl_gemm_float!(f64);

/// How the left operand of a batched matmul is shared across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BmmMode {
    /// lhs (M, K), rhs (B, K, L) -> (B, M, L)
    SharedLhs,
    /// lhs (G, M, K), rhs (B, G, K, L) -> (B, G, M, L)
    GroupedLhs,
    /// lhs (N, M, K), rhs (N, K, L) -> (N, M, L)
    PerBatch,
}

struct BatchMatmulOp {
    mode: BmmMode,
    need_dlhs: bool,
    need_drhs: bool,
}

fn bmm_dims(mode: BmmMode, l1: &[usize], l2: &[usize]) -> (usize, usize, usize, usize, usize) {
    // (batch, groups, m, k, l)
    match mode {
        BmmMode::SharedLhs => (l2[0], 1, l1[0], l1[1], l2[2]),
        BmmMode::GroupedLhs => (l2[0], l1[0], l1[1], l1[2], l2[3]),
        BmmMode::PerBatch => (l1[0], 1, l1[1], l1[2], l2[2]),
    }
}

fn bmm_fwd<T: GemmFloat>(
    mode: BmmMode,
    lhs: &[T],
    rhs: &[T],
    dims: (usize, usize, usize, usize, usize),
) -> Vec<T> {
    let (b, g, m, k, l) = dims;
    let mut out = vec![T::zero(); b * g * m * l];
    for bi in 0..b {
        for gi in 0..g {
            let lhs_off = match mode {
                BmmMode::SharedLhs => 0,
                BmmMode::GroupedLhs => gi * m * k,
                BmmMode::PerBatch => bi * m * k,
            };
            let rhs_off = (bi * g + gi) * k * l;
            let dst_off = (bi * g + gi) * m * l;
            unsafe {
                T::gemm_raw(
                    m,
                    l,
                    k,
                    out[dst_off..].as_mut_ptr(),
                    l as isize,
                    false,
                    lhs[lhs_off..].as_ptr(),
                    1,
                    k as isize,
                    rhs[rhs_off..].as_ptr(),
                    1,
                    l as isize,
                );
            }
        }
    }
    out
}

fn bmm_bwd<T: GemmFloat>(
    mode: BmmMode,
    lhs: &[T],
    rhs: &[T],
    grad: &[T],
    dims: (usize, usize, usize, usize, usize),
    need_dlhs: bool,
    need_drhs: bool,
) -> (Vec<T>, Vec<T>) {
    let (b, g, m, k, l) = dims;
    let mut dlhs = vec![T::zero(); if need_dlhs { lhs.len() } else { 0 }];
    let mut drhs = vec![T::zero(); if need_drhs { rhs.len() } else { 0 }];
    for bi in 0..b {
        for gi in 0..g {
            let lhs_off = match mode {
                BmmMode::SharedLhs => 0,
                BmmMode::GroupedLhs => gi * m * k,
                BmmMode::PerBatch => bi * m * k,
            };
            let slab_off = (bi * g + gi) * k * l;
            let grad_off = (bi * g + gi) * m * l;
            unsafe {
                if need_dlhs {
                    // dLhs += grad (M, L) x rhs^T (L, K)
                    T::gemm_raw(
                        m,
                        k,
                        l,
                        dlhs[lhs_off..].as_mut_ptr(),
                        k as isize,
                        true,
                        grad[grad_off..].as_ptr(),
                        1,
                        l as isize,
                        rhs[slab_off..].as_ptr(),
                        l as isize,
                        1,
                    );
                }
                if need_drhs {
                    // dRhs = lhs^T (K, M) x grad (M, L)
                    T::gemm_raw(
                        k,
                        l,
                        m,
                        drhs[slab_off..].as_mut_ptr(),
                        l as isize,
                        false,
                        lhs[lhs_off..].as_ptr(),
                        k as isize,
                        1,
                        grad[grad_off..].as_ptr(),
                        1,
                        l as isize,
                    );
                }
            }
        }
    }
    (dlhs, drhs)
}

fn cpu_slice<'a, T: candle_core::WithDType>(
    storage: &'a candle_core::Storage,
    layout: &candle_core::Layout,
) -> candle_core::Result<&'a [T]> {
    let candle_core::Storage::Cpu(cpu) = storage else {
        candle_core::bail!("expected a cpu tensor")
    };
    let slice = cpu.as_slice::<T>()?;
    let Some(o) = layout.contiguous_offsets() else {
        candle_core::bail!("expected a contiguous tensor")
    };
    Ok(&slice[o.0..o.1])
}

impl candle_core::CustomOp2 for BatchMatmulOp {
    fn name(&self) -> &'static str {
        "batch-matmul"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (Some(o1), Some(o2)) = (l1.contiguous_offsets(), l2.contiguous_offsets()) else {
            candle_core::bail!("batch matmul expects contiguous inputs")
        };
        let dims = bmm_dims(self.mode, l1.dims(), l2.dims());
        let (bsz, g, m, _k, l) = dims;
        let out_shape = match self.mode {
            BmmMode::SharedLhs | BmmMode::PerBatch => {
                candle_core::Shape::from_dims(&[bsz, m, l])
            }
            BmmMode::GroupedLhs => candle_core::Shape::from_dims(&[bsz, g, m, l]),
        };
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => Ok((
                CpuStorage::F32(bmm_fwd(self.mode, &a[o1.0..o1.1], &b[o2.0..o2.1], dims)),
                out_shape,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => Ok((
                CpuStorage::F64(bmm_fwd(self.mode, &a[o1.0..o1.1], &b[o2.0..o2.1], dims)),
                out_shape,
            )),
            _ => candle_core::bail!("batch matmul supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dims = bmm_dims(self.mode, arg1.dims(), arg2.dims());
        let dev = arg1.device();
        let grad_c = grad_res.contiguous()?;
        let (s1, l1) = arg1.storage_and_layout();
        let (s2, l2) = arg2.storage_and_layout();
        let (sg, lg) = grad_c.storage_and_layout();
        match arg1.dtype() {
            candle_core::DType::F64 => {
                let a = cpu_slice::<f64>(&s1, &l1)?;
                let b = cpu_slice::<f64>(&s2, &l2)?;
                let g = cpu_slice::<f64>(&sg, &lg)?;
                let (da, db) = bmm_bwd(self.mode, a, b, g, dims, self.need_dlhs, self.need_drhs);
                Ok((
                    if self.need_dlhs {
                        Some(Tensor::from_vec(da, arg1.dims(), dev)?)
                    } else {
                        None
                    },
                    if self.need_drhs {
                        Some(Tensor::from_vec(db, arg2.dims(), dev)?)
                    } else {
                        None
                    },
                ))
            }
            _ => {
                let a = cpu_slice::<f32>(&s1, &l1)?;
                let b = cpu_slice::<f32>(&s2, &l2)?;
                let g = cpu_slice::<f32>(&sg, &lg)?;
                let (da, db) = bmm_bwd(self.mode, a, b, g, dims, self.need_dlhs, self.need_drhs);
                Ok((
                    if self.need_dlhs {
                        Some(Tensor::from_vec(da, arg1.dims(), dev)?)
                    } else {
                        None
                    },
                    if self.need_drhs {
                        Some(Tensor::from_vec(db, arg2.dims(), dev)?)
                    } else {
                        None
                    },
                ))
            }
        }
    }
}

/// Batched matmul with raw-GEMM forward and backward. Dispatches on ranks:
/// (M,K)x(B,K,L), (G,M,K)x(B,G,K,L), or (N,M,K)x(N,K,L).
pub fn bmm(lhs: &Tensor, rhs: &Tensor) -> candle_core::Result<Tensor> {
    bmm_with(lhs, rhs, true, true)
}

/// `bmm` with explicit grad requirements, so call sites can skip gradient
/// GEMMs that will be discarded (e.g. no input gradient at the stem).
pub fn bmm_with(
    lhs: &Tensor,
    rhs: &Tensor,
    need_dlhs: bool,
    need_drhs: bool,
) -> candle_core::Result<Tensor> {
    let mode = match (lhs.rank(), rhs.rank()) {
        (2, 3) => BmmMode::SharedLhs,
        (3, 4) => BmmMode::GroupedLhs,
        (3, 3) => BmmMode::PerBatch,
        (a, b) => candle_core::bail!("unsupported bmm ranks {a} x {b}"),
    };
    lhs.contiguous()?.apply_op2(
        &rhs.contiguous()?,
        BatchMatmulOp {
            mode,
            need_dlhs,
            need_drhs,
        },
    )
}

/// Parallel gather along dim 1 of a (B, N) tensor with padding sentinels;
/// the backward pass is the matching scatter-add. Both partition by batch
/// row, so results are deterministic.
struct UnfoldGatherOp {
    indices: Arc<Vec<u32>>,
}

fn gather_rows<T: num_like::Float>(x: &[T], idx: &[u32], b: usize, n: usize) -> Vec<T> {
    let m = idx.len();
    let mut out = vec![T::zero(); b * m];
    out.par_chunks_mut(m)
        .zip(x.par_chunks(n))
        .for_each(|(dst, src)| {
            for (d, &i) in dst.iter_mut().zip(idx.iter()) {
                if i != PAD_SENTINEL {
                    *d = src[i as usize];
                }
            }
        });
    out
}

fn scatter_add_rows<T: num_like::Float>(dy: &[T], idx: &[u32], b: usize, n: usize) -> Vec<T> {
    let m = idx.len();
    let mut dx = vec![T::zero(); b * n];
    dx.par_chunks_mut(n)
        .zip(dy.par_chunks(m))
        .for_each(|(dst, src)| {
            for (&g, &i) in src.iter().zip(idx.iter()) {
                if i != PAD_SENTINEL {
                    let slot = &mut dst[i as usize];
                    *slot = T::from_f64(slot.to_f64() + g.to_f64());
                }
            }
        });
    dx
}

impl candle_core::CustomOp1 for UnfoldGatherOp {
    fn name(&self) -> &'static str {
        "unfold-gather"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let dims = layout.dims();
        let (b, n) = (dims[0], dims[1]);
        let Some(o) = layout.contiguous_offsets() else {
            candle_core::bail!("unfold gather expects a contiguous input")
        };
        let shape = candle_core::Shape::from_dims(&[b, self.indices.len()]);
        match storage {
            CpuStorage::F32(x) => Ok((
                CpuStorage::F32(gather_rows(&x[o.0..o.1], &self.indices, b, n)),
                shape,
            )),
            CpuStorage::F64(x) => Ok((
                CpuStorage::F64(gather_rows(&x[o.0..o.1], &self.indices, b, n)),
                shape,
            )),
            _ => candle_core::bail!("unfold gather supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (b, n) = arg.dims2()?;
        let dev = arg.device();
        let grad_c = grad_res.contiguous()?;
        let (sg, lg) = grad_c.storage_and_layout();
        let grad = match arg.dtype() {
            candle_core::DType::F64 => {
                let dy = cpu_slice::<f64>(&sg, &lg)?;
                Tensor::from_vec(scatter_add_rows(dy, &self.indices, b, n), (b, n), dev)?
            }
            _ => {
                let dy = cpu_slice::<f32>(&sg, &lg)?;
                Tensor::from_vec(scatter_add_rows(dy, &self.indices, b, n), (b, n), dev)?
            }
        };
        Ok(Some(grad))
    }
}

/// 2D convolution with same-style padding, expressed as unfold + matmul.
#[derive(Debug)]
pub struct Conv2d {
    weight: Tensor, // (out, in/groups, kh, kw)
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
    /// Whether the backward pass must produce a gradient for the input
    /// (false only for layers fed directly by data).
    input_grad: bool,
    /// Gather indices for the unfold, cached per input spatial size.
    unfold_cache: Mutex<HashMap<(usize, usize), Arc<Vec<u32>>>>,
}

impl Clone for Conv2d {
    fn clone(&self) -> Self {
        Conv2d {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            input_grad: self.input_grad,
            unfold_cache: Mutex::new(HashMap::new()),
        }
    }
}

impl Conv2d {
    pub fn new(
        vb: &VarBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        debug_assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let weight = vb.get_with_hints(
            (out_channels, in_channels / groups, kernel, kernel),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bias = if with_bias {
            Some(vb.get_with_hints(out_channels, "bias", candle_nn::init::ZERO)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
            input_grad: true,
            unfold_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Skip the input-gradient GEMM; valid only when the layer consumes
    /// data rather than activations.
    pub fn no_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims4().map(|d| d.0).unwrap_or(0)
    }

    /// Gather indices mapping the raw input (flattened per batch item) to
    /// the unfolded layout: per group, tap-major rows (kh, kw, c_in_group)
    /// over out_h*out_w columns. Out-of-bounds taps (the zero padding) are
    /// marked with `PAD_SENTINEL`.
    fn unfold_indices(&self, c: usize, h: usize, w: usize) -> std::sync::Arc<Vec<u32>> {
        let mut cache = self.unfold_cache.lock().unwrap();
        if let Some(t) = cache.get(&(h, w)) {
            return t.clone();
        }
        let (_, _, kh, kw) = self.weight.dims4().unwrap();
        let out_h = (h + 2 * self.padding - kh) / self.stride + 1;
        let out_w = (w + 2 * self.padding - kw) / self.stride + 1;
        let cg = c / self.groups;
        let pad = self.padding as isize;
        let mut idx = Vec::with_capacity(kh * kw * c * out_h * out_w);
        for g in 0..self.groups {
            for ki in 0..kh {
                for kj in 0..kw {
                    for ch in 0..cg {
                        let base = ((g * cg + ch) * h * w) as isize;
                        for oy in 0..out_h {
                            let y = (oy * self.stride + ki) as isize - pad;
                            for ox in 0..out_w {
                                let x = (ox * self.stride + kj) as isize - pad;
                                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                    idx.push(PAD_SENTINEL);
                                } else {
                                    idx.push((base + y * w as isize + x) as u32);
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = std::sync::Arc::new(idx);
        cache.insert((h, w), t.clone());
        t
    }

    /// Weight matrix matching the unfolded layout (tap-major per group),
    /// with grouped kernels expanded block-diagonally to (O, kh*kw*C).
    fn dense_weight_matrix(&self) -> candle_core::Result<Tensor> {
        let (o, cg, kh, kw) = self.weight.dims4()?;
        let g = self.groups;
        let og = o / g;
        let k_g = kh * kw * cg;
        let blocks = self
            .weight
            .reshape((g, og, cg, kh, kw))?
            .permute((0, 1, 3, 4, 2))? // (G, og, kh, kw, cg)
            .reshape((g, og, k_g))?;
        if g == 1 {
            return blocks.reshape((o, k_g))?.contiguous();
        }
        let mut rows = Vec::with_capacity(g);
        for gi in 0..g {
            let block = blocks.narrow(0, gi, 1)?.reshape((og, k_g))?;
            let mut parts: Vec<Tensor> = Vec::with_capacity(3);
            if gi > 0 {
                parts.push(Tensor::zeros((og, gi * k_g), block.dtype(), block.device())?);
            }
            parts.push(block);
            if gi + 1 < g {
                parts.push(Tensor::zeros(
                    (og, (g - 1 - gi) * k_g),
                    self.weight.dtype(),
                    self.weight.device(),
                )?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            rows.push(Tensor::cat(&refs, 1)?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::cat(&refs, 0)?.contiguous()
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, _cg, kh, kw) = self.weight.dims4()?;
        let out_h = (h + 2 * self.padding - kh) / self.stride + 1;
        let out_w = (w + 2 * self.padding - kw) / self.stride + 1;
        let l = out_h * out_w;
        let y = if kh == 1 && kw == 1 && self.stride == 1 && self.groups == 1 {
            let wmat = self.weight.reshape((o, c))?;
            let flat = x.reshape((b, c, l))?;
            bmm_with(&wmat, &flat, true, self.input_grad)?
        } else {
            let idx = self.unfold_indices(c, h, w);
            let flat = x.reshape((b, c * h * w))?;
            let unf = flat.apply_op1(UnfoldGatherOp { indices: idx })?;
            let unf = unf.reshape((b, kh * kw * c, l))?;
            // grouped kernels become one block-diagonal matrix: the zero
            // blocks cost extra multiplies but keep everything in one fat,
            // fast GEMM
            let wmat = self.dense_weight_matrix()?;
            bmm_with(&wmat, &unf, true, self.input_grad)?
        };
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1))?)?,
            None => y,
        };
        y.reshape((b, o, out_h, out_w))
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dims4().unwrap();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    /// Multiply-accumulate count for an input of the given spatial size.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (o, cg, kh, kw) = self.weight.dims4().unwrap();
        let (oh, ow) = self.out_hw(h, w);
        oh * ow * o * cg * kh * kw
    }
}

/// Fused group normalization: a custom op computes the whole normalize +
/// affine transform in two passes and its backward in three, instead of the
/// dozen elementwise passes a composed implementation costs.
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

fn gn_fwd_loop<T: num_like::Float>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    b: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let cg = c / groups;
    let n = cg * hw;
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(n)
        .zip(x.par_chunks(n))
        .enumerate()
        .for_each(|(slab_idx, (dst, slab))| {
            let g = slab_idx % groups;
            let mut sum = 0f64;
            let mut sq = 0f64;
            for v in slab {
                let f = v.to_f64();
                sum += f;
                sq += f * f;
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + eps).sqrt();
            for ch in 0..cg {
                let wc = weight[g * cg + ch].to_f64();
                let bc = bias[g * cg + ch].to_f64();
                let scale = wc * inv_std;
                let shift = bc - mean * scale;
                for (d, v) in dst[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(slab[ch * hw..(ch + 1) * hw].iter())
                {
                    *d = T::from_f64(v.to_f64() * scale + shift);
                }
            }
        });
    let _ = b;
    out
}

struct GnSlabStats {
    mean: f64,
    inv_std: f64,
    m1: f64,
    m2: f64,
    dw_part: Vec<f64>,
    db_part: Vec<f64>,
}

fn gn_bwd_loop<T: num_like::Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    b: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let n = cg * hw;
    // pass 1: per-slab statistics and parameter-grad partials
    let stats: Vec<GnSlabStats> = x
        .par_chunks(n)
        .zip(dy.par_chunks(n))
        .enumerate()
        .map(|(slab_idx, (slab, dys))| {
            let g = slab_idx % groups;
            let mut sum = 0f64;
            let mut sq = 0f64;
            for v in slab {
                let f = v.to_f64();
                sum += f;
                sq += f * f;
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + eps).sqrt();
            let mut s1 = 0f64;
            let mut s2 = 0f64;
            let mut dw_part = vec![0f64; cg];
            let mut db_part = vec![0f64; cg];
            for ch in 0..cg {
                let wc = weight[g * cg + ch].to_f64();
                let mut dwc = 0f64;
                let mut dbc = 0f64;
                for i in 0..hw {
                    let xhat = (slab[ch * hw + i].to_f64() - mean) * inv_std;
                    let g_out = dys[ch * hw + i].to_f64();
                    let a = wc * g_out;
                    s1 += a;
                    s2 += a * xhat;
                    dwc += g_out * xhat;
                    dbc += g_out;
                }
                dw_part[ch] = dwc;
                db_part[ch] = dbc;
            }
            GnSlabStats {
                mean,
                inv_std,
                m1: s1 / n as f64,
                m2: s2 / n as f64,
                dw_part,
                db_part,
            }
        })
        .collect();

    // reduce parameter grads in slab order (deterministic)
    let mut dw = vec![0f64; c];
    let mut db = vec![0f64; c];
    for (slab_idx, st) in stats.iter().enumerate() {
        let g = slab_idx % groups;
        for ch in 0..cg {
            dw[g * cg + ch] += st.dw_part[ch];
            db[g * cg + ch] += st.db_part[ch];
        }
    }

    // pass 2: input gradient
    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(n)
        .zip(x.par_chunks(n))
        .zip(dy.par_chunks(n))
        .enumerate()
        .for_each(|(slab_idx, ((dst, slab), dys))| {
            let g = slab_idx % groups;
            let st = &stats[slab_idx];
            for ch in 0..cg {
                let wc = weight[g * cg + ch].to_f64();
                for i in 0..hw {
                    let xhat = (slab[ch * hw + i].to_f64() - st.mean) * st.inv_std;
                    let a = wc * dys[ch * hw + i].to_f64();
                    dst[ch * hw + i] = T::from_f64((a - st.m1 - xhat * st.m2) * st.inv_std);
                }
            }
        });
    let _ = b;
    let dw_t = dw.into_iter().map(T::from_f64).collect();
    let db_t = db.into_iter().map(T::from_f64).collect();
    (dx, dw_t, db_t)
}

/// Minimal float abstraction for the fused kernels.
mod num_like {
    pub trait Float: Copy + Send + Sync + 'static {
        fn to_f64(self) -> f64;
        fn from_f64(v: f64) -> Self;
        fn zero() -> Self;
    }
    impl Float for f32 {
        fn to_f64(self) -> f64 {
            self as f64
        }
        fn from_f64(v: f64) -> Self {
            v as f32
        }
        fn zero() -> Self {
            0.0
        }
    }
    impl Float for f64 {
        fn to_f64(self) -> f64 {
            self
        }
        fn from_f64(v: f64) -> Self {
            v
        }
        fn zero() -> Self {
            0.0
        }
    }
}

impl candle_core::CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "fused-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
        s3: &candle_core::CpuStorage,
        l3: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let dims = l1.dims();
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let (Some(o1), Some(o2), Some(o3)) = (
            l1.contiguous_offsets(),
            l2.contiguous_offsets(),
            l3.contiguous_offsets(),
        ) else {
            candle_core::bail!("fused group norm expects contiguous inputs")
        };
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(bs)) => {
                let out = gn_fwd_loop(
                    &x[o1.0..o1.1],
                    &wt[o2.0..o2.1],
                    &bs[o3.0..o3.1],
                    b,
                    c,
                    h * w,
                    self.groups,
                    self.eps,
                );
                Ok((CpuStorage::F32(out), l1.shape().clone()))
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(bs)) => {
                let out = gn_fwd_loop(
                    &x[o1.0..o1.1],
                    &wt[o2.0..o2.1],
                    &bs[o3.0..o3.1],
                    b,
                    c,
                    h * w,
                    self.groups,
                    self.eps,
                );
                Ok((CpuStorage::F64(out), l1.shape().clone()))
            }
            _ => candle_core::bail!("fused group norm supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _arg3: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = arg1.dims4()?;
        let dev = arg1.device();
        let grad_c = grad_res.contiguous()?;
        let (s1, l1) = arg1.storage_and_layout();
        let (s2, l2) = arg2.storage_and_layout();
        let (sg, lg) = grad_c.storage_and_layout();
        match arg1.dtype() {
            candle_core::DType::F64 => {
                let x = cpu_slice::<f64>(&s1, &l1)?;
                let wt = cpu_slice::<f64>(&s2, &l2)?;
                let dy = cpu_slice::<f64>(&sg, &lg)?;
                let (dx, dw, db) = gn_bwd_loop(x, wt, dy, b, c, h * w, self.groups, self.eps);
                Ok((
                    Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
                    Some(Tensor::from_vec(dw, c, dev)?),
                    Some(Tensor::from_vec(db, c, dev)?),
                ))
            }
            _ => {
                let x = cpu_slice::<f32>(&s1, &l1)?;
                let wt = cpu_slice::<f32>(&s2, &l2)?;
                let dy = cpu_slice::<f32>(&sg, &lg)?;
                let (dx, dw, db) = gn_bwd_loop(x, wt, dy, b, c, h * w, self.groups, self.eps);
                Ok((
                    Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
                    Some(Tensor::from_vec(dw, c, dev)?),
                    Some(Tensor::from_vec(db, c, dev)?),
                ))
            }
        }
    }
}

/// Group normalization with affine parameters; stateless, so training and
/// evaluation share one code path.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vb: &VarBuilder, channels: usize, groups: usize) -> Result<Self> {
        debug_assert!(channels % groups == 0);
        let weight = vb.get_with_hints(channels, "weight", candle_nn::init::ONE)?;
        let bias = vb.get_with_hints(channels, "bias", candle_nn::init::ZERO)?;
        Ok(GroupNorm {
            weight,
            bias,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op3(
            &self.weight,
            &self.bias,
            GroupNormOp {
                groups: self.groups,
                eps: self.eps,
            },
        )
    }
}

/// Numerically stable sigmoid (single-pass custom op in the backend).
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// softplus(x) = ln(1 + e^x), computed stably for both tails.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let abs = (x.relu()? + x.neg()?.relu()?)?;
    x.relu()? + (abs.neg()?.exp()? + 1.0)?.log()?
}

struct SiluOp;

impl candle_core::CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let Some(o) = layout.contiguous_offsets() else {
            candle_core::bail!("fused silu expects a contiguous input")
        };
        match storage {
            CpuStorage::F32(x) => {
                let out: Vec<f32> = x[o.0..o.1]
                    .par_iter()
                    .map(|v| {
                        let s = 1.0 / (1.0 + (-*v as f64).exp());
                        (*v as f64 * s) as f32
                    })
                    .collect();
                Ok((CpuStorage::F32(out), layout.shape().clone()))
            }
            CpuStorage::F64(x) => {
                let out: Vec<f64> = x[o.0..o.1]
                    .par_iter()
                    .map(|v| v / (1.0 + (-v).exp()))
                    .collect();
                Ok((CpuStorage::F64(out), layout.shape().clone()))
            }
            _ => candle_core::bail!("fused silu supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims().to_vec();
        let dev = arg.device();
        let grad_c = grad_res.contiguous()?;
        let (sa, la) = arg.storage_and_layout();
        let (sg, lg) = grad_c.storage_and_layout();
        let grad = match arg.dtype() {
            candle_core::DType::F64 => {
                let x = cpu_slice::<f64>(&sa, &la)?;
                let dy = cpu_slice::<f64>(&sg, &lg)?;
                let dx: Vec<f64> = x
                    .par_iter()
                    .zip(dy.par_iter())
                    .map(|(v, g)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                Tensor::from_vec(dx, dims, dev)?
            }
            _ => {
                let x = cpu_slice::<f32>(&sa, &la)?;
                let dy = cpu_slice::<f32>(&sg, &lg)?;
                let dx: Vec<f32> = x
                    .par_iter()
                    .zip(dy.par_iter())
                    .map(|(v, g)| {
                        let vf = *v as f64;
                        let s = 1.0 / (1.0 + (-vf).exp());
                        (*g as f64 * (s + vf * s * (1.0 - s))) as f32
                    })
                    .collect();
                Tensor::from_vec(dx, dims, dev)?
            }
        };
        Ok(Some(grad))
    }
}

/// silu(x) = x * sigmoid(x), fused forward and backward.
pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SiluOp)
}

struct MishOp;

// tanh(softplus(x)) = 1 - 2/((1+e^x)^2 + 1), so one exponential suffices.
fn mish_scalar(x: f64) -> f64 {
    if x >= 20.0 {
        return x;
    }
    let p = 1.0 + x.exp();
    x * (1.0 - 2.0 / (p * p + 1.0))
}

fn mish_grad_scalar(x: f64) -> f64 {
    if x >= 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let p = 1.0 + e;
    let q = p * p + 1.0;
    let t = 1.0 - 2.0 / q;
    t + x * 4.0 * p * e / (q * q)
}

impl candle_core::CustomOp1 for MishOp {
    fn name(&self) -> &'static str {
        "fused-mish"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let Some(o) = layout.contiguous_offsets() else {
            candle_core::bail!("fused mish expects a contiguous input")
        };
        match storage {
            CpuStorage::F32(x) => {
                let out: Vec<f32> = x[o.0..o.1]
                    .par_iter()
                    .map(|v| mish_scalar(*v as f64) as f32)
                    .collect();
                Ok((CpuStorage::F32(out), layout.shape().clone()))
            }
            CpuStorage::F64(x) => {
                let out: Vec<f64> = x[o.0..o.1].par_iter().map(|v| mish_scalar(*v)).collect();
                Ok((CpuStorage::F64(out), layout.shape().clone()))
            }
            _ => candle_core::bail!("fused mish supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims().to_vec();
        let dev = arg.device();
        let grad_c = grad_res.contiguous()?;
        let (sa, la) = arg.storage_and_layout();
        let (sg, lg) = grad_c.storage_and_layout();
        let grad = match arg.dtype() {
            candle_core::DType::F64 => {
                let x = cpu_slice::<f64>(&sa, &la)?;
                let dy = cpu_slice::<f64>(&sg, &lg)?;
                let dx: Vec<f64> = x
                    .par_iter()
                    .zip(dy.par_iter())
                    .map(|(v, g)| mish_grad_scalar(*v) * g)
                    .collect();
                Tensor::from_vec(dx, dims, dev)?
            }
            _ => {
                let x = cpu_slice::<f32>(&sa, &la)?;
                let dy = cpu_slice::<f32>(&sg, &lg)?;
                let dx: Vec<f32> = x
                    .par_iter()
                    .zip(dy.par_iter())
                    .map(|(v, g)| (mish_grad_scalar(*v as f64) as f32) * g)
                    .collect();
                Tensor::from_vec(dx, dims, dev)?
            }
        };
        Ok(Some(grad))
    }
}

/// mish(x) = x * tanh(softplus(x)).
pub fn mish(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MishOp)
}

/// Softmax along `dim` with a detached max-shift for stability.
pub fn softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    e.broadcast_div(&s)
}

struct SamePadMaxPoolOp {
    kernel: usize,
}

fn maxpool_fwd_loop<T: num_like::Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(h * w)
        .zip(x.par_chunks(h * w))
        .for_each(|(dst, src)| {
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for xx in 0..w {
                let x0 = xx.saturating_sub(r);
                let x1 = (xx + r).min(w - 1);
                let mut best = f64::NEG_INFINITY;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        let v = src[yy * w + xi].to_f64();
                        if v > best {
                            best = v;
                        }
                    }
                }
                dst[y * w + xx] = T::from_f64(best);
            }
        }
    });
    let _ = planes;
    out
}

fn maxpool_bwd_loop<T: num_like::Float>(
    x: &[T],
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    let mut dx = vec![0f64; x.len()];
    dx.par_chunks_mut(h * w)
        .zip(x.par_chunks(h * w))
        .zip(dy.par_chunks(h * w))
        .for_each(|((dgrad, src), dys)| {
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for xx in 0..w {
                let x0 = xx.saturating_sub(r);
                let x1 = (xx + r).min(w - 1);
                // gradient routes to the first maximum in scan order
                let mut best = f64::NEG_INFINITY;
                let mut best_at = y0 * w + x0;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        let v = src[yy * w + xi].to_f64();
                        if v > best {
                            best = v;
                            best_at = yy * w + xi;
                        }
                    }
                }
                dgrad[best_at] += dys[y * w + xx].to_f64();
            }
        }
    });
    let _ = planes;
    dx.into_iter().map(T::from_f64).collect()
}

impl candle_core::CustomOp1 for SamePadMaxPoolOp {
    fn name(&self) -> &'static str {
        "same-pad-maxpool"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let dims = layout.dims();
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let Some(o) = layout.contiguous_offsets() else {
            candle_core::bail!("same-pad maxpool expects a contiguous input")
        };
        let r = (self.kernel - 1) / 2;
        match storage {
            CpuStorage::F32(x) => Ok((
                CpuStorage::F32(maxpool_fwd_loop(&x[o.0..o.1], b * c, h, w, r)),
                layout.shape().clone(),
            )),
            CpuStorage::F64(x) => Ok((
                CpuStorage::F64(maxpool_fwd_loop(&x[o.0..o.1], b * c, h, w, r)),
                layout.shape().clone(),
            )),
            _ => candle_core::bail!("same-pad maxpool supports f32/f64 only"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let r = (self.kernel - 1) / 2;
        let dev = arg.device();
        let grad_c = grad_res.contiguous()?;
        let (sa, la) = arg.storage_and_layout();
        let (sg, lg) = grad_c.storage_and_layout();
        let grad = match arg.dtype() {
            candle_core::DType::F64 => {
                let x = cpu_slice::<f64>(&sa, &la)?;
                let dy = cpu_slice::<f64>(&sg, &lg)?;
                Tensor::from_vec(maxpool_bwd_loop(x, dy, b * c, h, w, r), (b, c, h, w), dev)?
            }
            _ => {
                let x = cpu_slice::<f32>(&sa, &la)?;
                let dy = cpu_slice::<f32>(&sg, &lg)?;
                Tensor::from_vec(maxpool_bwd_loop(x, dy, b * c, h, w, r), (b, c, h, w), dev)?
            }
        };
        Ok(Some(grad))
    }
}

/// Stride-1 max pooling with an odd kernel and same-padding: each output is
/// the max over the valid part of its window.
pub fn same_pad_maxpool(x: &Tensor, kernel: usize) -> candle_core::Result<Tensor> {
    debug_assert!(kernel % 2 == 1 && kernel >= 3);
    x.contiguous()?.apply_op1(SamePadMaxPoolOp { kernel })
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample_nearest_2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Elementwise binary cross-entropy on logits: max(x,0) - x*y + ln(1+e^-|x|).
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let abs = (logits.relu()? + logits.neg()?.relu()?)?;
    let log_term = (abs.neg()?.exp()? + 1.0)?.log()?;
    ((logits.relu()? - (logits * targets)?)? + log_term)?.contiguous()
}

/// Mean of the per-channel spatial means, i.e. global average pooling to (B, C).
pub fn spatial_mean(x: &Tensor) -> candle_core::Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}
