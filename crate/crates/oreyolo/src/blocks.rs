//! Convolutional building blocks: conv + norm + activation units and the
//! cross-stage-partial block with its optional embedded attention.

use crate::ema::{EmaAttention, EmaConfig};
use crate::error::{Error, Result};
use crate::nn::{mish, Conv2d, GroupNorm};
use candle_core::Tensor;
use candle_nn::VarBuilder;

/// Block kinds used by the backbone layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// conv + norm + SiLU
    Cbs,
    /// conv + norm + Mish
    Cbm,
    Csp3,
    Csp3Ema,
}

/// Declarative description of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub repeats: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid_config("block repeats must be >= 1"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid_config(format!(
                "block stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }
}

fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Silu,
    Mish,
}

/// conv (bias-free) + group norm + activation. SiLU for CBS, Mish for CBM.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
    act: Activation,
    in_channels: usize,
}

impl ConvBlock {
    fn with_act(
        vb: &VarBuilder,
        c1: usize,
        c2: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        let padding = (kernel - 1) / 2;
        let conv = Conv2d::new(&vb.pp("conv"), c1, c2, kernel, stride, padding, 1, false)?;
        let norm = GroupNorm::new(&vb.pp("norm"), c2, norm_groups(c2))?;
        Ok(ConvBlock {
            conv,
            norm,
            act,
            in_channels: c1,
        })
    }

    /// CBS: conv + norm + SiLU.
    pub fn cbs(vb: &VarBuilder, c1: usize, c2: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_act(vb, c1, c2, kernel, stride, Activation::Silu)
    }

    /// CBM: conv + norm + Mish.
    pub fn cbm(vb: &VarBuilder, c1: usize, c2: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_act(vb, c1, c2, kernel, stride, Activation::Mish)
    }

    pub fn from_spec(vb: &VarBuilder, spec: &BlockSpec) -> Result<Self> {
        spec.validate()?;
        let act = match spec.kind {
            BlockKind::Cbm => Activation::Mish,
            _ => Activation::Silu,
        };
        Self::with_act(
            vb,
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            act,
        )
    }

    /// Skip the input-gradient computation; for blocks fed directly by data.
    pub fn no_input_grad(mut self) -> Self {
        self.conv = self.conv.no_input_grad();
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv block expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        let y = match self.act {
            Activation::Silu => crate::nn::silu(&y)?,
            Activation::Mish => mish(&y)?,
        };
        Ok(y)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv.out_hw(h, w)
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.conv.macs(h, w)
    }
}

/// Two stacked convs with an optional residual connection.
#[derive(Debug, Clone)]
struct BottleneckBlock {
    cv1: ConvBlock,
    cv2: ConvBlock,
    shortcut: bool,
}

impl BottleneckBlock {
    fn new(vb: &VarBuilder, channels: usize, shortcut: bool) -> Result<Self> {
        Ok(BottleneckBlock {
            cv1: ConvBlock::cbs(&vb.pp("cv1"), channels, channels, 1, 1)?,
            cv2: ConvBlock::cbs(&vb.pp("cv2"), channels, channels, 3, 1)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            Ok((x + y)?)
        } else {
            Ok(y)
        }
    }

    fn macs(&self, h: usize, w: usize) -> usize {
        self.cv1.macs(h, w) + self.cv2.macs(h, w)
    }
}

/// Cross-stage-partial block: the input is split into a bottleneck path and a
/// direct path, concatenated, optionally reweighted by the attention block,
/// and projected to the output width.
#[derive(Debug, Clone)]
pub struct Csp3 {
    cv1: ConvBlock,
    cv2: ConvBlock,
    cv3: ConvBlock,
    bottlenecks: Vec<BottleneckBlock>,
    attention: Option<EmaAttention>,
    in_channels: usize,
}

impl Csp3 {
    pub fn new(
        vb: &VarBuilder,
        c1: usize,
        c2: usize,
        repeats: usize,
        shortcut: bool,
        ema: Option<EmaConfig>,
    ) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::invalid_config("csp3 repeats must be >= 1"));
        }
        let hidden = c2 / 2;
        let cv1 = ConvBlock::cbs(&vb.pp("cv1"), c1, hidden, 1, 1)?;
        let cv2 = ConvBlock::cbs(&vb.pp("cv2"), c1, hidden, 1, 1)?;
        let cv3 = ConvBlock::cbs(&vb.pp("cv3"), 2 * hidden, c2, 1, 1)?;
        let mut bottlenecks = Vec::with_capacity(repeats);
        for i in 0..repeats {
            bottlenecks.push(BottleneckBlock::new(&vb.pp(format!("m{i}")), hidden, shortcut)?);
        }
        let attention = match ema {
            Some(mut cfg) => {
                cfg.channels = 2 * hidden;
                Some(EmaAttention::new(&vb.pp("attn"), cfg)?)
            }
            None => None,
        };
        Ok(Csp3 {
            cv1,
            cv2,
            cv3,
            bottlenecks,
            attention,
            in_channels: c1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "csp3 expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut main = self.cv1.forward(x)?;
        for b in &self.bottlenecks {
            main = b.forward(&main)?;
        }
        let direct = self.cv2.forward(x)?;
        let mut merged = Tensor::cat(&[&main, &direct], 1)?;
        if let Some(attn) = &self.attention {
            merged = attn.forward(&merged)?;
        }
        self.cv3.forward(&merged)
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        let mut total = self.cv1.macs(h, w) + self.cv2.macs(h, w) + self.cv3.macs(h, w);
        for b in &self.bottlenecks {
            total += b.macs(h, w);
        }
        if let Some(attn) = &self.attention {
            total += attn.macs(h, w);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::{VarBuilder, VarMap};

    fn vb() -> (VarMap, VarBuilder<'static>) {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        (varmap, vb)
    }

    fn param_count(m: &VarMap) -> usize {
        m.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    #[test]
    fn conv_block_shapes_follow_stride_arithmetic() {
        let dev = Device::Cpu;
        let (_m, vb) = vb();
        // stem-style CBM, k6 s2
        let cbm = ConvBlock::cbm(&vb.pp("stem"), 3, 16, 6, 2).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &dev).unwrap();
        assert_eq!(cbm.forward(&x).unwrap().dims(), &[1, 16, 32, 32]);
        // downsample CBS
        let cbs = ConvBlock::cbs(&vb.pp("d1"), 16, 32, 3, 2).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 16, 32, 32), &dev).unwrap();
        assert_eq!(cbs.forward(&x).unwrap().dims(), &[1, 32, 16, 16]);
        // pointwise CBS keeps spatial dims
        let cbs = ConvBlock::cbs(&vb.pp("p1"), 32, 32, 1, 1).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 32, 16, 16), &dev).unwrap();
        assert_eq!(cbs.forward(&x).unwrap().dims(), &[1, 32, 16, 16]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let (_m, vb) = vb();
        let cbs = ConvBlock::cbs(&vb, 16, 32, 3, 1).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 8, 16, 16), &Device::Cpu).unwrap();
        assert!(cbs.forward(&x).is_err());
    }

    #[test]
    fn csp3_preserves_shape_with_and_without_attention() {
        let dev = Device::Cpu;
        for ema in [None, Some(EmaConfig { channels: 32, groups: 8 })] {
            let (_m, vb) = vb();
            let block = Csp3::new(&vb, 32, 32, 1, true, ema).unwrap();
            let x = Tensor::randn(0f32, 1f32, (1, 32, 16, 16), &dev).unwrap();
            let y = block.forward(&x).unwrap();
            assert_eq!(y.dims(), &[1, 32, 16, 16]);
        }
    }

    #[test]
    fn csp3_parameters_grow_with_repeats() {
        let mut prev = 0usize;
        for repeats in 1..4 {
            let (m, vb) = vb();
            let _ = Csp3::new(&vb, 32, 32, repeats, true, None).unwrap();
            let count = param_count(&m);
            assert!(
                count > prev,
                "repeats {repeats}: {count} params not > {prev}"
            );
            prev = count;
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (_m, vb) = vb();
        let block = Csp3::new(&vb, 16, 16, 2, true, None).unwrap();
        let x = Tensor::randn(0f32, 1f32, (2, 16, 12, 12), &Device::Cpu).unwrap();
        let a = block.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = block.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
