//! Spatial pooling pyramids for the deepest backbone level: the fast chained
//! variant and the cross-stage-partial wrapper that adds a residual path.

use crate::config::SppKind;
use crate::error::{Error, Result};
use crate::nn::same_pad_maxpool;
use crate::blocks::ConvBlock;
use candle_core::Tensor;
use candle_nn::VarBuilder;

/// Pooling block configuration.
#[derive(Debug, Clone, Copy)]
pub struct SppSpec {
    pub kind: SppKind,
    pub pool_kernel: usize,
    pub channels: usize,
}

impl SppSpec {
    pub fn new(kind: SppKind, channels: usize) -> Self {
        SppSpec {
            kind,
            pool_kernel: 5,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel < 3 || self.pool_kernel % 2 == 0 {
            return Err(Error::invalid_config(format!(
                "pool kernel must be odd and >= 3, got {}",
                self.pool_kernel
            )));
        }
        Ok(())
    }
}

/// Three chained stride-1 same-padding max pools; returns the concatenation
/// [x, p1, p2, p3] with 4x the input channels.
pub fn pool_pyramid(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::invalid_config(format!(
            "pool kernel must be odd and >= 3, got {kernel}"
        )));
    }
    let p1 = same_pad_maxpool(x, kernel)?;
    let p2 = same_pad_maxpool(&p1, kernel)?;
    let p3 = same_pad_maxpool(&p2, kernel)?;
    Ok(Tensor::cat(&[x, &p1, &p2, &p3], 1)?)
}

/// Fast pooling pyramid: channel reduction, chained pools, projection back.
#[derive(Debug, Clone)]
pub struct Sppf {
    cv1: ConvBlock,
    cv2: ConvBlock,
    kernel: usize,
}

impl Sppf {
    pub fn new(vb: &VarBuilder, spec: SppSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let hidden = c / 2;
        Ok(Sppf {
            cv1: ConvBlock::cbs(&vb.pp("cv1"), c, hidden, 1, 1)?,
            cv2: ConvBlock::cbs(&vb.pp("cv2"), hidden * 4, c, 1, 1)?,
            kernel: spec.pool_kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.cv1.forward(x)?;
        let cat = pool_pyramid(&h, self.kernel)?;
        self.cv2.forward(&cat)
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.cv1.macs(h, w) + self.cv2.macs(h, w)
    }
}

/// Pooling pyramid wrapped in a cross-stage-partial structure: one path runs
/// convolutions around the chained pools, the other is a single-convolution
/// residual path; both are concatenated and projected back.
#[derive(Debug, Clone)]
pub struct Sppfcspc {
    cv1: ConvBlock,
    cv2: ConvBlock,
    cv3: ConvBlock,
    cv4: ConvBlock,
    cv5: ConvBlock,
    cv6: ConvBlock,
    cv7: ConvBlock,
    kernel: usize,
    channels: usize,
}

impl Sppfcspc {
    pub fn new(vb: &VarBuilder, spec: SppSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let hidden = c; // width chosen to satisfy the published parameter budget
        Ok(Sppfcspc {
            cv1: ConvBlock::cbs(&vb.pp("cv1"), c, hidden, 1, 1)?,
            cv2: ConvBlock::cbs(&vb.pp("cv2"), c, hidden, 1, 1)?,
            cv3: ConvBlock::cbs(&vb.pp("cv3"), hidden, hidden, 3, 1)?,
            cv4: ConvBlock::cbs(&vb.pp("cv4"), hidden, hidden, 1, 1)?,
            cv5: ConvBlock::cbs(&vb.pp("cv5"), hidden * 4, hidden, 1, 1)?,
            cv6: ConvBlock::cbs(&vb.pp("cv6"), hidden, hidden, 3, 1)?,
            cv7: ConvBlock::cbs(&vb.pp("cv7"), hidden * 2, c, 1, 1)?,
            kernel: spec.pool_kernel,
            channels: c,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "pooling block expects {} channels, got {c}",
                self.channels
            )));
        }
        let a = self.cv4.forward(&self.cv3.forward(&self.cv1.forward(x)?)?)?;
        let cat = pool_pyramid(&a, self.kernel)?;
        let a = self.cv6.forward(&self.cv5.forward(&cat)?)?;
        let b = self.cv2.forward(x)?;
        self.cv7.forward(&Tensor::cat(&[&a, &b], 1)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.cv1.macs(h, w)
            + self.cv2.macs(h, w)
            + self.cv3.macs(h, w)
            + self.cv4.macs(h, w)
            + self.cv5.macs(h, w)
            + self.cv6.macs(h, w)
            + self.cv7.macs(h, w)
    }
}

/// Either pooling block behind one interface.
#[derive(Debug, Clone)]
pub enum SppBlock {
    Fast(Sppf),
    CrossStage(Sppfcspc),
}

impl SppBlock {
    pub fn new(vb: &VarBuilder, spec: SppSpec) -> Result<Self> {
        Ok(match spec.kind {
            SppKind::Sppf => SppBlock::Fast(Sppf::new(vb, spec)?),
            SppKind::Sppfcspc => SppBlock::CrossStage(Sppfcspc::new(vb, spec)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            SppBlock::Fast(b) => b.forward(x),
            SppBlock::CrossStage(b) => b.forward(x),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        match self {
            SppBlock::Fast(b) => b.macs(h, w),
            SppBlock::CrossStage(b) => b.macs(h, w),
        }
    }
}
