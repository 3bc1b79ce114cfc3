//! Grouped multi-scale attention: channel groups are gated along each spatial
//! direction by a shared 1x1 branch, a parallel 3x3 branch captures local
//! cross-channel structure, and the two branches exchange pooled descriptors
//! to form spatial attention maps that reweight the input.

use crate::error::{Error, Result};
use crate::nn::{bmm, sigmoid, softmax, Conv2d, GroupNorm};
use candle_core::Tensor;
use candle_nn::VarBuilder;

/// Configuration of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct EmaConfig {
    pub channels: usize,
    pub groups: usize,
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::invalid_config("attention groups must be >= 1"));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::invalid_config(format!(
                "channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        if self.channels / self.groups < 4 {
            return Err(Error::invalid_config(format!(
                "sub-group width {} must be >= 4",
                self.channels / self.groups
            )));
        }
        Ok(())
    }
}

/// 2D global average pooling to one value per channel, shape (B, C).
pub fn global_avg_pool2d(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global pool over empty spatial dims"));
    }
    Ok(x.mean(3)?.mean(2)?)
}

/// Directional pooling: row means (B, C, H, 1) and column means (B, C, 1, W).
pub fn directional_pool(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
    if h == 0 || w == 0 {
        return Err(Error::shape("directional pool over empty spatial dims"));
    }
    let h_profile = x.mean_keepdim(3)?;
    let w_profile = x.mean_keepdim(2)?;
    Ok((h_profile, w_profile))
}

#[derive(Debug, Clone)]
pub struct EmaAttention {
    cfg: EmaConfig,
    conv1x1: Conv2d,
    conv3x3: Conv2d,
    norm: GroupNorm,
}

impl EmaAttention {
    pub fn new(vb: &VarBuilder, cfg: EmaConfig) -> Result<Self> {
        cfg.validate()?;
        // each channel group keeps its own branch weights
        let conv1x1 = Conv2d::new(
            &vb.pp("conv1x1"),
            cfg.channels,
            cfg.channels,
            1,
            1,
            0,
            cfg.groups,
            true,
        )?;
        let conv3x3 = Conv2d::new(
            &vb.pp("conv3x3"),
            cfg.channels,
            cfg.channels,
            3,
            1,
            1,
            cfg.groups,
            true,
        )?;
        // per-channel normalization of the gated branch
        let norm = GroupNorm::new(&vb.pp("norm"), cfg.channels, cfg.channels)?;
        Ok(EmaAttention {
            cfg,
            conv1x1,
            conv3x3,
            norm,
        })
    }

    pub fn config(&self) -> EmaConfig {
        self.cfg
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "attention expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let g = self.cfg.groups;
        let cg = c / g;

        // 1x1 branch: shared conv over the concatenated directional profiles,
        // split back into per-direction sigmoid gates. The two gates combine
        // into a rank-1 spatial map via a batched outer product.
        let (h_prof, w_prof) = directional_pool(x)?;
        let w_prof_t = w_prof.transpose(2, 3)?; // (B, C, W, 1)
        let profiles = Tensor::cat(&[&h_prof, &w_prof_t], 2)?.contiguous()?; // (B, C, H+W, 1)
        let mixed = self.conv1x1.forward(&profiles)?;
        let gate_h = sigmoid(&mixed.narrow(2, 0, h)?.contiguous()?)?.reshape((b * c, h, 1))?;
        let gate_w = sigmoid(&mixed.narrow(2, h, w)?.contiguous()?)?.reshape((b * c, 1, w))?;
        let gate2d = bmm(&gate_h, &gate_w)?.reshape((b, c, h, w))?;
        let gated = (x * gate2d)?;
        let x1 = self.norm.forward(&gated)?;

        // 3x3 branch: local cross-channel interaction.
        let x2 = self.conv3x3.forward(x)?;

        // Cross-spatial learning: each branch's pooled descriptor (softmax
        // over the sub-group axis) is contracted with the other branch's
        // flattened features, giving two spatial maps per group.
        let z1 = global_avg_pool2d(&x1)?.reshape((b, g, 1, cg))?;
        let z2 = global_avg_pool2d(&x2)?.reshape((b, g, 1, cg))?;
        let z1 = softmax(&z1, 3)?;
        let z2 = softmax(&z2, 3)?;
        let f1 = x1.reshape((b, g, cg, h * w))?;
        let f2 = x2.reshape((b, g, cg, h * w))?;
        let m1 = bmm(&z1.reshape((b * g, 1, cg))?, &f2.reshape((b * g, cg, h * w))?)?;
        let m2 = bmm(&z2.reshape((b * g, 1, cg))?, &f1.reshape((b * g, cg, h * w))?)?;
        let attn = sigmoid(&(m1 + m2)?)?; // (B*G, 1, HW)
        // expand each group's map across its channels with an outer product,
        // keeping every elementwise operand contiguous
        let ones = Tensor::ones((cg, 1), x.dtype(), x.device())?;
        let attn_full = bmm(&ones, &attn.reshape((b * g, 1, h * w))?)?;
        let out = (x.reshape((b * g, cg, h * w))? * attn_full)?.reshape((b, c, h, w))?;
        Ok(out)
    }

    /// MACs of the two grouped convolutions and the descriptor products.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let conv = self.conv1x1.macs(h + w, 1) + self.conv3x3.macs(h, w);
        let matmul = 2 * self.cfg.channels * h * w;
        conv + matmul
    }
}
