//! Feature pyramid necks.
//!
//! The progressive neck fuses the two finer backbone levels first and then
//! incorporates the deepest level, using per-position softmax weights over
//! the contributing levels (adaptive spatial fusion). A minimal classic
//! top-down/bottom-up path-aggregation neck is kept as the ablation baseline.

use crate::blocks::{ConvBlock, Csp3};
use crate::error::{Error, Result};
use crate::nn::{softmax, upsample_nearest_2x, Conv2d};
use candle_core::Tensor;
use candle_nn::VarBuilder;

/// Position-wise softmax over the level axis of stacked weight-logit maps.
/// Input: one (B, 1, H, W) map per contributing level. Output: (B, n, H, W)
/// weights that are non-negative and sum to 1 at every position.
pub fn asff_weights(lambda_maps: &[Tensor]) -> Result<Tensor> {
    if lambda_maps.is_empty() {
        return Err(Error::shape("asff_weights needs at least one map"));
    }
    let dims = lambda_maps[0].dims().to_vec();
    for m in lambda_maps {
        if m.dims() != dims {
            return Err(Error::shape(format!(
                "weight map dims {:?} differ from {:?}",
                m.dims(),
                dims
            )));
        }
    }
    let stacked = Tensor::cat(lambda_maps, 1)?;
    Ok(softmax(&stacked, 1)?)
}

/// Position-wise convex combination of same-shape feature maps; all channels
/// at a position share that position's weight.
pub fn asff_fuse(inputs: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::shape("asff_fuse needs at least one input"));
    }
    let (b, c, h, w) = inputs[0].dims4().map_err(|e| Error::shape(e.to_string()))?;
    for t in inputs {
        if t.dims() != inputs[0].dims() {
            return Err(Error::shape(format!(
                "fuse input dims {:?} differ from {:?}",
                t.dims(),
                inputs[0].dims()
            )));
        }
    }
    let n = inputs.len();
    if weights.dims() != [b, n, h, w] {
        return Err(Error::shape(format!(
            "weights dims {:?} do not match {} inputs of {:?}",
            weights.dims(),
            n,
            inputs[0].dims()
        )));
    }
    let mut stacked = Vec::with_capacity(n);
    for t in inputs {
        stacked.push(t.reshape((b, 1, c, h, w))?);
    }
    let stacked = Tensor::cat(&stacked, 1)?; // (B, n, C, H, W)
    let w5 = weights.reshape((b, n, 1, h, w))?;
    Ok(stacked.broadcast_mul(&w5)?.sum(1)?)
}

/// Resamples a source level to a target level's spatial grid and channel
/// count: nearest-neighbor upsampling followed by a 1x1 convolution, or one
/// stride-2 convolution per octave when downsampling.
#[derive(Debug, Clone)]
pub struct Resample {
    kind: ResampleKind,
    src_channels: usize,
}

#[derive(Debug, Clone)]
enum ResampleKind {
    Identity,
    Project(ConvBlock),
    Up { octaves: usize, proj: ConvBlock },
    Down { convs: Vec<ConvBlock> },
}

impl Resample {
    /// `src_stride` and `dst_stride` are the pyramid strides (8/16/32); the
    /// spatial ratio between the two levels must be a power of two.
    pub fn new(
        vb: &VarBuilder,
        src_channels: usize,
        dst_channels: usize,
        src_stride: usize,
        dst_stride: usize,
    ) -> Result<Self> {
        let kind = if src_stride == dst_stride {
            if src_channels == dst_channels {
                ResampleKind::Identity
            } else {
                ResampleKind::Project(ConvBlock::cbs(
                    &vb.pp("proj"),
                    src_channels,
                    dst_channels,
                    1,
                    1,
                )?)
            }
        } else if src_stride < dst_stride {
            let ratio = dst_stride / src_stride;
            if !ratio.is_power_of_two() || dst_stride % src_stride != 0 {
                return Err(Error::invalid_config(format!(
                    "resample ratio {dst_stride}/{src_stride} is not a power of 2"
                )));
            }
            let octaves = ratio.trailing_zeros() as usize;
            let mut convs = Vec::with_capacity(octaves);
            for i in 0..octaves {
                // channel count changes on the last octave only
                let (ci, co) = if i + 1 == octaves {
                    (src_channels, dst_channels)
                } else {
                    (src_channels, src_channels)
                };
                convs.push(ConvBlock::cbs(&vb.pp(format!("down{i}")), ci, co, 2, 2)?);
            }
            ResampleKind::Down { convs }
        } else {
            let ratio = src_stride / dst_stride;
            if !ratio.is_power_of_two() || src_stride % dst_stride != 0 {
                return Err(Error::invalid_config(format!(
                    "resample ratio {src_stride}/{dst_stride} is not a power of 2"
                )));
            }
            ResampleKind::Up {
                octaves: ratio.trailing_zeros() as usize,
                proj: ConvBlock::cbs(&vb.pp("proj"), src_channels, dst_channels, 1, 1)?,
            }
        };
        Ok(Resample { kind, src_channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != self.src_channels {
            return Err(Error::shape(format!(
                "resample expects {} channels, got {c}",
                self.src_channels
            )));
        }
        match &self.kind {
            ResampleKind::Identity => Ok(x.clone()),
            ResampleKind::Project(conv) => conv.forward(x),
            ResampleKind::Up { octaves, proj } => {
                let mut y = x.clone();
                for _ in 0..*octaves {
                    y = upsample_nearest_2x(&y)?;
                }
                proj.forward(&y)
            }
            ResampleKind::Down { convs } => {
                let mut y = x.clone();
                for conv in convs {
                    y = conv.forward(&y)?;
                }
                Ok(y)
            }
        }
    }

    pub fn macs(&self, src_h: usize, src_w: usize) -> usize {
        match &self.kind {
            ResampleKind::Identity => 0,
            ResampleKind::Project(conv) => conv.macs(src_h, src_w),
            ResampleKind::Up { octaves, proj } => {
                let scale = 1 << octaves;
                proj.macs(src_h * scale, src_w * scale)
            }
            ResampleKind::Down { convs } => {
                let (mut h, mut w) = (src_h, src_w);
                let mut total = 0;
                for conv in convs {
                    total += conv.macs(h, w);
                    let (nh, nw) = conv.out_hw(h, w);
                    h = nh;
                    w = nw;
                }
                total
            }
        }
    }
}

/// One fusion site: per-level 1x1 convolutions produce scalar weight-logit
/// maps, softmaxed across levels and applied as a convex combination.
#[derive(Debug, Clone)]
pub struct AsffFuse {
    lambda_convs: Vec<Conv2d>,
}

impl AsffFuse {
    pub fn new(vb: &VarBuilder, channels: usize, levels: usize) -> Result<Self> {
        let mut lambda_convs = Vec::with_capacity(levels);
        for i in 0..levels {
            lambda_convs.push(Conv2d::new(
                &vb.pp(format!("lambda{i}")),
                channels,
                1,
                1,
                1,
                0,
                1,
                true,
            )?);
        }
        Ok(AsffFuse { lambda_convs })
    }

    pub fn forward(&self, resampled: &[Tensor]) -> Result<Tensor> {
        if resampled.len() != self.lambda_convs.len() {
            return Err(Error::shape(format!(
                "fusion site expects {} inputs, got {}",
                self.lambda_convs.len(),
                resampled.len()
            )));
        }
        let mut lambdas = Vec::with_capacity(resampled.len());
        for (x, conv) in resampled.iter().zip(&self.lambda_convs) {
            lambdas.push(conv.forward(x)?);
        }
        let weights = asff_weights(&lambdas)?;
        asff_fuse(resampled, &weights)
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.lambda_convs.iter().map(|c| c.macs(h, w)).sum()
    }
}

struct FusionSite {
    resamples: Vec<Option<Resample>>, // None = own level (identity)
    fuse: AsffFuse,
    refine: Csp3,
}

impl FusionSite {
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut resampled = Vec::with_capacity(inputs.len());
        for (x, r) in inputs.iter().zip(&self.resamples) {
            resampled.push(match r {
                Some(r) => r.forward(x)?,
                None => (*x).clone(),
            });
        }
        let fused = self.fuse.forward(&resampled)?;
        self.refine.forward(&fused)
    }
}

/// Progressive pyramid: stage 1 fuses the stride-8 and stride-16 levels at
/// both resolutions, stage 2 incorporates the stride-32 level at all three.
/// Each fusion is followed by one cross-stage-partial refinement block.
pub struct Afpn {
    stage1_l3: FusionSite,
    stage1_l4: FusionSite,
    stage2_l3: FusionSite,
    stage2_l4: FusionSite,
    stage2_l5: FusionSite,
    channels: [usize; 3],
}

impl Afpn {
    pub fn new(vb: &VarBuilder, channels: [usize; 3], refine_repeats: usize) -> Result<Self> {
        let [c3, c4, c5] = channels;
        let site = |vb: &VarBuilder,
                    resamples: Vec<Option<Resample>>,
                    c: usize,
                    n: usize|
         -> Result<FusionSite> {
            Ok(FusionSite {
                resamples,
                fuse: AsffFuse::new(&vb.pp("fuse"), c, n)?,
                refine: Csp3::new(&vb.pp("refine"), c, c, refine_repeats, true, None)?,
            })
        };

        let s1l3 = vb.pp("stage1_l3");
        let stage1_l3 = site(
            &s1l3,
            vec![None, Some(Resample::new(&s1l3.pp("from_p4"), c4, c3, 16, 8)?)],
            c3,
            2,
        )?;
        let s1l4 = vb.pp("stage1_l4");
        let stage1_l4 = site(
            &s1l4,
            vec![Some(Resample::new(&s1l4.pp("from_p3"), c3, c4, 8, 16)?), None],
            c4,
            2,
        )?;
        let s2l3 = vb.pp("stage2_l3");
        let stage2_l3 = site(
            &s2l3,
            vec![
                None,
                Some(Resample::new(&s2l3.pp("from_l4"), c4, c3, 16, 8)?),
                Some(Resample::new(&s2l3.pp("from_l5"), c5, c3, 32, 8)?),
            ],
            c3,
            3,
        )?;
        let s2l4 = vb.pp("stage2_l4");
        let stage2_l4 = site(
            &s2l4,
            vec![
                Some(Resample::new(&s2l4.pp("from_l3"), c3, c4, 8, 16)?),
                None,
                Some(Resample::new(&s2l4.pp("from_l5"), c5, c4, 32, 16)?),
            ],
            c4,
            3,
        )?;
        let s2l5 = vb.pp("stage2_l5");
        let stage2_l5 = site(
            &s2l5,
            vec![
                Some(Resample::new(&s2l5.pp("from_l3"), c3, c5, 8, 32)?),
                Some(Resample::new(&s2l5.pp("from_l4"), c4, c5, 16, 32)?),
                None,
            ],
            c5,
            3,
        )?;
        Ok(Afpn {
            stage1_l3,
            stage1_l4,
            stage2_l3,
            stage2_l4,
            stage2_l5,
            channels,
        })
    }

    pub fn forward(&self, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        validate_pyramid(p3, p4, p5, self.channels)?;
        let n3a = self.stage1_l3.forward(&[p3, p4])?;
        let n4a = self.stage1_l4.forward(&[p3, p4])?;
        let n3 = self.stage2_l3.forward(&[&n3a, &n4a, p5])?;
        let n4 = self.stage2_l4.forward(&[&n3a, &n4a, p5])?;
        let n5 = self.stage2_l5.forward(&[&n3a, &n4a, p5])?;
        Ok((n3, n4, n5))
    }

    /// MACs given the stride-8 level spatial size.
    pub fn macs(&self, h3: usize, w3: usize) -> usize {
        let (h4, w4) = (h3 / 2, w3 / 2);
        let (h5, w5) = (h3 / 4, w3 / 4);
        let site = |s: &FusionSite, hs: [(usize, usize); 3], own: (usize, usize)| -> usize {
            let mut total = s.fuse.macs(own.0, own.1) + s.refine.macs(own.0, own.1);
            for (r, (h, w)) in s.resamples.iter().zip(hs.iter()) {
                if let Some(r) = r {
                    total += r.macs(*h, *w);
                }
            }
            total
        };
        // stage-1 sites only see levels 3 and 4
        site(
            &self.stage1_l3,
            [(h3, w3), (h4, w4), (0, 0)],
            (h3, w3),
        ) + site(
            &self.stage1_l4,
            [(h3, w3), (h4, w4), (0, 0)],
            (h4, w4),
        ) + site(
            &self.stage2_l3,
            [(h3, w3), (h4, w4), (h5, w5)],
            (h3, w3),
        ) + site(
            &self.stage2_l4,
            [(h3, w3), (h4, w4), (h5, w5)],
            (h4, w4),
        ) + site(
            &self.stage2_l5,
            [(h3, w3), (h4, w4), (h5, w5)],
            (h5, w5),
        )
    }
}

fn validate_pyramid(p3: &Tensor, p4: &Tensor, p5: &Tensor, channels: [usize; 3]) -> Result<()> {
    let d3 = p3.dims4().map_err(|e| Error::shape(e.to_string()))?;
    let d4 = p4.dims4().map_err(|e| Error::shape(e.to_string()))?;
    let d5 = p5.dims4().map_err(|e| Error::shape(e.to_string()))?;
    if d3.1 != channels[0] || d4.1 != channels[1] || d5.1 != channels[2] {
        return Err(Error::invalid_config(format!(
            "pyramid channels ({}, {}, {}) do not match neck ({:?})",
            d3.1, d4.1, d5.1, channels
        )));
    }
    if d3.2 != 2 * d4.2 || d3.3 != 2 * d4.3 || d4.2 != 2 * d5.2 || d4.3 != 2 * d5.3 {
        return Err(Error::invalid_config(format!(
            "pyramid levels must halve spatially: {:?} {:?} {:?}",
            d3, d4, d5
        )));
    }
    Ok(())
}

/// Classic top-down + bottom-up path-aggregation neck (ablation baseline).
pub struct Pan {
    lat5: ConvBlock,
    td4: Csp3,
    lat4: ConvBlock,
    td3: Csp3,
    down3: ConvBlock,
    bu4: Csp3,
    down4: ConvBlock,
    bu5: Csp3,
    channels: [usize; 3],
}

impl Pan {
    pub fn new(vb: &VarBuilder, channels: [usize; 3], repeats: usize) -> Result<Self> {
        let [c3, c4, c5] = channels;
        Ok(Pan {
            lat5: ConvBlock::cbs(&vb.pp("lat5"), c5, c4, 1, 1)?,
            td4: Csp3::new(&vb.pp("td4"), c4 * 2, c4, repeats, false, None)?,
            lat4: ConvBlock::cbs(&vb.pp("lat4"), c4, c3, 1, 1)?,
            td3: Csp3::new(&vb.pp("td3"), c3 * 2, c3, repeats, false, None)?,
            down3: ConvBlock::cbs(&vb.pp("down3"), c3, c3, 3, 2)?,
            bu4: Csp3::new(&vb.pp("bu4"), c3 + c3, c4, repeats, false, None)?,
            down4: ConvBlock::cbs(&vb.pp("down4"), c4, c4, 3, 2)?,
            bu5: Csp3::new(&vb.pp("bu5"), c4 * 2, c5, repeats, false, None)?,
            channels,
        })
    }

    pub fn forward(&self, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        validate_pyramid(p3, p4, p5, self.channels)?;
        let x5 = self.lat5.forward(p5)?;
        let t4 = self
            .td4
            .forward(&Tensor::cat(&[&upsample_nearest_2x(&x5)?, p4], 1)?)?;
        let x4 = self.lat4.forward(&t4)?;
        let n3 = self
            .td3
            .forward(&Tensor::cat(&[&upsample_nearest_2x(&x4)?, p3], 1)?)?;
        let n4 = self
            .bu4
            .forward(&Tensor::cat(&[&self.down3.forward(&n3)?, &x4], 1)?)?;
        let n5 = self
            .bu5
            .forward(&Tensor::cat(&[&self.down4.forward(&n4)?, &x5], 1)?)?;
        Ok((n3, n4, n5))
    }

    pub fn macs(&self, h3: usize, w3: usize) -> usize {
        let (h4, w4) = (h3 / 2, w3 / 2);
        let (h5, w5) = (h3 / 4, w3 / 4);
        self.lat5.macs(h5, w5)
            + self.td4.macs(h4, w4)
            + self.lat4.macs(h4, w4)
            + self.td3.macs(h3, w3)
            + self.down3.macs(h3, w3)
            + self.bu4.macs(h4, w4)
            + self.down4.macs(h4, w4)
            + self.bu5.macs(h5, w5)
    }
}

/// Either neck behind one interface.
pub enum Neck {
    Progressive(Afpn),
    PathAggregation(Pan),
}

impl Neck {
    pub fn forward(&self, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        match self {
            Neck::Progressive(n) => n.forward(p3, p4, p5),
            Neck::PathAggregation(n) => n.forward(p3, p4, p5),
        }
    }

    pub fn macs(&self, h3: usize, w3: usize) -> usize {
        match self {
            Neck::Progressive(n) => n.macs(h3, w3),
            Neck::PathAggregation(n) => n.macs(h3, w3),
        }
    }
}
