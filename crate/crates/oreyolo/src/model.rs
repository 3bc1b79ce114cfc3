//! Backbone and full-model assembly.
//!
//! The backbone is a five-level convolutional trunk: a coarse-kernel stem,
//! then four stride-2 stages each followed by a cross-stage-partial block.
//! The attention-augmented variant embeds the grouped attention in the first
//! three stages' blocks; the deepest stage keeps the plain block. The deepest
//! level passes through the pooling pyramid before the neck fuses all three.

use crate::blocks::{ConvBlock, Csp3};
use crate::config::{ModelConfig, NeckKind, STRIDES};
use crate::ema::EmaConfig;
use crate::error::{Error, Result};
use crate::head::DetectHead;
use crate::neck::{Afpn, Neck, Pan};
use crate::sppf::{SppBlock, SppSpec};
use candle_core::Tensor;
use candle_nn::{VarBuilder, VarMap};

pub struct Backbone {
    stem: ConvBlock,
    downs: [ConvBlock; 4],
    stages: [Csp3; 4],
    widths: [usize; 5],
}

impl Backbone {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths()?;
        let r = cfg.repeats();
        let ema_for = |stage: usize| -> Option<EmaConfig> {
            // attention embedded in the first three stages; the deepest stage
            // keeps the plain block (parameter budget)
            if cfg.use_ema && stage < 3 {
                Some(EmaConfig {
                    channels: w[stage + 1],
                    groups: cfg.ema_groups,
                })
            } else {
                None
            }
        };
        let stem = ConvBlock::cbm(&vb.pp("stem"), 3, w[0], 6, 2)?.no_input_grad();
        let downs = [
            ConvBlock::cbs(&vb.pp("down0"), w[0], w[1], 3, 2)?,
            ConvBlock::cbs(&vb.pp("down1"), w[1], w[2], 3, 2)?,
            ConvBlock::cbs(&vb.pp("down2"), w[2], w[3], 3, 2)?,
            ConvBlock::cbs(&vb.pp("down3"), w[3], w[4], 3, 2)?,
        ];
        let stages = [
            Csp3::new(&vb.pp("stage0"), w[1], w[1], r[0], true, ema_for(0))?,
            Csp3::new(&vb.pp("stage1"), w[2], w[2], r[1], true, ema_for(1))?,
            Csp3::new(&vb.pp("stage2"), w[3], w[3], r[2], true, ema_for(2))?,
            Csp3::new(&vb.pp("stage3"), w[4], w[4], r[3], true, ema_for(3))?,
        ];
        Ok(Backbone {
            stem,
            downs,
            stages,
            widths: w,
        })
    }

    /// Channel widths of the three pyramid outputs (strides 8/16/32).
    pub fn out_channels(&self) -> [usize; 3] {
        [self.widths[2], self.widths[3], self.widths[4]]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let x = self.stem.forward(x)?;
        let x = self.stages[0].forward(&self.downs[0].forward(&x)?)?;
        let p3 = self.stages[1].forward(&self.downs[1].forward(&x)?)?;
        let p4 = self.stages[2].forward(&self.downs[2].forward(&p3)?)?;
        let p5 = self.stages[3].forward(&self.downs[3].forward(&p4)?)?;
        Ok((p3, p4, p5))
    }

    pub fn macs(&self, input: usize) -> usize {
        let mut total = self.stem.macs(input, input);
        let mut s = input / 2;
        for i in 0..4 {
            total += self.downs[i].macs(s, s);
            s /= 2;
            total += self.stages[i].macs(s, s);
        }
        total
    }
}

/// The assembled detector.
pub struct Model {
    backbone: Backbone,
    spp: SppBlock,
    neck: Neck,
    head: DetectHead,
    cfg: ModelConfig,
}

impl Model {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&vb.pp("backbone"), cfg)?;
        let [c3, c4, c5] = backbone.out_channels();
        let spp = SppBlock::new(&vb.pp("spp"), SppSpec::new(cfg.spp_kind, c5))?;
        let neck = match cfg.neck_kind {
            NeckKind::Afpn => Neck::Progressive(Afpn::new(&vb.pp("neck"), [c3, c4, c5], 1)?),
            NeckKind::Pan => Neck::PathAggregation(Pan::new(&vb.pp("neck"), [c3, c4, c5], 1)?),
        };
        let head = DetectHead::new(&vb.pp("head"), [c3, c4, c5], cfg.num_classes)?;
        Ok(Model {
            backbone,
            spp,
            neck,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Raw per-scale prediction maps, shape (B, 3*(5+nc), H_s, W_s).
    pub fn forward(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let (_, c, h, w) = x.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != 3 {
            return Err(Error::shape(format!("input must have 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "input dims must be multiples of 32, got {h}x{w}"
            )));
        }
        let (p3, p4, p5) = self.backbone.forward(x)?;
        let p5 = self.spp.forward(&p5)?;
        let (n3, n4, n5) = self.neck.forward(&p3, &p4, &p5)?;
        self.head.forward(&n3, &n4, &n5)
    }

    /// Total multiply-accumulates of one forward pass at the given square
    /// input size (convolutions and attention products).
    pub fn macs(&self, input: usize) -> usize {
        let s8 = input / STRIDES[0];
        let s32 = input / STRIDES[2];
        self.backbone.macs(input)
            + self.spp.macs(s32, s32)
            + self.neck.macs(s8, s8)
            + self.head.macs(s8, s8)
    }

    /// Set the detection-prior bias of the head's objectness logits so the
    /// initial objectness probability is low; standard practice that keeps
    /// early training stable. Called on freshly initialized weights only.
    pub fn init_head_priors(&self, varmap: &VarMap) -> Result<()> {
        let per_anchor = 5 + self.cfg.num_classes;
        let data = varmap.data().lock().unwrap();
        for (name, var) in data.iter() {
            if name.contains(".head.") && name.ends_with(".bias")
                || name.starts_with("head.") && name.ends_with(".bias")
            {
                let n = var.elem_count();
                if n % per_anchor != 0 {
                    continue;
                }
                let mut bias = vec![0f32; n];
                for a in 0..n / per_anchor {
                    bias[a * per_anchor + 4] = -4.0;
                }
                let t = Tensor::from_vec(bias, n, var.device())?.to_dtype(var.dtype())?;
                var.set(&t)?;
            }
        }
        Ok(())
    }
}

/// Exact count of trainable parameter elements in a variable store.
pub fn param_count(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// Re-initialize every variable deterministically from the seed: Kaiming
/// normal for convolution kernels (4-D), ones for normalization weights,
/// zeros for biases. Variables are visited in name order so two runs with
/// the same seed start from identical weights.
pub fn deterministic_init(varmap: &VarMap, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n = var.elem_count();
        let values: Vec<f32> = if dims.len() == 4 {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            (0..n)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    (z * std) as f32
                })
                .collect()
        } else if name.ends_with(".weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}
