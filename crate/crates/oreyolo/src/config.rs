//! Model and training configuration, including the flat `key=value` config
//! file format and the width/depth scaling rules.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Which neck fuses the three backbone levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckKind {
    /// Progressive pyramid with adaptive spatial fusion.
    Afpn,
    /// Classic top-down + bottom-up path aggregation (ablation baseline).
    Pan,
}

/// Which spatial pyramid pooling block sits on the deepest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SppKind {
    /// Pooling pyramid wrapped in a cross-stage-partial structure.
    Sppfcspc,
    /// Plain fast pooling pyramid (ablation baseline).
    Sppf,
}

/// Per-scale anchor priors in input-image pixels, 3 anchors x 3 scales,
/// ordered stride 8, 16, 32.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub scales: [[(f64, f64); 3]; 3],
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            scales: [
                [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
                [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
                [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
            ],
        }
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        for scale in &self.scales {
            for &(w, h) in scale {
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::invalid_config(format!(
                        "anchor dims must be positive, got {w}x{h}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn format(&self) -> String {
        self.scales
            .iter()
            .map(|s| {
                s.iter()
                    .map(|(w, h)| format!("{w}x{h}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    fn parse(text: &str) -> Result<Self> {
        let mut scales = [[(0.0, 0.0); 3]; 3];
        let groups: Vec<&str> = text.split(';').collect();
        if groups.len() != 3 {
            return Err(Error::invalid_config(format!(
                "anchors must have 3 scale groups, got {}",
                groups.len()
            )));
        }
        for (si, group) in groups.iter().enumerate() {
            let pairs: Vec<&str> = group.split(',').collect();
            if pairs.len() != 3 {
                return Err(Error::invalid_config(format!(
                    "anchor scale group {si} must have 3 anchors, got {}",
                    pairs.len()
                )));
            }
            for (ai, pair) in pairs.iter().enumerate() {
                let (w, h) = pair.split_once('x').ok_or_else(|| {
                    Error::invalid_config(format!("anchor `{pair}` is not WxH"))
                })?;
                scales[si][ai] = (
                    w.trim().parse().map_err(|_| {
                        Error::invalid_config(format!("bad anchor width `{w}`"))
                    })?,
                    h.trim().parse().map_err(|_| {
                        Error::invalid_config(format!("bad anchor height `{h}`"))
                    })?,
                );
            }
        }
        let set = AnchorSet { scales };
        set.validate()?;
        Ok(set)
    }
}

/// Structural hyperparameters of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub num_classes: usize,
    pub input_size: usize,
    pub use_ema: bool,
    pub neck_kind: NeckKind,
    pub spp_kind: SppKind,
    pub ema_groups: usize,
    pub anchors: AnchorSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth_multiple: 0.20,
            width_multiple: 0.25,
            num_classes: 2,
            input_size: 640,
            use_ema: true,
            neck_kind: NeckKind::Afpn,
            spp_kind: SppKind::Sppfcspc,
            ema_groups: 8,
            anchors: AnchorSet::default(),
        }
    }
}

/// Base channel widths of the stem and the four downsampling stages.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Base bottleneck repeat counts of the four stages.
pub const BASE_REPEATS: [usize; 4] = [3, 6, 9, 3];
/// Strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Scale a base channel count by the width multiple, rounding up to the
/// nearest multiple of 8 and never below 8.
pub fn scale_channels(base: usize, width_multiple: f64) -> Result<usize> {
    if base == 0 {
        return Err(Error::invalid_config(
            "channel base must be positive".to_string(),
        ));
    }
    let scaled = (base as f64 * width_multiple / 8.0).ceil() as usize * 8;
    Ok(scaled.max(8))
}

/// Scale a base repeat count by the depth multiple: max(round(n*d), 1).
pub fn scale_depth(base_repeats: usize, depth_multiple: f64) -> usize {
    ((base_repeats as f64 * depth_multiple).round() as usize).max(1)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_multiple > 0.0 && self.depth_multiple <= 1.0) {
            return Err(Error::invalid_config(format!(
                "depth_multiple must be in (0, 1], got {}",
                self.depth_multiple
            )));
        }
        if !(self.width_multiple > 0.0 && self.width_multiple <= 1.0) {
            return Err(Error::invalid_config(format!(
                "width_multiple must be in (0, 1], got {}",
                self.width_multiple
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid_config("num_classes must be >= 1".to_string()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::invalid_config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.ema_groups == 0 {
            return Err(Error::invalid_config("ema_groups must be >= 1".to_string()));
        }
        if self.use_ema {
            for base in BASE_WIDTHS {
                let c = scale_channels(base, self.width_multiple)?;
                if c % self.ema_groups != 0 {
                    return Err(Error::invalid_config(format!(
                        "scaled channel count {c} is not divisible by ema_groups {}",
                        self.ema_groups
                    )));
                }
            }
        }
        self.anchors.validate()
    }

    /// Scaled channel widths: [stem, stage1, stage2 (P3), stage3 (P4), stage4 (P5)].
    pub fn widths(&self) -> Result<[usize; 5]> {
        let mut w = [0usize; 5];
        for (i, base) in BASE_WIDTHS.iter().enumerate() {
            w[i] = scale_channels(*base, self.width_multiple)?;
        }
        Ok(w)
    }

    /// Scaled bottleneck repeats for the four backbone stages.
    pub fn repeats(&self) -> [usize; 4] {
        let mut r = [0usize; 4];
        for (i, base) in BASE_REPEATS.iter().enumerate() {
            r[i] = scale_depth(*base, self.depth_multiple);
        }
        r
    }
}

/// Loss component weights and the per-scale balance factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha_box: f64,
    pub alpha_obj: f64,
    pub alpha_cls: f64,
    /// One factor per output scale, ordered 80x80, 40x40, 20x20 (strides 8/16/32).
    pub alpha_balance: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_box: 0.05,
            alpha_obj: 1.0,
            alpha_cls: 0.5,
            alpha_balance: [4.0, 1.0, 0.4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_box,
            self.alpha_obj,
            self.alpha_cls,
            self.alpha_balance[0],
            self.alpha_balance[1],
            self.alpha_balance[2],
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid_config(
                "loss weights must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Learning-rate schedule. The published recipe uses a constant rate; a
/// cosine decay hook is provided for desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Full training configuration (Table-1 style hyperparameters plus the
/// structural config).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    /// First-moment coefficient of the decoupled-weight-decay optimizer.
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub nms_iou: f64,
    pub confidence: f64,
    pub mixup_prob: f64,
    pub mosaic_prob: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Run validation every this many epochs (always after the last).
    pub eval_every: usize,
    /// Stop once val mAP50 reaches this value, if set.
    pub early_stop_map50: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            epochs: 100,
            learning_rate: 1e-3,
            momentum: 0.937,
            weight_decay: 5e-4,
            label_smoothing: 0.005,
            nms_iou: 0.45,
            confidence: 0.25,
            mixup_prob: 0.5,
            mosaic_prob: 0.5,
            seed: 0,
            batch_size: 8,
            lr_schedule: LrSchedule::Constant,
            eval_every: 1,
            early_stop_map50: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid_config("Epoch must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid_config("learning rate must be > 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config("momentum must be in [0, 1)".to_string()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::invalid_config(
                "label-smoothing must be in [0, 0.5)".to_string(),
            ));
        }
        for (name, v) in [
            ("Nms_iou", self.nms_iou),
            ("Confidence", self.confidence),
            ("Mixup probability", self.mixup_prob),
            ("Mosaic probability", self.mosaic_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_config(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be >= 1".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid_config("eval_every must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Serialize as a flat `key=value` file using the published parameter names.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "depth_multiple={}", self.model.depth_multiple);
        let _ = writeln!(s, "width_multiple={}", self.model.width_multiple);
        let _ = writeln!(s, "Input shape={}", self.model.input_size);
        let _ = writeln!(s, "Epoch={}", self.epochs);
        let _ = writeln!(s, "Optimizer=AdamW");
        let _ = writeln!(s, "learning rate={}", self.learning_rate);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "Nms_iou={}", self.nms_iou);
        let _ = writeln!(s, "label-smoothing={}", self.label_smoothing);
        let _ = writeln!(s, "Confidence={}", self.confidence);
        let _ = writeln!(s, "Mixup probability={}", self.mixup_prob);
        let _ = writeln!(s, "Mosaic probability={}", self.mosaic_prob);
        let _ = writeln!(s, "num_classes={}", self.model.num_classes);
        let _ = writeln!(s, "use_ema={}", self.model.use_ema);
        let _ = writeln!(
            s,
            "neck={}",
            match self.model.neck_kind {
                NeckKind::Afpn => "AFPN",
                NeckKind::Pan => "PAN",
            }
        );
        let _ = writeln!(
            s,
            "spp={}",
            match self.model.spp_kind {
                SppKind::Sppfcspc => "SPPFCSPC",
                SppKind::Sppf => "SPPF",
            }
        );
        let _ = writeln!(s, "ema_groups={}", self.model.ema_groups);
        let _ = writeln!(s, "anchors={}", self.model.anchors.format());
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "alpha_box={}", self.loss.alpha_box);
        let _ = writeln!(s, "alpha_obj={}", self.loss.alpha_obj);
        let _ = writeln!(s, "alpha_cls={}", self.loss.alpha_cls);
        let _ = writeln!(
            s,
            "alpha_balance={},{},{}",
            self.loss.alpha_balance[0], self.loss.alpha_balance[1], self.loss.alpha_balance[2]
        );
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(
            s,
            "lr_schedule={}",
            match self.lr_schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::Cosine => "cosine",
            }
        );
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        if let Some(t) = self.early_stop_map50 {
            let _ = writeln!(s, "early_stop_map50={t}");
        }
        s
    }

    /// Parse the flat `key=value` format. Unknown keys are rejected by name.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid_config(format!("line {}: `{line}` is not key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| {
                    Error::invalid_config(format!("key `{key}`: `{v}` is not a number"))
                })
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| {
                    Error::invalid_config(format!("key `{key}`: `{v}` is not a count"))
                })
            };
            let parse_bool = |v: &str| -> Result<bool> {
                match v {
                    "true" | "1" => Ok(true),
                    "false" | "0" => Ok(false),
                    _ => Err(Error::invalid_config(format!(
                        "key `{key}`: `{v}` is not a boolean"
                    ))),
                }
            };
            match key {
                "depth_multiple" => cfg.model.depth_multiple = parse_f64(value)?,
                "width_multiple" => cfg.model.width_multiple = parse_f64(value)?,
                "Input shape" => {
                    // accept either `640` or `640x640`
                    let v = value.split_once('x').map(|(a, _)| a).unwrap_or(value);
                    cfg.model.input_size = parse_usize(v.trim())?;
                }
                "Epoch" => cfg.epochs = parse_usize(value)?,
                "Optimizer" => {
                    if !value.eq_ignore_ascii_case("adamw") {
                        return Err(Error::invalid_config(format!(
                            "key `Optimizer`: only AdamW is supported, got `{value}`"
                        )));
                    }
                }
                "learning rate" => cfg.learning_rate = parse_f64(value)?,
                "momentum" => cfg.momentum = parse_f64(value)?,
                "Nms_iou" => cfg.nms_iou = parse_f64(value)?,
                "label-smoothing" => cfg.label_smoothing = parse_f64(value)?,
                "Confidence" => cfg.confidence = parse_f64(value)?,
                "Mixup probability" => cfg.mixup_prob = parse_f64(value)?,
                "Mosaic probability" => cfg.mosaic_prob = parse_f64(value)?,
                "num_classes" => cfg.model.num_classes = parse_usize(value)?,
                "use_ema" => cfg.model.use_ema = parse_bool(value)?,
                "neck" => {
                    cfg.model.neck_kind = match value {
                        "AFPN" => NeckKind::Afpn,
                        "PAN" => NeckKind::Pan,
                        _ => {
                            return Err(Error::invalid_config(format!(
                                "key `neck`: expected AFPN or PAN, got `{value}`"
                            )))
                        }
                    }
                }
                "spp" => {
                    cfg.model.spp_kind = match value {
                        "SPPFCSPC" => SppKind::Sppfcspc,
                        "SPPF" => SppKind::Sppf,
                        _ => {
                            return Err(Error::invalid_config(format!(
                                "key `spp`: expected SPPFCSPC or SPPF, got `{value}`"
                            )))
                        }
                    }
                }
                "ema_groups" => cfg.model.ema_groups = parse_usize(value)?,
                "anchors" => cfg.model.anchors = AnchorSet::parse(value)?,
                "weight_decay" => cfg.weight_decay = parse_f64(value)?,
                "alpha_box" => cfg.loss.alpha_box = parse_f64(value)?,
                "alpha_obj" => cfg.loss.alpha_obj = parse_f64(value)?,
                "alpha_cls" => cfg.loss.alpha_cls = parse_f64(value)?,
                "alpha_balance" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(Error::invalid_config(
                            "key `alpha_balance`: expected 3 comma-separated values".to_string(),
                        ));
                    }
                    for (i, p) in parts.iter().enumerate() {
                        cfg.loss.alpha_balance[i] = parse_f64(p.trim())?;
                    }
                }
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| {
                        Error::invalid_config(format!("key `seed`: `{value}` is not an integer"))
                    })?
                }
                "batch_size" => cfg.batch_size = parse_usize(value)?,
                "lr_schedule" => {
                    cfg.lr_schedule = match value {
                        "constant" => LrSchedule::Constant,
                        "cosine" => LrSchedule::Cosine,
                        _ => {
                            return Err(Error::invalid_config(format!(
                                "key `lr_schedule`: expected constant or cosine, got `{value}`"
                            )))
                        }
                    }
                }
                "eval_every" => cfg.eval_every = parse_usize(value)?,
                "early_stop_map50" => cfg.early_stop_map50 = Some(parse_f64(value)?),
                other => {
                    return Err(Error::invalid_config(format!(
                        "unknown config key `{other}`"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_scaling_matches_published_multiples() {
        assert_eq!(scale_channels(64, 0.25).unwrap(), 16);
        assert_eq!(scale_channels(256, 0.25).unwrap(), 64);
        assert_eq!(scale_channels(1024, 0.25).unwrap(), 256);
        // rounding up to a multiple of 8, floor of 8
        assert_eq!(scale_channels(100, 0.25).unwrap(), 32);
        assert_eq!(scale_channels(8, 0.25).unwrap(), 8);
        assert!(scale_channels(0, 0.25).is_err());
    }

    #[test]
    fn channel_scaling_is_monotone_and_multiple_of_8() {
        let mut prev = 0;
        for base in 1..2048 {
            let c = scale_channels(base, 0.25).unwrap();
            assert_eq!(c % 8, 0);
            assert!(c >= prev, "scale_channels not monotone at base {base}");
            prev = c;
        }
    }

    #[test]
    fn depth_scaling_matches_published_multiples() {
        assert_eq!(scale_depth(3, 0.20), 1);
        assert_eq!(scale_depth(9, 0.20), 2);
        assert_eq!(scale_depth(1, 0.20), 1);
        assert_eq!(scale_depth(6, 0.20), 1);
    }

    #[test]
    fn config_roundtrip_is_identity() {
        let mut cfg = TrainConfig::default();
        cfg.model.num_classes = 5;
        cfg.model.use_ema = false;
        cfg.model.neck_kind = NeckKind::Pan;
        cfg.model.spp_kind = SppKind::Sppf;
        cfg.learning_rate = 2.5e-4;
        cfg.seed = 1234;
        cfg.early_stop_map50 = Some(0.62);
        let text = cfg.to_kv();
        let parsed = TrainConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainConfig::from_kv("depth_multiple=0.2\nbogus_key=3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "error should name the key: {msg}");
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = 600; // not a multiple of 32
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.depth_multiple = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.ema_groups = 3; // 16 % 3 != 0
        cfg.use_ema = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_widths_and_repeats() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.widths().unwrap(), [16, 32, 64, 128, 256]);
        assert_eq!(cfg.repeats(), [1, 1, 2, 1]);
    }
}
