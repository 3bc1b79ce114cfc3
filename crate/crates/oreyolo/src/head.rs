//! Multi-scale detection head: per-scale 1x1 prediction convolutions and the
//! decoding of raw cell outputs into candidate detections.

use crate::config::{AnchorSet, STRIDES};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use candle_core::Tensor;
use candle_nn::VarBuilder;

/// One decoded detection in input-image pixels, corner coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Data(format!(
                "detection has non-positive extent: ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Data(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    /// Serialized line format: `class_id confidence x1 y1 x2 y2`, pixels with
    /// 4 decimal places.
    pub fn to_line(&self) -> String {
        format!(
            "{} {:.4} {:.4} {:.4} {:.4} {:.4}",
            self.class_id, self.confidence, self.x1, self.y1, self.x2, self.y2
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Data(format!(
                "detection line must have 6 fields, got {}: `{line}`",
                parts.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad number `{s}` in detection line")))
        };
        Ok(Detection {
            class_id: parts[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad class id `{}`", parts[0])))?,
            confidence: parse(parts[1])?,
            x1: parse(parts[2])?,
            y1: parse(parts[3])?,
            x2: parse(parts[4])?,
            y2: parse(parts[5])?,
        })
    }
}

pub const ANCHORS_PER_SCALE: usize = 3;

/// Per-scale 1x1 prediction convolutions (with bias) producing
/// 3 * (5 + num_classes) channels.
pub struct DetectHead {
    convs: Vec<Conv2d>,
    num_classes: usize,
}

impl DetectHead {
    pub fn new(vb: &VarBuilder, in_channels: [usize; 3], num_classes: usize) -> Result<Self> {
        let out = ANCHORS_PER_SCALE * (5 + num_classes);
        let mut convs = Vec::with_capacity(3);
        for (i, c) in in_channels.iter().enumerate() {
            convs.push(Conv2d::new(&vb.pp(format!("s{i}")), *c, out, 1, 1, 0, 1, true)?);
        }
        Ok(DetectHead {
            convs,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, n3: &Tensor, n4: &Tensor, n5: &Tensor) -> Result<[Tensor; 3]> {
        Ok([
            self.convs[0].forward(n3)?,
            self.convs[1].forward(n4)?,
            self.convs[2].forward(n5)?,
        ])
    }

    pub fn macs(&self, h3: usize, w3: usize) -> usize {
        self.convs[0].macs(h3, w3)
            + self.convs[1].macs(h3 / 2, w3 / 2)
            + self.convs[2].macs(h3 / 4, w3 / 4)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode raw head outputs into detection candidates for one image.
///
/// Per cell and anchor: center = (cell + 2*sigmoid(t) - 0.5) * stride, size =
/// (2*sigmoid(t))^2 * anchor, confidence = sigmoid(obj) * max sigmoid(class),
/// boxes clipped to the image bounds.
pub fn decode_predictions(
    raw: &[Tensor; 3],
    anchors: &AnchorSet,
    input_size: usize,
    num_classes: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let per_anchor = 5 + num_classes;
    for (scale, map) in raw.iter().enumerate() {
        let (b, c, h, w) = map.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if b != 1 {
            return Err(Error::shape(format!(
                "decode expects a single image, got batch {b}"
            )));
        }
        if c != ANCHORS_PER_SCALE * per_anchor {
            return Err(Error::shape(format!(
                "scale {scale}: expected {} channels, got {c}",
                ANCHORS_PER_SCALE * per_anchor
            )));
        }
        let stride = STRIDES[scale] as f64;
        let data = map.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let at = |ch: usize, gy: usize, gx: usize| data[ch * plane + gy * w + gx] as f64;
        for a in 0..ANCHORS_PER_SCALE {
            let base = a * per_anchor;
            let (aw, ah) = anchors.scales[scale][a];
            for gy in 0..h {
                for gx in 0..w {
                    let tx = at(base, gy, gx);
                    let ty = at(base + 1, gy, gx);
                    let tw = at(base + 2, gy, gx);
                    let th = at(base + 3, gy, gx);
                    let obj = sigmoid(at(base + 4, gy, gx));
                    let mut best_cls = 0usize;
                    let mut best_p = f64::NEG_INFINITY;
                    for k in 0..num_classes {
                        let p = at(base + 5 + k, gy, gx);
                        if p > best_p {
                            best_p = p;
                            best_cls = k;
                        }
                    }
                    let confidence = obj * sigmoid(best_p);
                    let cx = (gx as f64 + 2.0 * sigmoid(tx) - 0.5) * stride;
                    let cy = (gy as f64 + 2.0 * sigmoid(ty) - 0.5) * stride;
                    let bw = (2.0 * sigmoid(tw)).powi(2) * aw;
                    let bh = (2.0 * sigmoid(th)).powi(2) * ah;
                    let lim = input_size as f64;
                    let x1 = (cx - bw / 2.0).clamp(0.0, lim);
                    let y1 = (cy - bh / 2.0).clamp(0.0, lim);
                    let x2 = (cx + bw / 2.0).clamp(0.0, lim);
                    let y2 = (cy + bh / 2.0).clamp(0.0, lim);
                    if x2 > x1 && y2 > y1 {
                        out.push(Detection {
                            class_id: best_cls,
                            confidence,
                            x1,
                            y1,
                            x2,
                            y2,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn zeros_raw(nc: usize, sizes: [usize; 3]) -> [Tensor; 3] {
        let c = ANCHORS_PER_SCALE * (5 + nc);
        [
            Tensor::zeros((1, c, sizes[0], sizes[0]), candle_core::DType::F32, &Device::Cpu)
                .unwrap(),
            Tensor::zeros((1, c, sizes[1], sizes[1]), candle_core::DType::F32, &Device::Cpu)
                .unwrap(),
            Tensor::zeros((1, c, sizes[2], sizes[2]), candle_core::DType::F32, &Device::Cpu)
                .unwrap(),
        ]
    }

    #[test]
    fn zero_logits_decode_to_anchor_sized_boxes_at_cell_centers() {
        let mut anchors = AnchorSet::default();
        anchors.scales[2][0] = (32.0, 32.0);
        let raw = zeros_raw(2, [8, 4, 2]);
        let dets = decode_predictions(&raw, &anchors, 64, 2).unwrap();
        // find the stride-32 anchor-0 cell (0,0) detection: center (16, 16)
        let d = dets
            .iter()
            .find(|d| {
                (d.x1 - 0.0).abs() < 1e-9
                    && (d.y1 - 0.0).abs() < 1e-9
                    && (d.x2 - 32.0).abs() < 1e-9
                    && (d.y2 - 32.0).abs() < 1e-9
            })
            .expect("anchor-sized box at cell center");
        assert!((d.confidence - 0.25).abs() < 1e-9, "sigmoid(0)^2 = 0.25");
    }

    #[test]
    fn grid_coverage_counts_all_cells_and_anchors() {
        let raw = zeros_raw(2, [80, 40, 20]);
        let dets = decode_predictions(&raw, &AnchorSet::default(), 640, 2).unwrap();
        assert_eq!(dets.len(), 3 * (80 * 80 + 40 * 40 + 20 * 20));
        assert_eq!(dets.len(), 25200);
    }

    #[test]
    fn decoded_boxes_are_clipped_to_image_bounds() {
        let c = ANCHORS_PER_SCALE * 7;
        let raw = [
            Tensor::randn(0f32, 3f32, (1, c, 8, 8), &Device::Cpu).unwrap(),
            Tensor::randn(0f32, 3f32, (1, c, 4, 4), &Device::Cpu).unwrap(),
            Tensor::randn(0f32, 3f32, (1, c, 2, 2), &Device::Cpu).unwrap(),
        ];
        let dets = decode_predictions(&raw, &AnchorSet::default(), 64, 2).unwrap();
        for d in dets {
            assert!(d.x1 >= 0.0 && d.y1 >= 0.0 && d.x2 <= 64.0 && d.y2 <= 64.0);
            assert!(d.confidence >= 0.0 && d.confidence <= 1.0);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let raw = zeros_raw(3, [8, 4, 2]); // built for nc=3
        assert!(decode_predictions(&raw, &AnchorSet::default(), 64, 2).is_err());
    }

    #[test]
    fn detection_line_roundtrip() {
        let d = Detection {
            class_id: 1,
            confidence: 0.8731,
            x1: 12.3456,
            y1: 34.0,
            x2: 128.0,
            y2: 256.5,
        };
        let line = d.to_line();
        assert_eq!(line, "1 0.8731 12.3456 34.0000 128.0000 256.5000");
        let parsed = Detection::from_line(&line).unwrap();
        assert_eq!(parsed.class_id, 1);
        assert!((parsed.confidence - 0.8731).abs() < 1e-9);
        assert!((parsed.x2 - 128.0).abs() < 1e-9);
    }
}
