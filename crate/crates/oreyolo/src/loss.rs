//! Composite detection loss: minimum-point-distance IoU box regression,
//! binary cross-entropy objectness and classification, target assignment,
//! and the per-scale weighted total.

use crate::config::{AnchorSet, LossWeights, STRIDES};
use crate::data::BoxLabel;
use crate::error::{Error, Result};
use crate::head::ANCHORS_PER_SCALE;
use crate::nn::{bce_with_logits, sigmoid as sigmoid_t};
use candle_core::{DType, Tensor};

/// IoU of two corner boxes; degenerate (zero-area) boxes yield 0.
pub fn iou_corner(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Minimum-point-distance IoU: IoU minus the squared distances between the
/// top-left and bottom-right corner pairs, both normalized by the squared
/// image diagonal terms (h^2 + w^2). Range (-2, 1]; equals 1 iff the boxes
/// coincide.
pub fn mpdiou(pred: [f64; 4], gt: [f64; 4], img_w: f64, img_h: f64) -> f64 {
    let d1 = (pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2);
    let d2 = (pred[2] - gt[2]).powi(2) + (pred[3] - gt[3]).powi(2);
    let norm = img_h * img_h + img_w * img_w;
    iou_corner(pred, gt) - d1 / norm - d2 / norm
}

/// Box regression loss: 1 - MPDIoU, in [0, 3).
pub fn mpdiou_loss(pred: [f64; 4], gt: [f64; 4], img_w: f64, img_h: f64) -> f64 {
    1.0 - mpdiou(pred, gt, img_w, img_h)
}

/// Analytic gradient of `mpdiou_loss` with respect to the four predicted
/// corners. Valid away from the IoU non-smoothness set (boxes sharing an
/// edge coordinate or touching boundaries of the overlap region).
pub fn mpdiou_loss_grad(pred: [f64; 4], gt: [f64; 4], img_w: f64, img_h: f64) -> [f64; 4] {
    let [px1, py1, px2, py2] = pred;
    let [gx1, gy1, gx2, gy2] = gt;
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let area_p = (px2 - px1) * (py2 - py1);
    let area_g = (gx2 - gx1) * (gy2 - gy1);

    // d(IoU)/d(pred corner)
    let mut d_iou = [0.0f64; 4];
    if iw > 0.0 && ih > 0.0 {
        let inter = iw * ih;
        let union = area_p + area_g - inter;
        // derivative of the intersection w.r.t. each pred corner
        let di = [
            if px1 > gx1 { -ih } else { 0.0 },
            if py1 > gy1 { -iw } else { 0.0 },
            if px2 < gx2 { ih } else { 0.0 },
            if py2 < gy2 { iw } else { 0.0 },
        ];
        // derivative of the pred area
        let da = [
            -(py2 - py1),
            -(px2 - px1),
            py2 - py1,
            px2 - px1,
        ];
        for k in 0..4 {
            let du = da[k] - di[k];
            d_iou[k] = (di[k] * union - inter * du) / (union * union);
        }
    }

    let norm = img_h * img_h + img_w * img_w;
    let d_pen = [
        2.0 * (px1 - gx1) / norm,
        2.0 * (py1 - gy1) / norm,
        2.0 * (px2 - gx2) / norm,
        2.0 * (py2 - gy2) / norm,
    ];
    // loss = 1 - IoU + penalties
    [
        -d_iou[0] + d_pen[0],
        -d_iou[1] + d_pen[1],
        -d_iou[2] + d_pen[2],
        -d_iou[3] + d_pen[3],
    ]
}

/// Tensor form of MPDIoU over rows of (K, 4) corner boxes, differentiable
/// with respect to `pred`.
pub fn mpdiou_t(pred: &Tensor, gt: &Tensor, img_w: f64, img_h: f64) -> Result<Tensor> {
    let (k, four) = pred.dims2().map_err(|e| Error::shape(e.to_string()))?;
    if four != 4 || gt.dims() != pred.dims() {
        return Err(Error::shape(format!(
            "mpdiou expects (K, 4) boxes, got {:?} and {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let _ = k;
    let col = |t: &Tensor, i: usize| -> candle_core::Result<Tensor> {
        t.narrow(1, i, 1)?.squeeze(1)
    };
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx1, gy1, gx2, gy2) = (col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?);
    let iw = (px2.minimum(&gx2)? - px1.maximum(&gx1)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py1.maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_p = ((&px2 - &px1)? * (&py2 - &py1)?)?;
    let area_g = ((&gx2 - &gx1)? * (&gy2 - &gy1)?)?;
    let union = ((area_p + area_g)? - &inter)?;
    let iou = (inter / union)?;
    let norm = img_h * img_h + img_w * img_w;
    let d1 = ((&px1 - &gx1)?.sqr()? + (&py1 - &gy1)?.sqr()?)?;
    let d2 = ((&px2 - &gx2)?.sqr()? + (&py2 - &gy2)?.sqr()?)?;
    Ok(((iou - (d1 / norm)?)? - (d2 / norm)?)?)
}

fn smooth_target(y: f64, s: f64) -> f64 {
    y * (1.0 - 2.0 * s) + s
}

fn bce_scalar(logit: f64, target: f64) -> f64 {
    // max(x, 0) - x*y + ln(1 + e^-|x|)
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over category logits, with targets smoothed
/// into [s, 1-s].
pub fn bce_cls(pred_logits: &[f64], targets: &[f64], label_smoothing: f64) -> Result<f64> {
    if pred_logits.len() != targets.len() {
        return Err(Error::shape("bce_cls inputs must have equal length"));
    }
    if !(0.0..0.5).contains(&label_smoothing) {
        return Err(Error::invalid_config(format!(
            "label smoothing must be in [0, 0.5), got {label_smoothing}"
        )));
    }
    if pred_logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred_logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| bce_scalar(x, smooth_target(y, label_smoothing)))
        .sum();
    Ok(sum / pred_logits.len() as f64)
}

/// Mean binary cross-entropy over objectness logits with hard {0, 1} targets.
pub fn bce_obj(pred_conf_logits: &[f64], target_conf: &[f64]) -> Result<f64> {
    if pred_conf_logits.len() != target_conf.len() {
        return Err(Error::shape("bce_obj inputs must have equal length"));
    }
    if target_conf.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::Data("objectness targets must be 0 or 1".into()));
    }
    if pred_conf_logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred_conf_logits
        .iter()
        .zip(target_conf)
        .map(|(&x, &y)| bce_scalar(x, y))
        .sum();
    Ok(sum / pred_conf_logits.len() as f64)
}

/// Aspect-ratio threshold for anchor matching.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// One assigned training target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatch {
    pub scale: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
    /// Ground-truth box corners in input pixels.
    pub gt_box: [f64; 4],
    pub class_id: usize,
}

/// Assign ground-truth boxes to anchors and grid cells.
///
/// A ground truth matches anchor `a` when the largest of the four side
/// ratios is below 4.0; each match is placed in the box's own cell and the
/// two nearest neighbor cells (by the fractional part of the center).
pub fn assign_targets(
    gts: &[BoxLabel],
    anchors: &AnchorSet,
    input_size: usize,
) -> Result<Vec<TargetMatch>> {
    let mut out = Vec::new();
    for gt in gts {
        gt.validate()?;
        let cx = gt.cx * input_size as f64;
        let cy = gt.cy * input_size as f64;
        let w = gt.w * input_size as f64;
        let h = gt.h * input_size as f64;
        for (scale, stride) in STRIDES.iter().enumerate() {
            let grid = input_size / stride;
            let gxf = cx / *stride as f64;
            let gyf = cy / *stride as f64;
            let gx0 = (gxf.floor() as isize).clamp(0, grid as isize - 1);
            let gy0 = (gyf.floor() as isize).clamp(0, grid as isize - 1);
            // the cell itself plus the two nearest neighbors
            let mut cells = vec![(gx0, gy0)];
            let fx = gxf - gxf.floor();
            let fy = gyf - gyf.floor();
            if fx < 0.5 && gx0 > 0 {
                cells.push((gx0 - 1, gy0));
            } else if fx > 0.5 && gx0 + 1 < grid as isize {
                cells.push((gx0 + 1, gy0));
            }
            if fy < 0.5 && gy0 > 0 {
                cells.push((gx0, gy0 - 1));
            } else if fy > 0.5 && gy0 + 1 < grid as isize {
                cells.push((gx0, gy0 + 1));
            }
            for (anchor, &(aw, ah)) in anchors.scales[scale].iter().enumerate() {
                let ratio = (w / aw)
                    .max(aw / w)
                    .max(h / ah)
                    .max(ah / h);
                if ratio < ANCHOR_RATIO_LIMIT {
                    for &(gx, gy) in &cells {
                        out.push(TargetMatch {
                            scale,
                            anchor,
                            gx: gx as usize,
                            gy: gy as usize,
                            gt_box: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                            class_id: gt.class_id,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Loss components; each is the weighted contribution so that
/// total = box + obj + cls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

/// Batch of assigned targets: per-image matches plus the image index.
#[derive(Debug, Clone, Default)]
pub struct BatchTargets {
    pub matches: Vec<(usize, TargetMatch)>,
}

impl BatchTargets {
    pub fn assign(
        labels_per_image: &[Vec<BoxLabel>],
        anchors: &AnchorSet,
        input_size: usize,
    ) -> Result<Self> {
        let mut matches = Vec::new();
        for (b, labels) in labels_per_image.iter().enumerate() {
            for m in assign_targets(labels, anchors, input_size)? {
                matches.push((b, m));
            }
        }
        Ok(BatchTargets { matches })
    }
}

/// The composite loss over all three scales.
///
/// Per scale k: balance_k * (a_box * mean(1 - MPDIoU) over matches
/// + a_obj * mean BCE over all cells + a_cls * mean BCE over match
/// categories). Box and classification terms average over matched cells
/// only; objectness averages over every cell with binary targets.
pub fn total_loss(
    preds: &[Tensor; 3],
    targets: &BatchTargets,
    weights: &LossWeights,
    anchors: &AnchorSet,
    num_classes: usize,
    input_size: usize,
    label_smoothing: f64,
) -> Result<(LossBreakdown, Tensor)> {
    let dtype = preds[0].dtype();
    let dev = preds[0].device().clone();
    let per_anchor = 5 + num_classes;
    let img = input_size as f64;

    let mut box_total = Tensor::zeros((), dtype, &dev)?;
    let mut obj_total = box_total.clone();
    let mut cls_total = box_total.clone();

    for scale in 0..3 {
        let map = &preds[scale];
        let (b, c, h, w) = map.dims4().map_err(|e| Error::shape(e.to_string()))?;
        if c != ANCHORS_PER_SCALE * per_anchor {
            return Err(Error::shape(format!(
                "scale {scale}: expected {} channels, got {c}",
                ANCHORS_PER_SCALE * per_anchor
            )));
        }
        let balance = weights.alpha_balance[scale];
        let stride = STRIDES[scale] as f64;

        // (B, A, 5+nc, H, W) -> (B, A, H, W, 5+nc) -> (N, 5+nc)
        let cells = map
            .reshape((b, ANCHORS_PER_SCALE, per_anchor, h, w))?
            .permute((0, 1, 3, 4, 2))?
            .contiguous()?
            .reshape((b * ANCHORS_PER_SCALE * h * w, per_anchor))?;

        // objectness over every cell
        let matches: Vec<&(usize, TargetMatch)> = targets
            .matches
            .iter()
            .filter(|(_, m)| m.scale == scale)
            .collect();
        let mut obj_target = vec![0f64; b * ANCHORS_PER_SCALE * h * w];
        let flat_index =
            |bi: usize, a: usize, gy: usize, gx: usize| ((bi * ANCHORS_PER_SCALE + a) * h + gy) * w + gx;
        for (bi, m) in &matches {
            obj_target[flat_index(*bi, m.anchor, m.gy, m.gx)] = 1.0;
        }
        let obj_logits = cells.narrow(1, 4, 1)?.squeeze(1)?;
        let obj_t = Tensor::from_vec(obj_target, b * ANCHORS_PER_SCALE * h * w, &dev)?
            .to_dtype(dtype)?;
        let obj_term = bce_with_logits(&obj_logits, &obj_t)?.mean_all()?;
        obj_total = (obj_total + obj_term.affine(balance * weights.alpha_obj, 0.0)?)?;

        if matches.is_empty() {
            continue;
        }
        let k = matches.len();

        // gather matched rows
        let idx: Vec<u32> = matches
            .iter()
            .map(|(bi, m)| flat_index(*bi, m.anchor, m.gy, m.gx) as u32)
            .collect();
        let idx_t = Tensor::new(idx.as_slice(), &dev)?;
        let sel = cells.index_select(&idx_t, 0)?; // (K, 5+nc)

        // decode matched boxes (kept differentiable)
        let cell_xy: Vec<f64> = matches
            .iter()
            .flat_map(|(_, m)| [m.gx as f64, m.gy as f64])
            .collect();
        let anchor_wh: Vec<f64> = matches
            .iter()
            .flat_map(|(_, m)| {
                let (aw, ah) = anchors.scales[scale][m.anchor];
                [aw, ah]
            })
            .collect();
        let cell_xy = Tensor::from_vec(cell_xy, (k, 2), &dev)?.to_dtype(dtype)?;
        let anchor_wh = Tensor::from_vec(anchor_wh, (k, 2), &dev)?.to_dtype(dtype)?;

        let txy = sigmoid_t(&sel.narrow(1, 0, 2)?)?;
        let center = ((txy.affine(2.0, -0.5)? + cell_xy)?).affine(stride, 0.0)?;
        let twh = sigmoid_t(&sel.narrow(1, 2, 2)?)?;
        let size = (twh.affine(2.0, 0.0)?.sqr()? * anchor_wh)?;
        let half = size.affine(0.5, 0.0)?;
        let pred_boxes = Tensor::cat(&[(&center - &half)?, (&center + &half)?], 1)?;

        let gt: Vec<f64> = matches.iter().flat_map(|(_, m)| m.gt_box).collect();
        let gt_boxes = Tensor::from_vec(gt, (k, 4), &dev)?.to_dtype(dtype)?;

        let box_vec = mpdiou_t(&pred_boxes, &gt_boxes, img, img)?;
        let box_term = (box_vec.affine(-1.0, 1.0)?).mean_all()?; // mean(1 - mpdiou)
        box_total = (box_total + box_term.affine(balance * weights.alpha_box, 0.0)?)?;

        // classification over matched cells
        if num_classes > 0 {
            let cls_logits = sel.narrow(1, 5, num_classes)?;
            let mut cls_target = vec![0f64; k * num_classes];
            for (row, (_, m)) in matches.iter().enumerate() {
                for class in 0..num_classes {
                    let y = if class == m.class_id { 1.0 } else { 0.0 };
                    cls_target[row * num_classes + class] = smooth_target(y, label_smoothing);
                }
            }
            let cls_t =
                Tensor::from_vec(cls_target, (k, num_classes), &dev)?.to_dtype(dtype)?;
            let cls_term = bce_with_logits(&cls_logits, &cls_t)?.mean_all()?;
            cls_total = (cls_total + cls_term.affine(balance * weights.alpha_cls, 0.0)?)?;
        }
    }

    let total = ((&box_total + &obj_total)? + &cls_total)?;
    let breakdown = LossBreakdown {
        box_loss: box_total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        obj_loss: obj_total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        cls_loss: cls_total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        total: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    };
    Ok((breakdown, total))
}
