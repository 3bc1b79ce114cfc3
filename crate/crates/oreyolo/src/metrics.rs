//! Detection evaluation: greedy matching, all-point interpolated average
//! precision, and the mAP50 / mAP75 / mAP50-95 aggregation.

use crate::data::BoxLabel;
use crate::error::{Error, Result};
use crate::head::Detection;
use crate::loss::iou_corner;
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    let mut t = [0.0; 10];
    for (i, v) in t.iter_mut().enumerate() {
        *v = 0.5 + 0.05 * i as f64;
    }
    t
}

/// Metric bundle for one class or the class average.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
}

/// Per-class and averaged evaluation results.
#[derive(Debug, Clone, Default)]
pub struct EvalResult {
    pub per_class: Vec<(usize, Metrics)>,
    pub overall: Metrics,
}

impl EvalResult {
    /// Flat key-value report.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut emit = |prefix: &str, m: &Metrics| {
            let _ = writeln!(s, "{prefix}.precision={:.6}", m.precision);
            let _ = writeln!(s, "{prefix}.recall={:.6}", m.recall);
            let _ = writeln!(s, "{prefix}.mAP50={:.6}", m.map50);
            let _ = writeln!(s, "{prefix}.mAP75={:.6}", m.map75);
            let _ = writeln!(s, "{prefix}.mAP50-95={:.6}", m.map50_95);
        };
        for (class, m) in &self.per_class {
            emit(&format!("class{class}"), m);
        }
        emit("overall", &self.overall);
        s
    }

    /// CSV with one row per class plus the overall row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,mAP50,mAP75,mAP50-95\n");
        for (class, m) in &self.per_class {
            let _ = writeln!(
                s,
                "{class},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.precision, m.recall, m.map50, m.map75, m.map50_95
            );
        }
        let _ = writeln!(
            s,
            "overall,{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.overall.precision,
            self.overall.recall,
            self.overall.map50,
            self.overall.map75,
            self.overall.map50_95
        );
        s
    }
}

#[derive(Debug, Clone)]
struct DetRecord {
    image: usize,
    class: usize,
    confidence: f64,
    corners: [f64; 4],
}

#[derive(Debug, Clone)]
struct GtRecord {
    image: usize,
    class: usize,
    corners: [f64; 4],
}

/// Greedy-match detections (already sorted by descending confidence) for one
/// class at one IoU threshold; returns per-detection TP flags and the gt count.
fn match_class(
    dets: &[&DetRecord],
    gts: &[&GtRecord],
    iou_thr: f64,
) -> (Vec<bool>, usize) {
    let mut matched = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for (di, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.image != det.image {
                continue;
            }
            let overlap = iou_corner(det.corners, gt.corners);
            if overlap >= iou_thr {
                match best {
                    None => best = Some((gi, overlap)),
                    Some((_, b)) if overlap > b => best = Some((gi, overlap)),
                    _ => {}
                }
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp[di] = true;
        }
    }
    (tp, gts.len())
}

/// IoU between two corner boxes, re-exported for evaluation call sites.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_corner(a, b)
}

/// Area under the monotone-envelope precision-recall curve (all-point
/// interpolation) from per-detection TP flags in confidence order.
fn ap_from_tp_flags(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    if tp.is_empty() {
        return 0.0;
    }
    let mut cum_tp = 0usize;
    let mut points = Vec::with_capacity(tp.len()); // (recall, precision)
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        let precision = cum_tp as f64 / (i + 1) as f64;
        let recall = cum_tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    // monotone envelope from the right, integrated over recall increments
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut max_right = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        max_right[i] = running;
    }
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * max_right[i];
            prev_recall = recall;
        }
    }
    ap
}

/// Average precision for one collection of detections and ground truths
/// (treated as a single image). Detections are sorted by descending
/// confidence internally; ties keep input order.
pub fn average_precision(
    dets: &[Detection],
    gts: &[BoxLabel],
    iou_thr: f64,
    img_w: f64,
    img_h: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::invalid_config(format!(
            "iou threshold {iou_thr} outside [0, 1]"
        )));
    }
    let per_image = [(dets.to_vec(), gts.to_vec())];
    let (det_recs, gt_recs) = build_records(&per_image, img_w, img_h);
    let classes: BTreeSet<usize> = gt_recs.iter().map(|g| g.class).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for class in &classes {
        let dets_c: Vec<&DetRecord> = det_recs.iter().filter(|d| d.class == *class).collect();
        let gts_c: Vec<&GtRecord> = gt_recs.iter().filter(|g| g.class == *class).collect();
        let (tp, n_gt) = match_class(&dets_c, &gts_c, iou_thr);
        total += ap_from_tp_flags(&tp, n_gt);
    }
    Ok(total / classes.len() as f64)
}

fn build_records(
    per_image: &[(Vec<Detection>, Vec<BoxLabel>)],
    img_w: f64,
    img_h: f64,
) -> (Vec<DetRecord>, Vec<GtRecord>) {
    let mut det_recs = Vec::new();
    let mut gt_recs = Vec::new();
    for (image, (dets, gts)) in per_image.iter().enumerate() {
        for d in dets {
            det_recs.push(DetRecord {
                image,
                class: d.class_id,
                confidence: d.confidence,
                corners: [d.x1, d.y1, d.x2, d.y2],
            });
        }
        for g in gts {
            gt_recs.push(GtRecord {
                image,
                class: g.class_id,
                corners: g.to_corners(img_w, img_h),
            });
        }
    }
    // global confidence order, stable under ties
    det_recs.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    (det_recs, gt_recs)
}

/// Evaluate a whole split: per-class AP at the ten thresholds plus
/// precision/recall at IoU 0.5 over the supplied (already thresholded)
/// detections. Classes absent from the ground truth are skipped.
pub fn evaluate_detections(
    per_image: &[(Vec<Detection>, Vec<BoxLabel>)],
    img_w: f64,
    img_h: f64,
) -> Result<EvalResult> {
    let (det_recs, gt_recs) = build_records(per_image, img_w, img_h);
    let classes: BTreeSet<usize> = gt_recs.iter().map(|g| g.class).collect();
    let thresholds = iou_thresholds();
    let mut per_class = Vec::new();
    for class in &classes {
        let dets_c: Vec<&DetRecord> = det_recs.iter().filter(|d| d.class == *class).collect();
        let gts_c: Vec<&GtRecord> = gt_recs.iter().filter(|g| g.class == *class).collect();
        let mut aps = [0.0; 10];
        for (ti, thr) in thresholds.iter().enumerate() {
            let (tp, n_gt) = match_class(&dets_c, &gts_c, *thr);
            aps[ti] = ap_from_tp_flags(&tp, n_gt);
        }
        // operating-point precision/recall at IoU 0.5
        let (tp, n_gt) = match_class(&dets_c, &gts_c, 0.5);
        let tp_n = tp.iter().filter(|v| **v).count();
        let precision = if dets_c.is_empty() {
            0.0
        } else {
            tp_n as f64 / dets_c.len() as f64
        };
        let recall = if n_gt == 0 { 0.0 } else { tp_n as f64 / n_gt as f64 };
        per_class.push((
            *class,
            Metrics {
                precision,
                recall,
                map50: aps[0],
                map75: aps[5],
                map50_95: aps.iter().sum::<f64>() / 10.0,
            },
        ));
    }
    let n = per_class.len().max(1) as f64;
    let mut overall = Metrics::default();
    for (_, m) in &per_class {
        overall.precision += m.precision / n;
        overall.recall += m.recall / n;
        overall.map50 += m.map50 / n;
        overall.map75 += m.map75 / n;
        overall.map50_95 += m.map50_95 / n;
    }
    Ok(EvalResult { per_class, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, confidence: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id,
            confidence,
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
        }
    }

    fn gt(class_id: usize, corners: [f64; 4], img: f64) -> BoxLabel {
        BoxLabel {
            class_id,
            cx: (corners[0] + corners[2]) / 2.0 / img,
            cy: (corners[1] + corners[3]) / 2.0 / img,
            w: (corners[2] - corners[0]) / img,
            h: (corners[3] - corners[1]) / img,
        }
    }

    #[test]
    fn exact_single_detection_scores_one() {
        let g = vec![gt(0, [10.0, 10.0, 30.0, 30.0], 100.0)];
        let d = vec![det(0, 0.9, [10.0, 10.0, 30.0, 30.0])];
        let ap = average_precision(&d, &g, 0.5, 100.0, 100.0).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_scores_zero() {
        let g = vec![gt(0, [10.0, 10.0, 30.0, 30.0], 100.0)];
        let ap = average_precision(&[], &g, 0.5, 100.0, 100.0).unwrap();
        assert_eq!(ap, 0.0);
    }

    /// Exhaustive reference: recompute the PR curve point by point, then
    /// integrate the envelope by scanning for the max precision to the right.
    fn ap_reference(dets: &[Detection], gts: &[BoxLabel], thr: f64, img: f64) -> f64 {
        let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
        if classes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for class in &classes {
            let mut dets_c: Vec<&Detection> =
                dets.iter().filter(|d| d.class_id == *class).collect();
            dets_c.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
            let gts_c: Vec<[f64; 4]> = gts
                .iter()
                .filter(|g| g.class_id == *class)
                .map(|g| g.to_corners(img, img))
                .collect();
            // greedy matching
            let mut matched = vec![false; gts_c.len()];
            let mut flags = Vec::new();
            for d in &dets_c {
                let mut best = None;
                let mut best_iou = -1.0;
                for (gi, g) in gts_c.iter().enumerate() {
                    if matched[gi] {
                        continue;
                    }
                    let v = iou_corner([d.x1, d.y1, d.x2, d.y2], *g);
                    if v >= thr && v > best_iou {
                        best_iou = v;
                        best = Some(gi);
                    }
                }
                if let Some(gi) = best {
                    matched[gi] = true;
                    flags.push(true);
                } else {
                    flags.push(false);
                }
            }
            // PR points and brute-force envelope integral
            let n = flags.len();
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for i in 0..n {
                let tp: usize = flags[..=i].iter().filter(|v| **v).count();
                let r = tp as f64 / gts_c.len() as f64;
                if r > prev_r {
                    // max precision over all points with recall >= r
                    let mut pmax = 0.0f64;
                    for j in i..n {
                        let tpj: usize = flags[..=j].iter().filter(|v| **v).count();
                        let rj = tpj as f64 / gts_c.len() as f64;
                        if rj >= r {
                            pmax = pmax.max(tpj as f64 / (j + 1) as f64);
                        }
                    }
                    ap += (r - prev_r) * pmax;
                    prev_r = r;
                }
            }
            total += ap;
        }
        total / classes.len() as f64
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<BoxLabel>) {
        let img = 64.0;
        let n_gt = rng.gen_range(1..=6);
        let n_det = rng.gen_range(0..=6);
        let gts: Vec<BoxLabel> = (0..n_gt)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..40.0);
                let y1: f64 = rng.gen_range(0.0..40.0);
                gt(
                    rng.gen_range(0..2),
                    [x1, y1, x1 + rng.gen_range(4.0..20.0), y1 + rng.gen_range(4.0..20.0)],
                    img,
                )
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                // half the detections perturb a gt box, half are random
                if rng.gen_bool(0.5) {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    let c = g.to_corners(img, img);
                    let dx: f64 = rng.gen_range(-3.0..3.0);
                    let dy: f64 = rng.gen_range(-3.0..3.0);
                    det(
                        g.class_id,
                        rng.gen_range(0.1..1.0),
                        [c[0] + dx, c[1] + dy, c[2] + dx, c[3] + dy],
                    )
                } else {
                    let x1: f64 = rng.gen_range(0.0..40.0);
                    let y1: f64 = rng.gen_range(0.0..40.0);
                    det(
                        rng.gen_range(0..2),
                        rng.gen_range(0.1..1.0),
                        [x1, y1, x1 + rng.gen_range(4.0..20.0), y1 + rng.gen_range(4.0..20.0)],
                    )
                }
            })
            .collect();
        (dets, gts)
    }

    #[test]
    fn matches_exhaustive_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..200 {
            let (dets, gts) = random_instance(&mut rng);
            for thr in [0.5, 0.75] {
                let got = average_precision(&dets, &gts, thr, 64.0, 64.0).unwrap();
                let want = ap_reference(&dets, &gts, thr, 64.0);
                assert!(
                    (got - want).abs() < 1e-9,
                    "ap mismatch at thr {thr}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn ap_is_nonincreasing_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        for _ in 0..100 {
            let (dets, gts) = random_instance(&mut rng);
            let mut prev = f64::INFINITY;
            for thr in iou_thresholds() {
                let ap = average_precision(&dets, &gts, thr, 64.0, 64.0).unwrap();
                assert!(ap <= prev + 1e-12, "AP increased from {prev} to {ap} at {thr}");
                prev = ap;
            }
        }
    }

    #[test]
    fn trailing_false_positive_never_increases_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        for _ in 0..50 {
            let (mut dets, gts) = random_instance(&mut rng);
            let base = average_precision(&dets, &gts, 0.5, 64.0, 64.0).unwrap();
            let min_conf = dets
                .iter()
                .map(|d| d.confidence)
                .fold(f64::INFINITY, f64::min)
                .min(0.5);
            dets.push(det(gts[0].class_id, min_conf - 0.05, [0.0, 0.0, 1.0, 1.0]));
            let with_fp = average_precision(&dets, &gts, 0.5, 64.0, 64.0).unwrap();
            assert!(with_fp <= base + 1e-12);
        }
    }

    #[test]
    fn threshold_window_example() {
        // detection overlaps its gt with IoU 0.52: counts at 0.50 only
        let g = vec![gt(0, [0.0, 0.0, 10.0, 10.0], 64.0)];
        let d = vec![det(0, 0.9, [0.0, 0.0, 10.0, 5.2])];
        let result = evaluate_detections(&[(d, g)], 64.0, 64.0).unwrap();
        assert!((result.overall.map50 - 1.0).abs() < 1e-12);
        assert!((result.overall.map75 - 0.0).abs() < 1e-12);
        assert!((result.overall.map50_95 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn map50_95_is_the_mean_of_ten_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (dets, gts) = random_instance(&mut rng);
        let result = evaluate_detections(&[(dets.clone(), gts.clone())], 64.0, 64.0).unwrap();
        let mut mean = 0.0;
        for thr in iou_thresholds() {
            mean += average_precision(&dets, &gts, thr, 64.0, 64.0).unwrap() / 10.0;
        }
        assert!((result.overall.map50_95 - mean).abs() < 1e-12);
        // report invariants
        assert!(result.overall.map50_95 <= result.overall.map50 + 1e-12);
        assert!(result.overall.map75 <= result.overall.map50 + 1e-12);
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let g = vec![
            gt(0, [5.0, 5.0, 20.0, 20.0], 64.0),
            gt(1, [30.0, 30.0, 50.0, 45.0], 64.0),
        ];
        let d = vec![
            det(0, 0.97, [5.0, 5.0, 20.0, 20.0]),
            det(1, 0.93, [30.0, 30.0, 50.0, 45.0]),
        ];
        let result = evaluate_detections(&[(d, g)], 64.0, 64.0).unwrap();
        assert!((result.overall.precision - 1.0).abs() < 1e-12);
        assert!((result.overall.recall - 1.0).abs() < 1e-12);
        assert!((result.overall.map50 - 1.0).abs() < 1e-12);
        assert!((result.overall.map75 - 1.0).abs() < 1e-12);
        assert!((result.overall.map50_95 - 1.0).abs() < 1e-12);
    }
}
