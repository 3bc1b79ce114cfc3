//! Greedy per-class non-maximum suppression.

use crate::head::Detection;
use crate::loss::iou_corner;

/// IoU of two detections' boxes.
pub fn det_iou(a: &Detection, b: &Detection) -> f64 {
    iou_corner([a.x1, a.y1, a.x2, a.y2], [b.x1, b.y1, b.x2, b.y2])
}

/// Drop candidates below `conf_thr`, then greedily keep the most confident
/// detection per class and remove same-class boxes overlapping it with
/// IoU > `iou_thr`. Confidence ties break toward the earlier index.
pub fn nms(candidates: &[Detection], iou_thr: f64, conf_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|i| candidates[*i].confidence >= conf_thr)
        .collect();
    // stable sort keeps input order among equal confidences
    order.sort_by(|a, b| {
        candidates[*b]
            .confidence
            .partial_cmp(&candidates[*a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(candidates[i].clone());
        for &j in &order[pos + 1..] {
            if suppressed[j] || candidates[j].class_id != candidates[i].class_id {
                continue;
            }
            if det_iou(&candidates[i], &candidates[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    kept
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

    #[test]
    fn overlapping_same_class_keeps_the_more_confident() {
        // IoU 0.6 > threshold 0.45
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(0, 0.8, [0.0, 0.0, 10.0, 7.5]);
        assert!((det_iou(&a, &b) - 0.75).abs() < 1e-12);
        let kept = nms(&[a.clone(), b], 0.45, 0.25);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], a);
    }

    #[test]
    fn different_classes_are_kept_independently() {
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(1, 0.8, [0.0, 0.0, 10.0, 10.0]);
        let kept = nms(&[a, b], 0.45, 0.25);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn low_confidence_candidates_are_dropped() {
        let a = det(0, 0.2, [0.0, 0.0, 10.0, 10.0]);
        assert!(nms(&[a], 0.45, 0.25).is_empty());
    }

    /// Reference implementation: repeatedly scan the whole remaining list for
    /// the global confidence maximum (earliest index wins ties).
    fn nms_reference(candidates: &[Detection], iou_thr: f64, conf_thr: f64) -> Vec<Detection> {
        let mut alive: Vec<bool> = candidates
            .iter()
            .map(|d| d.confidence >= conf_thr)
            .collect();
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..candidates.len() {
                if !alive[i] {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) => {
                        if candidates[i].confidence > candidates[b].confidence {
                            best = Some(i);
                        }
                    }
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            kept.push(candidates[b].clone());
            for i in 0..candidates.len() {
                if alive[i]
                    && candidates[i].class_id == candidates[b].class_id
                    && det_iou(&candidates[b], &candidates[i]) > iou_thr
                {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    #[test]
    fn matches_quadratic_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let candidates: Vec<Detection> = (0..50)
                .map(|_| {
                    let x1: f64 = rng.gen_range(0.0..80.0);
                    let y1: f64 = rng.gen_range(0.0..80.0);
                    det(
                        rng.gen_range(0..3),
                        (rng.gen_range(0.0..1.0f64) * 100.0).round() / 100.0,
                        [
                            x1,
                            y1,
                            x1 + rng.gen_range(2.0..30.0),
                            y1 + rng.gen_range(2.0..30.0),
                        ],
                    )
                })
                .collect();
            let got = nms(&candidates, 0.45, 0.25);
            let want = nms_reference(&candidates, 0.45, 0.25);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn kept_set_is_an_antichain_under_same_class_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let candidates: Vec<Detection> = (0..40)
                .map(|_| {
                    let x1: f64 = rng.gen_range(0.0..50.0);
                    let y1: f64 = rng.gen_range(0.0..50.0);
                    det(
                        rng.gen_range(0..2),
                        rng.gen_range(0.0..1.0),
                        [
                            x1,
                            y1,
                            x1 + rng.gen_range(2.0..25.0),
                            y1 + rng.gen_range(2.0..25.0),
                        ],
                    )
                })
                .collect();
            let kept = nms(&candidates, 0.5, 0.1);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class_id == kept[j].class_id {
                        assert!(
                            det_iou(&kept[i], &kept[j]) <= 0.5,
                            "kept boxes overlap above the threshold"
                        );
                    }
                }
            }
        }
    }
}
