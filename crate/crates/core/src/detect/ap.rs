//! Average precision with 101-point interpolation.

use serde::{Deserialize, Serialize};

use crate::detect::{BBox, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap50: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap50: f64,
    pub ap: f64,
    pub per_class: Vec<ClassAp>,
}

fn classes_with_gt(gts: &[Vec<GroundTruth>]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// AP of one class at one IoU threshold. Detections are ranked by confidence
/// (ties by image, then by position in the image's list); each is matched to
/// the unmatched same-class GT of highest IoU when that IoU ≥ `iou_thresh`.
pub fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_thresh: f64,
) -> f64 {
    let npos = gts
        .iter()
        .flatten()
        .filter(|g| g.class_id == class_id)
        .count();
    if npos == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| {
            ds.iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (img, d))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (k, (img, d)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.get(*img).map_or(&[][..], |v| v).iter().enumerate() {
            if g.class_id != class_id || matched[*img][j] {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    interpolate_101(&recall, &precision)
}

/// Mean over recall levels 0, 0.01, …, 1 of the best precision attained at
/// recall ≥ that level (0 where never attained).
pub fn interpolate_101(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            recall
                .iter()
                .position(|&x| x >= r)
                .map_or(0.0, |k| envelope[k])
        })
        .sum();
    total / 101.0
}

/// Mean AP over classes that have ground truth; 0 when there is none.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> f64 {
    let classes = classes_with_gt(gts);
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| class_ap(dets, gts, c, iou_thresh))
        .sum::<f64>()
        / classes.len() as f64
}

/// AP50, AP over IoU 0.50:0.05:0.95, and their per-class breakdown.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> ApReport {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let per_class: Vec<ClassAp> = classes_with_gt(gts)
        .into_iter()
        .map(|c| {
            let aps: Vec<f64> = thresholds
                .iter()
                .map(|&t| class_ap(dets, gts, c, t))
                .collect();
            ClassAp {
                class_id: c,
                ap50: aps[0],
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    ApReport {
        ap50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(b: BBox) -> GroundTruth {
        GroundTruth {
            bbox: b,
            class_id: 0,
        }
    }

    fn det(b: BBox, conf: f64) -> Detection {
        Detection::from_probs(b, vec![conf])
    }

    #[test]
    fn exact_prediction_is_perfect() {
        let b = BBox::new(10.0, 10.0, 6.0, 6.0);
        let r = evaluate(&[vec![det(b, 0.9)]], &[vec![gt(b)]]);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn no_predictions_is_zero() {
        let b = BBox::new(10.0, 10.0, 6.0, 6.0);
        assert_eq!(evaluate(&[vec![]], &[vec![gt(b)]]).ap, 0.0);
    }

    #[test]
    fn false_positive_first() {
        // Ranked: FP (0.95), TP (0.9), TP (0.8).
        // PR points: (0, 0), (0.5, 1/2), (1, 2/3); envelope 2/3 everywhere.
        let a = BBox::new(10.0, 10.0, 6.0, 6.0);
        let b = BBox::new(40.0, 40.0, 6.0, 6.0);
        let fp = BBox::new(70.0, 10.0, 6.0, 6.0);
        let dets = vec![vec![det(a, 0.9), det(fp, 0.95), det(b, 0.8)]];
        let ap = average_precision(&dets, &[vec![gt(a), gt(b)]], 0.5);
        assert!((ap - 2.0 / 3.0).abs() < 1e-12, "{ap}");
    }
}
