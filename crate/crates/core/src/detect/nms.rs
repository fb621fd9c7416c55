//! Greedy per-class non-maximum suppression.

use crate::detect::Detection;

pub const NMS_IOU_THRESHOLD: f64 = 0.65;
pub const NMS_CONF_THRESHOLD: f64 = 0.25;

/// Drops detections below `conf_thresh`, then keeps the most confident box of
/// each class and removes same-class boxes overlapping it with IoU strictly
/// above `iou_thresh`. Output is sorted by confidence, ties by input index.
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && dets[k].bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
