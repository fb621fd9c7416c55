//! Decoupled detection head, losses, target assignment, NMS and AP.

mod ap;
mod assign;
mod head;
mod loss;
mod nms;

use serde::{Deserialize, Serialize};

pub use ap::{
    average_precision, class_ap, evaluate, interpolate_101, ApReport, ClassAp, GroundTruth,
};
pub use assign::{assign_targets, select_level, CellTarget, LevelGeometry};
pub use head::{decode_level, DecoupledHead, DistributionPrediction, LevelOutput};
pub(crate) use loss::ciou_row;
pub use loss::{
    bce_loss, ciou_loss, ciou_terms, detection_loss, dfl_loss, dfl_target_weights, CIoUTerms,
    LossBreakdown, LossWeights, DFL_BINS,
};
pub use nms::{nms, NMS_CONF_THRESHOLD, NMS_IOU_THRESHOLD};

/// Axis-aligned box in image pixels, center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Independent per-class sigmoid probabilities.
    pub class_probs: Vec<f64>,
    pub confidence: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn from_probs(bbox: BBox, class_probs: Vec<f64>) -> Self {
        let (class_id, confidence) =
            class_probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                });
        Self {
            bbox,
            class_probs,
            confidence,
            class_id,
        }
    }
}

/// One line of the detections JSON-lines output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn new(image_id: usize, d: &Detection) -> Self {
        Self {
            image_id,
            class_id: d.class_id,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            confidence: d.confidence,
        }
    }
}
