//! Box geometry and detection post-processing: IoU, class-wise greedy
//! non-maximum suppression, and the detection record that downstream stages
//! (decoding, evaluation) consume.

use serde::{Deserialize, Serialize};

use crate::datamodel::BBox;
use crate::scalar::Scalar;

/// Where on the dense grid a detection came from: pyramid level, cell row,
/// cell column, anchor slot within the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorRef {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub anchor: usize,
}

/// A scored, classified box. `anchor_ref` ties it back to the dense maps it
/// was decoded from; detections loaded from plain files may not have one.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<S> {
    pub bbox: BBox<S>,
    pub class_name: String,
    pub score: S,
    pub anchor_ref: Option<AnchorRef>,
}

/// Intersection-over-union of two boxes. Degenerate unions yield 0.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(S::zero());
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > S::zero() {
        inter / union
    } else {
        S::zero()
    }
}

/// Thresholds applied to a raw detection list before anything downstream
/// sees it: drop below `score_floor`, suppress same-class overlaps above
/// `iou_threshold`, keep at most `top_k`.
#[derive(Debug, Clone, Copy)]
pub struct NmsConfig<S> {
    pub iou_threshold: S,
    pub score_floor: S,
    pub top_k: usize,
}

impl<S: Scalar> Default for NmsConfig<S> {
    fn default() -> NmsConfig<S> {
        NmsConfig {
            iou_threshold: S::cast(0.5),
            score_floor: S::cast(0.05),
            top_k: 100,
        }
    }
}

/// Deterministic candidate order for suppression: score descending, then
/// class name ascending, then original index ascending.
fn ranked_indices<S: Scalar>(dets: &[Detection<S>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .to_f64()
            .total_cmp(&dets[i].score.to_f64())
            .then_with(|| dets[i].class_name.cmp(&dets[j].class_name))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy class-wise non-maximum suppression. A detection is suppressed when
/// a higher-ranked kept detection of the same class overlaps it with IoU
/// strictly above `iou_threshold`. Output is in rank order.
pub fn nms<S: Scalar>(dets: &[Detection<S>], iou_threshold: S) -> Vec<Detection<S>> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in &ranked_indices(dets) {
        let survives = kept.iter().all(|&k| {
            dets[k].class_name != dets[i].class_name
                || iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold
        });
        if survives {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Score floor, then NMS, then top-k truncation.
pub fn postprocess_detections<S: Scalar>(
    dets: &[Detection<S>],
    config: &NmsConfig<S>,
) -> Vec<Detection<S>> {
    let surviving: Vec<Detection<S>> = dets
        .iter()
        .filter(|d| d.score >= config.score_floor)
        .cloned()
        .collect();
    let mut kept = nms(&surviving, config.iou_threshold);
    kept.truncate(config.top_k);
    kept
}
