use super::box3d::Box3D;
use super::iou::bev_iou;
use crate::error::{Error, Result};

/// Greedy rotated NMS. Boxes are visited by descending score (equal scores
/// by ascending index); a box is dropped when its BEV IoU with any kept box
/// exceeds `iou_threshold`. Returns kept indices in visiting order.
pub fn rotated_nms(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::dim(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &kept {
            if bev_iou(&boxes[i], &boxes[k])? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
