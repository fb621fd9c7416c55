//! Center-cell target assignment across pyramid levels.

use crate::detect::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub gt_index: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Level whose stride best matches the box size: argmin over levels of
/// `|log2(√(w·h) / (4·stride))|`, earlier levels winning exact ties.
pub fn select_level(bbox: &BBox, levels: &[LevelGeometry]) -> usize {
    let size = bbox.area().max(f64::MIN_POSITIVE).sqrt();
    let mut best = (0, f64::INFINITY);
    for (i, l) in levels.iter().enumerate() {
        let d = (size / (4.0 * l.stride as f64)).log2().abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Per-level grids (row-major cells) with at most one target per cell; the
/// larger-area box wins a shared cell, the lower index on equal areas.
pub fn assign_targets(
    boxes: &[BBox],
    classes: &[usize],
    levels: &[LevelGeometry],
) -> Vec<Vec<Option<CellTarget>>> {
    assert_eq!(boxes.len(), classes.len(), "one class per box");
    let mut grids: Vec<Vec<Option<CellTarget>>> = levels
        .iter()
        .map(|l| vec![None; l.height * l.width])
        .collect();
    for (i, (b, &c)) in boxes.iter().zip(classes).enumerate() {
        let li = select_level(b, levels);
        let l = levels[li];
        let s = l.stride as f64;
        let col = ((b.cx / s).floor().max(0.0) as usize).min(l.width - 1);
        let row = ((b.cy / s).floor().max(0.0) as usize).min(l.height - 1);
        let slot = &mut grids[li][row * l.width + col];
        if slot.map_or(true, |prev| b.area() > prev.bbox.area()) {
            *slot = Some(CellTarget {
                gt_index: i,
                class_id: c,
                bbox: *b,
            });
        }
    }
    grids
}
