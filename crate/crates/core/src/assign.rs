//! Centre-in-box label assignment with one pyramid level per box size.

use alloc::vec::Vec;

use crate::boxes::DetectionBox;

/// Longer-side brackets (pixels at a 640 input) separating the three levels.
pub const SIZE_BRACKETS_640: [f64; 2] = [64.0, 128.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub level: usize,
    /// Row-major cell index within the level grid.
    pub cell: usize,
    /// Index into the concatenation of all level grids.
    pub anchor: usize,
    pub gt: usize,
    pub class_id: usize,
    /// Ground-truth corners in pixels.
    pub target: [f64; 4],
    /// Cell centre in pixels.
    pub anchor_xy: [f64; 2],
    pub stride: usize,
}

/// Level for a box whose longer side spans `side_px` pixels.
pub fn level_for(side_px: f64, image_size: usize) -> usize {
    let r = image_size as f64 / 640.0;
    if side_px < SIZE_BRACKETS_640[0] * r {
        0
    } else if side_px < SIZE_BRACKETS_640[1] * r {
        1
    } else {
        2
    }
}

/// Every cell of the box's level whose centre lies strictly inside the box
/// becomes positive for it; cells claimed by several boxes go to the one with
/// the smallest area. A box too small to contain any centre claims the cell
/// holding its own centre.
pub fn assign_targets(gts: &[DetectionBox], image_size: usize, strides: &[usize; 3]) -> Vec<Positive> {
    let size = image_size as f64;
    let grids: Vec<usize> = strides.iter().map(|s| image_size / s).collect();
    let offsets = [0, grids[0] * grids[0], grids[0] * grids[0] + grids[1] * grids[1]];
    let mut owner: Vec<Vec<Option<usize>>> = grids.iter().map(|g| alloc::vec![None; g * g]).collect();
    let area = |i: usize| gts[i].area();
    let claim = |level: usize, cell: usize, i: usize, owner: &mut Vec<Vec<Option<usize>>>| {
        let slot = &mut owner[level][cell];
        match *slot {
            Some(j) if area(j) <= area(i) => {}
            _ => *slot = Some(i),
        }
    };
    for (i, g) in gts.iter().enumerate() {
        let [x1, y1, x2, y2] = g.corners().map(|v| v * size);
        let level = level_for((x2 - x1).max(y2 - y1), image_size);
        let (s, n) = (strides[level] as f64, grids[level]);
        let mut any = false;
        for gy in 0..n {
            let cy = (gy as f64 + 0.5) * s;
            if cy <= y1 || cy >= y2 {
                continue;
            }
            for gx in 0..n {
                let cx = (gx as f64 + 0.5) * s;
                if cx > x1 && cx < x2 {
                    claim(level, gy * n + gx, i, &mut owner);
                    any = true;
                }
            }
        }
        if !any {
            let gx = ((g.cx * size / s) as usize).min(n - 1);
            let gy = ((g.cy * size / s) as usize).min(n - 1);
            claim(level, gy * n + gx, i, &mut owner);
        }
    }
    let mut out = Vec::new();
    for (level, cells) in owner.iter().enumerate() {
        let (s, n) = (strides[level], grids[level]);
        for (cell, o) in cells.iter().enumerate() {
            if let Some(i) = *o {
                out.push(Positive {
                    level,
                    cell,
                    anchor: offsets[level] + cell,
                    gt: i,
                    class_id: gts[i].class_id,
                    target: gts[i].corners().map(|v| v * size),
                    anchor_xy: [((cell % n) as f64 + 0.5) * s as f64, ((cell / n) as f64 + 0.5) * s as f64],
                    stride: s,
                });
            }
        }
    }
    out
}
