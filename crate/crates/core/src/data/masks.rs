use std::collections::VecDeque;

use super::DataError;
use crate::types::{BBox, Mask};

/// Tight half-open bounding box `(min_row, min_col, max_row + 1, max_col + 1)`
/// of the foreground.
pub fn derive_boxes_from_mask(mask: &Mask) -> Result<BBox, DataError> {
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in mask.iter_foreground() {
        extent = Some(match extent {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    let (r0, c0, r1, c1) = extent.ok_or(DataError::EmptyMask)?;
    Ok(BBox::new(
        r0 as f64,
        c0 as f64,
        (r1 + 1) as f64,
        (c1 + 1) as f64,
    ))
}

/// Splits a mask into 8-connected components, ordered by their first pixel in
/// raster order.
pub fn connected_components(mask: &Mask) -> Vec<Mask> {
    let (h, w) = mask.shape();
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if visited[start] || !mask.data()[start] {
            continue;
        }
        let mut component = Mask::new(h, w);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            component.set(r, c, true);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let n = nr as usize * w + nc as usize;
                    if !visited[n] && mask.data()[n] {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        out.push(component);
    }
    out
}
