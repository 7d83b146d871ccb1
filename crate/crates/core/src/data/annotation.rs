//! Instance encodings used by the annotation-JSON layout.

use serde::{Deserialize, Serialize};

use crate::types::Mask;

/// Uncompressed run-length encoding in column-major order, starting with a
/// background run (the COCO convention).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let (h, w) = mask.shape();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for c in 0..w {
            for r in 0..h {
                let v = mask.get(r, c);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [h, w],
            counts,
        }
    }

    /// Returns `None` when the runs do not cover the grid exactly.
    pub fn decode(&self) -> Option<Mask> {
        let [h, w] = self.size;
        if self.counts.iter().sum::<usize>() != h * w {
            return None;
        }
        let mut mask = Mask::new(h, w);
        let mut pos = 0usize;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + run {
                    mask.set(p % h, p / h, true);
                }
            }
            pos += run;
        }
        Some(mask)
    }
}

/// Rasterizes a polygon given as `[x, y]` = `[col, row]` vertices. A pixel is
/// foreground when its centre lies inside under the even-odd rule.
pub fn rasterize_polygon(height: usize, width: usize, vertices: &[[f64; 2]]) -> Mask {
    let mut mask = Mask::new(height, width);
    if vertices.len() < 3 {
        return mask;
    }
    for r in 0..height {
        let y = r as f64 + 0.5;
        for c in 0..width {
            let x = c as f64 + 0.5;
            let mut inside = false;
            let mut j = vertices.len() - 1;
            for i in 0..vertices.len() {
                let [xi, yi] = vertices[i];
                let [xj, yj] = vertices[j];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                mask.set(r, c, true);
            }
        }
    }
    mask
}
