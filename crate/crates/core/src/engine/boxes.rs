use crate::metrics::box_iou_unchecked;
use crate::types::BBox;

/// Largest log-scale change a box delta may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Anchors for a `feat_h x feat_w` map, ordered (row, col, anchor) to match
/// the RPN output layout.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    sizes: &[f64],
    ratios: &[f64],
) -> Vec<BBox> {
    let mut shapes = Vec::with_capacity(sizes.len() * ratios.len());
    for &s in sizes {
        for &r in ratios {
            // r is height / width
            shapes.push((s * r.sqrt(), s / r.sqrt()));
        }
    }
    let mut anchors = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cy = (i as f64 + 0.5) * stride as f64;
            let cx = (j as f64 + 0.5) * stride as f64;
            for &(h, w) in &shapes {
                anchors.push(BBox::new(
                    cy - h / 2.0,
                    cx - w / 2.0,
                    cy + h / 2.0,
                    cx + w / 2.0,
                ));
            }
        }
    }
    anchors
}

fn center_size(b: &BBox) -> (f64, f64, f64, f64) {
    (
        b.r0 + b.height() / 2.0,
        b.c0 + b.width() / 2.0,
        b.height(),
        b.width(),
    )
}

/// Regression target `(dy, dx, dh, dw)` moving `reference` onto `target`.
pub fn encode_box(reference: &BBox, target: &BBox, weights: [f64; 4]) -> [f64; 4] {
    let (ry, rx, rh, rw) = center_size(reference);
    let (ty, tx, th, tw) = center_size(target);
    [
        weights[0] * (ty - ry) / rh,
        weights[1] * (tx - rx) / rw,
        weights[2] * (th / rh).ln(),
        weights[3] * (tw / rw).ln(),
    ]
}

pub fn decode_box(reference: &BBox, deltas: [f64; 4], weights: [f64; 4]) -> BBox {
    let (ry, rx, rh, rw) = center_size(reference);
    let dy = deltas[0] / weights[0];
    let dx = deltas[1] / weights[1];
    let dh = (deltas[2] / weights[2]).min(MAX_LOG_SCALE);
    let dw = (deltas[3] / weights[3]).min(MAX_LOG_SCALE);
    let cy = ry + dy * rh;
    let cx = rx + dx * rw;
    let h = rh * dh.exp();
    let w = rw * dw.exp();
    BBox::new(cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0)
}

/// Greedy non-maximum suppression. Returns kept indices by descending score;
/// a box is dropped when its IoU with a kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep
            .iter()
            .all(|&k| box_iou_unchecked(&boxes[k], &boxes[idx]) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    keep
}

/// Best IoU of `candidate` against `references`, with the winning index.
pub fn best_overlap(candidate: &BBox, references: &[BBox]) -> Option<(usize, f64)> {
    references
        .iter()
        .map(|r| box_iou_unchecked(candidate, r))
        .enumerate()
        .fold(None, |best, (i, iou)| match best {
            Some((_, b)) if b >= iou => best,
            _ => Some((i, iou)),
        })
}

/// Indices of candidates whose best IoU against any reference is strictly
/// greater than `threshold`, in input order.
pub fn filter_region_indices(
    candidates: &[BBox],
    references: &[BBox],
    threshold: f64,
) -> Vec<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| best_overlap(c, references).is_some_and(|(_, iou)| iou > threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Candidates whose maximum IoU against any reference is strictly above
/// `threshold`. Order is preserved.
pub fn filter_regions_by_iou(
    candidates: &[BBox],
    references: &[BBox],
    threshold: f64,
) -> Vec<BBox> {
    filter_region_indices(candidates, references, threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_decode_round_trip() {
        let w = [10.0, 10.0, 5.0, 5.0];
        let a = BBox::new(4.0, 6.0, 20.0, 14.0);
        let t = BBox::new(5.5, 3.0, 30.0, 19.0);
        let back = decode_box(&a, encode_box(&a, &t, w), w);
        for (x, y) in <[f64; 4]>::from(back)
            .iter()
            .zip(<[f64; 4]>::from(t).iter())
        {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn anchors_are_centred_on_cells() {
        let a = generate_anchors(2, 3, 4, &[8.0], &[1.0]);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], BBox::new(-2.0, -2.0, 6.0, 6.0));
        assert_eq!(a[5], BBox::new(2.0, 6.0, 10.0, 14.0));
        let r = generate_anchors(1, 1, 4, &[16.0], &[0.5, 2.0]);
        assert!((r[0].height() / r[0].width() - 0.5).abs() < 1e-12);
        assert!((r[1].area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn nms_drops_overlaps() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 9.0),
            BBox::new(20.0, 20.0, 30.0, 30.0),
        ];
        assert_eq!(nms(&boxes, &[0.5, 0.9, 0.7], 0.5), vec![1, 2]);
    }

    #[test]
    fn filter_examples() {
        let reference = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6: 60 / 100
        let cand = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert_eq!(
            filter_regions_by_iou(&[cand], &[reference], 0.5),
            vec![cand]
        );
        assert_eq!(
            filter_regions_by_iou(&[reference], &[reference], 0.999),
            vec![reference]
        );
        // exactly 0.5 is not kept
        let half = BBox::new(0.0, 0.0, 10.0, 5.0);
        assert!(filter_regions_by_iou(&[half], &[reference], 0.5).is_empty());
        assert!(filter_regions_by_iou(&[], &[reference], 0.5).is_empty());
        assert!(filter_regions_by_iou(&[cand], &[], 0.5).is_empty());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..60, 0u32..60, 1u32..30, 1u32..30)
            .prop_map(|(r, c, h, w)| BBox::new(r as f64, c as f64, (r + h) as f64, (c + w) as f64))
    }

    proptest! {
        /// All-pairs oracle with IoU computed from integer pixel counts.
        #[test]
        fn filter_matches_all_pairs_oracle(
            cands in proptest::collection::vec(arb_box(), 0..50),
            refs in proptest::collection::vec(arb_box(), 0..6),
            threshold in 0.05f64..0.95,
        ) {
            let iou = |a: &BBox, b: &BBox| {
                let ih = (a.r1.min(b.r1) - a.r0.max(b.r0)).max(0.0) as u64;
                let iw = (a.c1.min(b.c1) - a.c0.max(b.c0)).max(0.0) as u64;
                let inter = ih * iw;
                let union = (a.height() * a.width()) as u64 + (b.height() * b.width()) as u64 - inter;
                inter as f64 / union as f64
            };
            let expected: Vec<BBox> = cands
                .iter()
                .filter(|c| refs.iter().any(|r| iou(c, r) > threshold))
                .copied()
                .collect();
            prop_assert_eq!(filter_regions_by_iou(&cands, &refs, threshold), expected);
        }
    }
}
