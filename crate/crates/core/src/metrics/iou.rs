use super::MetricsError;
use crate::types::{BBox, Mask};

/// `|a ∧ b| / |a ∨ b|`. Two empty masks agree perfectly (1.0); exactly one
/// empty mask scores 0.0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64, MetricsError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(MetricsError::DegenerateBox(*bx));
        }
    }
    Ok(box_iou_unchecked(a, b))
}

/// Box IoU without validation; zero-area unions yield 0.
pub fn box_iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Mask {
        Mask::from_fn(h, w, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
    }

    #[test]
    fn identical_and_disjoint() {
        let a = block(8, 8, 1, 1, 4, 5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &block(8, 8, 5, 5, 7, 7)).unwrap(), 0.0);
    }

    #[test]
    fn offset_blocks_on_three_by_three() {
        let a = block(3, 3, 0, 0, 2, 2);
        let b = block(3, 3, 1, 1, 3, 3);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 7.0);
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::new(4, 4);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_iou(&e, &block(4, 4, 0, 0, 1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            mask_iou(&Mask::new(3, 3), &Mask::new(3, 4)),
            Err(MetricsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn box_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            box_iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap(),
            1.0 / 7.0
        );
        assert_eq!(
            box_iou(
                &BBox::new(0.0, 0.0, 1.0, 1.0),
                &BBox::new(1.0, 0.0, 2.0, 1.0)
            )
            .unwrap(),
            0.0
        );
        assert!(matches!(
            box_iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)),
            Err(MetricsError::DegenerateBox(_))
        ));
    }

    fn arb_mask() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded((h, w, a, b) in arb_mask()) {
            let a = Mask::from_vec(h, w, a).unwrap();
            let b = Mask::from_vec(h, w, b).unwrap();
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn growing_the_overlap_never_lowers_iou((h, w, a, b) in arb_mask(), pick in any::<proptest::sample::Index>()) {
            // Adding a pixel of `b` to `a` raises the intersection and leaves the union unchanged.
            let a = Mask::from_vec(h, w, a).unwrap();
            let b = Mask::from_vec(h, w, b).unwrap();
            let candidates: Vec<_> = b.iter_foreground().filter(|&(r, c)| !a.get(r, c)).collect();
            prop_assume!(!candidates.is_empty());
            let (r, c) = candidates[pick.index(candidates.len())];
            let mut grown = a.clone();
            grown.set(r, c, true);
            prop_assert!(mask_iou(&grown, &b).unwrap() >= mask_iou(&a, &b).unwrap());
        }
    }
}
