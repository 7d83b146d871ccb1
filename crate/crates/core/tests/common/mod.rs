//! Brute-force reference implementations and random case generation shared
//! by the metric tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorseg::engine::{ClassLabel, Detection};
use tumorseg::metrics::{MatchKind, MatchRecord};
use tumorseg::types::{BBox, Mask};

/// Pixel-counting IoU over nested loops.
pub fn oracle_mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            if x && y {
                inter += 1;
            }
            if x || y {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rasterizes integer boxes onto a grid large enough for both and counts.
pub fn oracle_box_iou(a: &BBox, b: &BBox) -> f64 {
    let h = a.r1.max(b.r1).ceil() as usize;
    let w = a.c1.max(b.c1).ceil() as usize;
    let ra = Mask::from_box(h, w, a);
    let rb = Mask::from_box(h, w, b);
    let (mut inter, mut union) = (0u64, 0u64);
    for r in 0..h {
        for c in 0..w {
            inter += (ra.get(r, c) && rb.get(r, c)) as u64;
            union += (ra.get(r, c) || rb.get(r, c)) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Maximum number of one-to-one (prediction, ground truth) pairs with IoU
/// strictly above `thr`, found by trying every assignment. Among maximum
/// assignments the one favouring higher-scored predictions wins; returns
/// which predictions are matched.
pub fn oracle_assignment(ious: &[Vec<f64>], scores: &[f64], thr: f64) -> (usize, Vec<bool>) {
    let np = ious.len();
    let ng = ious.first().map_or(0, Vec::len);
    let mut rank: Vec<usize> = (0..np).collect();
    rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut current = vec![None; np];
    fn rec(
        p: usize,
        ious: &[Vec<f64>],
        thr: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        visit: &mut dyn FnMut(&[Option<usize>]),
    ) {
        if p == ious.len() {
            visit(current);
            return;
        }
        current[p] = None;
        rec(p + 1, ious, thr, used, current, visit);
        for g in 0..used.len() {
            if !used[g] && ious[p][g] > thr {
                used[g] = true;
                current[p] = Some(g);
                rec(p + 1, ious, thr, used, current, visit);
                used[g] = false;
                current[p] = None;
            }
        }
    }
    let mut used = vec![false; ng];
    let mut visit = |assign: &[Option<usize>]| {
        let count = assign.iter().filter(|a| a.is_some()).count();
        let matched: Vec<bool> = assign.iter().map(Option::is_some).collect();
        let key: Vec<bool> = rank.iter().map(|&i| matched[i]).collect();
        let better = match &best {
            None => true,
            Some((c, m)) => {
                let best_key: Vec<bool> = rank.iter().map(|&i| m[i]).collect();
                count > *c || (count == *c && key > best_key)
            }
        };
        if better {
            best = Some((count, matched));
        }
    };
    rec(0, ious, thr, &mut used, &mut current, &mut visit);
    best.unwrap_or((0, vec![false; np]))
}

/// Precision/recall at every distinct score, counting from scratch for each
/// threshold.
pub fn oracle_pr(records: &[MatchRecord], total_gt: usize) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let kept: Vec<&MatchRecord> = records.iter().filter(|r| r.score >= t).collect();
            let tp = kept
                .iter()
                .filter(|r| r.kind == MatchKind::TruePositive)
                .count();
            let precision = if kept.is_empty() {
                1.0
            } else {
                tp as f64 / kept.len() as f64
            };
            let recall = if total_gt == 0 {
                0.0
            } else {
                tp as f64 / total_gt as f64
            };
            (t, precision, recall)
        })
        .collect()
}

/// All-points interpolated AP, taking the max precision at recall >= r by a
/// fresh scan for every point.
pub fn oracle_ap(points: &[(f64, f64)]) -> f64 {
    let mut recalls: Vec<f64> = points.iter().map(|p| p.1).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p_interp = points
            .iter()
            .filter(|(_, rr)| *rr >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        ap += (r - prev) * p_interp;
        prev = r;
    }
    ap
}

/// One randomized matching case: disjoint ground-truth instances and
/// predictions that are perturbed copies or random blobs.
pub struct Case {
    pub height: usize,
    pub width: usize,
    pub ground_truth: Vec<Mask>,
    pub predictions: Vec<Detection>,
}

fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let r0 = rng.random_range(0..h - 1);
    let c0 = rng.random_range(0..w - 1);
    let r1 = rng.random_range(r0 + 1..=h.min(r0 + 1 + h / 2));
    let c1 = rng.random_range(c0 + 1..=w.min(c0 + 1 + w / 2));
    BBox::new(r0 as f64, c0 as f64, r1 as f64, c1 as f64)
}

pub fn random_box(rng: &mut ChaCha8Rng, frame: usize) -> BBox {
    random_rect(rng, frame, frame)
}

fn ellipse(h: usize, w: usize, cr: f64, cc: f64, ar: f64, ac: f64) -> Mask {
    Mask::from_fn(h, w, |r, c| {
        let dr = (r as f64 + 0.5 - cr) / ar;
        let dc = (c as f64 + 0.5 - cc) / ac;
        dr * dr + dc * dc <= 1.0
    })
}

fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    if rng.random_bool(0.5) {
        Mask::from_box(h, w, &random_rect(rng, h, w))
    } else {
        let ar = rng.random_range(1.0..(h as f64 / 3.0).max(1.5));
        let ac = rng.random_range(1.0..(w as f64 / 3.0).max(1.5));
        ellipse(
            h,
            w,
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
            ar,
            ac,
        )
    }
}

fn perturb(rng: &mut ChaCha8Rng, m: &Mask) -> Mask {
    let dr = rng.random_range(-2i64..=2);
    let dc = rng.random_range(-2i64..=2);
    let flip = rng.random_range(0.0..0.15);
    Mask::from_fn(m.height(), m.width(), |r, c| {
        let sr = r as i64 - dr;
        let sc = c as i64 - dc;
        let v = sr >= 0
            && sc >= 0
            && (sr as usize) < m.height()
            && (sc as usize) < m.width()
            && m.get(sr as usize, sc as usize);
        if rng.random_bool(flip) {
            !v
        } else {
            v
        }
    })
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = rng.random_range(4..=64);
    let width = rng.random_range(4..=64);
    let n_gt = rng.random_range(0..=4);
    let mut ground_truth: Vec<Mask> = Vec::new();
    let mut occupied = Mask::new(height, width);
    for _ in 0..n_gt {
        // carve out pixels already taken so instances stay disjoint
        let blob = random_blob(&mut rng, height, width);
        let m = Mask::from_fn(height, width, |r, c| blob.get(r, c) && !occupied.get(r, c));
        if m.is_empty() {
            continue;
        }
        for (r, c) in m.iter_foreground() {
            occupied.set(r, c, true);
        }
        ground_truth.push(m);
    }
    let n_pred = rng.random_range(0..=4);
    let score_pool = [0.95, 0.9, 0.8, 0.8, 0.6, 0.55, 0.3];
    let predictions = (0..n_pred)
        .map(|_| {
            let mask = if !ground_truth.is_empty() && rng.random_bool(0.7) {
                let g = rng.random_range(0..ground_truth.len());
                perturb(&mut rng, &ground_truth[g])
            } else {
                random_blob(&mut rng, height, width)
            };
            // ties are deliberate
            let score = if rng.random_bool(0.3) {
                score_pool[rng.random_range(0..score_pool.len())]
            } else {
                rng.random_range(0.0..1.0)
            };
            Detection {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                class_label: ClassLabel::Tumor,
                score,
                mask,
            }
        })
        .collect();
    Case {
        height,
        width,
        ground_truth,
        predictions,
    }
}

/// Largest absolute disagreement between the library and the oracles over
/// `cases` random cases, with the number of individual comparisons made.
pub struct OracleSummary {
    pub cases: usize,
    pub comparisons: usize,
    pub max_abs_error: f64,
    pub discrete_mismatches: Vec<String>,
}

pub fn run_metric_oracles(cases: usize, base_seed: u64) -> OracleSummary {
    use tumorseg::metrics::{average_precision, box_iou, mask_iou, match_detections, pr_curve};
    let mut s = OracleSummary {
        cases,
        comparisons: 0,
        max_abs_error: 0.0,
        discrete_mismatches: Vec::new(),
    };
    let mut err = |s: &mut OracleSummary, a: f64, b: f64| {
        s.comparisons += 1;
        let e = (a - b).abs();
        if e > s.max_abs_error || e.is_nan() {
            s.max_abs_error = if e.is_nan() { f64::INFINITY } else { e };
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0xB0B);
    let mut all_records = Vec::new();
    let mut total_gt = 0;
    for i in 0..cases {
        let case = random_case(base_seed + i as u64);
        // mask IoU on every pair
        let masks: Vec<&Mask> = case
            .ground_truth
            .iter()
            .chain(case.predictions.iter().map(|d| &d.mask))
            .collect();
        for a in &masks {
            for b in &masks {
                err(&mut s, mask_iou(a, b).unwrap(), oracle_mask_iou(a, b));
            }
        }
        // box IoU against rasterization
        for _ in 0..4 {
            let (a, b) = (random_box(&mut rng, 64), random_box(&mut rng, 64));
            err(&mut s, box_iou(&a, &b).unwrap(), oracle_box_iou(&a, &b));
        }
        // matching against exhaustive assignment
        for thr in [0.5, 0.75] {
            let m = match_detections("case", &case.predictions, &case.ground_truth, thr).unwrap();
            let ious: Vec<Vec<f64>> = case
                .predictions
                .iter()
                .map(|d| {
                    case.ground_truth
                        .iter()
                        .map(|g| oracle_mask_iou(&d.mask, g))
                        .collect()
                })
                .collect();
            let scores: Vec<f64> = case.predictions.iter().map(|d| d.score).collect();
            let (best, matched) = oracle_assignment(&ious, &scores, thr);
            s.comparisons += 1;
            if m.true_positives() != best || m.false_negatives != case.ground_truth.len() - best {
                s.discrete_mismatches.push(format!(
                    "case {i} thr {thr}: tp {} vs oracle {best}",
                    m.true_positives()
                ));
            }
            let mut lib_matched = vec![false; case.predictions.len()];
            for r in &m.records {
                lib_matched[r.prediction_index] = r.kind == MatchKind::TruePositive;
                if let Some(g) = r.matched_gt_index {
                    err(&mut s, r.iou, ious[r.prediction_index][g]);
                }
            }
            // ties in score make the favoured prediction ambiguous; compare
            // the matched set only when scores are distinct
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() == scores.len() && lib_matched != matched {
                s.discrete_mismatches
                    .push(format!("case {i} thr {thr}: matched set differs"));
            }
            if thr == 0.5 {
                total_gt += case.ground_truth.len();
                all_records.extend(m.records.clone());
            }
            // per-image PR and AP
            check_pr(
                &mut s,
                &m.records,
                case.ground_truth.len(),
                &mut err,
                i,
                pr_curve,
                average_precision,
            );
        }
    }
    check_pr(
        &mut s,
        &all_records,
        total_gt,
        &mut err,
        usize::MAX,
        pr_curve,
        average_precision,
    );
    s
}

fn check_pr(
    s: &mut OracleSummary,
    records: &[MatchRecord],
    total_gt: usize,
    err: &mut impl FnMut(&mut OracleSummary, f64, f64),
    case: usize,
    pr_curve: fn(&[MatchRecord], usize) -> Vec<tumorseg::metrics::PRPoint>,
    average_precision: fn(&[tumorseg::metrics::PRPoint]) -> f64,
) {
    let curve = pr_curve(records, total_gt);
    let expected = oracle_pr(records, total_gt);
    s.comparisons += 1;
    if curve.len() != expected.len() {
        s.discrete_mismatches.push(format!(
            "case {case}: curve has {} points, oracle {}",
            curve.len(),
            expected.len()
        ));
        return;
    }
    for (p, (t, prec, rec)) in curve.iter().zip(&expected) {
        err(s, p.threshold, *t);
        err(s, p.precision, *prec);
        err(s, p.recall, *rec);
    }
    let pts: Vec<(f64, f64)> = expected.iter().map(|(_, p, r)| (*p, *r)).collect();
    err(s, average_precision(&curve), oracle_ap(&pts));
}
