//! Detection post-processing and the AP@40 evaluation protocol.
//!
//! Matching is score-greedy: detections are visited in descending score
//! order and each may claim at most one ground-truth box at or above the IoU
//! threshold. Precision is sampled at the 41 recall positions
//! `{0, 1/40, ..., 1}` with right-max interpolation, and AP averages the 40
//! positions above zero recall.

use crate::error::{Error, Result};
use crate::geom::{bev_iou, iou3d, Box3D};

/// A scored, classified box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    pub class_id: u32,
}

impl Detection {
    pub fn new(box3d: Box3D, score: f64, class_id: u32) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("detection", format!("score {score} outside [0,1]")));
        }
        Ok(Detection { box3d, score, class_id })
    }
}

/// Which overlap definition a metric uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Bev,
    Iou3d,
}

fn overlap(mode: IouMode, a: &Box3D, b: &Box3D) -> Result<f64> {
    match mode {
        IouMode::Bev => bev_iou(a, b),
        IouMode::Iou3d => iou3d(a, b),
    }
}

/// Indices into `dets` ordered by descending score (ties keep input order).
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// Greedy rotated NMS. Returns the kept input indices in descending score
/// order, truncated to `top_k`. A box is suppressed when its BEV IoU with any
/// already-kept box exceeds `iou_thresh`; equal-score ties are broken by
/// input index.
pub fn rotated_nms_indices(dets: &[Detection], iou_thresh: f64, top_k: usize) -> Result<Vec<usize>> {
    let order = score_order(dets);
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        if kept.len() >= top_k {
            break;
        }
        for &j in &kept {
            if bev_iou(&dets[i].box3d, &dets[j].box3d)? > iou_thresh {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

/// [`rotated_nms_indices`] materialized into detections.
pub fn rotated_nms(dets: &[Detection], iou_thresh: f64, top_k: usize) -> Result<Vec<Detection>> {
    Ok(rotated_nms_indices(dets, iou_thresh, top_k)?
        .into_iter()
        .map(|i| dets[i].clone())
        .collect())
}

/// One frame's detections and ground truth. `gt_ignore[i]` marks boxes that
/// are excluded from scoring: matching them costs nothing (neither TP nor FP)
/// and they do not count as misses.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub gts: Vec<Box3D>,
    pub gt_ignore: Vec<bool>,
}

/// Outcome of one detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatchKind {
    TruePositive,
    FalsePositive,
    /// Matched an ignored ground truth; dropped from the PR curve.
    Ignored,
}

/// Precision sampled at recalls `{0, 1/40, ..., 40/40}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recalls: Vec<f64>,
    pub precisions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PrCurve,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    pub gt_count: usize,
}

pub const RECALL_POSITIONS: usize = 40;

/// Greedy matching of one frame. Returns `(score, kind)` per detection.
fn match_frame(frame: &EvalFrame, iou_thresh: f64, mode: IouMode) -> Result<Vec<(f64, MatchKind)>> {
    if !frame.gt_ignore.is_empty() && frame.gt_ignore.len() != frame.gts.len() {
        return Err(Error::invalid("ap40", "gt_ignore length mismatch"));
    }
    let ignored = |g: usize| frame.gt_ignore.get(g).copied().unwrap_or(false);
    let mut gt_taken = vec![false; frame.gts.len()];
    let mut out = Vec::with_capacity(frame.dets.len());
    for &di in &score_order(&frame.dets) {
        let det = &frame.dets[di];
        let mut best: Option<(f64, usize)> = None;
        let mut hits_ignored = false;
        for (gi, gt) in frame.gts.iter().enumerate() {
            let iou = overlap(mode, &det.box3d, gt)?;
            if iou < iou_thresh {
                continue;
            }
            if ignored(gi) {
                hits_ignored = true;
            } else if !gt_taken[gi] && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        let kind = if let Some((_, gi)) = best {
            gt_taken[gi] = true;
            MatchKind::TruePositive
        } else if hits_ignored {
            MatchKind::Ignored
        } else {
            MatchKind::FalsePositive
        };
        out.push((det.score, kind));
    }
    Ok(out)
}

/// Average precision with 40 recall positions over a set of frames.
///
/// Returns `None` when there is no countable ground truth (AP undefined).
pub fn ap40(frames: &[EvalFrame], iou_thresh: f64, mode: IouMode) -> Result<Option<ApResult>> {
    let gt_count: usize = frames
        .iter()
        .map(|f| {
            f.gts
                .iter()
                .enumerate()
                .filter(|(i, _)| !f.gt_ignore.get(*i).copied().unwrap_or(false))
                .count()
        })
        .sum();
    if gt_count == 0 {
        return Ok(None);
    }

    // Pool scored outcomes across frames, then order by descending score;
    // ties resolve by (frame, input index), i.e. pooling order.
    let mut scored: Vec<(f64, MatchKind)> = Vec::new();
    for frame in frames {
        scored.extend(match_frame(frame, iou_thresh, mode)?);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b].0
            .partial_cmp(&scored[a].0)
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    // Cumulative PR polyline, skipping ignored detections.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for &i in &order {
        match scored[i].1 {
            MatchKind::TruePositive => tp += 1,
            MatchKind::FalsePositive => fp += 1,
            MatchKind::Ignored => continue,
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
    }

    // Right-max interpolation: best precision at or beyond each recall.
    // Suffix running max over the polyline, then one sweep per sample.
    let mut suffix_max = vec![0.0f64; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        suffix_max[i] = running;
    }
    let n = RECALL_POSITIONS;
    let mut recalls = Vec::with_capacity(n + 1);
    let mut precisions = Vec::with_capacity(n + 1);
    let mut cursor = 0usize;
    for k in 0..=n {
        let r = k as f64 / n as f64;
        while cursor < points.len() && points[cursor].0 < r - 1e-12 {
            cursor += 1;
        }
        let p = if cursor < points.len() { suffix_max[cursor] } else { 0.0 };
        recalls.push(r);
        precisions.push(p);
    }
    let ap = precisions[1..].iter().sum::<f64>() / n as f64;
    Ok(Some(ApResult {
        ap,
        curve: PrCurve { recalls, precisions },
        tp,
        fp,
        missed: gt_count - tp,
        gt_count,
    }))
}

/// Ground-truth annotation attributes that drive the difficulty split.
#[derive(Debug, Clone)]
pub struct GtLabel {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    /// Height of the 2D image-plane box in pixels.
    pub bbox_height: f64,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

/// Benchmark difficulty gates: minimum 2D box height (px), maximum occlusion
/// state, maximum truncation, indexed easy/moderate/hard.
#[derive(Debug, Clone)]
pub struct DifficultyThresholds {
    pub min_height: [f64; 3],
    pub max_occlusion: [i32; 3],
    pub max_truncation: [f64; 3],
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        DifficultyThresholds {
            min_height: [40.0, 25.0, 25.0],
            max_occlusion: [0, 1, 2],
            max_truncation: [0.15, 0.30, 0.50],
        }
    }
}

impl DifficultyThresholds {
    pub fn qualifies(&self, label: &GtLabel, level: Difficulty) -> bool {
        let i = match level {
            Difficulty::Easy => 0,
            Difficulty::Moderate => 1,
            Difficulty::Hard => 2,
        };
        label.bbox_height >= self.min_height[i]
            && label.occlusion <= self.max_occlusion[i]
            && label.truncation <= self.max_truncation[i]
    }
}

/// Ignore flags for evaluating at `level`: labels that do not qualify are
/// excluded from scoring (neither TP nor FN).
pub fn difficulty_filter(
    labels: &[GtLabel],
    level: Difficulty,
    thresholds: &DifficultyThresholds,
) -> Vec<bool> {
    labels.iter().map(|l| !thresholds.qualifies(l, level)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, score: f64) -> Detection {
        Detection::new(
            Box3D::new(cx, cy, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(),
            score,
            0,
        )
        .unwrap()
    }

    #[test]
    fn nms_suppresses_lower_score() {
        let dets = vec![det(0.05, 0.0, 0.8), det(0.0, 0.0, 0.6)];
        let kept = rotated_nms_indices(&dets, 0.5, 100).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let dets = vec![det(0.0, 0.0, 0.5), det(10.0, 0.0, 0.9), det(20.0, 0.0, 0.7)];
        let kept = rotated_nms_indices(&dets, 0.5, 100).unwrap();
        assert_eq!(kept, vec![1, 2, 0]);
        let capped = rotated_nms_indices(&dets, 0.5, 2).unwrap();
        assert_eq!(capped, vec![1, 2]);
    }

    #[test]
    fn nms_tie_break_by_input_index() {
        let dets = vec![det(0.0, 0.0, 0.5), det(0.01, 0.0, 0.5)];
        let kept = rotated_nms_indices(&dets, 0.3, 100).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn ap_single_match_is_one() {
        let frame = EvalFrame {
            dets: vec![det(0.0, 0.0, 0.9)],
            gts: vec![det(0.0, 0.0, 0.9).box3d],
            gt_ignore: vec![],
        };
        let r = ap40(&[frame], 0.5, IouMode::Bev).unwrap().unwrap();
        assert!((r.ap - 1.0).abs() < 1e-12);
        assert_eq!((r.tp, r.fp, r.missed), (1, 0, 0));
    }

    #[test]
    fn ap_single_miss_is_zero() {
        let frame = EvalFrame {
            dets: vec![det(10.0, 0.0, 0.9)],
            gts: vec![det(0.0, 0.0, 0.9).box3d],
            gt_ignore: vec![],
        };
        let r = ap40(&[frame], 0.5, IouMode::Bev).unwrap().unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!((r.tp, r.fp, r.missed), (0, 1, 1));
    }

    #[test]
    fn ap_without_gt_is_absent() {
        let frame = EvalFrame {
            dets: vec![det(0.0, 0.0, 0.9)],
            gts: vec![],
            gt_ignore: vec![],
        };
        assert!(ap40(&[frame], 0.5, IouMode::Bev).unwrap().is_none());
    }

    #[test]
    fn ignored_gt_absorbs_without_penalty() {
        let frame = EvalFrame {
            dets: vec![det(0.0, 0.0, 0.9), det(10.0, 0.0, 0.8)],
            gts: vec![
                det(0.0, 0.0, 0.9).box3d,  // ignored
                det(10.0, 0.0, 0.9).box3d, // counted
            ],
            gt_ignore: vec![true, false],
        };
        let r = ap40(&[frame], 0.5, IouMode::Bev).unwrap().unwrap();
        assert_eq!(r.gt_count, 1);
        assert_eq!((r.tp, r.fp), (1, 0));
        assert!((r.ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trailing_false_positives_keep_ap_at_one() {
        let frame = EvalFrame {
            dets: vec![det(0.0, 0.0, 0.9), det(10.0, 0.0, 0.2)],
            gts: vec![det(0.0, 0.0, 0.9).box3d],
            gt_ignore: vec![],
        };
        let r = ap40(&[frame], 0.5, IouMode::Bev).unwrap().unwrap();
        assert!((r.ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolated_precision_non_increasing() {
        let frame = EvalFrame {
            dets: vec![
                det(0.0, 0.0, 0.9),
                det(50.0, 0.0, 0.8),
                det(10.0, 0.0, 0.7),
                det(60.0, 0.0, 0.6),
                det(20.0, 0.0, 0.5),
            ],
            gts: vec![
                det(0.0, 0.0, 0.9).box3d,
                det(10.0, 0.0, 0.9).box3d,
                det(20.0, 0.0, 0.9).box3d,
                det(30.0, 0.0, 0.9).box3d,
            ],
            gt_ignore: vec![],
        };
        let r = ap40(&[frame], 0.5, IouMode::Bev).unwrap().unwrap();
        for w in r.curve.precisions.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn difficulty_examples() {
        let t = DifficultyThresholds::default();
        let label = |h: f64, occ: i32, tr: f64| GtLabel {
            class: "Pedestrian".into(),
            truncation: tr,
            occlusion: occ,
            bbox_height: h,
            box3d: Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(),
        };
        assert!(t.qualifies(&label(50.0, 0, 0.0), Difficulty::Easy));
        let mid = label(30.0, 0, 0.0);
        assert!(!t.qualifies(&mid, Difficulty::Easy));
        assert!(t.qualifies(&mid, Difficulty::Moderate));
        assert!(t.qualifies(&mid, Difficulty::Hard));
        let trunc = label(50.0, 0, 0.6);
        assert!(!t.qualifies(&trunc, Difficulty::Easy));
        assert!(!t.qualifies(&trunc, Difficulty::Moderate));
        assert!(!t.qualifies(&trunc, Difficulty::Hard));
    }

    proptest! {
        // With a fixed GT set, adding a top-scored true positive on a
        // previously unmatched GT never decreases AP.
        #[test]
        fn ap_monotone_under_new_tp(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gts = vec![det(-20.0, 0.0, 0.9).box3d]; // stays unmatched at first
            let mut dets = Vec::new();
            for i in 0..rng.gen_range(1..6usize) {
                gts.push(det(i as f64 * 10.0, 0.0, 0.9).box3d);
                if rng.gen_bool(0.6) {
                    dets.push(det(i as f64 * 10.0, 0.0, rng.gen_range(0.1..0.89)));
                }
                if rng.gen_bool(0.4) {
                    dets.push(det(i as f64 * 10.0 + 5.0, 0.0, rng.gen_range(0.1..0.89)));
                }
            }
            let base = ap40(
                &[EvalFrame { dets: dets.clone(), gts: gts.clone(), gt_ignore: vec![] }],
                0.5,
                IouMode::Bev,
            ).unwrap().unwrap().ap;
            dets.push(det(-20.0, 0.0, 1.0));
            let grown = ap40(
                &[EvalFrame { dets, gts, gt_ignore: vec![] }],
                0.5,
                IouMode::Bev,
            ).unwrap().unwrap().ap;
            prop_assert!(grown + 1e-12 >= base);
        }
    }
}
