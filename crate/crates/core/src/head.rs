//! Anchor-based detection head: per-cell anchors at two rotations,
//! residual box encoding, BEV-IoU target assignment, classification and
//! regression branches (1x1 convolutions, i.e. per-cell linear maps), and
//! the focal + L1 training losses.

use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geom::{bev_iou, normalize_angle, Box3D};
use crate::init::kaiming_uniform;
use crate::pillar::PillarConfig;
use crate::tensor::{NodeId, ParamId, ParamStore, Scalar, Tape, TapeBinding, Tensor};

/// Anchor heading set: one upright anchor and its 90-degree rotation.
pub const ANCHOR_ROTATIONS: [f64; 2] = [0.0, FRAC_PI_2];
pub const NUM_ANCHOR_ROTATIONS: usize = ANCHOR_ROTATIONS.len();
/// Components of one regression target.
pub const BOX_CODE: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub anchor_w: f64,
    pub anchor_l: f64,
    pub anchor_h: f64,
    pub anchor_z: f64,
    pub num_classes: usize,
    /// BEV IoU at or above which an anchor is positive.
    pub pos_iou: f64,
    /// BEV IoU below which an anchor is negative; in between is ignored.
    pub neg_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the regression term in the total loss.
    pub reg_weight: f64,
    pub smooth_l1: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            anchor_w: 0.6,
            anchor_l: 0.8,
            anchor_h: 1.73,
            anchor_z: -1.0,
            num_classes: 1,
            pos_iou: 0.5,
            neg_iou: 0.35,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_weight: 2.0,
            smooth_l1: false,
        }
    }
}

/// One anchor per cell center and rotation, tiled over the pseudo-image.
/// Anchor `a` at cell `(iy, ix)` with rotation `k` has flat index
/// `(iy * nx + ix) * 2 + k`, matching the head's output layout.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub step_x: f64,
    pub step_y: f64,
    pub size: (f64, f64, f64),
    pub z_center: f64,
}

impl AnchorGrid {
    pub fn new(pillars: &PillarConfig, head: &HeadConfig) -> Result<Self> {
        let (nx, ny) = pillars.grid_dims()?;
        Ok(AnchorGrid {
            nx,
            ny,
            x_min: pillars.x_min,
            y_min: pillars.y_min,
            step_x: pillars.pillar_x,
            step_y: pillars.pillar_y,
            size: (head.anchor_w, head.anchor_l, head.anchor_h),
            z_center: head.anchor_z,
        })
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny * NUM_ANCHOR_ROTATIONS
    }

    pub fn anchor(&self, index: usize) -> Box3D {
        let k = index % NUM_ANCHOR_ROTATIONS;
        let cell = index / NUM_ANCHOR_ROTATIONS;
        let (iy, ix) = (cell / self.nx, cell % self.nx);
        let (w, l, h) = self.size;
        Box3D {
            cx: self.x_min + (ix as f64 + 0.5) * self.step_x,
            cy: self.y_min + (iy as f64 + 0.5) * self.step_y,
            cz: self.z_center,
            w,
            l,
            h,
            theta: ANCHOR_ROTATIONS[k],
        }
    }
}

/// Residual encoding of a box against its anchor:
/// `(dx/d, dy/d, dz/h_a, log(w/w_a), log(l/l_a), log(h/h_a), sin(dtheta))`
/// with `d` the anchor's BEV diagonal.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> Result<[f64; BOX_CODE]> {
    if gt.w <= 0.0 || gt.l <= 0.0 || gt.h <= 0.0 || anchor.w <= 0.0 || anchor.l <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Ok([
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        (gt.theta - anchor.theta).sin(),
    ])
}

/// Inverse of [`encode_box`]; the heading comes back through the arcsine
/// principal branch, so flips beyond ±pi/2 collapse (which leaves the
/// footprint unchanged).
pub fn decode_box(pred: &[f64; BOX_CODE], anchor: &Box3D) -> Box3D {
    let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Box3D {
        cx: pred[0] * d + anchor.cx,
        cy: pred[1] * d + anchor.cy,
        cz: pred[2] * anchor.h + anchor.cz,
        w: anchor.w * pred[3].exp(),
        l: anchor.l * pred[4].exp(),
        h: anchor.h * pred[5].exp(),
        theta: normalize_angle(anchor.theta + pred[6].clamp(-1.0, 1.0).asin()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Per-anchor assignment with encoded regression targets for positives.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub labels: Vec<AnchorLabel>,
    pub reg_targets: Vec<[f64; BOX_CODE]>,
    pub num_pos: usize,
}

/// BEV-IoU matching: at or above `pos_iou` positive, below `neg_iou`
/// negative, in between ignored; each ground truth additionally forces its
/// best-overlapping unclaimed anchor positive.
pub fn assign_targets(
    grid: &AnchorGrid,
    gts: &[Box3D],
    cfg: &HeadConfig,
) -> Result<TargetAssignment> {
    let n = grid.count();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];

    // Candidate window per ground truth: cells whose center can still touch
    // the box, padded by the anchor's own diagonal.
    let (aw, al, _) = grid.size;
    let anchor_reach = 0.5 * (aw * aw + al * al).sqrt();
    for (gi, gt) in gts.iter().enumerate() {
        let reach = 0.5 * (gt.w * gt.w + gt.l * gt.l).sqrt() + anchor_reach;
        let ix0 = (((gt.cx - reach - grid.x_min) / grid.step_x).floor()).max(0.0) as usize;
        let iy0 = (((gt.cy - reach - grid.y_min) / grid.step_y).floor()).max(0.0) as usize;
        let ix1 = ((((gt.cx + reach - grid.x_min) / grid.step_x).ceil()) as usize).min(grid.nx);
        let iy1 = ((((gt.cy + reach - grid.y_min) / grid.step_y).ceil()) as usize).min(grid.ny);
        for iy in iy0..iy1 {
            for ix in ix0..ix1 {
                for k in 0..NUM_ANCHOR_ROTATIONS {
                    let ai = (iy * grid.nx + ix) * NUM_ANCHOR_ROTATIONS + k;
                    let iou = bev_iou(&grid.anchor(ai), gt)?;
                    if iou > best_iou[ai] {
                        best_iou[ai] = iou;
                        best_gt[ai] = gi;
                    }
                    if iou > gt_best[gi].0 {
                        gt_best[gi] = (iou, ai);
                    }
                }
            }
        }
    }

    for ai in 0..n {
        if best_gt[ai] == usize::MAX {
            continue;
        }
        if best_iou[ai] >= cfg.pos_iou {
            labels[ai] = AnchorLabel::Positive(best_gt[ai]);
        } else if best_iou[ai] >= cfg.neg_iou {
            labels[ai] = AnchorLabel::Ignore;
        }
    }

    // Best-match fallback, in ground-truth order; an anchor already forced
    // by an earlier ground truth is not stolen.
    let mut forced = vec![false; n];
    for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
        if ai == usize::MAX || iou <= 0.0 {
            continue;
        }
        if !forced[ai] {
            labels[ai] = AnchorLabel::Positive(gi);
            forced[ai] = true;
        }
    }

    let mut reg_targets = vec![[0.0; BOX_CODE]; n];
    let mut num_pos = 0usize;
    for (ai, label) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(gi) = label {
            reg_targets[ai] = encode_box(&gts[*gi], &grid.anchor(ai))?;
            num_pos += 1;
        }
    }
    Ok(TargetAssignment {
        labels,
        reg_targets,
        num_pos,
    })
}

/// The two per-cell linear branches over the fused feature map.
pub struct DetectionHead {
    pub cfg: HeadConfig,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
}

/// Initial classification bias giving a ~0.01 foreground prior.
const CLS_PRIOR_BIAS: f64 = -4.595119850134589; // -ln((1 - 0.01) / 0.01)

impl DetectionHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        cfg: HeadConfig,
    ) -> Self {
        let cls_out = NUM_ANCHOR_ROTATIONS * cfg.num_classes;
        let reg_out = NUM_ANCHOR_ROTATIONS * BOX_CODE;
        DetectionHead {
            cls_w: store.register("head.cls.w", kaiming_uniform(rng, &[in_channels, cls_out], in_channels)),
            cls_b: store.register("head.cls.b", Tensor::full(&[cls_out], S::from_f64(CLS_PRIOR_BIAS))),
            reg_w: store.register("head.reg.w", kaiming_uniform(rng, &[in_channels, reg_out], in_channels)),
            reg_b: store.register("head.reg.b", Tensor::zeros(&[reg_out])),
            cfg,
        }
    }

    /// `(cls logits [H, W, Na*Nc], reg [H, W, Na*7])`. Scores stay logits
    /// here; inference applies the sigmoid in [`decode_detections`].
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &ParamStore<S>,
        features: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let cw = bind.node(tape, store, self.cls_w);
        let cb = bind.node(tape, store, self.cls_b);
        let rw = bind.node(tape, store, self.reg_w);
        let rb = bind.node(tape, store, self.reg_b);
        let cls = tape.linear(features, cw, Some(cb))?;
        let reg = tape.linear(features, rw, Some(rb))?;
        Ok((cls, reg))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turn raw head outputs into scored boxes: sigmoid over class logits, score
/// floor, residual decode against each anchor.
pub fn decode_detections<S: Scalar>(
    cls: &Tensor<S>,
    reg: &Tensor<S>,
    grid: &AnchorGrid,
    num_classes: usize,
    score_floor: f64,
) -> Result<Vec<Detection>> {
    let n = grid.count();
    if cls.numel() != n * num_classes || reg.numel() != n * BOX_CODE {
        return Err(Error::shape("decode_detections", "head outputs do not match anchor grid"));
    }
    let cd = cls.data();
    let rd = reg.data();
    let mut out = Vec::new();
    for ai in 0..n {
        let (mut best_c, mut best_s) = (0usize, f64::NEG_INFINITY);
        for c in 0..num_classes {
            let s = cd[ai * num_classes + c].to_f64();
            if s > best_s {
                best_s = s;
                best_c = c;
            }
        }
        let score = sigmoid(best_s);
        if score < score_floor {
            continue;
        }
        let mut code = [0.0f64; BOX_CODE];
        for (i, c) in code.iter_mut().enumerate() {
            *c = rd[ai * BOX_CODE + i].to_f64();
        }
        let boxed = decode_box(&code, &grid.anchor(ai));
        out.push(Detection::new(boxed, score, best_c as u32)?);
    }
    Ok(out)
}

/// Binary focal loss over all non-ignored anchors, normalized by
/// `max(1, num_positives)`. Background is the all-zero target.
pub fn focal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cls_logits: NodeId,
    assignment: &TargetAssignment,
    gt_classes: &[u32],
    cfg: &HeadConfig,
) -> Result<NodeId> {
    let shape = tape.shape(cls_logits).to_vec();
    let numel: usize = shape.iter().product();
    let nc = cfg.num_classes;
    let n = assignment.labels.len();
    if numel != n * nc {
        return Err(Error::shape("focal_loss", "logits do not match assignment"));
    }
    let mut y = vec![S::zero(); numel];
    let mut not_y = vec![S::one(); numel];
    let mut valid = vec![S::one(); numel];
    for (ai, label) in assignment.labels.iter().enumerate() {
        match label {
            AnchorLabel::Positive(gi) => {
                let c = gt_classes.get(*gi).copied().unwrap_or(0) as usize;
                y[ai * nc + c] = S::one();
                not_y[ai * nc + c] = S::zero();
            }
            AnchorLabel::Ignore => {
                for c in 0..nc {
                    valid[ai * nc + c] = S::zero();
                }
            }
            AnchorLabel::Negative => {}
        }
    }
    let y = tape.constant(Tensor::new(shape.clone(), y)?);
    let not_y = tape.constant(Tensor::new(shape.clone(), not_y)?);
    let valid = tape.constant(Tensor::new(shape, valid)?);

    let p = tape.sigmoid(cls_logits)?;
    let neg_x = tape.neg(cls_logits)?;
    // -ln(p) and -ln(1 - p) through softplus for stability.
    let nlp = tape.softplus(neg_x)?;
    let nlq = tape.softplus(cls_logits)?;
    let one_minus_p = {
        let np = tape.neg(p)?;
        tape.add_scalar(np, 1.0)?
    };
    let w_pos = tape.pow_const(one_minus_p, cfg.focal_gamma)?;
    let w_neg = tape.pow_const(p, cfg.focal_gamma)?;
    let pos_term = {
        let t = tape.mul(w_pos, nlp)?;
        tape.scale(t, cfg.focal_alpha)?
    };
    let neg_term = {
        let t = tape.mul(w_neg, nlq)?;
        tape.scale(t, 1.0 - cfg.focal_alpha)?
    };
    let pos_masked = tape.mul(pos_term, y)?;
    let neg_masked = tape.mul(neg_term, not_y)?;
    let per_anchor = tape.add(pos_masked, neg_masked)?;
    let counted = tape.mul(per_anchor, valid)?;
    let total = tape.sum_all(counted)?;
    tape.scale(total, 1.0 / assignment.num_pos.max(1) as f64)
}

/// L1 (or optionally smooth-L1) regression loss over positive anchors'
/// 7-vectors, summed per component and normalized by `max(1, num_positives)`.
pub fn reg_loss<S: Scalar>(
    tape: &mut Tape<S>,
    reg_preds: NodeId,
    assignment: &TargetAssignment,
    cfg: &HeadConfig,
) -> Result<NodeId> {
    let shape = tape.shape(reg_preds).to_vec();
    let numel: usize = shape.iter().product();
    let n = assignment.labels.len();
    if numel != n * BOX_CODE {
        return Err(Error::shape("reg_loss", "regression map does not match assignment"));
    }
    let mut targets = vec![S::zero(); numel];
    let mut mask = vec![S::zero(); numel];
    for (ai, label) in assignment.labels.iter().enumerate() {
        if let AnchorLabel::Positive(_) = label {
            for i in 0..BOX_CODE {
                targets[ai * BOX_CODE + i] = S::from_f64(assignment.reg_targets[ai][i]);
                mask[ai * BOX_CODE + i] = S::one();
            }
        }
    }
    let targets = tape.constant(Tensor::new(shape.clone(), targets)?);
    let mask = tape.constant(Tensor::new(shape, mask)?);
    let diff = tape.sub(reg_preds, targets)?;
    let masked = tape.mul(diff, mask)?;
    let a = tape.abs(masked)?;
    let per = if cfg.smooth_l1 {
        // huber(a) = b*a - b^2/2 with b = min(a, 1).
        let neg_a = tape.neg(a)?;
        let minus_one = tape.constant(Tensor::full(tape.shape(a), S::from_f64(-1.0)));
        let m = tape.maximum(neg_a, minus_one)?;
        let b = tape.neg(m)?;
        let ba = tape.mul(b, a)?;
        let bb = tape.mul(b, b)?;
        let half_bb = tape.scale(bb, 0.5)?;
        tape.sub(ba, half_bb)?
    } else {
        a
    };
    let total = tape.sum_all(per)?;
    tape.scale(total, 1.0 / assignment.num_pos.max(1) as f64)
}

/// Scalar losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub num_positives: usize,
}

/// `total = cls + reg_weight * reg`, returned with the scalar components.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cls_logits: NodeId,
    reg_preds: NodeId,
    assignment: &TargetAssignment,
    gt_classes: &[u32],
    cfg: &HeadConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let cls = focal_loss(tape, cls_logits, assignment, gt_classes, cfg)?;
    let reg = reg_loss(tape, reg_preds, assignment, cfg)?;
    let weighted = tape.scale(reg, cfg.reg_weight)?;
    let total = tape.add(cls, weighted)?;
    let breakdown = LossBreakdown {
        cls_loss: tape.value(cls).data()[0].to_f64(),
        reg_loss: tape.value(reg).data()[0].to_f64(),
        total: tape.value(total).data()[0].to_f64(),
        num_positives: assignment.num_pos,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy_grid() -> AnchorGrid {
        AnchorGrid::new(&PillarConfig::toy(), &HeadConfig::default()).unwrap()
    }

    #[test]
    fn anchor_count_and_layout() {
        let g = toy_grid();
        assert_eq!(g.count(), 64 * 64 * 2);
        let a0 = g.anchor(0);
        assert!((a0.cx - (-12.8 + 0.2)).abs() < 1e-12);
        assert!((a0.cy - (-12.8 + 0.2)).abs() < 1e-12);
        assert_eq!(a0.theta, 0.0);
        let a1 = g.anchor(1);
        assert!((a1.theta - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn encode_identity_and_unit_shift() {
        let g = toy_grid();
        let anchor = g.anchor(100);
        assert_eq!(encode_box(&anchor, &anchor).unwrap(), [0.0; 7]);

        let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
        let mut shifted = anchor;
        shifted.cx += d;
        let code = encode_box(&shifted, &anchor).unwrap();
        assert!((code[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_zeros_and_quarter_turn() {
        let g = toy_grid();
        let anchor = g.anchor(42);
        assert_eq!(decode_box(&[0.0; 7], &anchor), anchor);
        let turned = decode_box(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &anchor);
        assert!((turned.theta - (anchor.theta + FRAC_PI_2)).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_within_principal_branch() {
        let g = toy_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let anchor = g.anchor(rng.gen_range(0..g.count()));
            let gt = Box3D::new(
                anchor.cx + rng.gen_range(-0.3..0.3),
                anchor.cy + rng.gen_range(-0.3..0.3),
                anchor.cz + rng.gen_range(-0.5..0.5),
                rng.gen_range(0.4..0.9),
                rng.gen_range(0.5..1.1),
                rng.gen_range(1.4..1.9),
                anchor.theta + rng.gen_range(-1.5..1.5), // inside +-pi/2
            )
            .unwrap();
            let code = encode_box(&gt, &anchor).unwrap();
            let back = decode_box(&code, &anchor);
            for (a, b) in [
                (back.cx, gt.cx), (back.cy, gt.cy), (back.cz, gt.cz),
                (back.w, gt.w), (back.l, gt.l), (back.h, gt.h), (back.theta, gt.theta),
            ] {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn assign_identical_disjoint_and_fallback() {
        let g = toy_grid();
        let cfg = HeadConfig::default();
        // Identical to an anchor: positive (IoU 1).
        let anchor = g.anchor(2 * (30 * 64 + 30));
        let a = assign_targets(&g, &[anchor], &cfg).unwrap();
        assert!(matches!(a.labels[2 * (30 * 64 + 30)], AnchorLabel::Positive(0)));

        // A box matching no anchor above the positive gate still claims its
        // best anchor through the fallback.
        let off = Box3D::new(
            anchor.cx + 0.19, anchor.cy + 0.17, anchor.cz,
            anchor.w, anchor.l, anchor.h, 0.6,
        )
        .unwrap();
        let a = assign_targets(&g, &[off], &cfg).unwrap();
        assert_eq!(a.num_pos, 1);
        let pos = a.labels.iter().position(|l| matches!(l, AnchorLabel::Positive(0))).unwrap();
        let best = (0..g.count())
            .max_by(|&x, &y| {
                bev_iou(&g.anchor(x), &off).unwrap()
                    .partial_cmp(&bev_iou(&g.anchor(y), &off).unwrap())
                    .unwrap()
                    .then(y.cmp(&x)) // first index wins ties
            })
            .unwrap();
        assert_eq!(pos, best);

        // Anchors far from every box are negative.
        assert!(matches!(a.labels[0], AnchorLabel::Negative));
    }

    #[test]
    fn assign_windowed_matches_exhaustive() {
        let mut pillars = PillarConfig::toy();
        pillars.x_min = -3.2;
        pillars.x_max = 3.2;
        pillars.y_min = -3.2;
        pillars.y_max = 3.2;
        pillars.pillar_x = 0.4;
        pillars.pillar_y = 0.4;
        let cfg = HeadConfig::default();
        let g = AnchorGrid::new(&pillars, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            let gts: Vec<Box3D> = (0..3)
                .map(|_| {
                    Box3D::new(
                        rng.gen_range(-2.5..2.5),
                        rng.gen_range(-2.5..2.5),
                        -1.0,
                        rng.gen_range(0.4..0.8),
                        rng.gen_range(0.5..1.0),
                        1.7,
                        rng.gen_range(-3.1..3.1),
                    )
                    .unwrap()
                })
                .collect();
            let fast = assign_targets(&g, &gts, &cfg).unwrap();
            // Exhaustive route: IoU of every anchor against every box.
            for ai in 0..g.count() {
                let anchor = g.anchor(ai);
                let mut best = 0.0;
                for gt in &gts {
                    best = f64::max(best, bev_iou(&anchor, gt).unwrap());
                }
                match fast.labels[ai] {
                    AnchorLabel::Negative => assert!(best < cfg.neg_iou, "anchor {ai}"),
                    AnchorLabel::Ignore => assert!(best >= cfg.neg_iou && best < cfg.pos_iou),
                    AnchorLabel::Positive(_) => {} // threshold or fallback
                }
            }
        }
    }

    fn micro_assignment(n: usize, positives: &[usize]) -> TargetAssignment {
        let mut labels = vec![AnchorLabel::Negative; n];
        let mut reg_targets = vec![[0.0; BOX_CODE]; n];
        for &p in positives {
            labels[p] = AnchorLabel::Positive(0);
            reg_targets[p] = [0.1, -0.2, 0.0, 0.3, 0.0, 0.0, 0.5];
        }
        TargetAssignment { labels, reg_targets, num_pos: positives.len() }
    }

    #[test]
    fn head_forward_uniform_prior() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let head = DetectionHead::init(&mut store, &mut rng, 12, HeadConfig::default());
        // Zero weights leave only the bias.
        let wid = store.find("head.cls.w").unwrap();
        let zeros = Tensor::zeros(store.value(wid).shape());
        store.set_value(wid, zeros);
        let mut tape = Tape::<f64>::new();
        let mut bind = TapeBinding::new(&store, false);
        let feats = tape.constant(Tensor::zeros(&[4, 4, 12]));
        let (cls, reg) = head.forward(&mut tape, &mut bind, &store, feats).unwrap();
        assert_eq!(tape.shape(cls), &[4, 4, 2]);
        assert_eq!(tape.shape(reg), &[4, 4, 14]);
        for &v in tape.value(cls).data() {
            assert!((sigmoid(v) - 0.01).abs() < 1e-4);
        }
    }

    #[test]
    fn focal_gamma_zero_alpha_one_is_cross_entropy() {
        let cfg = HeadConfig { focal_alpha: 1.0, focal_gamma: 0.0, ..Default::default() };
        let n = 6;
        let assignment = micro_assignment(n, &[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, n], &logits).unwrap());
        let loss = focal_loss(&mut tape, x, &assignment, &[0], &cfg).unwrap();
        // Independent cross-entropy: -y ln p - (1-y) ln(1-p), alpha folding
        // (1 - alpha) = 0 on the negatives.
        let mut expect = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            let p = sigmoid(l);
            if matches!(assignment.labels[i], AnchorLabel::Positive(_)) {
                expect += -p.ln();
            }
        }
        expect /= 2.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn focal_closed_form_single_positive() {
        // Positive anchor with p = 0.9 under (alpha 0.25, gamma 2):
        // 0.25 * 0.1^2 * -ln(0.9) = 2.634e-4.
        let cfg = HeadConfig::default();
        let assignment = micro_assignment(1, &[0]);
        let logit = (0.9f64 / 0.1).ln();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 1], &[logit]).unwrap());
        let loss = focal_loss(&mut tape, x, &assignment, &[0], &cfg).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - 2.634_012_891_445_651e-4).abs() < 1e-12, "{got}");
    }

    #[test]
    fn focal_vanishes_for_perfect_predictions() {
        let cfg = HeadConfig::default();
        let assignment = micro_assignment(2, &[0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2], &[30.0, -30.0]).unwrap());
        let loss = focal_loss(&mut tape, x, &assignment, &[0], &cfg).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-10);
    }

    #[test]
    fn focal_monotone_in_scores() {
        let cfg = HeadConfig::default();
        let assignment = micro_assignment(1, &[0]);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let logit = -2.0 + 0.3 * k as f64;
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[1, 1, 1], &[logit]).unwrap());
            let loss = focal_loss(&mut tape, x, &assignment, &[0], &cfg).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev, "positive-anchor loss must fall as score rises");
            prev = v;
        }
        let negative = micro_assignment(1, &[]);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let logit = 2.0 - 0.3 * k as f64;
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[1, 1, 1], &[logit]).unwrap());
            let loss = focal_loss(&mut tape, x, &negative, &[], &cfg).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev, "negative-anchor loss must fall as score falls");
            prev = v;
        }
    }

    #[test]
    fn reg_loss_examples() {
        let cfg = HeadConfig::default();
        let assignment = micro_assignment(3, &[1]);
        // Exact predictions: zero loss.
        let mut tape = Tape::<f64>::new();
        let mut exact = vec![0.0; 3 * BOX_CODE];
        exact[BOX_CODE..2 * BOX_CODE].copy_from_slice(&assignment.reg_targets[1]);
        let preds = tape.constant(Tensor::from_f64(&[1, 3, BOX_CODE], &exact).unwrap());
        let loss = reg_loss(&mut tape, preds, &assignment, &cfg).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);

        // One component off by 0.5: total 0.5 (sum convention over the 7).
        let mut off = exact.clone();
        off[BOX_CODE + 3] += 0.5;
        let preds = tape.constant(Tensor::from_f64(&[1, 3, BOX_CODE], &off).unwrap());
        let loss = reg_loss(&mut tape, preds, &assignment, &cfg).unwrap();
        assert!((tape.value(loss).data()[0] - 0.5).abs() < 1e-12);

        // No positives: normalizer guard keeps it at zero.
        let none = micro_assignment(3, &[]);
        let loss = reg_loss(&mut tape, preds, &none, &cfg).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn smooth_l1_quadratic_then_linear() {
        let cfg = HeadConfig { smooth_l1: true, ..Default::default() };
        let assignment = micro_assignment(1, &[0]);
        for (delta, expect) in [(0.4f64, 0.5 * 0.4 * 0.4), (2.0, 2.0 - 0.5)] {
            let mut tape = Tape::<f64>::new();
            let mut preds = assignment.reg_targets[0];
            preds[2] += delta;
            let p = tape.constant(Tensor::from_f64(&[1, 1, BOX_CODE], &preds).unwrap());
            let loss = reg_loss(&mut tape, p, &assignment, &cfg).unwrap();
            assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_invariant_under_gt_permutation() {
        let g = toy_grid();
        let cfg = HeadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let gts: Vec<Box3D> = (0..4)
            .map(|i| {
                Box3D::new(
                    -8.0 + 4.0 * i as f64 + rng.gen_range(-0.1..0.1),
                    rng.gen_range(-6.0..6.0),
                    -1.0,
                    0.6, 0.8, 1.7,
                    rng.gen_range(-3.0..3.0),
                )
                .unwrap()
            })
            .collect();
        let mut permuted = gts.clone();
        permuted.reverse();
        let logits: Vec<f64> = (0..g.count()).map(|_| rng.gen_range(-3.0..1.0)).collect();
        let regs: Vec<f64> = (0..g.count() * BOX_CODE).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut losses = Vec::new();
        for set in [&gts, &permuted] {
            let assignment = assign_targets(&g, set, &cfg).unwrap();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[g.ny, g.nx, 2], &logits).unwrap());
            let r = tape.constant(Tensor::from_f64(&[g.ny, g.nx, 2 * BOX_CODE], &regs).unwrap());
            let (_, breakdown) = total_loss(&mut tape, x, r, &assignment, &[0; 4], &cfg).unwrap();
            losses.push(breakdown);
        }
        assert!((losses[0].total - losses[1].total).abs() < 1e-9);
        assert_eq!(losses[0].num_positives, losses[1].num_positives);
    }

    #[test]
    fn decode_detections_score_floor() {
        let g = toy_grid();
        let cls = Tensor::<f64>::full(&[g.count()], -10.0);
        let reg = Tensor::<f64>::zeros(&[g.count() * BOX_CODE]);
        let dets = decode_detections(&cls, &reg, &g, 1, 0.1).unwrap();
        assert!(dets.is_empty());
        let dets = decode_detections(&cls, &reg, &g, 1, 0.0).unwrap();
        assert_eq!(dets.len(), g.count());
    }
}
