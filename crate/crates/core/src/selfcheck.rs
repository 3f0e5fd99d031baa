//! Independent verification machinery: central finite-difference gradient
//! checks for every tape operation, Monte-Carlo overlap oracles, brute-force
//! NMS and AP references, and the named check battery behind the `selftest`
//! command.
//!
//! Everything here deliberately avoids the code paths it verifies: the
//! oracles integrate, enumerate, or rescan from the definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{ap40, Detection, EvalFrame, IouMode, RECALL_POSITIONS};
use crate::geom::{bev_iou, iou3d, Box3D};
use crate::paa::{self, PaaConfig, PaaParams};
use crate::tensor::{NodeId, ParamStore, Tape, TapeBinding, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckReport {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

// ── Finite differences ──────────────────────────────────────────────────

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL_PER_OP: f64 = 1e-4;
pub const FD_TOL_END_TO_END: f64 = 1e-3;

/// Relative error with an absolute floor for near-zero pairs.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between tape gradients and central differences for a
/// scalar-valued graph over explicit input tensors.
///
/// `build` must construct the same scalar from the given leaves every call.
pub fn fd_check_inputs(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    step: f64,
) -> Result<f64> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &leaves)?;
        Ok((tape, leaves, root))
    };
    let (mut tape, leaves, root) = eval(inputs)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| tape.grad(l).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(l).numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + step;
            let (plus_tape, _, plus_root) = eval(&work)?;
            let fp = plus_tape.value(plus_root).data()[0];
            work[ti].data_mut()[j] = orig - step;
            let (minus_tape, _, minus_root) = eval(&work)?;
            let fm = minus_tape.value(minus_root).data()[0];
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

fn sample_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("sample shape")
}

/// Push every element at least `gap` away from zero (kinked ops).
fn separate_from_zero(t: &mut Tensor<f64>, gap: f64) {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v += if *v >= 0.0 { gap } else { -gap };
        }
    }
}

/// Random projection so every output element affects the scalar root.
fn project_to_scalar(tape: &mut Tape<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let proj = tape.constant(sample_tensor(rng, &shape, 0.3, 1.7));
    let weighted = tape.mul(out, proj)?;
    tape.sum_all(weighted)
}

/// One differentiable-operation check over `instances` random draws.
#[derive(Debug, Clone)]
pub struct OpGradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type CaseBuilder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;
type CaseSampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

struct OpCase {
    name: &'static str,
    sampler: CaseSampler,
    builder: CaseBuilder,
}

fn op_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: &'static str, sampler: CaseSampler, builder: CaseBuilder| {
        cases.push(OpCase { name, sampler, builder });
    };

    push(
        "add_broadcast",
        Box::new(|rng| vec![sample_tensor(rng, &[2, 3, 4], -2.0, 2.0), sample_tensor(rng, &[2, 1, 4], -2.0, 2.0)]),
        Box::new(|t, l| t.add(l[0], l[1])),
    );
    push(
        "sub",
        Box::new(|rng| vec![sample_tensor(rng, &[3, 4], -2.0, 2.0), sample_tensor(rng, &[3, 4], -2.0, 2.0)]),
        Box::new(|t, l| t.sub(l[0], l[1])),
    );
    push(
        "mul_broadcast",
        Box::new(|rng| vec![sample_tensor(rng, &[2, 3, 1], -2.0, 2.0), sample_tensor(rng, &[2, 1, 4], -2.0, 2.0)]),
        Box::new(|t, l| t.mul(l[0], l[1])),
    );
    push(
        "div",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[3, 4], -2.0, 2.0),
                sample_tensor(rng, &[1, 4], 0.5, 2.5),
            ]
        }),
        Box::new(|t, l| t.div(l[0], l[1])),
    );
    push(
        "maximum",
        Box::new(|rng| {
            let a = sample_tensor(rng, &[3, 4], -2.0, 2.0);
            let mut b = sample_tensor(rng, &[3, 4], -2.0, 2.0);
            for (bv, &av) in b.data_mut().iter_mut().zip(a.data()) {
                if (*bv - av).abs() < 1e-3 {
                    *bv += 0.5;
                }
            }
            vec![a, b]
        }),
        Box::new(|t, l| t.maximum(l[0], l[1])),
    );
    push(
        "neg",
        Box::new(|rng| vec![sample_tensor(rng, &[5], -2.0, 2.0)]),
        Box::new(|t, l| t.neg(l[0])),
    );
    push(
        "scale_add_scalar",
        Box::new(|rng| vec![sample_tensor(rng, &[2, 5], -2.0, 2.0)]),
        Box::new(|t, l| {
            let s = t.scale(l[0], 0.7)?;
            t.add_scalar(s, 0.3)
        }),
    );
    push(
        "relu",
        Box::new(|rng| {
            let mut x = sample_tensor(rng, &[4, 5], -2.0, 2.0);
            separate_from_zero(&mut x, 1e-3);
            vec![x]
        }),
        Box::new(|t, l| t.relu(l[0])),
    );
    push(
        "sigmoid",
        Box::new(|rng| vec![sample_tensor(rng, &[4, 5], -3.0, 3.0)]),
        Box::new(|t, l| t.sigmoid(l[0])),
    );
    push(
        "swish",
        Box::new(|rng| vec![sample_tensor(rng, &[4, 5], -3.0, 3.0)]),
        Box::new(|t, l| t.swish(l[0])),
    );
    push(
        "shifted_sigmoid",
        Box::new(|rng| vec![sample_tensor(rng, &[4, 5], -3.0, 3.0)]),
        Box::new(|t, l| t.shifted_sigmoid(l[0])),
    );
    push(
        "softplus",
        Box::new(|rng| vec![sample_tensor(rng, &[4, 5], -3.0, 3.0)]),
        Box::new(|t, l| t.softplus(l[0])),
    );
    push(
        "abs",
        Box::new(|rng| {
            let mut x = sample_tensor(rng, &[4, 5], -2.0, 2.0);
            separate_from_zero(&mut x, 1e-3);
            vec![x]
        }),
        Box::new(|t, l| t.abs(l[0])),
    );
    push(
        "pow_const",
        Box::new(|rng| vec![sample_tensor(rng, &[4, 5], 0.05, 2.0)]),
        Box::new(|t, l| t.pow_const(l[0], 2.0)),
    );
    push(
        "linear_bias",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[3, 2, 4], -1.5, 1.5),
                sample_tensor(rng, &[4, 5], -1.0, 1.0),
                sample_tensor(rng, &[5], -0.5, 0.5),
            ]
        }),
        Box::new(|t, l| t.linear(l[0], l[1], Some(l[2]))),
    );
    push(
        "conv2d_same_s1",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[5, 5, 2], -1.0, 1.0),
                sample_tensor(rng, &[3, 3, 2, 3], -0.8, 0.8),
                sample_tensor(rng, &[3], -0.3, 0.3),
            ]
        }),
        Box::new(|t, l| t.conv2d(l[0], l[1], Some(l[2]), 1, crate::tensor::Padding::Same)),
    );
    push(
        "conv2d_same_s2",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[6, 5, 2], -1.0, 1.0),
                sample_tensor(rng, &[3, 3, 2, 2], -0.8, 0.8),
            ]
        }),
        Box::new(|t, l| t.conv2d(l[0], l[1], None, 2, crate::tensor::Padding::Same)),
    );
    push(
        "conv2d_valid",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[5, 6, 2], -1.0, 1.0),
                sample_tensor(rng, &[3, 3, 2, 2], -0.8, 0.8),
            ]
        }),
        Box::new(|t, l| t.conv2d(l[0], l[1], None, 1, crate::tensor::Padding::Valid)),
    );
    push(
        "batch_norm_train",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[4, 3, 3], -2.0, 2.0),
                sample_tensor(rng, &[3], 0.5, 1.5),
                sample_tensor(rng, &[3], -0.5, 0.5),
            ]
        }),
        Box::new(|t, l| Ok(t.batch_norm(l[0], l[1], l[2], 1e-5, None)?.0)),
    );
    push(
        "batch_norm_frozen",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[4, 3, 3], -2.0, 2.0),
                sample_tensor(rng, &[3], 0.5, 1.5),
                sample_tensor(rng, &[3], -0.5, 0.5),
            ]
        }),
        Box::new(|t, l| {
            let mean = [0.1, -0.2, 0.05];
            let var = [1.1, 0.9, 1.3];
            Ok(t.batch_norm(l[0], l[1], l[2], 1e-5, Some((&mean, &var)))?.0)
        }),
    );
    push(
        "reduce_sum",
        Box::new(|rng| vec![sample_tensor(rng, &[3, 4, 2], -2.0, 2.0)]),
        Box::new(|t, l| t.reduce_sum(l[0], 1)),
    );
    push(
        "reduce_mean",
        Box::new(|rng| vec![sample_tensor(rng, &[3, 4, 2], -2.0, 2.0)]),
        Box::new(|t, l| t.reduce_mean(l[0], 1)),
    );
    push(
        "reduce_max",
        Box::new(|rng| {
            let mut x = sample_tensor(rng, &[3, 4, 2], -2.0, 2.0);
            // Axis 1 groups stride over the inner extent (2).
            let d = x.data_mut();
            for o in 0..3 {
                for i in 0..2 {
                    for a in 0..4 {
                        for b in 0..a {
                            let (ia, ib) = ((o * 4 + a) * 2 + i, (o * 4 + b) * 2 + i);
                            if (d[ia] - d[ib]).abs() < 1e-3 {
                                d[ia] += 3e-3 + 0.1;
                            }
                        }
                    }
                }
            }
            vec![x]
        }),
        Box::new(|t, l| t.reduce_max(l[0], 1)),
    );
    push(
        "row_max_masked",
        Box::new(|rng| {
            let mut x = sample_tensor(rng, &[2, 4, 3], -2.0, 2.0);
            let d = x.data_mut();
            for p in 0..2 {
                for c in 0..3 {
                    for a in 0..4 {
                        for b in 0..a {
                            let (ia, ib) = ((p * 4 + a) * 3 + c, (p * 4 + b) * 3 + c);
                            if (d[ia] - d[ib]).abs() < 1e-3 {
                                d[ia] += 3e-3 + 0.1;
                            }
                        }
                    }
                }
            }
            vec![x]
        }),
        Box::new(|t, l| t.row_max_masked(l[0], &[3, 2])),
    );
    push(
        "upsample2x",
        Box::new(|rng| vec![sample_tensor(rng, &[3, 2, 2], -2.0, 2.0)]),
        Box::new(|t, l| t.upsample2x(l[0])),
    );
    push(
        "maxpool2x2",
        Box::new(|rng| {
            let mut x = sample_tensor(rng, &[4, 4, 2], -2.0, 2.0);
            let d = x.data_mut();
            // Separate each 2x2 window per channel.
            for c in 0..2 {
                for wy in 0..2 {
                    for wx in 0..2 {
                        let idx: Vec<usize> = (0..4)
                            .map(|k| ((2 * wy + k / 2) * 4 + 2 * wx + k % 2) * 2 + c)
                            .collect();
                        for i in 1..4 {
                            for j in 0..i {
                                if (d[idx[i]] - d[idx[j]]).abs() < 1e-3 {
                                    d[idx[i]] += 3e-3 + 0.1;
                                }
                            }
                        }
                    }
                }
            }
            vec![x]
        }),
        Box::new(|t, l| t.maxpool2x2(l[0])),
    );
    push(
        "concat_slice",
        Box::new(|rng| {
            vec![
                sample_tensor(rng, &[2, 3, 2], -2.0, 2.0),
                sample_tensor(rng, &[2, 2, 2], -2.0, 2.0),
            ]
        }),
        Box::new(|t, l| {
            let cat = t.concat(&[l[0], l[1]], 1)?;
            t.slice_axis(cat, 1, 1, 3)
        }),
    );
    push(
        "reshape",
        Box::new(|rng| vec![sample_tensor(rng, &[2, 6], -2.0, 2.0)]),
        Box::new(|t, l| t.reshape(l[0], &[3, 4])),
    );
    push(
        "scatter2d",
        Box::new(|rng| vec![sample_tensor(rng, &[3, 4], -2.0, 2.0)]),
        Box::new(|t, l| t.scatter2d(l[0], &[(1, 0), (3, 2), (0, 3)], 4, 4)),
    );

    cases
}

/// Run the per-operation finite-difference suite: every differentiable tape
/// operation, `instances` random draws each, in 64-bit precision.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<OpGradCheck>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(case.name.as_bytes()));
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let inputs = (case.sampler)(&mut rng);
            let proj_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let builder = &case.builder;
            let err = fd_check_inputs(
                &inputs,
                &|tape, leaves| {
                    let o = builder(tape, leaves)?;
                    project_to_scalar(tape, o, &mut proj_rng.clone())
                },
                FD_STEP,
            )?;
            worst = worst.max(err);
        }
        out.push(OpGradCheck {
            name: case.name.to_string(),
            max_rel_err: worst,
            passed: worst < FD_TOL_PER_OP,
        });
    }
    Ok(out)
}

// ── Monte-Carlo overlap oracles ─────────────────────────────────────────

/// BEV IoU estimated by uniform sampling inside box `a`.
pub fn mc_bev_iou(a: &Box3D, b: &Box3D, samples: u32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sin_t, cos_t) = a.theta.sin_cos();
    let mut hits = 0u32;
    for _ in 0..samples {
        let u = rng.gen_range(-0.5..0.5) * a.l;
        let v = rng.gen_range(-0.5..0.5) * a.w;
        let px = a.cx + cos_t * u - sin_t * v;
        let py = a.cy + sin_t * u + cos_t * v;
        if b.contains_bev(px, py) {
            hits += 1;
        }
    }
    let inter = a.bev_area() * hits as f64 / samples as f64;
    inter / (a.bev_area() + b.bev_area() - inter)
}

/// 3D IoU estimated by uniform sampling inside box `a`'s volume.
pub fn mc_iou3d(a: &Box3D, b: &Box3D, samples: u32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sin_t, cos_t) = a.theta.sin_cos();
    let (z0, z1) = a.z_range();
    let mut hits = 0u32;
    for _ in 0..samples {
        let u = rng.gen_range(-0.5..0.5) * a.l;
        let v = rng.gen_range(-0.5..0.5) * a.w;
        let px = a.cx + cos_t * u - sin_t * v;
        let py = a.cy + sin_t * u + cos_t * v;
        let pz = rng.gen_range(z0..z1);
        if b.contains(px, py, pz) {
            hits += 1;
        }
    }
    let inter = a.volume() * hits as f64 / samples as f64;
    inter / (a.volume() + b.volume() - inter)
}

/// Random overlapping-ish box pair for oracle comparisons.
pub fn random_box_pair(rng: &mut ChaCha8Rng) -> (Box3D, Box3D) {
    let a = Box3D::new(
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(-3.1..3.1),
    )
    .expect("valid box");
    let b = Box3D::new(
        a.cx + rng.gen_range(-1.0..1.0),
        a.cy + rng.gen_range(-1.0..1.0),
        a.cz + rng.gen_range(-0.5..0.5),
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.3..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(-3.1..3.1),
    )
    .expect("valid box");
    (a, b)
}

// ── Brute-force references ──────────────────────────────────────────────

/// NMS by repeated full scans: take the unsuppressed global maximum (ties by
/// lowest index), suppress everything overlapping it, repeat.
pub fn brute_force_nms(dets: &[Detection], iou_thresh: f64, top_k: usize) -> Result<Vec<usize>> {
    let mut alive: Vec<bool> = dets.iter().map(|_| true).collect();
    let mut kept = Vec::new();
    while kept.len() < top_k {
        let mut best: Option<usize> = None;
        for (i, det) in dets.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) if det.score > dets[j].score => Some(i),
                keep => keep,
            };
        }
        let Some(winner) = best else { break };
        kept.push(winner);
        alive[winner] = false;
        for (i, det) in dets.iter().enumerate() {
            if alive[i] && bev_iou(&det.box3d, &dets[winner].box3d)? > iou_thresh {
                alive[i] = false;
            }
        }
    }
    Ok(kept)
}

/// AP@40 straight from the definition: independent greedy matching, the full
/// PR polyline, and a per-recall-position scan for the interpolated maxima.
pub fn brute_force_ap40(frames: &[EvalFrame], iou_thresh: f64, mode: IouMode) -> Result<Option<f64>> {
    let overlap = |a: &Box3D, b: &Box3D| match mode {
        IouMode::Bev => bev_iou(a, b),
        IouMode::Iou3d => iou3d(a, b),
    };
    let mut gt_total = 0usize;
    let mut pooled: Vec<(f64, bool)> = Vec::new(); // (score, is_tp), ignored dropped
    for frame in frames {
        let ignored = |g: usize| frame.gt_ignore.get(g).copied().unwrap_or(false);
        gt_total += (0..frame.gts.len()).filter(|&g| !ignored(g)).count();
        let mut order: Vec<usize> = (0..frame.dets.len()).collect();
        order.sort_by(|&a, &b| {
            frame.dets[b].score.partial_cmp(&frame.dets[a].score).unwrap().then(a.cmp(&b))
        });
        let mut taken = vec![false; frame.gts.len()];
        for &di in &order {
            let det = &frame.dets[di];
            let mut best: Option<(f64, usize)> = None;
            let mut absorbed = false;
            for (gi, gt) in frame.gts.iter().enumerate() {
                let iou = overlap(&det.box3d, gt)?;
                if iou < iou_thresh {
                    continue;
                }
                if ignored(gi) {
                    absorbed = true;
                } else if !taken[gi] && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            if let Some((_, gi)) = best {
                taken[gi] = true;
                pooled.push((det.score, true));
            } else if !absorbed {
                pooled.push((det.score, false));
            }
        }
    }
    if gt_total == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].0.partial_cmp(&pooled[a].0).unwrap().then(a.cmp(&b)));
    let n = RECALL_POSITIONS;
    let mut ap = 0.0;
    for k in 1..=n {
        let r = k as f64 / n as f64;
        let mut best_p = 0.0f64;
        // Rescan every prefix from scratch.
        for prefix in 1..=order.len() {
            let tp = order[..prefix].iter().filter(|&&i| pooled[i].1).count();
            let recall = tp as f64 / gt_total as f64;
            if recall + 1e-12 >= r {
                best_p = best_p.max(tp as f64 / prefix as f64);
            }
        }
        ap += best_p;
    }
    Ok(Some(ap / n as f64))
}

// ── Hashing for regression pins ─────────────────────────────────────────

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Order-sensitive hash of values rounded to `decimals` places; stable across
/// platforms as long as the computation agrees to that precision.
pub fn quantized_hash(values: impl IntoIterator<Item = f64>, decimals: i32) -> u64 {
    let scale = 10f64.powi(decimals);
    let mut h = 0xcbf29ce484222325u64;
    for v in values {
        let q = (v * scale).round() as i64;
        for b in q.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

// ── Named runtime checks (the selftest battery) ─────────────────────────

/// Exact ReLU identity of the task-aware block at initialization.
pub fn check_task_aware_relu_identity(inputs: usize, seed: u64) -> CheckReport {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PaaParams::init(&mut store, &mut rng, "check", 4, 9, PaaConfig::default());
    check_task_aware_relu_identity_with(&store, &params, inputs, seed)
}

/// Same check against explicit parameters (so tampering is detectable).
pub fn check_task_aware_relu_identity_with(
    store: &ParamStore<f64>,
    params: &PaaParams,
    inputs: usize,
    seed: u64,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut mismatches = 0usize;
    for _ in 0..inputs {
        let mut tape = Tape::<f64>::new();
        let mut bind = TapeBinding::new(store, false);
        let data: Vec<f64> = (0..2 * 4 * 9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = tape.constant(Tensor::new(vec![2, 4, 9], data).expect("shape"));
        let Ok(out) = paa::task_aware(&mut tape, &mut bind, store, params, f, &[4, 4]) else {
            return CheckReport::new("task_aware_relu_identity", false, "forward failed");
        };
        let relu = tape.relu(f).expect("relu");
        let same = tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(relu).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    CheckReport::new(
        "task_aware_relu_identity",
        mismatches == 0,
        format!("{mismatches}/{inputs} inputs deviated from exact ReLU"),
    )
}

/// Fusion-gate normalization against the reference epsilon: the live gate's
/// coefficients must sum to `sum(w) / (sum(w) + 1e-4)` for random positive
/// weights, and an equal-weight zero-epsilon gate must reproduce the
/// arithmetic mean. A gate built with a different epsilon fails the check.
pub fn check_gate_normalization(gate_eps: f64, seed: u64) -> CheckReport {
    const REFERENCE_EPS: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let n = 2 + (t % 2);
        let mut store = ParamStore::<f64>::new();
        let gate = crate::backbone::FuseGate::init(&mut store, &mut rng, "check", n, 1, gate_eps);
        let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..4.0)).collect();
        for (&id, &w) in gate.weight_ids().iter().zip(&ws) {
            store.set_value(id, Tensor::scalar(w));
        }
        let Ok(coeffs) = gate.coefficients(&store) else {
            return CheckReport::new("fusion_gate_normalization", false, "gate failed");
        };
        let got: f64 = coeffs.iter().sum();
        let w_sum: f64 = ws.iter().sum();
        let expect = w_sum / (w_sum + REFERENCE_EPS);
        worst = worst.max((got - expect).abs());
    }
    // Equal weights through a zero-epsilon gate: exactly the arithmetic mean.
    let mut mean_err = 0.0f64;
    for t in 0..50 {
        let n = 2 + (t % 2);
        let mut store = ParamStore::<f64>::new();
        let gate = crate::backbone::FuseGate::init(&mut store, &mut rng, "check", n, 1, 0.0);
        let w = rng.gen_range(0.1..3.0);
        for &id in gate.weight_ids() {
            store.set_value(id, Tensor::scalar(w));
        }
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let Ok(blend) = gate.blend_scalars(&store, &xs) else {
            return CheckReport::new("fusion_gate_normalization", false, "gate failed");
        };
        let mean = xs.iter().sum::<f64>() / n as f64;
        mean_err = mean_err.max((blend - mean).abs());
    }
    let passed = worst < 1e-6 && mean_err < 1e-6;
    CheckReport::new(
        "fusion_gate_normalization",
        passed,
        format!("coefficient-sum err {worst:.2e}, equal-weight mean err {mean_err:.2e}"),
    )
}

/// Rotated IoU vs the Monte-Carlo oracle plus the axis-aligned closed forms.
pub fn check_iou_oracle(pairs: usize, samples: u32, tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (a, b) = random_box_pair(&mut rng);
        let exact = bev_iou(&a, &b)?;
        let mc = mc_bev_iou(&a, &b, samples, seed.wrapping_add(i as u64));
        worst = worst.max((exact - mc).abs());
        let exact3 = iou3d(&a, &b)?;
        let mc3 = mc_iou3d(&a, &b, samples, seed.wrapping_add(1000 + i as u64));
        worst = worst.max((exact3 - mc3).abs());
    }
    // Axis-aligned closed forms.
    let unit = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)?;
    let shifted = Box3D::new(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)?;
    let closed = (bev_iou(&unit, &shifted)? - 1.0 / 3.0).abs();
    let identical = (bev_iou(&unit, &unit)? - 1.0).abs();
    let passed = worst < tol && closed < 1e-9 && identical < 1e-9;
    Ok(CheckReport::new(
        "rotated_iou_oracle",
        passed,
        format!("MC worst |err| {worst:.2e} over {pairs} pairs, closed-form err {closed:.2e}"),
    ))
}

/// AP@40 vs the brute-force PR reference on random detection sets.
pub fn check_ap_oracle(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let frames = random_eval_frames(&mut rng)?;
        let fast = ap40(&frames, 0.5, IouMode::Bev)?.map(|r| r.ap);
        let slow = brute_force_ap40(&frames, 0.5, IouMode::Bev)?;
        match (fast, slow) {
            (Some(f), Some(s)) => worst = worst.max((f - s).abs()),
            (None, None) => {}
            _ => return Ok(CheckReport::new("ap40_oracle", false, "definedness mismatch")),
        }
    }
    Ok(CheckReport::new(
        "ap40_oracle",
        worst < 1e-9,
        format!("worst |err| {worst:.2e} over {cases} sets"),
    ))
}

/// Random multi-frame detection/GT sets for the AP and NMS checks.
pub fn random_eval_frames(rng: &mut ChaCha8Rng) -> Result<Vec<EvalFrame>> {
    let frames = rng.gen_range(1..4usize);
    (0..frames)
        .map(|_| {
            let n_gt = rng.gen_range(0..6usize);
            let mut gts = Vec::new();
            for i in 0..n_gt {
                gts.push(
                    Box3D::new(
                        i as f64 * 4.0 + rng.gen_range(-0.4..0.4),
                        rng.gen_range(-4.0..4.0),
                        0.0,
                        rng.gen_range(0.4..1.2),
                        rng.gen_range(0.5..1.4),
                        1.7,
                        rng.gen_range(-3.1..3.1),
                    )
                    .expect("valid box"),
                );
            }
            let mut dets = Vec::new();
            for gi in 0..n_gt {
                // Some true-ish positives with varying alignment.
                if rng.gen_bool(0.75) {
                    let g = &gts[gi];
                    dets.push(Detection::new(
                        Box3D::new(
                            g.cx + rng.gen_range(-0.4..0.4),
                            g.cy + rng.gen_range(-0.4..0.4),
                            g.cz,
                            g.w * rng.gen_range(0.8..1.2),
                            g.l * rng.gen_range(0.8..1.2),
                            g.h,
                            g.theta + rng.gen_range(-0.4..0.4),
                        )
                        .expect("valid box"),
                        rng.gen_range(0.05..1.0),
                        0,
                    )?);
                }
            }
            for _ in 0..rng.gen_range(0..5usize) {
                // Background clutter.
                dets.push(Detection::new(
                    Box3D::new(
                        rng.gen_range(-10.0..-2.0),
                        rng.gen_range(-8.0..8.0),
                        0.0,
                        rng.gen_range(0.4..1.2),
                        rng.gen_range(0.5..1.4),
                        1.7,
                        rng.gen_range(-3.1..3.1),
                    )
                    .expect("valid box"),
                    rng.gen_range(0.05..1.0),
                    0,
                )?);
            }
            let ignore = (0..n_gt).map(|_| rng.gen_bool(0.15)).collect();
            Ok(EvalFrame { dets, gts, gt_ignore: ignore })
        })
        .collect()
}

/// Greedy NMS vs the repeated-scan reference.
pub fn check_nms_equivalence(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for _ in 0..cases {
        let n = rng.gen_range(0..40usize);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                Detection::new(
                    Box3D::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        0.0,
                        rng.gen_range(0.4..1.5),
                        rng.gen_range(0.4..1.5),
                        1.7,
                        rng.gen_range(-3.1..3.1),
                    )
                    .expect("valid box"),
                    rng.gen_range(0.0..1.0),
                    0,
                )
                .expect("valid det")
            })
            .collect();
        let thresh = rng.gen_range(0.05..0.7);
        let top_k = rng.gen_range(1..20usize);
        let fast = crate::eval::rotated_nms_indices(&dets, thresh, top_k)?;
        let slow = brute_force_nms(&dets, thresh, top_k)?;
        if fast != slow {
            failures += 1;
        }
    }
    Ok(CheckReport::new(
        "nms_equivalence",
        failures == 0,
        format!("{failures}/{cases} keep-set mismatches"),
    ))
}

/// The full battery behind the `selftest` command. `fast` trims instance
/// counts to keep the command interactive.
pub fn run_selftest(fast: bool, seed: u64) -> Result<Vec<CheckReport>> {
    let (fd_inst, iou_pairs, mc_samples, ap_cases, nms_cases) = if fast {
        (5, 10, 1_000_000, 10, 20)
    } else {
        (50, 100, 1_000_000, 50, 100)
    };
    let mut reports = Vec::new();
    let grads = gradient_suite(fd_inst, seed)?;
    let worst = grads.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let all = grads.iter().all(|g| g.passed);
    reports.push(CheckReport::new(
        "gradient_suite",
        all,
        format!("{} ops, worst rel err {worst:.2e}", grads.len()),
    ));
    reports.push(check_task_aware_relu_identity(1000, seed));
    reports.push(check_gate_normalization(1e-4, seed));
    reports.push(check_iou_oracle(iou_pairs, mc_samples, 2e-3, seed)?);
    reports.push(check_ap_oracle(ap_cases, seed)?);
    reports.push(check_nms_equivalence(nms_cases, seed)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_harness_catches_simple_gradients() {
        let x = Tensor::from_f64(&[3], &[1.0, -0.5, 2.0]).unwrap();
        let err = fd_check_inputs(
            &[x],
            &|tape, l| {
                let sq = tape.mul(l[0], l[0])?;
                tape.sum_all(sq)
            },
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "x^2 gradient err {err}");
    }

    #[test]
    fn quantized_hash_is_stable_and_sensitive() {
        let a = quantized_hash([1.0, 2.0, 3.0], 6);
        let b = quantized_hash([1.0, 2.0, 3.0], 6);
        let c = quantized_hash([1.0, 2.0, 3.0001], 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Sub-precision noise does not change the hash.
        let d = quantized_hash([1.0 + 1e-9, 2.0, 3.0], 6);
        assert_eq!(a, d);
    }

    #[test]
    fn relu_identity_check_fails_on_perturbed_theta() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PaaParams::init(&mut store, &mut rng, "check", 4, 9, PaaConfig::default());
        let pristine = check_task_aware_relu_identity_with(&store, &params, 50, 3);
        assert!(pristine.passed);
        // Perturb the zero-initialized hyper-network output layer.
        let id = store.find("check.theta.b1").unwrap();
        let mut v = store.value(id).clone();
        v.data_mut()[0] = 0.05;
        store.set_value(id, v);
        let tampered = check_task_aware_relu_identity_with(&store, &params, 50, 3);
        assert!(!tampered.passed);
    }

    #[test]
    fn gate_normalization_check_fails_on_huge_eps() {
        assert!(check_gate_normalization(1e-4, 5).passed);
        assert!(!check_gate_normalization(1.0, 5).passed);
    }

    #[test]
    fn nms_equivalence_on_a_few_cases() {
        let r = check_nms_equivalence(25, 7).unwrap();
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn ap_oracle_on_a_few_cases() {
        let r = check_ap_oracle(10, 9).unwrap();
        assert!(r.passed, "{}", r.detail);
    }
}
