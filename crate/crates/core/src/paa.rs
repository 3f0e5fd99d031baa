//! Pillar attention encoder: multi-point-channel pooling, point- and
//! channel-wise attention, task-aware channel activation, and the stackable
//! composition that lifts 9-channel decorated pillars to 64-wide features.
//!
//! The attention score for a branch is `sigma(MLP(F_mean) + MLP(F_max))`
//! with one shared two-layer MLP per branch; the point and channel scores
//! multiply into a mask applied to the raw pillar grid. Task-aware
//! activation computes per-channel affine pairs from pooled features through
//! a zero-initialized hyper-network, so the block is exactly ReLU at
//! initialization.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init::kaiming_uniform;
use crate::tensor::{NodeId, ParamId, ParamStore, Scalar, Tape, TapeBinding, Tensor};

/// Where the MLP activation sits in the attention branches.
///
/// `Between` is the squeeze-excite convention (activation between the two
/// layers). `Pre` applies it to the pooled features before both layers,
/// which collapses the MLP into a single linear map; it is kept selectable
/// because the two readings differ in the source formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaPosition {
    Between,
    Pre,
}

/// Sub-module toggles and shared hyperparameters for one attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaaConfig {
    pub point_attention: bool,
    pub channel_attention: bool,
    pub task_aware: bool,
    pub pool_mean: bool,
    pub pool_max: bool,
    pub reduction: usize,
    pub delta_position: DeltaPosition,
}

impl Default for PaaConfig {
    fn default() -> Self {
        PaaConfig {
            point_attention: true,
            channel_attention: true,
            task_aware: true,
            pool_mean: true,
            pool_max: true,
            reduction: 4,
            delta_position: DeltaPosition::Between,
        }
    }
}

impl PaaConfig {
    pub fn all_off() -> Self {
        PaaConfig {
            point_attention: false,
            channel_attention: false,
            task_aware: false,
            ..Default::default()
        }
    }
}

/// Residual scales applied around the base `[1, 0, 0, 0]` of the task-aware
/// hyper-network output.
const ALPHA_RESIDUAL_SCALE: f64 = 1.0;
const BETA_RESIDUAL_SCALE: f64 = 0.5;

fn hidden(dim: usize, reduction: usize) -> usize {
    (dim / reduction.max(1)).max(1)
}

/// Parameters of one attention block over pillars of `N` points and `C`
/// channels.
pub struct PaaParams {
    pub cfg: PaaConfig,
    pub n: usize,
    pub c: usize,
    ch_w0: ParamId,
    ch_w1: ParamId,
    pt_w0: ParamId,
    pt_w1: ParamId,
    th_w0: ParamId,
    th_b0: ParamId,
    th_w1: ParamId,
    th_b1: ParamId,
}

impl PaaParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n: usize,
        c: usize,
        cfg: PaaConfig,
    ) -> Self {
        let ch = hidden(c, cfg.reduction);
        let nh = hidden(n, cfg.reduction);
        let reg = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: String, shape: &[usize], fan_in: usize| {
            store.register(name, kaiming_uniform(rng, shape, fan_in))
        };
        PaaParams {
            cfg,
            n,
            c,
            ch_w0: reg(store, rng, format!("{prefix}.channel.w0"), &[c, ch], c),
            ch_w1: reg(store, rng, format!("{prefix}.channel.w1"), &[ch, c], ch),
            pt_w0: reg(store, rng, format!("{prefix}.point.w0"), &[n, nh], n),
            pt_w1: reg(store, rng, format!("{prefix}.point.w1"), &[nh, n], nh),
            th_w0: reg(store, rng, format!("{prefix}.theta.w0"), &[c, ch], c),
            th_b0: store.register(format!("{prefix}.theta.b0"), Tensor::zeros(&[ch])),
            // Zero weights and bias: theta == [1, 0, 0, 0] at initialization.
            th_w1: store.register(format!("{prefix}.theta.w1"), Tensor::zeros(&[ch, 4 * c])),
            th_b1: store.register(format!("{prefix}.theta.b1"), Tensor::zeros(&[4 * c])),
        }
    }
}

/// The four pooled context maps of a pillar grid `[P, N, C]`:
/// channel contexts `(mean, max)` of shape `[P, 1, C]` and point contexts
/// `(mean, max)` of shape `[P, N, 1]`.
pub struct PooledContexts {
    pub channel_mean: NodeId,
    pub channel_max: NodeId,
    pub point_mean: NodeId,
    pub point_max: NodeId,
}

/// Reciprocal point counts as a `[P, 1, 1]` constant (0 for empty pillars),
/// making mean pools count-aware rather than padding-aware.
fn recip_counts<S: Scalar>(tape: &mut Tape<S>, counts: &[u32]) -> NodeId {
    let data: Vec<S> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                S::zero()
            } else {
                S::one() / S::from_f64(c as f64)
            }
        })
        .collect();
    tape.constant(Tensor::new(vec![counts.len(), 1, 1], data).expect("counts shape"))
}

/// Count-aware mean over the point axis: `sum / count` per pillar.
pub fn masked_point_mean<S: Scalar>(tape: &mut Tape<S>, g: NodeId, counts: &[u32]) -> Result<NodeId> {
    let sum = tape.reduce_sum(g, 1)?;
    let recip = recip_counts(tape, counts);
    tape.mul(sum, recip)
}

/// Max and average pooling along both the point and the channel dimension.
///
/// Padded rows are excluded from the point-axis pools through `counts`; the
/// channel-axis pools act on whole rows (padded rows are zero and stay zero).
pub fn multi_pool<S: Scalar>(tape: &mut Tape<S>, g: NodeId, counts: &[u32]) -> Result<PooledContexts> {
    Ok(PooledContexts {
        channel_mean: masked_point_mean(tape, g, counts)?,
        channel_max: tape.row_max_masked(g, counts)?,
        point_mean: tape.reduce_mean(g, 2)?,
        point_max: tape.reduce_max(g, 2)?,
    })
}

fn branch_mlp<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    x: NodeId,
    w0: ParamId,
    w1: ParamId,
    delta: DeltaPosition,
) -> Result<NodeId> {
    let w0 = bind.node(tape, store, w0);
    let w1 = bind.node(tape, store, w1);
    match delta {
        DeltaPosition::Between => {
            let h = tape.linear(x, w0, None)?;
            let h = tape.relu(h)?;
            tape.linear(h, w1, None)
        }
        DeltaPosition::Pre => {
            let a = tape.relu(x)?;
            let h = tape.linear(a, w0, None)?;
            tape.linear(h, w1, None)
        }
    }
}

/// `sigma(MLP(F_mean) + MLP(F_max))` with the branch's shared MLP; pooled
/// inputs that are toggled off drop out of the sum. Returns `None` when both
/// pools are disabled.
fn attention_scores<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    mean: NodeId,
    max: NodeId,
    w0: ParamId,
    w1: ParamId,
    cfg: &PaaConfig,
) -> Result<Option<NodeId>> {
    let mut pre: Option<NodeId> = None;
    if cfg.pool_mean {
        pre = Some(branch_mlp(tape, bind, store, mean, w0, w1, cfg.delta_position)?);
    }
    if cfg.pool_max {
        let m = branch_mlp(tape, bind, store, max, w0, w1, cfg.delta_position)?;
        pre = Some(match pre {
            Some(p) => tape.add(p, m)?,
            None => m,
        });
    }
    pre.map(|p| tape.sigmoid(p)).transpose()
}

/// Channel-attention scores `[P, 1, C]` for a pooled context pair.
pub fn channel_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    params: &PaaParams,
    pools: &PooledContexts,
) -> Result<Option<NodeId>> {
    attention_scores(
        tape, bind, store,
        pools.channel_mean, pools.channel_max,
        params.ch_w0, params.ch_w1, &params.cfg,
    )
}

/// Point-attention scores `[P, N, 1]`; the MLP runs over the point axis.
pub fn point_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    params: &PaaParams,
    pools: &PooledContexts,
) -> Result<Option<NodeId>> {
    let p = tape.shape(pools.point_mean)[0];
    let n = params.n;
    // [P, N, 1] and [P, 1, N] share a layout; reshape swaps the MLP axis in.
    let mean = tape.reshape(pools.point_mean, &[p, 1, n])?;
    let max = tape.reshape(pools.point_max, &[p, 1, n])?;
    let scores = attention_scores(tape, bind, store, mean, max, params.pt_w0, params.pt_w1, &params.cfg)?;
    scores.map(|s| tape.reshape(s, &[p, n, 1])).transpose()
}

/// Weight the pillar grid by the combined attention mask
/// `M = A_p x A_c` (each factor optional).
pub fn combine_attention<S: Scalar>(
    tape: &mut Tape<S>,
    g: NodeId,
    point: Option<NodeId>,
    channel: Option<NodeId>,
) -> Result<NodeId> {
    let mask = match (point, channel) {
        (Some(p), Some(c)) => Some(tape.mul(p, c)?),
        (Some(p), None) => Some(p),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    };
    match mask {
        Some(m) => tape.mul(m, g),
        None => Ok(g),
    }
}

/// Per-channel affine pair application: `max(a1*F + b1, a2*F + b2)` with
/// coefficient maps of shape `[P, 1, C]` broadcast over points.
pub fn apply_task_activation<S: Scalar>(
    tape: &mut Tape<S>,
    f: NodeId,
    alpha1: NodeId,
    beta1: NodeId,
    alpha2: NodeId,
    beta2: NodeId,
) -> Result<NodeId> {
    let s1 = tape.mul(alpha1, f)?;
    let b1 = tape.add(s1, beta1)?;
    let s2 = tape.mul(alpha2, f)?;
    let b2 = tape.add(s2, beta2)?;
    tape.maximum(b1, b2)
}

/// Task-aware channel activation (exactly ReLU at initialization).
///
/// The hyper-network pools the pillar over its points, runs two FC layers,
/// squashes the result into `(-1, 1)` with the shifted sigmoid, and adds the
/// scaled residual to the base coefficients `[1, 0, 0, 0]`.
pub fn task_aware<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    params: &PaaParams,
    f: NodeId,
    counts: &[u32],
) -> Result<NodeId> {
    let c = params.c;
    let pooled = masked_point_mean(tape, f, counts)?;
    let w0 = bind.node(tape, store, params.th_w0);
    let b0 = bind.node(tape, store, params.th_b0);
    let w1 = bind.node(tape, store, params.th_w1);
    let b1 = bind.node(tape, store, params.th_b1);
    let h = tape.linear(pooled, w0, Some(b0))?;
    let h = tape.relu(h)?;
    let raw = tape.linear(h, w1, Some(b1))?;
    let res = tape.shifted_sigmoid(raw)?;

    let r1 = tape.slice_axis(res, 2, 0, c)?;
    let r2 = tape.slice_axis(res, 2, c, c)?;
    let r3 = tape.slice_axis(res, 2, 2 * c, c)?;
    let r4 = tape.slice_axis(res, 2, 3 * c, c)?;
    let a1 = tape.scale(r1, ALPHA_RESIDUAL_SCALE)?;
    let alpha1 = tape.add_scalar(a1, 1.0)?;
    let beta1 = tape.scale(r2, BETA_RESIDUAL_SCALE)?;
    let alpha2 = tape.scale(r3, ALPHA_RESIDUAL_SCALE)?;
    let beta2 = tape.scale(r4, BETA_RESIDUAL_SCALE)?;
    apply_task_activation(tape, f, alpha1, beta1, alpha2, beta2)
}

/// One full attention block: pooling, point/channel attention, mask
/// combination, task-aware activation. Disabled sub-modules are identity.
pub fn paa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &mut TapeBinding,
    store: &ParamStore<S>,
    params: &PaaParams,
    g: NodeId,
    counts: &[u32],
) -> Result<NodeId> {
    let cfg = &params.cfg;
    let needs_pools = cfg.point_attention || cfg.channel_attention;
    let weighted = if needs_pools {
        let pools = multi_pool(tape, g, counts)?;
        let a_p = if cfg.point_attention {
            point_attention(tape, bind, store, params, &pools)?
        } else {
            None
        };
        let a_c = if cfg.channel_attention {
            channel_attention(tape, bind, store, params, &pools)?
        } else {
            None
        };
        combine_attention(tape, g, a_p, a_c)?
    } else {
        g
    };
    if cfg.task_aware {
        task_aware(tape, bind, store, params, weighted, counts)
    } else {
        Ok(weighted)
    }
}

/// The stacked encoder: each block's output is concatenated onto its input,
/// except the last, which is residual-added; a fully-connected expansion then
/// lifts the channels to [`PaaStack::OUT_CHANNELS`] and a count-aware max
/// over points collapses each pillar to one feature row.
pub struct PaaStack {
    pub blocks: Vec<PaaParams>,
    fc_w: ParamId,
    fc_b: ParamId,
    pub in_channels: usize,
}

impl PaaStack {
    pub const OUT_CHANNELS: usize = 64;

    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        n: usize,
        in_channels: usize,
        depth: usize,
        cfg: PaaConfig,
    ) -> Self {
        assert!(depth >= 1, "stack depth must be >= 1");
        let mut blocks = Vec::with_capacity(depth);
        let mut c = in_channels;
        for i in 0..depth {
            blocks.push(PaaParams::init(store, rng, &format!("paa{}", i + 1), n, c, cfg));
            if i + 1 < depth {
                c *= 2;
            }
        }
        let fc_w = store.register("paa.fc.w", kaiming_uniform(rng, &[c, Self::OUT_CHANNELS], c));
        let fc_b = store.register("paa.fc.b", Tensor::zeros(&[Self::OUT_CHANNELS]));
        PaaStack {
            blocks,
            fc_w,
            fc_b,
            in_channels,
        }
    }

    /// `[P, N, C_in]` pillars to `[P, 64]` features.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &ParamStore<S>,
        g: NodeId,
        counts: &[u32],
    ) -> Result<NodeId> {
        let mut x = g;
        let mut res = g;
        for (i, block) in self.blocks.iter().enumerate() {
            let y = paa_forward(tape, bind, store, block, x, counts)?;
            if i + 1 < self.blocks.len() {
                x = tape.concat(&[x, y], 2)?;
            } else {
                res = tape.add(x, y)?;
            }
        }
        let w = bind.node(tape, store, self.fc_w);
        let b = bind.node(tape, store, self.fc_b);
        let lifted = tape.linear(res, w, Some(b))?;
        let pooled = tape.row_max_masked(lifted, counts)?;
        let p = tape.shape(pooled)[0];
        tape.reshape(pooled, &[p, Self::OUT_CHANNELS])
    }
}
