//! Toy training loop: AdamW with the one-cycle schedule over a fixed set of
//! synthetic scenes, single-threaded over steps, deterministic under seed.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::scene::{augment_scene, AugmentConfig, SyntheticScene};
use crate::tensor::{adamw_step, AdamwConfig, LrSchedule, Scalar};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step (gradients averaged), 1..=4.
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub adamw: AdamwConfig,
    /// Global augmentation applied per step; `None` trains on raw scenes.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 1,
            max_lr: 0.003,
            warmup_frac: 0.4,
            div_factor: 25.0,
            final_div_factor: 1e4,
            adamw: AdamwConfig::default(),
            augment: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_cls: f64,
    pub mean_reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// Final-epoch mean loss over first-epoch mean loss.
    pub final_over_first: f64,
    pub steps: u64,
}

/// Train in place; scenes are visited in order, gradients averaged per batch.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    scenes: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::invalid("train", "at least one scene required"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > 4 {
        return Err(Error::invalid("train", "batch_size must be in 1..=4"));
    }
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let sched = LrSchedule {
        max_lr: cfg.max_lr,
        total_steps: total_steps.max(1),
        warmup_frac: cfg.warmup_frac,
        div_factor: cfg.div_factor,
        final_div_factor: cfg.final_div_factor,
    };
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut sum_total, mut sum_cls, mut sum_reg) = (0.0, 0.0, 0.0);
        let mut lr_now = 0.0;
        for batch in scenes.chunks(cfg.batch_size) {
            lr_now = sched.lr_at(step)?;
            net.store.zero_grads();
            for (bi, scene) in batch.iter().enumerate() {
                let aug_seed = cfg
                    .seed
                    .wrapping_add(step.wrapping_mul(0x9e37))
                    .wrapping_add(bi as u64);
                let (cloud, gts) = match &cfg.augment {
                    Some(a) => augment_scene(&scene.cloud, &scene.gts, a, aug_seed)?,
                    None => (scene.cloud.clone(), scene.gts.clone()),
                };
                let pillars = net.prepare(&cloud, cfg.seed.wrapping_add(step))?;
                let (mut pass, loss, breakdown) = net
                    .loss_forward(&pillars, &gts, true)
                    .map_err(|e| step_error(e, step))?;
                if !breakdown.total.is_finite() {
                    return Err(Error::invalid(
                        "train",
                        format!("non-finite loss at step {step}"),
                    ));
                }
                pass.tape.backward(loss).map_err(|e| step_error(e, step))?;
                pass.bind.add_grads(&pass.tape, &mut net.store);
                sum_total += breakdown.total;
                sum_cls += breakdown.cls_loss;
                sum_reg += breakdown.reg_loss;
            }
            if batch.len() > 1 {
                let inv = S::from_f64(1.0 / batch.len() as f64);
                for p in net.store.iter_mut() {
                    for g in p.grad.data_mut() {
                        *g *= inv;
                    }
                }
            }
            adamw_step(&mut net.store, lr_now, &cfg.adamw).map_err(|e| step_error(e, step))?;
            step += 1;
        }
        let n = scenes.len() as f64;
        stats.push(EpochStats {
            epoch,
            mean_total: sum_total / n,
            mean_cls: sum_cls / n,
            mean_reg: sum_reg / n,
            lr: lr_now,
        });
    }
    let final_over_first = if stats.len() >= 2 {
        let first = stats.first().expect("non-empty").mean_total;
        let last = stats.last().expect("non-empty").mean_total;
        if first > 0.0 {
            last / first
        } else {
            0.0
        }
    } else {
        1.0
    };
    Ok(TrainOutcome {
        epochs: stats,
        final_over_first,
        steps: step,
    })
}

fn step_error(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => {
            Error::invalid("train", format!("non-finite value in {op} at step {step}"))
        }
        other => other,
    }
}
