//! Trainable parameter storage, AdamW, and the one-cycle learning-rate
//! schedule.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One named parameter with its gradient and AdamW moment state.
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    /// Non-trainable entries (batch-norm running statistics) are carried in
    /// checkpoints but skipped by the optimizer.
    pub trainable: bool,
}

/// Registration-ordered parameter set for one network.
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    /// AdamW step counter (shared across all parameters).
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.register_with(name, value, true)
    }

    pub fn register_state(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.register_with(name, value, false)
    }

    fn register_with(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) {
        debug_assert_eq!(value.shape(), self.params[id.0].value.shape());
        self.params[id.0].value = value;
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<S>) {
        debug_assert_eq!(grad.shape(), self.params[id.0].value.shape());
        self.params[id.0].grad = grad;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = S::zero();
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-forward cache binding store parameters to tape leaves.
///
/// Each parameter enters a tape at most once per forward pass; after
/// `backward`, [`TapeBinding::write_grads`] copies the accumulated gradients
/// back into the store (zeros for parameters the loss never reached).
pub struct TapeBinding {
    nodes: Vec<Option<super::tape::NodeId>>,
    train: bool,
}

impl TapeBinding {
    /// `train = false` marks every bound parameter as constant, skipping all
    /// gradient bookkeeping during inference.
    pub fn new<S: Scalar>(store: &ParamStore<S>, train: bool) -> Self {
        TapeBinding {
            nodes: vec![None; store.len()],
            train,
        }
    }

    pub fn node<S: Scalar>(
        &mut self,
        tape: &mut super::tape::Tape<S>,
        store: &ParamStore<S>,
        id: ParamId,
    ) -> super::tape::NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let p = store.get(id);
        let n = tape.leaf(p.value.clone(), self.train && p.trainable);
        self.nodes[id.0] = Some(n);
        n
    }

    /// Copy gradients from the tape into the store for every bound trainable
    /// parameter; unbound or unreached parameters get zeros.
    pub fn write_grads<S: Scalar>(&self, tape: &super::tape::Tape<S>, store: &mut ParamStore<S>) {
        for (i, slot) in self.nodes.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            let shape = p.value.shape().to_vec();
            p.grad = match slot.and_then(|n| tape.grad(n)) {
                Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches"),
                None => Tensor::zeros(&shape),
            };
        }
    }

    /// Accumulate tape gradients into the store (`+=`), for gradient
    /// averaging across a batch of tapes.
    pub fn add_grads<S: Scalar>(&self, tape: &super::tape::Tape<S>, store: &mut ParamStore<S>) {
        for (i, slot) in self.nodes.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            if let Some(g) = slot.and_then(|n| tape.grad(n)) {
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update over every trainable parameter.
///
/// Weight decay is decoupled: `p -= lr * wd * p` is applied independently of
/// the bias-corrected moment update.
pub fn adamw_step<S: Scalar>(store: &mut ParamStore<S>, lr: f64, cfg: &AdamwConfig) -> Result<()> {
    store.step += 1;
    let t = store.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let eps = S::from_f64(cfg.eps);
    let lr_s = S::from_f64(lr);
    let wd = S::from_f64(cfg.weight_decay);
    let c1 = S::one() - S::from_f64(cfg.beta1.powi(t));
    let c2 = S::one() - S::from_f64(cfg.beta2.powi(t));
    for p in &mut store.params {
        if !p.trainable {
            continue;
        }
        if !p.grad.all_finite() {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        let g = p.grad.data();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        let val = p.value.data_mut();
        for i in 0..g.len() {
            val[i] = val[i] - lr_s * wd * val[i];
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            val[i] = val[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One-cycle learning-rate schedule: a cosine rise from `max_lr / div_factor`
/// to `max_lr` over the warmup span, then a cosine fall to
/// `max_lr / final_div_factor`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl LrSchedule {
    pub fn one_cycle(max_lr: f64, total_steps: u64) -> Self {
        LrSchedule {
            max_lr,
            total_steps,
            warmup_frac: 0.4,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    /// Learning rate at step `t ∈ [0, total_steps]`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::invalid(
                "one_cycle_lr",
                format!("step {t} beyond total {}", self.total_steps),
            ));
        }
        let warmup_steps = (self.total_steps as f64 * self.warmup_frac).round().max(1.0);
        let initial = self.max_lr / self.div_factor;
        let floor = self.max_lr / self.final_div_factor;
        let t = t as f64;
        let lr = if t <= warmup_steps {
            let phase = t / warmup_steps;
            initial + (self.max_lr - initial) * 0.5 * (1.0 - (std::f64::consts::PI * phase).cos())
        } else {
            let span = (self.total_steps as f64 - warmup_steps).max(1.0);
            let phase = (t - warmup_steps) / span;
            floor + (self.max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        };
        debug_assert!(lr > 0.0);
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::scalar(value));
        s.set_grad(id, Tensor::scalar(grad));
        (s, id)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_keeps_value() {
        let (mut s, id) = store_with(2.0, 0.0);
        let cfg = AdamwConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, 0.1, &cfg).unwrap();
        assert_eq!(s.value(id).data()[0], 2.0);
        assert_eq!(s.get(id).m.data()[0], 0.0);
    }

    #[test]
    fn adamw_decoupled_decay_scales() {
        let (mut s, id) = store_with(1.0, 0.0);
        let cfg = AdamwConfig { weight_decay: 0.1, ..Default::default() };
        adamw_step(&mut s, 0.1, &cfg).unwrap();
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_about_lr() {
        // Bias-corrected first step: m_hat = g, v_hat = g^2, delta ~= lr.
        let (mut s, id) = store_with(1.0, 0.37);
        let cfg = AdamwConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, 0.01, &cfg).unwrap();
        let expected = 1.0 - 0.01 * 0.37 / (0.37 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn adamw_rejects_nonfinite_grad() {
        let (mut s, _) = store_with(1.0, f64::NAN);
        assert!(adamw_step(&mut s, 0.01, &AdamwConfig::default()).is_err());
    }

    #[test]
    fn one_cycle_endpoints_and_peak() {
        let sched = LrSchedule::one_cycle(0.003, 1000);
        assert!((sched.lr_at(0).unwrap() - 0.003 / 25.0).abs() < 1e-15);
        assert!((sched.lr_at(400).unwrap() - 0.003).abs() < 1e-15);
        assert!((sched.lr_at(1000).unwrap() - 0.003 / 1e4).abs() < 1e-15);
        assert!(sched.lr_at(1001).is_err());
    }

    #[test]
    fn one_cycle_monotone_and_single_peak() {
        let sched = LrSchedule::one_cycle(0.003, 1000);
        let lrs: Vec<f64> = (0..=1000).map(|t| sched.lr_at(t).unwrap()).collect();
        for t in 0..400 {
            assert!(lrs[t + 1] > lrs[t], "rising phase at {t}");
        }
        for t in 400..1000 {
            assert!(lrs[t + 1] < lrs[t], "falling phase at {t}");
        }
        let peaks = lrs.iter().filter(|&&l| l == 0.003).count();
        assert_eq!(peaks, 1);
        assert!(lrs.iter().all(|&l| l > 0.0));
    }
}
