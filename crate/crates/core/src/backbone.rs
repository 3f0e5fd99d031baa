//! Pseudo-image backbone: three convolutional blocks at resolutions
//! 1, 1/2, 1/4 and a gated bidirectional fusion of the three levels.
//!
//! Each fusion node blends its resampled inputs with non-negative learnable
//! weights normalized as `relu(w_i) / (sum relu(w) + eps)`, applies swish,
//! and runs a 3x3 convolution. One top-down node feeds level 2 from level 3,
//! then the bottom-up sweep produces the three output maps, which are
//! upsampled to full resolution and concatenated to `3 * width` channels.
//! With the fusion disabled, a plain per-level conv + upsample + concat
//! top-down path stands in.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::kaiming_uniform;
use crate::tensor::{NodeId, Padding, ParamId, ParamStore, Scalar, Tape, TapeBinding, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Gated bidirectional fusion on, or the baseline top-down path.
    pub bifpn: bool,
    /// Common channel width of every level.
    pub width: usize,
    /// How many times the four-gate fusion layer is applied.
    pub repeat: usize,
    /// Convolutions per block; the first conv of blocks 2 and 3 has stride 2.
    pub block_depths: [usize; 3],
    pub batch_norm: bool,
    pub bn_eps: f64,
    /// Running statistics update: `running = m * running + (1 - m) * batch`.
    pub bn_momentum: f64,
    pub gate_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            bifpn: true,
            width: 64,
            repeat: 1,
            block_depths: [2, 2, 2],
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            gate_eps: 1e-4,
        }
    }
}

struct BnParams {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

struct ConvLayer {
    kernel: ParamId,
    bias: Option<ParamId>,
    bn: Option<BnParams>,
    stride: usize,
    relu: bool,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ksize: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        batch_norm: bool,
        relu: bool,
    ) -> Self {
        let fan_in = ksize * ksize * c_in;
        let kernel = store.register(
            format!("{name}.kernel"),
            kaiming_uniform(rng, &[ksize, ksize, c_in, c_out], fan_in),
        );
        let (bias, bn) = if batch_norm {
            let bn = BnParams {
                gamma: store.register(format!("{name}.bn.gamma"), Tensor::full(&[c_out], S::one())),
                beta: store.register(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
                running_mean: store.register_state(format!("{name}.bn.mean"), Tensor::zeros(&[c_out])),
                running_var: store.register_state(format!("{name}.bn.var"), Tensor::full(&[c_out], S::one())),
            };
            (None, Some(bn))
        } else {
            (
                Some(store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))),
                None,
            )
        };
        ConvLayer { kernel, bias, bn, stride, relu }
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &mut ParamStore<S>,
        x: NodeId,
        train: bool,
        cfg: &BackboneConfig,
    ) -> Result<NodeId> {
        let k = bind.node(tape, store, self.kernel);
        let b = self.bias.map(|id| bind.node(tape, store, id));
        let mut y = tape.conv2d(x, k, b, self.stride, Padding::Same)?;
        if let Some(bn) = &self.bn {
            let gamma = bind.node(tape, store, bn.gamma);
            let beta = bind.node(tape, store, bn.beta);
            if train {
                let (out, mean, var) = tape.batch_norm(y, gamma, beta, cfg.bn_eps, None)?;
                y = out;
                let m = S::from_f64(cfg.bn_momentum);
                let one_m = S::one() - m;
                for (id, batch) in [(bn.running_mean, mean), (bn.running_var, var)] {
                    let run = store.get_mut(id);
                    for (r, b) in run.value.data_mut().iter_mut().zip(batch) {
                        *r = m * *r + one_m * b;
                    }
                }
            } else {
                let mean = store.value(bn.running_mean).data().to_vec();
                let var = store.value(bn.running_var).data().to_vec();
                let (out, _, _) = tape.batch_norm(y, gamma, beta, cfg.bn_eps, Some((&mean, &var)))?;
                y = out;
            }
        }
        if self.relu {
            y = tape.relu(y)?;
        }
        Ok(y)
    }
}

/// Normalized weighted blend of same-shape maps, then swish, then a 3x3 conv.
pub struct FuseGate {
    weights: Vec<ParamId>,
    conv: ConvLayer,
    eps: f64,
}

impl FuseGate {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_inputs: usize,
        width: usize,
        eps: f64,
    ) -> Self {
        let weights = (0..n_inputs)
            .map(|i| store.register(format!("{name}.w{i}"), Tensor::scalar(S::one())))
            .collect();
        // The gate conv is exactly conv(swish(blend)): no norm, plain bias.
        let conv = ConvLayer::init(store, rng, &format!("{name}.conv"), 3, width, width, 1, false, false);
        FuseGate { weights, conv, eps }
    }

    /// `sum_i relu(w_i)/(sum relu(w) + eps) * x_i`, the pre-conv gate value.
    fn blend<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &ParamStore<S>,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        if inputs.len() != self.weights.len() {
            return Err(Error::invalid(
                "fuse_gate",
                format!("{} inputs for {} weights", inputs.len(), self.weights.len()),
            ));
        }
        let first_shape = tape.shape(inputs[0]).to_vec();
        for &i in &inputs[1..] {
            if tape.shape(i) != first_shape {
                return Err(Error::shape("fuse_gate", "fused operands must share extents"));
            }
        }
        let mut gates = Vec::with_capacity(inputs.len());
        let mut denom: Option<NodeId> = None;
        for &w in &self.weights {
            let wn = bind.node(tape, store, w);
            let wr = tape.relu(wn)?;
            denom = Some(match denom {
                Some(d) => tape.add(d, wr)?,
                None => wr,
            });
            gates.push(wr);
        }
        let denom = tape.add_scalar(denom.expect("at least one weight"), self.eps)?;
        let mut blend: Option<NodeId> = None;
        for (&x, wr) in inputs.iter().zip(gates) {
            let coeff = tape.div(wr, denom)?;
            let term = tape.mul(x, coeff)?;
            blend = Some(match blend {
                Some(b) => tape.add(b, term)?,
                None => term,
            });
        }
        Ok(blend.expect("at least one input"))
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &mut ParamStore<S>,
        inputs: &[NodeId],
        train: bool,
        cfg: &BackboneConfig,
    ) -> Result<NodeId> {
        let blend = self.blend(tape, bind, store, inputs)?;
        let act = tape.swish(blend)?;
        self.conv.forward(tape, bind, store, act, train, cfg)
    }

    /// The normalized coefficients at the current weight values, computed
    /// through the same tape path the forward uses.
    pub fn coefficients<S: Scalar>(&self, store: &ParamStore<S>) -> Result<Vec<f64>> {
        let mut tape = Tape::<S>::new();
        let mut bind = TapeBinding::new(store, false);
        let ones: Vec<NodeId> = (0..self.weights.len())
            .map(|_| tape.constant(Tensor::scalar(S::one())))
            .collect();
        let blend_of_units = self.blend(&mut tape, &mut bind, store, &ones)?;
        // Recover individual coefficients by probing one input at a time.
        let mut out = Vec::with_capacity(self.weights.len());
        for i in 0..self.weights.len() {
            let probes: Vec<NodeId> = (0..self.weights.len())
                .map(|j| tape.constant(Tensor::scalar(if i == j { S::one() } else { S::zero() })))
                .collect();
            let c = self.blend(&mut tape, &mut bind, store, &probes)?;
            out.push(tape.value(c).data()[0].to_f64());
        }
        let _ = blend_of_units;
        Ok(out)
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weights
    }

    /// Run the real blend path on scalar inputs (shape `[1,1,1]` each); used
    /// by the normalization self-check.
    pub fn blend_scalars<S: Scalar>(&self, store: &ParamStore<S>, xs: &[f64]) -> Result<f64> {
        let mut tape = Tape::<S>::new();
        let mut bind = TapeBinding::new(store, false);
        let nodes: Vec<NodeId> = xs
            .iter()
            .map(|&x| tape.constant(Tensor::full(&[1, 1, 1], S::from_f64(x))))
            .collect();
        let b = self.blend(&mut tape, &mut bind, store, &nodes)?;
        Ok(tape.value(b).data()[0].to_f64())
    }
}

struct FusionLayer {
    up2: FuseGate,
    out1: FuseGate,
    out2: FuseGate,
    out3: FuseGate,
}

/// The full backbone over a scattered pseudo-image.
pub struct Backbone {
    pub cfg: BackboneConfig,
    blocks: Vec<Vec<ConvLayer>>,
    laterals: Vec<ConvLayer>,
    fusions: Vec<FusionLayer>,
    baseline_convs: Vec<ConvLayer>,
}

impl Backbone {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        cfg: BackboneConfig,
    ) -> Self {
        let w = cfg.width;
        let mut blocks = Vec::with_capacity(3);
        for (bi, &depth) in cfg.block_depths.iter().enumerate() {
            assert!(depth >= 1, "block depth must be >= 1");
            let mut layers = Vec::with_capacity(depth);
            for li in 0..depth {
                let c_in = if bi == 0 && li == 0 { in_channels } else { w };
                let stride = if bi > 0 && li == 0 { 2 } else { 1 };
                layers.push(ConvLayer::init(
                    store, rng,
                    &format!("backbone.b{}.conv{li}", bi + 1),
                    3, c_in, w, stride, cfg.batch_norm, true,
                ));
            }
            blocks.push(layers);
        }
        let laterals = (0..3)
            .map(|i| ConvLayer::init(store, rng, &format!("backbone.lateral{}", i + 1), 1, w, w, 1, false, false))
            .collect();
        let mut fusions = Vec::new();
        let mut baseline_convs = Vec::new();
        if cfg.bifpn {
            for rep in 0..cfg.repeat.max(1) {
                let p = format!("backbone.fuse{rep}");
                fusions.push(FusionLayer {
                    up2: FuseGate::init(store, rng, &format!("{p}.up2"), 2, w, cfg.gate_eps),
                    out1: FuseGate::init(store, rng, &format!("{p}.out1"), 2, w, cfg.gate_eps),
                    out2: FuseGate::init(store, rng, &format!("{p}.out2"), 3, w, cfg.gate_eps),
                    out3: FuseGate::init(store, rng, &format!("{p}.out3"), 2, w, cfg.gate_eps),
                });
            }
        } else {
            baseline_convs = (0..3)
                .map(|i| {
                    ConvLayer::init(
                        store, rng,
                        &format!("backbone.baseline{}", i + 1),
                        3, w, w, 1, cfg.batch_norm, true,
                    )
                })
                .collect();
        }
        Backbone { cfg, blocks, laterals, fusions, baseline_convs }
    }

    /// Channels of the fused output map.
    pub fn out_channels(&self) -> usize {
        3 * self.cfg.width
    }

    /// Every gate weight parameter, for gradient-coverage checks.
    pub fn gate_weight_ids(&self) -> Vec<ParamId> {
        self.fusions
            .iter()
            .flat_map(|f| {
                [&f.up2, &f.out1, &f.out2, &f.out3]
                    .into_iter()
                    .flat_map(|g| g.weight_ids().iter().copied())
            })
            .collect()
    }

    pub fn gates(&self) -> Vec<&FuseGate> {
        self.fusions
            .iter()
            .flat_map(|f| [&f.up2, &f.out1, &f.out2, &f.out3])
            .collect()
    }

    /// The three lateral-projected level maps at resolutions 1, 1/2, 1/4.
    pub fn extract_levels<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &mut ParamStore<S>,
        img: NodeId,
        train: bool,
    ) -> Result<[NodeId; 3]> {
        let shape = tape.shape(img).to_vec();
        if shape[0] % 4 != 0 || shape[1] % 4 != 0 {
            return Err(Error::invalid(
                "extract_levels",
                format!("spatial extents {}x{} not divisible by 4", shape[0], shape[1]),
            ));
        }
        let mut x = img;
        let mut raw = Vec::with_capacity(3);
        for block in &self.blocks {
            for layer in block {
                x = layer.forward(tape, bind, store, x, train, &self.cfg)?;
            }
            raw.push(x);
        }
        let mut out = [raw[0]; 3];
        for (i, (&r, lat)) in raw.iter().zip(&self.laterals).enumerate() {
            out[i] = lat.forward(tape, bind, store, r, train, &self.cfg)?;
        }
        Ok(out)
    }

    /// Full backbone: levels, fusion (or baseline), multi-scale concat.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &mut TapeBinding,
        store: &mut ParamStore<S>,
        img: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let [mut f1, mut f2, mut f3] = self.extract_levels(tape, bind, store, img, train)?;
        if self.cfg.bifpn {
            for layer in &self.fusions {
                let up3 = tape.upsample2x(f3)?;
                let f_up2 = layer.up2.forward(tape, bind, store, &[f2, up3], train, &self.cfg)?;
                let up2 = tape.upsample2x(f_up2)?;
                let f_out1 = layer.out1.forward(tape, bind, store, &[f1, up2], train, &self.cfg)?;
                let down1 = tape.maxpool2x2(f_out1)?;
                let f_out2 = layer
                    .out2
                    .forward(tape, bind, store, &[f2, f_up2, down1], train, &self.cfg)?;
                let down2 = tape.maxpool2x2(f_out2)?;
                let f_out3 = layer.out3.forward(tape, bind, store, &[f3, down2], train, &self.cfg)?;
                (f1, f2, f3) = (f_out1, f_out2, f_out3);
            }
        } else {
            f1 = self.baseline_convs[0].forward(tape, bind, store, f1, train, &self.cfg)?;
            f2 = self.baseline_convs[1].forward(tape, bind, store, f2, train, &self.cfg)?;
            f3 = self.baseline_convs[2].forward(tape, bind, store, f3, train, &self.cfg)?;
        }
        let f2_full = tape.upsample2x(f2)?;
        let f3_half = tape.upsample2x(f3)?;
        let f3_full = tape.upsample2x(f3_half)?;
        tape.concat(&[f1, f2_full, f3_full], 2)
    }
}
