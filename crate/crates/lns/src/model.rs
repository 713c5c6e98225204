//! Model specification and assembly: a stack of (optionally quantized)
//! convolutions with batch norm and activations, closed by one
//! full-precision linear classifier.
//!
//! Quantized layers follow the usual 1-bit convention: the first convolution
//! and the final classifier stay full-precision. During training a quantized
//! layer binarizes its input activations and its weights with
//! sign/straight-through; in the fine-tune phase the binary weights come from
//! a per-layer mapping net instead of a plain sign. The dense training
//! forward pads binarized activations with -1 so it agrees bit-exactly with
//! the packed inference kernel.

use crate::binarize::{self, ScaleMode};
use crate::error::{LnsError, Result};
use crate::mapping::{MappingNet, BN_EPS};
use crate::noisy_loss::{NoiseRates, Reduction};
use crate::optim::Param;
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;
use rand::Rng;

/// EMA decay for batch-norm running statistics.
pub const BN_DECAY: f32 = 0.9;

/// Which of the two pipeline phases produced a model state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain sign/STE binary training (also used for simple fine-tuning).
    Baseline,
    /// Fine-tuning with mapping nets under the corrected loss.
    Lns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    HardTanh,
    PRelu,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub quantized: bool,
    pub batch_norm: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// Desk-scale 4-layer net: one full-precision stem, two quantized
    /// stride-2 convolutions, full-precision classifier. Layers feeding a
    /// binarized input skip the activation so sign information survives.
    pub fn cnn4(classes: usize) -> Self {
        ModelSpec {
            name: "cnn4".into(),
            convs: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    quantized: false,
                    batch_norm: true,
                    activation: Activation::None,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    quantized: true,
                    batch_norm: true,
                    activation: Activation::None,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    quantized: true,
                    batch_norm: true,
                    activation: Activation::Relu,
                },
            ],
            classes,
        }
    }

    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "cnn4" => Ok(ModelSpec::cnn4(classes)),
            other => Err(LnsError::InvalidArgument {
                op: "model_spec",
                msg: format!("unknown model spec `{other}`"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(LnsError::InvalidArgument {
                op: "model_spec",
                msg: "need at least one convolution".into(),
            });
        }
        if self.convs[0].quantized {
            return Err(LnsError::InvalidArgument {
                op: "model_spec",
                msg: "first convolution must stay full-precision".into(),
            });
        }
        if self.classes < 2 {
            return Err(LnsError::InvalidArgument {
                op: "model_spec",
                msg: "classifier needs at least 2 classes".into(),
            });
        }
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                return Err(LnsError::InvalidArgument {
                    op: "model_spec",
                    msg: format!("conv{i} has a zero extent"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bn: Option<BnParams>,
    pub prelu: Option<Param>,
    /// Present only in the fine-tune phase, one net per quantized layer.
    pub mapping: Option<MappingNet>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    /// (channels, height, width) of one input image.
    pub input_dims: (usize, usize, usize),
    pub convs: Vec<ConvLayer>,
    pub linear_w: Param,
    pub linear_b: Param,
}

fn uniform(dims: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(dims, data).expect("valid dims")
}

impl Model {
    pub fn init(spec: &ModelSpec, input_dims: (usize, usize, usize), rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (mut c, mut h, mut w) = input_dims;
        let mut convs = Vec::new();
        for cs in &spec.convs {
            let fan_in = c * cs.kernel * cs.kernel;
            let weight = uniform(
                &[cs.out_channels, c, cs.kernel, cs.kernel],
                1.0 / (fan_in as f32).sqrt(),
                rng,
            );
            let bn = cs.batch_norm.then(|| BnParams::new(cs.out_channels));
            let prelu = (cs.activation == Activation::PRelu)
                .then(|| Param::new(Tensor::filled(&[cs.out_channels], 0.25)));
            convs.push(ConvLayer { spec: cs.clone(), weight: Param::new(weight), bn, prelu, mapping: None });
            h = crate::ops::conv_out_extent(h, cs.kernel, cs.stride, cs.padding)?;
            w = crate::ops::conv_out_extent(w, cs.kernel, cs.stride, cs.padding)?;
            c = cs.out_channels;
        }
        let flat = c * h * w;
        let linear_w = uniform(&[spec.classes, flat], 1.0 / (flat as f32).sqrt(), rng);
        Ok(Model {
            spec: spec.clone(),
            input_dims,
            convs,
            linear_w: Param::new(linear_w),
            linear_b: Param::new(Tensor::zeros(&[spec.classes])),
        })
    }

    /// Attach one fresh mapping net per quantized layer (fine-tune phase).
    pub fn attach_mapping_nets(&mut self, rng: &mut impl Rng) {
        let mut in_c = self.input_dims.0;
        for layer in self.convs.iter_mut() {
            if layer.spec.quantized && layer.mapping.is_none() {
                layer.mapping = Some(MappingNet::init(in_c, rng));
            }
            in_c = layer.spec.out_channels;
        }
    }

    pub fn has_mapping_nets(&self) -> bool {
        self.convs.iter().any(|l| l.mapping.is_some())
    }

    /// Spatial dims entering each conv layer (and the flattened classifier width).
    pub fn layer_input_dims(&self) -> (Vec<(usize, usize, usize)>, usize) {
        let (mut c, mut h, mut w) = self.input_dims;
        let mut dims = Vec::new();
        for cs in &self.spec.convs {
            dims.push((c, h, w));
            h = (h + 2 * cs.padding - cs.kernel) / cs.stride + 1;
            w = (w + 2 * cs.padding - cs.kernel) / cs.stride + 1;
            c = cs.out_channels;
        }
        (dims, c * h * w)
    }

    /// The binary weights each quantized layer would deploy right now:
    /// sign(f_theta(W)) when a mapping net is attached, else sign(W).
    pub fn binary_weights(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for layer in &self.convs {
            if !layer.spec.quantized {
                continue;
            }
            let q = match &layer.mapping {
                Some(net) => binarize::sign(&net.forward(&layer.weight.value)?),
                None => binarize::sign(&layer.weight.value),
            };
            out.push(q);
        }
        Ok(out)
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Param)) {
        for (i, layer) in self.convs.iter().enumerate() {
            f(&format!("conv{i}.w"), &layer.weight);
            if let Some(bn) = &layer.bn {
                f(&format!("conv{i}.bn.gamma"), &bn.gamma);
                f(&format!("conv{i}.bn.beta"), &bn.beta);
            }
            if let Some(p) = &layer.prelu {
                f(&format!("conv{i}.prelu.slope"), p);
            }
            if let Some(net) = &layer.mapping {
                net.visit_params(|name, p| f(&format!("conv{i}.map.{name}"), p));
            }
        }
        f("linear.w", &self.linear_w);
        f("linear.b", &self.linear_b);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for (i, layer) in self.convs.iter_mut().enumerate() {
            f(&format!("conv{i}.w"), &mut layer.weight);
            if let Some(bn) = &mut layer.bn {
                f(&format!("conv{i}.bn.gamma"), &mut bn.gamma);
                f(&format!("conv{i}.bn.beta"), &mut bn.beta);
            }
            if let Some(p) = &mut layer.prelu {
                f(&format!("conv{i}.prelu.slope"), p);
            }
            if let Some(net) = &mut layer.mapping {
                net.visit_params_mut(|name, p| f(&format!("conv{i}.map.{name}"), p));
            }
        }
        f("linear.w", &mut self.linear_w);
        f("linear.b", &mut self.linear_b);
    }
}

/// One training step's recorded graph.
pub struct StepGraph {
    pub total: NodeId,
    pub cls: NodeId,
    pub aux: Vec<NodeId>,
    pub logits: NodeId,
    /// Tape nodes of every trainable parameter, keyed like `visit_params`.
    pub params: Vec<(String, NodeId)>,
}

pub struct ForwardCfg<'a> {
    pub rates: NoiseRates,
    pub reduction: Reduction,
    pub alpha: f32,
    pub scale_mode: ScaleMode,
    /// Fixed noisy labels per quantized layer; None recomputes sign(W) from
    /// the current latent weights each step.
    pub frozen_labels: Option<&'a [Tensor]>,
    /// Update batch-norm running statistics from this step's batch.
    pub update_running_stats: bool,
    /// Replace sign binarization with the identity (finite-difference
    /// checks only; never used in real training).
    pub surrogate: bool,
}

impl Default for ForwardCfg<'_> {
    fn default() -> Self {
        ForwardCfg {
            rates: NoiseRates::zero(),
            reduction: Reduction::Mean,
            alpha: 1.0,
            scale_mode: ScaleMode::None,
            frozen_labels: None,
            update_running_stats: true,
            surrogate: false,
        }
    }
}

fn update_running(bn: &mut BnParams, stats: &crate::ops::BnBatchStats) {
    // unbiased variance goes into the running estimate
    let n = stats.count as f32;
    let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
    for ci in 0..bn.running_mean.numel() {
        bn.running_mean.data[ci] =
            BN_DECAY * bn.running_mean.data[ci] + (1.0 - BN_DECAY) * stats.mean[ci];
        bn.running_var.data[ci] =
            BN_DECAY * bn.running_var.data[ci] + (1.0 - BN_DECAY) * stats.var[ci] * correction;
    }
}

/// Record one full training forward (both phases) on the tape.
///
/// Baseline phase (no mapping nets): quantized layers convolve
/// sign(activations) with sign(W), cross-entropy only. Fine-tune phase:
/// binary weights are sign(f_theta(W)) and each quantized layer contributes
/// the corrected loss between f_theta(W) and its noisy sign labels; the
/// total is `cls + alpha * sum(aux)`.
pub fn forward_train(
    model: &mut Model,
    tape: &mut GradTape,
    images: &Tensor,
    labels: &[u32],
    cfg: &ForwardCfg,
) -> Result<StepGraph> {
    if images.shape.rank() != 4
        || (images.dim(1), images.dim(2), images.dim(3))
            != (model.input_dims.0, model.input_dims.1, model.input_dims.2)
    {
        return Err(LnsError::ShapeMismatch {
            op: "forward_train",
            lhs: images.dims().to_vec(),
            rhs: vec![0, model.input_dims.0, model.input_dims.1, model.input_dims.2],
        });
    }

    let mut params = Vec::new();
    let mut aux = Vec::new();
    let mut x = tape.leaf(images);
    let mut quantized_idx = 0usize;

    let n_layers = model.convs.len();
    for i in 0..n_layers {
        let (spec, has_mapping) =
            (model.convs[i].spec.clone(), model.convs[i].mapping.is_some());
        let w_node = tape.leaf(&model.convs[i].weight.value);
        params.push((format!("conv{i}.w"), w_node));

        let y = if spec.quantized {
            let acts = tape.sign_ste(x, cfg.surrogate);
            let acts = if spec.padding > 0 {
                tape.pad_const(acts, spec.padding, -1.0)?
            } else {
                acts
            };
            let q = if has_mapping {
                let net = model.convs[i].mapping.as_ref().expect("checked");
                let (pred, net_params) = net.forward_tape(tape, w_node)?;
                for (name, id) in net_params {
                    params.push((format!("conv{i}.map.{name}"), id));
                }
                let layer_labels = match cfg.frozen_labels {
                    Some(all) => all
                        .get(quantized_idx)
                        .ok_or_else(|| LnsError::InvalidArgument {
                            op: "forward_train",
                            msg: format!("missing frozen labels for quantized layer {quantized_idx}"),
                        })?
                        .clone(),
                    None => binarize::sign(&model.convs[i].weight.value),
                };
                aux.push(tape.corrected_loss(pred, &layer_labels, cfg.rates, cfg.reduction)?);
                tape.sign_ste(pred, cfg.surrogate)
            } else {
                tape.sign_ste(w_node, cfg.surrogate)
            };
            let conv = tape.conv2d(acts, q, spec.stride, 0)?;
            quantized_idx += 1;
            match cfg.scale_mode {
                ScaleMode::None => conv,
                ScaleMode::LayerWise => {
                    let s = binarize::layer_scale(&model.convs[i].weight.value);
                    tape.scale(conv, s.value)
                }
            }
        } else {
            tape.conv2d(x, w_node, spec.stride, spec.padding)?
        };

        let y = if model.convs[i].bn.is_some() {
            let bn_gamma = tape.leaf(&model.convs[i].bn.as_ref().unwrap().gamma.value);
            let bn_beta = tape.leaf(&model.convs[i].bn.as_ref().unwrap().beta.value);
            params.push((format!("conv{i}.bn.gamma"), bn_gamma));
            params.push((format!("conv{i}.bn.beta"), bn_beta));
            let (y, stats) = tape.batch_norm(y, bn_gamma, bn_beta, BN_EPS)?;
            if cfg.update_running_stats {
                update_running(model.convs[i].bn.as_mut().unwrap(), &stats);
            }
            y
        } else {
            y
        };

        x = match spec.activation {
            Activation::None => y,
            Activation::Relu => tape.relu(y),
            Activation::HardTanh => tape.hardtanh(y),
            Activation::PRelu => {
                let slope = tape.leaf(&model.convs[i].prelu.as_ref().unwrap().value);
                params.push((format!("conv{i}.prelu.slope"), slope));
                tape.prelu(y, slope)?
            }
        };
    }

    let n = images.dim(0);
    let flat = tape.value(x).numel() / n;
    let x = tape.reshape(x, &[n, flat])?;
    let lw = tape.leaf(&model.linear_w.value);
    let lb = tape.leaf(&model.linear_b.value);
    params.push(("linear.w".into(), lw));
    params.push(("linear.b".into(), lb));
    let logits = tape.linear(x, lw, lb)?;
    let cls = tape.cross_entropy(logits, labels)?;

    let total = if aux.is_empty() {
        cls
    } else {
        let mut aux_sum = aux[0];
        for &a in &aux[1..] {
            aux_sum = tape.add(aux_sum, a)?;
        }
        let scaled = tape.scale(aux_sum, cfg.alpha);
        tape.add(cls, scaled)?
    };

    Ok(StepGraph { total, cls, aux, logits, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            convs: vec![
                ConvSpec {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    quantized: false,
                    batch_norm: true,
                    activation: Activation::None,
                },
                ConvSpec {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    quantized: true,
                    batch_norm: true,
                    activation: Activation::Relu,
                },
            ],
            classes: 4,
        }
    }

    fn rand_images(n: usize, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        let total = n * dims.0 * dims.1 * dims.2;
        let data = (0..total).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(&[n, dims.0, dims.1, dims.2], data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::cnn4(10).validate().is_ok());
        let mut bad = ModelSpec::cnn4(10);
        bad.convs[0].quantized = true;
        assert!(bad.validate().is_err());
        let mut bad = ModelSpec::cnn4(10);
        bad.classes = 1;
        assert!(bad.validate().is_err());
        assert!(ModelSpec::by_name("nope", 10).is_err());
    }

    #[test]
    fn baseline_forward_and_grads_flow_to_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut model = Model::init(&toy_spec(), (1, 6, 6), &mut rng).unwrap();
        let images = rand_images(4, (1, 6, 6), &mut rng);
        let labels = [0u32, 1, 2, 3];

        let mut tape = GradTape::new();
        let g = forward_train(&mut model, &mut tape, &images, &labels, &ForwardCfg::default())
            .unwrap();
        assert!(g.aux.is_empty());
        assert_eq!(g.total, g.cls);
        tape.backward(g.total).unwrap();
        for (name, id) in &g.params {
            assert!(tape.grad(*id).is_some(), "no grad reached {name}");
        }
    }

    #[test]
    fn lns_forward_adds_aux_per_quantized_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut model = Model::init(&toy_spec(), (1, 6, 6), &mut rng).unwrap();
        model.attach_mapping_nets(&mut rng);
        let images = rand_images(4, (1, 6, 6), &mut rng);
        let labels = [0u32, 1, 2, 3];

        let cfg = ForwardCfg { rates: NoiseRates::symmetric(0.05).unwrap(), ..Default::default() };
        let mut tape = GradTape::new();
        let g = forward_train(&mut model, &mut tape, &images, &labels, &cfg).unwrap();
        assert_eq!(g.aux.len(), 1);
        tape.backward(g.total).unwrap();
        // both mapping and latent weights get gradients
        let names: Vec<&str> = g.params.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"conv1.map.conv0.w"));
        for (name, id) in &g.params {
            assert!(tape.grad(*id).is_some(), "no grad reached {name}");
        }
    }

    #[test]
    fn alpha_zero_total_equals_cls_and_mapping_still_reached() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut model = Model::init(&toy_spec(), (1, 6, 6), &mut rng).unwrap();
        model.attach_mapping_nets(&mut rng);
        let images = rand_images(2, (1, 6, 6), &mut rng);
        let labels = [1u32, 3];

        let cfg = ForwardCfg {
            alpha: 0.0,
            rates: NoiseRates::symmetric(0.05).unwrap(),
            ..Default::default()
        };
        let mut tape = GradTape::new();
        let g = forward_train(&mut model, &mut tape, &images, &labels, &cfg).unwrap();
        assert_eq!(tape.value(g.total).data[0], tape.value(g.cls).data[0]);
        tape.backward(g.total).unwrap();
        // mapping weights still receive gradient through the cls path
        let (_, map_node) =
            g.params.iter().find(|(n, _)| n == "conv1.map.conv0.w").unwrap();
        assert!(tape.grad(*map_node).is_some());
    }

    #[test]
    fn binary_weights_follow_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut model = Model::init(&toy_spec(), (1, 6, 6), &mut rng).unwrap();
        let pre = model.binary_weights().unwrap();
        assert_eq!(pre.len(), 1);
        assert_eq!(pre[0].data, binarize::sign(&model.convs[1].weight.value).data);

        model.attach_mapping_nets(&mut rng);
        let post = model.binary_weights().unwrap();
        let net = model.convs[1].mapping.as_ref().unwrap();
        let want = binarize::sign(&net.forward(&model.convs[1].weight.value).unwrap());
        assert_eq!(post[0].data, want.data);
    }

    #[test]
    fn frozen_labels_are_used_when_given() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut model = Model::init(&toy_spec(), (1, 6, 6), &mut rng).unwrap();
        model.attach_mapping_nets(&mut rng);
        let images = rand_images(2, (1, 6, 6), &mut rng);
        let labels = [0u32, 1];

        // labels opposite to sign(W) change the aux loss value
        let w_sign = binarize::sign(&model.convs[1].weight.value);
        let flipped = Tensor {
            shape: w_sign.shape.clone(),
            data: w_sign.data.iter().map(|v| -v).collect(),
        };

        let run = |model: &mut Model, frozen: Option<&[Tensor]>| -> f32 {
            let cfg = ForwardCfg {
                rates: NoiseRates::symmetric(0.05).unwrap(),
                frozen_labels: frozen,
                update_running_stats: false,
                ..Default::default()
            };
            let mut tape = GradTape::new();
            let g = forward_train(model, &mut tape, &images, &labels, &cfg).unwrap();
            tape.value(g.aux[0]).data[0]
        };
        let live = run(&mut model, None);
        let frozen_same = run(&mut model, Some(std::slice::from_ref(&w_sign)));
        let frozen_flipped = run(&mut model, Some(std::slice::from_ref(&flipped)));
        assert_eq!(live, frozen_same);
        assert_ne!(live, frozen_flipped);
    }
}
