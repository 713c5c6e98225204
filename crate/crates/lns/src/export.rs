//! `LNSB` exported inference models and the bit-packed evaluation path.
//!
//! Export materializes each quantized layer's binary weights — sign(f_theta(W))
//! when a mapping net is attached, sign(W) otherwise — packs them, and keeps
//! one f32 scale per quantized layer. Mapping nets and latent weights are
//! dropped. Non-quantized layers, batch-norm state, and the classifier stay
//! full-precision. Evaluating a checkpoint goes through the same
//! materialization, so exported files reproduce checkpoint logits exactly.

use crate::binarize::{self, BitTensor, ScaleMode};
use crate::checkpoint::{
    check_spec_bounds, checked_numel, f32_slice_from_le, f32_slice_to_le, read_container,
    validate_entries, write_container, Checkpoint, HeaderEntry, EXPORT_MAGIC,
};
use crate::data::Dataset;
use crate::error::{LnsError, Result};
use crate::mapping::BN_EPS;
use crate::model::{Activation, ConvSpec, Model, ModelSpec};
use crate::ops;
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct InfBn {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub enum InfWeights {
    Dense(Tensor),
    Binary { bits: BitTensor, scale: f32 },
}

#[derive(Debug, Clone)]
pub struct InfConv {
    pub spec: ConvSpec,
    pub weights: InfWeights,
    pub bn: Option<InfBn>,
    pub prelu: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub spec: ModelSpec,
    pub input_dims: (usize, usize, usize),
    pub convs: Vec<InfConv>,
    pub linear_w: Tensor,
    pub linear_b: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExportHeader {
    spec: ModelSpec,
    input_dims: (usize, usize, usize),
    scale_mode: ScaleMode,
    entries: Vec<HeaderEntry>,
}

impl InferenceModel {
    /// Materialize the deployable model from a training state.
    pub fn from_model(model: &Model, scale_mode: ScaleMode) -> Result<Self> {
        let mut convs = Vec::new();
        for layer in &model.convs {
            let weights = if layer.spec.quantized {
                let q = match &layer.mapping {
                    Some(net) => binarize::sign(&net.forward(&layer.weight.value)?),
                    None => binarize::sign(&layer.weight.value),
                };
                let scale = match scale_mode {
                    ScaleMode::None => 1.0,
                    ScaleMode::LayerWise => binarize::layer_scale(&layer.weight.value).value,
                };
                InfWeights::Binary { bits: binarize::pack(&q)?, scale }
            } else {
                InfWeights::Dense(layer.weight.value.clone())
            };
            convs.push(InfConv {
                spec: layer.spec.clone(),
                weights,
                bn: layer.bn.as_ref().map(|bn| InfBn {
                    gamma: bn.gamma.value.clone(),
                    beta: bn.beta.value.clone(),
                    mean: bn.running_mean.clone(),
                    var: bn.running_var.clone(),
                }),
                prelu: layer.prelu.as_ref().map(|p| p.value.clone()),
            });
        }
        Ok(InferenceModel {
            spec: model.spec.clone(),
            input_dims: model.input_dims,
            convs,
            linear_w: model.linear_w.value.clone(),
            linear_b: model.linear_b.value.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_model(&ckpt.model, ckpt.scale_mode)
    }

    /// Forward a batch through the deployed path: packed popcount convolution
    /// for quantized layers, dense for the rest, eval-mode batch norm.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        if images.shape.rank() != 4
            || (images.dim(1), images.dim(2), images.dim(3))
                != (self.input_dims.0, self.input_dims.1, self.input_dims.2)
        {
            return Err(LnsError::ShapeMismatch {
                op: "logits",
                lhs: images.dims().to_vec(),
                rhs: vec![0, self.input_dims.0, self.input_dims.1, self.input_dims.2],
            });
        }
        let mut x = images.clone();
        for conv in &self.convs {
            let mut y = match &conv.weights {
                InfWeights::Dense(w) => ops::conv2d(&x, w, conv.spec.stride, conv.spec.padding)?,
                InfWeights::Binary { bits, scale } => {
                    let acts = binarize::pack(&binarize::sign(&x))?;
                    let mut y =
                        binary_convolution(&acts, bits, conv.spec.stride, conv.spec.padding)?;
                    for v in y.data.iter_mut() {
                        *v *= scale;
                    }
                    y
                }
            };
            if let Some(bn) = &conv.bn {
                y = ops::batch_norm_eval(&y, &bn.gamma, &bn.beta, &bn.mean, &bn.var, BN_EPS)?;
            }
            x = match conv.spec.activation {
                Activation::None => y,
                Activation::Relu => ops::relu(&y),
                Activation::HardTanh => ops::hardtanh(&y),
                Activation::PRelu => ops::prelu(&y, conv.prelu.as_ref().ok_or_else(|| {
                    LnsError::InvalidArgument {
                        op: "logits",
                        msg: "prelu activation without slope payload".into(),
                    }
                })?)?,
            };
        }
        let n = images.dim(0);
        let flat = x.numel() / n;
        ops::linear(&x.reshaped(&[n, flat])?, &self.linear_w, &self.linear_b)
    }

    /// Top-1 accuracy and mean cross-entropy over a dataset. Batches may be
    /// sharded across `threads`; per-batch partials are reduced in batch
    /// order, so the result is identical for any thread count.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize, threads: usize) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(LnsError::InvalidArgument { op: "evaluate", msg: "empty dataset".into() });
        }
        let n = data.len();
        let n_batches = n.div_ceil(batch_size);
        let mut partials: Vec<Result<(usize, f64)>> = Vec::with_capacity(n_batches);

        let run_batch = |bi: usize| -> Result<(usize, f64)> {
            let lo = bi * batch_size;
            let hi = ((bi + 1) * batch_size).min(n);
            let (c, h, w) = data.image_dims();
            let plane = c * h * w;
            let images = Tensor::from_vec(
                &[hi - lo, c, h, w],
                data.images.data[lo * plane..hi * plane].to_vec(),
            )?;
            let logits = self.logits(&images)?;
            let labels = &data.labels[lo..hi];
            let (ce, _) = ops::cross_entropy(&logits, labels)?;
            let k = logits.dim(1);
            let mut correct = 0usize;
            for (bi, &label) in labels.iter().enumerate() {
                let row = &logits.data[bi * k..(bi + 1) * k];
                let mut best = 0usize;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == label as usize {
                    correct += 1;
                }
            }
            Ok((correct, ce as f64 * (hi - lo) as f64))
        };

        let threads = threads.max(1).min(n_batches);
        if threads == 1 {
            for bi in 0..n_batches {
                partials.push(run_batch(bi));
            }
        } else {
            partials.resize_with(n_batches, || Ok((0, 0.0)));
            std::thread::scope(|scope| {
                for (ti, chunk) in partials.chunks_mut(n_batches.div_ceil(threads)).enumerate() {
                    let run = &run_batch;
                    let base = ti * n_batches.div_ceil(threads);
                    scope.spawn(move || {
                        for (off, slot) in chunk.iter_mut().enumerate() {
                            *slot = run(base + off);
                        }
                    });
                }
            });
        }

        let mut correct = 0usize;
        let mut ce_sum = 0f64;
        for p in partials {
            let (c, ce) = p?;
            correct += c;
            ce_sum += ce;
        }
        Ok((correct as f64 / n as f64, ce_sum / n as f64))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let push_f32 = |name: String, t: &Tensor, entries: &mut Vec<HeaderEntry>, payload: &mut Vec<u8>| {
            let offset = payload.len();
            f32_slice_to_le(&t.data, payload);
            entries.push(HeaderEntry {
                name,
                shape: t.dims().to_vec(),
                dtype: "f32".into(),
                offset,
                len: payload.len() - offset,
            });
        };
        for (i, conv) in self.convs.iter().enumerate() {
            match &conv.weights {
                InfWeights::Dense(w) => push_f32(format!("conv{i}.w"), w, &mut entries, &mut payload),
                InfWeights::Binary { bits, scale } => {
                    let offset = payload.len();
                    for word in &bits.words {
                        payload.extend_from_slice(&word.to_le_bytes());
                    }
                    entries.push(HeaderEntry {
                        name: format!("conv{i}.w.bits"),
                        shape: bits.dims().to_vec(),
                        dtype: "bit1".into(),
                        offset,
                        len: payload.len() - offset,
                    });
                    let scale_t = Tensor::from_vec(&[1], vec![*scale]).unwrap();
                    push_f32(format!("conv{i}.scale"), &scale_t, &mut entries, &mut payload);
                }
            }
            if let Some(bn) = &conv.bn {
                push_f32(format!("conv{i}.bn.gamma"), &bn.gamma, &mut entries, &mut payload);
                push_f32(format!("conv{i}.bn.beta"), &bn.beta, &mut entries, &mut payload);
                push_f32(format!("conv{i}.bn.running_mean"), &bn.mean, &mut entries, &mut payload);
                push_f32(format!("conv{i}.bn.running_var"), &bn.var, &mut entries, &mut payload);
            }
            if let Some(p) = &conv.prelu {
                push_f32(format!("conv{i}.prelu.slope"), p, &mut entries, &mut payload);
            }
        }
        push_f32("linear.w".into(), &self.linear_w, &mut entries, &mut payload);
        push_f32("linear.b".into(), &self.linear_b, &mut entries, &mut payload);

        let header = ExportHeader {
            spec: self.spec.clone(),
            input_dims: self.input_dims,
            scale_mode: ScaleMode::None,
            entries,
        };
        write_container(EXPORT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (ExportHeader, &[u8]) =
            read_container(EXPORT_MAGIC, "lnsb", bytes)?;
        check_spec_bounds(&header.spec, header.input_dims)?;
        validate_entries("lnsb", &header.entries, payload.len())?;

        let mut cursor = header.entries.iter();
        let mut take = |want_name: &str, want_dtype: &str| -> Result<(&HeaderEntry, &[u8])> {
            let e = cursor.next().ok_or_else(|| LnsError::Format {
                format: "lnsb",
                offset: 10,
                msg: format!("missing entry `{want_name}`"),
            })?;
            if e.name != want_name || e.dtype != want_dtype {
                return Err(LnsError::Format {
                    format: "lnsb",
                    offset: 10,
                    msg: format!("expected `{want_name}` ({want_dtype}), found `{}` ({})", e.name, e.dtype),
                });
            }
            Ok((e, &payload[e.offset..e.offset + e.len]))
        };

        let expect_shape = |e: &HeaderEntry, want: &[usize]| -> Result<()> {
            if e.shape != want {
                return Err(LnsError::Format {
                    format: "lnsb",
                    offset: 10,
                    msg: format!("entry `{}` shape {:?}, want {want:?}", e.name, e.shape),
                });
            }
            Ok(())
        };

        let (mut c, mut h, mut w) = header.input_dims;
        let mut convs = Vec::new();
        for (i, cs) in header.spec.convs.iter().enumerate() {
            let wshape = [cs.out_channels, c, cs.kernel, cs.kernel];
            let weights = if cs.quantized {
                let (e, bytes) = take(&format!("conv{i}.w.bits"), "bit1")?;
                expect_shape(e, &wshape)?;
                let words: Vec<u64> = bytes
                    .chunks_exact(8)
                    .map(|ch| u64::from_le_bytes(ch.try_into().unwrap()))
                    .collect();
                let numel = checked_numel(&wshape)?;
                if numel % 64 != 0 {
                    let last = words[numel / 64];
                    if last >> (numel % 64) != 0 {
                        return Err(LnsError::Format {
                            format: "lnsb",
                            offset: 10,
                            msg: format!("entry `{}` has nonzero padding bits", e.name),
                        });
                    }
                }
                let bits = BitTensor { shape: Shape::new(&wshape)?, words };
                let (e, bytes) = take(&format!("conv{i}.scale"), "f32")?;
                expect_shape(e, &[1])?;
                let scale = f32_slice_from_le(bytes)[0];
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(LnsError::Format {
                        format: "lnsb",
                        offset: 10,
                        msg: format!("scale for conv{i} must be positive and finite, got {scale}"),
                    });
                }
                InfWeights::Binary { bits, scale }
            } else {
                let (e, bytes) = take(&format!("conv{i}.w"), "f32")?;
                expect_shape(e, &wshape)?;
                InfWeights::Dense(Tensor::from_vec(&wshape, f32_slice_from_le(bytes))?)
            };
            let bn = if cs.batch_norm {
                let mut grab = |suffix: &str| -> Result<Tensor> {
                    let (e, bytes) = take(&format!("conv{i}.bn.{suffix}"), "f32")?;
                    expect_shape(e, &[cs.out_channels])?;
                    Tensor::from_vec(&[cs.out_channels], f32_slice_from_le(bytes))
                };
                Some(InfBn {
                    gamma: grab("gamma")?,
                    beta: grab("beta")?,
                    mean: grab("running_mean")?,
                    var: grab("running_var")?,
                })
            } else {
                None
            };
            let prelu = if cs.activation == Activation::PRelu {
                let (e, bytes) = take(&format!("conv{i}.prelu.slope"), "f32")?;
                expect_shape(e, &[cs.out_channels])?;
                Some(Tensor::from_vec(&[cs.out_channels], f32_slice_from_le(bytes))?)
            } else {
                None
            };
            convs.push(InfConv { spec: cs.clone(), weights, bn, prelu });
            h = ops::conv_out_extent(h, cs.kernel, cs.stride, cs.padding)?;
            w = ops::conv_out_extent(w, cs.kernel, cs.stride, cs.padding)?;
            c = cs.out_channels;
        }
        let flat = checked_numel(&[c, h, w])?;
        let (e, bytes) = take("linear.w", "f32")?;
        expect_shape(e, &[header.spec.classes, flat])?;
        let linear_w = Tensor::from_vec(&[header.spec.classes, flat], f32_slice_from_le(bytes))?;
        let (e, bytes) = take("linear.b", "f32")?;
        expect_shape(e, &[header.spec.classes])?;
        let linear_b = Tensor::from_vec(&[header.spec.classes], f32_slice_from_le(bytes))?;
        if let Some(extra) = cursor.next() {
            return Err(LnsError::Format {
                format: "lnsb",
                offset: 10,
                msg: format!("unexpected trailing entry `{}`", extra.name),
            });
        }
        Ok(InferenceModel {
            spec: header.spec,
            input_dims: header.input_dims,
            convs,
            linear_w,
            linear_b,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| LnsError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| LnsError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn binary_convolution(
    acts: &BitTensor,
    weights: &BitTensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    binarize::binary_conv2d(acts, weights, stride, padding)
}
