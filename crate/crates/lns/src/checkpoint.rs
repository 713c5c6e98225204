//! `LNS1` training checkpoint format.
//!
//! Layout: magic `LNS1`, u16 LE format version, u32 LE header length, UTF-8
//! JSON header, then raw payloads in header-entry order. Float payloads are
//! 32-bit LE; bit payloads (in the `LNSB` sibling format) are 64-bit LE words.
//!
//! Loading is strict: the expected entry list is derived from the model spec,
//! and the header must match it name-for-name with contiguous offsets, so a
//! checkpoint restores training state bit-identically or not at all. All size
//! arithmetic is checked; allocations never exceed the input size.

use crate::error::{LnsError, Result};
use crate::model::{Model, ModelSpec, Phase};
use crate::binarize::ScaleMode;
use crate::tensor::Tensor;
use rand::SeedableRng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"LNS1";
pub const EXPORT_MAGIC: [u8; 4] = *b"LNSB";
pub const FORMAT_VERSION: u16 = 1;

/// Extent caps applied before any spec-derived arithmetic, so a hostile
/// header cannot drive huge computations or allocations.
pub(crate) fn check_spec_bounds(spec: &ModelSpec, input_dims: (usize, usize, usize)) -> Result<()> {
    spec.validate()?;
    let cap_err = |what: &str, v: usize| LnsError::Format {
        format: "lns-container",
        offset: 0,
        msg: format!("{what} {v} exceeds format bounds"),
    };
    if spec.convs.len() > 256 {
        return Err(cap_err("layer count", spec.convs.len()));
    }
    if spec.classes > 1 << 16 {
        return Err(cap_err("class count", spec.classes));
    }
    for c in &spec.convs {
        if c.out_channels > 1 << 16 {
            return Err(cap_err("channel count", c.out_channels));
        }
        if c.kernel > 64 || c.stride > 64 || c.padding > 64 {
            return Err(cap_err("kernel geometry", c.kernel.max(c.stride).max(c.padding)));
        }
    }
    let (c, h, w) = input_dims;
    if c == 0 || h == 0 || w == 0 || c > 1 << 12 || h > 1 << 14 || w > 1 << 14 {
        return Err(cap_err("input extent", c.max(h).max(w)));
    }
    Ok(())
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut acc: u64 = 1;
    for &d in shape {
        acc = acc
            .checked_mul(d as u64)
            .filter(|&v| v <= 1 << 40)
            .ok_or(LnsError::Format {
                format: "lns-container",
                offset: 0,
                msg: format!("tensor shape {shape:?} overflows"),
            })?;
    }
    Ok(acc as usize)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    /// Streams are derived per (seed, stream, epoch); nothing else persists.
    pub scheme: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptHeader {
    spec: ModelSpec,
    input_dims: (usize, usize, usize),
    phase: Phase,
    epoch: usize,
    seed: u64,
    scale_mode: ScaleMode,
    config_echo: String,
    rng: RngState,
    entries: Vec<HeaderEntry>,
}

/// In-memory training checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub phase: Phase,
    pub epoch: usize,
    pub seed: u64,
    pub scale_mode: ScaleMode,
    pub config_echo: String,
}

// ---- generic container plumbing -------------------------------------------

pub(crate) fn write_container<H: Serialize>(magic: [u8; 4], header: &H, payload: &[u8]) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + header_json.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(payload);
    out
}

pub(crate) fn read_container<'b, H: DeserializeOwned>(
    magic: [u8; 4],
    format: &'static str,
    bytes: &'b [u8],
) -> Result<(H, &'b [u8])> {
    if bytes.len() < 10 {
        return Err(LnsError::Format {
            format,
            offset: bytes.len(),
            msg: "truncated before header".into(),
        });
    }
    if bytes[..4] != magic {
        return Err(LnsError::Format {
            format,
            offset: 0,
            msg: format!("bad magic {:02x?}, want {:02x?}", &bytes[..4], magic),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(LnsError::Format {
            format,
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let header_end = 10usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or(
        LnsError::Format {
            format,
            offset: 6,
            msg: format!("header length {header_len} exceeds file size"),
        },
    )?;
    let header: H = serde_json::from_slice(&bytes[10..header_end]).map_err(|e| {
        LnsError::Format { format, offset: 10, msg: format!("header JSON: {e}") }
    })?;
    Ok((header, &bytes[header_end..]))
}

fn dtype_len(dtype: &str, numel: usize) -> Result<usize> {
    match dtype {
        "f32" => numel.checked_mul(4).ok_or(LnsError::Format {
            format: "lns-container",
            offset: 0,
            msg: "payload size overflow".into(),
        }),
        "bit1" => Ok(numel.div_ceil(64) * 8),
        other => Err(LnsError::Format {
            format: "lns-container",
            offset: 0,
            msg: format!("unknown dtype `{other}`"),
        }),
    }
}

/// Entries must be contiguous from offset 0 and exactly cover the payload.
pub(crate) fn validate_entries(
    format: &'static str,
    entries: &[HeaderEntry],
    payload_len: usize,
) -> Result<()> {
    let mut cursor = 0usize;
    for e in entries {
        let numel = checked_numel(&e.shape)?;
        let want_len = dtype_len(&e.dtype, numel)?;
        if e.len != want_len || e.offset != cursor {
            return Err(LnsError::Format {
                format,
                offset: 10,
                msg: format!(
                    "entry `{}`: offset {} len {} inconsistent (expected offset {cursor} len {want_len})",
                    e.name, e.offset, e.len
                ),
            });
        }
        cursor = cursor.checked_add(e.len).ok_or(LnsError::Format {
            format,
            offset: 10,
            msg: "payload size overflow".into(),
        })?;
    }
    if cursor != payload_len {
        return Err(LnsError::Format {
            format,
            offset: 10,
            msg: format!("entries cover {cursor} bytes but payload has {payload_len}"),
        });
    }
    Ok(())
}

pub(crate) fn f32_slice_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub(crate) fn f32_slice_to_le(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ---- checkpoint state enumeration -----------------------------------------

/// Canonical (name, shape) list of everything a checkpoint stores, derived
/// from the spec alone. The saver and loader both follow this order.
fn expected_entries(
    spec: &ModelSpec,
    input_dims: (usize, usize, usize),
    phase: Phase,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    fn push_param(out: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>) {
        out.push((name.clone(), shape.clone()));
        out.push((format!("{name}.vel"), shape));
    }
    let (mut c, mut h, mut w) = input_dims;
    for (i, cs) in spec.convs.iter().enumerate() {
        push_param(&mut out, format!("conv{i}.w"), vec![cs.out_channels, c, cs.kernel, cs.kernel]);
        if cs.batch_norm {
            push_param(&mut out, format!("conv{i}.bn.gamma"), vec![cs.out_channels]);
            push_param(&mut out, format!("conv{i}.bn.beta"), vec![cs.out_channels]);
            out.push((format!("conv{i}.bn.running_mean"), vec![cs.out_channels]));
            out.push((format!("conv{i}.bn.running_var"), vec![cs.out_channels]));
        }
        if cs.activation == crate::model::Activation::PRelu {
            push_param(&mut out, format!("conv{i}.prelu.slope"), vec![cs.out_channels]);
        }
        if cs.quantized && phase == Phase::Lns {
            push_param(&mut out, format!("conv{i}.map.conv0.w"), vec![2 * c, c, 3, 3]);
            push_param(&mut out, format!("conv{i}.map.conv1.w"), vec![2 * c, 2 * c, 3, 3]);
            push_param(&mut out, format!("conv{i}.map.conv2.w"), vec![c, 2 * c, 3, 3]);
            for b in 0..2 {
                push_param(&mut out, format!("conv{i}.map.bn{b}.gamma"), vec![2 * c]);
                push_param(&mut out, format!("conv{i}.map.bn{b}.beta"), vec![2 * c]);
            }
        }
        h = crate::ops::conv_out_extent(h, cs.kernel, cs.stride, cs.padding)?;
        w = crate::ops::conv_out_extent(w, cs.kernel, cs.stride, cs.padding)?;
        c = cs.out_channels;
    }
    let flat = checked_numel(&[c, h, w])?;
    push_param(&mut out, "linear.w".into(), vec![spec.classes, flat]);
    push_param(&mut out, "linear.b".into(), vec![spec.classes]);
    Ok(out)
}

/// Walk the live model in the same canonical order, yielding payload slices.
fn collect_state<'m>(model: &'m Model, phase: Phase) -> Vec<(String, &'m Tensor)> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    for (i, layer) in model.convs.iter().enumerate() {
        out.push((format!("conv{i}.w"), &layer.weight.value));
        out.push((format!("conv{i}.w.vel"), &layer.weight.velocity));
        if let Some(bn) = &layer.bn {
            out.push((format!("conv{i}.bn.gamma"), &bn.gamma.value));
            out.push((format!("conv{i}.bn.gamma.vel"), &bn.gamma.velocity));
            out.push((format!("conv{i}.bn.beta"), &bn.beta.value));
            out.push((format!("conv{i}.bn.beta.vel"), &bn.beta.velocity));
            out.push((format!("conv{i}.bn.running_mean"), &bn.running_mean));
            out.push((format!("conv{i}.bn.running_var"), &bn.running_var));
        }
        if let Some(p) = &layer.prelu {
            out.push((format!("conv{i}.prelu.slope"), &p.value));
            out.push((format!("conv{i}.prelu.slope.vel"), &p.velocity));
        }
        if phase == Phase::Lns {
            if let Some(net) = &layer.mapping {
                for (j, conv) in net.conv.iter().enumerate() {
                    out.push((format!("conv{i}.map.conv{j}.w"), &conv.value));
                    out.push((format!("conv{i}.map.conv{j}.w.vel"), &conv.velocity));
                }
                for b in 0..2 {
                    out.push((format!("conv{i}.map.bn{b}.gamma"), &net.gamma[b].value));
                    out.push((format!("conv{i}.map.bn{b}.gamma.vel"), &net.gamma[b].velocity));
                    out.push((format!("conv{i}.map.bn{b}.beta"), &net.beta[b].value));
                    out.push((format!("conv{i}.map.bn{b}.beta.vel"), &net.beta[b].velocity));
                }
            }
        }
    }
    out.push(("linear.w".into(), &model.linear_w.value));
    out.push(("linear.w.vel".into(), &model.linear_w.velocity));
    out.push(("linear.b".into(), &model.linear_b.value));
    out.push(("linear.b.vel".into(), &model.linear_b.velocity));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let state = collect_state(&self.model, self.phase);
        let mut entries = Vec::with_capacity(state.len());
        let mut payload = Vec::new();
        for (name, tensor) in &state {
            let offset = payload.len();
            f32_slice_to_le(&tensor.data, &mut payload);
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: tensor.dims().to_vec(),
                dtype: "f32".into(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = CkptHeader {
            spec: self.model.spec.clone(),
            input_dims: self.model.input_dims,
            phase: self.phase,
            epoch: self.epoch,
            seed: self.seed,
            scale_mode: self.scale_mode,
            config_echo: self.config_echo.clone(),
            rng: RngState { scheme: "epoch_derived".into(), seed: self.seed, epoch: self.epoch },
            entries,
        };
        write_container(CKPT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (CkptHeader, &[u8]) =
            read_container(CKPT_MAGIC, "lns1", bytes)?;
        check_spec_bounds(&header.spec, header.input_dims)?;
        validate_entries("lns1", &header.entries, payload.len())?;

        // the expected state list pins names, shapes, and order
        let expected = expected_entries(&header.spec, header.input_dims, header.phase)?;
        let mut expected_with_vel: Vec<(String, Vec<usize>)> = Vec::new();
        for (name, shape) in expected {
            expected_with_vel.push((name, shape));
        }
        if header.entries.len() != expected_with_vel.len() {
            return Err(LnsError::Format {
                format: "lns1",
                offset: 10,
                msg: format!(
                    "{} entries but the spec requires {}",
                    header.entries.len(),
                    expected_with_vel.len()
                ),
            });
        }
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (e, (want_name, want_shape)) in header.entries.iter().zip(&expected_with_vel) {
            if &e.name != want_name || &e.shape != want_shape || e.dtype != "f32" {
                return Err(LnsError::Format {
                    format: "lns1",
                    offset: 10,
                    msg: format!(
                        "entry `{}` {:?} does not match expected `{}` {:?}",
                        e.name, e.shape, want_name, want_shape
                    ),
                });
            }
            let data = f32_slice_from_le(&payload[e.offset..e.offset + e.len]);
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }

        // assemble the model shell and fill every tensor by name
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(&header.spec, header.input_dims, &mut rng)?;
        if header.phase == Phase::Lns {
            model.attach_mapping_nets(&mut rng);
        }
        let mut missing = Vec::new();
        model.visit_params_mut(|name, p| {
            match (tensors.remove(name), tensors.remove(&format!("{name}.vel"))) {
                (Some(v), Some(vel)) => {
                    p.value = v;
                    p.velocity = vel;
                }
                _ => missing.push(name.to_string()),
            }
        });
        for (i, layer) in model.convs.iter_mut().enumerate() {
            if let Some(bn) = &mut layer.bn {
                match (
                    tensors.remove(&format!("conv{i}.bn.running_mean")),
                    tensors.remove(&format!("conv{i}.bn.running_var")),
                ) {
                    (Some(m), Some(v)) => {
                        bn.running_mean = m;
                        bn.running_var = v;
                    }
                    _ => missing.push(format!("conv{i}.bn.running_*")),
                }
            }
        }
        if !missing.is_empty() || !tensors.is_empty() {
            return Err(LnsError::Format {
                format: "lns1",
                offset: 10,
                msg: format!(
                    "state mismatch: missing {missing:?}, unconsumed {:?}",
                    tensors.keys().collect::<Vec<_>>()
                ),
            });
        }
        Ok(Checkpoint {
            model,
            phase: header.phase,
            epoch: header.epoch,
            seed: header.seed,
            scale_mode: header.scale_mode,
            config_echo: header.config_echo,
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
