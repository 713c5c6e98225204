//! Sign binarization with straight-through backward, bit-packed +-1 tensors,
//! and the XOR/POPCOUNT convolution used by the inference path.
//!
//! Packing layout (part of the exported model format): row-major flat order,
//! 64 logical elements per u64 word, bit `i` of word `j` is flat element
//! `j*64 + i`; bit 1 encodes +1, bit 0 encodes -1; padding bits past the
//! logical length are always 0.

use crate::error::{LnsError, Result};
use crate::tensor::{Shape, Tensor};

/// Elementwise sign with the fixed tie-break sign(0) = +1.
pub fn sign(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Straight-through backward for `sign`: clip the upstream gradient to [-1, 1].
pub fn ste_backward(upstream: &Tensor) -> Tensor {
    let data = upstream.data.iter().map(|&g| g.clamp(-1.0, 1.0)).collect();
    Tensor { shape: upstream.shape.clone(), data }
}

/// Per-layer scale mode for the binary convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScaleMode {
    None,
    LayerWise,
}

/// Layer-wise scale factor: mean absolute value of the latent weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScale {
    pub value: f32,
    /// Set when the weights were all zero and the scale fell back to eps.
    pub degenerate: bool,
}

pub fn layer_scale(weights: &Tensor) -> LayerScale {
    let mut acc = 0f64;
    for &v in &weights.data {
        acc += v.abs() as f64;
    }
    let mean = (acc / weights.numel() as f64) as f32;
    if mean == 0.0 {
        LayerScale { value: 1e-8, degenerate: true }
    } else {
        LayerScale { value: mean, degenerate: false }
    }
}

/// Bit-packed logical +-1 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BitTensor {
    pub shape: Shape,
    pub words: Vec<u64>,
}

impl BitTensor {
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    /// Logical element at flat index (true = +1).
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }
}

/// Pack an exactly-+-1 tensor. Non-+-1 values are rejected with their index.
pub fn pack(input: &Tensor) -> Result<BitTensor> {
    let n = input.numel();
    let mut words = vec![0u64; n.div_ceil(64)];
    for (i, &v) in input.data.iter().enumerate() {
        if v == 1.0 {
            words[i / 64] |= 1u64 << (i % 64);
        } else if v != -1.0 {
            return Err(LnsError::InvalidArgument {
                op: "pack",
                msg: format!("value {v} at flat index {i} is not +1 or -1"),
            });
        }
    }
    Ok(BitTensor { shape: input.shape.clone(), words })
}

pub fn unpack(input: &BitTensor) -> Tensor {
    let n = input.numel();
    let mut data = vec![-1.0f32; n];
    for (i, v) in data.iter_mut().enumerate() {
        if input.bit(i) {
            *v = 1.0;
        }
    }
    Tensor { shape: input.shape.clone(), data }
}

/// One zero-padded guard word past each packed row so window extraction
/// never reads out of bounds.
struct PackedRows {
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedRows {
    /// Extract `k` bits starting at column `x0` of row `r` (k <= 64).
    #[inline]
    fn window(&self, r: usize, x0: usize, k: usize) -> u64 {
        let base = r * self.words_per_row + x0 / 64;
        let off = x0 % 64;
        let lo = self.words[base] >> off;
        let hi = if off == 0 { 0 } else { self.words[base + 1] << (64 - off) };
        (lo | hi) & (u64::MAX >> (64 - k))
    }
}

/// Repack the [n,c,h,w] activation planes with `pad` columns/rows of logical
/// -1 (bit 0) around each plane, one packed row per image row.
fn pack_padded_planes(acts: &BitTensor, pad: usize) -> PackedRows {
    let (n, c, h, w) = (acts.dims()[0], acts.dims()[1], acts.dims()[2], acts.dims()[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let words_per_row = wp.div_ceil(64) + 1;
    let mut words = vec![0u64; n * c * hp * words_per_row];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let row_base = ((ni * c + ci) * hp + y + pad) * words_per_row;
                let flat_base = ((ni * c + ci) * h + y) * w;
                for x in 0..w {
                    if acts.bit(flat_base + x) {
                        let col = x + pad;
                        words[row_base + col / 64] |= 1u64 << (col % 64);
                    }
                }
            }
        }
    }
    PackedRows { words_per_row, words }
}

/// Binary convolution via XOR/POPCOUNT on packed +-1 operands.
///
/// The padding ring contributes logical -1. Output integers exactly equal the
/// dense +-1 cross-correlation under the same padding convention; each row of
/// the window contributes `k - 2*popcount(a ^ b)`.
pub fn binary_conv2d(
    activations: &BitTensor,
    weights: &BitTensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (ad, wd) = (activations.dims(), weights.dims());
    if activations.shape.rank() != 4 || weights.shape.rank() != 4 || ad[1] != wd[1] || wd[2] != wd[3]
    {
        return Err(LnsError::ShapeMismatch {
            op: "binary_conv2d",
            lhs: ad.to_vec(),
            rhs: wd.to_vec(),
        });
    }
    let (n, c, h, w) = (ad[0], ad[1], ad[2], ad[3]);
    let (o, k) = (wd[0], wd[2]);
    if k > 64 {
        return Err(LnsError::InvalidArgument {
            op: "binary_conv2d",
            msg: format!("kernel extent {k} exceeds one packed word"),
        });
    }
    let oh = crate::ops::conv_out_extent(h, k, stride, padding)?;
    let ow = crate::ops::conv_out_extent(w, k, stride, padding)?;

    let planes = pack_padded_planes(activations, padding);
    let hp = h + 2 * padding;

    // weight rows: k bits per (o, c, kh)
    let mut wrows = vec![0u64; o * c * k];
    for oi in 0..o {
        for ci in 0..c {
            for kh in 0..k {
                let mut bits = 0u64;
                for kw in 0..k {
                    if weights.bit(((oi * c + ci) * k + kh) * k + kw) {
                        bits |= 1u64 << kw;
                    }
                }
                wrows[(oi * c + ci) * k + kh] = bits;
            }
        }
    }

    let window_bits = (c * k * k) as i64;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            let out_base = (ni * o + oi) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut disagree = 0u32;
                    for ci in 0..c {
                        let plane_row0 = (ni * c + ci) * hp;
                        for kh in 0..k {
                            let a = planes.window(plane_row0 + oy * stride + kh, ox * stride, k);
                            let b = wrows[(oi * c + ci) * k + kh];
                            disagree += (a ^ b).count_ones();
                        }
                    }
                    out.data[out_base + oy * ow + ox] =
                        (window_bits - 2 * disagree as i64) as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pm1(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Dense oracle under the -1 padding convention.
    fn dense_pm1_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
        let padded = ops::pad_spatial(x, padding, -1.0).unwrap();
        ops::conv2d(&padded, w, stride, 0).unwrap()
    }

    #[test]
    fn sign_values_and_tie_break() {
        let x = Tensor::from_vec(&[3], vec![0.5, -0.3, 0.0]).unwrap();
        assert_eq!(sign(&x).data, vec![1.0, -1.0, 1.0]);
        // idempotent on +-1 values
        let s = sign(&x);
        assert_eq!(sign(&s).data, s.data);
    }

    #[test]
    fn ste_clips_upstream() {
        let g = Tensor::from_vec(&[3], vec![2.0, -0.5, -3.0]).unwrap();
        assert_eq!(ste_backward(&g).data, vec![1.0, -0.5, -1.0]);
    }

    #[test]
    fn pack_examples() {
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let b = pack(&one).unwrap();
        assert_eq!(b.words, vec![1u64]);

        let negs = Tensor::filled(&[64], -1.0);
        assert_eq!(pack(&negs).unwrap().words, vec![0u64]);

        let bad = Tensor::from_vec(&[3], vec![1.0, 0.5, -1.0]).unwrap();
        let msg = pack(&bad).unwrap_err().to_string();
        assert!(msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn pack_unpack_roundtrip_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = rand_pm1(&[10, 100], &mut rng);
        let rt = unpack(&pack(&t).unwrap());
        assert_eq!(rt.data, t.data);
    }

    proptest! {
        #[test]
        fn prop_pack_roundtrip(len in 1usize..300, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rand_pm1(&[len], &mut rng);
            let packed = pack(&t).unwrap();
            // padding bits stay zero
            if len % 64 != 0 {
                let last = *packed.words.last().unwrap();
                prop_assert_eq!(last >> (len % 64), 0);
            }
            prop_assert_eq!(unpack(&packed).data, t.data);
        }

        #[test]
        fn prop_ste_identity_inside_unit_range(v in -1.0f32..=1.0) {
            let g = Tensor::from_vec(&[1], vec![v]).unwrap();
            prop_assert_eq!(ste_backward(&g).data[0], v);
        }
    }

    #[test]
    fn binary_conv_window_examples() {
        // all bits equal in an 8-element window -> dot = 8
        let a = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let w = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let y = binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), 1, 0).unwrap();
        assert_eq!(y.data, vec![8.0]);

        // (+1,+1,-1,-1) vs (+1,+1,+1,+1) -> dot = 0
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let w = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), 1, 0).unwrap();
        assert_eq!(y.data, vec![0.0]);

        // five +1 and four -1 in the kernel against all-+1 input -> 1
        let a = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let w = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0],
        )
        .unwrap();
        let y = binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), 1, 0).unwrap();
        let oracle = dense_pm1_conv(&a, &w, 1, 0);
        assert_eq!(y.data, vec![1.0]);
        assert_eq!(y.data, oracle.data);
    }

    #[test]
    fn binary_conv_matches_dense_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(n, c, h, w, o, k) in &[
            (1usize, 1usize, 3usize, 3usize, 1usize, 3usize),
            (2, 3, 8, 8, 4, 3),
            (1, 2, 7, 9, 3, 1),
            (4, 8, 16, 16, 8, 3),
            (2, 4, 10, 6, 5, 2),
        ] {
            for stride in [1, 2] {
                for padding in [0, 1] {
                    if h + 2 * padding < k || (h + 2 * padding - k) % stride != 0 {
                        continue;
                    }
                    if w + 2 * padding < k || (w + 2 * padding - k) % stride != 0 {
                        continue;
                    }
                    let a = rand_pm1(&[n, c, h, w], &mut rng);
                    let wt = rand_pm1(&[o, c, k, k], &mut rng);
                    let got =
                        binary_conv2d(&pack(&a).unwrap(), &pack(&wt).unwrap(), stride, padding)
                            .unwrap();
                    let want = dense_pm1_conv(&a, &wt, stride, padding);
                    assert_eq!(got.dims(), want.dims());
                    assert_eq!(got.data, want.data, "n{n} c{c} h{h} w{w} o{o} k{k} s{stride} p{padding}");
                }
            }
        }
    }

    #[test]
    fn binary_conv_rejects_channel_mismatch() {
        let a = pack(&Tensor::filled(&[1, 2, 4, 4], 1.0)).unwrap();
        let w = pack(&Tensor::filled(&[1, 3, 3, 3], 1.0)).unwrap();
        assert!(binary_conv2d(&a, &w, 1, 0).is_err());
    }

    #[test]
    fn layer_scale_examples() {
        let w = Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap();
        assert_eq!(layer_scale(&w).value, 2.0);

        let w = Tensor::from_vec(&[4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(layer_scale(&w).value, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = {
            let data = (0..50).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            Tensor::from_vec(&[50], data).unwrap()
        };
        let want: f64 = w.data.iter().map(|v| v.abs() as f64).sum::<f64>() / 50.0;
        assert!((layer_scale(&w).value as f64 - want).abs() < 1e-6);

        let z = Tensor::zeros(&[5]);
        let s = layer_scale(&z);
        assert_eq!(s.value, 1e-8);
        assert!(s.degenerate);
    }
}
