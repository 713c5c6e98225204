//! IDX dataset ingestion, augmentation, and deterministic batch iteration.
//!
//! The byte-level IDX parsers are total: any input either yields a dataset or
//! a structured error with the offending byte offset — they are the fuzzing
//! entry points for untrusted files.

use crate::error::{LnsError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, c, h, w]`, normalized per channel.
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.images.dim(1), self.images.dim(2), self.images.dim(3))
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset.checked_add(4).filter(|&e| e <= bytes.len());
    match end {
        Some(e) => Ok(u32::from_be_bytes(bytes[offset..e].try_into().unwrap())),
        None => Err(LnsError::Format {
            format: "idx",
            offset,
            msg: format!("truncated while reading {what}"),
        }),
    }
}

/// Parse raw IDX image bytes: magic 0x00000803, big-endian dims (n, h, w),
/// then n*h*w unsigned bytes. Trailing bytes are rejected.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LnsError::Format {
            format: "idx",
            offset: 0,
            msg: format!("bad image magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_be_u32(bytes, 4, "image count")? as usize;
    let h = read_be_u32(bytes, 8, "rows")? as usize;
    let w = read_be_u32(bytes, 12, "cols")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(LnsError::Format {
            format: "idx",
            offset: 4,
            msg: format!("empty dimension in {n}x{h}x{w}"),
        });
    }
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(LnsError::Format {
            format: "idx",
            offset: 4,
            msg: format!("dimension overflow in {n}x{h}x{w}"),
        })?;
    let avail = bytes.len() - 16.min(bytes.len());
    if bytes.len() < 16 || avail < count {
        return Err(LnsError::Format {
            format: "idx",
            offset: bytes.len(),
            msg: format!("truncated pixel payload: need {count} bytes"),
        });
    }
    if avail > count {
        return Err(LnsError::Format {
            format: "idx",
            offset: 16 + count,
            msg: format!("{} trailing bytes after pixel payload", avail - count),
        });
    }
    Ok((n, h, w, bytes[16..16 + count].to_vec()))
}

/// Parse raw IDX label bytes: magic 0x00000801, big-endian count, then bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LnsError::Format {
            format: "idx",
            offset: 0,
            msg: format!("bad label magic 0x{magic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = read_be_u32(bytes, 4, "label count")? as usize;
    if n == 0 {
        return Err(LnsError::Format { format: "idx", offset: 4, msg: "zero labels".into() });
    }
    let avail = bytes.len() - 8.min(bytes.len());
    if bytes.len() < 8 || avail < n {
        return Err(LnsError::Format {
            format: "idx",
            offset: bytes.len(),
            msg: format!("truncated label payload: need {n} bytes"),
        });
    }
    if avail > n {
        return Err(LnsError::Format {
            format: "idx",
            offset: 8 + n,
            msg: format!("{} trailing bytes after label payload", avail - n),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Load an IDX image/label pair, scale pixels to [0,1], then normalize by the
/// per-channel mean/std (IDX3 images are single-channel).
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    mean: &[f32],
    std: &[f32],
    split: &str,
) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)
        .map_err(|e| LnsError::io(images_path.display().to_string(), e))?;
    let label_bytes = std::fs::read(labels_path)
        .map_err(|e| LnsError::io(labels_path.display().to_string(), e))?;
    let (n, h, w, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(LnsError::InvalidArgument {
            op: "load_idx",
            msg: format!("{n} images but {} labels", labels.len()),
        });
    }
    if mean.len() != 1 || std.len() != 1 {
        return Err(LnsError::InvalidArgument {
            op: "load_idx",
            msg: format!(
                "IDX images are single-channel; got {} mean / {} std entries",
                mean.len(),
                std.len()
            ),
        });
    }
    if std[0] <= 0.0 {
        return Err(LnsError::InvalidArgument { op: "load_idx", msg: "std must be > 0".into() });
    }
    let data = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - mean[0]) / std[0])
        .collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, h, w], data)?,
        labels: labels.into_iter().map(u32::from).collect(),
        split: split.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f32,
}

impl AugmentSpec {
    pub fn is_identity(&self) -> bool {
        self.pad == 0 && self.hflip_prob == 0.0
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(LnsError::InvalidArgument {
                op: "augment",
                msg: format!("hflip_prob {} outside [0,1]", self.hflip_prob),
            });
        }
        if self.crop == 0 || self.crop > h + 2 * self.pad || self.crop > w + 2 * self.pad {
            return Err(LnsError::InvalidArgument {
                op: "augment",
                msg: format!("crop {} incompatible with {h}x{w} pad {}", self.crop, self.pad),
            });
        }
        Ok(())
    }
}

/// Zero-pad, uniform-random crop, then horizontal flip with probability
/// `hflip_prob`. The fill value is 0 in normalized space. Draw order is
/// fixed (y offset, x offset, flip), so results are a pure function of the
/// RNG state.
pub fn augment(image: &Tensor, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if image.shape.rank() != 3 {
        return Err(LnsError::InvalidArgument {
            op: "augment",
            msg: format!("expected [c,h,w], got {}", image.shape),
        });
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    spec.validate(h, w)?;
    let (hp, wp) = (h + 2 * spec.pad, w + 2 * spec.pad);
    let y0 = rng.gen_range(0..=hp - spec.crop);
    let x0 = rng.gen_range(0..=wp - spec.crop);
    let flip = rng.gen::<f32>() < spec.hflip_prob;

    let mut out = Tensor::zeros(&[c, spec.crop, spec.crop]);
    for ci in 0..c {
        for y in 0..spec.crop {
            let src_y = (y0 + y) as isize - spec.pad as isize;
            if src_y < 0 || src_y >= h as isize {
                continue; // zero fill
            }
            for x in 0..spec.crop {
                let src_x = (x0 + x) as isize - spec.pad as isize;
                if src_x < 0 || src_x >= w as isize {
                    continue;
                }
                let dst_x = if flip { spec.crop - 1 - x } else { x };
                out.data[(ci * spec.crop + y) * spec.crop + dst_x] =
                    image.data[(ci * h + src_y as usize) * w + src_x as usize];
            }
        }
    }
    Ok(out)
}

/// Deterministic epoch permutation: Fisher-Yates under the given seed.
pub fn epoch_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Batches of (images, labels) in permuted or original order; the final
/// partial batch is kept.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batch_iter(data: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let order = if shuffle {
        epoch_permutation(data.len(), seed)
    } else {
        (0..data.len()).collect()
    };
    BatchIter { data, order, batch_size, cursor: 0 }
}

impl BatchIter<'_> {
    /// Indices of the next batch without materializing tensors.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let s = &self.order[self.cursor..end];
        self.cursor = end;
        Some(s)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<u32>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;

        let (c, h, w) = self.data.image_dims();
        let plane = c * h * w;
        let mut images = Tensor::zeros(&[idx.len(), c, h, w]);
        let mut labels = Vec::with_capacity(idx.len());
        for (bi, &i) in idx.iter().enumerate() {
            images.data[bi * plane..(bi + 1) * plane]
                .copy_from_slice(&self.data.images.data[i * plane..(i + 1) * plane]);
            labels.push(self.data.labels[i]);
        }
        Some((images, labels))
    }
}
