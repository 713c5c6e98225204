//! Per-layer mapping network predicting binary weights from latent weights.
//!
//! A layer's latent weight tensor `[o, c, k, k]` is treated as a batch of `o`
//! c-channel images. The net is three 3x3 stride-1 pad-1 convolutions with
//! channel widths c -> 2c -> 2c -> c, batch norm + ReLU after the first two,
//! tanh at the end, so predictions live in (-1, 1) and keep the input's
//! spatial extent. Batch norm always uses batch statistics over the filter
//! dimension (the "batch" is the deterministic set of a layer's filters), so
//! the forward is input-independent of any dataset and export stays
//! deterministic.

use crate::error::{LnsError, Result};
use crate::noisy_loss::{NoiseRates, Reduction};
use crate::ops;
use crate::optim::{self, Param, SgdConfig};
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;
use rand::Rng;

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct MappingNet {
    /// Input channel count c of the quantized layer this net serves.
    pub channels: usize,
    pub conv: [Param; 3],
    pub gamma: [Param; 2],
    pub beta: [Param; 2],
}

fn uniform_tensor(dims: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(dims, data).expect("valid dims")
}

impl MappingNet {
    /// Fresh net for a quantized layer with `c` input channels.
    ///
    /// The first two convolutions get fan-in-scaled uniform weights. The last
    /// one starts as a center-tap stencil averaging the hidden channels, plus
    /// small uniform noise, so the initial prediction stays close to a
    /// passthrough of what the hidden layers preserve of the latent weights.
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        let b1 = 1.0 / ((c * 9) as f32).sqrt();
        let b2 = 1.0 / ((2 * c * 9) as f32).sqrt();
        let conv1 = uniform_tensor(&[2 * c, c, 3, 3], b1, rng);
        let conv2 = uniform_tensor(&[2 * c, 2 * c, 3, 3], b2, rng);
        let mut conv3 = uniform_tensor(&[c, 2 * c, 3, 3], 0.01, rng);
        let center_tap = 1.0 / (2 * c) as f32;
        for oi in 0..c {
            for ii in 0..2 * c {
                conv3.data[((oi * 2 * c + ii) * 3 + 1) * 3 + 1] += center_tap;
            }
        }
        MappingNet {
            channels: c,
            conv: [Param::new(conv1), Param::new(conv2), Param::new(conv3)],
            gamma: [Param::new(Tensor::filled(&[2 * c], 1.0)), Param::new(Tensor::filled(&[2 * c], 1.0))],
            beta: [Param::new(Tensor::zeros(&[2 * c])), Param::new(Tensor::zeros(&[2 * c]))],
        }
    }

    fn check_input(&self, latent: &Tensor) -> Result<()> {
        if latent.shape.rank() != 4 || latent.dim(1) != self.channels {
            return Err(LnsError::ShapeMismatch {
                op: "mapping_forward",
                lhs: latent.dims().to_vec(),
                rhs: vec![0, self.channels, 3, 3],
            });
        }
        Ok(())
    }

    /// Forward on the tape. Returns the prediction node and the tape nodes of
    /// every trainable parameter, keyed by the same names `visit_params` uses.
    pub fn forward_tape(
        &self,
        tape: &mut GradTape,
        latent: NodeId,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        self.check_input(tape.value(latent))?;
        let mut params = Vec::new();
        let mut x = latent;
        for i in 0..3 {
            let w = tape.leaf(&self.conv[i].value);
            params.push((format!("conv{i}.w"), w));
            x = tape.conv2d(x, w, 1, 1)?;
            if i < 2 {
                let g = tape.leaf(&self.gamma[i].value);
                let b = tape.leaf(&self.beta[i].value);
                params.push((format!("bn{i}.gamma"), g));
                params.push((format!("bn{i}.beta"), b));
                let (y, _) = tape.batch_norm(x, g, b, BN_EPS)?;
                x = tape.relu(y);
            }
        }
        Ok((tape.tanh(x), params))
    }

    /// Tape-free forward, used by export and evaluation.
    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_input(latent)?;
        let mut x = latent.clone();
        for i in 0..3 {
            x = ops::conv2d(&x, &self.conv[i].value, 1, 1)?;
            if i < 2 {
                let (y, _) =
                    ops::batch_norm_train(&x, &self.gamma[i].value, &self.beta[i].value, BN_EPS)?;
                x = ops::relu(&y);
            }
        }
        Ok(ops::tanh(&x))
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Param)) {
        for i in 0..3 {
            f(&format!("conv{i}.w"), &self.conv[i]);
        }
        for i in 0..2 {
            f(&format!("bn{i}.gamma"), &self.gamma[i]);
            f(&format!("bn{i}.beta"), &self.beta[i]);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for i in 0..3 {
            f(&format!("conv{i}.w"), &mut self.conv[i]);
        }
        for i in 0..2 {
            f(&format!("bn{i}.gamma"), &mut self.gamma[i]);
            f(&format!("bn{i}.beta"), &mut self.beta[i]);
        }
    }
}

/// Train only this net's parameters on the corrected loss against fixed
/// labels; everything else in the surrounding model is untouched by
/// construction. One "epoch" is `steps_per_epoch` full-batch SGD steps, so
/// warm-start epochs line up with data epochs of the enclosing run.
#[allow(clippy::too_many_arguments)]
pub fn warm_start(
    net: &mut MappingNet,
    latent: &Tensor,
    labels: &Tensor,
    rates: NoiseRates,
    reduction: Reduction,
    epochs: usize,
    steps_per_epoch: usize,
    sgd: SgdConfig,
) -> Result<()> {
    for _ in 0..epochs * steps_per_epoch {
        let mut tape = GradTape::new();
        let latent_node = tape.leaf(latent);
        let (pred, param_nodes) = net.forward_tape(&mut tape, latent_node)?;
        let loss = tape.corrected_loss(pred, labels, rates, reduction)?;
        tape.backward(loss)?;
        let grads: std::collections::HashMap<&str, Vec<f32>> = param_nodes
            .iter()
            .map(|(name, id)| (name.as_str(), tape.grad(*id).map(<[f32]>::to_vec).unwrap_or_default()))
            .collect();
        net.visit_params_mut(|name, p| {
            if let Some(g) = grads.get(name) {
                optim::sgd_step(p, g, sgd).expect("grad shape matches param");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_latent(o: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = o * c * k * k;
        let data = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        Tensor::from_vec(&[o, c, k, k], data).unwrap()
    }

    #[test]
    fn forward_preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = MappingNet::init(16, &mut rng);
        assert_eq!(net.conv[0].value.dims(), &[32, 16, 3, 3]);
        assert_eq!(net.conv[1].value.dims(), &[32, 32, 3, 3]);
        assert_eq!(net.conv[2].value.dims(), &[16, 32, 3, 3]);

        let latent = rand_latent(32, 16, 3, &mut rng);
        let q = net.forward(&latent).unwrap();
        assert_eq!(q.dims(), &[32, 16, 3, 3]);
        assert!(q.data.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn forward_handles_1x1_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let net = MappingNet::init(4, &mut rng);
        let latent = rand_latent(8, 4, 1, &mut rng);
        let q = net.forward(&latent).unwrap();
        assert_eq!(q.dims(), &[8, 4, 1, 1]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut net = MappingNet::init(4, &mut rng);
        for c in net.conv.iter_mut() {
            c.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let latent = rand_latent(8, 4, 3, &mut rng);
        let q = net.forward(&latent).unwrap();
        assert!(q.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let net = MappingNet::init(4, &mut rng);
        let latent = rand_latent(8, 3, 3, &mut rng);
        assert!(net.forward(&latent).is_err());
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let net = MappingNet::init(4, &mut rng);
        let latent = rand_latent(6, 4, 3, &mut rng);
        let pure = net.forward(&latent).unwrap();

        let mut tape = GradTape::new();
        let l = tape.leaf(&latent);
        let (pred, _) = net.forward_tape(&mut tape, l).unwrap();
        assert_eq!(tape.value(pred).data, pure.data);
    }

    #[test]
    fn binarized_prediction_gradient_is_identity_in_unit_region() {
        // gradient of sum(sign(pred)) w.r.t. pred is all-ones (|upstream| <= 1)
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let net = MappingNet::init(4, &mut rng);
        let latent = rand_latent(4, 4, 3, &mut rng);
        let mut tape = GradTape::new();
        let l = tape.leaf(&latent);
        let (pred, _) = net.forward_tape(&mut tape, l).unwrap();
        let q = tape.sign_ste(pred, false);
        assert!(tape.value(q).data.iter().all(|&v| v == 1.0 || v == -1.0));
        let loss = tape.sum(q);
        tape.backward(loss).unwrap();
        assert!(tape.grad(pred).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn warm_start_zero_epochs_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut net = MappingNet::init(4, &mut rng);
        let before = net.conv[0].value.data.clone();
        let latent = rand_latent(4, 4, 3, &mut rng);
        let labels = binarize::sign(&latent);
        warm_start(
            &mut net,
            &latent,
            &labels,
            NoiseRates::zero(),
            Reduction::Mean,
            0,
            10,
            SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 },
        )
        .unwrap();
        assert_eq!(net.conv[0].value.data, before);
    }

    #[test]
    fn warm_start_decreases_prediction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut net = MappingNet::init(4, &mut rng);
        let latent = rand_latent(8, 4, 3, &mut rng);
        let labels = binarize::sign(&latent);
        let mse = |net: &MappingNet| -> f64 {
            let q = net.forward(&latent).unwrap();
            q.data
                .iter()
                .zip(&labels.data)
                .map(|(&p, &l)| ((p - l) as f64).powi(2))
                .sum::<f64>()
                / q.numel() as f64
        };
        let before = mse(&net);
        warm_start(
            &mut net,
            &latent,
            &labels,
            NoiseRates::zero(),
            Reduction::Mean,
            2,
            25,
            SgdConfig { lr: 0.2, momentum: 0.9, weight_decay: 0.0 },
        )
        .unwrap();
        let after = mse(&net);
        assert!(after < before, "mse {before} -> {after}");
    }
}
