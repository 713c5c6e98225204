//! Reverse-mode autodiff over a linear tape of recorded operations.
//!
//! Values are immutable once created; each op references earlier node ids
//! only, so replaying the tape in reverse visits every node after all of its
//! consumers. Gradients accumulate additively when a node has several
//! consumers.

use crate::binarize;
use crate::error::{LnsError, Result};
use crate::noisy_loss::{self, NoiseRates, Reduction};
use crate::ops::{self, BnBatchStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Conv2d { x: NodeId, w: NodeId, out: NodeId, stride: usize, padding: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId, out: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, out: NodeId, stats: BnBatchStats },
    Relu { x: NodeId, out: NodeId },
    PRelu { x: NodeId, slope: NodeId, out: NodeId },
    HardTanh { x: NodeId, out: NodeId },
    Tanh { x: NodeId, out: NodeId },
    /// Forward sign(x); backward clips the upstream gradient to [-1, 1].
    SignSte { x: NodeId, out: NodeId },
    /// Identity stand-in for SignSte used by gradient checks, where a true
    /// sign would make finite differences meaningless.
    Identity { x: NodeId, out: NodeId },
    PadConst { x: NodeId, out: NodeId, pad: usize },
    Reshape { x: NodeId, out: NodeId },
    CrossEntropy { logits: NodeId, out: NodeId, softmax: Tensor, labels: Vec<u32> },
    CorrectedLoss {
        pred: NodeId,
        out: NodeId,
        labels: Tensor,
        rates: NoiseRates,
        reduction: Reduction,
    },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, out: NodeId, factor: f32 },
    Sum { x: NodeId, out: NodeId },
}

#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn push_value(&mut self, t: Tensor) -> NodeId {
        self.values.push(t);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Record a leaf (input or parameter). The tape owns a copy.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_value(t.clone())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let out = ops::conv2d(&self.values[x.0], &self.values[w.0], stride, padding)?;
        let out = self.push_value(out);
        self.ops.push(Op::Conv2d { x, w, out, stride, padding });
        Ok(out)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::linear(&self.values[x.0], &self.values[w.0], &self.values[b.0])?;
        let out = self.push_value(out);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    /// Training-mode batch norm; the returned stats are for the caller's
    /// running-average update.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (out, stats) =
            ops::batch_norm_train(&self.values[x.0], &self.values[gamma.0], &self.values[beta.0], eps)?;
        let out = self.push_value(out);
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, stats: stats.clone() });
        Ok((out, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(&self.values[x.0]);
        let out = self.push_value(out);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let out = ops::prelu(&self.values[x.0], &self.values[slope.0])?;
        let out = self.push_value(out);
        self.ops.push(Op::PRelu { x, slope, out });
        Ok(out)
    }

    pub fn hardtanh(&mut self, x: NodeId) -> NodeId {
        let out = ops::hardtanh(&self.values[x.0]);
        let out = self.push_value(out);
        self.ops.push(Op::HardTanh { x, out });
        out
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = ops::tanh(&self.values[x.0]);
        let out = self.push_value(out);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    /// Binarize with straight-through backward. When `surrogate` is set the
    /// forward is the identity instead of sign (for finite-difference
    /// checking only; sign is piecewise constant so FD cannot see through it).
    pub fn sign_ste(&mut self, x: NodeId, surrogate: bool) -> NodeId {
        if surrogate {
            let out = self.push_value(self.values[x.0].clone());
            self.ops.push(Op::Identity { x, out });
            return out;
        }
        let out = binarize::sign(&self.values[x.0]);
        let out = self.push_value(out);
        self.ops.push(Op::SignSte { x, out });
        out
    }

    pub fn pad_const(&mut self, x: NodeId, pad: usize, value: f32) -> Result<NodeId> {
        let out = ops::pad_spatial(&self.values[x.0], pad, value)?;
        let out = self.push_value(out);
        self.ops.push(Op::PadConst { x, out, pad });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let out = self.values[x.0].reshaped(dims)?;
        let out = self.push_value(out);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let (loss, softmax) = ops::cross_entropy(&self.values[logits.0], labels)?;
        let out = self.push_value(Tensor::from_vec(&[1], vec![loss])?);
        self.ops.push(Op::CrossEntropy { logits, out, softmax, labels: labels.to_vec() });
        Ok(out)
    }

    /// Noise-corrected square loss against constant noisy labels.
    pub fn corrected_loss(
        &mut self,
        pred: NodeId,
        labels: &Tensor,
        rates: NoiseRates,
        reduction: Reduction,
    ) -> Result<NodeId> {
        let loss = noisy_loss::layer_loss(&self.values[pred.0], labels, rates, reduction)?;
        let out = self.push_value(Tensor::from_vec(&[1], vec![loss as f32])?);
        self.ops.push(Op::CorrectedLoss {
            pred,
            out,
            labels: labels.clone(),
            rates,
            reduction,
        });
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.dims() != tb.dims() {
            return Err(LnsError::ShapeMismatch {
                op: "add",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = self.push_value(Tensor { shape: ta.shape.clone(), data });
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.dims() != tb.dims() {
            return Err(LnsError::ShapeMismatch {
                op: "mul",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = self.push_value(Tensor { shape: ta.shape.clone(), data });
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let data = self.values[x.0].data.iter().map(|v| v * factor).collect();
        let out = self.push_value(Tensor { shape: self.values[x.0].shape.clone(), data });
        self.ops.push(Op::Scale { x, out, factor });
        out
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.values[x.0].data.iter().map(|&v| v as f64).sum();
        let out = self.push_value(Tensor::from_vec(&[1], vec![s as f32]).unwrap());
        self.ops.push(Op::Sum { x, out });
        out
    }

    fn accumulate(&mut self, id: NodeId, grad: &[f32]) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }

    fn take_grad(&self, id: NodeId) -> Option<Vec<f32>> {
        self.grads[id.0].clone()
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(LnsError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {}", self.values[loss.0].shape),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            // split borrow: read the op, then mutate grads
            let op = &self.ops[i];
            match op {
                Op::Conv2d { x, w, out, stride, padding } => {
                    let (x, w, out, stride, padding) = (*x, *w, *out, *stride, *padding);
                    if let Some(g) = self.take_grad(out) {
                        let gt = Tensor {
                            shape: self.values[out.0].shape.clone(),
                            data: g,
                        };
                        let (dx, dw) = ops::conv2d_backward(
                            &self.values[x.0],
                            &self.values[w.0],
                            &gt,
                            stride,
                            padding,
                        );
                        self.accumulate(x, &dx.data);
                        self.accumulate(w, &dw.data);
                    }
                }
                Op::Linear { x, w, b, out } => {
                    let (x, w, b, out) = (*x, *w, *b, *out);
                    if let Some(g) = self.take_grad(out) {
                        let gt = Tensor { shape: self.values[out.0].shape.clone(), data: g };
                        let (dx, dw, db) =
                            ops::linear_backward(&self.values[x.0], &self.values[w.0], &gt);
                        self.accumulate(x, &dx.data);
                        self.accumulate(w, &dw.data);
                        self.accumulate(b, &db.data);
                    }
                }
                Op::BatchNorm { x, gamma, beta, out, stats } => {
                    let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                    let stats = stats.clone();
                    if let Some(g) = self.take_grad(out) {
                        let gt = Tensor { shape: self.values[out.0].shape.clone(), data: g };
                        let (dx, dgamma, dbeta) = ops::batch_norm_backward(
                            &self.values[x.0],
                            &self.values[gamma.0],
                            &stats,
                            &gt,
                        );
                        self.accumulate(x, &dx.data);
                        self.accumulate(gamma, &dgamma.data);
                        self.accumulate(beta, &dbeta.data);
                    }
                }
                Op::Relu { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        let dx: Vec<f32> = self.values[x.0]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::PRelu { x, slope, out } => {
                    let (x, slope, out) = (*x, *slope, *out);
                    if let Some(g) = self.take_grad(out) {
                        let xt = &self.values[x.0];
                        let c = xt.dim(1);
                        let n = xt.dim(0);
                        let s = xt.numel() / (n * c);
                        let a = &self.values[slope.0].data;
                        let mut dx = vec![0f32; xt.numel()];
                        let mut da = vec![0f32; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * s;
                                for si in 0..s {
                                    let v = xt.data[base + si];
                                    let gg = g[base + si];
                                    if v > 0.0 {
                                        dx[base + si] = gg;
                                    } else if v < 0.0 {
                                        dx[base + si] = a[ci] * gg;
                                        da[ci] += v * gg;
                                    }
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                        self.accumulate(slope, &da);
                    }
                }
                Op::HardTanh { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        let dx: Vec<f32> = self.values[x.0]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gg)| if v > -1.0 && v < 1.0 { gg } else { 0.0 })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Tanh { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        let dx: Vec<f32> = self.values[out.0]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&y, &gg)| gg * (1.0 - y * y))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::SignSte { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        let dx: Vec<f32> = g.iter().map(|&gg| gg.clamp(-1.0, 1.0)).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Identity { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        self.accumulate(x, &g);
                    }
                }
                Op::PadConst { x, out, pad } => {
                    let (x, out, pad) = (*x, *out, *pad);
                    if let Some(g) = self.take_grad(out) {
                        let gt = Tensor { shape: self.values[out.0].shape.clone(), data: g };
                        let xt = &self.values[x.0];
                        let dx = ops::crop_spatial(&gt, pad, xt.dim(2), xt.dim(3));
                        self.accumulate(x, &dx.data);
                    }
                }
                Op::Reshape { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        self.accumulate(x, &g);
                    }
                }
                Op::CrossEntropy { logits, out, softmax, labels } => {
                    let (logits, out) = (*logits, *out);
                    let softmax = softmax.clone();
                    let labels = labels.clone();
                    if let Some(g) = self.take_grad(out) {
                        let dx = ops::cross_entropy_backward(&softmax, &labels, g[0]);
                        self.accumulate(logits, &dx.data);
                    }
                }
                Op::CorrectedLoss { pred, out, labels, rates, reduction } => {
                    let (pred, out, rates, reduction) = (*pred, *out, *rates, *reduction);
                    let labels = labels.clone();
                    if let Some(g) = self.take_grad(out) {
                        let mut dx = noisy_loss::layer_loss_grad(
                            &self.values[pred.0],
                            &labels,
                            rates,
                            reduction,
                        )
                        .expect("validated at record time");
                        for v in dx.data.iter_mut() {
                            *v *= g[0];
                        }
                        self.accumulate(pred, &dx.data);
                    }
                }
                Op::Add { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(g) = self.take_grad(out) {
                        self.accumulate(a, &g);
                        self.accumulate(b, &g);
                    }
                }
                Op::Mul { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(g) = self.take_grad(out) {
                        let da: Vec<f32> =
                            g.iter().zip(&self.values[b.0].data).map(|(&gg, &v)| gg * v).collect();
                        let db: Vec<f32> =
                            g.iter().zip(&self.values[a.0].data).map(|(&gg, &v)| gg * v).collect();
                        self.accumulate(a, &da);
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { x, out, factor } => {
                    let (x, out, factor) = (*x, *out, *factor);
                    if let Some(g) = self.take_grad(out) {
                        let dx: Vec<f32> = g.iter().map(|&gg| gg * factor).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sum { x, out } => {
                    let (x, out) = (*x, *out);
                    if let Some(g) = self.take_grad(out) {
                        let dx = vec![g[0]; self.values[x.0].numel()];
                        self.accumulate(x, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of a node, or None when no gradient flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a tracked node; detached nodes are an error.
    pub fn grad_checked(&self, id: NodeId) -> Result<&[f32]> {
        self.grad(id).ok_or_else(|| LnsError::InvalidArgument {
            op: "grad",
            msg: format!("node {} is detached from the loss", id.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Central finite differences of `f` (an f64 re-evaluation of the loss)
    /// against the analytic gradient, relative tolerance.
    fn fd_check(
        f: &dyn Fn(&[f32]) -> f64,
        x0: &[f32],
        analytic: &[f32],
        eps: f64,
        rel_tol: f64,
    ) {
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            let mut minus = x0.to_vec();
            plus[i] = (plus[i] as f64 + eps) as f32;
            minus[i] = (minus[i] as f64 - eps) as f32;
            let fd = (f(&plus) - f(&minus)) / (plus[i] as f64 - minus[i] as f64);
            let a = analytic[i] as f64;
            let denom = fd.abs().max(a.abs()).max(1e-4);
            assert!(
                ((fd - a) / denom).abs() < rel_tol,
                "component {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = GradTape::new();
        let w = tape.leaf(&Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_squared_norm_is_2w() {
        let mut tape = GradTape::new();
        let vals = vec![1.0f32, -2.0, 3.0, 0.5];
        let w = tape.leaf(&Tensor::from_vec(&[4], vals.clone()).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for (gi, vi) in g.iter().zip(&vals) {
            assert_eq!(*gi, 2.0 * vi);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = GradTape::new();
        let w = tape.leaf(&Tensor::zeros(&[2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn detached_node_grad_is_error() {
        let mut tape = GradTape::new();
        let a = tape.leaf(&Tensor::zeros(&[2]));
        let b = tape.leaf(&Tensor::filled(&[2], 1.0));
        let loss = tape.sum(b);
        tape.backward(loss).unwrap();
        assert!(tape.grad_checked(a).is_err());
        assert!(tape.grad_checked(b).is_ok());
    }

    #[test]
    fn gradient_accumulates_over_multiple_consumers() {
        // loss = sum(w) + sum(w * w): grad = 1 + 2w
        let mut tape = GradTape::new();
        let vals = vec![0.5f32, -1.5];
        let w = tape.leaf(&Tensor::from_vec(&[2], vals.clone()).unwrap());
        let s1 = tape.sum(w);
        let sq = tape.mul(w, w).unwrap();
        let s2 = tape.sum(sq);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for (gi, vi) in g.iter().zip(&vals) {
            assert!((gi - (1.0 + 2.0 * vi)).abs() < 1e-6);
        }
    }

    #[test]
    fn sign_ste_clips_upstream_gradient() {
        // loss = 3 * sum(sign(x)): upstream grad at sign is 3 -> clipped to 1
        let mut tape = GradTape::new();
        let x = tape.leaf(&Tensor::from_vec(&[2], vec![0.4, -0.2]).unwrap());
        let s = tape.sign_ste(x, false);
        assert_eq!(tape.value(s).data, vec![1.0, -1.0]);
        let total = tape.sum(s);
        let loss = tape.scale(total, 3.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let w0 = rand_tensor(&[3, 2, 3, 3], &mut rng);

        let run = |xv: &[f32], wv: &[f32]| -> (f64, Vec<f32>, Vec<f32>) {
            let mut tape = GradTape::new();
            let x = tape.leaf(&Tensor::from_vec(&[1, 2, 4, 4], xv.to_vec()).unwrap());
            let w = tape.leaf(&Tensor::from_vec(&[3, 2, 3, 3], wv.to_vec()).unwrap());
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq);
            let lv = tape.value(loss).data[0] as f64;
            tape.backward(loss).unwrap();
            (lv, tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (_, gx, gw) = run(&x0.data, &w0.data);

        fd_check(&|xv| run(xv, &w0.data).0, &x0.data, &gx, 1e-3, 1e-2);
        fd_check(&|wv| run(&x0.data, wv).0, &w0.data, &gw, 1e-3, 1e-2);
    }

    // The rigorous composed-network gradient check against a 64-bit naive
    // oracle lives in tests/gradients.rs; the f32 forward here is too coarse
    // for finite differences on small components.

    #[test]
    fn corrected_loss_node_backward_matches_analytic() {
        let rates = NoiseRates::new(0.2, 0.1).unwrap();
        let preds = Tensor::from_vec(&[3], vec![0.3, -0.8, 0.1]).unwrap();
        let labels = Tensor::from_vec(&[3], vec![1.0, -1.0, 1.0]).unwrap();
        let mut tape = GradTape::new();
        let p = tape.leaf(&preds);
        let loss = tape.corrected_loss(p, &labels, rates, Reduction::Mean).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        for i in 0..3 {
            let want = noisy_loss::corrected_loss_grad(
                preds.data[i] as f64,
                labels.data[i] as f64,
                rates,
            )
            .unwrap()
                / 3.0;
            assert!((g[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn tanh_and_hardtanh_gradients() {
        let x0 = Tensor::from_vec(&[4], vec![0.3, -1.5, 0.9, 2.0]).unwrap();
        let mut tape = GradTape::new();
        let x = tape.leaf(&x0);
        let t = tape.tanh(x);
        let loss = tape.sum(t);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, &xi) in g.iter().zip(&x0.data) {
            let want = 1.0 - xi.tanh() * xi.tanh();
            assert!((gi - want).abs() < 1e-6);
        }

        let mut tape = GradTape::new();
        let x = tape.leaf(&x0);
        let t = tape.hardtanh(x);
        let loss = tape.sum(t);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
