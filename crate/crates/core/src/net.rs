//! A small fully-connected classifier with normalization layers.
//!
//! Each hidden block computes `a = relu(Norm(x * W) * gamma + beta)`; the
//! head is a plain linear layer with bias. Gradients are derived by hand
//! (no autodiff) and checked against central finite differences in the test
//! suites.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormCache, NormLayer, NormSpec};
use crate::tensor::{matmul, Matrix, Tensor3};

/// Hidden layer: linear product followed by an optional normalization layer
/// and the rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub weight: Matrix,
    pub norm: Option<NormLayer>,
}

/// Two-hidden-layer MLP. The default image-classification configuration is
/// 784 inputs, hidden widths (512, 300) and 10 classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleNet {
    pub input_dim: usize,
    pub blocks: Vec<DenseBlock>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub classes: usize,
}

pub const MNIST_INPUT_DIM: usize = 784;
pub const MNIST_HIDDEN: [usize; 2] = [512, 300];
pub const MNIST_CLASSES: usize = 10;

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_values(fan_in, fan_out, data).expect("sized by construction")
}

impl SimpleNet {
    /// Builds a network with freshly initialized weights. Every hidden block
    /// gets its own normalization layer built from `norm` (or none).
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        norm: Option<NormSpec>,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || classes < 2 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if let Some(spec) = &norm {
            spec.validate()?;
            for &h in hidden {
                if h % spec.g_c != 0 {
                    return Err(Error::Config(format!(
                        "g_c = {} does not divide hidden width {h}",
                        spec.g_c
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            let weight = kaiming_uniform(&mut rng, fan_in, width);
            let norm = norm.map(|spec| NormLayer::new(spec, width));
            blocks.push(DenseBlock { weight, norm });
            fan_in = width;
        }
        let head_weight = kaiming_uniform(&mut rng, fan_in, classes);
        Ok(Self {
            input_dim,
            blocks,
            head_weight,
            head_bias: vec![0.0; classes],
            classes,
        })
    }

    pub fn mnist_default(norm: Option<NormSpec>, seed: u64) -> Result<Self> {
        Self::new(MNIST_INPUT_DIM, &MNIST_HIDDEN, MNIST_CLASSES, norm, seed)
    }

    pub fn set_training(&mut self, training: bool) {
        for block in &mut self.blocks {
            if let Some(norm) = &mut block.norm {
                norm.set_training(training);
            }
        }
    }

    pub fn is_training(&self) -> bool {
        self.blocks
            .iter()
            .filter_map(|b| b.norm.as_ref())
            .all(|n| n.state.training)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass; in training mode the batch-statistics norm layers fold
    /// this batch's statistics into their running EMAs afterwards.
    pub fn forward(&mut self, x: &Matrix) -> Result<(Matrix, ForwardPass)> {
        let (logits, pass) = self.forward_frozen(x)?;
        for (block, cache) in self.blocks.iter_mut().zip(&pass.block_caches) {
            if let (Some(norm), Some(norm_cache)) = (&mut block.norm, &cache.norm_cache) {
                if norm.state.training && norm.spec.kind.tracks_running_stats() {
                    crate::norm::update_running_stats(&norm.spec, &mut norm.state, norm_cache)?;
                }
            }
        }
        Ok((logits, pass))
    }

    /// Forward pass with no state mutation at all (probes, evaluation).
    pub fn forward_frozen(&self, x: &Matrix) -> Result<(Matrix, ForwardPass)> {
        self.check_input(x)?;
        let mut activation = x.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = activation;
            let z = matmul(&input, &block.weight)?;
            let (pre_activation, norm_cache) = match &block.norm {
                Some(norm) => {
                    let zt = Tensor3::from_matrix(z);
                    let (y, cache) = norm.forward_frozen(&zt)?;
                    (y.into_matrix()?, Some(cache))
                }
                None => (z, None),
            };
            let mut act = pre_activation.clone();
            for v in act.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            block_caches.push(BlockCache { input, norm_cache, pre_activation });
            activation = act;
        }
        let mut logits = matmul(&activation, &self.head_weight)?;
        for row in 0..logits.rows() {
            for (j, b) in self.head_bias.iter().enumerate() {
                *logits.at_mut(row, j) += b;
            }
        }
        let pass = ForwardPass { block_caches, head_input: activation, logits: logits.clone() };
        Ok((logits, pass))
    }

    /// Loss of a batch without touching any state.
    pub fn loss_frozen(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward_frozen(x)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        Ok(loss)
    }

    /// Backpropagates `dlogits` through the network.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &Matrix) -> Result<Gradients> {
        let head_weight_grad = matmul(&pass.head_input.transposed(), dlogits)?;
        let mut head_bias_grad = vec![0.0; self.classes];
        for row in 0..dlogits.rows() {
            for j in 0..self.classes {
                head_bias_grad[j] += dlogits.at(row, j);
            }
        }
        let mut upstream = matmul(dlogits, &self.head_weight.transposed())?;
        let mut block_grads = vec![None; self.blocks.len()];
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let cache = &pass.block_caches[i];
            // Rectifier gate on the pre-activation sign.
            let mut dpre = upstream;
            for (g, &pre) in dpre.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let (dz, gamma, beta) = match (&block.norm, &cache.norm_cache) {
                (Some(norm), Some(norm_cache)) => {
                    let (dz, dgamma, dbeta) =
                        norm.backward(norm_cache, &Tensor3::from_matrix(dpre))?;
                    (dz.into_matrix()?, dgamma, dbeta)
                }
                (None, None) => (dpre, Vec::new(), Vec::new()),
                _ => {
                    return Err(Error::CacheMismatch(
                        "forward cache does not match the network's norm layers".into(),
                    ))
                }
            };
            let weight = matmul(&cache.input.transposed(), &dz)?;
            upstream = matmul(&dz, &block.weight.transposed())?;
            block_grads[i] = Some(BlockGrads { weight, gamma, beta });
        }
        Ok(Gradients {
            blocks: block_grads.into_iter().map(|g| g.expect("filled in reverse pass")).collect(),
            head_weight: head_weight_grad,
            head_bias: head_bias_grad,
        })
    }

    /// Training forward + backward on one batch: returns the mean loss and
    /// the parameter gradients.
    pub fn grads(&mut self, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, pass) = self.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let grads = self.backward(&pass, &dlogits)?;
        Ok((loss, grads))
    }

    /// Like [`SimpleNet::grads`] but without mutating running statistics.
    pub fn grads_frozen(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, pass) = self.forward_frozen(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let grads = self.backward(&pass, &dlogits)?;
        Ok((loss, grads))
    }

    /// One plain SGD update: `param -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (block, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            for (w, gw) in block.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *w -= lr * gw;
            }
            if let Some(norm) = &mut block.norm {
                for (p, gp) in norm.state.gamma.iter_mut().zip(&g.gamma) {
                    *p -= lr * gp;
                }
                for (p, gp) in norm.state.beta.iter_mut().zip(&g.beta) {
                    *p -= lr * gp;
                }
            }
        }
        for (w, gw) in self.head_weight.data_mut().iter_mut().zip(grads.head_weight.data()) {
            *w -= lr * gw;
        }
        for (b, gb) in self.head_bias.iter_mut().zip(&grads.head_bias) {
            *b -= lr * gb;
        }
    }

    /// Copies all trainable parameters (weights and affine parameters).
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSnapshot {
                    weight: b.weight.data().to_vec(),
                    affine: b
                        .norm
                        .as_ref()
                        .map(|n| (n.state.gamma.clone(), n.state.beta.clone())),
                })
                .collect(),
            head_weight: self.head_weight.data().to_vec(),
            head_bias: self.head_bias.clone(),
        }
    }

    /// Restores all trainable parameters from a snapshot, bit for bit.
    pub fn restore(&mut self, snap: &ParamSnapshot) {
        for (block, s) in self.blocks.iter_mut().zip(&snap.blocks) {
            block.weight.data_mut().copy_from_slice(&s.weight);
            if let (Some(norm), Some((gamma, beta))) = (&mut block.norm, &s.affine) {
                norm.state.gamma.copy_from_slice(gamma);
                norm.state.beta.copy_from_slice(beta);
            }
        }
        self.head_weight.data_mut().copy_from_slice(&snap.head_weight);
        self.head_bias.copy_from_slice(&snap.head_bias);
    }

    /// Sets every parameter to `snapshot - eta * grad`, leaving all other
    /// state untouched. Applying this with `eta` equal to the learning rate
    /// reproduces [`SimpleNet::sgd_step`] exactly.
    pub fn offset_from(&mut self, snap: &ParamSnapshot, grads: &Gradients, eta: f64) {
        for ((block, s), g) in self.blocks.iter_mut().zip(&snap.blocks).zip(&grads.blocks) {
            for ((w, &sw), gw) in
                block.weight.data_mut().iter_mut().zip(&s.weight).zip(g.weight.data())
            {
                *w = sw - eta * gw;
            }
            if let (Some(norm), Some((gamma, beta))) = (&mut block.norm, &s.affine) {
                for ((p, &sp), gp) in norm.state.gamma.iter_mut().zip(gamma).zip(&g.gamma) {
                    *p = sp - eta * gp;
                }
                for ((p, &sp), gp) in norm.state.beta.iter_mut().zip(beta).zip(&g.beta) {
                    *p = sp - eta * gp;
                }
            }
        }
        for ((w, &sw), gw) in
            self.head_weight.data_mut().iter_mut().zip(&snap.head_weight).zip(grads.head_weight.data())
        {
            *w = sw - eta * gw;
        }
        for ((b, &sb), gb) in self.head_bias.iter_mut().zip(&snap.head_bias).zip(&grads.head_bias) {
            *b = sb - eta * gb;
        }
    }
}

/// Per-block quantities retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Matrix,
    pub norm_cache: Option<NormCache>,
    pub pre_activation: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub block_caches: Vec<BlockCache>,
    pub head_input: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    /// `self += other * scale`, used by the accumulation trainer.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += scale * y;
            }
            for (x, y) in a.gamma.iter_mut().zip(&b.gamma) {
                *x += scale * y;
            }
            for (x, y) in a.beta.iter_mut().zip(&b.beta) {
                *x += scale * y;
            }
        }
        for (x, y) in self.head_weight.data_mut().iter_mut().zip(other.head_weight.data()) {
            *x += scale * y;
        }
        for (x, y) in self.head_bias.iter_mut().zip(&other.head_bias) {
            *x += scale * y;
        }
    }

    pub fn max_abs_difference(&self, other: &Gradients) -> f64 {
        let mut max = 0.0f64;
        let mut upd = |a: &[f64], b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                max = max.max((x - y).abs());
            }
        };
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            upd(a.weight.data(), b.weight.data());
            upd(&a.gamma, &b.gamma);
            upd(&a.beta, &b.beta);
        }
        upd(self.head_weight.data(), other.head_weight.data());
        upd(&self.head_bias, &other.head_bias);
        max
    }
}

/// Snapshot of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    blocks: Vec<BlockSnapshot>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSnapshot {
    weight: Vec<f64>,
    affine: Option<(Vec<f64>, Vec<f64>)>,
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits: `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let batch = logits.rows();
    let mut dlogits = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    for row in 0..batch {
        let label = labels[row];
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let r = logits.row(row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = r.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        loss += log_sum - r[label];
        for j in 0..classes {
            let softmax = (r[j] - log_sum).exp();
            *dlogits.at_mut(row, j) =
                (softmax - if j == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, dlogits))
}

/// Forward/backward over `acc_steps` contiguous sub-batches with the loss of
/// each scaled by `1/acc_steps`, summing the gradients. Each sub-pass's
/// batch-statistics norm layers see only their own `M/acc_steps` samples, so
/// for a BatchNorm network this computes exactly the gradients of a single
/// Ghost pass with `g_m = acc_steps`.
pub fn accumulate_gradients(
    net: &mut SimpleNet,
    x: &Matrix,
    labels: &[usize],
    acc_steps: usize,
) -> Result<(f64, Gradients)> {
    if acc_steps == 0 || x.rows() % acc_steps != 0 {
        return Err(Error::Config(format!(
            "acc_steps = {acc_steps} must divide the batch size {}",
            x.rows()
        )));
    }
    let sub = x.rows() / acc_steps;
    let scale = 1.0 / acc_steps as f64;
    let mut total_loss = 0.0;
    let mut accumulated: Option<Gradients> = None;
    for step in 0..acc_steps {
        let rows: Vec<usize> = (step * sub..(step + 1) * sub).collect();
        let xs = x.gather_rows(&rows);
        let ys = &labels[step * sub..(step + 1) * sub];
        let (loss, grads) = net.grads(&xs, ys)?;
        total_loss += loss * scale;
        match &mut accumulated {
            Some(acc) => acc.add_scaled(&grads, scale),
            None => {
                let mut acc = grads;
                scale_gradients(&mut acc, scale);
                accumulated = Some(acc);
            }
        }
    }
    Ok((total_loss, accumulated.expect("acc_steps >= 1")))
}

fn scale_gradients(grads: &mut Gradients, scale: f64) {
    for g in &mut grads.blocks {
        for v in g.weight.data_mut() {
            *v *= scale;
        }
        for v in g.gamma.iter_mut().chain(g.beta.iter_mut()) {
            *v *= scale;
        }
    }
    for v in grads.head_weight.data_mut() {
        *v *= scale;
    }
    for v in grads.head_bias.iter_mut() {
        *v *= scale;
    }
}

/// Accumulating training step: gradient accumulation followed by one SGD
/// update. With `acc_steps = 1` this is a plain training step.
pub fn train_step_accumulating(
    net: &mut SimpleNet,
    x: &Matrix,
    labels: &[usize],
    acc_steps: usize,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = accumulate_gradients(net, x, labels, acc_steps)?;
    net.sgd_step(&grads, lr);
    Ok(loss)
}

/// Fraction of samples whose argmax prediction matches the label. The net
/// must be in inference mode so that batch-statistics layers normalize with
/// their running statistics.
pub fn evaluate(net: &SimpleNet, images: &Matrix, labels: &[usize]) -> Result<f64> {
    if net.is_training() && net.blocks.iter().any(|b| b.norm.is_some()) {
        return Err(Error::Config("evaluate requires the net in inference mode".into()));
    }
    if images.rows() != labels.len() {
        return Err(Error::Shape("images and labels disagree on sample count".into()));
    }
    if images.rows() == 0 {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 2048;
    let mut correct = 0usize;
    let mut start = 0;
    while start < images.rows() {
        let end = (start + CHUNK).min(images.rows());
        let rows: Vec<usize> = (start..end).collect();
        let chunk = images.gather_rows(&rows);
        let (logits, _) = net.forward_frozen(&chunk)?;
        for (row, &label) in (0..logits.rows()).zip(&labels[start..end]) {
            let r = logits.row(row);
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / images.rows() as f64)
}
