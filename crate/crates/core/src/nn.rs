//! Fully connected ReLU networks.
//!
//! `psi(x) = A_L s(... s(A_1 x + b_1) ...) + b_L` with `s = max(., 0)`.
//! Parameters are stored layer by layer, weights row-major followed by the
//! bias; the flat parameter vector and the gradient share that order.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    pub fn set_weight(&mut self, r: usize, c: usize, value: f64) {
        self.weights[r * self.cols + c] = value;
    }

    pub fn set_bias(&mut self, r: usize, value: f64) {
        self.bias[r] = value;
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn nonzeros(&self) -> usize {
        self.weights.iter().chain(&self.bias).filter(|v| **v != 0.0).count()
    }

    fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// Gaussian weights with standard deviation `sqrt(2 / fan_in)`, zero biases.
    He,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].cols != w[0].rows {
                return Err(Error::DimensionMismatch {
                    expected: w[0].rows,
                    found: w[1].cols,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Network with layer widths `d_0, ..., d_L`.
    pub fn init(widths: &[usize], scheme: WeightInit, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("need at least two positive layer widths"));
        }
        let mut r = rng::seeded(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let weights = match scheme {
                    WeightInit::Zeros => vec![0.0; rows * cols],
                    WeightInit::He => {
                        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
                        (0..rows * cols).map(|_| normal.sample(&mut r)).collect()
                    }
                };
                Dense {
                    rows,
                    cols,
                    weights,
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].cols)
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    /// Number of nonzero weights and biases.
    pub fn size(&self) -> usize {
        self.layers.iter().map(Dense::nonzeros).sum()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_parameters(widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = Self::init(widths, WeightInit::Zeros, 0)?;
        if params.len() != net.param_count() {
            return Err(Error::DimensionMismatch {
                expected: net.param_count(),
                found: params.len(),
            });
        }
        net.set_parameters(params)?;
        Ok(net)
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let out = self.forward_unchecked(x);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(out)
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = relu(*v));
            }
        }
        h
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    /// `second(first(x))`, merging the last affine map of `first` with the
    /// first affine map of `second`.
    pub fn compose(second: &Mlp, first: &Mlp) -> Result<Mlp> {
        if first.output_dim() != second.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: second.input_dim(),
                found: first.output_dim(),
            });
        }
        let a = &first.layers[first.layers.len() - 1];
        let b = &second.layers[0];
        let mut merged = Dense::zeros(b.rows, a.cols);
        for r in 0..b.rows {
            for c in 0..a.cols {
                merged.weights[r * a.cols + c] = (0..b.cols).map(|k| b.weight(r, k) * a.weight(k, c)).sum();
            }
            merged.bias[r] = (0..b.cols).map(|k| b.weight(r, k) * a.bias[k]).sum::<f64>() + b.bias[r];
        }
        let mut layers: Vec<Dense> = first.layers[..first.layers.len() - 1].to_vec();
        layers.push(merged);
        layers.extend_from_slice(&second.layers[1..]);
        Mlp::from_layers(layers)
    }

    /// Gradient of `|psi(x) - y|^2` for one pair, accumulated into `grad`.
    /// Returns the squared error.
    fn accumulate_gradient(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        let last = self.layers.len() - 1;
        // activations[0] = x, activations[i] = post-activation of layer i
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.apply(&activations[i]);
            if i < last {
                activations.push(z.iter().map(|v| relu(*v)).collect());
            }
            pre.push(z);
        }
        let residual: Vec<f64> = pre[last].iter().zip(y).map(|(p, t)| p - t).collect();
        let loss = residual.iter().map(|r| r * r).sum();

        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();
        let mut delta: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            let input = &activations[i];
            let off = offsets[i];
            for r in 0..l.rows {
                let d = delta[r];
                if d != 0.0 {
                    let row = &mut grad[off + r * l.cols..off + (r + 1) * l.cols];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
                grad[off + l.rows * l.cols + r] += d;
            }
            if i > 0 {
                let below = &pre[i - 1];
                delta = (0..l.cols)
                    .map(|c| {
                        // subgradient 0 at the kink
                        if below[c] > 0.0 {
                            (0..l.rows).map(|r| l.weight(r, c) * delta[r]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        loss
    }

    fn check_batch(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                found: ys.len(),
            });
        }
        for (x, y) in xs.iter().zip(ys) {
            self.check_input(x)?;
            if y.len() != self.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.output_dim(),
                    found: y.len(),
                });
            }
        }
        Ok(())
    }

    /// Mean squared loss `(1/N) sum |psi(x_k) - y_k|^2`.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
        self.check_batch(xs, ys)?;
        let errs: Vec<f64> = xs
            .par_iter()
            .zip(ys)
            .map(|(x, y)| {
                self.forward_unchecked(x)
                    .iter()
                    .zip(y)
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .collect();
        Ok(errs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Loss and gradient of the mean squared loss over a batch, flat in
    /// parameter order.
    pub fn backward_gradients(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        self.backward_gradients_with(xs, ys, false)
    }

    /// As [`Mlp::backward_gradients`]; with `parallel` the per-chunk partial
    /// sums are computed on the thread pool and reduced in chunk order.
    pub fn backward_gradients_with(
        &self,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        parallel: bool,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(xs, ys)?;
        let p = self.param_count();
        let chunk = if parallel { 16 } else { xs.len() };
        let work = |(cx, cy): (&[Vec<f64>], &[Vec<f64>])| {
            let mut g = vec![0.0; p];
            let mut loss = 0.0;
            for (x, y) in cx.iter().zip(cy) {
                loss += self.accumulate_gradient(x, y, &mut g);
            }
            (loss, g)
        };
        let parts: Vec<(f64, Vec<f64>)> = if parallel {
            xs.par_chunks(chunk).zip(ys.par_chunks(chunk)).map(work).collect()
        } else {
            vec![work((xs, ys))]
        };
        let n = xs.len() as f64;
        let mut grad = vec![0.0; p];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init: WeightInit,
    pub shuffle: bool,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 500,
            seed: 0,
            init: WeightInit::He,
            shuffle: true,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Full-data loss after each epoch.
    pub epochs: Vec<f64>,
    /// Full-data loss of the initial network.
    pub initial: f64,
}

impl LossTrace {
    pub fn final_loss(&self) -> f64 {
        *self.epochs.last().unwrap_or(&self.initial)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Minimize the mean squared loss starting from `mlp`.
pub fn train(
    mlp: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(Mlp, LossTrace)> {
    config.validate()?;
    let initial = mlp.loss(inputs, targets)?;
    let mut net = mlp.clone();
    let mut params = net.parameters();
    let mut adam = Adam {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut r = rng::seeded(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut r);
        }
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (_, grad) = net.backward_gradients_with(&xs, &ys, config.parallel)?;
            match config.optimizer {
                Optimizer::Sgd => params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= config.learning_rate * g),
                Optimizer::Adam => adam.step(&mut params, &grad, config.learning_rate),
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence(format!("non-finite parameters in epoch {epoch}")));
            }
            net.set_parameters(&params)?;
        }
        let loss = net.loss(inputs, targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss} in epoch {epoch}")));
        }
        trace.push(loss);
    }
    Ok((
        net,
        LossTrace {
            epochs: trace,
            initial,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn identity_net() -> Mlp {
        Mlp::from_layers(vec![
            Dense::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap(),
            Dense::new(1, 2, vec![1.0, -1.0], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    /// Literal evaluation with explicit loops over matrix entries.
    fn interpret(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (k, l) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; l.rows()];
            for i in 0..l.rows() {
                let mut acc = l.bias()[i];
                for j in 0..l.cols() {
                    acc += l.weights()[i * l.cols() + j] * h[j];
                }
                z[i] = if k + 1 < n { acc.max(0.0) } else { acc };
            }
            h = z;
        }
        h
    }

    fn random_net(widths: &[usize], seed: u64) -> Mlp {
        let mut net = Mlp::init(widths, WeightInit::He, seed).unwrap();
        let mut r = rng::seeded(seed + 1000);
        for l in net.layers_mut() {
            for i in 0..l.rows() {
                l.set_bias(i, r.random::<f64>() - 0.5);
            }
        }
        net
    }

    #[test]
    fn relu_identity_trick() {
        let net = identity_net();
        for x in [-3.0, -0.5, 0.0, 0.25, 7.0] {
            assert_eq!(net.forward(&[x]).unwrap(), vec![x]);
        }
        assert_eq!(net.size(), 4);
        assert_eq!(net.depth(), 2);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::init(&[3, 5, 2], WeightInit::Zeros, 0).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.size(), 0);
    }

    #[test]
    fn forward_matches_interpreter() {
        let net = random_net(&[4, 7, 6, 3], 5);
        let mut r = rng::seeded(6);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
            let a = net.forward(&x).unwrap();
            let b = interpret(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-14 * (1.0 + v.abs()));
            }
        }
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn zeroing_a_weight_drops_size_by_one() {
        let mut net = random_net(&[3, 4, 2], 11);
        let before = net.size();
        net.layers_mut()[0].set_weight(1, 2, 0.0);
        assert_eq!(net.size(), before - 1);
    }

    #[test]
    fn composition_size_and_values() {
        for seed in 0..10 {
            let first = random_net(&[3, 5, 4], seed);
            let second = random_net(&[4, 6, 2], seed + 50);
            let comp = Mlp::compose(&second, &first).unwrap();
            assert_eq!(comp.depth(), first.depth() + second.depth() - 1);
            let merge_terms = second.layers()[0].rows() * (first.layers()[1].cols() + 1);
            assert!(comp.size() <= first.size() + second.size() + merge_terms);
            let x = [0.3, -0.7, 0.1];
            let direct = second.forward(&first.forward(&x).unwrap()).unwrap();
            let via = comp.forward(&x).unwrap();
            for (a, b) in direct.iter().zip(&via) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_homogeneity_single_hidden_layer() {
        // biases zero: psi(x) = A2 s(A1 x) scales by c^2 under A_k -> c A_k
        let mut net = random_net(&[3, 5, 2], 3);
        for l in net.layers_mut() {
            for i in 0..l.rows() {
                l.set_bias(i, 0.0);
            }
        }
        let c = 2.0;
        let scaled = Mlp::from_parameters(&net.widths(), &net.parameters().iter().map(|p| c * p).collect::<Vec<_>>()).unwrap();
        let x = [0.5, -1.0, 0.25];
        let a = net.forward(&x).unwrap();
        let b = scaled.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(c * c * u, *v);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = random_net(&[2, 4, 1], 9);
        let xs = vec![vec![0.1, 0.2], vec![-0.3, 0.7]];
        let ys = net.forward_batch(&xs).unwrap();
        let (loss, grad) = net.backward_gradients(&xs, &ys).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_net_gradient_is_least_squares_gradient() {
        let net = Mlp::from_layers(vec![Dense::new(1, 2, vec![0.5, -1.0], vec![0.2]).unwrap()]).unwrap();
        let xs = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]];
        let ys = vec![vec![1.0], vec![0.0], vec![-2.0]];
        let (_, grad) = net.backward_gradients(&xs, &ys).unwrap();
        // d/dW (1/N) sum (W x + b - y)^2 = (2/N) sum r x^T
        let mut oracle = [0.0; 3];
        for (x, y) in xs.iter().zip(&ys) {
            let r = 0.5 * x[0] - x[1] + 0.2 - y[0];
            oracle[0] += 2.0 * r * x[0] / 3.0;
            oracle[1] += 2.0 * r * x[1] / 3.0;
            oracle[2] += 2.0 * r / 3.0;
        }
        for (a, b) in grad.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    pub(crate) fn finite_difference_error(net: &Mlp, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        let (_, grad) = net.backward_gradients(xs, ys).unwrap();
        let params = net.parameters();
        let widths = net.widths();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let plus = Mlp::from_parameters(&widths, &p).unwrap().loss(xs, ys).unwrap();
            p[i] -= 2.0 * h;
            let minus = Mlp::from_parameters(&widths, &p).unwrap().loss(xs, ys).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / scale.max(1e-12));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = random_net(&[3, 6, 5, 2], 21);
        let mut r = rng::seeded(22);
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| r.random::<f64>() - 0.5).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..8).map(|_| (0..2).map(|_| r.random::<f64>()).collect()).collect();
        assert!(finite_difference_error(&net, &xs, &ys) < 1e-5);
    }

    #[test]
    fn parallel_gradient_matches_serial() {
        let net = random_net(&[3, 8, 2], 4);
        let mut r = rng::seeded(5);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..50).map(|_| vec![r.random::<f64>(), 0.0]).collect();
        let (l1, g1) = net.backward_gradients_with(&xs, &ys, false).unwrap();
        let (l2, g2) = net.backward_gradients_with(&xs, &ys, true).unwrap();
        let (l3, g3) = net.backward_gradients_with(&xs, &ys, true).unwrap();
        assert!((l1 - l2).abs() < 1e-13);
        assert_eq!((l2, &g2), (l3, &g3));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn doubling_data() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let xs: Vec<Vec<f64>> = (0..64).map(|i| vec![-1.0 + 2.0 * i as f64 / 63.0]).collect();
        let ys = xs.iter().map(|x| vec![2.0 * x[0]]).collect();
        (xs, ys)
    }

    #[test]
    fn training_fits_a_line() {
        let (xs, ys) = doubling_data();
        let net = Mlp::init(&[1, 8, 1], WeightInit::He, 42).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 2000,
            seed: 42,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&net, &xs, &ys, &config).unwrap();
        assert_eq!(trace.epochs.len(), 2000);
        assert!(trace.final_loss() < 1e-4, "final loss {}", trace.final_loss());
        assert!(trace.final_loss() * 10.0 <= trace.initial);
        assert!((trained.loss(&xs, &ys).unwrap() - trace.final_loss()).abs() < 1e-15);
    }

    #[test]
    fn zero_target_zero_init_stays_zero() {
        let xs = vec![vec![1.0], vec![-1.0]];
        let ys = vec![vec![0.0], vec![0.0]];
        let net = Mlp::init(&[1, 4, 1], WeightInit::Zeros, 0).unwrap();
        let (_, trace) = train(&net, &xs, &ys, &TrainConfig { epochs: 5, ..TrainConfig::default() }).unwrap();
        assert!(trace.epochs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = doubling_data();
        let net = Mlp::init(&[1, 8, 1], WeightInit::He, 1).unwrap();
        for shuffle in [true, false] {
            let config = TrainConfig {
                epochs: 20,
                shuffle,
                optimizer: Optimizer::Sgd,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            };
            let a = train(&net, &xs, &ys, &config).unwrap();
            let b = train(&net, &xs, &ys, &config).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (xs, ys) = doubling_data();
        let net = Mlp::init(&[1, 8, 1], WeightInit::He, 1).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e6,
            epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&net, &xs, &ys, &config), Err(Error::Divergence(_))));
        assert!(train(&net, &xs, &ys, &TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn parameter_roundtrip(seed in 0u64..1000, hidden in 1usize..6) {
            let net = random_net(&[2, hidden, 3], seed);
            let back = Mlp::from_parameters(&net.widths(), &net.parameters()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
