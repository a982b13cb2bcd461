use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BlockId, Matrix, ParamStore, Role};
use crate::error::{Error, Result};

/// Sigmoid outputs are kept this far away from 0 and 1.
pub const SIGMOID_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Softplus,
    Relu,
    /// Row-wise softmax.
    Softmax,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softmax of one row, shifted by the row max.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl Activation {
    pub fn apply(self, pre: &Matrix) -> Matrix {
        let mut out = pre.clone();
        match self {
            Activation::Identity => {}
            Activation::Sigmoid => out.as_mut_slice().iter_mut().for_each(|x| *x = sigmoid(*x)),
            Activation::Softplus => out.as_mut_slice().iter_mut().for_each(|x| *x = softplus(*x)),
            Activation::Relu => out.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Softmax => {
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
            }
        }
        out
    }

    /// Maps `∂L/∂out` to `∂L/∂pre`.
    fn backprop(self, pre: &Matrix, out: &Matrix, upstream: &Matrix) -> Matrix {
        let mut d = upstream.clone();
        match self {
            Activation::Identity => {}
            Activation::Sigmoid => {
                for (g, &y) in d.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *g *= y * (1.0 - y);
                }
            }
            Activation::Softplus => {
                for (g, &z) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= sigmoid_unclamped(z);
                }
            }
            Activation::Relu => {
                for (g, &z) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Softmax => {
                for r in 0..d.rows() {
                    let y = out.row(r);
                    let dot: f64 = y.iter().zip(upstream.row(r)).map(|(a, b)| a * b).sum();
                    for (g, &yj) in d.row_mut(r).iter_mut().zip(y) {
                        *g = yj * (*g - dot);
                    }
                }
            }
        }
        d
    }
}

#[inline]
fn sigmoid_unclamped(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `activation(x·W + b)` whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: BlockId,
    pub bias: BlockId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Activations retained by [`DenseLayer::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    weights: BlockId,
    pub input: Matrix,
    pub pre: Matrix,
    pub out: Matrix,
}

impl DenseLayer {
    /// Registers weights (Glorot uniform) and a zero bias in `store`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weights = store.add_glorot(format!("{name}.w"), role, in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.b"), role, 1, out_dim);
        Self {
            weights,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    fn pre_activation(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim {
            return Err(Error::dim("dense layer input", self.in_dim, input.cols()));
        }
        let mut pre = input.matmul(store.value(self.weights))?;
        pre.add_row_broadcast(store.value(self.bias).as_slice())?;
        Ok(pre)
    }

    /// Inference-only forward pass; one output row per input row.
    pub fn forward(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        Ok(self.activation.apply(&self.pre_activation(store, input)?))
    }

    pub fn forward_cached(&self, store: &ParamStore, input: &Matrix) -> Result<DenseCache> {
        let pre = self.pre_activation(store, input)?;
        let out = self.activation.apply(&pre);
        Ok(DenseCache {
            weights: self.weights,
            input: input.clone(),
            pre,
            out,
        })
    }

    /// Accumulates `∂L/∂W` and `∂L/∂b` and returns `∂L/∂input`.
    pub fn backward(&self, store: &mut ParamStore, cache: &DenseCache, upstream: &Matrix) -> Result<Matrix> {
        if cache.weights != self.weights {
            return Err(Error::InvalidInput(
                "backward called with a cache recorded by a different layer".into(),
            ));
        }
        if upstream.shape() != cache.out.shape() {
            return Err(Error::dim("dense backward upstream", cache.out.len(), upstream.len()));
        }
        let d_pre = self.activation.backprop(&cache.pre, &cache.out, upstream);
        cache.input.matmul_tn_into(&d_pre, store.grad_mut(self.weights))?;
        d_pre.sum_rows_into(store.grad_mut(self.bias).as_mut_slice());
        d_pre.matmul_nt(store.value(self.weights))
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Two dense layers: ReLU hidden layer followed by an output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub hidden: DenseCache,
    pub output: DenseCache,
}

impl MlpCache {
    pub fn out(&self) -> &Matrix {
        &self.output.out
    }

    /// Pushes the ReLU on/off pattern of the hidden layer.
    pub fn push_pattern(&self, pattern: &mut Vec<bool>) {
        pattern.extend(self.hidden.pre.as_slice().iter().map(|&z| z > 0.0));
    }
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let hidden = DenseLayer::new(
            store,
            &format!("{name}.hidden"),
            role,
            in_dim,
            hidden_dim,
            Activation::Relu,
            rng,
        );
        let output = DenseLayer::new(
            store,
            &format!("{name}.out"),
            role,
            hidden_dim,
            out_dim,
            output_activation,
            rng,
        );
        Self { hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        let h = self.hidden.forward(store, input)?;
        self.output.forward(store, &h)
    }

    pub fn forward_cached(&self, store: &ParamStore, input: &Matrix) -> Result<MlpCache> {
        let hidden = self.hidden.forward_cached(store, input)?;
        let output = self.output.forward_cached(store, &hidden.out)?;
        Ok(MlpCache { hidden, output })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &MlpCache, upstream: &Matrix) -> Result<Matrix> {
        let d_hidden = self.output.backward(store, &cache.output, upstream)?;
        self.hidden.backward(store, &cache.hidden, &d_hidden)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }
}
