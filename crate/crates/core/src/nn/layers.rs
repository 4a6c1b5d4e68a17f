//! Parameterized layers. Each holds [`ParamId`]s into a shared
//! [`ParamStore`]; weights are never owned by the layer itself.

use crate::error::Result;
use crate::nn::ops::{self, LayerNormCache, Padding};
use crate::nn::params::{Grads, ParamId, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = fan_in_bound(kernel * kernel * c_in);
        let w = store.add_uniform(format!("{name}.w"), &[kernel, kernel, c_in, c_out], bound, rng)?;
        let b = store.add_full(format!("{name}.b"), &[c_out], 0.0)?;
        Ok(Self { w, b, stride, padding })
    }

    pub fn param_count(kernel: usize, c_in: usize, c_out: usize) -> usize {
        kernel * kernel * c_in * c_out + c_out
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::conv2d(x, store.get(self.w), store.get(self.b), self.stride, self.padding)
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let (dw, db) = grads.pair(self.w, self.b);
        ops::conv2d_backward(x, store.get(self.w), dy, self.stride, self.padding, dw, db)
    }
}

/// Fully connected layer `y = W·x + b`, applied row-wise to matrices.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[n_out, n_in], fan_in_bound(n_in), rng)?;
        let b = store.add_full(format!("{name}.b"), &[n_out], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn param_count(n_in: usize, n_out: usize) -> usize {
        n_in * n_out + n_out
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::linear_rows(x, store.get(self.w), store.get(self.b))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Tensor<F> {
        let (dw, db) = grads.pair(self.w, self.b);
        ops::linear_rows_backward(x, store.get(self.w), dy, dw, db)
    }
}

/// Per-channel `k×k` convolution (no bias).
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub padding: Padding,
}

impl DepthwiseConv2d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        kernel: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(
            format!("{name}.w"),
            &[kernel, kernel, channels],
            fan_in_bound(kernel * kernel),
            rng,
        )?;
        Ok(Self { w, padding: Padding::Same })
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::depthwise_conv2d(x, store.get(self.w), 1, self.padding)
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        ops::depthwise_conv2d_backward(x, store.get(self.w), dy, 1, self.padding, grads.slot(self.w))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add_full(format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = store.add_full(format!("{name}.beta"), &[dim], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, LayerNormCache<F>)> {
        ops::layer_norm(x, store.get(self.gamma), store.get(self.beta))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Tensor<F> {
        let (dgamma, dbeta) = grads.pair(self.gamma, self.beta);
        ops::layer_norm_backward(cache, store.get(self.gamma), dy, dgamma, dbeta)
    }
}
