//! Convolutional building blocks: residual bottleneck, depthwise separable
//! convolution, squeeze-and-excitation and the inverted residual (MBConv)
//! block that combines them.

use crate::error::{Error, Result};
use crate::nn::ops::{self, sigmoid, Padding};
use crate::nn::{Conv2d, Dense, DepthwiseConv2d, Grads, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

fn add<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// `out = relu(F(x) + x)` with `F = conv1×1 → relu → conv3×3 → relu → conv1×1`.
#[derive(Clone, Debug)]
pub struct BottleneckBlock {
    pub reduce: Conv2d,
    pub spatial: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
    pub mid: usize,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<F> {
    x: Tensor<F>,
    z1: Tensor<F>,
    r1: Tensor<F>,
    z2: Tensor<F>,
    r2: Tensor<F>,
    sum: Tensor<F>,
}

impl BottleneckBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        mid: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), 1, channels, mid, 1, Padding::Same, rng)?,
            spatial: Conv2d::new(store, &format!("{name}.spatial"), 3, mid, mid, 1, Padding::Same, rng)?,
            expand: Conv2d::new(store, &format!("{name}.expand"), 1, mid, channels, 1, Padding::Same, rng)?,
            channels,
            mid,
        })
    }

    pub fn param_count(channels: usize, mid: usize) -> usize {
        Conv2d::param_count(1, channels, mid) + Conv2d::param_count(3, mid, mid) + Conv2d::param_count(1, mid, channels)
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, BottleneckCache<F>)> {
        let z1 = self.reduce.forward(store, x)?;
        let r1 = ops::relu(&z1);
        let z2 = self.spatial.forward(store, &r1)?;
        let r2 = ops::relu(&z2);
        let branch = self.expand.forward(store, &r2)?;
        if branch.shape() != x.shape() {
            return Err(Error::shape(format!(
                "bottleneck residual branch {:?} does not match input {:?}",
                branch.shape(),
                x.shape()
            )));
        }
        let sum = add(&branch, x)?;
        let out = ops::relu(&sum);
        Ok((out, BottleneckCache { x: x.clone(), z1, r1, z2, r2, sum }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &BottleneckCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_sum = ops::relu_backward(&cache.sum, d_out);
        let d_r2 = self.expand.backward(store, &cache.r2, &d_sum, grads)?;
        let d_z2 = ops::relu_backward(&cache.z2, &d_r2);
        let d_r1 = self.spatial.backward(store, &cache.r1, &d_z2, grads)?;
        let d_z1 = ops::relu_backward(&cache.z1, &d_r1);
        let d_x = self.reduce.backward(store, &cache.x, &d_z1, grads)?;
        add(&d_x, &d_sum)
    }
}

/// Depthwise `k×k` convolution followed by a `1×1` pointwise convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparableConv {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DepthwiseSeparableCache<F> {
    x: Tensor<F>,
    mid: Tensor<F>,
}

impl DepthwiseSeparableConv {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv2d::new(store, &format!("{name}.depthwise"), kernel, c_in, rng)?,
            pointwise: Conv2d::new(store, &format!("{name}.pointwise"), 1, c_in, c_out, 1, Padding::Same, rng)?,
        })
    }

    /// `C·k² + C·C_out + C_out` (the pointwise conv carries the only bias).
    pub fn param_count(kernel: usize, c_in: usize, c_out: usize) -> usize {
        c_in * kernel * kernel + Conv2d::param_count(1, c_in, c_out)
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, DepthwiseSeparableCache<F>)> {
        let mid = self.depthwise.forward(store, x)?;
        let out = self.pointwise.forward(store, &mid)?;
        Ok((out, DepthwiseSeparableCache { x: x.clone(), mid }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &DepthwiseSeparableCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_mid = self.pointwise.backward(store, &cache.mid, d_out, grads)?;
        self.depthwise.backward(store, &cache.x, &d_mid, grads)
    }
}

/// Channel gating `out_{hwc} = s_c · x_{hwc}` with
/// `s = σ(fc2(relu(fc1(mean_{hw} x))))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub squeeze: Dense,
    pub excite: Dense,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct SqueezeExcitationCache<F> {
    x: Tensor<F>,
    pooled: Tensor<F>,
    z1: Tensor<F>,
    r1: Tensor<F>,
    pub gates: Vec<F>,
}

impl SqueezeExcitation {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(format!(
                "squeeze-excitation: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let reduced = channels / reduction;
        Ok(Self {
            squeeze: Dense::new(store, &format!("{name}.squeeze"), channels, reduced, rng)?,
            excite: Dense::new(store, &format!("{name}.excite"), reduced, channels, rng)?,
            channels,
        })
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let reduced = channels / reduction;
        Dense::param_count(channels, reduced) + Dense::param_count(reduced, channels)
    }

    /// Per-channel spatial mean of an `(H, W, C)` tensor.
    pub fn pool<F: Real>(x: &Tensor<F>) -> Tensor<F> {
        let c = x.dim(2);
        let hw = F::lit((x.dim(0) * x.dim(1)) as f64);
        let mut sums = vec![F::zero(); c];
        for px in x.data().chunks(c) {
            crate::tensor::add_into(&mut sums, px);
        }
        Tensor::from_vec(sums.into_iter().map(|s| s / hw).collect())
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, SqueezeExcitationCache<F>)> {
        if x.rank() != 3 || x.dim(2) != self.channels {
            return Err(Error::shape(format!(
                "squeeze-excitation expects (H, W, {}), got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let pooled = Self::pool(x);
        let z1 = self.squeeze.forward(store, &pooled)?;
        let r1 = ops::relu(&z1);
        let z2 = self.excite.forward(store, &r1)?;
        let gates: Vec<F> = z2.data().iter().map(|&v| sigmoid(v)).collect();
        let mut out = x.clone();
        for px in out.data_mut().chunks_mut(self.channels) {
            for (v, &s) in px.iter_mut().zip(&gates) {
                *v = *v * s;
            }
        }
        Ok((out, SqueezeExcitationCache { x: x.clone(), pooled, z1, r1, gates }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &SqueezeExcitationCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let c = self.channels;
        let mut d_gates = vec![F::zero(); c];
        for (px, g) in cache.x.data().chunks(c).zip(d_out.data().chunks(c)) {
            for ch in 0..c {
                d_gates[ch] = d_gates[ch] + px[ch] * g[ch];
            }
        }
        let d_z2: Vec<F> = d_gates
            .iter()
            .zip(&cache.gates)
            .map(|(&g, &s)| g * s * (F::one() - s))
            .collect();
        let d_r1 = self.excite.backward(store, &cache.r1, &Tensor::from_vec(d_z2), grads);
        let d_z1 = ops::relu_backward(&cache.z1, &d_r1);
        let d_pooled = self.squeeze.backward(store, &cache.pooled, &d_z1, grads);
        let hw = F::lit((cache.x.dim(0) * cache.x.dim(1)) as f64);
        let mut dx = d_out.clone();
        for px in dx.data_mut().chunks_mut(c) {
            for ((v, &g), &dp) in px.iter_mut().zip(&cache.gates).zip(d_pooled.data()) {
                *v = *v * g + dp / hw;
            }
        }
        Ok(dx)
    }
}

/// Inverted residual: `x + project(SE(relu(depthwise(relu(expand(x))))))`.
#[derive(Clone, Debug)]
pub struct MbConvBlock {
    pub expand: Conv2d,
    pub depthwise: DepthwiseConv2d,
    pub se: SqueezeExcitation,
    pub project: Conv2d,
}

#[derive(Clone, Debug)]
pub struct MbConvCache<F> {
    x: Tensor<F>,
    z1: Tensor<F>,
    r1: Tensor<F>,
    z2: Tensor<F>,
    se: SqueezeExcitationCache<F>,
    gated: Tensor<F>,
}

impl MbConvBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        expand_ratio: usize,
        kernel: usize,
        se_reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let wide = channels * expand_ratio;
        Ok(Self {
            expand: Conv2d::new(store, &format!("{name}.expand"), 1, channels, wide, 1, Padding::Same, rng)?,
            depthwise: DepthwiseConv2d::new(store, &format!("{name}.depthwise"), kernel, wide, rng)?,
            se: SqueezeExcitation::new(store, &format!("{name}.se"), wide, se_reduction, rng)?,
            project: Conv2d::new(store, &format!("{name}.project"), 1, wide, channels, 1, Padding::Same, rng)?,
        })
    }

    pub fn param_count(channels: usize, expand_ratio: usize, kernel: usize, se_reduction: usize) -> usize {
        let wide = channels * expand_ratio;
        Conv2d::param_count(1, channels, wide)
            + wide * kernel * kernel
            + SqueezeExcitation::param_count(wide, se_reduction)
            + Conv2d::param_count(1, wide, channels)
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, MbConvCache<F>)> {
        let z1 = self.expand.forward(store, x)?;
        let r1 = ops::relu(&z1);
        let z2 = self.depthwise.forward(store, &r1)?;
        let r2 = ops::relu(&z2);
        let (gated, se) = self.se.forward(store, &r2)?;
        let branch = self.project.forward(store, &gated)?;
        let out = add(&branch, x)?;
        Ok((out, MbConvCache { x: x.clone(), z1, r1, z2, se, gated }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &MbConvCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_gated = self.project.backward(store, &cache.gated, d_out, grads)?;
        let d_r2 = self.se.backward(store, &cache.se, &d_gated, grads)?;
        let d_z2 = ops::relu_backward(&cache.z2, &d_r2);
        let d_r1 = self.depthwise.backward(store, &cache.r1, &d_z2, grads)?;
        let d_z1 = ops::relu_backward(&cache.z1, &d_r1);
        let d_x = self.expand.backward(store, &cache.x, &d_z1, grads)?;
        add(&d_x, d_out)
    }
}
