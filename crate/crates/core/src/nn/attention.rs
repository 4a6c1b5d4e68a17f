//! Temporal attention over LSTM outputs and the attention-weighted pooling
//! that collapses a `(T, d)` sequence into one `d`-vector.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::layers::Dense;
use crate::nn::ops::{self, softmax_backward_slice, softmax_slice};
use crate::nn::params::{Grads, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

/// Per-timestep importance weights
/// `A = softmax_t(W_a · ReLU(W_h·H_t + b_h) + b_a)`.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    /// `W_h` `(d_a, d)` and `b_h` `(d_a)`.
    pub hidden: Dense,
    /// `W_a` `(1, d_a)` and scalar `b_a`.
    pub score: Dense,
    pub input_dim: usize,
    pub attn_dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    pre: Tensor<F>,
    act: Tensor<F>,
    pub weights: Tensor<F>,
}

impl TemporalAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        attn_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = Dense::new(store, &format!("{name}.hidden"), input_dim, attn_dim, rng)?;
        let score = Dense::new(store, &format!("{name}.score"), attn_dim, 1, rng)?;
        Ok(Self { hidden, score, input_dim, attn_dim })
    }

    pub fn param_count(input_dim: usize, attn_dim: usize) -> usize {
        Dense::param_count(input_dim, attn_dim) + Dense::param_count(attn_dim, 1)
    }

    /// Pre-softmax score per timestep.
    pub fn scores<F: Real>(&self, store: &ParamStore<F>, h: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.scores_with_cache(store, h)?.0)
    }

    fn scores_with_cache<F: Real>(
        &self,
        store: &ParamStore<F>,
        h: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        if h.rank() != 2 || h.dim(1) != self.input_dim {
            return Err(Error::shape(format!(
                "attention expects (T, {}), got {:?}",
                self.input_dim,
                h.shape()
            )));
        }
        let pre = self.hidden.forward(store, h)?;
        let act = ops::relu(&pre);
        let scores = self.score.forward(store, &act)?;
        let t_len = h.dim(0);
        Ok((scores.reshape(&[t_len])?, pre, act))
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        h: &Tensor<F>,
    ) -> Result<(Tensor<F>, AttentionCache<F>)> {
        let (scores, pre, act) = self.scores_with_cache(store, h)?;
        let weights = Tensor::from_vec(softmax_slice(scores.data()));
        Ok((weights.clone(), AttentionCache { pre, act, weights }))
    }

    /// Given `dL/dA`, accumulates parameter gradients and returns `dL/dH`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        h: &Tensor<F>,
        cache: &AttentionCache<F>,
        d_weights: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let t_len = h.dim(0);
        d_weights.expect_shape(&[t_len])?;
        let d_scores = softmax_backward_slice(cache.weights.data(), d_weights.data());
        let d_scores = Tensor::new(vec![t_len, 1], d_scores)?;
        let d_act = self.score.backward(store, &cache.act, &d_scores, grads);
        let d_pre = ops::relu_backward(&cache.pre, &d_act);
        Ok(self.hidden.backward(store, h, &d_pre, grads))
    }
}

/// How attention weights are combined with the timestep features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolMode {
    /// `Σ_t A_t·H_t`
    #[default]
    WeightedSum,
    /// `(1/T)·Σ_t A_t·H_t`
    MeanOfAttended,
}

impl PoolMode {
    fn scale<F: Real>(self, t_len: usize) -> F {
        match self {
            PoolMode::WeightedSum => F::one(),
            PoolMode::MeanOfAttended => F::one() / F::lit(t_len as f64),
        }
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_sum" => Ok(PoolMode::WeightedSum),
            "mean_of_attended" => Ok(PoolMode::MeanOfAttended),
            other => Err(Error::invalid(format!("unknown pool mode `{other}`"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::WeightedSum => "weighted_sum",
            PoolMode::MeanOfAttended => "mean_of_attended",
        })
    }
}

pub fn attention_pool<F: Real>(h: &Tensor<F>, weights: &Tensor<F>, mode: PoolMode) -> Result<Tensor<F>> {
    if h.rank() != 2 || weights.shape() != [h.dim(0)] {
        return Err(Error::shape(format!(
            "attention_pool: features {:?} vs weights {:?}",
            h.shape(),
            weights.shape()
        )));
    }
    let (t_len, d) = (h.dim(0), h.dim(1));
    let scale: F = mode.scale(t_len);
    let mut out = vec![F::zero(); d];
    for t in 0..t_len {
        crate::tensor::axpy(weights.data()[t] * scale, h.row(t), &mut out);
    }
    Tensor::new(vec![d], out)
}

/// Returns `(dL/dH, dL/dA)`.
pub fn attention_pool_backward<F: Real>(
    h: &Tensor<F>,
    weights: &Tensor<F>,
    mode: PoolMode,
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (t_len, d) = (h.dim(0), h.dim(1));
    d_out.expect_shape(&[d])?;
    let scale: F = mode.scale(t_len);
    let mut dh = Vec::with_capacity(t_len * d);
    let mut dw = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let a = weights.data()[t] * scale;
        dh.extend(d_out.data().iter().map(|&g| a * g));
        dw.push(scale * crate::tensor::dot(h.row(t), d_out.data()));
    }
    Ok((Tensor::new(vec![t_len, d], dh)?, Tensor::from_vec(dw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::seeded_rng;

    fn attention(d: usize, da: usize, seed: u64) -> (ParamStore<f64>, TemporalAttention) {
        let mut store = ParamStore::new();
        let attn = TemporalAttention::new(&mut store, "attn", d, da, &mut seeded_rng(seed)).unwrap();
        (store, attn)
    }

    #[test]
    fn zero_hidden_weights_give_uniform_attention() {
        let (mut store, attn) = attention(4, 3, 1);
        store.get_mut(attn.hidden.w).fill(0.0);
        store.get_mut(attn.score.b).fill(2.5);
        let h = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.37).sin());
        let (a, _) = attn.forward(&store, &h).unwrap();
        for &w in a.data() {
            assert_eq!(w, 0.2);
        }
    }

    #[test]
    fn single_timestep_has_weight_one() {
        let (store, attn) = attention(4, 3, 2);
        let (a, _) = attn.forward(&store, &Tensor::from_fn(&[1, 4], |i| i as f64)).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn pool_examples() {
        let h = Tensor::<f64>::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let uniform = Tensor::full(&[3], 1.0 / 3.0);
        let out = attention_pool(&h, &uniform, PoolMode::WeightedSum).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12 && (out.data()[1] - 5.0).abs() < 1e-12);

        let one_hot = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        assert_eq!(attention_pool(&h, &one_hot, PoolMode::WeightedSum).unwrap().data(), &[3.0, 4.0]);

        let a = Tensor::from_vec(vec![0.2, 0.5, 0.3]);
        let ws = attention_pool(&h, &a, PoolMode::WeightedSum).unwrap();
        let mean = attention_pool(&h, &a, PoolMode::MeanOfAttended).unwrap();
        for (w, m) in ws.data().iter().zip(mean.data()) {
            assert!((w / 3.0 - m).abs() < 1e-15);
        }
        assert!(attention_pool(&h, &Tensor::full(&[2], 0.5), PoolMode::WeightedSum).is_err());
    }

    #[test]
    fn pool_mode_parses() {
        assert_eq!("mean_of_attended".parse::<PoolMode>().unwrap(), PoolMode::MeanOfAttended);
        assert_eq!(PoolMode::WeightedSum.to_string().parse::<PoolMode>().unwrap(), PoolMode::WeightedSum);
        assert!("max".parse::<PoolMode>().is_err());
    }
}
