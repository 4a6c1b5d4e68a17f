//! The full classifier: per-frame extractor → LSTM → temporal attention →
//! attention pooling → dense → softmax.

use crate::error::{Error, Result};
use crate::extractors::{Extractor, ExtractorConfig, ExtractorKind, FrameCache};
use crate::nn::attention::AttentionCache;
use crate::nn::lstm::LstmSequenceCache;
use crate::nn::ops::{cross_entropy_index, softmax_cross_entropy_grad, softmax_slice};
use crate::nn::{
    attention_pool, attention_pool_backward, seeded_rng, Dense, Grads, Lstm, ParamStore, PoolMode, Rng,
    TemporalAttention,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Timesteps per sample.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub extractor: ExtractorConfig,
    pub lstm_hidden: usize,
    pub attn_dim: usize,
    pub pool_mode: PoolMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            frames: 20,
            height: 64,
            width: 64,
            channels: 3,
            extractor: ExtractorConfig::default(),
            lstm_hidden: 64,
            attn_dim: 32,
            pool_mode: PoolMode::WeightedSum,
        }
    }
}

impl ModelConfig {
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Shape of one timestep of model input.
    pub fn step_shape(&self) -> Vec<usize> {
        match self.extractor.kind {
            ExtractorKind::Precomputed => vec![self.extractor.feature_dim],
            _ => self.frame_shape().to_vec(),
        }
    }

    /// Full input shape `(T, ...)`.
    pub fn input_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.frames];
        shape.extend(self.step_shape());
        shape
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("lstm_hidden", self.lstm_hidden),
            ("attn_dim", self.attn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.extractor.kind != ExtractorKind::Precomputed {
            if self.height == 0 || self.width == 0 || self.channels == 0 {
                return Err(Error::Config("height, width and channels must be positive".into()));
            }
            self.extractor.validate(self.frame_shape())?;
        } else {
            self.extractor.validate([1, 1, 1])?;
        }
        Ok(())
    }
}

/// LSTM → attention → pooling → dense → softmax over `(T, D)` features.
#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub lstm: Lstm,
    pub attention: TemporalAttention,
    pub classifier: Dense,
    pub pool_mode: PoolMode,
}

pub struct HeadCache<F: Real> {
    features: Tensor<F>,
    lstm: LstmSequenceCache<F>,
    hidden: Tensor<F>,
    attention: AttentionCache<F>,
    pooled: Tensor<F>,
    pub probs: Vec<F>,
}

impl TemporalHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        feature_dim: usize,
        hidden: usize,
        attn_dim: usize,
        classes: usize,
        pool_mode: PoolMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(store, "lstm", feature_dim, hidden, rng)?,
            attention: TemporalAttention::new(store, "attention", hidden, attn_dim, rng)?,
            classifier: Dense::new(store, "classifier", hidden, classes, rng)?,
            pool_mode,
        })
    }

    pub fn param_count(feature_dim: usize, hidden: usize, attn_dim: usize, classes: usize) -> usize {
        Lstm::param_count(feature_dim, hidden)
            + TemporalAttention::param_count(hidden, attn_dim)
            + Dense::param_count(hidden, classes)
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, features: &Tensor<F>) -> Result<HeadCache<F>> {
        let (hidden, lstm) = self.lstm.sequence(store, features)?;
        let (weights, attention) = self.attention.forward(store, &hidden)?;
        let pooled = attention_pool(&hidden, &weights, self.pool_mode)?;
        let logits = self.classifier.forward(store, &pooled)?;
        let probs = softmax_slice(logits.data());
        Ok(HeadCache { features: features.clone(), lstm, hidden, attention, pooled, probs })
    }

    /// Backward from the softmax cross-entropy loss for `label`; returns
    /// `dL/dfeatures`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &HeadCache<F>,
        label: usize,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_logits = Tensor::from_vec(softmax_cross_entropy_grad(&cache.probs, label));
        self.backward_from_logits(store, cache, &d_logits, grads)
    }

    pub fn backward_from_logits<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &HeadCache<F>,
        d_logits: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_pooled = self.classifier.backward(store, &cache.pooled, d_logits, grads);
        let (mut d_hidden, d_weights) =
            attention_pool_backward(&cache.hidden, &cache.attention.weights, self.pool_mode, &d_pooled)?;
        let d_hidden_attn =
            self.attention.backward(store, &cache.hidden, &cache.attention, &d_weights, grads)?;
        d_hidden.add_assign(&d_hidden_attn)?;
        let _ = &cache.features;
        self.lstm.sequence_backward(store, &cache.lstm, &d_hidden, grads)
    }
}

pub struct ForwardCache<F: Real> {
    frames: Vec<FrameCache<F>>,
    head: HeadCache<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn probs(&self) -> &[F] {
        &self.head.probs
    }

    pub fn attention_weights(&self) -> &Tensor<F> {
        &self.head.attention.weights
    }
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub extractor: Extractor,
    pub head: TemporalHead,
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model. Initialization is a pure function
    /// of `(config, seed)`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        let extractor = Extractor::build(&mut params, &config.extractor, &config.step_shape(), &mut rng)?;
        let head = TemporalHead::new(
            &mut params,
            extractor.output_dim(),
            config.lstm_hidden,
            config.attn_dim,
            config.num_classes,
            config.pool_mode,
            &mut rng,
        )?;
        Ok(Self { config: config.clone(), params, extractor, head })
    }

    /// Builds the architecture for `config` and loads `params` into it.
    pub fn from_params(config: &ModelConfig, params: &ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    /// Same weights at a different precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            extractor: self.extractor.clone(),
            head: self.head.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn extractor_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(crate::extractors::PREFIX))
            .all(|p| !p.trainable)
    }

    pub fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let expected = self.config.input_shape();
        if x.shape() != expected.as_slice() {
            return Err(Error::shape(format!("model expects input {expected:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<ForwardCache<F>> {
        self.check_input(x)?;
        let (features, frames) = self.extractor.forward(&self.params, x)?;
        let head = self.head.forward(&self.params, &features)?;
        Ok(ForwardCache { frames, head })
    }

    /// Class probabilities for one sample.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Vec<F>> {
        Ok(self.forward_cached(x)?.head.probs)
    }

    pub fn loss(&self, x: &Tensor<F>, label: usize) -> Result<F> {
        cross_entropy_index(&self.forward(x)?, label)
    }

    /// Accumulates gradients of the cross-entropy loss into `grads`. The
    /// extractor backward pass is skipped when it is frozen and no input
    /// gradient is requested.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        label: usize,
        grads: &mut Grads<F>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<F>>> {
        let d_features = self.head.backward(&self.params, &cache.head, label, grads)?;
        if !need_input_grad && self.extractor_frozen() {
            return Ok(None);
        }
        self.extractor.backward(&self.params, &cache.frames, &d_features, grads).map(Some)
    }

    /// Forward plus backward for one labelled sample; returns the loss and
    /// the predicted probabilities.
    pub fn accumulate_gradients(&self, x: &Tensor<F>, label: usize, grads: &mut Grads<F>) -> Result<(F, Vec<F>)> {
        if label >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let cache = self.forward_cached(x)?;
        let loss = cross_entropy_index(cache.probs(), label)?;
        self.backward(&cache, label, grads, false)?;
        Ok((loss, cache.head.probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(kind: ExtractorKind) -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            frames: 4,
            height: 8,
            width: 8,
            channels: 1,
            extractor: ExtractorConfig {
                kind,
                conv_filters: vec![2],
                vit_patch: 4,
                vit_dim: 4,
                vit_heads: 2,
                vit_mlp: 8,
                res_channels: 2,
                res_mid: 2,
                eff_channels: 2,
                eff_expand: 2,
                eff_se_reduction: 2,
                feature_dim: 5,
                ..Default::default()
            },
            lstm_hidden: 6,
            attn_dim: 3,
            pool_mode: PoolMode::WeightedSum,
        }
    }

    #[test]
    fn forward_is_a_distribution_for_every_extractor() {
        for kind in [
            ExtractorKind::ConvSmall,
            ExtractorKind::VitToy,
            ExtractorKind::ResnetBlock,
            ExtractorKind::EffnetBlock,
            ExtractorKind::Precomputed,
        ] {
            let config = tiny_config(kind);
            let model = Model::<f64>::new(&config, 3).unwrap();
            let x = Tensor::from_fn(&config.input_shape(), |i| ((i * 7919) % 101) as f64 / 101.0);
            let p = model.forward(&x).unwrap();
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let config = tiny_config(ExtractorKind::ConvSmall);
        let model = Model::<f32>::new(&config, 0).unwrap();
        assert!(model.forward(&Tensor::zeros(&[5, 8, 8, 1])).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let config = tiny_config(ExtractorKind::VitToy);
        let a = Model::<f32>::new(&config, 11).unwrap();
        let b = Model::<f32>::new(&config, 11).unwrap();
        let c = Model::<f32>::new(&config, 12).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
