//! Per-frame feature extractors applied with shared weights across time.

pub mod blocks;
pub mod conv_small;
pub mod feat;
pub mod vit;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ops::{self, Padding};
use crate::nn::{time_distributed, time_distributed_backward, Conv2d, Grads, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

pub use blocks::{BottleneckBlock, DepthwiseSeparableConv, MbConvBlock, SqueezeExcitation};
pub use conv_small::ConvSmall;
pub use feat::{load_precomputed, read_feat, write_feat, FeatureSequence};
pub use vit::{patchify, unpatchify, EncoderBlock, MultiHeadSelfAttention, VitToy};

/// Parameter-name prefix shared by every extractor weight.
pub const PREFIX: &str = "extractor";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    ConvSmall,
    VitToy,
    ResnetBlock,
    EffnetBlock,
    Precomputed,
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv_small" => ExtractorKind::ConvSmall,
            "vit_toy" => ExtractorKind::VitToy,
            "resnet_block" => ExtractorKind::ResnetBlock,
            "effnet_block" => ExtractorKind::EffnetBlock,
            "precomputed" => ExtractorKind::Precomputed,
            other => return Err(Error::Config(format!("unknown extractor `{other}`"))),
        })
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::ConvSmall => "conv_small",
            ExtractorKind::VitToy => "vit_toy",
            ExtractorKind::ResnetBlock => "resnet_block",
            ExtractorKind::EffnetBlock => "effnet_block",
            ExtractorKind::Precomputed => "precomputed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Frozen extractor weights are excluded from optimization.
    pub frozen: bool,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub vit_patch: usize,
    pub vit_dim: usize,
    pub vit_heads: usize,
    pub vit_depth: usize,
    pub vit_mlp: usize,
    pub res_channels: usize,
    pub res_mid: usize,
    pub eff_channels: usize,
    pub eff_expand: usize,
    pub eff_kernel: usize,
    pub eff_se_reduction: usize,
    /// Feature width of precomputed inputs.
    pub feature_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::ConvSmall,
            frozen: false,
            conv_filters: vec![8],
            conv_kernel: 3,
            vit_patch: 8,
            vit_dim: 16,
            vit_heads: 2,
            vit_depth: 1,
            vit_mlp: 32,
            res_channels: 8,
            res_mid: 4,
            eff_channels: 8,
            eff_expand: 2,
            eff_kernel: 3,
            eff_se_reduction: 4,
            feature_dim: 128,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self, frame_shape: [usize; 3]) -> Result<()> {
        let [h, w, _] = frame_shape;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExtractorKind::ConvSmall => {
                positive("conv_kernel", self.conv_kernel)?;
                ConvSmall::output_shape(frame_shape, &self.conv_filters)?;
            }
            ExtractorKind::VitToy => {
                positive("vit_patch", self.vit_patch)?;
                positive("vit_dim", self.vit_dim)?;
                positive("vit_heads", self.vit_heads)?;
                positive("vit_depth", self.vit_depth)?;
                positive("vit_mlp", self.vit_mlp)?;
                if h % self.vit_patch != 0 || w % self.vit_patch != 0 {
                    return Err(Error::Config(format!(
                        "image side {h}x{w} not divisible by vit_patch {}",
                        self.vit_patch
                    )));
                }
                if !self.vit_dim.is_multiple_of(self.vit_heads) {
                    return Err(Error::Config(format!(
                        "vit_dim {} not divisible by vit_heads {}",
                        self.vit_dim, self.vit_heads
                    )));
                }
            }
            ExtractorKind::ResnetBlock => {
                positive("res_channels", self.res_channels)?;
                positive("res_mid", self.res_mid)?;
                if h < 2 || w < 2 {
                    return Err(Error::Config("frames must be at least 2x2".into()));
                }
            }
            ExtractorKind::EffnetBlock => {
                positive("eff_channels", self.eff_channels)?;
                positive("eff_expand", self.eff_expand)?;
                positive("eff_kernel", self.eff_kernel)?;
                positive("eff_se_reduction", self.eff_se_reduction)?;
                if !(self.eff_channels * self.eff_expand).is_multiple_of(self.eff_se_reduction) {
                    return Err(Error::Config(format!(
                        "expanded width {} not divisible by eff_se_reduction {}",
                        self.eff_channels * self.eff_expand,
                        self.eff_se_reduction
                    )));
                }
                if h < 2 || w < 2 {
                    return Err(Error::Config("frames must be at least 2x2".into()));
                }
            }
            ExtractorKind::Precomputed => positive("feature_dim", self.feature_dim)?,
        }
        Ok(())
    }

    /// Closed-form parameter count of the extractor for the given frame shape.
    pub fn param_count(&self, frame_shape: [usize; 3]) -> usize {
        let c = frame_shape[2];
        match self.kind {
            ExtractorKind::ConvSmall => ConvSmall::param_count(c, &self.conv_filters, self.conv_kernel),
            ExtractorKind::VitToy => {
                VitToy::param_count(frame_shape, self.vit_patch, self.vit_dim, self.vit_depth, self.vit_mlp)
            }
            ExtractorKind::ResnetBlock => {
                Conv2d::param_count(3, c, self.res_channels)
                    + BottleneckBlock::param_count(self.res_channels, self.res_mid)
            }
            ExtractorKind::EffnetBlock => {
                Conv2d::param_count(3, c, self.eff_channels)
                    + MbConvBlock::param_count(
                        self.eff_channels,
                        self.eff_expand,
                        self.eff_kernel,
                        self.eff_se_reduction,
                    )
            }
            ExtractorKind::Precomputed => 0,
        }
    }
}

type StemOutputCache<F, B> = StemCache<F, <B as ShapePreservingBlock>::Cache<F>>;

/// A `3×3` stem convolution, one residual block, `2×2` max-pool, flatten.
#[derive(Clone, Debug)]
pub struct StemBlockExtractor<B> {
    pub stem: Conv2d,
    pub block: B,
    pub frame_shape: [usize; 3],
    pub pooled_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct StemCache<F, C> {
    x: Tensor<F>,
    stem_pre: Tensor<F>,
    block: C,
    block_out_shape: Vec<usize>,
    argmax: Vec<usize>,
}

pub type ResnetExtractor = StemBlockExtractor<BottleneckBlock>;
pub type EffnetExtractor = StemBlockExtractor<MbConvBlock>;

/// Blocks that map `(H, W, C)` to the same shape.
pub trait ShapePreservingBlock {
    type Cache<F: Real>;

    fn block_forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Self::Cache<F>)>;

    fn block_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &Self::Cache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>>;
}

impl ShapePreservingBlock for BottleneckBlock {
    type Cache<F: Real> = blocks::BottleneckCache<F>;

    fn block_forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Self::Cache<F>)> {
        self.forward(store, x)
    }

    fn block_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &Self::Cache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        self.backward(store, cache, d_out, grads)
    }
}

impl ShapePreservingBlock for MbConvBlock {
    type Cache<F: Real> = blocks::MbConvCache<F>;

    fn block_forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Self::Cache<F>)> {
        self.forward(store, x)
    }

    fn block_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &Self::Cache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        self.backward(store, cache, d_out, grads)
    }
}

impl<B: ShapePreservingBlock> StemBlockExtractor<B> {
    fn with_block<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        frame_shape: [usize; 3],
        channels: usize,
        rng: &mut Rng,
        block: impl FnOnce(&mut ParamStore<F>, &mut Rng) -> Result<B>,
    ) -> Result<Self> {
        let stem = Conv2d::new(store, &format!("{name}.stem"), 3, frame_shape[2], channels, 1, Padding::Same, rng)?;
        let block = block(store, rng)?;
        let pooled_shape = [frame_shape[0] / 2, frame_shape[1] / 2, channels];
        Ok(Self { stem, block, frame_shape, pooled_shape })
    }

    pub fn output_dim(&self) -> usize {
        self.pooled_shape.iter().product()
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, StemOutputCache<F, B>)> {
        x.expect_shape(&self.frame_shape)?;
        let stem_pre = self.stem.forward(store, x)?;
        let stem_act = ops::relu(&stem_pre);
        let (y, block) = self.block.block_forward(store, &stem_act)?;
        let (pooled, argmax) = ops::max_pool2(&y)?;
        let d = pooled.len();
        let cache = StemCache { x: x.clone(), stem_pre, block, block_out_shape: y.shape().to_vec(), argmax };
        Ok((pooled.reshape(&[d])?, cache))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &StemCache<F, B::Cache<F>>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let g = d_out.clone().reshape(&self.pooled_shape)?;
        let d_y = ops::max_pool2_backward(&cache.block_out_shape, &cache.argmax, &g);
        let d_act = self.block.block_backward(store, &cache.block, &d_y, grads)?;
        let d_pre = ops::relu_backward(&cache.stem_pre, &d_act);
        self.stem.backward(store, &cache.x, &d_pre, grads)
    }
}

#[derive(Clone, Debug)]
pub enum Extractor {
    ConvSmall(ConvSmall),
    Vit(VitToy),
    Resnet(ResnetExtractor),
    Effnet(EffnetExtractor),
    /// Inputs are already `(T, D)` feature rows.
    Precomputed { dim: usize },
}

pub enum FrameCache<F: Real> {
    ConvSmall(Vec<conv_small::ConvLayerCache<F>>),
    Vit(vit::VitCache<F>),
    Resnet(StemCache<F, blocks::BottleneckCache<F>>),
    Effnet(StemCache<F, blocks::MbConvCache<F>>),
    Precomputed,
}

impl Extractor {
    /// Registers extractor weights in `store` under [`PREFIX`]. `input_shape`
    /// is the per-timestep shape: `[H, W, C]` for images, `[D]` for
    /// precomputed features.
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        config: &ExtractorConfig,
        input_shape: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let extractor = if config.kind == ExtractorKind::Precomputed {
            if input_shape != [config.feature_dim] {
                return Err(Error::Config(format!(
                    "precomputed extractor expects input ({}), got {input_shape:?}",
                    config.feature_dim
                )));
            }
            Extractor::Precomputed { dim: config.feature_dim }
        } else {
            let frame: [usize; 3] = input_shape
                .try_into()
                .map_err(|_| Error::Config(format!("image extractor expects (H, W, C), got {input_shape:?}")))?;
            config.validate(frame)?;
            match config.kind {
                ExtractorKind::ConvSmall => Extractor::ConvSmall(ConvSmall::new(
                    store,
                    PREFIX,
                    frame,
                    &config.conv_filters,
                    config.conv_kernel,
                    rng,
                )?),
                ExtractorKind::VitToy => Extractor::Vit(VitToy::new(
                    store,
                    PREFIX,
                    frame,
                    config.vit_patch,
                    config.vit_dim,
                    config.vit_heads,
                    config.vit_depth,
                    config.vit_mlp,
                    rng,
                )?),
                ExtractorKind::ResnetBlock => {
                    Extractor::Resnet(StemBlockExtractor::with_block(store, PREFIX, frame, config.res_channels, rng, |s, r| {
                        BottleneckBlock::new(s, &format!("{PREFIX}.bottleneck"), config.res_channels, config.res_mid, r)
                    })?)
                }
                ExtractorKind::EffnetBlock => {
                    Extractor::Effnet(StemBlockExtractor::with_block(store, PREFIX, frame, config.eff_channels, rng, |s, r| {
                        MbConvBlock::new(
                            s,
                            &format!("{PREFIX}.mbconv"),
                            config.eff_channels,
                            config.eff_expand,
                            config.eff_kernel,
                            config.eff_se_reduction,
                            r,
                        )
                    })?)
                }
                ExtractorKind::Precomputed => unreachable!(),
            }
        };
        if config.frozen {
            store.set_trainable_prefix(PREFIX, false);
        }
        Ok(extractor)
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Extractor::ConvSmall(e) => e.output_dim(),
            Extractor::Vit(e) => e.dim,
            Extractor::Resnet(e) => e.output_dim(),
            Extractor::Effnet(e) => e.output_dim(),
            Extractor::Precomputed { dim } => *dim,
        }
    }

    pub fn forward_frame<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, FrameCache<F>)> {
        Ok(match self {
            Extractor::ConvSmall(e) => e.forward(store, x).map(|(y, c)| (y, FrameCache::ConvSmall(c)))?,
            Extractor::Vit(e) => e.forward(store, x).map(|(y, c)| (y, FrameCache::Vit(c)))?,
            Extractor::Resnet(e) => e.forward(store, x).map(|(y, c)| (y, FrameCache::Resnet(c)))?,
            Extractor::Effnet(e) => e.forward(store, x).map(|(y, c)| (y, FrameCache::Effnet(c)))?,
            Extractor::Precomputed { dim } => {
                x.expect_shape(&[*dim])?;
                (x.clone(), FrameCache::Precomputed)
            }
        })
    }

    pub fn backward_frame<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &FrameCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        match (self, cache) {
            (Extractor::ConvSmall(e), FrameCache::ConvSmall(c)) => e.backward(store, c, d_out, grads),
            (Extractor::Vit(e), FrameCache::Vit(c)) => e.backward(store, c, d_out, grads),
            (Extractor::Resnet(e), FrameCache::Resnet(c)) => e.backward(store, c, d_out, grads),
            (Extractor::Effnet(e), FrameCache::Effnet(c)) => e.backward(store, c, d_out, grads),
            (Extractor::Precomputed { .. }, FrameCache::Precomputed) => Ok(d_out.clone()),
            _ => Err(Error::invalid("frame cache does not belong to this extractor")),
        }
    }

    /// Maps a `(T, ...)` input to `(T, D)` features with shared weights.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        seq: &Tensor<F>,
    ) -> Result<(Tensor<F>, Vec<FrameCache<F>>)> {
        time_distributed(seq, |frame| self.forward_frame(store, frame))
    }

    /// Returns `dL/dinput` for the whole sequence.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        caches: &[FrameCache<F>],
        d_features: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        time_distributed_backward(d_features, caches, |cache, dy| self.backward_frame(store, cache, dy, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn kinds_round_trip_through_strings() {
        for kind in [
            ExtractorKind::ConvSmall,
            ExtractorKind::VitToy,
            ExtractorKind::ResnetBlock,
            ExtractorKind::EffnetBlock,
            ExtractorKind::Precomputed,
        ] {
            assert_eq!(kind.to_string().parse::<ExtractorKind>().unwrap(), kind);
        }
        assert!("resnet50".parse::<ExtractorKind>().is_err());
    }

    #[test]
    fn closed_form_counts_match_built_extractors() {
        let frame = [16, 16, 1];
        for kind in [
            ExtractorKind::ConvSmall,
            ExtractorKind::VitToy,
            ExtractorKind::ResnetBlock,
            ExtractorKind::EffnetBlock,
        ] {
            let config = ExtractorConfig { kind, ..Default::default() };
            let mut store = ParamStore::<f32>::new();
            Extractor::build(&mut store, &config, &frame, &mut seeded_rng(0)).unwrap();
            let n: usize = store.iter().map(|p| p.value.len()).sum();
            assert_eq!(n, config.param_count(frame), "{kind}");
        }
    }

    #[test]
    fn frozen_marks_parameters_non_trainable() {
        let config = ExtractorConfig { frozen: true, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        Extractor::build(&mut store, &config, &[8, 8, 1], &mut seeded_rng(0)).unwrap();
        assert!(store.iter().all(|p| !p.trainable));
    }

    #[test]
    fn config_validation() {
        let vit = ExtractorConfig { kind: ExtractorKind::VitToy, vit_patch: 5, ..Default::default() };
        assert!(vit.validate([16, 16, 1]).is_err());
        let vit = ExtractorConfig { kind: ExtractorKind::VitToy, vit_dim: 15, vit_heads: 2, ..Default::default() };
        assert!(vit.validate([16, 16, 1]).is_err());
        let vit = ExtractorConfig { kind: ExtractorKind::VitToy, vit_depth: 0, ..Default::default() };
        assert!(vit.validate([16, 16, 1]).is_err());
    }

    #[test]
    fn precomputed_passes_features_through() {
        let config = ExtractorConfig { kind: ExtractorKind::Precomputed, feature_dim: 3, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let e = Extractor::build(&mut store, &config, &[3], &mut seeded_rng(0)).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        let (y, _) = e.forward(&store, &x).unwrap();
        assert_eq!(y, x);
        assert!(store.is_empty());
    }
}
