use crate::error::{Error, Result};
use crate::nn::ops::{self, Padding};
use crate::nn::{Conv2d, Grads, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

/// `{conv → relu → 2×2 max-pool} × depth`, then flatten.
#[derive(Clone, Debug)]
pub struct ConvSmall {
    pub layers: Vec<Conv2d>,
    pub frame_shape: [usize; 3],
    /// `(h, w, c)` after the last pooling stage.
    pub out_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct ConvLayerCache<F> {
    input: Tensor<F>,
    pre: Tensor<F>,
    argmax: Vec<usize>,
}

impl ConvSmall {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        frame_shape: [usize; 3],
        filters: &[usize],
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out_shape = Self::output_shape(frame_shape, filters)?;
        let mut c_in = frame_shape[2];
        let mut layers = Vec::with_capacity(filters.len());
        for (i, &c_out) in filters.iter().enumerate() {
            layers.push(Conv2d::new(store, &format!("{name}.conv{i}"), kernel, c_in, c_out, 1, Padding::Same, rng)?);
            c_in = c_out;
        }
        Ok(Self { layers, frame_shape, out_shape })
    }

    pub fn output_shape(frame_shape: [usize; 3], filters: &[usize]) -> Result<[usize; 3]> {
        if filters.is_empty() || filters.contains(&0) {
            return Err(Error::Config("conv_filters must list at least one positive width".into()));
        }
        let [mut h, mut w, _] = frame_shape;
        for _ in filters {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "frame {frame_shape:?} too small for {} pooling stages",
                    filters.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok([h, w, *filters.last().expect("non-empty")])
    }

    pub fn output_dim(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn param_count(channels: usize, filters: &[usize], kernel: usize) -> usize {
        let mut c_in = channels;
        filters
            .iter()
            .map(|&c_out| {
                let n = Conv2d::param_count(kernel, c_in, c_out);
                c_in = c_out;
                n
            })
            .sum()
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Vec<ConvLayerCache<F>>)> {
        x.expect_shape(&self.frame_shape)?;
        let mut a = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre = layer.forward(store, &a)?;
            let (pooled, argmax) = ops::max_pool2(&ops::relu(&pre))?;
            caches.push(ConvLayerCache { input: a, pre, argmax });
            a = pooled;
        }
        let d = a.len();
        Ok((a.reshape(&[d])?, caches))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        caches: &[ConvLayerCache<F>],
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let mut g = d_out.clone().reshape(&self.out_shape)?;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let d_relu = ops::max_pool2_backward(cache.pre.shape(), &cache.argmax, &g);
            let d_pre = ops::relu_backward(&cache.pre, &d_relu);
            g = layer.backward(store, &cache.input, &d_pre, grads)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn zero_frames_give_zero_features() {
        let mut store = ParamStore::<f32>::new();
        let net = ConvSmall::new(&mut store, "c", [8, 8, 1], &[4, 4], 3, &mut seeded_rng(0)).unwrap();
        let (f, _) = net.forward(&store, &Tensor::zeros(&[8, 8, 1])).unwrap();
        assert_eq!(f.shape(), &[2 * 2 * 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_arithmetic() {
        let mut store = ParamStore::<f32>::new();
        let net = ConvSmall::new(&mut store, "c", [16, 16, 1], &[8], 3, &mut seeded_rng(0)).unwrap();
        assert_eq!(net.output_dim(), 8 * 8 * 8);
        assert!(ConvSmall::output_shape([2, 2, 1], &[4, 4]).is_err());
        assert!(ConvSmall::output_shape([8, 8, 1], &[]).is_err());
    }
}
