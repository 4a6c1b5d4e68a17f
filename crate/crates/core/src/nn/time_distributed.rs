//! Applying one frame-level operation with shared parameters at every
//! timestep: `Y_t = f(X_t)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Runs `f` on each slice along the leading (time) axis and stacks the
/// results. The per-step cache returned by `f` is kept for the backward pass.
pub fn time_distributed<F: Real, C>(
    xs: &Tensor<F>,
    mut f: impl FnMut(&Tensor<F>) -> Result<(Tensor<F>, C)>,
) -> Result<(Tensor<F>, Vec<C>)> {
    if xs.rank() < 2 {
        return Err(Error::shape(format!("time_distributed needs (T, ...), got {:?}", xs.shape())));
    }
    let t_len = xs.dim(0);
    let mut outs = Vec::with_capacity(t_len);
    let mut caches = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (y, cache) = f(&xs.index_axis0(t))?;
        outs.push(y);
        caches.push(cache);
    }
    Ok((Tensor::stack(&outs)?, caches))
}

/// Forward only, for operations that need no cache.
pub fn time_distributed_map<F: Real>(
    xs: &Tensor<F>,
    mut f: impl FnMut(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    Ok(time_distributed(xs, |x| f(x).map(|y| (y, ())))?.0)
}

/// Backward of [`time_distributed`]. `b(cache_t, dY_t)` must accumulate the
/// shared parameter gradients and return `dX_t`; contributions from all
/// timesteps therefore sum into the same gradient buffers.
pub fn time_distributed_backward<F: Real, C>(
    dys: &Tensor<F>,
    caches: &[C],
    mut b: impl FnMut(&C, &Tensor<F>) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    if dys.dim(0) != caches.len() {
        return Err(Error::shape(format!(
            "time_distributed_backward: {} gradients for {} steps",
            dys.dim(0),
            caches.len()
        )));
    }
    let dxs = caches
        .iter()
        .enumerate()
        .map(|(t, cache)| b(cache, &dys.index_axis0(t)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&dxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::relu;

    #[test]
    fn identity_and_relu() {
        let xs = Tensor::new(vec![2, 1], vec![-1.0, 2.0]).unwrap();
        assert_eq!(time_distributed_map(&xs, |x| Ok(x.clone())).unwrap(), xs);
        let y = time_distributed_map(&xs, |x| Ok(relu(x))).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn rejects_rank_one() {
        assert!(time_distributed_map(&Tensor::from_vec(vec![1.0f32]), |x| Ok(x.clone())).is_err());
    }
}
