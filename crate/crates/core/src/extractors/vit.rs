//! Small vision transformer: patch embedding, learned positional encodings,
//! pre-norm encoder blocks and a mean-over-tokens readout.

use crate::error::{Error, Result};
use crate::nn::ops::{self, softmax_backward_slice, softmax_slice, LayerNormCache};
use crate::nn::{Dense, Grads, LayerNorm, ParamId, ParamStore, Rng};
use crate::tensor::{dot, Real, Tensor};

/// Splits an `(H, W, C)` image into non-overlapping `p×p` patches in
/// row-major patch order; each patch is flattened row-major to `p·p·C`.
pub fn patchify<F: Real>(x: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("patchify expects (H, W, C), got {:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..p {
                let start = ((py * p + dy) * w + px * p) * c;
                out.extend_from_slice(&x.data()[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Real>(patches: &Tensor<F>, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor<F>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::invalid(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    patches.expect_shape(&[(h / p) * (w / p), p * p * c])?;
    let pw = w / p;
    let mut out = vec![F::zero(); h * w * c];
    for (n, patch) in patches.data().chunks(p * p * c).enumerate() {
        let (py, px) = (n / pw, n % pw);
        for dy in 0..p {
            let start = ((py * p + dy) * w + px * p) * c;
            out[start..start + p * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Scaled dot-product self-attention with `heads` parallel heads.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MhsaCache<F> {
    x: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// Attention matrices, one `N×N` row-major block per head.
    pub weights: Vec<Vec<F>>,
    concat: Tensor<F>,
}

impl MultiHeadSelfAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("embedding dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Dense::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Dense::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Dense::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Dense::new(store, &format!("{name}.output"), dim, dim, rng)?,
            dim,
            heads,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Dense::param_count(dim, dim)
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, MhsaCache<F>)> {
        if x.rank() != 2 || x.dim(1) != self.dim {
            return Err(Error::shape(format!("attention expects (N, {}), got {:?}", self.dim, x.shape())));
        }
        let n = x.dim(0);
        let d = self.dim;
        let dk = d / self.heads;
        let scale = F::one() / F::lit(dk as f64).sqrt();
        let q = self.query.forward(store, x)?;
        let k = self.key.forward(store, x)?;
        let v = self.value.forward(store, x)?;
        let mut concat = vec![F::zero(); n * d];
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = head * dk..(head + 1) * dk;
            let mut attn = Vec::with_capacity(n * n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let scores: Vec<F> = (0..n).map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
                let row = softmax_slice(&scores);
                let out = &mut concat[i * d + head * dk..i * d + (head + 1) * dk];
                for (j, &a) in row.iter().enumerate() {
                    crate::tensor::axpy(a, &v.row(j)[cols.clone()], out);
                }
                attn.extend(row);
            }
            weights.push(attn);
        }
        let concat = Tensor::new(vec![n, d], concat)?;
        let out = self.output.forward(store, &concat)?;
        Ok((out, MhsaCache { x: x.clone(), q, k, v, weights, concat }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &MhsaCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let n = cache.x.dim(0);
        let d = self.dim;
        let dk = d / self.heads;
        let scale = F::one() / F::lit(dk as f64).sqrt();
        let d_concat = self.output.backward(store, &cache.concat, d_out, grads);
        let mut dq = vec![F::zero(); n * d];
        let mut dk_all = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        for head in 0..self.heads {
            let off = head * dk;
            let attn = &cache.weights[head];
            for i in 0..n {
                let go = &d_concat.row(i)[off..off + dk];
                let arow = &attn[i * n..(i + 1) * n];
                let d_attn: Vec<F> = (0..n).map(|j| dot(go, &cache.v.row(j)[off..off + dk])).collect();
                for (j, &a) in arow.iter().enumerate() {
                    crate::tensor::axpy(a, go, &mut dv[j * d + off..j * d + off + dk]);
                }
                let d_scores = softmax_backward_slice(arow, &d_attn);
                let qi = &cache.q.row(i)[off..off + dk];
                for (j, &ds) in d_scores.iter().enumerate() {
                    let ds = ds * scale;
                    crate::tensor::axpy(ds, &cache.k.row(j)[off..off + dk], &mut dq[i * d + off..i * d + off + dk]);
                    crate::tensor::axpy(ds, qi, &mut dk_all[j * d + off..j * d + off + dk]);
                }
            }
        }
        let to_t = |v: Vec<F>| Tensor::new(vec![n, d], v);
        let mut dx = self.query.backward(store, &cache.x, &to_t(dq)?, grads);
        dx.add_assign(&self.key.backward(store, &cache.x, &to_t(dk_all)?, grads))?;
        dx.add_assign(&self.value.backward(store, &cache.x, &to_t(dv)?, grads))?;
        Ok(dx)
    }
}

/// Pre-norm transformer encoder block:
/// `x₂ = x + MHSA(LN₁(x))`, `out = x₂ + W₂·relu(W₁·LN₂(x₂))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    ln1: LayerNormCache<F>,
    pub attention: MhsaCache<F>,
    ln2: LayerNormCache<F>,
    y2: Tensor<F>,
    f1: Tensor<F>,
    r1: Tensor<F>,
}

impl EncoderBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attention: MultiHeadSelfAttention::new(store, &format!("{name}.attention"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ff1: Dense::new(store, &format!("{name}.ff1"), dim, mlp_dim, rng)?,
            ff2: Dense::new(store, &format!("{name}.ff2"), mlp_dim, dim, rng)?,
        })
    }

    pub fn param_count(dim: usize, mlp_dim: usize) -> usize {
        2 * 2 * dim
            + MultiHeadSelfAttention::param_count(dim)
            + Dense::param_count(dim, mlp_dim)
            + Dense::param_count(mlp_dim, dim)
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, EncoderCache<F>)> {
        let (y1, ln1) = self.norm1.forward(store, x)?;
        let (a, attention) = self.attention.forward(store, &y1)?;
        let mut x2 = x.clone();
        x2.add_assign(&a)?;
        let (y2, ln2) = self.norm2.forward(store, &x2)?;
        let f1 = self.ff1.forward(store, &y2)?;
        let r1 = ops::relu(&f1);
        let f2 = self.ff2.forward(store, &r1)?;
        x2.add_assign(&f2)?;
        Ok((x2, EncoderCache { ln1, attention, ln2, y2, f1, r1 }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &EncoderCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let d_r1 = self.ff2.backward(store, &cache.r1, d_out, grads);
        let d_f1 = ops::relu_backward(&cache.f1, &d_r1);
        let d_y2 = self.ff1.backward(store, &cache.y2, &d_f1, grads);
        let mut d_x2 = self.norm2.backward(store, &cache.ln2, &d_y2, grads);
        d_x2.add_assign(d_out)?;
        let d_y1 = self.attention.backward(store, &cache.attention, &d_x2, grads)?;
        let mut d_x = self.norm1.backward(store, &cache.ln1, &d_y1, grads);
        d_x.add_assign(&d_x2)?;
        Ok(d_x)
    }
}

#[derive(Clone, Debug)]
pub struct VitToy {
    pub patch: usize,
    pub embed: Dense,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
    pub frame_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct VitCache<F> {
    patches: Tensor<F>,
    pub blocks: Vec<EncoderCache<F>>,
}

impl VitToy {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        frame_shape: [usize; 3],
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let [h, w, c] = frame_shape;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch size {patch}")));
        }
        if depth == 0 {
            return Err(Error::Config("vit depth must be at least 1".into()));
        }
        let tokens = (h / patch) * (w / patch);
        let embed = Dense::new(store, &format!("{name}.embed"), patch * patch * c, dim, rng)?;
        let positions = store.add_uniform(format!("{name}.positions"), &[tokens, dim], 0.02, rng)?;
        let blocks = (0..depth)
            .map(|l| EncoderBlock::new(store, &format!("{name}.block{l}"), dim, heads, mlp_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { patch, embed, positions, blocks, dim, frame_shape })
    }

    pub fn param_count(frame_shape: [usize; 3], patch: usize, dim: usize, depth: usize, mlp_dim: usize) -> usize {
        let [h, w, c] = frame_shape;
        let tokens = (h / patch) * (w / patch);
        Dense::param_count(patch * patch * c, dim) + tokens * dim + depth * EncoderBlock::param_count(dim, mlp_dim)
    }

    /// Returns the `(d)` feature vector for one frame.
    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, VitCache<F>)> {
        x.expect_shape(&self.frame_shape)?;
        let patches = patchify(x, self.patch)?;
        let mut hidden = self.embed.forward(store, &patches)?;
        hidden.add_assign(store.get(self.positions))?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(store, &hidden)?;
            hidden = next;
            caches.push(cache);
        }
        let n = hidden.dim(0);
        let inv = F::one() / F::lit(n as f64);
        let mut pooled = vec![F::zero(); self.dim];
        for t in 0..n {
            crate::tensor::axpy(inv, hidden.row(t), &mut pooled);
        }
        Ok((Tensor::from_vec(pooled), VitCache { patches, blocks: caches }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &VitCache<F>,
        d_out: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let n = cache.patches.dim(0);
        let inv = F::one() / F::lit(n as f64);
        let mut d_hidden = Tensor::from_fn(&[n, self.dim], |i| d_out.data()[i % self.dim] * inv);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d_hidden = block.backward(store, bc, &d_hidden, grads)?;
        }
        grads.get_mut(self.positions).add_assign(&d_hidden)?;
        let d_patches = self.embed.backward(store, &cache.patches, &d_hidden, grads);
        let [h, w, c] = self.frame_shape;
        unpatchify(&d_patches, self.patch, h, w, c)
    }
}
