//! Stateless kernels with their backward passes.
//!
//! Image tensors are `(H, W, C)`, convolution kernels `(kh, kw, C_in, C_out)`,
//! dense weights `(out, in)`.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matmul, matmul_at_acc, Real, Tensor};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding so that the output has `ceil(H / stride)` rows; at
    /// stride 1 the spatial size is preserved.
    Same,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(Error::invalid(format!("unknown padding `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

fn axis_geom(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!("kernel {k} larger than input {n} with valid padding")));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

fn conv_geom(x: &[usize], kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<ConvGeom> {
    if x.len() != 3 {
        return Err(Error::shape(format!("expected (H, W, C) input, got {x:?}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let (oh, pad_top) = axis_geom(x[0], kh, stride, padding)?;
    let (ow, pad_left) = axis_geom(x[1], kw, stride, padding)?;
    Ok(ConvGeom { h: x[0], w: x[1], cin: x[2], kh, kw, stride, pad_top, pad_left, oh, ow })
}

impl ConvGeom {
    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }
}

fn check_conv_weights<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if w.rank() != 4 {
        return Err(Error::shape(format!("conv kernel must be (kh, kw, C_in, C_out), got {:?}", w.shape())));
    }
    let (kh, kw, cin, cout) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if x.rank() != 3 || x.dim(2) != cin {
        return Err(Error::shape(format!(
            "conv input {:?} does not match kernel C_in {cin}",
            x.shape()
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(format!("conv bias {:?} does not match C_out {cout}", b.shape())));
    }
    Ok((kh, kw, cout))
}

/// Cross-correlation `F = X ⋆ W + b`.
pub fn conv2d<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    let (kh, kw, cout) = check_conv_weights(x, w, b)?;
    let g = conv_geom(x.shape(), kh, kw, stride, padding)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![F::zero(); g.oh * g.ow * cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * cout..(oy * g.ow + ox + 1) * cout];
            o.copy_from_slice(b.data());
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let px = &xd[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv != F::zero() {
                            axpy(xv, &wd[wbase + ci * cout..wbase + (ci + 1) * cout], o);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, cout], out)
}

/// Gradients of [`conv2d`]. Kernel and bias gradients are accumulated into
/// `dw` / `db`; the input gradient is returned.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    padding: Padding,
    dw: &mut [F],
    db: &mut [F],
) -> Result<Tensor<F>> {
    let (kh, kw, cout) = (w.dim(0), w.dim(1), w.dim(3));
    let g = conv_geom(x.shape(), kh, kw, stride, padding)?;
    dy.expect_shape(&[g.oh, g.ow, cout])?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![F::zero(); xd.len()];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &dyd[(oy * g.ow + ox) * cout..(oy * g.ow + ox + 1) * cout];
            crate::tensor::add_into(db, go);
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let pbase = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.kw + kx) * g.cin * cout;
                    for ci in 0..g.cin {
                        let wrow = wbase + ci * cout..wbase + (ci + 1) * cout;
                        dx[pbase + ci] = dx[pbase + ci] + dot(&wd[wrow.clone()], go);
                        axpy(xd[pbase + ci], go, &mut dw[wrow]);
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Per-channel convolution with a `(k, k, C)` kernel and no bias.
pub fn depthwise_conv2d<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    if w.rank() != 3 || x.rank() != 3 || w.dim(2) != x.dim(2) {
        return Err(Error::shape(format!(
            "depthwise kernel {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let g = conv_geom(x.shape(), w.dim(0), w.dim(1), stride, padding)?;
    let c = g.cin;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![F::zero(); g.oh * g.ow * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let px = &xd[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                    let wk = &wd[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                    for ((ov, &xv), &wv) in o.iter_mut().zip(px).zip(wk) {
                        *ov = *ov + xv * wv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    padding: Padding,
    dw: &mut [F],
) -> Result<Tensor<F>> {
    let g = conv_geom(x.shape(), w.dim(0), w.dim(1), stride, padding)?;
    let c = g.cin;
    dy.expect_shape(&[g.oh, g.ow, c])?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![F::zero(); xd.len()];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &dyd[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let pbase = (iy * g.w + ix) * c;
                    let wbase = (ky * g.kw + kx) * c;
                    for ch in 0..c {
                        dx[pbase + ch] = dx[pbase + ch] + wd[wbase + ch] * go[ch];
                        dw[wbase + ch] = dw[wbase + ch] + xd[pbase + ch] * go[ch];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// Passes `dy` where the forward input was strictly positive; the
/// subgradient at exactly zero is zero.
pub fn relu_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > F::zero() { g } else { F::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output, the flat input index that won.
pub fn max_pool2<F: Real>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    if x.rank() != 3 || x.dim(0) < 2 || x.dim(1) < 2 {
        return Err(Error::shape(format!("max_pool2 needs (H>=2, W>=2, C), got {:?}", x.shape())));
    }
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = ((2 * oy) * w + 2 * ox) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

pub fn max_pool2_backward<F: Real>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

fn check_dense<F: Real>(n: usize, w: &Tensor<F>, b: &Tensor<F>) -> Result<usize> {
    if w.rank() != 2 || w.dim(1) != n {
        return Err(Error::shape(format!("dense weight {:?} does not accept input width {n}", w.shape())));
    }
    let m = w.dim(0);
    if b.shape() != [m] {
        return Err(Error::shape(format!("dense bias {:?} does not match output width {m}", b.shape())));
    }
    Ok(m)
}

/// `Z = W·X + b` for a single vector.
pub fn dense<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 1 {
        return Err(Error::shape(format!("dense expects a vector, got {:?}", x.shape())));
    }
    linear_rows(x, w, b).map(|y| y.reshape(&[w.dim(0)]).expect("vector"))
}

/// Applies `y = W·x + b` to every row of an `(N, n)` matrix (or a single
/// vector), giving `(N, m)`.
pub fn linear_rows<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let n = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / n;
    let m = check_dense(n, w, b)?;
    let mut out = crate::tensor::matmul_bt(x.data(), w.data(), rows, n, m);
    for row in out.chunks_mut(m) {
        crate::tensor::add_into(row, b.data());
    }
    let shape = if x.rank() == 1 { vec![m] } else { vec![rows, m] };
    Tensor::new(shape, out)
}

/// Backward of [`linear_rows`]; accumulates into `dw` / `db`, returns `dx`.
pub fn linear_rows_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    dw: &mut [F],
    db: &mut [F],
) -> Tensor<F> {
    let (m, n) = (w.dim(0), w.dim(1));
    let rows = x.len() / n;
    matmul_at_acc(dy.data(), x.data(), rows, m, n, dw);
    for row in dy.data().chunks(m) {
        crate::tensor::add_into(db, row);
    }
    let dx = matmul(dy.data(), w.data(), rows, m, n);
    Tensor::new(x.shape().to_vec(), dx).expect("shape preserved")
}

/// Numerically stable softmax over a slice.
pub fn softmax_slice<F: Real>(z: &[F]) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax<F: Real>(z: &Tensor<F>) -> Result<Tensor<F>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    Tensor::new(z.shape().to_vec(), softmax_slice(z.data()))
}

/// Given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward_slice<F: Real>(p: &[F], dp: &[F]) -> Vec<F> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - inner)).collect()
}

/// `−Σ y_i · ln(max(p_i, ε))` against a (possibly soft) target distribution.
pub fn cross_entropy<F: Real>(p: &Tensor<F>, y: &Tensor<F>) -> Result<F> {
    if p.len() != y.len() {
        return Err(Error::shape(format!(
            "cross_entropy: {} probabilities vs {} targets",
            p.len(),
            y.len()
        )));
    }
    let eps = F::lit(CE_EPSILON);
    Ok(-p
        .data()
        .iter()
        .zip(y.data())
        .fold(F::zero(), |acc, (&pi, &yi)| acc + yi * pi.max(eps).ln()))
}

/// Cross-entropy for an integer class label.
pub fn cross_entropy_index<F: Real>(p: &[F], label: usize) -> Result<F> {
    let pl = p
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", p.len())))?;
    Ok(-pl.max(F::lit(CE_EPSILON)).ln())
}

pub fn one_hot<F: Real>(label: usize, classes: usize) -> Tensor<F> {
    Tensor::from_fn(&[classes], |i| if i == label { F::one() } else { F::zero() })
}

/// Gradient of `cross_entropy(softmax(z), y)` with respect to the logits.
pub fn softmax_cross_entropy_grad<F: Real>(p: &[F], label: usize) -> Vec<F> {
    p.iter()
        .enumerate()
        .map(|(i, &pi)| if i == label { pi - F::one() } else { pi })
        .collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization cache.
#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Normalizes each row of an `(N, d)` matrix then applies `gamma`, `beta`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!("layer_norm affine params must be ({d})")));
    }
    let df = F::lit(d as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / d);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * is;
            xhat.push(xh);
            out.push(gamma.data()[j] * xh + beta.data()[j]);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Tensor<F> {
    let d = gamma.len();
    let df = F::lit(d as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for (r, (gy, xh)) in dy.data().chunks(d).zip(cache.xhat.chunks(d)).enumerate() {
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        let mut dxhat = Vec::with_capacity(d);
        for j in 0..d {
            dgamma[j] = dgamma[j] + gy[j] * xh[j];
            dbeta[j] = dbeta[j] + gy[j];
            let g = gy[j] * gamma.data()[j];
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xh[j];
            dxhat.push(g);
        }
        let is = cache.inv_std[r];
        for j in 0..d {
            dx.push(is * (dxhat[j] - sum_g / df - xh[j] * sum_gx / df));
        }
    }
    Tensor::new(dy.shape().to_vec(), dx).expect("shape preserved")
}
