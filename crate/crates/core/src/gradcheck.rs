//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each [`GradCase`] wraps a scalar loss of `(params, input)` and its
//! analytic gradient. Layers with tensor outputs are reduced to a scalar with
//! a fixed random projection `L = Σ r ⊙ y`, so `dL/dy = r`.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::extractors::{
    BottleneckBlock, DepthwiseSeparableConv, EncoderBlock, Extractor, ExtractorKind, MbConvBlock,
    MultiHeadSelfAttention, SqueezeExcitation, VitToy,
};
use crate::model::{Model, ModelConfig, TemporalHead};
use crate::nn::ops::{self, cross_entropy_index, Padding};
use crate::nn::{
    attention_pool, attention_pool_backward, seeded_rng, time_distributed, time_distributed_backward, Conv2d,
    Dense, Grads, Lstm, LstmState, ParamStore, PoolMode, Rng, TemporalAttention,
};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Lower bound on the relative-error denominator, per unit of loss
/// magnitude. Central differences at `h = 1e-6` carry rounding noise of
/// roughly `1e-10·|L|`, so gradients below the floor compare on an absolute
/// scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

type LossFn = Box<dyn Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<f64>>;
type GradFn = Box<dyn Fn(&ParamStore<f64>, &Tensor<f64>, &mut Grads<f64>) -> Result<Tensor<f64>>>;

pub struct GradCase {
    pub name: String,
    pub params: ParamStore<f64>,
    pub input: Tensor<f64>,
    /// Whether `dL/dinput` is compared as well.
    pub check_input: bool,
    loss: LossFn,
    grad: GradFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        params: ParamStore<f64>,
        input: Tensor<f64>,
        loss: impl Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<f64> + 'static,
        grad: impl Fn(&ParamStore<f64>, &Tensor<f64>, &mut Grads<f64>) -> Result<Tensor<f64>> + 'static,
    ) -> Self {
        Self { name: name.into(), params, input, check_input: true, loss: Box::new(loss), grad: Box::new(grad) }
    }

    pub fn loss(&self) -> Result<f64> {
        (self.loss)(&self.params, &self.input)
    }

    /// Analytic parameter gradients and input gradient.
    pub fn analytic(&self) -> Result<(Grads<f64>, Tensor<f64>)> {
        let mut grads = Grads::zeros_like(&self.params);
        let dx = (self.grad)(&self.params, &self.input, &mut grads)?;
        Ok((grads, dx))
    }

    /// Fault injection: the analytic gradient becomes `1.1·g + 1e-3`.
    pub fn corrupted(self) -> Self {
        let GradCase { name, params, input, check_input, loss, grad } = self;
        let ids: Vec<_> = params.ids().collect();
        let bad: GradFn = Box::new(move |p, x, g| {
            let dx = grad(p, x, g)?;
            for &id in &ids {
                for v in g.get_mut(id).data_mut() {
                    *v = 1.1 * *v + 1e-3;
                }
            }
            Ok(dx.map(|v| 1.1 * v + 1e-3))
        });
        GradCase { name, params, input, check_input, loss, grad: bad }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub tensors: Vec<TensorReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CaseReport {
    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    /// Elements checked per tensor; larger tensors are subsampled.
    pub max_per_tensor: usize,
    pub sample_seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: FD_STEP, max_per_tensor: 48, sample_seed: 0 }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Compares every analytic gradient with central differences.
pub fn grad_check(case: &GradCase, tolerance: f64, options: &CheckOptions) -> Result<CaseReport> {
    let (grads, dx) = case.analytic()?;
    if !grads.is_finite() || !dx.is_finite() {
        return Err(Error::NonFinite(format!("{}: analytic gradient", case.name)));
    }
    let loss = finite(case.loss()?, &format!("{}: loss", case.name))?;
    let floor = REL_ERROR_FLOOR * loss.abs().max(1.0);
    let mut rng = seeded_rng(options.sample_seed);
    let h = options.step;
    let mut params = case.params.clone();
    let mut tensors = Vec::new();

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.param(id).trainable {
            continue;
        }
        let name = params.param(id).name.clone();
        let analytic = grads.get(id).data().to_vec();
        let mut report = TensorReport { name, checked: 0, max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in pick(analytic.len(), options.max_per_tensor, &mut rng) {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = (case.loss)(&params, &case.input)?;
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = (case.loss)(&params, &case.input)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = finite((plus - minus) / (2.0 * h), &format!("{}: numeric gradient", case.name))?;
            record(&mut report, i, analytic[i], numeric, floor);
        }
        tensors.push(report);
    }

    if case.check_input {
        let mut input = case.input.clone();
        let analytic = dx.data();
        if analytic.len() != input.len() {
            return Err(Error::shape(format!("{}: input gradient has {} elements", case.name, analytic.len())));
        }
        let mut report = TensorReport {
            name: "input".into(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in pick(input.len(), options.max_per_tensor, &mut rng) {
            let orig = input.data()[i];
            input.data_mut()[i] = orig + h;
            let plus = (case.loss)(&case.params, &input)?;
            input.data_mut()[i] = orig - h;
            let minus = (case.loss)(&case.params, &input)?;
            input.data_mut()[i] = orig;
            let numeric = finite((plus - minus) / (2.0 * h), &format!("{}: numeric gradient", case.name))?;
            record(&mut report, i, analytic[i], numeric, floor);
        }
        tensors.push(report);
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(CaseReport { name: case.name.clone(), tensors, max_rel_error, tolerance, passed: max_rel_error <= tolerance })
}

fn record(report: &mut TensorReport, i: usize, analytic: f64, numeric: f64, floor: f64) {
    let err = relative_error(analytic, numeric, floor);
    report.checked += 1;
    if err > report.max_rel_error || report.checked == 1 {
        report.max_rel_error = err.max(report.max_rel_error);
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Shifts every parameter by a small random amount so zero biases and unit
/// scales do not hide errors.
fn jitter(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Wraps a layer with output `y` as the scalar `Σ r ⊙ y`.
fn projected<C: 'static>(
    name: &str,
    mut params: ParamStore<f64>,
    input: Tensor<f64>,
    rng: &mut Rng,
    forward: impl Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, C)> + Clone + 'static,
    backward: impl Fn(&ParamStore<f64>, &Tensor<f64>, &C, &Tensor<f64>, &mut Grads<f64>) -> Result<Tensor<f64>> + 'static,
) -> Result<GradCase> {
    jitter(&mut params, rng);
    let (y, _) = forward(&params, &input)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let r_grad = r.clone();
    let fwd = forward.clone();
    Ok(GradCase::new(
        name,
        params,
        input,
        move |p, x| Ok(fwd(p, x)?.0.dot(&r)),
        move |p, x, g| {
            let (_, cache) = forward(p, x)?;
            backward(p, x, &cache, &r_grad, g)
        },
    ))
}

pub fn conv_case(seed: u64, stride: usize, padding: Padding) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 3, 2, 3, stride, padding, &mut rng)?;
    let input = uniform(&[6, 5, 2], -1.0, 1.0, &mut rng);
    let (c1, c2) = (conv.clone(), conv);
    projected(
        &format!("conv2d(stride={stride}, {padding:?})"),
        store,
        input,
        &mut rng,
        move |p, x| c1.forward(p, x).map(|y| (y, ())),
        move |p, x, _, dy, g| c2.backward(p, x, dy, g),
    )
}

pub fn dense_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 5, 3, &mut rng)?;
    let input = uniform(&[5], -1.0, 1.0, &mut rng);
    let (d1, d2) = (dense.clone(), dense);
    projected(
        "dense",
        store,
        input,
        &mut rng,
        move |p, x| d1.forward(p, x).map(|y| (y, ())),
        move |p, x, _, dy, g| Ok(d2.backward(p, x, dy, g)),
    )
}

/// ReLU at inputs bounded away from the kink.
pub fn relu_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let input = Tensor::from_fn(&[12], |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    projected(
        "relu",
        ParamStore::new(),
        input,
        &mut rng,
        |_, x| Ok((ops::relu(x), ())),
        |_, x, _, dy, _| Ok(ops::relu_backward(x, dy)),
    )
}

pub fn lstm_step_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng)?;
    let state = LstmState { h: uniform(&[4], -0.5, 0.5, &mut rng).into_data(), c: uniform(&[4], -1.0, 1.0, &mut rng).into_data() };
    let input = uniform(&[3], -1.0, 1.0, &mut rng);
    let (l1, l2, s1, s2) = (lstm.clone(), lstm, state.clone(), state);
    projected(
        "lstm_step",
        store,
        input,
        &mut rng,
        move |p, x| {
            let (next, cache) = l1.step(p, x.data(), &s1)?;
            let mut y = next.h;
            y.extend(next.c);
            Ok((Tensor::from_vec(y), cache))
        },
        move |p, _, cache, dy, g| {
            let d = s2.h.len();
            let (dx, _, _) = l2.step_backward(p, cache, &dy.data()[..d], &dy.data()[d..], g);
            Ok(Tensor::from_vec(dx))
        },
    )
}

pub fn lstm_sequence_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng)?;
    let input = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let (l1, l2) = (lstm.clone(), lstm);
    projected(
        "lstm_sequence",
        store,
        input,
        &mut rng,
        move |p, x| l1.sequence(p, x),
        move |p, _, cache, dy, g| l2.sequence_backward(p, cache, dy, g),
    )
}

pub fn attention_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let attn = TemporalAttention::new(&mut store, "attention", 4, 3, &mut rng)?;
    let input = uniform(&[5, 4], -1.0, 1.0, &mut rng);
    let (a1, a2) = (attn.clone(), attn);
    projected(
        "temporal_attention",
        store,
        input,
        &mut rng,
        move |p, x| a1.forward(p, x),
        move |p, x, cache, dy, g| a2.backward(p, x, cache, dy, g),
    )
}

/// Pooling with the attention weights held as a checked parameter.
pub fn attention_pool_case(seed: u64, mode: PoolMode) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let logits = uniform(&[5], -1.0, 1.0, &mut rng);
    let w = store.add("weights", Tensor::from_vec(ops::softmax_slice(logits.data())), true)?;
    let input = uniform(&[5, 4], -1.0, 1.0, &mut rng);
    projected(
        &format!("attention_pool({mode})"),
        store,
        input,
        &mut rng,
        move |p, x| attention_pool(x, p.get(w), mode).map(|y| (y, ())),
        move |p, x, _, dy, g| {
            let (dh, da) = attention_pool_backward(x, p.get(w), mode, dy)?;
            g.get_mut(w).add_assign(&da)?;
            Ok(dh)
        },
    )
}

/// A dense layer shared across timesteps.
pub fn time_distributed_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "shared", 3, 2, &mut rng)?;
    let input = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let (d1, d2) = (dense.clone(), dense);
    projected(
        "time_distributed(dense)",
        store,
        input,
        &mut rng,
        move |p, x| {
            let (y, caches) = time_distributed(x, |xt| Ok((d1.forward(p, xt)?, xt.clone())))?;
            Ok((y, caches))
        },
        move |p, _, caches, dy, g| time_distributed_backward(dy, caches, |xt, dyt| Ok(d2.backward(p, xt, dyt, g))),
    )
}

fn extractor_case(name: &str, seed: u64, frame: [usize; 3], config: crate::extractors::ExtractorConfig) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let e = Extractor::build(&mut store, &config, &frame, &mut rng)?;
    let input = uniform(&frame, 0.0, 1.0, &mut rng);
    let (e1, e2) = (e.clone(), e);
    projected(
        name,
        store,
        input,
        &mut rng,
        move |p, x| e1.forward_frame(p, x),
        move |p, _, cache, dy, g| e2.backward_frame(p, cache, dy, g),
    )
}

pub fn conv_small_case(seed: u64) -> Result<GradCase> {
    let config = crate::extractors::ExtractorConfig { conv_filters: vec![3, 4], ..Default::default() };
    extractor_case("conv_small", seed, [8, 8, 2], config)
}

pub fn mhsa_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let m = MultiHeadSelfAttention::new(&mut store, "mhsa", 4, 2, &mut rng)?;
    let input = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let (m1, m2) = (m.clone(), m);
    projected(
        "multi_head_self_attention",
        store,
        input,
        &mut rng,
        move |p, x| m1.forward(p, x),
        move |p, _, cache, dy, g| m2.backward(p, cache, dy, g),
    )
}

pub fn encoder_block_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let b = EncoderBlock::new(&mut store, "encoder", 4, 2, 6, &mut rng)?;
    let input = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let (b1, b2) = (b.clone(), b);
    projected(
        "vit_encoder_block",
        store,
        input,
        &mut rng,
        move |p, x| b1.forward(p, x),
        move |p, _, cache, dy, g| b2.backward(p, cache, dy, g),
    )
}

pub fn vit_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let v = VitToy::new(&mut store, "vit", [4, 4, 1], 2, 4, 2, 1, 6, &mut rng)?;
    let input = uniform(&[4, 4, 1], 0.0, 1.0, &mut rng);
    let (v1, v2) = (v.clone(), v);
    projected(
        "vit_toy",
        store,
        input,
        &mut rng,
        move |p, x| v1.forward(p, x),
        move |p, _, cache, dy, g| v2.backward(p, cache, dy, g),
    )
}

pub fn bottleneck_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let b = BottleneckBlock::new(&mut store, "bottleneck", 3, 2, &mut rng)?;
    let input = uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
    let (b1, b2) = (b.clone(), b);
    projected(
        "bottleneck",
        store,
        input,
        &mut rng,
        move |p, x| b1.forward(p, x),
        move |p, _, cache, dy, g| b2.backward(p, cache, dy, g),
    )
}

pub fn depthwise_separable_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let b = DepthwiseSeparableConv::new(&mut store, "dwsep", 3, 3, 4, &mut rng)?;
    let input = uniform(&[4, 5, 3], -1.0, 1.0, &mut rng);
    let (b1, b2) = (b.clone(), b);
    projected(
        "depthwise_separable",
        store,
        input,
        &mut rng,
        move |p, x| b1.forward(p, x),
        move |p, _, cache, dy, g| b2.backward(p, cache, dy, g),
    )
}

pub fn squeeze_excitation_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let b = SqueezeExcitation::new(&mut store, "se", 4, 2, &mut rng)?;
    let input = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
    let (b1, b2) = (b.clone(), b);
    projected(
        "squeeze_excitation",
        store,
        input,
        &mut rng,
        move |p, x| b1.forward(p, x),
        move |p, _, cache, dy, g| b2.backward(p, cache, dy, g),
    )
}

pub fn mbconv_case(seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let b = MbConvBlock::new(&mut store, "mbconv", 2, 2, 3, 2, &mut rng)?;
    let input = uniform(&[4, 4, 2], -1.0, 1.0, &mut rng);
    let (b1, b2) = (b.clone(), b);
    projected(
        "mbconv",
        store,
        input,
        &mut rng,
        move |p, x| b1.forward(p, x),
        move |p, _, cache, dy, g| b2.backward(p, cache, dy, g),
    )
}

/// LSTM → attention → pool → dense → softmax → cross-entropy on `(T, D)`
/// features.
#[allow(clippy::too_many_arguments)]
pub fn head_case(
    name: &str,
    seed: u64,
    t_len: usize,
    feature_dim: usize,
    hidden: usize,
    attn_dim: usize,
    classes: usize,
    mode: PoolMode,
) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let head = TemporalHead::new(&mut store, feature_dim, hidden, attn_dim, classes, mode, &mut rng)?;
    jitter(&mut store, &mut rng);
    let input = uniform(&[t_len, feature_dim], -1.0, 1.0, &mut rng);
    let label = rng.random_range(0..classes);
    let (h1, h2) = (head.clone(), head);
    Ok(GradCase::new(
        name,
        store,
        input,
        move |p, x| cross_entropy_index(&h1.forward(p, x)?.probs, label),
        move |p, x, g| {
            let cache = h2.forward(p, x)?;
            h2.backward(p, &cache, label, g)
        },
    ))
}

pub fn full_head_case(seed: u64) -> Result<GradCase> {
    head_case("full_head", seed, 5, 4, 3, 3, 3, PoolMode::WeightedSum)
}

pub fn model_case(name: &str, config: &ModelConfig, seed: u64) -> Result<GradCase> {
    let mut rng = seeded_rng(seed);
    let mut model = Model::<f64>::new(config, seed)?;
    jitter(&mut model.params, &mut rng);
    let input = uniform(&config.input_shape(), 0.0, 1.0, &mut rng);
    let label = rng.random_range(0..config.num_classes);
    let params = model.params.clone();
    let (m1, m2) = (model.clone(), model);
    Ok(GradCase::new(
        name,
        params,
        input,
        move |p, x| {
            let mut m = m1.clone();
            m.params = p.clone();
            m.loss(x, label)
        },
        move |p, x, g| {
            let mut m = m2.clone();
            m.params = p.clone();
            let cache = m.forward_cached(x)?;
            Ok(m.backward(&cache, label, g, true)?.expect("input gradient requested"))
        },
    ))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        frames: 3,
        height: 4,
        width: 4,
        channels: 1,
        extractor: crate::extractors::ExtractorConfig { conv_filters: vec![2], ..Default::default() },
        lstm_hidden: 3,
        attn_dim: 2,
        pool_mode: PoolMode::WeightedSum,
    }
}

/// One case per trainable block at toy sizes.
pub fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    Ok(vec![
        conv_case(seed, 1, Padding::Same)?,
        conv_case(seed, 2, Padding::Valid)?,
        dense_case(seed)?,
        relu_case(seed)?,
        lstm_step_case(seed)?,
        lstm_sequence_case(seed)?,
        attention_case(seed)?,
        attention_pool_case(seed, PoolMode::WeightedSum)?,
        attention_pool_case(seed, PoolMode::MeanOfAttended)?,
        time_distributed_case(seed)?,
        conv_small_case(seed)?,
        mhsa_case(seed)?,
        encoder_block_case(seed)?,
        vit_case(seed)?,
        bottleneck_case(seed)?,
        depthwise_separable_case(seed)?,
        squeeze_excitation_case(seed)?,
        mbconv_case(seed)?,
        full_head_case(seed)?,
        model_case("full_model", &tiny_model_config(), seed)?,
    ])
}

/// Cases for the blocks of a configured model, at its configured sizes.
pub fn model_cases(config: &ModelConfig, seed: u64) -> Result<Vec<GradCase>> {
    config.validate()?;
    let mut cases = Vec::new();
    let feature_dim = {
        let mut store = ParamStore::<f64>::new();
        Extractor::build(&mut store, &config.extractor, &config.step_shape(), &mut seeded_rng(seed))?.output_dim()
    };
    if config.extractor.kind != ExtractorKind::Precomputed {
        let mut e = config.extractor.clone();
        e.frozen = false;
        cases.push(extractor_case(&format!("extractor({})", e.kind), seed, config.frame_shape(), e)?);
    }
    let mut rng = seeded_rng(seed);
    let (d, da, c, t) = (config.lstm_hidden, config.attn_dim, config.num_classes, config.frames);
    {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", feature_dim, d, &mut rng)?;
        let input = uniform(&[t, feature_dim], -1.0, 1.0, &mut rng);
        let (l1, l2) = (lstm.clone(), lstm);
        cases.push(projected(
            "lstm_sequence",
            store,
            input,
            &mut rng,
            move |p, x| l1.sequence(p, x),
            move |p, _, cache, dy, g| l2.sequence_backward(p, cache, dy, g),
        )?);
    }
    {
        let mut store = ParamStore::new();
        let attn = TemporalAttention::new(&mut store, "attention", d, da, &mut rng)?;
        let input = uniform(&[t, d], -1.0, 1.0, &mut rng);
        let (a1, a2) = (attn.clone(), attn);
        cases.push(projected(
            "temporal_attention",
            store,
            input,
            &mut rng,
            move |p, x| a1.forward(p, x),
            move |p, x, cache, dy, g| a2.backward(p, x, cache, dy, g),
        )?);
    }
    {
        let mut store = ParamStore::new();
        let dense = Dense::new(&mut store, "classifier", d, c, &mut rng)?;
        let input = uniform(&[d], -1.0, 1.0, &mut rng);
        let (d1, d2) = (dense.clone(), dense);
        cases.push(projected(
            "classifier",
            store,
            input,
            &mut rng,
            move |p, x| d1.forward(p, x).map(|y| (y, ())),
            move |p, x, _, dy, g| Ok(d2.backward(p, x, dy, g)),
        )?);
    }
    cases.push(head_case("full_head", seed, t, feature_dim, d, da, c, config.pool_mode)?);
    let mut unfrozen = config.clone();
    unfrozen.extractor.frozen = false;
    cases.push(model_case("full_model", &unfrozen, seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_relu_are_tight() {
        let opts = CheckOptions::default();
        let dense = grad_check(&dense_case(1).unwrap(), 1e-5, &opts).unwrap();
        assert!(dense.passed, "{dense:?}");
        let relu = grad_check(&relu_case(1).unwrap(), 1e-7, &opts).unwrap();
        assert!(relu.passed, "{relu:?}");
    }

    #[test]
    fn corruption_is_detected() {
        let opts = CheckOptions::default();
        let report = grad_check(&dense_case(2).unwrap().corrupted(), DEFAULT_TOLERANCE, &opts).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn zero_tolerance_fails() {
        let report = grad_check(&lstm_sequence_case(3).unwrap(), 0.0, &CheckOptions::default()).unwrap();
        assert!(!report.passed);
    }
}
