//! Dataset splitting, Adam, the epoch loop with early stopping, and
//! checkpoints.
//!
//! Checkpoint layout (little-endian): magic `CKPT1\0`, `u16` version, `u32`
//! tensor count, then per tensor `u16` name length, UTF-8 name, `u8`
//! trainable flag, `u8` rank, `rank × u32` dims, `f32` payload; finally a
//! `u32`-length-prefixed UTF-8 model config.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::binio::{self, Reader};
use crate::config::{model_config_from_str, model_config_to_string};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{seeded_rng, Grads, ParamStore, Rng};
use crate::tensor::{checked_numel, Real, Tensor};

pub const CKPT_MAGIC: &[u8] = b"CKPT1\0";
pub const CKPT_VERSION: u16 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement in validation loss before
    /// stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(format!("min_delta must be non-negative, got {}", self.min_delta)));
        }
        Ok(())
    }

    /// Generator for mini-batch order; independent of the init stream.
    pub fn shuffle_rng(&self) -> Rng {
        let mut rng = seeded_rng(self.seed);
        rng.set_stream(1);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub buckets: Vec<Bucket>,
}

impl SplitAssignment {
    /// Sample indices in `bucket`, ascending.
    pub fn indices(&self, bucket: Bucket) -> Vec<usize> {
        self.buckets.iter().enumerate().filter(|(_, &b)| b == bucket).map(|(i, _)| i).collect()
    }
}

/// Per class: shuffle, `max(1, ⌊0.2n⌋)` to test, `max(1, ⌊0.2n'⌋)` of the
/// remainder to val, the rest to train.
pub fn split_dataset(labels: &[usize], num_classes: usize, seed: u64) -> Result<SplitAssignment> {
    let mut rng = seeded_rng(seed);
    rng.set_stream(2);
    let mut buckets = vec![Bucket::Train; labels.len()];
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
    }
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = members.len();
        if n < 3 {
            return Err(Error::Dataset(format!("class {class} has {n} samples; at least 3 are needed")));
        }
        members.shuffle(&mut rng);
        let n_test = (n / 5).max(1);
        let n_val = ((n - n_test) / 5).max(1);
        for &i in &members[..n_test] {
            buckets[i] = Bucket::Test;
        }
        for &i in &members[n_test..n_test + n_val] {
            buckets[i] = Bucket::Val;
        }
    }
    Ok(SplitAssignment { buckets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
pub fn adam_step<F: Real>(params: &mut ParamStore<F>, grads: &Grads<F>, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads.iter()).zip(&state.m) {
        if p.value.shape() != g.shape() || p.value.shape() != m.shape() {
            return Err(Error::shape(format!(
                "adam: `{}` has shape {:?}, gradient {:?}",
                p.name,
                p.value.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2), F::lit(ADAM_EPSILON));
    let one = F::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = F::lit(lr);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((p, g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
        if !p.trainable {
            continue;
        }
        let slots = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((theta, &gj), (mj, vj)) in p.value.data_mut().iter_mut().zip(g.data()).zip(slots) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Batch boundaries for `n` samples: full batches then one partial batch.
pub fn batch_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    (0..n).step_by(batch_size.max(1)).map(|start| batch_size.min(n - start)).collect()
}

fn check_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {value}")))
    }
}

/// One pass over `data` in shuffled mini-batches. The batch gradient is the
/// mean of per-sample gradients; loss and accuracy are means over samples.
pub fn train_epoch<F: Real>(
    model: &mut Model<F>,
    data: &[Example<F>],
    config: &TrainConfig,
    adam: &mut AdamState<F>,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut grads = Grads::zeros_like(&model.params);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(config.batch_size) {
        grads.zero();
        for &i in batch {
            let ex = &data[i];
            let (loss, probs) = model.accumulate_gradients(&ex.input, ex.label, &mut grads)?;
            let loss = loss.as_f64();
            check_finite(loss, &format!("training loss on sample {i}"))?;
            loss_sum += loss;
            correct += usize::from(crate::tensor::argmax(&probs) == ex.label);
        }
        grads.scale(F::lit(1.0 / batch.len() as f64));
        if !grads.is_finite() {
            return Err(Error::NonFinite("batch gradient".into()));
        }
        adam_step(&mut model.params, &grads, adam, config.learning_rate)?;
    }
    let n = data.len() as f64;
    Ok(EpochStats { loss: loss_sum / n, accuracy: correct as f64 / n })
}

/// Mean loss and accuracy without updating parameters.
pub fn evaluate_loss<F: Real>(model: &Model<F>, data: &[Example<F>]) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (i, ex) in data.iter().enumerate() {
        let probs = model.forward(&ex.input)?;
        let loss = crate::nn::ops::cross_entropy_index(&probs, ex.label)?.as_f64();
        check_finite(loss, &format!("evaluation loss on sample {i}"))?;
        loss_sum += loss;
        correct += usize::from(crate::tensor::argmax(&probs) == ex.label);
    }
    let n = data.len() as f64;
    Ok(EpochStats { loss: loss_sum / n, accuracy: correct as f64 / n })
}

/// Tracks the best validation loss and the patience counter.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    /// Lowest validation loss seen and its 1-based epoch.
    pub best: Option<(f64, usize)>,
    /// Loss at the last improvement of at least `min_delta`.
    reference: f64,
    pub wait: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// This epoch has the lowest validation loss so far.
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, reference: f64::INFINITY, wait: 0 }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let new_best = self.best.is_none_or(|(b, _)| val_loss < b);
        if new_best {
            self.best = Some((val_loss, epoch));
        }
        if val_loss < self.reference - self.min_delta {
            self.reference = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        StopDecision { new_best, stop: self.wait >= self.patience }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStopping => "early_stopping",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc);
        }
        out
    }

    pub fn best_row(&self) -> &EpochRow {
        &self.rows[self.best_epoch - 1]
    }
}

/// Trains until `max_epochs` or early stopping, then restores the
/// parameters of the epoch with the lowest validation loss. `on_epoch` sees
/// each row as it is produced.
pub fn fit_with_early_stopping<F: Real>(
    model: &mut Model<F>,
    train: &[Example<F>],
    val: &[Example<F>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainLog> {
    config.validate()?;
    if config.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let mut rng = config.shuffle_rng();
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut best_params = model.params.clone();
    let mut rows = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let tr = train_epoch(model, train, config, &mut adam, &mut rng)?;
        let va = evaluate_loss(model, val)?;
        let row = EpochRow { epoch, train_loss: tr.loss, train_acc: tr.accuracy, val_loss: va.loss, val_acc: va.accuracy };
        on_epoch(&row);
        rows.push(row);
        let decision = stopper.update(epoch, va.loss);
        if decision.new_best {
            best_params = model.params.clone();
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    model.params = best_params;
    let (best_val_loss, best_epoch) = stopper.best.expect("at least one epoch ran");
    Ok(TrainLog { rows, stop_reason, best_epoch, best_val_loss })
}

pub fn encode_checkpoint(params: &ParamStore<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    binio::put_u16(&mut out, CKPT_VERSION);
    binio::put_u32(&mut out, binio::dim_u32(params.len(), "tensor count")?);
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::OutOfRange(format!("parameter name `{}` too long", p.name)))?;
        binio::put_u16(&mut out, len);
        out.extend_from_slice(name);
        out.push(u8::from(p.trainable));
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| Error::OutOfRange(format!("parameter `{}` rank too large", p.name)))?;
        out.push(rank);
        for &d in p.value.shape() {
            binio::put_u32(&mut out, binio::dim_u32(d, "dimension")?);
        }
        binio::put_f32s(&mut out, p.value.data().iter().copied());
    }
    let blob = model_config_to_string(config);
    binio::put_u32(&mut out, binio::dim_u32(blob.len(), "config length")?);
    out.extend_from_slice(blob.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = Reader::new(bytes);
    r.magic(CKPT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::Malformed(format!("tensor `{name}` trainable flag {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::Malformed(format!("tensor `{name}` has rank 0")));
        }
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Malformed(format!("tensor `{name}` has a zero dimension")));
        }
        let n = checked_numel(&shape).ok_or_else(|| Error::OutOfRange(format!("tensor `{name}` shape overflows")))?;
        let values = r.f32s(n, "tensor payload")?;
        params.add(name, Tensor::new(shape, values)?, trainable)?;
    }
    let blob_len = r.u32("config length")? as usize;
    let blob = std::str::from_utf8(r.take(blob_len, "model config")?)
        .map_err(|_| Error::Malformed("model config is not UTF-8".into()))?;
    let config = model_config_from_str(blob)?;
    r.finish("checkpoint")?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &ParamStore<f32>, config: &ModelConfig, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_checkpoint(params, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, ModelConfig)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and rebuilds the model it describes.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let (params, config) = load_checkpoint(path)?;
    Model::from_params(&config, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let labels: Vec<usize> = [vec![0; 10], vec![1; 5]].concat();
        let s = split_dataset(&labels, 2, 7).unwrap();
        let count = |b: Bucket, c: usize| (0..labels.len()).filter(|&i| labels[i] == c && s.buckets[i] == b).count();
        assert_eq!((count(Bucket::Test, 0), count(Bucket::Val, 0), count(Bucket::Train, 0)), (2, 1, 7));
        assert_eq!((count(Bucket::Test, 1), count(Bucket::Val, 1), count(Bucket::Train, 1)), (1, 1, 3));
        assert_eq!(split_dataset(&labels, 2, 7).unwrap(), s);
        assert!(split_dataset(&[0, 0, 1, 1, 1], 2, 0).is_err());
    }

    #[test]
    fn adam_single_step_oracle() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::from_vec(vec![1.0]), true).unwrap();
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(id).data_mut()[0] = 1.0;
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, 1e-3).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_vec(vec![0.5, -2.0]), true).unwrap();
        let before = store.clone();
        let grads = Grads::zeros_like(&store);
        let mut state = AdamState::new(&store);
        for _ in 0..3 {
            adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_skips_frozen_parameters() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0]), false).unwrap();
        let b = store.add("b", Tensor::from_vec(vec![1.0]), true).unwrap();
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(a).data_mut()[0] = 1.0;
        grads.get_mut(b).data_mut()[0] = 1.0;
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.get(a).data()[0], 1.0);
        assert!(store.get(b).data()[0] < 1.0);
    }

    #[test]
    fn batch_partition() {
        assert_eq!(batch_sizes(70, 32), vec![32, 32, 6]);
        assert_eq!(batch_sizes(64, 32), vec![32, 32]);
    }

    #[test]
    fn early_stopping_trace() {
        let mut es = EarlyStopping::new(2, 1e-4);
        let stops: Vec<bool> = [1.0, 0.9, 0.95, 0.97].iter().enumerate().map(|(i, &l)| es.update(i + 1, l).stop).collect();
        assert_eq!(stops, vec![false, false, false, true]);
        assert_eq!(es.best, Some((0.9, 2)));
    }

    #[test]
    fn small_improvements_do_not_reset_patience() {
        let mut es = EarlyStopping::new(2, 0.1);
        assert!(!es.update(1, 1.0).stop);
        let d = es.update(2, 0.99);
        assert!(d.new_best && !d.stop);
        assert!(es.update(3, 0.98).stop);
        assert_eq!(es.best, Some((0.98, 3)));
    }

    #[test]
    fn checkpoint_version_and_magic() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_vec(vec![1.0, 2.0]), false).unwrap();
        let config = ModelConfig::default();
        let bytes = encode_checkpoint(&store, &config).unwrap();
        let (back, cfg) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(cfg, config);
        let mut v2 = bytes.clone();
        v2[6] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(Error::VersionMismatch { found: 2, .. })));
        let mut bad = bytes;
        bad[0] = 0;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
    }
}
