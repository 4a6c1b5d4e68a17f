//! One line per acceptance criterion, written straight to stdout so it
//! shows up even when test output is captured.

use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::Rng as _;

use tempofit::extractors::feat::{decode_feat, encode_feat};
use tempofit::extractors::{ExtractorConfig, ExtractorKind, FeatureSequence};
use tempofit::gradcheck::{block_cases, grad_check, CheckOptions};
use tempofit::metrics::{
    count_params, evaluate, extractor_params, precision_recall_f1, report_from_probs, Averaging, ConfusionMatrix,
};
use tempofit::model::{Model, ModelConfig};
use tempofit::nn::attention::{PoolMode, TemporalAttention};
use tempofit::nn::ops::softmax_slice;
use tempofit::nn::{seeded_rng, ParamStore};
use tempofit::synthetic::{generate_examples, SyntheticConfig};
use tempofit::training::{
    decode_checkpoint, encode_checkpoint, fit_with_early_stopping, split_dataset, Bucket, TrainConfig,
};
use tempofit::videoio::{decode_fseq, encode_fseq, sample_indices, FrameSequence};
use tempofit::Tensor;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SAMPLING_BUDGET: Duration = Duration::from_secs(1);
const SUM_TOLERANCE: f64 = 1e-6;
const METRIC_TOLERANCE: f64 = 1e-12;
const OVERFIT_TRAIN_ACC: f64 = 0.95;
const OVERFIT_VAL_ACC: f64 = 0.80;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let options = CheckOptions::default();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..GRAD_SEEDS {
        for case in block_cases(seed).map_err(|e| e.to_string())? {
            let report = grad_check(&case, GRAD_TOLERANCE, &options).map_err(|e| e.to_string())?;
            names.insert(report.name.clone());
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, report.name.clone());
            }
            if !report.passed {
                failures.push(format!("{}@{seed}", report.name));
            }
        }
    }
    let elapsed = start.elapsed();
    let summary = format!(
        "{} blocks x {GRAD_SEEDS} seeds, worst {:.2e} ({}), {:.1}s",
        names.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    );
    if !failures.is_empty() {
        return Err(format!("{summary}; failed: {}", failures.join(", ")));
    }
    check(elapsed < GRAD_BUDGET, summary.clone(), format!("{summary}; over the time budget"))
}

fn sampling_oracle() -> Outcome {
    let start = Instant::now();
    for n in 1..=1000usize {
        for k in [1usize, 20, 50] {
            let plan = sample_indices(n, k).map_err(|e| e.to_string())?;
            let oracle: Vec<usize> = (1..=k).map(|i| (i * n / (k + 1)).min(n - 1)).collect();
            if plan.indices != oracle {
                return Err(format!("n={n} k={k}: {:?}", plan.indices));
            }
            if plan.indices.iter().any(|&t| t >= n) || plan.indices.windows(2).any(|w| w[0] > w[1]) {
                return Err(format!("n={n} k={k}: out of range or decreasing"));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < SAMPLING_BUDGET,
        format!("3000 plans, {:.1}ms", elapsed.as_secs_f64() * 1e3),
        format!("took {elapsed:?}"),
    )
}

fn distribution_error(p: &[f64]) -> f64 {
    let negative = p.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite());
    if negative {
        f64::INFINITY
    } else {
        (p.iter().sum::<f64>() - 1.0).abs()
    }
}

fn probability_invariants() -> Outcome {
    let mut rng = seeded_rng(7);
    let mut worst = 0.0f64;
    let mut store = ParamStore::<f64>::new();
    let att = TemporalAttention::new(&mut store, "att", 6, 5, &mut rng).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let len = rng.random_range(1..=30);
        let scale = if i % 3 == 0 { 1e3 } else { rng.random_range(0.1..50.0) };
        let mut z: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        if i % 10 == 0 {
            z[0] = 1e3;
            z[len - 1] = -1e3;
        }
        worst = worst.max(distribution_error(&softmax_slice(&z)));

        let h = Tensor::from_fn(&[len, 6], |_| rng.random_range(-1.0..1.0) * scale);
        let (w, _) = att.forward(&store, &h).map_err(|e| e.to_string())?;
        worst = worst.max(distribution_error(w.data()));
    }
    for kind in [ExtractorKind::ConvSmall, ExtractorKind::VitToy, ExtractorKind::ResnetBlock, ExtractorKind::EffnetBlock] {
        let config = toy_model(kind, 5, 0);
        let model = Model::<f64>::new(&config, 3).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(&config.input_shape(), |_| rng.random_range(0.0..=1.0));
        let p = model.forward(&x).map_err(|e| e.to_string())?;
        if p.len() != config.num_classes {
            return Err(format!("{kind}: {} outputs for {} classes", p.len(), config.num_classes));
        }
        worst = worst.max(distribution_error(&p));
    }
    check(
        worst <= SUM_TOLERANCE,
        format!("2000 rows + 4 models, worst |sum-1| = {worst:.1e}"),
        format!("worst |sum-1| = {worst:e}"),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= METRIC_TOLERANCE
}

fn metric_oracle() -> Outcome {
    let mut rng = seeded_rng(99);
    for inst in 0..100 {
        let c = rng.random_range(2..=10usize);
        let n = rng.random_range(1..=200usize);
        let k = rng.random_range(1..=c);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        // coarse values so ties happen
        let probs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..c).map(|_| rng.random_range(0..8) as f64 / 8.0).collect()).collect();
        let (report, _) = report_from_probs(&probs, &truth, c, k).map_err(|e| e.to_string())?;

        let rank = |row: &[f64], j: usize| (0..c).filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j)).count();
        let pred: Vec<usize> = probs.iter().map(|r| (0..c).find(|&j| rank(r, j) == 0).unwrap()).collect();
        let correct = (0..n).filter(|&i| pred[i] == truth[i]).count();
        let in_top = (0..n).filter(|&i| rank(&probs[i], truth[i]) < k).count();
        let acc = correct as f64 / n as f64;
        let topk = in_top as f64 / n as f64;

        let (mut wp, mut wr, mut wf, mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for class in 0..c {
            let tp = (0..n).filter(|&i| pred[i] == class && truth[i] == class).count() as f64;
            let fp = (0..n).filter(|&i| pred[i] == class && truth[i] != class).count() as f64;
            let fneg = (0..n).filter(|&i| pred[i] != class && truth[i] == class).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let w = (tp + fneg) / n as f64;
            wp += w * p;
            wr += w * r;
            wf += w * f;
            mp += p / c as f64;
            mr += r / c as f64;
            mf += f / c as f64;
        }
        let got = &report;
        let ok = got.accuracy == acc
            && got.top_k_accuracy == topk
            && got.weighted.recall == got.accuracy
            && close(got.weighted.precision, wp)
            && close(got.weighted.recall, wr)
            && close(got.weighted.f1, wf)
            && close(got.macro_avg.precision, mp)
            && close(got.macro_avg.recall, mr)
            && close(got.macro_avg.f1, mf);
        if !ok {
            return Err(format!("instance {inst} (C={c}, n={n}, k={k}) differs from the oracle"));
        }
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, c).map_err(|e| e.to_string())?;
        let w = precision_recall_f1(&cm, Averaging::Weighted).map_err(|e| e.to_string())?;
        if w.recall != acc {
            return Err(format!("instance {inst}: weighted recall {} != accuracy {acc}", w.recall));
        }
    }
    Ok("100 instances match; weighted recall == accuracy".into())
}

fn overfit_model() -> ModelConfig {
    ModelConfig {
        num_classes: 4,
        frames: 20,
        height: 16,
        width: 16,
        channels: 1,
        extractor: ExtractorConfig { kind: ExtractorKind::ConvSmall, ..Default::default() },
        lstm_hidden: 32,
        ..Default::default()
    }
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-4, batch_size: 32, max_epochs: OVERFIT_MAX_EPOCHS, seed: 0, ..Default::default() }
}

fn synthetic_overfit() -> Outcome {
    let start = Instant::now();
    let data = generate_examples(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let train_config = overfit_train_config();
    let split = split_dataset(&labels, 4, train_config.seed).map_err(|e| e.to_string())?;
    let pick = |b: Bucket| split.indices(b).into_iter().map(|i| data[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(Bucket::Train), pick(Bucket::Val));
    let mut model = Model::<f32>::new(&overfit_model(), train_config.seed).map_err(|e| e.to_string())?;
    let log = fit_with_early_stopping(&mut model, &train, &val, &train_config, |_| {}).map_err(|e| e.to_string())?;
    let (train_report, _) = evaluate(&model, &train, 1).map_err(|e| e.to_string())?;
    let (val_report, _) = evaluate(&model, &val, 1).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!(
        "train {:.3} val {:.3} (n={}/{}), best epoch {} of {}, {}, {:.0}s",
        train_report.accuracy,
        val_report.accuracy,
        train.len(),
        val.len(),
        log.best_epoch,
        log.rows.len(),
        log.stop_reason,
        elapsed.as_secs_f64()
    );
    check(
        train_report.accuracy >= OVERFIT_TRAIN_ACC
            && val_report.accuracy >= OVERFIT_VAL_ACC
            && log.rows.len() <= OVERFIT_MAX_EPOCHS
            && elapsed < OVERFIT_BUDGET,
        summary.clone(),
        summary,
    )
}

fn determinism() -> Outcome {
    let synth = SyntheticConfig { per_class: 6, frames: 6, side: 10, square: 3, ..Default::default() };
    let data = generate_examples(&synth).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let model_config = ModelConfig { frames: 6, height: 10, width: 10, lstm_hidden: 8, attn_dim: 4, ..overfit_model() };
    let train_config = TrainConfig { max_epochs: 6, batch_size: 4, learning_rate: 1e-3, seed: 5, ..Default::default() };
    let run = || -> tempofit::Result<(String, Vec<u8>)> {
        let split = split_dataset(&labels, 4, train_config.seed)?;
        let pick = |b: Bucket| split.indices(b).into_iter().map(|i| data[i].clone()).collect::<Vec<_>>();
        let mut model = Model::<f32>::new(&model_config, train_config.seed)?;
        let log = fit_with_early_stopping(&mut model, &pick(Bucket::Train), &pick(Bucket::Val), &train_config, |_| {})?;
        Ok((log.to_csv(), encode_checkpoint(&model.params, &model_config)?))
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    check(
        a == b,
        format!("two runs: identical {}-byte log and {}-byte checkpoint", a.0.len(), a.1.len()),
        "runs differ".into(),
    )
}

fn format_round_trips() -> Outcome {
    let mut rng = seeded_rng(3);
    for _ in 0..50 {
        let shape = [rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4)];
        let seq = FrameSequence::new(Tensor::from_fn(&shape, |_| rng.random_range(0.0..=1.0f32)))
            .map_err(|e| e.to_string())?;
        let bytes = encode_fseq(&seq).map_err(|e| e.to_string())?;
        if decode_fseq(&bytes).map_err(|e| e.to_string())? != seq {
            return Err("FSEQ round trip changed values".into());
        }
        if (0..bytes.len()).any(|cut| decode_fseq(&bytes[..cut]).is_ok()) {
            return Err("truncated FSEQ decoded".into());
        }

        let feat = FeatureSequence::new(Tensor::from_fn(&[shape[0], shape[1] * 3], |_| rng.random_range(-9.0..9.0f32)))
            .map_err(|e| e.to_string())?;
        let bytes = encode_feat(&feat).map_err(|e| e.to_string())?;
        let back = decode_feat(&bytes).map_err(|e| e.to_string())?;
        if back.data.data().iter().zip(feat.data.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("FEAT round trip changed values".into());
        }
        if (0..bytes.len()).any(|cut| decode_feat(&bytes[..cut]).is_ok()) {
            return Err("truncated FEAT decoded".into());
        }
    }
    for kind in [ExtractorKind::ConvSmall, ExtractorKind::VitToy, ExtractorKind::ResnetBlock, ExtractorKind::EffnetBlock, ExtractorKind::Precomputed] {
        let config = toy_model(kind, 1, 1);
        let model = Model::<f32>::new(&config, 2).map_err(|e| e.to_string())?;
        let bytes = encode_checkpoint(&model.params, &config).map_err(|e| e.to_string())?;
        let (params, back) = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
        if back != config || encode_checkpoint(&params, &back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("{kind} checkpoint round trip differs"));
        }
        if (0..bytes.len()).any(|cut| decode_checkpoint(&bytes[..cut]).is_ok()) {
            return Err(format!("truncated {kind} checkpoint decoded"));
        }
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        if decode_checkpoint(&bad).is_ok() {
            return Err("corrupted magic accepted".into());
        }
    }
    Ok("50 FSEQ + 50 FEAT + 5 CKPT bit-exact; every truncation rejected".into())
}

fn toy_model(kind: ExtractorKind, seed: u64, frozen: u64) -> ModelConfig {
    let mut rng = seeded_rng(seed);
    ModelConfig {
        num_classes: rng.random_range(2..=6),
        frames: rng.random_range(1..=4),
        height: 8,
        width: 8,
        channels: rng.random_range(1..=3),
        extractor: ExtractorConfig {
            kind,
            frozen: frozen == 1,
            conv_filters: (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=6)).collect(),
            conv_kernel: [1, 3, 5][rng.random_range(0..3)],
            vit_patch: [2, 4][rng.random_range(0..2)],
            vit_dim: 4,
            vit_heads: 2,
            vit_depth: rng.random_range(1..=2),
            vit_mlp: rng.random_range(2..=8),
            res_channels: rng.random_range(2..=6),
            res_mid: rng.random_range(1..=4),
            eff_channels: 4,
            eff_expand: rng.random_range(1..=3),
            eff_kernel: 3,
            eff_se_reduction: 2,
            feature_dim: rng.random_range(1..=12),
        },
        lstm_hidden: rng.random_range(1..=10),
        attn_dim: rng.random_range(1..=6),
        pool_mode: PoolMode::WeightedSum,
    }
}

fn parameter_counts() -> Outcome {
    let kinds =
        [ExtractorKind::ConvSmall, ExtractorKind::VitToy, ExtractorKind::ResnetBlock, ExtractorKind::EffnetBlock, ExtractorKind::Precomputed];
    let mut checked = 0;
    for seed in 0..20u64 {
        let kind = kinds[seed as usize % kinds.len()];
        for frozen in [0, 1] {
            let config = toy_model(kind, seed, frozen);
            let model = Model::<f32>::new(&config, seed).map_err(|e| e.to_string())?;
            let count = count_params(&model);
            let (d_in, d, da, c) = (model.feature_dim(), config.lstm_hidden, config.attn_dim, config.num_classes);
            let head = 4 * (d_in * d + d * d + d) + (d * da + da) + (da + 1) + (d * c + c);
            let ext = match kind {
                ExtractorKind::ConvSmall => {
                    let k = config.extractor.conv_kernel;
                    let mut c_in = config.channels;
                    config.extractor.conv_filters.iter().fold(0, |acc, &f| {
                        let n = k * k * c_in * f + f;
                        c_in = f;
                        acc + n
                    })
                }
                ExtractorKind::Precomputed => 0,
                _ => config.extractor.param_count(config.frame_shape()),
            };
            let frozen_part = if config.extractor.frozen { ext } else { 0 };
            let ok = count.total == count.trainable + count.non_trainable
                && count.total == head + ext
                && extractor_params(&model.params) == ext
                && count.non_trainable == frozen_part;
            if !ok {
                return Err(format!("seed {seed} {kind} frozen={frozen}: {count:?}, expected head {head} + extractor {ext}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} configs: total = trainable + non_trainable, closed forms match"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("frame sampling oracle", sampling_oracle),
        ("normalization and probability invariants", probability_invariants),
        ("metric oracle equivalence", metric_oracle),
        ("synthetic overfit run", synthetic_overfit),
        ("determinism", determinism),
        ("format round-trips", format_round_trips),
        ("parameter count semantics", parameter_counts),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for (name, run) in criteria {
        let line = match run() {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed.push(name);
                format!("FAIL  {name}: {detail}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
