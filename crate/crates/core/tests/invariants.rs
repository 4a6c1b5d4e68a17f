use proptest::prelude::*;

use tempofit::extractors::{ExtractorConfig, ExtractorKind};
use tempofit::metrics::{
    count_params, extractor_params, precision_recall_f1, report_from_probs, top_k_classes, Averaging,
    ConfusionMatrix,
};
use tempofit::model::{Model, ModelConfig};
use tempofit::nn::attention::{PoolMode, TemporalAttention};
use tempofit::nn::ops::softmax_slice;
use tempofit::nn::{seeded_rng, ParamStore};
use tempofit::videoio::{resize_bilinear, sample_indices};
use tempofit::Tensor;

fn sum_is_one(p: &[f64]) -> bool {
    (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6 && p.iter().all(|&v| (0.0..=1.0).contains(&v))
}

proptest! {
    #[test]
    fn sampling_matches_the_formula(n in 1usize..5000, k in 1usize..100) {
        let plan = sample_indices(n, k).unwrap();
        prop_assert_eq!(plan.indices.len(), k);
        for (j, &t) in plan.indices.iter().enumerate() {
            let i = j + 1;
            prop_assert_eq!(t, (i * n / (k + 1)).min(n - 1));
        }
        prop_assert!(plan.indices.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-1000.0f64..1000.0, 1..40)) {
        prop_assert!(sum_is_one(&softmax_slice(&z)));
    }

    #[test]
    fn attention_weights_are_distributions(seed in any::<u64>(), t in 1usize..12, scale in 0.1f64..100.0) {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::<f64>::new();
        let att = TemporalAttention::new(&mut store, "att", 5, 4, &mut rng).unwrap();
        let h = Tensor::from_fn(&[t, 5], |i| ((i as f64 * 0.71 + seed as f64 * 1e-9).sin()) * scale);
        let (w, _) = att.forward(&store, &h).unwrap();
        prop_assert!(sum_is_one(w.data()));
    }

    #[test]
    fn resize_keeps_constant_images_constant(
        h in 1usize..10, w in 1usize..10, c in 1usize..4, oh in 1usize..20, ow in 1usize..20, v in 0.0f32..255.0,
    ) {
        let out = resize_bilinear(&Tensor::full(&[h, w, c], v), oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[oh, ow, c]);
        prop_assert!(out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn resize_stays_within_input_range(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, oh in 1usize..16, ow in 1usize..16) {
        let img = Tensor::from_fn(&[h, w, 1], |i| (((i as u64 * 2654435761) ^ seed) % 256) as f32);
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let out = resize_bilinear(&img, oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn top_k_is_sorted_and_contains_argmax(row in prop::collection::vec(0.0f64..1.0, 1..12), k in 1usize..12) {
        let k = k.min(row.len());
        let top = top_k_classes(&row, k);
        prop_assert_eq!(top.len(), k);
        prop_assert!(top.windows(2).all(|w| row[w[0]] >= row[w[1]]));
        prop_assert_eq!(top[0], tempofit::metrics::argmax_row(&row));
    }

    #[test]
    fn weighted_recall_is_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..100)) {
        let (truth, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 6).unwrap();
        let scores = precision_recall_f1(&cm, Averaging::Weighted).unwrap();
        let acc = tempofit::metrics::accuracy(&pred, &truth).unwrap();
        prop_assert_eq!(scores.recall, acc);
        prop_assert_eq!(cm.total() as usize, truth.len());
    }
}

#[test]
fn extreme_logits_stay_normalized() {
    for z in [vec![1000.0, -1000.0], vec![1000.0, 1000.0, 1000.0], vec![-1000.0; 5], vec![1e3, 999.0]] {
        assert!(sum_is_one(&softmax_slice(&z)), "{z:?}");
    }
}

fn small_config(kind: ExtractorKind, seed: u64) -> ModelConfig {
    let pick = |lo: usize, span: usize, salt: u64| lo + ((seed.wrapping_mul(6364136223846793005) ^ salt) >> 33) as usize % span;
    ModelConfig {
        num_classes: pick(2, 5, 1),
        frames: pick(1, 4, 2),
        height: 8,
        width: 8,
        channels: pick(1, 3, 3),
        extractor: ExtractorConfig {
            kind,
            conv_filters: vec![pick(1, 4, 4); pick(1, 2, 5)],
            feature_dim: pick(2, 6, 6),
            vit_patch: 4,
            vit_dim: 4,
            vit_heads: 2,
            vit_mlp: 6,
            res_channels: 4,
            res_mid: 2,
            eff_channels: 4,
            eff_expand: 2,
            eff_se_reduction: 2,
            ..Default::default()
        },
        lstm_hidden: pick(1, 6, 7),
        attn_dim: pick(1, 5, 8),
        pool_mode: PoolMode::WeightedSum,
    }
}

/// Parameters of everything after the extractor, written out per layer.
fn head_formula(d_in: usize, d: usize, da: usize, c: usize) -> usize {
    let lstm = 4 * (d_in * d + d * d + d);
    let attention = (d * da + da) + (da + 1);
    let dense = d * c + c;
    lstm + attention + dense
}

#[test]
fn end_to_end_outputs_are_distributions() {
    for seed in 0..5 {
        let config = small_config(ExtractorKind::ConvSmall, seed);
        let model = Model::<f64>::new(&config, seed).unwrap();
        let x = Tensor::from_fn(&config.input_shape(), |i| ((i * 37 % 101) as f64) / 100.0);
        let p = model.forward(&x).unwrap();
        assert_eq!(p.len(), config.num_classes);
        assert!(sum_is_one(&p));
    }
}

#[test]
fn counts_match_layer_formulas() {
    for seed in 0..20u64 {
        let kind = if seed % 2 == 0 { ExtractorKind::ConvSmall } else { ExtractorKind::Precomputed };
        let config = small_config(kind, seed);
        let model = Model::<f32>::new(&config, seed).unwrap();
        let c = config.channels;
        let extractor = match kind {
            ExtractorKind::ConvSmall => {
                let k = config.extractor.conv_kernel;
                let mut c_in = c;
                let mut n = 0;
                for &f in &config.extractor.conv_filters {
                    n += k * k * c_in * f + f;
                    c_in = f;
                }
                n
            }
            _ => 0,
        };
        let expected = extractor
            + head_formula(model.feature_dim(), config.lstm_hidden, config.attn_dim, config.num_classes);
        let count = count_params(&model);
        assert_eq!(count.total, expected, "seed {seed}: {config:?}");
        assert_eq!(count.trainable, expected);
        assert_eq!(count.non_trainable, 0);
    }
}

#[test]
fn freezing_moves_counts_without_changing_the_total() {
    for kind in [ExtractorKind::ConvSmall, ExtractorKind::VitToy, ExtractorKind::ResnetBlock, ExtractorKind::EffnetBlock] {
        for seed in 0..3 {
            let mut config = small_config(kind, seed);
            let thawed = count_params(&Model::<f32>::new(&config, seed).unwrap());
            config.extractor.frozen = true;
            let model = Model::<f32>::new(&config, seed).unwrap();
            let frozen = count_params(&model);
            let ext = extractor_params(&model.params);
            assert_eq!(ext, config.extractor.param_count(config.frame_shape()));
            assert_eq!(frozen.total, thawed.total);
            assert_eq!(frozen.total, frozen.trainable + frozen.non_trainable);
            assert_eq!(frozen.non_trainable, ext, "{kind:?}");
            assert_eq!(thawed.non_trainable, 0);
        }
    }
}

#[test]
fn report_accuracy_and_top1_agree() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6], vec![0.5, 0.4, 0.1], vec![0.2, 0.2, 0.6]];
    let truth = [0, 2, 1, 2];
    let (report, cm) = report_from_probs::<f64, _>(&probs, &truth, 3, 1).unwrap();
    assert_eq!(report.accuracy, 0.75);
    assert_eq!(report.top_k_accuracy, report.accuracy);
    assert_eq!(report.weighted.recall, report.accuracy);
    assert_eq!(cm.get(1, 0), 1);
}
