use proptest::prelude::*;

use tempofit::extractors::feat::{decode_feat, encode_feat, read_feat, write_feat};
use tempofit::extractors::FeatureSequence;
use tempofit::model::{Model, ModelConfig};
use tempofit::nn::attention::PoolMode;
use tempofit::training::{decode_checkpoint, encode_checkpoint, load_model, save_checkpoint};
use tempofit::videoio::{decode_fseq, encode_fseq, read_fseq, write_fseq, FrameSequence};
use tempofit::{Error, Tensor};

fn seq_strategy() -> impl Strategy<Value = FrameSequence> {
    (1usize..4, 1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(t, h, w, c)| {
        prop::collection::vec(0.0f32..=1.0, t * h * w * c)
            .prop_map(move |v| FrameSequence::new(Tensor::new(vec![t, h, w, c], v).unwrap()).unwrap())
    })
}

fn feat_strategy() -> impl Strategy<Value = FeatureSequence> {
    (1usize..6, 1usize..9).prop_flat_map(|(t, d)| {
        prop::collection::vec(-1e6f32..1e6, t * d)
            .prop_map(move |v| FeatureSequence::new(Tensor::new(vec![t, d], v).unwrap()).unwrap())
    })
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn fseq_round_trips_bit_exactly(seq in seq_strategy()) {
        let bytes = encode_fseq(&seq).unwrap();
        let back = decode_fseq(&bytes).unwrap();
        prop_assert_eq!(back.data().shape(), seq.data().shape());
        prop_assert_eq!(bits(back.data()), bits(seq.data()));
        prop_assert_eq!(encode_fseq(&back).unwrap(), bytes);
    }

    #[test]
    fn fseq_truncation_is_an_error(seq in seq_strategy(), cut in 0usize..1000) {
        let bytes = encode_fseq(&seq).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(decode_fseq(&bytes[..cut]).is_err());
    }

    #[test]
    fn feat_round_trips_bit_exactly(feat in feat_strategy()) {
        let bytes = encode_feat(&feat).unwrap();
        let back = decode_feat(&bytes).unwrap();
        prop_assert_eq!(bits(&back.data), bits(&feat.data));
        prop_assert!(!back.trainable);
    }

    #[test]
    fn feat_truncation_is_an_error(feat in feat_strategy(), cut in 0usize..1000) {
        let bytes = encode_feat(&feat).unwrap();
        prop_assert!(decode_feat(&bytes[..cut % bytes.len()]).is_err());
    }
}

#[test]
fn fseq_header_corruption_is_reported() {
    let seq = FrameSequence::new(Tensor::full(&[2, 2, 2, 1], 0.5)).unwrap();
    let good = encode_fseq(&seq).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_fseq(&bad), Err(Error::BadMagic { .. })));

    // T = 0
    let mut bad = good.clone();
    bad[6..10].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_fseq(&bad), Err(Error::Malformed(_))));

    // T doubled: payload too short
    let mut bad = good.clone();
    bad[6..10].copy_from_slice(&4u32.to_le_bytes());
    assert!(decode_fseq(&bad).is_err());

    // huge dims must not allocate
    let mut bad = good.clone();
    for i in 0..4 {
        bad[6 + 4 * i..10 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(decode_fseq(&bad).is_err());

    let mut bad = good.clone();
    bad.push(0);
    assert!(decode_fseq(&bad).is_err());
}

#[test]
fn fseq_payload_outside_unit_range_is_rejected() {
    let seq = FrameSequence::new(Tensor::full(&[1, 1, 2, 1], 0.25)).unwrap();
    let mut bytes = encode_fseq(&seq).unwrap();
    let at = bytes.len() - 4;
    for v in [1.5f32, -0.1, f32::NAN, f32::INFINITY] {
        bytes[at..].copy_from_slice(&v.to_le_bytes());
        assert!(decode_fseq(&bytes).is_err(), "{v}");
    }
}

#[test]
fn feat_rejects_non_finite_payload() {
    let feat = FeatureSequence::new(Tensor::full(&[1, 2], 3.0)).unwrap();
    let mut bytes = encode_feat(&feat).unwrap();
    let at = bytes.len() - 4;
    bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_feat(&bytes), Err(Error::NonFinite(_))));
}

fn toy_config() -> ModelConfig {
    let mut config = ModelConfig {
        num_classes: 3,
        frames: 2,
        height: 6,
        width: 6,
        channels: 1,
        lstm_hidden: 4,
        attn_dim: 3,
        pool_mode: PoolMode::MeanOfAttended,
        ..Default::default()
    };
    config.extractor.conv_filters = vec![2, 3];
    config.extractor.frozen = true;
    config
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let config = toy_config();
    let model = Model::<f32>::new(&config, 11).unwrap();
    let bytes = encode_checkpoint(&model.params, &config).unwrap();
    let (params, back) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, config);
    assert_eq!(params.len(), model.params.len());
    for (a, b) in params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(encode_checkpoint(&params, &back).unwrap(), bytes);
}

#[test]
fn every_checkpoint_truncation_fails() {
    let config = toy_config();
    let model = Model::<f32>::new(&config, 1).unwrap();
    let bytes = encode_checkpoint(&model.params, &config).unwrap();
    for cut in 0..bytes.len() {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn checkpoint_header_corruption_is_reported() {
    let config = toy_config();
    let model = Model::<f32>::new(&config, 1).unwrap();
    let good = encode_checkpoint(&model.params, &config).unwrap();

    let mut bad = good.clone();
    bad[2] = b'?';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));

    let mut bad = good.clone();
    bad[6..8].copy_from_slice(&2u16.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bad), Err(Error::VersionMismatch { found: 2, expected: 1 })));

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(decode_checkpoint(&bad).is_err());

    let mut bad = good.clone();
    bad.extend_from_slice(b"junk");
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn checkpoint_that_disagrees_with_its_config_does_not_load() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config();
    let model = Model::<f32>::new(&config, 1).unwrap();
    let mut other = config.clone();
    other.lstm_hidden = 5;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model.params, &other, &path).unwrap();
    assert!(load_model(&path).is_err());
    save_checkpoint(&model.params, &config, &path).unwrap();
    assert_eq!(load_model(&path).unwrap().params.len(), model.params.len());
}

#[test]
fn files_round_trip_and_failed_reads_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let seq = FrameSequence::new(Tensor::full(&[2, 3, 3, 1], 0.75)).unwrap();
    let path = dir.path().join("a.fseq");
    write_fseq(&seq, &path).unwrap();
    assert_eq!(read_fseq(&path).unwrap(), seq);

    let feat = FeatureSequence::new(Tensor::full(&[2, 3], -2.0)).unwrap();
    let fpath = dir.path().join("a.feat");
    write_feat(&feat, &fpath).unwrap();
    assert_eq!(read_feat(&fpath).unwrap(), feat);

    std::fs::write(&path, b"FSEQ1\0garbage").unwrap();
    assert!(read_fseq(&path).is_err());
    assert!(read_fseq(&dir.path().join("missing.fseq")).is_err());

    // a write into a missing directory fails without leaving temp files
    assert!(write_fseq(&seq, &dir.path().join("nope/b.fseq")).is_err());
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}
