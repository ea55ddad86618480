mod common;

use common::{random_tensor, small_model, small_synthetic};
use crossl::data::MultimodalBatch;
use crossl::masking::{apply_mask, forced_modality_mask, MaskMatrix};
use crossl::model::{AggregatorSpec, Block, ConvLayerSpec, EncoderSpec, ModalityConfig, ModelSpec, ModelState};
use crossl::numkernel::{Rng, Tape, Tensor};

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

fn modality(name: &str, channels: usize, window_len: usize) -> ModalityConfig {
    ModalityConfig { name: name.into(), channels, window_len, sampling_rate: window_len as f64 }
}

/// Width-1 identity convolutions and an identity projection, so the encoder
/// reduces to the per-channel mean of a non-negative window.
fn pooling_only_model(channels: usize) -> ModelState {
    let layer = ConvLayerSpec { out_channels: channels, kernel_width: 1, stride: 1 };
    let spec = ModelSpec {
        modalities: vec![modality("x", channels, 7)],
        encoder: EncoderSpec { conv: [layer; 3], embedding_dim: channels },
        aggregator: AggregatorSpec { hidden: vec![], output_dim: channels },
        num_classes: 2,
    };
    let mut state = ModelState::init(spec, 0).unwrap();
    for i in 1..=3 {
        state.param_mut(&format!("enc.x.conv{i}.w")).unwrap().value =
            Tensor::new(vec![1, channels, channels], identity(channels)).unwrap();
    }
    state.param_mut("enc.x.proj.w").unwrap().value = Tensor::new(vec![channels, channels], identity(channels)).unwrap();
    state
}

fn batch_of(windows: Vec<Tensor>) -> MultimodalBatch {
    let n = windows[0].dim(0);
    let m = windows.len();
    MultimodalBatch { indices: (0..n).collect(), windows: windows.into_iter().map(Some).collect(), labels: None, available: vec![true; n * m] }
}

#[test]
fn encoder_output_is_n_by_k_for_every_window_length() {
    let data = small_synthetic(4, 1);
    let state = ModelState::init(small_model(&data), 1).unwrap();
    for (mi, w) in data.windows.iter().enumerate() {
        let q = state.encode(w, mi).unwrap();
        assert_eq!(q.shape(), &[data.len(), state.spec.encoder.embedding_dim]);
    }
}

#[test]
fn encoder_rejects_wrong_window_shape() {
    let data = small_synthetic(4, 1);
    let state = ModelState::init(small_model(&data), 1).unwrap();
    let bad = Tensor::zeros(&[2, data.modalities[0].window_len + 1, data.modalities[0].channels]);
    assert!(state.encode(&bad, 0).is_err());
    assert!(state.encode(&data.windows[0], 7).is_err());
}

#[test]
fn identical_windows_give_identical_rows() {
    let data = small_synthetic(3, 2);
    let state = ModelState::init(small_model(&data), 2).unwrap();
    let row = data.windows[1].select_rows(&[4]);
    let twice = data.windows[1].select_rows(&[4, 4]);
    let q = state.encode(&twice, 1).unwrap();
    assert_eq!(q.row(0), q.row(1));
    assert_eq!(state.encode(&row, 1).unwrap().row(0), q.row(0));
}

#[test]
fn pooling_only_encoder_gives_channel_means() {
    let state = pooling_only_model(3);
    let mut rng = Rng::new(5);
    let x = random_tensor(&mut rng, &[4, 7, 3]).map(f64::abs);
    let q = state.encode(&x, 0).unwrap();
    for s in 0..4 {
        for c in 0..3 {
            let mean = (0..7).map(|t| x.values()[(s * 7 + t) * 3 + c]).sum::<f64>() / 7.0;
            assert!((q.row(s)[c] - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn single_modality_encode_all_matches_encode() {
    let state = pooling_only_model(2);
    let mut rng = Rng::new(6);
    let x = random_tensor(&mut rng, &[5, 7, 2]);
    let all = state.encode_all(&batch_of(vec![x.clone()])).unwrap();
    assert_eq!(all.shape(), &[5, 1, 2]);
    assert_eq!(all.values(), state.encode(&x, 0).unwrap().values());
}

#[test]
fn encode_all_shape_and_sample_permutation() {
    let data = small_synthetic(4, 3);
    let state = ModelState::init(small_model(&data), 3).unwrap();
    let idx = [0, 1, 2, 3];
    let perm = [2, 0, 3, 1];
    let q = state.encode_all(&data.batch(&idx)).unwrap();
    assert_eq!(q.shape(), &[4, 3, 6]);
    let qp = state.encode_all(&data.batch(&perm)).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(qp.row(row), q.row(src));
    }
}

#[test]
fn embeddings_do_not_depend_on_batch_composition() {
    let data = small_synthetic(5, 4);
    let state = ModelState::init(small_model(&data), 4).unwrap();
    let full = state.aggregate(&state.encode_all(&data.batch(&[3, 7, 9, 11])).unwrap()).unwrap();
    let alone = state.aggregate(&state.encode_all(&data.batch(&[9])).unwrap()).unwrap();
    assert_eq!(alone.row(0), full.row(2));
}

#[test]
fn identity_aggregator_flattens() {
    let spec = ModelSpec {
        modalities: vec![modality("a", 1, 4), modality("b", 1, 4)],
        encoder: EncoderSpec { conv: [ConvLayerSpec { out_channels: 1, kernel_width: 1, stride: 1 }; 3], embedding_dim: 2 },
        aggregator: AggregatorSpec { hidden: vec![], output_dim: 4 },
        num_classes: 2,
    };
    let mut state = ModelState::init(spec, 0).unwrap();
    state.param_mut("agg.dense1.w").unwrap().value = Tensor::new(vec![4, 4], identity(4)).unwrap();
    let mut rng = Rng::new(7);
    let q = random_tensor(&mut rng, &[3, 2, 2]);
    assert_eq!(state.aggregate(&q).unwrap().values(), q.values());

    // Zero input yields the composed biases.
    state.param_mut("agg.dense1.b").unwrap().value = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let z = state.aggregate(&Tensor::zeros(&[2, 2, 2])).unwrap();
    assert_eq!(z.row(0), &[1.0, -2.0, 0.5, 3.0]);
    assert_eq!(z.row(1), z.row(0));
}

#[test]
fn two_layer_aggregator_hand_example() {
    let spec = ModelSpec {
        modalities: vec![modality("a", 1, 4), modality("b", 1, 4)],
        encoder: EncoderSpec { conv: [ConvLayerSpec { out_channels: 1, kernel_width: 1, stride: 1 }; 3], embedding_dim: 2 },
        aggregator: AggregatorSpec { hidden: vec![2], output_dim: 1 },
        num_classes: 2,
    };
    let mut state = ModelState::init(spec, 0).unwrap();
    // h = relu(x W1 + b1), z = h W2 + b2 with x = [1, 2, 3, 4].
    let w1 = vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0, -1.0];
    state.param_mut("agg.dense1.w").unwrap().value = Tensor::new(vec![4, 2], w1).unwrap();
    state.param_mut("agg.dense1.b").unwrap().value = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
    state.param_mut("agg.dense2.w").unwrap().value = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
    state.param_mut("agg.dense2.b").unwrap().value = Tensor::new(vec![1], vec![-1.0]).unwrap();
    let q = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    // x W1 = [1 + 3, 2 - 3 - 4] = [4, -5]; + b1 = [4.5, -5]; relu = [4.5, 0]; z = 9 - 1 = 8.
    assert_eq!(state.aggregate(&q).unwrap().values(), &[8.0]);
}

#[test]
fn classifier_examples() {
    let data = small_synthetic(4, 5);
    let mut state = ModelState::init(small_model(&data), 5).unwrap();
    let mut rng = Rng::new(8);
    let z = random_tensor(&mut rng, &[6, 8]);
    for row in state.classify(&z).unwrap().values().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    state.param_mut("cls.w").unwrap().value = Tensor::zeros(&[8, 3]);
    let p = state.classify(&z).unwrap();
    assert!(p.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    // A weight column reading dimension 0 wins wherever that dimension is positive.
    let mut w = vec![0.0; 24];
    w[2] = 10.0;
    state.param_mut("cls.w").unwrap().value = Tensor::new(vec![8, 3], w).unwrap();
    let z = Tensor::new(vec![2, 8], (0..16).map(|i| if i % 8 == 0 { 1.0 } else { 0.3 }).collect()).unwrap();
    for row in state.classify(&z).unwrap().values().chunks(3) {
        assert!(row[2] > row[0] && row[2] > row[1]);
    }
}

/// Reordering modalities in both the config and the data, together with the
/// encoder blocks and the aggregator's input rows, leaves Z unchanged.
#[test]
fn modality_permutation_contract() {
    let data = small_synthetic(3, 6);
    let spec = small_model(&data);
    let state = ModelState::init(spec.clone(), 6).unwrap();
    let perm = [2usize, 0, 1];
    let k = spec.encoder.embedding_dim;

    let mut pspec = spec.clone();
    pspec.modalities = perm.iter().map(|&i| spec.modalities[i].clone()).collect();
    let mut pstate = ModelState::init(pspec, 99).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        let (dst, src) = (pstate.encoder_range(new), state.encoder_range(old));
        for (d, s) in dst.zip(src) {
            pstate.params[d].value = state.params[s].value.clone();
        }
    }
    let w = &state.param("agg.dense1.w").unwrap().value;
    let width = w.dim(1);
    let mut rows = Vec::new();
    for &old in &perm {
        rows.extend((old * k..(old + 1) * k).flat_map(|r| w.row(r).to_vec()));
    }
    pstate.param_mut("agg.dense1.w").unwrap().value = Tensor::new(vec![w.dim(0), width], rows).unwrap();
    for i in state.block_range(Block::Aggregator).skip(1).chain(state.block_range(Block::Classifier)) {
        pstate.params[i].value = state.params[i].value.clone();
    }

    let idx: Vec<usize> = (0..6).collect();
    let batch = data.batch(&idx);
    let pbatch = MultimodalBatch {
        windows: perm.iter().map(|&i| batch.windows[i].clone()).collect(),
        ..batch.clone()
    };
    let z = state.aggregate(&state.encode_all(&batch).unwrap()).unwrap();
    let zp = pstate.aggregate(&pstate.encode_all(&pbatch).unwrap()).unwrap();
    assert!(z.max_abs_diff(&zp) < 1e-12);
}

#[test]
fn forced_mask_matches_deterministic_spatial_mask() {
    let data = small_synthetic(3, 7);
    let state = ModelState::init(small_model(&data), 7).unwrap();
    let n = 4;
    let q = state.encode_all(&data.batch(&[0, 1, 2, 3])).unwrap();
    for j in 0..3 {
        let mut available = vec![true; n * 3];
        (0..n).for_each(|s| available[s * 3 + j] = false);
        let forced = forced_modality_mask(&available, 3, 6);
        let spatial = MaskMatrix::from_dropped_modalities(&vec![vec![j]; n], 3, 6);
        let a = state.aggregate(&apply_mask(&q, &forced).unwrap()).unwrap();
        let b = state.aggregate(&apply_mask(&q, &spatial).unwrap()).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn masked_modality_encoder_gets_zero_gradient() {
    let data = small_synthetic(3, 8);
    let mut state = ModelState::init(small_model(&data), 8).unwrap();
    let batch = data.batch(&[0, 1, 2, 3, 4]);
    let mask = MaskMatrix::from_dropped_modalities(&vec![vec![1]; 5], 3, 6);
    let mut tape = Tape::new();
    let q = state.encode_all_on_tape(&mut tape, &batch).unwrap();
    let qm = tape.mask(q, mask.bits()).unwrap();
    let z = state.aggregate_on_tape(&mut tape, qm).unwrap();
    let loss = tape.sum(z);
    tape.backward(loss, &mut state.params).unwrap();
    for i in state.encoder_range(1) {
        assert!(state.params[i].grad.values().iter().all(|&g| g == 0.0), "{}", state.params[i].name);
    }
    let live: f64 = state.encoder_range(0).map(|i| state.params[i].grad.values().iter().map(|g| g.abs()).sum::<f64>()).sum();
    assert!(live > 0.0);
}
