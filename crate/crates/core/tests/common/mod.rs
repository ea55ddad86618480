#![allow(dead_code)]

use crossl::data::{generate_synthetic, MultimodalDataset, SyntheticConfig, SyntheticModality};
use crossl::loss::{total_loss_on_tape, LossWeights};
use crossl::model::{AggregatorSpec, ConvLayerSpec, EncoderSpec, ModalityConfig, ModelSpec, ModelState};
use crossl::numkernel::gradcheck::{numeric_gradient, relative_error, DEFAULT_STEP};
use crossl::numkernel::{Parameter, Rng, Tape, Tensor, Var};
use crossl::Result;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random values kept at least `gap` away from zero (ReLU kink).
pub fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    random_tensor(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient harness

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalarizes `out` as `sum(out * weights)` unless it is already a scalar.
fn scalarize(tape: &mut Tape, out: Var, weights: &Option<Tensor>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let m = tape.mask(out, w)?;
            Ok(tape.sum(m))
        }
    }
}

/// Largest elementwise relative error between tape gradients and central
/// differences, over every input of `build`.
pub fn check_gradients(rng: &mut Rng, inputs: &[Tensor], build: &Build) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let shape = tape.value(out).shape().to_vec();
        (tape.value(out).len() != 1).then(|| random_tensor(rng, &shape))
    };
    let forward = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let loss = scalarize(&mut tape, out, &weights).expect("scalarize");
        tape.value(loss).values()[0]
    };

    let mut params: Vec<Parameter> =
        inputs.iter().enumerate().map(|(i, x)| Parameter::new(format!("x{i}"), x.clone())).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let loss = scalarize(&mut tape, out, &weights).expect("scalarize");
    tape.backward(loss, &mut params).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let numeric = numeric_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                forward(&xs)
            },
            &inputs[i],
            DEFAULT_STEP,
        );
        for (&a, &n) in p.grad.values().iter().zip(numeric.values()) {
            worst = worst.max(relative_error(a, n));
        }
    }
    worst
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Random columns whose regularized std is at least `gap` away from `gamma`.
fn batch_off_kink(rng: &mut Rng, n: usize, d: usize, gamma: f64, eps: f64, gap: f64) -> Tensor {
    loop {
        let scale = rng.uniform_range(0.3, 2.0);
        let z = random_tensor(rng, &[n, d]).map(|v| v * scale);
        let stds = crossl::loss::column_stds(&z, eps);
        if stds.iter().all(|s| (s - gamma).abs() > gap) {
            return z;
        }
    }
}

fn tiny_model_spec() -> ModelSpec {
    let layer = |out_channels, kernel_width, stride| ConvLayerSpec { out_channels, kernel_width, stride };
    ModelSpec {
        modalities: vec![
            ModalityConfig { name: "a".into(), channels: 2, window_len: 11, sampling_rate: 11.0 },
            ModalityConfig { name: "b".into(), channels: 1, window_len: 8, sampling_rate: 8.0 },
        ],
        encoder: EncoderSpec { conv: [layer(3, 3, 2), layer(3, 2, 1), layer(2, 2, 1)], embedding_dim: 3 },
        aggregator: AggregatorSpec { hidden: vec![4], output_dim: 3 },
        num_classes: 2,
    }
}

/// Per-operation worst relative error over `trials` random instances.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = e.max(err),
        None => results.push((name, err)),
    };
    for _ in 0..trials {
        // conv1d
        let (n, t, ci, w, co, stride) =
            (dim(&mut rng, 1, 3), dim(&mut rng, 5, 9), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 2));
        let inputs = [random_tensor(&mut rng, &[n, t, ci]), random_tensor(&mut rng, &[w, ci, co]), random_tensor(&mut rng, &[co])];
        record("conv1d", check_gradients(&mut rng, &inputs, &|tp, v| tp.conv1d(v[0], v[1], v[2], stride)));

        // dense
        let (n, i, o) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let inputs = [random_tensor(&mut rng, &[n, i]), random_tensor(&mut rng, &[i, o]), random_tensor(&mut rng, &[o])];
        record("dense", check_gradients(&mut rng, &inputs, &|tp, v| tp.dense(v[0], v[1], v[2])));

        // relu
        let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 1, 5)];
        let x = away_from_zero(&mut rng, &shape, 1e-3);
        record("relu", check_gradients(&mut rng, &[x], &|tp, v| Ok(tp.relu(v[0]))));

        // mean pool
        let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 6), dim(&mut rng, 1, 3)];
        let x = random_tensor(&mut rng, &shape);
        record("mean_pool", check_gradients(&mut rng, &[x], &|tp, v| tp.mean_pool(v[0])));

        // mask
        let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 4)];
        let x = random_tensor(&mut rng, &shape);
        let bits = Tensor::new(shape.to_vec(), (0..x.len()).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
        record("mask", check_gradients(&mut rng, &[x], &|tp, v| tp.mask(v[0], &bits)));

        // stack + reshape
        let (n, k, m) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 3));
        let parts: Vec<Tensor> = (0..m).map(|_| random_tensor(&mut rng, &[n, k])).collect();
        record("stack", check_gradients(&mut rng, &parts, &|tp, v| tp.stack(v)));
        let x = random_tensor(&mut rng, &[n, m, k]);
        record("reshape", check_gradients(&mut rng, &[x], &|tp, v| tp.reshape(v[0], &[n, m * k])));

        // sum
        let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 1, 4)];
        let x = random_tensor(&mut rng, &shape);
        record("sum", check_gradients(&mut rng, &[x], &|tp, v| Ok(tp.sum(v[0]))));

        // loss terms
        let (n, d) = (dim(&mut rng, 2, 6), dim(&mut rng, 1, 5));
        let a = random_tensor(&mut rng, &[n, d]);
        let b = random_tensor(&mut rng, &[n, d]);
        record("invariance", check_gradients(&mut rng, &[a, b], &|tp, v| tp.invariance(v[0], v[1])));
        let gamma = rng.uniform_range(0.5, 1.5);
        let z = batch_off_kink(&mut rng, n, d, gamma, 1e-4, 1e-3);
        record("variance", check_gradients(&mut rng, &[z], &|tp, v| tp.variance(v[0], gamma, 1e-4)));
        let d = dim(&mut rng, 2, 5);
        let z = random_tensor(&mut rng, &[n, d]);
        record("covariance", check_gradients(&mut rng, &[z], &|tp, v| tp.covariance(v[0])));

        // weighted sum of scalars
        let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[2])).collect();
        let ws: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        record(
            "weighted_sum",
            check_gradients(&mut rng, &xs, &|tp, v| {
                let terms: Vec<(Var, f64)> = v.iter().zip(&ws).map(|(&x, &w)| (tp.sum(x), w)).collect();
                tp.weighted_sum(&terms)
            }),
        );

        // softmax cross-entropy
        let (n, c) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 5));
        let logits = random_tensor(&mut rng, &[n, c]);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        record("softmax_cross_entropy", check_gradients(&mut rng, &[logits], &|tp, v| tp.softmax_cross_entropy(v[0], &labels)));

        // full objective with default weights
        let (n, d) = (dim(&mut rng, 3, 6), dim(&mut rng, 2, 4));
        let w = LossWeights::default();
        let z1 = batch_off_kink(&mut rng, n, d, w.gamma, w.eps, 1e-3);
        let z2 = batch_off_kink(&mut rng, n, d, w.gamma, w.eps, 1e-3);
        record("total_loss", check_gradients(&mut rng, &[z1, z2], &|tp, v| Ok(total_loss_on_tape(tp, v[0], v[1], &w)?.0)));
    }
    results.push(("model_ssl_step", model_gradient_error(&mut rng)));
    results
}

/// End-to-end check: total loss of two masked views through a small model,
/// differentiated with respect to every parameter.
fn model_gradient_error(rng: &mut Rng) -> f64 {
    use crossl::data::MultimodalBatch;
    let spec = tiny_model_spec();
    let state = ModelState::init(spec.clone(), 3).unwrap();
    let n = 5;
    let batch = MultimodalBatch {
        indices: (0..n).collect(),
        windows: spec.modalities.iter().map(|m| Some(random_tensor(rng, &[n, m.window_len, m.channels]))).collect(),
        labels: None,
        available: vec![true; n * 2],
    };
    let mask_a = Tensor::new(vec![n, 2, 3], (0..n * 6).map(|i| if (i / 3) % 2 == (i / 6) % 2 { 1.0 } else { 0.0 }).collect()).unwrap();
    let mask_b = Tensor::full(&[n, 2, 3], 1.0);
    let w = LossWeights { gamma: 5.0, ..LossWeights::default() };
    let loss_of = |st: &ModelState| -> (Tape, Var) {
        let mut tape = Tape::new();
        let q = st.encode_all_on_tape(&mut tape, &batch).unwrap();
        let qa = tape.mask(q, &mask_a).unwrap();
        let qb = tape.mask(q, &mask_b).unwrap();
        let za = st.aggregate_on_tape(&mut tape, qa).unwrap();
        let zb = st.aggregate_on_tape(&mut tape, qb).unwrap();
        let (l, _) = total_loss_on_tape(&mut tape, za, zb, &w).unwrap();
        (tape, l)
    };
    let mut analytic = state.clone();
    let (tape, l) = loss_of(&analytic);
    tape.backward(l, &mut analytic.params).unwrap();
    let mut worst: f64 = 0.0;
    for pi in 0..state.params.len() {
        let numeric = numeric_gradient(
            |x| {
                let mut st = state.clone();
                st.params[pi].value = x.clone();
                let (tape, l) = loss_of(&st);
                tape.value(l).values()[0]
            },
            &state.params[pi].value,
            DEFAULT_STEP,
        );
        for (&a, &b) in analytic.params[pi].grad.values().iter().zip(numeric.values()) {
            worst = worst.max(relative_error(a, b));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Independent loss oracles (plain loops, no shared helpers)

pub fn oracle_invariance(z1: &Tensor, z2: &Tensor) -> f64 {
    let (n, d) = (z1.dim(0), z1.dim(1));
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..d {
            let diff = z1.values()[i * d + j] - z2.values()[i * d + j];
            row += diff * diff;
        }
        total += row / d as f64;
    }
    total / n as f64
}

pub fn oracle_variance(z: &Tensor, gamma: f64, eps: f64) -> f64 {
    let (n, d) = (z.dim(0), z.dim(1));
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| z.values()[i * d + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        total += (gamma - (var + eps).sqrt()).max(0.0);
    }
    total / d as f64
}

pub fn oracle_covariance(z: &Tensor) -> f64 {
    let (n, d) = (z.dim(0), z.dim(1));
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z.values()[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut total = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j == k {
                continue;
            }
            let mut c = 0.0;
            for i in 0..n {
                c += (z.values()[i * d + j] - means[j]) * (z.values()[i * d + k] - means[k]);
            }
            c /= (n - 1) as f64;
            total += c * c;
        }
    }
    total / d as f64
}

// ---------------------------------------------------------------------------
// Brute-force macro-F1 from an explicit confusion matrix

pub fn oracle_macro_f1(pred: &[usize], truth: &[usize], c: usize) -> (f64, Vec<f64>) {
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in pred.iter().zip(truth) {
        confusion[y][p] += 1;
    }
    let per: Vec<f64> = (0..c)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let col: usize = (0..c).map(|y| confusion[y][k]).sum();
            let row: usize = confusion[k].iter().sum();
            let precision = if col == 0 { 0.0 } else { tp / col as f64 };
            let recall = if row == 0 { 0.0 } else { tp / row as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let mean = per.iter().sum::<f64>() / c as f64;
    (mean, per)
}

// ---------------------------------------------------------------------------
// Small fixtures

/// A quick synthetic dataset whose windows fit the default encoder.
pub fn small_synthetic(samples_per_class: usize, seed: u64) -> MultimodalDataset {
    let m = |name: &str, window_len, channels| SyntheticModality { name: name.into(), window_len, channels };
    generate_synthetic(&SyntheticConfig {
        samples_per_class,
        modalities: vec![m("accel", 24, 2), m("gyro", 30, 1), m("ppg", 22, 1)],
        num_classes: 3,
        base_frequency: 2.0,
        frequency_step: 2.0,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn small_model(dataset: &MultimodalDataset) -> ModelSpec {
    let layer = |out_channels, kernel_width, stride| ConvLayerSpec { out_channels, kernel_width, stride };
    ModelSpec {
        modalities: dataset.modalities.clone(),
        encoder: EncoderSpec { conv: [layer(4, 5, 2), layer(6, 5, 2), layer(8, 3, 1)], embedding_dim: 6 },
        aggregator: AggregatorSpec { hidden: vec![16], output_dim: 8 },
        num_classes: dataset.num_classes,
    }
}
