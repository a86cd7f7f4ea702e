use clonegrade::fusion::{
    batch_gradient, batch_loss, film_modulate, forward, idx, predict_all, train, FusionConfig, FusionParams,
    FusionSample, TENSOR_NAMES,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(d: usize, d_k: usize, hidden: usize, seed: u64) -> FusionParams {
    let mut p = FusionParams::zeros(d, d_k, hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors.iter_mut() {
        for x in t.data.iter_mut() {
            // bounded away from zero so no parameter group is inert
            let mag: f64 = rng.random_range(0.05..0.6);
            *x = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    p
}

fn random_sample(d: usize, rng: &mut ChaCha8Rng, label: u8) -> FusionSample {
    let raw: [f64; 7] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
    let sum: f64 = raw.iter().sum();
    FusionSample {
        pair_id: String::new(),
        h: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        s: raw.map(|v| v / sum),
        v: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        label: Some(label),
    }
}

/// Largest relative error between analytic and central-difference gradients.
fn max_gradient_error(params: &FusionParams, batch: &[&FusionSample], smoothing: f64) -> (f64, &'static str) {
    let (_, analytic) = batch_gradient(batch, params, smoothing).unwrap();
    let step = 1e-6;
    let mut worst = (0.0, "");
    for (ti, t) in params.tensors.iter().enumerate() {
        for k in 0..t.data.len() {
            let mut plus = params.clone();
            plus.tensors[ti].data[k] += step;
            let mut minus = params.clone();
            minus.tensors[ti].data[k] -= step;
            let numeric = (batch_loss(batch, &plus, smoothing).unwrap() - batch_loss(batch, &minus, smoothing).unwrap())
                / (2.0 * step);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            if rel > worst.0 {
                worst = (rel, TENSOR_NAMES[ti]);
            }
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let params = random_params(8, 6, 5, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let samples: Vec<FusionSample> = (0..10).map(|i| random_sample(8, &mut rng, (i % 7) as u8)).collect();
    let batch: Vec<&FusionSample> = samples.iter().collect();
    let (err, name) = max_gradient_error(&params, &batch, 0.1);
    assert!(err < 1e-4, "relative error {err:e} in {name}");
}

/// Straight-line FiLM written without the library's helpers.
fn film_oracle(h: &[f64], s: &[f64; 7], p: &FusionParams) -> Vec<f64> {
    let (d, hid) = (p.d, p.hidden);
    let (w1, b1, w2, b2) = (p.t(idx::W1), p.t(idx::B1), p.t(idx::W2), p.t(idx::B2));
    let mut a = vec![0.0; hid];
    for i in 0..hid {
        let mut z = b1[i];
        for j in 0..7 {
            z += w1[i * 7 + j] * s[j];
        }
        a[i] = z.tanh();
    }
    let mut out = vec![0.0; d];
    for j in 0..d {
        let mut gamma = b2[j];
        let mut beta = b2[d + j];
        for i in 0..hid {
            gamma += w2[j * hid + i] * a[i];
            beta += w2[(d + j) * hid + i] * a[i];
        }
        out[j] = (1.0 + gamma) * h[j] + beta;
    }
    out
}

#[test]
fn film_matches_straight_line_oracle() {
    let p = random_params(12, 4, 6, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let s = random_sample(12, &mut rng, 0);
        let got = film_modulate(&s.h, &s.s, &p).unwrap();
        for (a, b) in got.iter().zip(film_oracle(&s.h, &s.s, &p)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn film_is_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for k in 0..100 {
        let p = FusionParams::init(16, 8, 32, [0.0; 7], k);
        let s = random_sample(16, &mut rng, 0);
        assert_eq!(film_modulate(&s.h, &s.s, &p).unwrap(), s.h);
    }
}

/// Three Gaussian clusters in the semantic input, well separated.
fn toy_dataset(n: usize, d: usize, seed: u64) -> Vec<FusionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let label = (i % 3) as u8;
            FusionSample {
                pair_id: format!("t{i}"),
                h: centers[label as usize].iter().map(|c| c + rng.random_range(-0.3..0.3)).collect(),
                s: [1.0 / 7.0; 7],
                v: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                label: Some(label),
            }
        })
        .collect()
}

fn toy_config(epochs: usize, seed: u64) -> FusionConfig {
    FusionConfig {
        d_k: 16,
        hidden: 8,
        epochs,
        learning_rate: 1e-2,
        seed,
        ..Default::default()
    }
}

#[test]
fn toy_training_separates_and_is_deterministic() {
    let data = toy_dataset(200, 16, 50);
    let cfg = toy_config(40, 51);
    let out = train(&data, &[], &cfg, |_, _| Ok(())).unwrap();
    let preds = predict_all(&data, &out.params).unwrap();
    let acc = preds.iter().zip(&data).filter(|(p, s)| Some(p.label()) == s.label).count() as f64 / data.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(out.epochs[2].loss < out.epochs[0].loss);
    assert_eq!(out.steps.len(), 250);

    let again = train(&data, &[], &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(out.params, again.params);
    assert_eq!(out.steps, again.steps);
}

#[test]
fn full_scale_step_count() {
    // 73,670 training pairs, 5 epochs, batch 32; tiny widths keep it fast
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let data: Vec<FusionSample> = (0..73_670).map(|i| random_sample(2, &mut rng, (i % 7) as u8)).collect();
    let cfg = FusionConfig {
        d_k: 2,
        hidden: 2,
        seed: 61,
        ..Default::default()
    };
    let mut checkpoints = Vec::new();
    let out = train(&data, &[], &cfg, |log, _| {
        checkpoints.push(log.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(out.steps.len(), 11_511);
    assert_eq!(out.epochs.len(), 5);
    assert_eq!(*checkpoints.last().unwrap(), 11_511);
}

proptest! {
    #[test]
    fn output_on_simplex_and_shift_invariant(seed in 0u64..500, shift in -50.0f64..50.0) {
        let mut p = random_params(6, 4, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let s = random_sample(6, &mut rng, 0);
        let before = forward(&s, &p).unwrap();
        prop_assert!((before.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for b in p.tensors[idx::BC].data.iter_mut() {
            *b += shift;
        }
        let after = forward(&s, &p).unwrap();
        prop_assert_eq!(before.label(), after.label());
    }
}
