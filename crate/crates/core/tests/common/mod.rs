//! Helpers shared by the integration test targets: naive reference kernels, a
//! central finite-difference checker, and small dataset builders.
#![allow(dead_code)]

use advsyn::data::{ImageDataset, Provenance, NEGATIVE, POSITIVE};
use advsyn::losses;
use advsyn::tape::{BatchNormParams, BatchNormStats};
use advsyn::{Activation, Mode, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_DENOM_FLOOR: f64 = 1e-8;
pub const CASES_PER_OP: usize = 10;

pub fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Values with magnitude in `[0.1, 1.1)` and random sign, so no element sits
/// within a finite-difference step of a ReLU kink.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.1);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart in random order, so every pooling window
/// has a unique maximum that a small perturbation cannot change.
pub fn distinct_values(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let order = rng.permutation(n);
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - 0.5)
}

/// Naive cross-correlation: `x [n,c,h,w]`, `k [o,c,kh,kw]`, bias `[o]`.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = *x.shape() else {
        panic!("rank")
    };
    let [o, kc, kh, kw] = *k.shape() else {
        panic!("rank")
    };
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut y = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ir = (r * stride + a) as isize - pad as isize;
                                let iq = (q * stride + bb) as isize - pad as isize;
                                if ir < 0 || iq < 0 || ir >= h as isize || iq >= w as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + ci) * h + ir as usize) * w + iq as usize];
                                acc += xv * kd[((oi * c + ci) * kh + a) * kw + bb];
                            }
                        }
                    }
                    y[((ni * o + oi) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], y).unwrap()
}

/// Naive transposed convolution: `x [n,ci,h,w]`, `k [ci,co,kh,kw]`, bias `[co]`.
/// Every input pixel scatters its kernel-weighted copy into the output.
pub fn naive_conv_transpose(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, ci, h, w] = *x.shape() else {
        panic!("rank")
    };
    let [kci, co, kh, kw] = *k.shape() else {
        panic!("rank")
    };
    assert_eq!(ci, kci);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let (xd, kd) = (x.data(), k.data());
    let mut y = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for c_out in 0..co {
            for v in &mut y[(ni * co + c_out) * oh * ow..(ni * co + c_out + 1) * oh * ow] {
                *v = b.data()[c_out];
            }
        }
        for c_in in 0..ci {
            for r in 0..h {
                for q in 0..w {
                    let xv = xd[((ni * ci + c_in) * h + r) * w + q];
                    for c_out in 0..co {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yr = (r * stride + a) as isize - pad as isize;
                                let yq = (q * stride + bb) as isize - pad as isize;
                                if yr < 0 || yq < 0 || yr >= oh as isize || yq >= ow as isize {
                                    continue;
                                }
                                y[((ni * co + c_out) * oh + yr as usize) * ow + yq as usize] +=
                                    xv * kd[((c_in * co + c_out) * kh + a) * kw + bb];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], y).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Builds a graph on a fresh tape from `inputs` (all recorded as parameters).
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> advsyn::Result<Var> + 'a;

fn scalar_loss(inputs: &[Tensor], build: &Build, weights: Option<&[f64]>) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &vars).unwrap();
    let loss = match weights {
        Some(w) => tape.weighted_sum(y, w).unwrap(),
        None => y,
    };
    (tape, vars, loss)
}

/// Largest relative error between analytic and central-difference gradients of
/// `sum(w * build(inputs))` over every input element, with random fixed `w`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let probe = scalar_loss(inputs, build, None);
    let out_len = probe.0.value(probe.2).len();
    let mut rng = Rng::new(seed, 1000);
    let w: Vec<f64> = (0..out_len).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

    let (tape, vars, loss) = scalar_loss(inputs, build, Some(&w));
    let grads = tape.backward(loss).unwrap();
    let value_at = |xs: &[Tensor]| {
        let (t, _, l) = scalar_loss(xs, build, Some(&w));
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every input");
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (value_at(&plus) - value_at(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// One gradient-check case per seed for the named operation; returns the worst
/// relative error across cases.
pub fn op_gradient_error(op: &str, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases as u64 {
        let mut rng = Rng::new(seed, 77);
        let err = match op {
            "conv2d" => {
                let (n, c, o) = (
                    dim(&mut rng, 1, 2),
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 3),
                );
                let k = dim(&mut rng, 1, 3);
                let stride = dim(&mut rng, 1, 2);
                let pad = rng.below(2);
                let h = dim(&mut rng, k.max(3), 6);
                let w = dim(&mut rng, k.max(3), 6);
                let inputs = [
                    random_tensor(&[n, c, h, w], &mut rng, -1.0, 1.0),
                    random_tensor(&[o, c, k, k], &mut rng, -1.0, 1.0),
                    random_tensor(&[o], &mut rng, -1.0, 1.0),
                ];
                gradient_error(
                    &inputs,
                    &move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
                    seed,
                )
            }
            "conv2d_transpose" => {
                let (n, c, o) = (
                    dim(&mut rng, 1, 2),
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 3),
                );
                let stride = dim(&mut rng, 1, 2);
                let k = dim(&mut rng, stride.max(2), 4);
                let pad = rng.below(2);
                let h = dim(&mut rng, 2, 5);
                let w = dim(&mut rng, 2, 5);
                let inputs = [
                    random_tensor(&[n, c, h, w], &mut rng, -1.0, 1.0),
                    random_tensor(&[c, o, k, k], &mut rng, -1.0, 1.0),
                    random_tensor(&[o], &mut rng, -1.0, 1.0),
                ];
                gradient_error(
                    &inputs,
                    &move |t, v| t.conv2d_transpose(v[0], v[1], v[2], stride, pad),
                    seed,
                )
            }
            "dense" => {
                let (n, f, g) = (
                    dim(&mut rng, 1, 4),
                    dim(&mut rng, 1, 6),
                    dim(&mut rng, 1, 5),
                );
                let inputs = [
                    random_tensor(&[n, f], &mut rng, -1.0, 1.0),
                    random_tensor(&[f, g], &mut rng, -1.0, 1.0),
                    random_tensor(&[g], &mut rng, -1.0, 1.0),
                ];
                gradient_error(&inputs, &|t, v| t.dense(v[0], v[1], v[2]), seed)
            }
            "relu" | "leaky_relu" | "tanh" | "sigmoid" => {
                let kind = match op {
                    "relu" => Activation::Relu,
                    "leaky_relu" => Activation::LeakyRelu(0.2),
                    "tanh" => Activation::Tanh,
                    _ => Activation::Sigmoid,
                };
                let shape = [
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 4),
                    dim(&mut rng, 1, 4),
                ];
                let inputs = [away_from_zero(&shape, &mut rng)];
                gradient_error(&inputs, &move |t, v| t.activation(v[0], kind), seed)
            }
            "batchnorm" => {
                let (n, c) = (dim(&mut rng, 2, 3), dim(&mut rng, 1, 3));
                let (h, w) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
                let inputs = [
                    random_tensor(&[n, c, h, w], &mut rng, -1.0, 1.0),
                    random_tensor(&[c], &mut rng, 0.5, 1.5),
                    random_tensor(&[c], &mut rng, -0.5, 0.5),
                ];
                gradient_error(
                    &inputs,
                    &move |t, v| {
                        let mut stats = BatchNormStats::new(c);
                        t.batchnorm(
                            v[0],
                            v[1],
                            v[2],
                            &mut stats,
                            Mode::Train,
                            BatchNormParams::default(),
                        )
                    },
                    seed,
                )
            }
            "maxpool" => {
                let window = dim(&mut rng, 1, 2);
                let stride = dim(&mut rng, 1, 2);
                let shape = [
                    dim(&mut rng, 1, 2),
                    dim(&mut rng, 1, 2),
                    dim(&mut rng, 2, 6),
                    dim(&mut rng, 2, 6),
                ];
                let inputs = [distinct_values(&shape, &mut rng)];
                gradient_error(
                    &inputs,
                    &move |t, v| t.maxpool2d(v[0], window, stride),
                    seed,
                )
            }
            "global_avg_pool" => {
                let shape = [
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 3),
                    dim(&mut rng, 1, 5),
                    dim(&mut rng, 1, 5),
                ];
                let inputs = [random_tensor(&shape, &mut rng, -1.0, 1.0)];
                gradient_error(&inputs, &|t, v| t.global_avg_pool(v[0]), seed)
            }
            "binary_cross_entropy" => {
                let n = dim(&mut rng, 1, 8);
                let target: Vec<f64> = (0..n)
                    .map(|_| f64::from(u8::from(rng.bernoulli(0.5))))
                    .collect();
                let inputs = [random_tensor(&[n, 1], &mut rng, 0.05, 0.95)];
                gradient_error(
                    &inputs,
                    &move |t, v| losses::binary_cross_entropy(t, v[0], &target),
                    seed,
                )
            }
            "discriminator_loss" => {
                let (a, b) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 6));
                let inputs = [
                    random_tensor(&[a, 1], &mut rng, 0.05, 0.95),
                    random_tensor(&[b, 1], &mut rng, 0.05, 0.95),
                ];
                gradient_error(
                    &inputs,
                    &|t, v| losses::discriminator_loss(t, v[0], v[1]),
                    seed,
                )
            }
            "generator_loss" => {
                let inputs = [random_tensor(
                    &[dim(&mut rng, 1, 6), 1],
                    &mut rng,
                    0.05,
                    0.95,
                )];
                gradient_error(&inputs, &|t, v| losses::generator_loss(t, v[0]), seed)
            }
            "l2_penalty" => {
                let lambda = rng.uniform_range(1e-4, 1.0);
                let inputs = [
                    random_tensor(
                        &[dim(&mut rng, 1, 4), dim(&mut rng, 1, 4)],
                        &mut rng,
                        -1.0,
                        1.0,
                    ),
                    random_tensor(&[dim(&mut rng, 1, 5)], &mut rng, -1.0, 1.0),
                ];
                gradient_error(&inputs, &move |t, v| losses::l2_penalty(t, v, lambda), seed)
            }
            other => panic!("no gradient case for {other}"),
        };
        worst = worst.max(err);
    }
    worst
}

pub const GRADIENT_OPS: [&str; 14] = [
    "conv2d",
    "conv2d_transpose",
    "dense",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "batchnorm",
    "maxpool",
    "global_avg_pool",
    "binary_cross_entropy",
    "discriminator_loss",
    "generator_loss",
    "l2_penalty",
];

/// Worst absolute difference between the engine and the naive kernels over
/// `cases` random conv and transposed-conv problems up to 2x8x16x16.
pub fn conv_oracle_error(cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(2024, 31);
    for _ in 0..cases {
        let n = dim(&mut rng, 1, 2);
        let c = dim(&mut rng, 1, 8);
        let o = dim(&mut rng, 1, 8);
        let h = dim(&mut rng, 1, 16);
        let w = dim(&mut rng, 1, 16);
        let stride = dim(&mut rng, 1, 3);
        let pad = rng.below(3);
        let k = dim(&mut rng, 1, 5).min(h + 2 * pad).min(w + 2 * pad);
        let x = random_tensor(&[n, c, h, w], &mut rng, -1.0, 1.0);
        let kernel = random_tensor(&[o, c, k, k], &mut rng, -1.0, 1.0);
        let bias = random_tensor(&[o], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(x.clone()),
            tape.constant(kernel.clone()),
            tape.constant(bias.clone()),
        );
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(y),
            &naive_conv2d(&x, &kernel, &bias, stride, pad),
        ));

        // Transposed: the input is at most 16x16 and the output stays positive.
        let ts = dim(&mut rng, 1, 2);
        let tk = dim(&mut rng, ts.max(1), 5);
        let th = dim(&mut rng, 1, 16);
        let tw = dim(&mut rng, 1, 16);
        let min_out = ((th.min(tw) - 1) * ts + tk) as isize;
        let tp = rng.below(3).min(((min_out - 1) / 2).max(0) as usize);
        let tx = random_tensor(&[n, c, th, tw], &mut rng, -1.0, 1.0);
        let tkernel = random_tensor(&[c, o, tk, tk], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(tx.clone()),
            tape.constant(tkernel.clone()),
            tape.constant(bias.clone()),
        );
        let y = tape.conv2d_transpose(xv, kv, bv, ts, tp).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(y),
            &naive_conv_transpose(&tx, &tkernel, &bias, ts, tp),
        ));
    }
    worst
}

/// A dataset of `n_pos` positives and `n_neg` negatives of constant images,
/// pixel value encoding the index so items stay distinguishable.
pub fn labeled_dataset(
    n_pos: usize,
    n_neg: usize,
    size: usize,
    provenance: Provenance,
) -> ImageDataset {
    let mut ds = ImageDataset::new("toy");
    let total = (n_pos + n_neg).max(1) as f64;
    for i in 0..n_pos + n_neg {
        let label = if i < n_pos { POSITIVE } else { NEGATIVE };
        let v = -1.0 + 2.0 * i as f64 / total;
        ds.push(Tensor::full(&[1, size, size], v), label, provenance)
            .unwrap();
    }
    ds
}

/// A tiny classifier configuration whose plateau callbacks fire quickly.
/// `min_delta` is so large that no epoch after the first counts as an
/// improvement, which forces a validation plateau.
pub fn plateau_config() -> advsyn::classifier::ClassifierConfig {
    advsyn::classifier::ClassifierConfig {
        image_size: 8,
        blocks: vec![(1, 2)],
        dense_units: 4,
        block_dropout: 0.0,
        dense_dropout: 0.0,
        batch_size: 8,
        max_epochs: 50,
        min_delta: 1e9,
        lr_reduce_patience: 3,
        early_stop_patience: 12,
        min_lr: 1e-4,
        seed: 21,
        ..advsyn::classifier::ClassifierConfig::default()
    }
}

/// Learning rates the plateau harness must record: the default 0.0005 held for
/// the best epoch plus `patience` stalled epochs, then halved every `patience`
/// epochs and floored at 1e-4, until the early stop after 12 stalled epochs.
pub const PLATEAU_LRS: [f64; 13] = [
    5e-4, 5e-4, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 1.25e-4, 1.25e-4, 1e-4, 1e-4, 1e-4,
];
