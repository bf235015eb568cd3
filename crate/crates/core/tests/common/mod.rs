//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use maxmatch_core::autodiff::{Tape, Tensor};
use maxmatch_core::data::{make_two_moons, split_ssl, two_moons_test_set, UnlabeledPool};
use maxmatch_core::model::{Architecture, Network};
use maxmatch_core::trainer::TrainData;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps this file free of the crate's own sampling helpers.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Direct sliding-window convolution over one channel-major sample.
#[allow(clippy::too_many_arguments)]
pub fn sliding_conv(
    x: &[f64],
    kernel: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut padded = vec![0.0; cin * (h + 2 * pad) * (w + 2 * pad)];
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    for c in 0..cin {
        for y in 0..h {
            for xx in 0..w {
                padded[(c * ph + y + pad) * pw + xx + pad] = x[(c * h + y) * w + xx];
            }
        }
    }
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += kernel[((o * cin + c) * k + dy) * k + dx]
                                * padded[(c * ph + y + dy) * pw + xx + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Singular values of a row-major `rows × cols` matrix by one-sided Jacobi
/// rotations, in descending order.
pub fn jacobi_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // Work on columns of A; rotations orthogonalize them pairwise.
    let mut u: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off: f64 = 0.0;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|v| v * v).sum();
                let beta: f64 = u[q].iter().map(|v| v * v).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = u.split_at_mut(q);
                for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    (*x, *y) = (c * *x - s * *y, s * *x + c * *y);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| gaussian(rng)).collect(),
    )
    .unwrap()
}

/// A random small MLP or single-conv network with matching input batch.
pub fn random_network(rng: &mut ChaCha8Rng, seed: u64) -> (Network, Tensor, Vec<usize>) {
    let classes = rng.random_range(2..=4);
    let arch = if rng.random_bool(0.5) {
        let input = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=6))
            .collect();
        Architecture::mlp(input, &hidden, classes)
    } else {
        let c = rng.random_range(1..=2);
        let side = rng.random_range(3..=5);
        let k = [1, 3][rng.random_range(0..2)];
        Architecture::conv_net(
            (c, side, side),
            rng.random_range(1..=3),
            k,
            &[rng.random_range(2..=5)],
            classes,
        )
    };
    let net = Network::init(&arch, seed).unwrap();
    let n = rng.random_range(1..=4);
    let d = arch.input_len();
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| gaussian(rng)).collect()).unwrap();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (net, x, y)
}

/// Smallest `|pre-activation|` of any hidden unit on the batch `x`.
pub fn relu_margin(net: &Network, x: &Tensor) -> f64 {
    let snap = net.snapshot();
    let mut best = f64::INFINITY;
    for cut in 1..snap.layers.len() {
        let mut head = snap.clone();
        head.layers.truncate(cut);
        let z = Network::from_snapshot(head).unwrap().forward(x).unwrap();
        best = z.data().iter().fold(best, |a, v| a.min(v.abs()));
    }
    best
}

/// Like [`random_network`], redrawn until no hidden unit sits within `1e-3`
/// of the ReLU kink, so the loss is differentiable around the draw.
pub fn random_smooth_network(rng: &mut ChaCha8Rng, seed: u64) -> (Network, Tensor, Vec<usize>) {
    loop {
        let draw = random_network(rng, seed);
        if relu_margin(&draw.0, &draw.1) > 1e-3 {
            return draw;
        }
    }
}

/// Mean hard cross-entropy computed without the tape.
pub fn plain_loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    let s = net.forward(x).unwrap();
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let row = s.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[yi];
    }
    total / y.len() as f64
}

pub fn tape_gradients(net: &Network, x: &Tensor, y: &[usize]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let params = net.register(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = net.forward_on_tape(&mut tape, &params, xv).unwrap();
    let n = y.len();
    let loss = tape
        .cross_entropy(logits, y, &vec![1.0 / n as f64; n])
        .unwrap();
    tape.backward(loss).unwrap();
    params.iter().map(|&p| tape.grad(p)).collect()
}

/// Largest relative error of reverse-mode gradients against central
/// differences with step `1e-5`; denominators are floored at `1e-3` so that
/// vanishing coordinates are compared in absolute terms.
pub fn gradcheck(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    let grads = tape_gradients(net, x, y);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut().nth(pi).unwrap().data_mut()[e] += h;
            let mut minus = net.clone();
            minus.params_mut().nth(pi).unwrap().data_mut()[e] -= h;
            let fd = (plain_loss(&plus, x, y) - plain_loss(&minus, x, y)) / (2.0 * h);
            let a = g.data()[e];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

/// Two-moons data at the desk-scale protocol: `n` training points, a
/// `labels_per_class` fold chosen by `seed`, and a 2000-point test set.
pub fn moons(n: usize, labels_per_class: usize, seed: u64) -> TrainData {
    let train = make_two_moons(n, 0.1, seed).unwrap();
    let split = split_ssl(&train, labels_per_class, seed, UnlabeledPool::All).unwrap();
    let test = two_moons_test_set(0.1, seed.wrapping_mul(2)).unwrap();
    TrainData { train, split, test }
}
