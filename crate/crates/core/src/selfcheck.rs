//! Headless property checks, run by the `selfcheck` subcommand.
//!
//! Each check is a reduced-size version of the crate's property suites and
//! reports a one-line verdict.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{kernels, Tape, Tensor};
use crate::convergence::{horizon_sweep, ConvergenceSpec, SyntheticMinimax};
use crate::data::{make_two_moons, split_ssl, two_moons_test_set, UnlabeledPool};
use crate::losses::{aggregate, ce_hard, ce_soft, clamp_probs, zero_one, Aggregator};
use crate::model::{conv_operator_matrix, Architecture, Network};
use crate::rng::rng_from;
use crate::theory::{constants, generalization_bound, max_simplex_weights, BoundConfig};
use crate::trainer::{TrainConfig, TrainData, Trainer};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("loss-lemmas", loss_lemmas),
    ("gradients", gradients),
    ("conv-operator", conv_operator),
    ("aggregation", aggregation),
    ("prox", prox),
    ("bound-scaling", bound_scaling),
    ("k1-degeneracy", k1_degeneracy),
    ("rate-slope", rate_slope),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => CheckOutcome {
                name,
                passed,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn normal(rng: &mut impl RngCore) -> f64 {
    StandardNormal.sample(rng)
}

fn softmax(s: &[f64]) -> Vec<f64> {
    kernels::softmax_rows(s, s.len())
}

fn loss_lemmas() -> Result<(bool, String)> {
    let mut rng = rng_from(11);
    let mut violations = 0;
    for _ in 0..10_000 {
        let nc = rng.random_range(2..=10);
        let eps = rng.random_range(0.01..0.49);
        let (c1, c2) = constants(nc as f64, eps)?;
        let s: Vec<f64> = (0..nc).map(|_| 3.0 * normal(&mut rng)).collect();
        let s2: Vec<f64> = (0..nc).map(|_| 3.0 * normal(&mut rng)).collect();
        let y = rng.random_range(0..nc);
        let pred = |v: &[f64]| crate::autodiff::argmax(v);
        let hard = ce_hard(&s, y)?;
        if std::f64::consts::LN_2 * zero_one(pred(&s), y, nc)? > hard {
            violations += 1;
        }
        let p = clamp_probs(&softmax(&s), eps);
        let p2 = clamp_probs(&softmax(&s2), eps);
        let soft = ce_soft(&p2, &p, eps)?;
        let disagree = zero_one(pred(&p2), pred(&p), nc)?;
        if nc as f64 * eps * (1.0 / (1.0 - eps)).ln() * disagree > soft {
            violations += 1;
        }
        if zero_one(pred(&s2), y, nc)? > c1 * soft + c2 * hard {
            violations += 1;
        }
    }
    Ok((
        violations == 0,
        format!("{violations} violations over 10000 draws"),
    ))
}

fn gradients() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let arch = if seed % 2 == 0 {
            Architecture::mlp(3, &[4], 3)
        } else {
            Architecture::conv_net((1, 4, 4), 2, 3, &[5], 3)
        };
        let net = Network::init(&arch, seed)?;
        let mut rng = rng_from(100 + seed);
        let n = 4;
        let x = Tensor::new(
            vec![n, arch.input_len()],
            (0..n * arch.input_len())
                .map(|_| normal(&mut rng))
                .collect(),
        )?;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let loss_of = |net: &Network| -> Result<f64> {
            let s = net.forward(&x)?;
            let mut t = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                t += ce_hard(s.row(i), yi)?;
            }
            Ok(t / n as f64)
        };
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = net.forward_on_tape(&mut tape, &params, xv)?;
        let loss = tape.cross_entropy(logits, &y, &vec![1.0 / n as f64; n])?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad(p)).collect();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let mut plus = net.clone();
                plus.params_mut().nth(pi).expect("param").data_mut()[e] += h;
                let mut minus = net.clone();
                minus.params_mut().nth(pi).expect("param").data_mut()[e] -= h;
                let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
                let a = g.data()[e];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn conv_operator() -> Result<(bool, String)> {
    let mut rng = rng_from(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let k = [1, 3][rng.random_range(0..2)];
        let pad = rng.random_range(0..=k / 2);
        let kernel = Tensor::new(
            vec![cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| normal(&mut rng)).collect(),
        )?;
        let x: Vec<f64> = (0..cin * h * w).map(|_| normal(&mut rng)).collect();
        let op = conv_operator_matrix(&kernel, h, w, pad)?;
        let geom = kernels::ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: k,
            padding: pad,
        };
        let direct = kernels::conv2d(&x, kernel.data(), &geom);
        let via_op = kernels::matmul(op.data(), &x, op.rows(), op.row_len(), 1);
        for (a, b) in direct.iter().zip(&via_op) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst < 1e-12, format!("max abs error {worst:.2e}")))
}

fn aggregation() -> Result<(bool, String)> {
    let mut rng = rng_from(31);
    let mut bad = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=8);
        let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let (max, _) = aggregate(&v, Aggregator::Max)?;
        let (mean, _) = aggregate(&v, Aggregator::Mean)?;
        let (min, _) = aggregate(&v, Aggregator::Min)?;
        let (w, val) = max_simplex_weights(&v)?;
        let weighted: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if val != max || weighted != max || !(min <= mean && mean <= max) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} mismatches over 10000 vectors")))
}

fn prox() -> Result<(bool, String)> {
    let single = SyntheticMinimax::new(vec![vec![0.0]])?;
    let p = single.prox_point(&[3.0], 1.0)?;
    let closed = (p.point[0] - 2.0).abs() < 1e-10
        && (single.moreau_grad_norm(&[3.0], 1.0)? - 2.0).abs() < 1e-10;
    let inst = SyntheticMinimax::random(5, 4, 1.0, 41)?;
    let mut rng = rng_from(42);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..20 {
        let theta: Vec<f64> = (0..4).map(|_| 2.0 * normal(&mut rng)).collect();
        let p = inst.prox_point(&theta, 1.0)?;
        let grad: Vec<f64> = theta
            .iter()
            .zip(&p.point)
            .map(|(t, q)| 2.0 * (t - q))
            .collect();
        for i in 0..4 {
            let mut a = theta.clone();
            a[i] += h;
            let mut b = theta.clone();
            b[i] -= h;
            let fd = (inst.moreau_envelope(&a, 1.0)? - inst.moreau_envelope(&b, 1.0)?) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1e-3));
        }
    }
    Ok((
        closed && worst < 1e-4,
        format!(
            "closed form {}, max envelope gradient error {worst:.2e}",
            if closed { "exact" } else { "wrong" }
        ),
    ))
}

fn bound_scaling() -> Result<(bool, String)> {
    let base = BoundConfig::default();
    let r1 = generalization_bound(&base, 0.1, 0.1)?;
    let r2 = generalization_bound(
        &BoundConfig {
            k: base.k * 2.0,
            ..base.clone()
        },
        0.1,
        0.1,
    )?;
    let doubles = ((r2.k_summand / r1.k_summand) - 2.0).abs() < 1e-12;
    let r3 = generalization_bound(
        &BoundConfig {
            n_unlabeled: base.n_unlabeled * 100.0,
            ..base.clone()
        },
        0.1,
        0.1,
    )?;
    let decreases = r3.k_summand < r1.k_summand;
    Ok((
        doubles && decreases,
        format!(
            "K doubling ratio {:.12}, n_u x100 ratio {:.4}",
            r2.k_summand / r1.k_summand,
            r3.k_summand / r1.k_summand
        ),
    ))
}

fn moons_data(seed: u64) -> Result<TrainData> {
    let train = make_two_moons(200, 0.1, seed)?;
    let split = split_ssl(&train, 4, seed, UnlabeledPool::All)?;
    let test = two_moons_test_set(0.1, seed)?;
    Ok(TrainData { train, split, test })
}

fn k1_degeneracy() -> Result<(bool, String)> {
    let data = moons_data(5)?;
    let base = TrainConfig {
        k: 1,
        steps: 30,
        batch_labeled: 8,
        batch_unlabeled: 16,
        threshold: 0.6,
        ..TrainConfig::default()
    };
    let mut a = Trainer::new(base.clone(), &data)?;
    let mut b = Trainer::new(
        TrainConfig {
            fixmatch_mode: true,
            ..base
        },
        &data,
    )?;
    let mut diverged_at = None;
    while !a.is_done() {
        let sa = a.step()?;
        let sb = b.step()?;
        let same = sa == sb
            && a.state()
                .network
                .params()
                .zip(b.state().network.params())
                .all(|(x, y)| x.data() == y.data());
        if !same {
            diverged_at = Some(sa.step);
            break;
        }
    }
    Ok(match diverged_at {
        None => (true, "30 steps bit-identical".into()),
        Some(t) => (false, format!("trajectories differ at step {t}")),
    })
}

fn rate_slope() -> Result<(bool, String)> {
    let spec = ConvergenceSpec::default();
    let (traces, slope) = horizon_sweep(&spec, &[100, 1000, 10_000])?;
    let within = traces.iter().all(|t| t.running_avg_sq <= t.rhs);
    Ok((
        slope <= -0.4 && within,
        format!("slope {slope:.3}, below bound at all horizons: {within}"),
    ))
}
