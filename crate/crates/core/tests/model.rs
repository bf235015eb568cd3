mod common;

use common::*;
use maxmatch_core::autodiff::Tensor;
use maxmatch_core::model::*;
use maxmatch_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// Forward pass written out with explicit loops.
fn manual_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n_layers = net.layers().len();
    for (li, layer) in net.layers().iter().enumerate() {
        h = match layer.kind {
            LayerKind::Dense { inputs, outputs } => (0..outputs)
                .map(|o| {
                    layer.bias.data()[o]
                        + (0..inputs)
                            .map(|i| h[i] * layer.weight.data()[i * outputs + o])
                            .sum::<f64>()
                })
                .collect(),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
                padding,
            } => {
                let mut z = sliding_conv(
                    &h,
                    layer.weight.data(),
                    in_channels,
                    out_channels,
                    height,
                    width,
                    kernel,
                    padding,
                );
                let plane = z.len() / out_channels;
                for (i, v) in z.iter_mut().enumerate() {
                    *v += layer.bias.data()[i / plane];
                }
                z
            }
        };
        if li + 1 < n_layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

#[test]
fn zero_network_gives_uniform_probabilities() {
    let net = Network::zeros(&Architecture::mlp(3, &[5], 4)).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
    assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(net
        .predict_proba(&x)
        .unwrap()
        .data()
        .iter()
        .all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn identity_layer_passes_one_hot_through() {
    let mut net = Network::zeros(&Architecture::mlp(3, &[], 3)).unwrap();
    let w = net.layers_mut()[0].weight.data_mut();
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let x = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn seeded_networks_match_manual_forward() {
    let mut r = rng(3);
    for seed in 0..20 {
        let (net, x, _) = random_network(&mut r, seed);
        let got = net.forward(&x).unwrap();
        for i in 0..x.rows() {
            let want = manual_forward(&net, x.row(i));
            for (a, b) in got.row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn seeded_mlp_golden_scores() {
    let net = Network::init(&Architecture::mlp(2, &[4], 2), 42).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
    let got = net.forward(&x).unwrap();
    let want = manual_forward(&net, &[0.3, -0.7]);
    assert!((got.data()[0] - want[0]).abs() < 1e-14 && (got.data()[1] - want[1]).abs() < 1e-14);
    // Freezes the initializer stream.
    let frozen = [GOLDEN_0, GOLDEN_1];
    for (a, b) in got.data().iter().zip(frozen) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

const GOLDEN_0: f64 = 1.6936329328869075;
const GOLDEN_1: f64 = 0.6842618595260606;

#[test]
fn parameter_counts() {
    let net = Network::init(&Architecture::mlp(2, &[64, 64], 2), 0).unwrap();
    assert_eq!(net.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
    assert_eq!(
        net.single_output_param_count(),
        2 * 64 + 64 + 64 * 64 + 64 + 64 + 1
    );
    let total: usize = net.params().map(|p| p.len()).sum();
    assert_eq!(total, net.param_count());
}

#[test]
fn operator_matrix_matches_sliding_window() {
    let mut r = rng(11);
    for _ in 0..200 {
        let k = 3;
        let kernel = random_matrix(&mut r, 1, 9)
            .reshape(vec![1, 1, k, k])
            .unwrap();
        let x: Vec<f64> = (0..25).map(|_| gaussian(&mut r)).collect();
        let pad = r.random_range(0..=1);
        let m = conv_operator_matrix(&kernel, 5, 5, pad).unwrap();
        let want = sliding_conv(&x, kernel.data(), 1, 1, 5, 5, k, pad);
        for (row, w) in want.iter().enumerate() {
            let got: f64 = m.row(row).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((got - w).abs() < 1e-12);
        }
    }
}

#[test]
fn pointwise_and_delta_kernels() {
    let c = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
    let m = conv_operator_matrix(&c, 3, 4, 0).unwrap();
    for i in 0..12 {
        for j in 0..12 {
            assert_eq!(m.row(i)[j], if i == j { 2.5 } else { 0.0 });
        }
    }
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let d = Tensor::new(vec![1, 1, 3, 3], delta).unwrap();
    let m = conv_operator_matrix(&d, 4, 4, 1).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            assert_eq!(m.row(i)[j], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn oversized_kernel_is_rejected() {
    let k = Tensor::zeros(&[1, 1, 5, 5]);
    assert!(matches!(
        conv_operator_matrix(&k, 2, 2, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn spectral_norm_examples() {
    let eye = Tensor::new(
        vec![4, 4],
        (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    assert!((spectral_norm(&eye).unwrap() - 1.0).abs() < 1e-12);
    let d = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn spectral_norm_matches_jacobi_svd() {
    let mut r = rng(5);
    for _ in 0..30 {
        let (rows, cols) = (r.random_range(1..=40), r.random_range(1..=40));
        let m = random_matrix(&mut r, rows, cols);
        let want = jacobi_singular_values(m.data(), rows, cols)[0];
        let got = spectral_norm(&m).unwrap();
        assert!(
            (got - want).abs() / want < 1e-6,
            "{rows}x{cols}: {got} vs {want}"
        );
    }
}

#[test]
fn spectral_norm_of_larger_matrix() {
    let mut r = rng(9);
    let m = random_matrix(&mut r, 200, 150);
    let want = jacobi_singular_values(m.data(), 200, 150)[0];
    assert!((spectral_norm(&m).unwrap() - want).abs() / want < 1e-6);
}

#[test]
fn conv_operator_norm_matches_dense() {
    let mut r = rng(13);
    let kernel = random_matrix(&mut r, 1, 2 * 3 * 9)
        .reshape(vec![2, 3, 3, 3])
        .unwrap();
    let dense = spectral_norm(&conv_operator_matrix(&kernel, 6, 6, 1).unwrap()).unwrap();
    let free = conv_operator_norm(&kernel, 6, 6, 1).unwrap();
    assert!((dense - free).abs() / dense < 1e-9);
}

#[test]
fn distance_of_doubled_layer_is_its_norm() {
    let a = Network::init(&Architecture::mlp(3, &[6], 4), 1)
        .unwrap()
        .snapshot();
    let mut b = a.clone();
    let v = b.layers[1].weight.clone();
    b.layers[1]
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|x| *x *= 2.0);
    let want = jacobi_singular_values(v.data(), 6, 4)[0];
    let got = network_distance(&a, &b).unwrap();
    assert!((got - want).abs() / want < 1e-9);
    assert_eq!(network_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn distance_is_additive_over_layers() {
    let arch = Architecture::conv_net((1, 5, 5), 2, 3, &[4], 3);
    let a = Network::init(&arch, 1).unwrap().snapshot();
    let mut r = rng(2);
    let mut only0 = a.clone();
    only0.layers[0]
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|x| *x += 0.1 * gaussian(&mut r));
    let mut only2 = a.clone();
    only2.layers[2]
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|x| *x += 0.1 * gaussian(&mut r));
    let mut both = only0.clone();
    both.layers[2] = only2.layers[2].clone();
    let sum = network_distance(&a, &only0).unwrap() + network_distance(&a, &only2).unwrap();
    assert!((network_distance(&a, &both).unwrap() - sum).abs() < 1e-9 * sum);
    let per = layer_distances(&a, &both).unwrap();
    assert_eq!(per.len(), 3);
    assert_eq!(per[1], 0.0);
}

#[test]
fn distance_rejects_mismatched_architectures() {
    let a = Network::init(&Architecture::mlp(3, &[6], 4), 1)
        .unwrap()
        .snapshot();
    let b = Network::init(&Architecture::mlp(3, &[5], 4), 1)
        .unwrap()
        .snapshot();
    assert!(matches!(
        network_distance(&a, &b),
        Err(Error::Architecture(_))
    ));
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let net = Network::init(&Architecture::conv_net((1, 4, 4), 2, 3, &[5], 3), 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.snap");
    net.snapshot().save(&path).unwrap();
    let back = ParamSnapshot::load(&path).unwrap();
    assert_eq!(back, net.snapshot());
    let restored = Network::from_snapshot(back).unwrap();
    for (a, b) in restored.params().zip(net.params()) {
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn truncated_snapshot_is_a_format_error() {
    let net = Network::init(&Architecture::mlp(2, &[3], 2), 0).unwrap();
    let mut bytes = Vec::new();
    net.snapshot().write_to(&mut bytes).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(
        ParamSnapshot::read_from(&bytes[..]),
        Err(Error::Format { .. })
    ));
}

proptest! {
    #[test]
    fn norm_is_absolutely_homogeneous(c in -5.0f64..5.0, seed in 0u64..500) {
        let mut r = rng(seed);
        let m = random_matrix(&mut r, 7, 5);
        let scaled = m.map(|v| c * v);
        let a = spectral_norm(&scaled).unwrap();
        let b = c.abs() * spectral_norm(&m).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * b.max(1e-300));
    }

    #[test]
    fn distance_is_a_pseudometric(seed in 0u64..200) {
        let arch = Architecture::mlp(3, &[4], 2);
        let a = Network::init(&arch, seed).unwrap().snapshot();
        let b = Network::init(&arch, seed + 1000).unwrap().snapshot();
        let c = Network::init(&arch, seed + 2000).unwrap().snapshot();
        let ab = network_distance(&a, &b).unwrap();
        let ba = network_distance(&b, &a).unwrap();
        let bc = network_distance(&b, &c).unwrap();
        let ac = network_distance(&a, &c).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab);
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}
