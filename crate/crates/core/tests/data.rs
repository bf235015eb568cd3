use std::collections::HashSet;
use std::path::PathBuf;

use maxmatch_core::data::*;
use maxmatch_core::Error;
use proptest::prelude::*;

#[test]
fn two_moons_is_balanced_and_deterministic() {
    let a = make_two_moons(100, 0.1, 3).unwrap();
    assert_eq!(a.class_counts(), vec![50, 50]);
    let b = make_two_moons(100, 0.1, 3).unwrap();
    let bits = |d: &Dataset| {
        d.features
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.labels, b.labels);
    assert_ne!(bits(&a), bits(&make_two_moons(100, 0.1, 4).unwrap()));
}

#[test]
fn noiseless_upper_arc_geometry() {
    let d = make_two_moons(60, 0.0, 0).unwrap();
    for i in 0..d.len() {
        let [x, y] = [d.sample(i)[0], d.sample(i)[1]];
        if d.labels[i] == 0 {
            assert!(y >= -0.5);
            // unit circle around (-0.5, -0.25)
            assert!(((x + 0.5).powi(2) + (y + 0.25).powi(2) - 1.0).abs() < 1e-12);
        } else {
            assert!(((x - 0.5).powi(2) + (y - 0.25).powi(2) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn odd_count_is_rejected() {
    assert!(matches!(make_two_moons(7, 0.1, 0), Err(Error::Config(_))));
}

#[test]
fn test_set_is_an_independent_draw() {
    let t = two_moons_test_set(0.1, 5).unwrap();
    assert_eq!(t.len(), 2000);
    let same = make_two_moons(2000, 0.1, 6).unwrap();
    assert_eq!(t.features, same.features);
}

fn write_fake_idx(dir: &std::path::Path, n: usize) -> (PathBuf, PathBuf) {
    let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| (i % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let ip = dir.join("images.idx");
    let lp = dir.join("labels.idx");
    write_idx_images(&ip, 28, 28, &pixels).unwrap();
    write_idx_labels(&lp, &labels).unwrap();
    (ip, lp)
}

#[test]
fn idx_round_trip_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fake_idx(dir.path(), 10);
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.n_classes, 10);
    assert_eq!(
        ds.sample_shape,
        SampleShape::Image {
            channels: 1,
            height: 28,
            width: 28
        }
    );
    assert_eq!(ds.sample(0)[255], 1.0);
    assert_eq!(ds.sample(0)[0], 0.0);
    let (count, rows, cols, px) = read_idx_images(&ip).unwrap();
    assert_eq!((count, rows, cols, px.len()), (10, 28, 28, 7840));
}

#[test]
fn idx_header_is_big_endian() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fake_idx(dir.path(), 3);
    let bytes = std::fs::read(&ip).unwrap();
    assert_eq!(
        &bytes[..16],
        &[0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 28, 0, 0, 0, 28]
    );
    let lb = std::fs::read(&lp).unwrap();
    assert_eq!(&lb[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
}

#[test]
fn idx_wrong_magic_and_truncation_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fake_idx(dir.path(), 4);
    // labels file where images are expected
    assert!(matches!(read_idx_images(&lp), Err(Error::Format { .. })));
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes.truncate(bytes.len() - 1);
    let cut = dir.path().join("cut.idx");
    std::fs::write(&cut, &bytes).unwrap();
    assert!(matches!(load_idx(&cut, &lp), Err(Error::Format { .. })));
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lp),
        Err(Error::Io(_))
    ));
}

#[test]
fn idx_count_mismatch_between_files() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, _) = write_fake_idx(dir.path(), 4);
    let lp = dir.path().join("few.idx");
    write_idx_labels(&lp, &[1, 2]).unwrap();
    assert!(load_idx(&ip, &lp).is_err());
}

/// Runs against real MNIST files when `MAXMATCH_MNIST_DIR` points at a
/// directory holding the uncompressed test files.
#[test]
fn official_mnist_test_file() {
    let Ok(dir) = std::env::var("MAXMATCH_MNIST_DIR") else {
        eprintln!("MAXMATCH_MNIST_DIR not set, skipping");
        return;
    };
    let dir = PathBuf::from(dir);
    let ds = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.labels[0], 7);
}

#[test]
fn ten_classes_four_labels_each() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fake_idx(dir.path(), 100);
    let ds = load_idx(&ip, &lp).unwrap();
    let s = split_ssl(&ds, 4, 0, UnlabeledPool::All).unwrap();
    assert_eq!(s.labeled.len(), 40);
    let mut per = [0; 10];
    s.labeled.iter().for_each(|&i| per[ds.labels[i]] += 1);
    assert!(per.iter().all(|&c| c == 4));
    assert_eq!(s.unlabeled.len(), 100);
}

#[test]
fn exhausting_a_class_leaves_disjoint_pool_without_it() {
    let ds = make_two_moons(20, 0.1, 0).unwrap();
    let s = split_ssl(&ds, 10, 1, UnlabeledPool::Disjoint).unwrap();
    assert!(s.unlabeled.is_empty());
    match split_ssl(&ds, 11, 1, UnlabeledPool::All) {
        Err(Error::InsufficientClass {
            class,
            available,
            required,
        }) => {
            assert_eq!((class, available, required), (0, 10, 11));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn folds_differ() {
    let ds = make_two_moons(200, 0.1, 0).unwrap();
    let folds: Vec<Vec<usize>> = (0..5)
        .map(|f| {
            let mut l = split_ssl(&ds, 4, f, UnlabeledPool::All).unwrap().labeled;
            l.sort();
            l
        })
        .collect();
    let distinct: HashSet<_> = folds.iter().collect();
    assert_eq!(distinct.len(), 5);
}

#[test]
fn batch_ratio_and_supervised_degeneration() {
    let ds = make_two_moons(1000, 0.1, 0).unwrap();
    let s = split_ssl(&ds, 40, 0, UnlabeledPool::All).unwrap();
    let mut stream = BatchStream::new(&s, 64, 448, 1.0, 9).unwrap();
    for _ in 0..20 {
        let (l, u) = stream.next().unwrap();
        assert_eq!((l.len(), u.len()), (64, 448));
    }
    let mut sup = BatchStream::new(&s, 8, 0, 0.0, 9).unwrap();
    assert!(sup.next().unwrap().1.is_empty());
    let empty = SslSplit {
        unlabeled: vec![],
        ..s.clone()
    };
    assert!(matches!(
        BatchStream::new(&empty, 8, 8, 1.0, 0),
        Err(Error::Config(_))
    ));
    assert!(BatchStream::new(&empty, 8, 8, 0.0, 0).is_ok());
}

#[test]
fn labeled_coverage_counts() {
    let ds = make_two_moons(200, 0.1, 0).unwrap();
    let s = split_ssl(&ds, 20, 0, UnlabeledPool::All).unwrap();
    let steps = 37u64;
    let mut stream = BatchStream::new(&s, 8, 0, 0.0, 3).unwrap();
    let mut counts = std::collections::HashMap::new();
    for _ in 0..steps {
        for i in stream.next().unwrap().0 {
            *counts.entry(i).or_insert(0usize) += 1;
        }
    }
    let expect = (steps as f64 * 8.0 / 40.0).ceil() as i64;
    assert_eq!(counts.len(), 40);
    for (_, c) in counts {
        assert!(
            (c as i64 - expect).abs() <= 1,
            "count {c}, expected {expect} ± 1"
        );
    }
}

#[test]
fn batches_are_pure_functions_of_step() {
    let ds = make_two_moons(200, 0.1, 0).unwrap();
    let s = split_ssl(&ds, 4, 0, UnlabeledPool::All).unwrap();
    let mut a = BatchStream::new(&s, 8, 16, 1.0, 1).unwrap();
    let seq: Vec<_> = (&mut a).take(30).collect();
    let mut b = BatchStream::new(&s, 8, 16, 1.0, 1).unwrap();
    b.seek(17);
    assert_eq!(b.next().unwrap(), seq[17]);
    assert_eq!(b.batch(3), seq[3]);
}

proptest! {
    #[test]
    fn splits_are_deterministic_and_balanced(seed in 0u64..10_000, lpc in 1usize..20) {
        let ds = make_two_moons(60, 0.2, 1).unwrap();
        let a = split_ssl(&ds, lpc, seed, UnlabeledPool::Disjoint).unwrap();
        let b = split_ssl(&ds, lpc, seed, UnlabeledPool::Disjoint).unwrap();
        prop_assert_eq!(&a, &b);
        let mut per = [0usize; 2];
        a.labeled.iter().for_each(|&i| per[ds.labels[i]] += 1);
        prop_assert_eq!(per, [lpc, lpc]);
        let l: HashSet<_> = a.labeled.iter().collect();
        prop_assert!(a.unlabeled.iter().all(|i| !l.contains(i)));
        prop_assert_eq!(a.labeled.len() + a.unlabeled.len(), 60);
    }

    #[test]
    fn one_epoch_covers_every_labeled_sample(b_l in 1usize..16, seed in 0u64..1000) {
        let ds = make_two_moons(100, 0.1, 0).unwrap();
        let s = split_ssl(&ds, 10, 0, UnlabeledPool::All).unwrap();
        let steps = 20usize.div_ceil(b_l);
        let mut stream = BatchStream::new(&s, b_l, 0, 0.0, seed).unwrap();
        let seen: HashSet<usize> = (&mut stream).take(steps).flat_map(|(l, _)| l).collect();
        prop_assert_eq!(seen.len(), 20);
    }
}
