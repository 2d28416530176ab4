use std::f64::consts::PI;

use artn::data::{
    batch_iter, make_blobs_pair, make_two_moons_pair, paired_batches, read_idx, read_sparse_bow, write_idx_images,
    write_idx_labels, write_sparse_bow, BlobsSpec, DomainDataset, ShiftSpec,
};
use artn::diagnostics::{argmax_rows, estimate_pad, fit_classifier, ClassifierFit};
use artn::Tensor64;
use proptest::prelude::*;

fn blobs(translation: Vec<f64>, seed: u64) -> (DomainDataset, DomainDataset) {
    let spec = BlobsSpec {
        n_per_class: 150,
        ..BlobsSpec::default()
    };
    let shift = ShiftSpec {
        translation,
        ..ShiftSpec::default()
    };
    make_blobs_pair(&spec, &shift, seed).unwrap()
}

fn accuracy(net: &artn::Mlp64, ds: &DomainDataset) -> f64 {
    let pred = argmax_rows(&net.infer(&ds.features).unwrap());
    let labels = ds.labels().unwrap();
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

#[test]
fn pad_is_small_without_shift() {
    let (s, t) = blobs(vec![], 4);
    let est = estimate_pad(&s.features, &t.features, &ClassifierFit::default()).unwrap();
    assert!(est.error > 0.4, "held-out domain error {}", est.error);
    assert!(est.pad < 0.2, "PAD {}", est.pad);
}

#[test]
fn pad_saturates_for_separated_domains() {
    let (s, t) = blobs(vec![40.0, 40.0], 4);
    let est = estimate_pad(&s.features, &t.features, &ClassifierFit::default()).unwrap();
    assert_eq!(est.error, 0.0);
    assert_eq!(est.pad, 2.0);
}

#[test]
fn half_turn_of_moons_defeats_a_source_classifier() {
    let fit = ClassifierFit {
        hidden: vec![32],
        epochs: 60,
        ..ClassifierFit::default()
    };
    let (s, same) = make_two_moons_pair(600, 0.1, 0.0, 2).unwrap();
    let net = fit_classifier(&s.features, s.labels().unwrap(), 2, &fit).unwrap();
    assert!(accuracy(&net, &s) > 0.97);
    // an unrotated target is just a fresh draw
    assert!(accuracy(&net, &same) > 0.95);
    let (_, turned) = make_two_moons_pair(600, 0.1, PI, 2).unwrap();
    // the arcs trade places, so the source boundary labels most points wrongly
    assert!(accuracy(&net, &turned) < 0.5, "accuracy {}", accuracy(&net, &turned));
}

#[test]
fn batches_of_three_over_ten_rows() {
    let x = Tensor64::new(vec![10, 1], (0..10).map(f64::from).collect()).unwrap();
    let ds = DomainDataset::new(x, Some(vec![0; 10]), 1, 0, "ten").unwrap();
    let sizes: Vec<usize> = batch_iter::<f64>(&ds, 3, 7, 0).unwrap().map(|b| b.len()).collect();
    assert_eq!(sizes, vec![3, 3, 3, 1]);
    let order = |epoch| -> Vec<f64> {
        batch_iter::<f64>(&ds, 3, 7, epoch)
            .unwrap()
            .flat_map(|b| b.x.into_data())
            .collect()
    };
    assert_eq!(order(0), order(0));
    assert_ne!(order(0), order(1));
    let mut seen = order(1);
    seen.sort_by(f64::total_cmp);
    assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generators_are_pure_functions_of_the_seed(seed in any::<u64>(), rot in -PI..PI) {
        let a = make_two_moons_pair(40, 0.1, rot, seed).unwrap();
        let b = make_two_moons_pair(40, 0.1, rot, seed).unwrap();
        prop_assert!(a.0.features.bitwise_eq(&b.0.features) && a.1.features.bitwise_eq(&b.1.features));
        let spec = BlobsSpec { n_per_class: 10, ..BlobsSpec::default() };
        let shift = ShiftSpec { rotation: rot, translation: vec![1.0, -1.0], noise_std: 0.3, seed, ..ShiftSpec::default() };
        let c = make_blobs_pair(&spec, &shift, seed).unwrap();
        let d = make_blobs_pair(&spec, &shift, seed).unwrap();
        prop_assert_eq!(c, d);
    }

    #[test]
    fn idx_files_round_trip(
        rows in 1usize..5,
        cols in 1usize..5,
        count in 1usize..8,
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 97) % 256) as u8).collect();
        let labels: Vec<usize> = (0..count).map(|i| (i + seed as usize % 3) % 10).collect();
        let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
        write_idx_images(&img, rows, cols, &pixels).unwrap();
        write_idx_labels(&lab, &labels).unwrap();
        let ds = read_idx(&img, &lab).unwrap();
        prop_assert_eq!(ds.features.shape(), &[count, rows * cols]);
        for (got, &p) in ds.features.data().iter().zip(&pixels) {
            prop_assert_eq!(*got, f64::from(p) / 255.0);
        }
        prop_assert_eq!(ds.labels().unwrap(), &labels[..]);
    }

    #[test]
    fn sparse_text_round_trips(
        values in prop::collection::vec(prop_oneof![Just(0.0), -100.0f64..100.0], 12),
        labels in prop::collection::vec(0usize..2, 3),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.txt");
        let ds = DomainDataset::new(Tensor64::new(vec![3, 4], values).unwrap(), Some(labels), 2, 0, "rows").unwrap();
        write_sparse_bow(&path, &ds).unwrap();
        let back = read_sparse_bow(&path, 4).unwrap();
        prop_assert!(back.features.bitwise_eq(&ds.features));
        prop_assert_eq!(back.class_labels, ds.class_labels);
    }

    #[test]
    fn longer_domain_is_covered_once_per_epoch(
        ns in 1usize..60,
        nt in 1usize..60,
        batch in 1usize..16,
        seed in any::<u64>(),
    ) {
        let pairs = paired_batches(ns, nt, batch, seed, 3).unwrap();
        let mut long: Vec<usize> = pairs
            .iter()
            .flat_map(|(s, t)| if ns >= nt { s.clone() } else { t.clone() })
            .collect();
        long.sort_unstable();
        prop_assert_eq!(long, (0..ns.max(nt)).collect::<Vec<_>>());
        for (s, t) in &pairs {
            prop_assert_eq!(s.len(), t.len());
            prop_assert!(s.iter().all(|&i| i < ns) && t.iter().all(|&i| i < nt));
        }
    }
}
