mod common;

use mulcon::data::{generate, GlyphDatasetConfig};
use mulcon::eval::{
    attention_maps, average_precision, export_attention, export_embeddings, label_embeddings, metrics, retrieve, Gallery, Query,
};
use mulcon::labels::LabelMatrix;
use mulcon::model::{ModelConfig, MulConModel};
use mulcon::tensor::Tensor;
use proptest::prelude::*;

fn ap(s: &[f64], r: &[bool]) -> f64 {
    average_precision(s, r).unwrap().value
}

#[test]
fn ap_examples() {
    assert_eq!(ap(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
    assert!((ap(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]) - 5.0 / 6.0).abs() < 1e-12);
    assert!((ap(&[0.1, 0.2, 0.3], &[true, false, false]) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn hand_computed_metrics() {
    let y = LabelMatrix::from_rows(&[[1, 0, 0], [0, 1, 0], [1, 1, 0]]).unwrap();
    let s = Tensor::new(&[3, 3], vec![0.9, 0.2, 0.3, 0.6, 0.7, 0.1, 0.4, 0.8, 0.2]).unwrap();
    let m = metrics(&s, &y, 0.5).unwrap();
    assert!((m.per_class_ap[0].unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(m.per_class_ap[1], Some(1.0));
    assert_eq!(m.per_class_ap[2], None);
    assert_eq!(m.excluded_classes, 1);
    assert!((m.map - 11.0 / 12.0).abs() < 1e-12);
    assert_eq!(m.per_class_precision[0], Some(0.5));
    assert_eq!(m.per_class_recall[0], Some(0.5));
    assert_eq!(m.per_class_f1[1], Some(1.0));
    assert!((m.cf1 - 0.75).abs() < 1e-12);
    assert!((m.of1 - 0.75).abs() < 1e-12);
}

#[test]
fn perfect_scores_give_unit_metrics() {
    let y = LabelMatrix::from_rows(&[[1, 0], [0, 1], [1, 1], [0, 0]]).unwrap();
    let s = Tensor::new(&[4, 2], y.to_reals()).unwrap();
    let m = metrics(&s, &y, 0.5).unwrap();
    assert_eq!((m.map, m.cf1, m.of1), (1.0, 1.0, 1.0));
}

#[test]
fn metrics_reject_shape_mismatch() {
    assert!(metrics(&Tensor::zeros(&[2, 3]), &LabelMatrix::zeros(3, 2), 0.5).is_err());
}

#[test]
fn retrieval_finds_an_exact_duplicate_first() {
    let mut r = common::rng(4);
    let emb = Tensor::new(&[5, 3, 4], common::uniform_vec(60, -1.0, 1.0, &mut r)).unwrap();
    let labels = common::random_labels(5, 3, 0.5, &mut r);
    let gallery = Gallery::new((0..5).collect(), emb.clone(), labels).unwrap();
    let q = Query {
        id: 100,
        embeddings: Tensor::new(&[3, 4], emb.data()[2 * 12..3 * 12].to_vec()).unwrap(),
        truth: vec![1, 1, 1],
        labels: vec![0, 2],
    };
    let res = retrieve(&q, &gallery, 3).unwrap();
    assert_eq!(res.hits.len(), 3);
    assert_eq!(res.hits[0].id, 2);
    assert_eq!(res.hits[0].distance, 0.0);
    let all = retrieve(&q, &gallery, 99).unwrap();
    assert_eq!(all.hits.len(), 5);
    assert!(all.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
}

fn small_setup() -> (MulConModel, mulcon::data::Split) {
    let cfg = GlyphDatasetConfig { train_count: 6, test_count: 0, ..GlyphDatasetConfig::default() };
    let split = generate(&cfg).unwrap().0;
    (MulConModel::init(&ModelConfig::default(), 5).unwrap(), split)
}

#[test]
fn embedding_csv_has_one_row_per_active_label_and_is_reproducible() {
    let (model, split) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let rows = export_embeddings(&model, &split, &a).unwrap();
    export_embeddings(&model, &split, &b).unwrap();
    assert_eq!(rows, split.labels().active_count());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), rows + 1);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 64);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn embeddings_do_not_depend_on_chunking() {
    let (model, split) = small_setup();
    let whole = label_embeddings(&model, &split, 64).unwrap();
    let chunked = label_embeddings(&model, &split, 4).unwrap();
    assert!(common::max_abs_diff(whole.data(), chunked.data()) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one_over_the_grid() {
    let (model, split) = small_setup();
    let maps = attention_maps(&model, &split.batch(&[0, 1]).images).unwrap();
    assert_eq!(maps.len(), 4);
    for m in &maps {
        assert_eq!(m.shape(), &[2, 8, 16]);
        for row in m.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_export_writes_pgm_files() {
    let (model, split) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let out = export_attention(&model, &split, 0, 1, dir.path().join("img0")).unwrap();
    assert_eq!(out.grid, (4, 4));
    assert_eq!(out.label_maps.len(), split.labels().row(0).iter().filter(|&&v| v == 1).count());
    assert_eq!(out.head_maps.len(), 4);
    for (_, map, path) in out.label_maps.iter().chain(&out.head_maps) {
        assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let bytes = std::fs::read(path).unwrap();
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64 * 64);
    }
    assert!(export_attention(&model, &split, 99, 0, dir.path().join("x")).is_err());
}

proptest! {
    #[test]
    fn ap_matches_sorting_oracle(n in 1usize..12, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        // coarse scores so ties are common
        let s: Vec<f64> = common::uniform_vec(n, 0.0, 4.0, &mut r).iter().map(|v| v.floor() / 4.0).collect();
        let rel: Vec<bool> = common::uniform_vec(n, 0.0, 1.0, &mut r).iter().map(|&v| v < 0.5).collect();
        prop_assume!(rel.iter().any(|&b| b));
        prop_assert!((ap(&s, &rel) - common::average_precision(&s, &rel)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_invariant_to_monotone_rescoring(n in 1usize..12, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let s = common::uniform_vec(n, -2.0, 2.0, &mut r);
        let rel: Vec<bool> = common::uniform_vec(n, 0.0, 1.0, &mut r).iter().map(|&v| v < 0.4).collect();
        let t: Vec<f64> = s.iter().map(|v| 1.0 / (1.0 + (-3.0 * v).exp())).collect();
        prop_assert_eq!(ap(&s, &rel), ap(&t, &rel));
    }

    #[test]
    fn metrics_ignore_image_order(n in 2usize..10, l in 1usize..5, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let y = common::random_labels(n, l, 0.5, &mut r);
        let s = common::uniform_vec(n * l, 0.0, 1.0, &mut r);
        let perm: Vec<usize> = (0..n).rev().collect();
        let sp: Vec<f64> = perm.iter().flat_map(|&i| s[i * l..(i + 1) * l].to_vec()).collect();
        let a = metrics(&Tensor::new(&[n, l], s).unwrap(), &y, 0.5).unwrap();
        let b = metrics(&Tensor::new(&[n, l], sp).unwrap(), &y.select(&perm), 0.5).unwrap();
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert!((a.cf1 - b.cf1).abs() < 1e-12);
        prop_assert!((a.of1 - b.of1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.map) && (0.0..=1.0).contains(&a.of1));
    }
}
