use std::path::PathBuf;

use gtpool_core::graphio::{build_features, parse_tudataset, stratified_folds, write_tudataset, FeatureScheme};

fn mutag_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/MUTAG")
}

#[test]
fn mutag_statistics() {
    let ds = parse_tudataset(mutag_dir()).unwrap();
    assert_eq!(ds.len(), 188);
    assert_eq!(ds.num_classes, 2);
    assert_eq!(ds.class_values, vec![-1, 1]);
    assert_eq!(ds.class_counts(), vec![63, 125]);
    let total: usize = ds.graphs.iter().map(|g| g.n()).sum();
    assert_eq!(total, 3371);
    assert!((ds.avg_nodes() - 17.93).abs() < 0.005);
    assert!((ds.majority_rate() - 125.0 / 188.0).abs() < 1e-15);
    for g in &ds.graphs {
        for &(u, v) in g.edges() {
            assert!(u < v && v < g.n());
        }
    }
}

#[test]
fn mutag_features_are_label_onehots() {
    let ds = build_features(&parse_tudataset(mutag_dir()).unwrap(), FeatureScheme::default()).unwrap();
    assert_eq!(ds.feature_dim, 7);
    for g in &ds.graphs {
        assert_eq!(g.x.shape(), (g.n(), 7));
        for r in 0..g.n() {
            assert_eq!(g.x.row(r).iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn mutag_ten_fold_sizes() {
    let ds = parse_tudataset(mutag_dir()).unwrap();
    let plan = stratified_folds(&ds, 10, 0).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![18, 18, 19, 19, 19, 19, 19, 19, 19, 19]);
    for f in 0..10 {
        let test = plan.test_indices(f);
        let positives = test.iter().filter(|&&i| ds.graphs[i].label == 1).count();
        assert!((12..=13).contains(&positives), "fold {f}: {positives}");
    }
}

#[test]
fn write_then_read_round_trips() {
    let ds = parse_tudataset(mutag_dir()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("MUTAG");
    write_tudataset(&ds, &dir).unwrap();
    let back = parse_tudataset(&dir).unwrap();
    assert_eq!(back, ds);
}
