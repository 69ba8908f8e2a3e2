use featurefool::gradcheck::{self, FD_STEP};

#[test]
fn activation_loss_gradient_matches_central_differences() {
    let report = gradcheck::run(2024, 20).unwrap();
    assert_eq!(report.trials.len(), 20);
    for t in &report.trials {
        assert!(
            t.rel_error < 1e-6,
            "trial {} rel error {} ({:?})",
            t.trial,
            t.rel_error,
            t.kinds
        );
        assert!(t.loss.is_finite());
    }
    assert!(FD_STEP == 1e-5);
}

#[test]
fn random_networks_cover_every_layer_kind() {
    let report = gradcheck::run(7, 8).unwrap();
    let kinds: std::collections::BTreeSet<_> = report
        .trials
        .iter()
        .flat_map(|t| t.kinds.iter().cloned())
        .collect();
    for k in [
        "input_norm",
        "conv2d",
        "relu",
        "max_pool",
        "avg_pool",
        "flatten",
        "fully_connected",
        "concat",
        "softmax",
    ] {
        assert!(kinds.contains(k), "missing {k}");
    }
}

#[test]
fn gradcheck_is_reproducible() {
    assert_eq!(gradcheck::run(5, 4).unwrap(), gradcheck::run(5, 4).unwrap());
}
