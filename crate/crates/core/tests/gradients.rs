mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..24 {
        let r = common::fd_check(seed);
        assert!(
            r.max_rel < 1e-3,
            "seed {seed} {:?} (dropout {}): rel err {:.3e} in {}",
            r.spec,
            r.training,
            r.max_rel,
            r.worst
        );
    }
}

#[test]
fn suite_covers_dropout_and_deeper_models() {
    let reports: Vec<_> = (0..24).map(common::fd_check).collect();
    assert!(reports.iter().any(|r| r.training));
    assert!(reports.iter().any(|r| !r.training));
    assert!(reports.iter().any(|r| r.spec.blocks == 2));
}
