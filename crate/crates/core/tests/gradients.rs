use covi_core::gradcheck::{loss_checks, random_graph, DEFAULT_STEP};

#[test]
fn fifty_random_graphs() {
    for seed in 0..50 {
        let r = random_graph(seed).check(DEFAULT_STEP).unwrap();
        assert!(r.passes(1e-4), "graph {seed}: {r:?}");
    }
}

#[test]
fn every_loss_over_several_models() {
    for seed in 0..30 {
        for (name, r) in loss_checks(seed, DEFAULT_STEP).unwrap() {
            assert!(r.checked > 0);
            assert!(r.passes(1e-4), "{name} seed {seed}: {r:?}");
        }
    }
}
