//! End-to-end gradient of generator → GCN → loss against central differences.

use std::time::Instant;

use dgg_core::autodiff::{with_adjoint_fault, FdConfig, OpKind};
use dgg_core::train::Candidates;
use dgg_core::verify::{composite_config, composite_gradcheck, random_graph, COMPOSITE_TOLERANCE};

#[test]
fn composite_soft_mode_five_graphs() {
    let start = Instant::now();
    let fd = FdConfig::with_tolerance(COMPOSITE_TOLERANCE);
    for seed in 0..5 {
        let data = random_graph(10, 6, 3, seed).unwrap();
        let report = composite_gradcheck(&data, &composite_config(8, seed), &fd).unwrap();
        assert!(
            report.passed(),
            "graph {seed}: max rel {:.3e}, {:?}",
            report.max_rel_error,
            &report.failures[..report.failures.len().min(3)]
        );
        eprintln!("graph {seed}: {} coords, max rel {:.3e}", report.checked, report.max_rel_error);
    }
    eprintln!("{:.1}s", start.elapsed().as_secs_f64());
}

#[test]
fn composite_complete_candidates_and_symmetric() {
    let fd = FdConfig::with_tolerance(COMPOSITE_TOLERANCE);
    let data = random_graph(8, 4, 2, 11).unwrap();
    let mut cfg = composite_config(6, 11);
    cfg.candidates = Candidates::Complete;
    cfg.symmetric = true;
    let report = composite_gradcheck(&data, &cfg, &fd).unwrap();
    assert!(report.passed(), "max rel {:.3e}", report.max_rel_error);
}

#[test]
fn composite_detects_adjoint_faults() {
    let fd = FdConfig::with_tolerance(COMPOSITE_TOLERANCE);
    let data = random_graph(6, 4, 2, 3).unwrap();
    let cfg = composite_config(4, 3);
    for kind in [OpKind::AdjointMean, OpKind::HeavisideGate, OpKind::SoftmaxRows] {
        let report = with_adjoint_fault(kind, || composite_gradcheck(&data, &cfg, &fd)).unwrap();
        assert!(!report.passed(), "{kind:?} fault went unnoticed");
    }
}
