//! Analytic gradients against central finite differences of the f64 oracle.

mod common;

use common::GradReport;

fn check(rep: GradReport, min_checked: usize) {
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
    assert!(rep.checked + rep.rechecked >= min_checked, "only {} probes checked", rep.checked + rep.rechecked);
    assert!(rep.passed(), "{} of {} probes could not be verified", rep.skipped, rep.checked + rep.rechecked + rep.skipped);
}

#[test]
fn conv_layer_gradients() {
    check(common::conv_gradients(11), 300);
}

#[test]
fn fc_layer_gradients() {
    check(common::fc_gradients(12), 600);
}

#[test]
fn relu_and_pool_gradients() {
    check(common::relu_pool_gradients(13), 288);
}

#[test]
fn softmax_xent_gradient() {
    check(common::xent_gradients(14), 36);
}

/// Probes whose two evaluations fall on different linear pieces are skipped.
#[test]
fn reduced_network_gradients() {
    check(common::small_network_gradients(), 150);
}

#[test]
fn desk_network_gradients() {
    check(common::desk_network_gradients(4), 36);
}
