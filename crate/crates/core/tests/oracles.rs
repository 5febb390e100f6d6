mod common;

use common::suites::{dgff_properties, lpse_oracle, metric_oracle, morphology_oracle};

#[test]
fn morphology_matches_set_definitions() {
    morphology_oracle(100).unwrap();
}

#[test]
fn region_statistics_match_masked_moments() {
    let err = lpse_oracle(100).unwrap();
    assert!(err < 1e-9, "max abs deviation {err:e}");
}

#[test]
fn fusion_identity_and_channel_selectivity() {
    dgff_properties(50).unwrap();
}

#[test]
fn metrics_match_hand_case_and_rank_statistic() {
    let err = metric_oracle(20).unwrap();
    assert!(err < 1e-9, "max abs deviation {err:e}");
}
