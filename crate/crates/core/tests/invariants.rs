use cfbt_core::verify::{self, Check};
use cfbt_core::ModelConfig;

fn assert_pass(c: Check) {
    println!("{}", c.line());
    assert!(c.passed, "{}", c.line());
}

#[test]
fn identity_at_init_tiny() {
    assert_pass(verify::identity_at_init(&ModelConfig::tiny(), 3));
}

#[test]
fn gradients_match_central_differences() {
    assert_pass(verify::gradient_check(&[0, 1, 2], 1e-5));
}

#[test]
fn fusion_matches_reference_loops() {
    assert_pass(verify::oracle_equivalence(&[0, 1, 2, 3]));
}

#[test]
fn metrics_match_brute_force() {
    assert_pass(verify::metric_oracle(7, 100));
}

#[test]
fn sharing_structure() {
    assert_pass(verify::structural_sharing(&ModelConfig::tiny()));
}

#[test]
fn swapping_templates_swaps_branches() {
    assert_pass(verify::template_swap_symmetry(&ModelConfig::tiny(), 4));
}

#[test]
fn branch_sum() {
    assert_pass(verify::branch_sum_identity(&ModelConfig::tiny()));
}

#[test]
fn deterministic_eval() {
    assert_pass(verify::eval_determinism(&ModelConfig::tiny()));
}

#[test]
fn decode_inverts_encoding() {
    assert_pass(verify::decode_round_trip(2));
}

#[test]
fn crop_geometry() {
    assert_pass(verify::crop_contract());
}

#[test]
fn online_updates_follow_interval_best() {
    let dir = tempfile::tempdir().unwrap();
    assert_pass(verify::online_update_protocol(dir.path()));
}

#[test]
fn resume_matches_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_pass(verify::resume_equivalence(&ModelConfig::tiny(), 4, dir.path()));
}

#[test]
fn frozen_parameters_do_not_move() {
    let dir = tempfile::tempdir().unwrap();
    let train = cfbt_core::train::TrainConfig {
        batch_size: 2,
        ..Default::default()
    };
    assert_pass(verify::freezing_contract(&ModelConfig::tiny(), &train, 5, dir.path()));
}
