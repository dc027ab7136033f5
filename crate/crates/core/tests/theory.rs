//! Tabular theory checks and the bridge between exact successor features
//! and the learned TD loss.

#[path = "suites/theory.rs"]
mod suite;

#[test]
fn theory_suite_passes_within_a_minute() {
    suite::theory_suite_passes_within_a_minute();
}

#[test]
fn matrix_q_matches_truncated_series() {
    suite::matrix_q_matches_truncated_series();
}

#[test]
fn successor_features_linearize_q() {
    suite::successor_features_linearize_q();
}

#[test]
fn exact_successor_features_zero_the_td_loss_on_every_transition() {
    suite::exact_successor_features_zero_the_td_loss_on_every_transition();
}

#[test]
fn expected_td_target_vanishes_on_a_stochastic_mdp() {
    suite::expected_td_target_vanishes_on_a_stochastic_mdp();
}
