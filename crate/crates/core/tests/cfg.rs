//! Classifier-free guidance identities and evaluation counting.

#[path = "suites/cfg.rs"]
mod suite;

#[test]
fn guidance_endpoints_are_bit_exact() {
    suite::guidance_endpoints_are_bit_exact();
}

#[test]
fn actions_at_omega_one_and_zero_match_single_branches() {
    suite::actions_at_omega_one_and_zero_match_single_branches();
}

#[test]
fn one_conditioned_and_one_unconditional_call_per_action() {
    suite::one_conditioned_and_one_unconditional_call_per_action();
}

#[test]
fn eval_actions_are_deterministic() {
    suite::eval_actions_are_deterministic();
}
