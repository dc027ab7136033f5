//! DotWorld dynamics, rendering and dataset generation.

#[path = "suites/env_dataset.rs"]
mod suite;

#[test]
fn distractor_uncorrelated_with_agent_position() {
    suite::distractor_uncorrelated_with_agent_position();
}

#[test]
fn distractor_never_changes_the_physics() {
    suite::distractor_never_changes_the_physics();
}

#[test]
fn observation_is_a_function_of_state_and_pattern() {
    suite::observation_is_a_function_of_state_and_pattern();
}

#[test]
fn goal_sweep_covers_the_arena() {
    suite::goal_sweep_covers_the_arena();
}

#[test]
fn same_seed_gives_identical_bytes() {
    suite::same_seed_gives_identical_bytes();
}

#[test]
fn uniform_sampling_passes_chi_square() {
    suite::uniform_sampling_passes_chi_square();
}

#[test]
fn uniform_random_reach_reward_is_small_but_positive() {
    suite::uniform_random_reach_reward_is_small_but_positive();
}

#[test]
fn labeling_at_the_corner_gives_full_reward() {
    suite::labeling_at_the_corner_gives_full_reward();
}

#[test]
fn save_and_load_files() {
    suite::save_and_load_files();
}
