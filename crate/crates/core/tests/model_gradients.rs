//! Finite-difference checks of the training objectives over every model
//! parameter.

mod common;

use common::{model_grad_check, Objective};

const SEEDS: u64 = 20;

fn sweep(which: Objective, tol: f64, name: &str) {
    for seed in 0..SEEDS {
        let r = model_grad_check(seed, which);
        assert!(
            r.max_rel_error <= tol,
            "{name} seed {seed}: {} at {:?}",
            r.max_rel_error,
            r.worst
        );
    }
}

#[test]
fn decode_nll_gradients() {
    sweep(Objective::Nll, 1e-4, "nll");
}

#[test]
fn soft_margin_loss_gradients() {
    sweep(Objective::SoftBml, 1e-4, "soft bml");
}

#[test]
fn rationale_objective_gradients_on_pairs() {
    sweep(Objective::Rg, 1e-3, "nll + λ·bml");
}
