//! Shared fixtures for the kernel benchmarks: a mid-sized well-driven 2D
//! case and its Jacobian at a representative perturbed state.

use thermoflow::cases::{build_case, CaseConfig, CaseKind};
use thermoflow::discretization::{assemble_jacobian, BlockSystem, ReservoirModel, State};

/// A well-2d-iso model at the given resolution with a smoothly perturbed
/// state (so every Jacobian block is populated).
pub fn fixture(n: usize) -> (ReservoirModel, State, State) {
    let mut cfg = CaseConfig::default_for(CaseKind::Well2dIso);
    cfg.n = n;
    let built = build_case(&cfg).expect("catalog case builds");
    let prev = built.initial.clone();
    let mut state = built.initial;
    for i in 0..state.num_cells() {
        let x = i as f64 / state.num_cells() as f64;
        state.p[i] += 2e6 * (x - 0.5);
        state.t[i] += 20.0 * x;
        state.s_o[i] -= 0.05 * x;
    }
    (built.model, state, prev)
}

pub fn jacobian(n: usize) -> BlockSystem {
    let (model, state, prev) = fixture(n);
    assemble_jacobian(&model, &state, &prev).expect("assembly succeeds")
}
