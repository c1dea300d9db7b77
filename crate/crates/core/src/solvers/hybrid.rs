use super::mc::McOptions;
use super::{count_solve, solve_mc_system, SolveState, SolverKind};
use crate::error::Result;
use crate::scene::Scene;
use crate::transport::TransportSystem;

/// Direct light by one shooting pass per emitter, indirect light by the
/// Monte-Carlo solver on the residual system seeded with the unshot radiance.
pub fn solve_hybrid_system(sys: &TransportSystem, steps: usize, seed: u64, opts: &McOptions) -> Result<SolveState> {
    let shot = super::direct_pass(sys);
    let residual = sys.with_emission(shot.unshot.clone())?;
    let mut state = solve_mc_system(&residual, steps, seed, opts)?;
    for i in 0..sys.kernel_count() {
        // B = B̂ + B^r - δB
        let mut b = shot.accumulated[i].clone();
        b.add_assign(&state.radiosity[i]);
        b.sub_assign(&shot.unshot[i]);
        state.radiosity[i] = b;
    }
    state.unshot = shot.unshot;
    state.solver = SolverKind::Hybrid;
    state.finish(sys, false);
    Ok(state)
}

pub fn solve_hybrid(scene: &Scene, steps: usize, seed: u64) -> Result<SolveState> {
    count_solve();
    solve_hybrid_system(&TransportSystem::build(scene)?, steps, seed, &McOptions::default())
}
