use rayon::prelude::*;

use super::{count_solve, SolveState, SolverKind};
use crate::error::Result;
use crate::scene::Scene;
use crate::sh::{luminance, ColorSh};
use crate::transport::{ShootState, TransportSystem};

/// Stopping rule for progressive refinement. Refinement stops at whichever
/// limit is reached first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Termination {
    /// One sweep is `N` shots.
    pub max_sweeps: Option<usize>,
    /// Stop once every kernel's unshot magnitude is at or below this.
    pub threshold: Option<f64>,
}

impl Default for Termination {
    fn default() -> Self {
        Termination {
            max_sweeps: Some(10_000),
            threshold: Some(1e-10),
        }
    }
}

impl Termination {
    pub fn sweeps(n: usize) -> Self {
        Termination {
            max_sweeps: Some(n),
            threshold: None,
        }
    }

    pub fn threshold(t: f64) -> Self {
        Termination {
            max_sweeps: Some(10_000),
            threshold: Some(t),
        }
    }
}

fn magnitude(c: &ColorSh) -> f64 {
    luminance(c.channel_norms())
}

fn shoot_system(sys: &TransportSystem, src: usize, st: &mut ShootState) {
    let unshot = std::mem::replace(&mut st.unshot[src], ColorSh::zeros(sys.degree));
    if unshot.is_zero() {
        return;
    }
    let increments: Vec<(usize, ColorSh)> = sys
        .outgoing(src)
        .par_iter()
        .map(|&k| (sys.pairs[k].receiver, sys.pair_contribution(k, &unshot)))
        .collect();
    for (recv, inc) in increments {
        st.accumulated[recv].add_assign(&inc);
        st.unshot[recv].add_assign(&inc);
    }
}

/// Every emitter shoots its emission once, in index order.
pub fn direct_pass(sys: &TransportSystem) -> ShootState {
    let mut st = ShootState::from_emission(sys.emission.clone());
    for i in sys.emitters() {
        shoot_system(sys, i, &mut st);
    }
    st
}

pub fn solve_progressive_system(sys: &TransportSystem, term: &Termination) -> SolveState {
    let n = sys.kernel_count();
    let mut st = ShootState::from_emission(sys.emission.clone());
    let max_shots = term.max_sweeps.map_or(usize::MAX, |s| s.saturating_mul(n));
    let threshold = term.threshold.unwrap_or(0.0);
    let mut shots = 0;
    while shots < max_shots {
        let (best, mag) = st
            .unshot
            .iter()
            .map(magnitude)
            .enumerate()
            .fold((0, -1.0), |acc, (i, m)| if m > acc.1 { (i, m) } else { acc });
        if mag <= threshold || mag <= 0.0 {
            break;
        }
        shoot_system(sys, best, &mut st);
        shots += 1;
    }
    log::debug!("progressive refinement finished after {shots} shots");
    let mut state = SolveState::empty(sys, SolverKind::Progressive);
    state.radiosity = st.accumulated;
    state.unshot = st.unshot;
    state.steps = shots;
    state.finish(sys, false);
    state
}

pub fn solve_progressive(scene: &Scene, term: &Termination) -> Result<SolveState> {
    count_solve();
    Ok(solve_progressive_system(&TransportSystem::build(scene)?, term))
}
