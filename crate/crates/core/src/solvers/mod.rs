//! Radiosity solvers over a [`TransportSystem`].

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::sh::{luminance, ColorSh};
use crate::transport::TransportSystem;

mod dense;
mod hybrid;
mod mc;
mod progressive;
pub mod rng;
mod state_file;

pub use dense::{solve_dense, solve_dense_system, spectral_radius, DENSE_UNKNOWN_LIMIT};
pub use hybrid::{solve_hybrid, solve_hybrid_system};
pub use mc::{
    group_kernels, group_kernels_system, next_event, reservoir_sample, solve_mc, solve_mc_system, Grouping,
    McOptions, NextEvent, FULL_SWEEP_STEPS,
};
pub use progressive::{direct_pass, solve_progressive, solve_progressive_system, Termination};
pub use state_file::{read_state, state_from_json, state_to_json, write_state};

thread_local! {
    static SOLVES: Cell<usize> = const { Cell::new(0) };
}

/// Number of forward transport solves started on this thread.
pub fn solve_count() -> usize {
    SOLVES.with(|c| c.get())
}

pub fn reset_solve_count() {
    SOLVES.with(|c| c.set(0));
}

pub(crate) fn count_solve() {
    SOLVES.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Dense,
    #[serde(rename = "pr")]
    Progressive,
    #[serde(rename = "mc")]
    MonteCarlo,
    Hybrid,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(SolverKind::Dense),
            "pr" | "progressive" => Ok(SolverKind::Progressive),
            "mc" => Ok(SolverKind::MonteCarlo),
            "hybrid" => Ok(SolverKind::Hybrid),
            other => Err(Error::InvalidArgument(format!("unknown solver `{other}`"))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Dense => "dense",
            SolverKind::Progressive => "pr",
            SolverKind::MonteCarlo => "mc",
            SolverKind::Hybrid => "hybrid",
        })
    }
}

/// Steps used by training-mode Monte-Carlo solves.
pub const TRAINING_STEPS: usize = 64;
/// Steps used at inference (twice the training count).
pub const INFERENCE_STEPS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub steps: usize,
    pub seed: u64,
    pub termination: Termination,
    pub mc: McOptions,
}

impl SolverConfig {
    pub fn new(kind: SolverKind) -> Self {
        SolverConfig {
            kind,
            steps: TRAINING_STEPS,
            seed: 0,
            termination: Termination::default(),
            mc: McOptions::default(),
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Solver output: radiosity plus the Monte-Carlo and shooting bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveState {
    pub degree: usize,
    pub radiosity: Vec<ColorSh>,
    /// Sum of Monte-Carlo estimates per kernel.
    pub sum: Vec<ColorSh>,
    /// Sum of squared estimates, coefficient-wise.
    pub sum_sq: Vec<ColorSh>,
    pub visits: Vec<u64>,
    pub unshot: Vec<ColorSh>,
    pub variance: Vec<f64>,
    /// Pre-reflectance gather `Σ_j V_ji (Y(ω)ᵀB_j) Ȳ(ω)` of the final radiosity.
    pub gather: Vec<ColorSh>,
    /// `‖B - E - M B‖_∞` of the returned radiosity.
    pub residual: f64,
    pub solver: SolverKind,
    pub steps: usize,
    pub seed: u64,
}

impl SolveState {
    pub(crate) fn empty(sys: &TransportSystem, solver: SolverKind) -> Self {
        let n = sys.kernel_count();
        let z = ColorSh::zeros(sys.degree);
        SolveState {
            degree: sys.degree,
            radiosity: vec![z.clone(); n],
            sum: vec![z.clone(); n],
            sum_sq: vec![z.clone(); n],
            visits: vec![0; n],
            unshot: vec![z.clone(); n],
            variance: vec![0.0; n],
            gather: vec![z; n],
            residual: 0.0,
            solver,
            steps: 0,
            seed: 0,
        }
    }

    /// A state carrying only radiosity, e.g. one read back from disk.
    pub fn from_radiosity(degree: usize, radiosity: Vec<ColorSh>, solver: SolverKind) -> Self {
        let n = radiosity.len();
        let z = ColorSh::zeros(degree);
        SolveState {
            degree,
            radiosity,
            sum: vec![z.clone(); n],
            sum_sq: vec![z.clone(); n],
            visits: vec![0; n],
            unshot: vec![z.clone(); n],
            variance: vec![0.0; n],
            gather: vec![z; n],
            residual: 0.0,
            solver,
            steps: 0,
            seed: 0,
        }
    }

    pub fn kernel_count(&self) -> usize {
        self.radiosity.len()
    }

    /// Caches the gather of the current radiosity. With `resweep` the
    /// radiosity is replaced by `E + r ⊙ G`, which makes `B - E` factor
    /// exactly through the gather.
    pub(crate) fn finish(&mut self, sys: &TransportSystem, resweep: bool) {
        use rayon::prelude::*;
        self.gather = (0..sys.kernel_count())
            .into_par_iter()
            .map(|i| sys.pre_gather(i, &self.radiosity))
            .collect();
        if resweep {
            for i in 0..sys.kernel_count() {
                let mut b = sys.emission[i].clone();
                b.add_assign(&self.gather[i].hadamard(&sys.reflect[i]));
                self.radiosity[i] = b;
            }
        }
        self.residual = sys.residual(&self.radiosity);
    }
}

/// Per-kernel luminance-weighted sample variance from running sums.
pub(crate) fn variance_score(sum: &ColorSh, sum_sq: &ColorSh, visits: u64) -> f64 {
    if visits < 2 {
        return 0.0;
    }
    let d = visits as f64;
    let mut per = [0.0; 3];
    for (c, slot) in per.iter_mut().enumerate() {
        *slot = sum
            .channel(c)
            .iter()
            .zip(sum_sq.channel(c))
            .map(|(s, s2)| (s2 / d - (s / d) * (s / d)).max(0.0))
            .sum();
    }
    luminance(per)
}

/// Runs the configured solver on a prepared system without touching the
/// solve counter.
pub fn solve_system(sys: &TransportSystem, cfg: &SolverConfig) -> Result<SolveState> {
    match cfg.kind {
        SolverKind::Dense => solve_dense_system(sys),
        SolverKind::Progressive => Ok(solve_progressive_system(sys, &cfg.termination)),
        SolverKind::MonteCarlo => solve_mc_system(sys, cfg.steps, cfg.seed, &cfg.mc),
        SolverKind::Hybrid => solve_hybrid_system(sys, cfg.steps, cfg.seed, &cfg.mc),
    }
}

/// Builds the transport system for `scene` and solves it.
pub fn solve(scene: &Scene, cfg: &SolverConfig) -> Result<SolveState> {
    count_solve();
    let sys = TransportSystem::build(scene)?;
    solve_system(&sys, cfg)
}

/// Solves `runs` times with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn repeated_solves(scene: &Scene, cfg: &SolverConfig, runs: usize) -> Result<Vec<SolveState>> {
    if runs < 2 {
        return Err(Error::InvalidArgument("variance needs at least two runs".into()));
    }
    (0..runs as u64)
        .map(|r| solve(scene, &cfg.clone().with_seed(cfg.seed.wrapping_add(r))))
        .collect()
}

/// Unbiased sample variance across runs per kernel, averaged over every
/// coefficient of every channel.
pub fn kernel_variance(states: &[SolveState]) -> Result<Vec<f64>> {
    let Some(first) = states.first() else {
        return Err(Error::InvalidArgument("no states".into()));
    };
    if states.len() < 2 {
        return Err(Error::InvalidArgument("variance needs at least two runs".into()));
    }
    if states.iter().any(|s| s.kernel_count() != first.kernel_count() || s.degree != first.degree) {
        return Err(Error::ShapeMismatch("states come from different scenes".into()));
    }
    let runs = states.len() as f64;
    Ok((0..first.kernel_count())
        .map(|i| {
            let len = first.radiosity[i].as_slice().len();
            let total: f64 = (0..len)
                .map(|k| {
                    let vals = states.iter().map(|s| s.radiosity[i].as_slice()[k]);
                    let mean = vals.clone().sum::<f64>() / runs;
                    vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (runs - 1.0)
                })
                .sum();
            total / len as f64
        })
        .collect())
}
