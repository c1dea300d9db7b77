//! Temporal-difference Monte-Carlo solver with next-event estimation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use super::rng::stream;
use super::{count_solve, variance_score, SolveState, SolverKind};
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::sh::{dot, eval_sh_into, luminance, num_coeffs, ColorSh, Vec3};
use crate::transport::TransportSystem;

/// Steps during which every kernel is updated.
pub const FULL_SWEEP_STEPS: usize = 8;

const KMEANS_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct McOptions {
    /// Two-level source sampling over this many K-means groups.
    pub groups: Option<usize>,
}

/// Streams weights once and keeps one index with probability `w_i / Σw`.
/// Returns the index and its selection probability, or `None` when every
/// weight is zero.
pub fn reservoir_sample<R: Rng + ?Sized>(
    weights: impl IntoIterator<Item = f64>,
    rng: &mut R,
) -> Option<(usize, f64)> {
    let mut total = 0.0;
    let mut chosen: Option<(usize, f64)> = None;
    for (i, w) in weights.into_iter().enumerate() {
        if !(w > 0.0) {
            continue;
        }
        total += w;
        if rng.random::<f64>() * total < w {
            chosen = Some((i, w));
        }
    }
    chosen.map(|(i, w)| (i, w / total))
}

/// K-means partition of the kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub luminance: Vec<f64>,
    summed: Vec<ColorSh>,
    members: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    /// Refreshes the per-group summed radiance from the current estimates.
    pub fn update_radiance(&mut self, radiance: &[ColorSh]) {
        for (g, members) in self.members.iter().enumerate() {
            let mut s = ColorSh::zeros(radiance[0].degree());
            for &m in members {
                s.add_assign(&radiance[m]);
            }
            self.luminance[g] = luminance(s.channel_norms());
            self.summed[g] = s;
        }
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Groups kernels by position and orientation.
pub fn group_kernels_system(
    sys: &TransportSystem,
    radiance: &[ColorSh],
    n_groups: usize,
    iterations: usize,
) -> Result<Grouping> {
    let n = sys.kernel_count();
    if n_groups == 0 || n_groups > n {
        return Err(Error::InvalidArgument(format!(
            "group count must be in 1..={n}, got {n_groups}"
        )));
    }
    let centroid = sys.centers.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let radius = sys
        .centers
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max)
        .max(1e-12);
    let feats: Vec<[f64; 6]> = (0..n)
        .map(|i| {
            let (p, nn) = (sys.centers[i], sys.normals[i] * (radius / 4.0));
            [p.x, p.y, p.z, nn.x, nn.y, nn.z]
        })
        .collect();

    // farthest-point seeding from kernel 0
    let mut seeds = vec![feats[0]];
    let mut nearest: Vec<f64> = feats.iter().map(|f| sq(f, &feats[0])).collect();
    while seeds.len() < n_groups {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        seeds.push(feats[far]);
        for (d, f) in nearest.iter_mut().zip(&feats) {
            *d = d.min(sq(f, &feats[far]));
        }
    }

    let assign = |seeds: &[[f64; 6]]| -> Vec<usize> {
        feats
            .iter()
            .map(|f| {
                seeds
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (g, s)| {
                        let d = sq(f, s);
                        if d < acc.1 {
                            (g, d)
                        } else {
                            acc
                        }
                    })
                    .0
            })
            .collect()
    };
    let mut assignment = assign(&seeds);
    for _ in 0..iterations {
        let mut sums = vec![[0.0; 6]; n_groups];
        let mut counts = vec![0usize; n_groups];
        for (f, &g) in feats.iter().zip(&assignment) {
            counts[g] += 1;
            for (s, v) in sums[g].iter_mut().zip(f) {
                *s += v;
            }
        }
        for g in 0..n_groups {
            if counts[g] > 0 {
                seeds[g] = sums[g].map(|s| s / counts[g] as f64);
            } else {
                // re-seed on the point worst served by its own group
                let worst = (0..n)
                    .map(|i| (i, sq(&feats[i], &seeds[assignment[i]])))
                    .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                seeds[g] = feats[worst];
                assignment[worst] = g;
            }
        }
        assignment = assign(&seeds);
    }
    // every group must be non-empty in the final partition
    for g in 0..n_groups {
        if !assignment.contains(&g) {
            let donor = (0..n)
                .filter(|&i| assignment.iter().filter(|&&a| a == assignment[i]).count() > 1)
                .max_by(|&a, &b| {
                    sq(&feats[a], &seeds[assignment[a]])
                        .total_cmp(&sq(&feats[b], &seeds[assignment[b]]))
                        .then(b.cmp(&a))
                })
                .expect("n_groups <= n leaves a group with several members");
            assignment[donor] = g;
        }
    }

    let mut members = vec![Vec::new(); n_groups];
    for (i, &g) in assignment.iter().enumerate() {
        members[g].push(i);
    }
    let centers = members
        .iter()
        .map(|m| m.iter().fold(Vec3::zeros(), |a, &i| a + sys.centers[i]) / m.len() as f64)
        .collect();
    let normals = members
        .iter()
        .map(|m| {
            let s = m.iter().fold(Vec3::zeros(), |a, &i| a + sys.normals[i]);
            let len = s.norm();
            if len > 0.0 {
                s / len
            } else {
                s
            }
        })
        .collect();
    let mut grouping = Grouping {
        assignment,
        centers,
        normals,
        luminance: vec![0.0; n_groups],
        summed: vec![ColorSh::zeros(sys.degree); n_groups],
        members,
    };
    grouping.update_radiance(radiance);
    Ok(grouping)
}

/// Groups the kernels of `scene` using the radiosity of `state`.
pub fn group_kernels(scene: &Scene, state: &SolveState, n_groups: usize, iterations: usize) -> Result<Grouping> {
    let sys = TransportSystem::build(scene)?;
    if state.kernel_count() != sys.kernel_count() {
        return Err(Error::ShapeMismatch("state does not match scene".into()));
    }
    group_kernels_system(&sys, &state.radiosity, n_groups, iterations)
}

/// A sampled incoming pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextEvent {
    /// Index into the system's pair list.
    pub pair: usize,
    pub source: usize,
    pub probability: f64,
}

fn pair_weight(sys: &TransportSystem, k: usize, radiance: &[ColorSh]) -> f64 {
    let p = &sys.pairs[k];
    let b = &radiance[p.source];
    let per = [0, 1, 2].map(|c| dot(&p.y_fwd, b.channel(c)).abs());
    luminance(per) * p.sampling
}

fn group_weight(sys: &TransportSystem, grouping: &Grouping, g: usize, receiver: usize) -> f64 {
    let diff = sys.centers[receiver] - grouping.centers[g];
    let d = diff.norm();
    if d < 1e-12 {
        return 0.0;
    }
    let w = diff / d;
    let mut y = vec![0.0; num_coeffs(sys.degree)];
    eval_sh_into(&w, sys.degree, &mut y);
    let s = &grouping.summed[g];
    let lum = luminance([0, 1, 2].map(|c| dot(&y, s.channel(c)).abs()));
    let ng = grouping.normals[g];
    let cos_g = if ng.norm() > 0.0 { ng.dot(&w).abs() } else { 1.0 };
    lum * sys.normals[receiver].dot(&w).abs() * cos_g / (d * d)
}

/// Importance-samples the source of one incoming pair of `receiver`.
pub fn next_event<R: Rng + ?Sized>(
    sys: &TransportSystem,
    radiance: &[ColorSh],
    receiver: usize,
    grouping: Option<&Grouping>,
    rng: &mut R,
) -> Option<NextEvent> {
    let range = sys.incoming(receiver);
    let start = range.start;
    let Some(grouping) = grouping else {
        let (off, prob) = reservoir_sample(range.map(|k| pair_weight(sys, k, radiance)), rng)?;
        let k = start + off;
        return Some(NextEvent {
            pair: k,
            source: sys.pairs[k].source,
            probability: prob,
        });
    };

    let mut per_group: Vec<Vec<(usize, f64)>> = vec![Vec::new(); grouping.len()];
    for k in range {
        let w = pair_weight(sys, k, radiance);
        if w > 0.0 {
            per_group[grouping.assignment[sys.pairs[k].source]].push((k, w));
        }
    }
    let eligible: Vec<usize> = (0..grouping.len()).filter(|&g| !per_group[g].is_empty()).collect();
    if eligible.is_empty() {
        return None;
    }
    let approx: Vec<f64> = eligible
        .iter()
        .map(|&g| group_weight(sys, grouping, g, receiver))
        .collect();
    let positive: Vec<f64> = approx.iter().copied().filter(|w| *w > 0.0).collect();
    let floor = if positive.is_empty() {
        1.0
    } else {
        1e-3 * positive.iter().sum::<f64>() / positive.len() as f64
    };
    let (gi, p_group) = reservoir_sample(approx.iter().map(|w| w + floor), rng)?;
    let members = &per_group[eligible[gi]];
    let (mi, p_member) = reservoir_sample(members.iter().map(|(_, w)| *w), rng)?;
    let k = members[mi].0;
    Some(NextEvent {
        pair: k,
        source: sys.pairs[k].source,
        probability: p_group * p_member,
    })
}

fn select_kernels(scores: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let weights: Vec<f64> = scores.iter().map(|s| s + 1e-6 * mean).collect();
    let dist = WeightedIndex::new(&weights).expect("weights are positive and finite");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Runs `steps` TD(0) steps and returns the running means as radiosity.
pub fn solve_mc_system(sys: &TransportSystem, steps: usize, seed: u64, opts: &McOptions) -> Result<SolveState> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo solve needs at least one step".into()));
    }
    let n = sys.kernel_count();
    let mut state = SolveState::empty(sys, SolverKind::MonteCarlo);
    state.steps = steps;
    state.seed = seed;
    let mut grouping = match opts.groups {
        Some(g) => Some(group_kernels_system(sys, &state.radiosity, g, KMEANS_ITERATIONS)?),
        None => None,
    };
    for t in 1..=steps {
        let snapshot = &state.radiosity;
        if let Some(g) = grouping.as_mut() {
            g.update_radiance(snapshot);
        }
        let selected: Vec<usize> = if t <= FULL_SWEEP_STEPS {
            (0..n).collect()
        } else {
            select_kernels(&state.variance, &mut stream(seed, t as u64, u64::MAX))
        };
        let estimates: Vec<ColorSh> = selected
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut est = sys.emission[i].clone();
                if sys.fixed[i] {
                    return est;
                }
                let mut rng = stream(seed, t as u64, slot as u64);
                if let Some(ev) = next_event(sys, snapshot, i, grouping.as_ref(), &mut rng) {
                    let contrib = sys.pair_contribution(ev.pair, &snapshot[ev.source]);
                    est.add_assign(&contrib.scaled(1.0 / ev.probability));
                }
                est
            })
            .collect();
        for (&i, est) in selected.iter().zip(&estimates) {
            state.sum[i].add_assign(est);
            state.sum_sq[i].add_assign(&est.hadamard(est));
            state.visits[i] += 1;
        }
        for i in 0..n {
            if state.visits[i] > 0 {
                state.radiosity[i] = state.sum[i].scaled(1.0 / state.visits[i] as f64);
            }
            state.variance[i] = variance_score(&state.sum[i], &state.sum_sq[i], state.visits[i]);
        }
    }
    state.finish(sys, false);
    Ok(state)
}

pub fn solve_mc(scene: &Scene, steps: usize, seed: u64) -> Result<SolveState> {
    count_solve();
    solve_mc_system(&TransportSystem::build(scene)?, steps, seed, &McOptions::default())
}
