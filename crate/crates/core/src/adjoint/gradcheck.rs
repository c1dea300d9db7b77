//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::backward;
use crate::error::{Error, Result};
use crate::params::{param_gradient, param_value, perturb, ParamFamily, ParamId};
use crate::render::{image_loss, image_loss_backward, render_traced, Camera, ImageBuffer, LossKind};
use crate::scene::Scene;
use crate::sh::{dot, num_coeffs, ColorSh};
use crate::solvers::{solve_dense_system, SolveState, SolverConfig, SolverKind};
use crate::transport::TransportSystem;

/// Relative step sizes tried for every parameter.
pub const DEFAULT_EPS_SCHEDULE: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Scalar objective used by the checker.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// `Σ_i ⟨w_i, B_i⟩`.
    Linear(Vec<ColorSh>),
    /// `½ Σ_i ‖B_i - T_i‖²`.
    Quadratic(Vec<ColorSh>),
    /// Image loss summed over views.
    Image {
        views: Vec<(Camera, ImageBuffer)>,
        kind: LossKind,
    },
}

impl LossSpec {
    /// Linear loss with weights drawn uniformly from `[-1, 1)`.
    pub fn random_linear(kernel_count: usize, degree: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 3 * num_coeffs(degree);
        LossSpec::Linear(
            (0..kernel_count)
                .map(|_| {
                    let w = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                    ColorSh::from_flat(degree, w).expect("length matches the degree")
                })
                .collect(),
        )
    }

    /// Loss value and `∂L/∂B^c` for a solved state.
    pub fn evaluate(&self, scene: &Scene, state: &SolveState) -> Result<(f64, Vec<ColorSh>)> {
        let n = state.kernel_count();
        match self {
            LossSpec::Linear(w) | LossSpec::Quadratic(w) if w.len() != n => {
                Err(Error::ShapeMismatch("loss weights do not match the kernel count".into()))
            }
            LossSpec::Linear(w) => {
                let l = w
                    .iter()
                    .zip(&state.radiosity)
                    .map(|(a, b)| dot(a.as_slice(), b.as_slice()))
                    .sum();
                Ok((l, w.clone()))
            }
            LossSpec::Quadratic(t) => {
                let mut l = 0.0;
                let g = t
                    .iter()
                    .zip(&state.radiosity)
                    .map(|(t, b)| {
                        let mut d = b.clone();
                        d.sub_assign(t);
                        l += 0.5 * dot(d.as_slice(), d.as_slice());
                        d
                    })
                    .collect();
                Ok((l, g))
            }
            LossSpec::Image { views, kind } => {
                let mut total = 0.0;
                let mut grad = vec![ColorSh::zeros(state.degree); n];
                for (cam, target) in views {
                    let (_, trace) = render_traced(scene, state, cam)?;
                    let img = render_unrounded(scene, state, cam);
                    let (l, g) = image_loss_backward(&trace, &img, target, *kind)?;
                    total += l;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                }
                Ok((total, grad))
            }
        }
    }

    fn value(&self, scene: &Scene, state: &SolveState) -> Result<f64> {
        match self {
            // rendered values are rounded to single precision, which would
            // swamp small finite differences
            LossSpec::Image { views, kind } => {
                let mut total = 0.0;
                for (cam, target) in views {
                    let img = render_unrounded(scene, state, cam);
                    total += image_loss(&img, target, *kind)?.0;
                }
                Ok(total)
            }
            _ => Ok(self.evaluate(scene, state)?.0),
        }
    }
}

fn render_unrounded(scene: &Scene, state: &SolveState, cam: &Camera) -> ImageBuffer {
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let rgb = crate::render::trace_pixel(scene, state, &cam.position, &cam.ray(x, y));
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub parameter: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.rows.iter().map(|r| r.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error() <= tol
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>16} {:>16} {:>12} {:>8}\n",
            "parameter", "analytic", "finite-diff", "rel.error", "eps"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>16.9e} {:>16.9e} {:>12.3e} {:>8.0e}\n",
                r.parameter, r.analytic, r.finite_difference, r.relative_error, r.eps
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report values serialize")
    }
}

fn dense(scene: &Scene) -> Result<SolveState> {
    solve_dense_system(&TransportSystem::build(scene)?)
}

fn step_scale(scene: &Scene, id: &ParamId) -> Result<f64> {
    Ok(match id.family {
        ParamFamily::Centers | ParamFamily::LightPositions => scene.bounding_radius(),
        ParamFamily::Frames => 1.0,
        _ => param_value(scene, id)?.abs().max(1.0),
    })
}

/// Compares analytic gradients with central differences of dense solves.
/// The relative error is `|a - fd| / max(|a|, |fd|, floor)`; per parameter
/// the step with the smallest error is reported.
pub fn finite_diff_check(
    scene: &Scene,
    params: &[ParamId],
    loss: &LossSpec,
    eps_schedule: &[f64],
    floor: f64,
) -> Result<GradCheckReport> {
    if eps_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty step schedule".into()));
    }
    let state = dense(scene)?;
    let (value, d_b) = loss.evaluate(scene, &state)?;
    let grads = backward(scene, &state, &d_b, &SolverConfig::new(SolverKind::Dense))?;
    let rows = params
        .par_iter()
        .map(|id| {
            let analytic = param_gradient(scene, &grads, id)?;
            let scale = step_scale(scene, id)?;
            let mut best: Option<GradCheckRow> = None;
            for &eps in eps_schedule {
                let h = eps * scale;
                let mut plus = scene.clone();
                perturb(&mut plus, id, h)?;
                let mut minus = scene.clone();
                perturb(&mut minus, id, -h)?;
                let lp = loss.value(&plus, &dense(&plus)?)?;
                let lm = loss.value(&minus, &dense(&minus)?)?;
                let fd = (lp - lm) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(floor);
                let rel = if denom > 0.0 { (analytic - fd).abs() / denom } else { 0.0 };
                if best.as_ref().is_none_or(|b| rel < b.relative_error) {
                    best = Some(GradCheckRow {
                        parameter: id.to_string(),
                        analytic,
                        finite_difference: fd,
                        relative_error: rel,
                        eps,
                    });
                }
            }
            Ok(best.expect("schedule is non-empty"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { loss: value, rows })
}
