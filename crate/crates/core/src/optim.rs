//! First-order inverse rendering against target images.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::adjoint::backward;
use crate::error::{Error, Result};
use crate::params::{enumerate_params, param_gradient, param_value, rotate_frame, ParamFamily, ParamId};
use crate::render::{image_loss_backward, render_traced, Camera, ImageBuffer, LossKind};
use crate::scene::Scene;
use crate::sh::{max_shininess, ColorSh, Vec3};
use crate::solvers::{solve, SolverConfig, SolverKind};

/// Which parameter families are optimized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection {
    pub families: Vec<ParamFamily>,
}

impl ParamSelection {
    pub fn new(families: impl IntoIterator<Item = ParamFamily>) -> Result<Self> {
        let mut families: Vec<ParamFamily> = families.into_iter().collect();
        families.sort();
        families.dedup();
        if families.is_empty() {
            return Err(Error::InvalidArgument("select at least one parameter family".into()));
        }
        Ok(ParamSelection { families })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub iterations: usize,
    /// Step size per family; families without an entry use `default_lr`.
    pub learning_rates: BTreeMap<ParamFamily, f64>,
    pub default_lr: f64,
    pub adam: AdamConfig,
    pub solver: SolverConfig,
    pub loss: LossKind,
}

impl OptimConfig {
    pub fn new(iterations: usize, lr: f64) -> Self {
        OptimConfig {
            iterations,
            learning_rates: BTreeMap::new(),
            default_lr: lr,
            adam: AdamConfig::default(),
            solver: SolverConfig::new(SolverKind::Dense),
            loss: LossKind::L1,
        }
    }

    pub fn lr(&self, family: ParamFamily) -> f64 {
        self.learning_rates.get(&family).copied().unwrap_or(self.default_lr)
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        let lrs = self.learning_rates.values().chain(std::iter::once(&self.default_lr));
        for lr in lrs {
            if !(lr.is_finite() && *lr > 0.0) {
                return Err(Error::InvalidArgument(format!("invalid step size {lr}")));
            }
        }
        Ok(())
    }
}

/// Flattened parameters in optimization space: logarithms for positive
/// families, rotation increments for frames, raw values otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub ids: Vec<ParamId>,
    pub values: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

impl ParamVector {
    pub fn pack(scene: &Scene, selection: &ParamSelection, cfg: &OptimConfig) -> Result<Self> {
        let ids = enumerate_params(scene, &selection.families);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("the selected families have no parameters in this scene".into()));
        }
        let values = ids
            .iter()
            .map(|id| {
                let v = param_value(scene, id)?;
                Ok(if id.family.log_space() { v.ln() } else { v })
            })
            .collect::<Result<_>>()?;
        let step_sizes = ids.iter().map(|id| cfg.lr(id.family)).collect();
        Ok(ParamVector { ids, values, step_sizes })
    }

    /// Writes the values back into `scene`; frame increments are applied and reset.
    pub fn unpack(&mut self, scene: &mut Scene) -> Result<()> {
        let mut rotations: BTreeMap<usize, Vec3> = BTreeMap::new();
        let cap = max_shininess(scene.sh_degree);
        for (id, v) in self.ids.iter().zip(self.values.iter_mut()) {
            let (k, c) = (id.kernel, id.component);
            match id.family {
                ParamFamily::Frames => {
                    rotations.entry(k).or_insert_with(Vec3::zeros)[c] = *v;
                    *v = 0.0;
                }
                ParamFamily::Emission => {
                    if let Some(l) = scene.light_mut(k) {
                        *v = v.max(0.0);
                        l.intensity[c] = *v;
                    } else if let Some(e) = scene.surfels[k].emission.as_mut() {
                        e.as_mut_slice()[c] = *v;
                    }
                }
                ParamFamily::Brdf => {
                    let m = &mut scene.surfels[k].material;
                    match c {
                        0..=2 => {
                            *v = v.clamp(0.0, 1.0);
                            m.kd[c] = *v;
                        }
                        3..=5 => {
                            *v = v.clamp(0.0, 1.0);
                            m.ks[c - 3] = *v;
                        }
                        6 => {
                            *v = v.clamp(1e-3, cap);
                            m.shininess = *v;
                        }
                        _ => {
                            *v = v.clamp(0.0, 1.0);
                            m.blend = *v;
                        }
                    }
                }
                ParamFamily::Centers => scene.surfels[k].center[c] = *v,
                ParamFamily::Scales => scene.surfels[k].scale[c] = v.exp(),
                ParamFamily::G => scene.surfels[k].g = v.exp(),
                ParamFamily::Lambda => scene.surfels[k].lambda = v.exp(),
                ParamFamily::LightPositions => {
                    scene.light_mut(k).ok_or_else(|| Error::InvalidArgument(format!("{id} is not a light")))?.position[c] = *v
                }
            }
        }
        for (k, theta) in rotations {
            let s = &mut scene.surfels[k];
            rotate_frame(&mut s.tangent_u, &mut s.tangent_v, &theta);
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn step(params: &mut ParamVector, grads: &[f64], moments: &mut Moments, cfg: &AdamConfig) -> Result<()> {
    let n = params.values.len();
    if grads.len() != n || moments.first.len() != n || params.step_sizes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} parameters but {} gradients and {} moments",
            grads.len(),
            moments.first.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(params.ids[k].to_string()));
    }
    moments.steps += 1;
    let t = moments.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..n {
        let g = grads[k];
        moments.first[k] = cfg.beta1 * moments.first[k] + (1.0 - cfg.beta1) * g;
        moments.second[k] = cfg.beta2 * moments.second[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.first[k] / c1;
        let v_hat = moments.second[k] / c2;
        if params.step_sizes[k] != 0.0 && m_hat != 0.0 {
            params.values[k] -= params.step_sizes[k] * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One supervising view.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norms: BTreeMap<ParamFamily, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub scene: Scene,
    pub trace: Vec<TraceRow>,
}

/// Loss and `∂L/∂B^c` of one solved state against every target.
pub fn batch_loss(
    scene: &Scene,
    state: &crate::solvers::SolveState,
    targets: &[Target],
    kind: LossKind,
) -> Result<(f64, Vec<ColorSh>)> {
    let mut total = 0.0;
    let mut d_b = vec![ColorSh::zeros(scene.sh_degree); scene.kernel_count()];
    for t in targets {
        let (img, trace) = render_traced(scene, state, &t.camera)?;
        let (l, g) = image_loss_backward(&trace, &img, &t.image, kind)?;
        total += l;
        for (a, b) in d_b.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((total, d_b))
}

/// Alternates one transport solve, batch rendering of every target, the
/// backward pass and one update, `iterations` times.
pub fn run_optimization(
    scene: &Scene,
    targets: &[Target],
    selection: &ParamSelection,
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target view is required".into()));
    }
    cfg.validate()?;
    let mut scene = scene.clone();
    let mut params = ParamVector::pack(&scene, selection, cfg)?;
    let mut moments = Moments::new(params.values.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let solver = cfg.solver.clone().with_seed(cfg.solver.seed.wrapping_add(it as u64));
        let state = solve(&scene, &solver)?;
        let (loss, d_b) = batch_loss(&scene, &state, targets, cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss at iteration {it}")));
        }
        let adjoint_cfg = solver.clone().with_seed(solver.seed ^ 0x0AD7_01A7);
        let grads = backward(&scene, &state, &d_b, &adjoint_cfg)?;
        let flat = params
            .ids
            .iter()
            .zip(&params.values)
            .map(|(id, v)| {
                let g = param_gradient(&scene, &grads, id)?;
                Ok(if id.family.log_space() { g * v.exp() } else { g })
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut norms: BTreeMap<ParamFamily, f64> = selection.families.iter().map(|f| (*f, 0.0)).collect();
        for (id, g) in params.ids.iter().zip(&flat) {
            *norms.entry(id.family).or_default() += g * g;
        }
        norms.values_mut().for_each(|v| *v = v.sqrt());
        trace.push(TraceRow {
            iteration: it,
            loss,
            grad_norms: norms,
        });
        step(&mut params, &flat, &mut moments, &cfg.adam)?;
        params.unpack(&mut scene)?;
    }
    Ok(OptimResult { scene, trace })
}

/// CSV with columns `iteration,loss,grad_<family>...`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let families: Vec<ParamFamily> = trace
        .first()
        .map(|r| r.grad_norms.keys().copied().collect())
        .unwrap_or_default();
    let mut out = String::from("iteration,loss");
    for f in &families {
        out.push_str(&format!(",grad_{f}"));
    }
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{:e}", r.iteration, r.loss));
        for f in &families {
            out.push_str(&format!(",{:e}", r.grad_norms.get(f).copied().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(trace_csv(trace).as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: Vec<f64>, lr: f64) -> ParamVector {
        let n = values.len();
        ParamVector {
            ids: (0..n)
                .map(|k| ParamId {
                    family: ParamFamily::Centers,
                    kernel: 0,
                    component: k,
                })
                .collect(),
            values,
            step_sizes: vec![lr; n],
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut p = vector(vec![1.0, 2.0], 0.1);
        let mut m = Moments::new(2);
        m.first = vec![0.5, -0.5];
        m.second = vec![0.25, 0.25];
        let before = p.values.clone();
        let mut zero_m = Moments::new(2);
        step(&mut p, &[0.0, 0.0], &mut zero_m, &AdamConfig::default()).unwrap();
        assert_eq!(p.values, before);
        let cfg = AdamConfig::default();
        let mut q = vector(vec![1.0, 2.0], 0.0);
        step(&mut q, &[0.0, 0.0], &mut m, &cfg).unwrap();
        assert_eq!(m.first, vec![0.45, -0.45]);
        assert_eq!(q.values, before);
    }

    #[test]
    fn first_step_moves_by_step_size() {
        let mut p = vector(vec![0.0, 0.0], 0.01);
        let mut m = Moments::new(2);
        step(&mut p, &[3.0, -0.002], &mut m, &AdamConfig::default()).unwrap();
        assert!((p.values[0] + 0.01).abs() < 1e-12);
        assert!((p.values[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vector(vec![0.0, 0.0], 0.01);
        let mut m = Moments::new(2);
        let err = step(&mut p, &[0.0, f64::NAN], &mut m, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("centers[0].1"), "{err}");
    }
}
