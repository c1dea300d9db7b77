//! Backward pass: adjoint emission transport, material and geometry gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{
    alpha_integral, alpha_integral_dg, opacity_at, opacity_exponent, KernelKind, Scene,
    OPACITY_POWER, OPACITY_SCALE,
};
use crate::sh::{dot, eval_sh_with_jacobian, num_coeffs, phong_brdf_coeffs, ColorSh, Vec3};
use crate::solvers::{solve_system, SolveState, SolverConfig};
use crate::transport::{source_point, PairCache, TransportSystem};

/// Coefficients of `f^c` at or below this magnitude use the gather form.
pub const SMALL_COEFF: f64 = 1e-12;

/// Per-kernel gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub d_emission: Vec<ColorSh>,
    pub d_brdf: Vec<ColorSh>,
    pub d_center: Vec<Vec3>,
    pub d_scales: Vec<[f64; 2]>,
    /// Axis-angle rotation gradient of the tangent frame.
    pub d_frame: Vec<Vec3>,
    pub d_g: Vec<f64>,
    pub d_lambda: Vec<f64>,
    /// Pairs dropped because their endpoints coincide.
    pub skipped_pairs: usize,
}

impl GradBuffer {
    pub fn zeros(n: usize, degree: usize) -> Self {
        GradBuffer {
            d_emission: vec![ColorSh::zeros(degree); n],
            d_brdf: vec![ColorSh::zeros(degree); n],
            d_center: vec![Vec3::zeros(); n],
            d_scales: vec![[0.0; 2]; n],
            d_frame: vec![Vec3::zeros(); n],
            d_g: vec![0.0; n],
            d_lambda: vec![0.0; n],
            skipped_pairs: 0,
        }
    }

    pub fn kernel_count(&self) -> usize {
        self.d_g.len()
    }

    fn add(&mut self, other: &GradBuffer) {
        for i in 0..self.kernel_count() {
            self.d_emission[i].add_assign(&other.d_emission[i]);
            self.d_brdf[i].add_assign(&other.d_brdf[i]);
            self.d_center[i] += other.d_center[i];
            self.d_scales[i][0] += other.d_scales[i][0];
            self.d_scales[i][1] += other.d_scales[i][1];
            self.d_frame[i] += other.d_frame[i];
            self.d_g[i] += other.d_g[i];
            self.d_lambda[i] += other.d_lambda[i];
        }
        self.skipped_pairs += other.skipped_pairs;
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for i in 0..self.kernel_count() {
            let checks = [
                ("emission", self.d_emission[i].is_finite()),
                ("brdf", self.d_brdf[i].is_finite()),
                ("center", self.d_center[i].iter().all(|v| v.is_finite())),
                ("scales", self.d_scales[i].iter().all(|v| v.is_finite())),
                ("frame", self.d_frame[i].iter().all(|v| v.is_finite())),
                ("g", self.d_g[i].is_finite()),
                ("lambda", self.d_lambda[i].is_finite()),
            ];
            if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
                return Some(format!("kernel {i} {name}"));
            }
        }
        None
    }
}

fn check_reciprocity(scene: &Scene) -> Result<()> {
    // the dual solve relies on f(ω_I, ω_O) = f(-ω_O, -ω_I), which holds
    // when every coefficient's sign depends on m only through (-1)^m
    for (i, s) in scene.surfels.iter().enumerate() {
        let f = phong_brdf_coeffs(&s.material, scene.sh_degree);
        if !f.is_finite() {
            return Err(Error::InvalidArgument(format!("surfel {i} has a non-finite BRDF")));
        }
    }
    Ok(())
}

/// Solves `dE = (I - M)^{-T} dB` through the reversed transport system.
pub fn adjoint_emission_system(
    sys: &TransportSystem,
    d_radiosity: &[ColorSh],
    cfg: &SolverConfig,
) -> Result<Vec<ColorSh>> {
    if d_radiosity.len() != sys.kernel_count() {
        return Err(Error::ShapeMismatch("gradient length differs from kernel count".into()));
    }
    if let Some(i) = d_radiosity.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("dB of kernel {i}")));
    }
    let weighted = d_radiosity
        .iter()
        .zip(&sys.reflect)
        .map(|(d, r)| d.hadamard(r))
        .collect();
    let dual = sys.reversed(weighted)?;
    let y = solve_system(&dual, cfg)?;
    Ok(d_radiosity
        .iter()
        .zip(&y.gather)
        .map(|(d, g)| {
            let mut out = d.clone();
            out.add_assign(g);
            out
        })
        .collect())
}

/// Emission gradients `∂L/∂E^c` from radiosity gradients `∂L/∂B^c`.
pub fn adjoint_emission(scene: &Scene, d_radiosity: &[ColorSh], cfg: &SolverConfig) -> Result<Vec<ColorSh>> {
    check_reciprocity(scene)?;
    adjoint_emission_system(&TransportSystem::build(scene)?, d_radiosity, cfg)
}

/// `∂L/∂f^c_i = ∂L/∂E^c_i ⊙ (B^c_i - E^c_i) / f^c_i`, switching to the gather
/// form for coefficients at or below [`SMALL_COEFF`].
pub fn grad_brdf(scene: &Scene, state: &SolveState, d_emission: &[ColorSh]) -> Result<Vec<ColorSh>> {
    brdf_grad_impl(scene, state, d_emission, false)
}

/// The division-free gather form `∂L/∂E^c_i ⊙ α_i G_i`.
pub fn grad_brdf_gather(scene: &Scene, state: &SolveState, d_emission: &[ColorSh]) -> Result<Vec<ColorSh>> {
    brdf_grad_impl(scene, state, d_emission, true)
}

fn brdf_grad_impl(scene: &Scene, state: &SolveState, d_emission: &[ColorSh], gather_only: bool) -> Result<Vec<ColorSh>> {
    let n = scene.kernel_count();
    if state.kernel_count() != n || d_emission.len() != n {
        return Err(Error::ShapeMismatch("state or gradient does not match the scene".into()));
    }
    let degree = scene.sh_degree;
    Ok((0..n)
        .map(|i| {
            let mut out = ColorSh::zeros(degree);
            let Some(s) = scene.surfel(i) else {
                return out;
            };
            let f = phong_brdf_coeffs(&s.material, degree);
            let alpha = opacity_at(s, 0.0, 0.0);
            let e = scene.emission(i);
            for c in 0..3 {
                let (fc, bc, ec) = (f.channel(c), state.radiosity[i].channel(c), e.channel(c));
                let (gc, dc) = (state.gather[i].channel(c), d_emission[i].channel(c));
                for (k, o) in out.channel_mut(c).iter_mut().enumerate() {
                    *o = if !gather_only && fc[k].abs() > SMALL_COEFF {
                        dc[k] * (bc[k] - ec[k]) / fc[k]
                    } else {
                        dc[k] * alpha * gc[k]
                    };
                }
            }
            out
        })
        .collect())
}

struct PairInputs<'a> {
    scene: &'a Scene,
    state: &'a SolveState,
    /// `f^c_i ⊙ ∂L/∂E^c_i` per kernel.
    weighted: Vec<ColorSh>,
    brdf_alpha: Vec<f64>,
}

fn opacity_dg(g: f64) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    let c = opacity_exponent(g);
    (-c).exp() * OPACITY_POWER * c / g
}

fn pair_gradient(inp: &PairInputs, pair: &crate::transport::CachedPair, out: &mut GradBuffer) {
    let scene = inp.scene;
    let degree = scene.sh_degree;
    let (i, j) = (pair.receiver, pair.source);
    let recv = &scene.surfels[i];
    let n_i = recv.normal();
    let w_i = &inp.weighted[i];
    let b_j = &inp.state.radiosity[j];
    let omega = *pair.omega.vec();
    let v = pair.decay;
    let alpha_i = inp.brdf_alpha[i];

    let k = num_coeffs(degree);
    let (mut y_f, mut y_r) = (vec![0.0; k], vec![0.0; k]);
    let (mut j_f, mut j_r) = (vec![[0.0; 3]; k], vec![[0.0; 3]; k]);
    eval_sh_with_jacobian(&omega, degree, &mut y_f, &mut j_f);
    eval_sh_with_jacobian(&-omega, degree, &mut y_r, &mut j_r);

    let mut big_w = 0.0;
    let mut grad_w = Vec3::zeros();
    for c in 0..3 {
        let (wc, bc) = (w_i.channel(c), b_j.channel(c));
        let (a, b) = (dot(&y_r, wc), dot(&y_f, bc));
        big_w += a * b;
        // ∂/∂ω of (Y(-ω)ᵀw)(Y(ω)ᵀB)
        for kk in 0..k {
            let jr = Vec3::from(j_r[kk]);
            let jf = Vec3::from(j_f[kk]);
            grad_w += -jr * (wc[kk] * b) + jf * (bc[kk] * a);
        }
    }
    let s = v * alpha_i * big_w;

    // receiver opacity absorbed into the reflectance
    out.d_g[i] += v * big_w * opacity_dg(recv.g);

    let kind = scene.kind(j);
    let cos_i = -n_i.dot(&omega);
    let g_ni = -omega * (s / cos_i);
    out.d_frame[i] += n_i.cross(&g_ni);
    let mut g_omega = grad_w * (v * alpha_i) - n_i * (s / cos_i);

    if let Some(src) = scene.surfel(j) {
        let n_j = src.normal();
        let cos_j = n_j.dot(&omega);
        out.d_lambda[j] += s / src.lambda;
        out.d_scales[j][0] += s / src.scale[0];
        out.d_scales[j][1] += s / src.scale[1];
        let a = alpha_integral(src);
        out.d_g[j] += s * alpha_integral_dg(src) / a;
        out.d_frame[j] += n_j.cross(&(omega * (s / cos_j)));
        g_omega += n_j * (s / cos_j);
    }

    if kind != KernelKind::DirectionalLight {
        let d = (recv.center - scene.position(j)).norm();
        let proj = g_omega - omega * omega.dot(&g_omega);
        let g_pi = proj / d - omega * (2.0 * s / d);
        out.d_center[i] += g_pi;
        out.d_center[j] -= g_pi;
    }

    // occluders along the segment from the source point to p_i
    let from = source_point(scene, j, &recv.center);
    let seg = recv.center - from;
    for occ in &pair.occluders {
        let kk = occ.index;
        let o = &scene.surfels[kk];
        let n_k = o.normal();
        let q = OPACITY_SCALE * (o.g * (-0.5 * (occ.u * occ.u + occ.v * occ.v)).exp()).powf(OPACITY_POWER);
        let a = 1.7 * q * s;
        out.d_g[kk] -= s * q * OPACITY_POWER / o.g;
        let hit = from + seg * occ.t;
        let e = hit - o.center;
        let (su, sv) = (o.scale[0], o.scale[1]);
        let gvec = o.tangent_u * (2.0 * occ.u / su) + o.tangent_v * (2.0 * occ.v / sv);
        let dn = n_k.dot(&seg);
        let dg = seg.dot(&gvec);
        out.d_scales[kk][0] += a * (-2.0 * occ.u * occ.u / su);
        out.d_scales[kk][1] += a * (-2.0 * occ.v * occ.v / sv);
        out.d_frame[kk] += (o.tangent_u.cross(&e) * (2.0 * occ.u / su) + o.tangent_v.cross(&e) * (2.0 * occ.v / sv)
            - n_k.cross(&e) * (dg / dn))
            * a;
        out.d_center[kk] += (n_k * (dg / dn) - gvec) * a;
        let along = (gvec - n_k * (dg / dn)) * a;
        out.d_center[i] += along * occ.t;
        if kind == KernelKind::DirectionalLight {
            out.d_center[i] += along * (1.0 - occ.t);
        } else {
            out.d_center[j] += along * (1.0 - occ.t);
        }
    }
}

/// Geometry, opacity and compensation gradients accumulated over the cached pairs.
pub fn grad_geometry(
    scene: &Scene,
    state: &SolveState,
    d_emission: &[ColorSh],
    cache: &PairCache,
) -> Result<GradBuffer> {
    let n = scene.kernel_count();
    if state.kernel_count() != n || d_emission.len() != n {
        return Err(Error::ShapeMismatch("state or gradient does not match the scene".into()));
    }
    let degree = scene.sh_degree;
    let inp = PairInputs {
        scene,
        state,
        weighted: (0..n)
            .map(|i| match scene.surfel(i) {
                Some(s) => phong_brdf_coeffs(&s.material, degree).hadamard(&d_emission[i]),
                None => ColorSh::zeros(degree),
            })
            .collect(),
        brdf_alpha: (0..n)
            .map(|i| scene.surfel(i).map_or(0.0, |s| opacity_at(s, 0.0, 0.0)))
            .collect(),
    };
    const CHUNK: usize = 64;
    let partials: Vec<GradBuffer> = cache
        .pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut buf = GradBuffer::zeros(n, degree);
            for pair in chunk {
                if pair.receiver == pair.source
                    || (scene.kind(pair.source) != KernelKind::DirectionalLight
                        && scene.position(pair.source) == scene.position(pair.receiver))
                {
                    buf.skipped_pairs += 1;
                    continue;
                }
                pair_gradient(&inp, pair, &mut buf);
            }
            buf
        })
        .collect();
    let mut total = GradBuffer::zeros(n, degree);
    for p in &partials {
        total.add(p);
    }
    if total.skipped_pairs > 0 {
        log::warn!("{} degenerate pairs skipped in the geometry gradient", total.skipped_pairs);
    }
    Ok(total)
}

/// Full backward pass from `∂L/∂B^c` to every parameter family.
pub fn backward(
    scene: &Scene,
    state: &SolveState,
    d_radiosity: &[ColorSh],
    cfg: &SolverConfig,
) -> Result<GradBuffer> {
    check_reciprocity(scene)?;
    let cache = crate::transport::build_pair_cache(scene)?;
    let sys = TransportSystem::from_cache(scene, cache.clone())?;
    let d_e = adjoint_emission_system(&sys, d_radiosity, cfg)?;
    let mut grads = grad_geometry(scene, state, &d_e, &cache)?;
    grads.d_brdf = grad_brdf(scene, state, &d_e)?;
    grads.d_emission = d_e;
    if let Some(bad) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(bad));
    }
    Ok(grads)
}

mod gradcheck;

pub use gradcheck::{finite_diff_check, GradCheckReport, GradCheckRow, LossSpec, DEFAULT_EPS_SCHEDULE};
