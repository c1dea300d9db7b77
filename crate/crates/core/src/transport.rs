//! Forward transport: transmittance, center-to-center decay, gathering and
//! shooting, and the visible-pair cache shared with the backward pass.

use crate::error::{Error, Result};
use crate::scene::{alpha_integral, opacity_at, opacity_from_radius_sq, plane_hit, KernelKind, Scene};
use crate::sh::{dot, eval_sh_into, num_coeffs, phong_brdf_coeffs, ColorSh, Direction, Vec3};

/// A surfel crossed by an occlusion segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub index: usize,
    /// Segment parameter of the crossing in `(ε, 1-ε)`.
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub alpha: f64,
}

/// Occluders strictly inside the segment `from → to`. Light kernels never occlude.
pub fn occluders(scene: &Scene, from: &Vec3, to: &Vec3, exclude: &[usize]) -> Vec<Occluder> {
    let tol = &scene.tolerances;
    let seg = to - from;
    let mut out = Vec::new();
    for (k, s) in scene.surfels.iter().enumerate() {
        if exclude.contains(&k) {
            continue;
        }
        let Some((t, u, v)) = plane_hit(s, &s.normal(), from, &seg) else {
            continue;
        };
        if t <= tol.segment_eps || t >= 1.0 - tol.segment_eps {
            continue;
        }
        let r2 = u * u + v * v;
        if r2 > tol.footprint_cutoff_sq {
            continue;
        }
        let alpha = opacity_from_radius_sq(s.g, r2);
        if alpha <= tol.alpha_min {
            continue;
        }
        out.push(Occluder { index: k, t, u, v, alpha });
    }
    out
}

/// `∏ (1 - α_k)` over the surfels crossing the open segment.
pub fn transmittance(scene: &Scene, from: &Vec3, to: &Vec3, exclude: &[usize]) -> f64 {
    occluders(scene, from, to, exclude)
        .iter()
        .map(|o| 1.0 - o.alpha)
        .product()
}

/// Geometry of one ordered kernel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeometry {
    pub receiver: usize,
    pub source: usize,
    /// Unit vector from the source toward the receiver.
    pub omega: Direction,
    /// Distance between the endpoints; `None` for directional sources.
    pub distance: Option<f64>,
    /// `|n_i·ω|`.
    pub cos_receiver: f64,
    /// `|n_j·ω|`, or 1 for lights.
    pub cos_source: f64,
    pub transmittance: f64,
    pub occluders: Vec<Occluder>,
    pub decay: f64,
}

impl PairGeometry {
    /// `|n_i·ω||n_j·ω| / d²`, the unoccluded geometric term used for sampling.
    pub fn sampling_term(&self) -> f64 {
        let falloff = self.distance.map_or(1.0, |d| 1.0 / (d * d));
        self.cos_receiver * self.cos_source * falloff
    }
}

/// Distance to the virtual origin of a directional light.
pub(crate) fn directional_reach(scene: &Scene) -> f64 {
    4.0 * (scene.bounding_radius() + scene.centroid().norm()) + 1.0
}

/// Origin of the segment that carries light from `source` to the point `at`.
pub(crate) fn source_point(scene: &Scene, source: usize, at: &Vec3) -> Vec3 {
    match scene.kind(source) {
        KernelKind::DirectionalLight => {
            let d = scene.position(source).normalize();
            at - d * directional_reach(scene)
        }
        _ => scene.position(source),
    }
}

/// Full pair evaluation. `Ok(None)` when the receiver cannot accept light
/// from the source (light receiver, back faces, zero support).
pub fn pair_geometry(scene: &Scene, source: usize, receiver: usize) -> Result<Option<PairGeometry>> {
    if source == receiver || scene.is_light_kernel(receiver) {
        return Ok(None);
    }
    let recv = &scene.surfels[receiver];
    let n_i = recv.normal();
    let (omega, distance) = match scene.kind(source) {
        KernelKind::DirectionalLight => {
            let d = scene.position(source);
            let n = d.norm();
            if !(n > 0.0) {
                return Err(Error::DegenerateGeometry(format!("directional light {source} has no direction")));
            }
            (d / n, None)
        }
        _ => {
            let diff = recv.center - scene.position(source);
            let d = diff.norm();
            if !(d > 0.0) {
                return Err(Error::DegenerateGeometry(format!(
                    "kernels {source} and {receiver} share a center"
                )));
            }
            (diff / d, Some(d))
        }
    };
    let ni_w = n_i.dot(&omega);
    if ni_w >= 0.0 {
        return Ok(None);
    }
    let (cos_source, support) = match scene.surfel(source) {
        Some(s) => {
            let nj_w = s.normal().dot(&omega);
            if nj_w <= 0.0 {
                return Ok(None);
            }
            (nj_w, s.lambda * alpha_integral(s))
        }
        None => (1.0, 1.0),
    };
    if support <= 0.0 {
        return Ok(None);
    }
    let from = source_point(scene, source, &recv.center);
    let occ = occluders(scene, &from, &recv.center, &[source, receiver]);
    let trans: f64 = occ.iter().map(|o| 1.0 - o.alpha).product();
    let falloff = distance.map_or(1.0, |d| 1.0 / (d * d));
    let decay = support * trans * (-ni_w) * cos_source * falloff;
    Ok(Some(PairGeometry {
        receiver,
        source,
        omega: Direction::from_unit(omega),
        distance,
        cos_receiver: -ni_w,
        cos_source,
        transmittance: trans,
        occluders: occ,
        decay,
    }))
}

/// Center-to-center decay `V_ji` from source `j` to receiver `i`.
pub fn decay(scene: &Scene, j: usize, i: usize) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidArgument("decay needs two distinct kernels".into()));
    }
    for k in [i, j] {
        if k >= scene.kernel_count() {
            return Err(Error::InvalidArgument(format!("kernel index {k} out of range")));
        }
        if scene.kind(k) == KernelKind::DirectionalLight {
            return Err(Error::InvalidArgument(format!(
                "kernel {k} is a directional light; use gather_direct"
            )));
        }
    }
    Ok(pair_geometry(scene, j, i)?.map_or(0.0, |p| p.decay))
}

/// `α_i(p_i) f^c_i`, the receiver-side reflectance; zero for light kernels.
pub fn reflectance(scene: &Scene, i: usize) -> ColorSh {
    match scene.surfel(i) {
        Some(s) => phong_brdf_coeffs(&s.material, scene.sh_degree).scaled(opacity_at(s, 0.0, 0.0)),
        None => ColorSh::zeros(scene.sh_degree),
    }
}

fn pair_term(reflect: &ColorSh, decay: f64, y_fwd: &[f64], y_rev: &[f64], b_src: &ColorSh) -> ColorSh {
    let mut out = ColorSh::zeros(reflect.degree());
    for c in 0..3 {
        let scale = decay * dot(y_fwd, b_src.channel(c));
        let r = reflect.channel(c);
        for ((o, rr), y) in out.channel_mut(c).iter_mut().zip(r).zip(y_rev) {
            *o = rr * y * scale;
        }
    }
    out
}

fn pair_bases(omega: &Direction, degree: usize) -> (Vec<f64>, Vec<f64>) {
    let k = num_coeffs(degree);
    let mut fwd = vec![0.0; k];
    let mut rev = vec![0.0; k];
    eval_sh_into(omega.vec(), degree, &mut fwd);
    eval_sh_into(&-omega.vec(), degree, &mut rev);
    (fwd, rev)
}

/// Single-pair contribution `f_i(ω)(Y(ω)ᵀB_j)V_ji`.
pub fn gather_from(scene: &Scene, i: usize, j: usize, b_j: &ColorSh) -> Result<ColorSh> {
    if i == j {
        return Err(Error::InvalidArgument("gather_from needs two distinct kernels".into()));
    }
    if b_j.degree() != scene.sh_degree {
        return Err(Error::ShapeMismatch(format!(
            "radiance of degree {} in a degree-{} scene",
            b_j.degree(),
            scene.sh_degree
        )));
    }
    let Some(p) = pair_geometry(scene, j, i)? else {
        return Ok(ColorSh::zeros(scene.sh_degree));
    };
    let (fwd, rev) = pair_bases(&p.omega, scene.sh_degree);
    Ok(pair_term(&reflectance(scene, i), p.decay, &fwd, &rev, b_j))
}

/// Direct illumination at receiver `i` from every emitter.
pub fn gather_direct(scene: &Scene, i: usize) -> Result<ColorSh> {
    let mut out = ColorSh::zeros(scene.sh_degree);
    if scene.is_light_kernel(i) {
        return Ok(out);
    }
    for j in scene.light_indices() {
        if j != i {
            out.add_assign(&gather_from(scene, i, j, &scene.emission(j))?);
        }
    }
    Ok(out)
}

/// Radiosity bookkeeping for shooting: accumulated and unshot radiance per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootState {
    pub accumulated: Vec<ColorSh>,
    pub unshot: Vec<ColorSh>,
}

impl ShootState {
    /// Both buffers start at the emission.
    pub fn from_emission(emission: Vec<ColorSh>) -> Self {
        ShootState {
            accumulated: emission.clone(),
            unshot: emission,
        }
    }
}

/// Distributes `unshot` from kernel `i` to every receiver and clears `i`'s unshot radiance.
pub fn shoot(scene: &Scene, i: usize, unshot: &ColorSh, state: &mut ShootState) -> Result<()> {
    state.unshot[i] = ColorSh::zeros(scene.sh_degree);
    if unshot.is_zero() {
        return Ok(());
    }
    for j in 0..scene.kernel_count() {
        if j == i {
            continue;
        }
        let inc = gather_from(scene, j, i, unshot)?;
        state.accumulated[j].add_assign(&inc);
        state.unshot[j].add_assign(&inc);
    }
    Ok(())
}

/// One cached visible pair with its basis evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedPair {
    pub receiver: usize,
    pub source: usize,
    pub decay: f64,
    pub omega: Direction,
    /// `Y(ω)`.
    pub y_fwd: Vec<f64>,
    /// `Y(-ω) = Ȳ(ω)`.
    pub y_rev: Vec<f64>,
    /// Unoccluded geometric sampling weight.
    pub sampling: f64,
    pub occluders: Vec<Occluder>,
}

/// Every ordered pair with positive decay, sorted by `(receiver, source)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCache {
    pub pairs: Vec<CachedPair>,
}

impl PairCache {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn build_pair_cache(scene: &Scene) -> Result<PairCache> {
    use rayon::prelude::*;
    let n = scene.kernel_count();
    let per_receiver: Vec<Vec<CachedPair>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in 0..n {
                if let Some(p) = pair_geometry(scene, j, i)? {
                    if p.decay > 0.0 {
                        let (y_fwd, y_rev) = pair_bases(&p.omega, scene.sh_degree);
                        row.push(CachedPair {
                            receiver: i,
                            source: j,
                            decay: p.decay,
                            omega: p.omega,
                            y_fwd,
                            y_rev,
                            sampling: p.sampling_term(),
                            occluders: p.occluders,
                        });
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(PairCache {
        pairs: per_receiver.into_iter().flatten().collect(),
    })
}

/// The linear system `B = E + M B` in pair-list form.
///
/// Every solver runs on this type; the adjoint builds the dual system by
/// reversing the pairs.
#[derive(Debug, Clone)]
pub struct TransportSystem {
    pub degree: usize,
    pub pairs: Vec<CachedPair>,
    /// `α_i f^c_i` per kernel.
    pub reflect: Vec<ColorSh>,
    pub emission: Vec<ColorSh>,
    /// Kernel positions and normals (zero normal for lights), for grouping.
    pub centers: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Kernels that hold only their own emission.
    pub fixed: Vec<bool>,
    by_receiver: Vec<std::ops::Range<usize>>,
    by_source: Vec<Vec<usize>>,
}

impl TransportSystem {
    pub fn build(scene: &Scene) -> Result<Self> {
        let cache = build_pair_cache(scene)?;
        Self::from_cache(scene, cache)
    }

    pub fn from_cache(scene: &Scene, cache: PairCache) -> Result<Self> {
        let n = scene.kernel_count();
        let reach = directional_reach(scene);
        let centers = (0..n)
            .map(|i| match scene.kind(i) {
                KernelKind::DirectionalLight => scene.centroid() - scene.position(i).normalize() * reach,
                _ => scene.position(i),
            })
            .collect();
        let normals = (0..n)
            .map(|i| scene.surfel(i).map_or(Vec3::zeros(), |s| s.normal()))
            .collect();
        Self::assemble(
            scene.sh_degree,
            cache.pairs,
            (0..n).map(|i| reflectance(scene, i)).collect(),
            (0..n).map(|i| scene.emission(i)).collect(),
            centers,
            normals,
            (0..n).map(|i| scene.is_light_kernel(i)).collect(),
        )
    }

    /// Builds a system from explicit parts; pairs are re-sorted by receiver.
    pub fn assemble(
        degree: usize,
        mut pairs: Vec<CachedPair>,
        reflect: Vec<ColorSh>,
        emission: Vec<ColorSh>,
        centers: Vec<Vec3>,
        normals: Vec<Vec3>,
        fixed: Vec<bool>,
    ) -> Result<Self> {
        let n = reflect.len();
        if [emission.len(), centers.len(), normals.len(), fixed.len()].iter().any(|&l| l != n) {
            return Err(Error::ShapeMismatch("per-kernel arrays differ in length".into()));
        }
        if reflect.iter().chain(&emission).any(|c| c.degree() != degree) {
            return Err(Error::ShapeMismatch(format!("coefficients must all have degree {degree}")));
        }
        if pairs.iter().any(|p| p.receiver >= n || p.source >= n) {
            return Err(Error::ShapeMismatch("pair index out of range".into()));
        }
        pairs.sort_by_key(|p| (p.receiver, p.source));
        let mut by_receiver = vec![0..0; n];
        let mut by_source = vec![Vec::new(); n];
        let mut start = 0;
        for i in 0..n {
            let mut end = start;
            while end < pairs.len() && pairs[end].receiver == i {
                end += 1;
            }
            by_receiver[i] = start..end;
            start = end;
        }
        for (k, p) in pairs.iter().enumerate() {
            by_source[p.source].push(k);
        }
        Ok(TransportSystem {
            degree,
            pairs,
            reflect,
            emission,
            centers,
            normals,
            fixed,
            by_receiver,
            by_source,
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.reflect.len()
    }

    /// Indices into `pairs` whose receiver is `i`.
    pub fn incoming(&self, i: usize) -> std::ops::Range<usize> {
        self.by_receiver[i].clone()
    }

    /// Indices into `pairs` whose source is `j`.
    pub fn outgoing(&self, j: usize) -> &[usize] {
        &self.by_source[j]
    }

    pub fn emitters(&self) -> Vec<usize> {
        (0..self.kernel_count()).filter(|&i| !self.emission[i].is_zero()).collect()
    }

    /// Contribution of pair `k` given its source radiance.
    pub fn pair_contribution(&self, k: usize, b_src: &ColorSh) -> ColorSh {
        let p = &self.pairs[k];
        pair_term(&self.reflect[p.receiver], p.decay, &p.y_fwd, &p.y_rev, b_src)
    }

    /// `Σ_j V_ji (Y(ω)ᵀB_j) Ȳ(ω)`, the gather before reflectance.
    pub fn pre_gather(&self, i: usize, radiance: &[ColorSh]) -> ColorSh {
        let mut g = ColorSh::zeros(self.degree);
        for p in &self.pairs[self.incoming(i)] {
            let b = &radiance[p.source];
            for c in 0..3 {
                let scale = p.decay * dot(&p.y_fwd, b.channel(c));
                for (o, y) in g.channel_mut(c).iter_mut().zip(&p.y_rev) {
                    *o += scale * y;
                }
            }
        }
        g
    }

    /// `(M B)_i`.
    pub fn gather(&self, i: usize, radiance: &[ColorSh]) -> ColorSh {
        self.pre_gather(i, radiance).hadamard(&self.reflect[i])
    }

    /// `M B` for every kernel.
    pub fn apply(&self, radiance: &[ColorSh]) -> Vec<ColorSh> {
        use rayon::prelude::*;
        (0..self.kernel_count())
            .into_par_iter()
            .map(|i| self.gather(i, radiance))
            .collect()
    }

    /// `‖B - E - M B‖_∞`.
    pub fn residual(&self, radiance: &[ColorSh]) -> f64 {
        let mb = self.apply(radiance);
        (0..self.kernel_count())
            .map(|i| {
                let mut r = radiance[i].clone();
                r.sub_assign(&self.emission[i]);
                r.sub_assign(&mb[i]);
                r.max_abs()
            })
            .fold(0.0, f64::max)
    }

    /// Same pairs with new emission.
    pub fn with_emission(&self, emission: Vec<ColorSh>) -> Result<Self> {
        if emission.len() != self.kernel_count() {
            return Err(Error::ShapeMismatch("emission length differs from kernel count".into()));
        }
        let mut out = self.clone();
        out.emission = emission;
        Ok(out)
    }

    /// Transposed transport: each pair reversed with negated direction and
    /// the same decay. Solving it in forward form with emission `r ⊙ dB`
    /// yields the adjoint solution.
    pub fn reversed(&self, emission: Vec<ColorSh>) -> Result<Self> {
        let pairs = self
            .pairs
            .iter()
            .map(|p| CachedPair {
                receiver: p.source,
                source: p.receiver,
                decay: p.decay,
                omega: -p.omega,
                y_fwd: p.y_rev.clone(),
                y_rev: p.y_fwd.clone(),
                sampling: p.sampling,
                occluders: Vec::new(),
            })
            .collect();
        Self::assemble(
            self.degree,
            pairs,
            self.reflect.clone(),
            emission,
            self.centers.clone(),
            self.normals.clone(),
            vec![false; self.kernel_count()],
        )
    }
}
