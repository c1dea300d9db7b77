//! Surfel and light data model, footprint opacity and ray–surfel queries.
//!
//! Kernel indices run over surfels first, then lights, and stay stable for
//! the lifetime of a solve.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sh::{ColorSh, Direction, Material, Vec3};

mod io;

pub use io::{parse_scene, read_scene, serialize_scene, write_scene};

/// Opacity model `α = 1 - exp(-A (g G(u,v))^B)`.
pub const OPACITY_SCALE: f64 = 0.03279;
pub const OPACITY_POWER: f64 = 3.4;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Intersections with `u² + v²` above this are ignored (3σ).
    pub footprint_cutoff_sq: f64,
    /// Hits with opacity at or below this are ignored.
    pub alpha_min: f64,
    /// Fraction of a segment excluded at both ends during occlusion tests.
    pub segment_eps: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            footprint_cutoff_sq: 9.0,
            alpha_min: 1e-4,
            segment_eps: 1e-4,
        }
    }
}

/// One 2D Gaussian kernel on an oriented tangent plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub scale: [f64; 2],
    /// Geometry value (opacity amplitude).
    pub g: f64,
    /// Compensation factor for the center-to-center approximation.
    pub lambda: f64,
    pub material: Material,
    /// `None` for non-emissive surfels.
    pub emission: Option<ColorSh>,
}

impl Surfel {
    pub fn normal(&self) -> Vec3 {
        self.tangent_u.cross(&self.tangent_v)
    }

    pub fn is_emissive(&self) -> bool {
        self.emission.as_ref().is_some_and(|e| !e.is_zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightKind {
    Point,
    Directional,
}

/// An infinitesimal emitter. For directional lights `position` holds the
/// unit direction in which light travels.
#[derive(Debug, Clone, PartialEq)]
pub struct Light {
    pub kind: LightKind,
    pub position: Vec3,
    pub intensity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Surfel,
    PointLight,
    DirectionalLight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sh_degree: usize,
    pub surfels: Vec<Surfel>,
    pub lights: Vec<Light>,
    pub tolerances: Tolerances,
}

impl Scene {
    pub fn new(sh_degree: usize) -> Self {
        Scene {
            sh_degree,
            surfels: Vec::new(),
            lights: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }

    #[inline]
    pub fn kernel_count(&self) -> usize {
        self.surfels.len() + self.lights.len()
    }

    pub fn kind(&self, i: usize) -> KernelKind {
        if i < self.surfels.len() {
            KernelKind::Surfel
        } else {
            match self.lights[i - self.surfels.len()].kind {
                LightKind::Point => KernelKind::PointLight,
                LightKind::Directional => KernelKind::DirectionalLight,
            }
        }
    }

    pub fn surfel(&self, i: usize) -> Option<&Surfel> {
        self.surfels.get(i)
    }

    pub fn light(&self, i: usize) -> Option<&Light> {
        i.checked_sub(self.surfels.len()).and_then(|k| self.lights.get(k))
    }

    pub fn light_mut(&mut self, i: usize) -> Option<&mut Light> {
        let n = self.surfels.len();
        i.checked_sub(n).and_then(move |k| self.lights.get_mut(k))
    }

    /// Point or directional light (never receives, never occludes).
    pub fn is_light_kernel(&self, i: usize) -> bool {
        i >= self.surfels.len()
    }

    /// Any emitter: light kernels and emissive surfels.
    pub fn is_light(&self, i: usize) -> bool {
        self.is_light_kernel(i) || self.surfels[i].is_emissive()
    }

    pub fn light_indices(&self) -> Vec<usize> {
        (0..self.kernel_count()).filter(|&i| self.is_light(i)).collect()
    }

    /// Center for surfels and point lights, travel direction for directional lights.
    pub fn position(&self, i: usize) -> Vec3 {
        match self.surfel(i) {
            Some(s) => s.center,
            None => self.lights[i - self.surfels.len()].position,
        }
    }

    pub fn emission(&self, i: usize) -> ColorSh {
        match self.surfel(i) {
            Some(s) => s
                .emission
                .clone()
                .unwrap_or_else(|| ColorSh::zeros(self.sh_degree)),
            None => ColorSh::isotropic(self.sh_degree, self.lights[i - self.surfels.len()].intensity),
        }
    }

    /// Radius of the bounding sphere of surfel centers and point lights
    /// around their centroid.
    pub fn bounding_radius(&self) -> f64 {
        let pts: Vec<Vec3> = (0..self.kernel_count())
            .filter(|&i| self.kind(i) != KernelKind::DirectionalLight)
            .map(|i| self.position(i))
            .collect();
        if pts.is_empty() {
            return 1.0;
        }
        let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
        let r = pts.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let pts: Vec<Vec3> = (0..self.kernel_count())
            .filter(|&i| self.kind(i) != KernelKind::DirectionalLight)
            .map(|i| self.position(i))
            .collect();
        if pts.is_empty() {
            return Vec3::zeros();
        }
        pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64
    }
}

/// World point at local coordinates `(u, v)`.
pub fn tangent_point(s: &Surfel, u: f64, v: f64) -> Vec3 {
    s.center + s.tangent_u * (s.scale[0] * u) + s.tangent_v * (s.scale[1] * v)
}

/// `0.03279 g^3.4`, the opacity exponent at the kernel center.
#[inline]
pub fn opacity_exponent(g: f64) -> f64 {
    OPACITY_SCALE * g.powf(OPACITY_POWER)
}

/// Footprint opacity at local coordinates `(u, v)`.
pub fn opacity_at(s: &Surfel, u: f64, v: f64) -> f64 {
    opacity_from_radius_sq(s.g, u * u + v * v)
}

#[inline]
pub(crate) fn opacity_from_radius_sq(g: f64, r2: f64) -> f64 {
    let q = OPACITY_SCALE * (g * (-0.5 * r2).exp()).powf(OPACITY_POWER);
    (-(-q).exp_m1()).min(MAX_OPACITY)
}

/// Largest double below one; very dense footprints would otherwise round to
/// full opacity.
pub const MAX_OPACITY: f64 = 1.0 - f64::EPSILON / 2.0;

/// `∫_0^c (1 - e^{-y}) / y dy`.
pub fn expint_lower(c: f64) -> Result<f64> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "expint_lower needs a finite non-negative argument, got {c}"
        )));
    }
    Ok(ein(c))
}

fn ein(c: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    if c <= 1.0 {
        // Σ (-1)^{n+1} c^n / (n n!)
        let mut sum = 0.0;
        let mut power_over_fact = 1.0;
        for n in 1..60 {
            power_over_fact *= c / n as f64;
            let term = power_over_fact / n as f64;
            sum += if n % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        sum
    } else {
        exp_integral_e1(c) + c.ln() + EULER_GAMMA
    }
}

/// `E_1(x)` for `x > 1` by modified Lentz continued fraction.
fn exp_integral_e1(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x).exp()
}

/// `d/dc ∫_0^c (1 - e^{-y}) / y dy`.
pub(crate) fn expint_lower_derivative(c: f64) -> f64 {
    if c < 1e-8 {
        1.0 - 0.5 * c
    } else {
        -(-c).exp_m1() / c
    }
}

/// Closed-form `∫ α dx` over the whole tangent plane.
pub fn alpha_integral(s: &Surfel) -> f64 {
    let c = opacity_exponent(s.g);
    2.0 * PI / OPACITY_POWER * s.scale[0] * s.scale[1] * ein(c)
}

/// Derivative of [`alpha_integral`] with respect to `g`.
pub(crate) fn alpha_integral_dg(s: &Surfel) -> f64 {
    if s.g <= 0.0 {
        return 0.0;
    }
    let c = opacity_exponent(s.g);
    let dc = OPACITY_POWER * c / s.g;
    2.0 * PI / OPACITY_POWER * s.scale[0] * s.scale[1] * expint_lower_derivative(c) * dc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionRecord {
    pub surfel: usize,
    pub t: f64,
    pub point: Vec3,
    pub u: f64,
    pub v: f64,
    pub alpha: f64,
}

/// Plane hit of the parametric line `origin + t * dvec`, in local units.
/// Returns `(t, u, v)`; `None` when the line is parallel to the plane.
#[inline]
pub(crate) fn plane_hit(s: &Surfel, normal: &Vec3, origin: &Vec3, dvec: &Vec3) -> Option<(f64, f64, f64)> {
    let denom = normal.dot(dvec);
    if denom.abs() < 1e-14 * dvec.norm() {
        return None;
    }
    let t = normal.dot(&(s.center - origin)) / denom;
    let e = origin + dvec * t - s.center;
    Some((t, s.tangent_u.dot(&e) / s.scale[0], s.tangent_v.dot(&e) / s.scale[1]))
}

/// Intersects a ray with surfel `index` of `scene`.
pub fn ray_intersect(scene: &Scene, index: usize, origin: &Vec3, dir: &Direction) -> Option<IntersectionRecord> {
    let s = scene.surfel(index)?;
    let tol = &scene.tolerances;
    let (t, u, v) = plane_hit(s, &s.normal(), origin, dir.vec())?;
    if t <= 0.0 {
        return None;
    }
    let r2 = u * u + v * v;
    if r2 > tol.footprint_cutoff_sq {
        return None;
    }
    let alpha = opacity_at(s, u, v);
    if alpha <= tol.alpha_min {
        return None;
    }
    Some(IntersectionRecord {
        surfel: index,
        t,
        point: tangent_point(s, u, v),
        u,
        v,
        alpha,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn flat_surfel(center: Vec3, g: f64) -> Surfel {
        Surfel {
            center,
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            scale: [1.0, 1.0],
            g,
            lambda: 1.0,
            material: Material::diffuse([0.5; 3]),
            emission: None,
        }
    }

    #[test]
    fn tangent_point_axis_case() {
        let mut s = flat_surfel(Vec3::zeros(), 1.0);
        s.scale = [2.0, 1.0];
        assert_eq!(tangent_point(&s, 0.0, 0.0), Vec3::zeros());
        assert_eq!(tangent_point(&s, 1.0, 0.0), Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn opacity_values() {
        let s0 = flat_surfel(Vec3::zeros(), 0.0);
        assert_eq!(opacity_at(&s0, 0.3, 0.1), 0.0);
        let s1 = flat_surfel(Vec3::zeros(), 1.0);
        let direct = 1.0 - (-0.03279f64).exp();
        assert!((opacity_at(&s1, 0.0, 0.0) - direct).abs() < 1e-15);
        assert!((opacity_at(&s1, 0.0, 0.0) - 0.0322585).abs() < 5e-7);
    }

    #[test]
    fn expint_rejects_negative() {
        assert!(expint_lower(-1e-3).is_err());
        assert!(expint_lower(f64::NAN).is_err());
        assert_eq!(expint_lower(0.0).unwrap(), 0.0);
    }

    #[test]
    fn expint_branches_agree_near_switch() {
        // series and continued fraction must meet at c = 1
        let below = ein(1.0);
        let above = exp_integral_e1(1.0 + 1e-12) + (1.0f64 + 1e-12).ln() + EULER_GAMMA;
        assert!((below - above).abs() < 1e-11);
    }

    #[test]
    fn alpha_integral_scales_linearly() {
        let mut s = flat_surfel(Vec3::zeros(), 3.0);
        let a = alpha_integral(&s);
        s.scale[0] *= 2.0;
        assert_eq!(alpha_integral(&s), 2.0 * a);
        s.g = 0.0;
        assert_eq!(alpha_integral(&s), 0.0);
    }

    #[test]
    fn perpendicular_ray_hits_center() {
        let mut scene = Scene::new(1);
        scene.surfels.push(flat_surfel(Vec3::zeros(), 3.0));
        let d = Direction::new(0.0, 0.0, -1.0).unwrap();
        let hit = ray_intersect(&scene, 0, &Vec3::new(0.0, 0.0, 2.5), &d).unwrap();
        assert!((hit.t - 2.5).abs() < 1e-15);
        assert_eq!((hit.u, hit.v), (0.0, 0.0));
        let parallel = Direction::new(1.0, 0.0, 0.0).unwrap();
        assert!(ray_intersect(&scene, 0, &Vec3::new(0.0, 0.0, 1.0), &parallel).is_none());
        // behind the origin
        let away = Direction::new(0.0, 0.0, 1.0).unwrap();
        assert!(ray_intersect(&scene, 0, &Vec3::new(0.0, 0.0, 1.0), &away).is_none());
        // outside the 3σ footprint
        assert!(ray_intersect(&scene, 0, &Vec3::new(3.5, 0.0, 1.0), &d).is_none());
    }
}
