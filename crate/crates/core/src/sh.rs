//! Real spherical harmonics: basis evaluation, tangent-plane derivatives,
//! quadrature projection and the closed-form Phong BRDF expansion.
//!
//! Convention: real, orthonormal, Condon–Shortley phase included. Coefficients
//! are flattened as `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`, i.e. index
//! `l*l + l + m`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Highest degree supported by the default configuration.
pub const MAX_DEGREE: usize = 9;

/// Number of coefficients for a degree-`degree` expansion.
#[inline]
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Flat index of `(l, m)`.
#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Inverse of [`sh_index`].
pub fn sh_lm(index: usize) -> (usize, i64) {
    let l = (index as f64).sqrt().floor() as usize;
    // guard against rounding at perfect squares
    let l = if (l + 1) * (l + 1) <= index { l + 1 } else { l };
    (l, index as i64 - (l * l + l) as i64)
}

/// A unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vec(Vec3::new(x, y, z))
    }

    /// Normalizes `v`; rejects non-finite or zero-length input.
    pub fn from_vec(v: Vec3) -> Result<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "direction has non-finite components {v:?}"
            )));
        }
        let norm = v.norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("zero-length direction".into()));
        }
        Ok(Direction(v / norm))
    }

    /// Wraps a vector the caller guarantees is unit length.
    #[inline]
    pub(crate) fn from_unit(v: Vec3) -> Self {
        Direction(v)
    }

    #[inline]
    pub fn vec(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0.x
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.0.y
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.0.z
    }
}

impl std::ops::Neg for Direction {
    type Output = Direction;

    fn neg(self) -> Direction {
        Direction(-self.0)
    }
}

/// Coefficients of one real spherical function.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVector {
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl ShVector {
    pub fn zeros(degree: usize) -> Self {
        ShVector {
            degree,
            coeffs: vec![0.0; num_coeffs(degree)],
        }
    }

    pub fn from_coeffs(degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != num_coeffs(degree) {
            return Err(Error::InvalidArgument(format!(
                "degree {degree} needs {} coefficients, got {}",
                num_coeffs(degree),
                coeffs.len()
            )));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite SH coefficient".into()));
        }
        Ok(ShVector { degree, coeffs })
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.coeffs, other)
    }

    /// Evaluates the expansion in direction `dir`.
    pub fn eval(&self, dir: &Direction) -> f64 {
        let basis = eval_sh(dir, self.degree);
        self.dot(&basis.coeffs)
    }
}

/// Per-channel (RGB) coefficient vectors sharing one degree, stored
/// channel-major: `[R_0..R_K, G_0..G_K, B_0..B_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorSh {
    degree: usize,
    data: Vec<f64>,
}

impl ColorSh {
    pub fn zeros(degree: usize) -> Self {
        ColorSh {
            degree,
            data: vec![0.0; 3 * num_coeffs(degree)],
        }
    }

    pub fn from_flat(degree: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * num_coeffs(degree) {
            return Err(Error::InvalidArgument(format!(
                "degree {degree} colour expansion needs {} values, got {}",
                3 * num_coeffs(degree),
                data.len()
            )));
        }
        Ok(ColorSh { degree, data })
    }

    /// Isotropic radiance `rgb` in every direction (only the DC term).
    pub fn isotropic(degree: usize, rgb: [f64; 3]) -> Self {
        let mut out = Self::zeros(degree);
        let k = num_coeffs(degree);
        for c in 0..3 {
            out.data[c * k] = rgb[c] * 2.0 * PI.sqrt();
        }
        out
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.degree
    }

    #[inline]
    pub fn coeffs_per_channel(&self) -> usize {
        num_coeffs(self.degree)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let k = self.coeffs_per_channel();
        &self.data[c * k..(c + 1) * k]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let k = self.coeffs_per_channel();
        &mut self.data[c * k..(c + 1) * k]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &ColorSh) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &ColorSh) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn scaled(&self, s: f64) -> ColorSh {
        ColorSh {
            degree: self.degree,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &ColorSh) -> ColorSh {
        ColorSh {
            degree: self.degree,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }

    /// `Σ_k c_k basis_k` per channel.
    pub fn eval_with_basis(&self, basis: &[f64]) -> [f64; 3] {
        [
            dot(self.channel(0), basis),
            dot(self.channel(1), basis),
            dot(self.channel(2), basis),
        ]
    }

    /// Per-channel Euclidean norm of the coefficient vector.
    pub fn channel_norms(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| self.channel(c).iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Rec. 709 luminance of an RGB triple.
#[inline]
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Diffuse + Phong mixture material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Diffuse albedo per channel.
    pub kd: [f64; 3],
    /// Specular albedo per channel.
    pub ks: [f64; 3],
    pub shininess: f64,
    /// Diffuse/specular blend `k`: 1 is purely diffuse.
    pub blend: f64,
}

impl Material {
    pub fn diffuse(albedo: [f64; 3]) -> Self {
        Material {
            kd: albedo,
            ks: [0.0; 3],
            shininess: 1.0,
            blend: 1.0,
        }
    }

    /// Non-reflective material (all BRDF coefficients zero).
    pub fn black() -> Self {
        Material::diffuse([0.0; 3])
    }
}

/// Largest shininess a degree-`degree` expansion represents accurately.
pub fn max_shininess(degree: usize) -> f64 {
    num_coeffs(degree) as f64 / 5.0
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l-m)! / (l+m)!
    let mut r = 1.0;
    for k in (l - m + 1)..=(l + m) {
        r /= k as f64;
    }
    r
}

fn norm_const(l: usize, m: usize) -> f64 {
    let base = ((2 * l + 1) as f64 / (4.0 * PI) * factorial_ratio(l, m)).sqrt();
    if m == 0 {
        base
    } else {
        base * std::f64::consts::SQRT_2
    }
}

/// Evaluates the polynomial extension of the basis at `v` and optionally its
/// ambient (Cartesian) gradient. `v` is assumed unit length.
fn basis_poly(v: &Vec3, degree: usize, out: &mut [f64], mut grad: Option<&mut [[f64; 3]]>) {
    let (x, y, z) = (v.x, v.y, v.z);
    let mut cm = vec![0.0; degree + 1];
    let mut sm = vec![0.0; degree + 1];
    cm[0] = 1.0;
    for m in 1..=degree {
        cm[m] = x * cm[m - 1] - y * sm[m - 1];
        sm[m] = x * sm[m - 1] + y * cm[m - 1];
    }

    let mut q_mm = 1.0;
    for m in 0..=degree {
        if m > 0 {
            // Condon–Shortley phase folded into the seed: (-1)^m (2m-1)!!
            q_mm *= -((2 * m - 1) as f64);
        }
        let (mut q1, mut q2) = (0.0, 0.0); // Q_{l-1}, Q_{l-2}
        let (mut d1, mut d2) = (0.0, 0.0);
        for l in m..=degree {
            let (q, dq) = if l == m {
                (q_mm, 0.0)
            } else if l == m + 1 {
                ((2 * m + 1) as f64 * z * q_mm, (2 * m + 1) as f64 * q_mm)
            } else {
                let a = (2 * l - 1) as f64;
                let b = (l + m - 1) as f64;
                let c = (l - m) as f64;
                ((a * z * q1 - b * q2) / c, (a * (q1 + z * d1) - b * d2) / c)
            };
            let n = norm_const(l, m);
            let base = l * l + l;
            if m == 0 {
                out[base] = n * q;
                if let Some(g) = grad.as_deref_mut() {
                    g[base] = [0.0, 0.0, n * dq];
                }
            } else {
                out[base + m] = n * q * cm[m];
                out[base - m] = n * q * sm[m];
                if let Some(g) = grad.as_deref_mut() {
                    let mf = m as f64;
                    g[base + m] = [n * q * mf * cm[m - 1], -n * q * mf * sm[m - 1], n * dq * cm[m]];
                    g[base - m] = [n * q * mf * sm[m - 1], n * q * mf * cm[m - 1], n * dq * sm[m]];
                }
            }
            q2 = q1;
            q1 = q;
            d2 = d1;
            d1 = dq;
        }
    }
}

/// Writes `Y(v)` into `out` (length `(degree+1)^2`); `v` must be unit length.
#[inline]
pub fn eval_sh_into(v: &Vec3, degree: usize, out: &mut [f64]) {
    basis_poly(v, degree, out, None);
}

/// Basis vector `Y(dir)`. The reflected basis `Ȳ(dir)` is `eval_sh(-dir)`.
pub fn eval_sh(dir: &Direction, degree: usize) -> ShVector {
    let mut out = ShVector::zeros(degree);
    eval_sh_into(dir.vec(), degree, &mut out.coeffs);
    out
}

/// Basis and tangent-plane Jacobian at a unit vector.
pub(crate) fn eval_sh_with_jacobian(v: &Vec3, degree: usize, out: &mut [f64], jac: &mut [[f64; 3]]) {
    basis_poly(v, degree, out, Some(jac));
    for row in jac.iter_mut() {
        let r = Vec3::new(row[0], row[1], row[2]);
        let t = r - v * v.dot(&r);
        *row = [t.x, t.y, t.z];
    }
}

/// Rows are the gradients of each basis function with respect to the
/// direction, projected onto the tangent plane of the sphere at `dir`.
pub fn sh_jacobian(dir: &Direction, degree: usize) -> Vec<[f64; 3]> {
    let k = num_coeffs(degree);
    let mut vals = vec![0.0; k];
    let mut jac = vec![[0.0; 3]; k];
    eval_sh_with_jacobian(dir.vec(), degree, &mut vals, &mut jac);
    jac
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Product quadrature on the sphere: Gauss–Legendre in `cos θ`, uniform in `φ`.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    pub n_theta: usize,
    pub n_phi: usize,
    points: Vec<(Vec3, f64)>,
}

impl SphereQuadrature {
    pub const DEFAULT_THETA: usize = 64;
    pub const DEFAULT_PHI: usize = 128;

    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let (z, w) = gauss_legendre(n_theta);
        let dphi = 2.0 * PI / n_phi as f64;
        let mut points = Vec::with_capacity(n_theta * n_phi);
        for (zi, wi) in z.iter().zip(&w) {
            let r = (1.0 - zi * zi).max(0.0).sqrt();
            for k in 0..n_phi {
                let phi = (k as f64 + 0.5) * dphi;
                points.push((Vec3::new(r * phi.cos(), r * phi.sin(), *zi), wi * dphi));
            }
        }
        SphereQuadrature {
            n_theta,
            n_phi,
            points,
        }
    }

    /// Node set used when nothing else is requested.
    pub fn standard() -> Self {
        Self::new(Self::DEFAULT_THETA, Self::DEFAULT_PHI)
    }

    pub fn points(&self) -> &[(Vec3, f64)] {
        &self.points
    }

    /// `∫ h dω`.
    pub fn integrate(&self, h: impl Fn(&Vec3) -> f64) -> f64 {
        self.points.iter().map(|(p, w)| w * h(p)).sum()
    }
}

/// Projects `h` onto the basis: `c_lm = ∫ h Y_lm dω`.
///
/// The quadrature must have more than `degree` polar nodes and more than
/// `2 * degree` azimuthal nodes.
pub fn project_function(
    h: impl Fn(&Vec3) -> f64,
    degree: usize,
    quad: &SphereQuadrature,
) -> Result<ShVector> {
    if quad.n_theta <= degree || quad.n_phi <= 2 * degree {
        return Err(Error::InvalidArgument(format!(
            "quadrature {}x{} is below the floor ({}x{}) for degree {degree}",
            quad.n_theta,
            quad.n_phi,
            degree + 1,
            2 * degree + 1
        )));
    }
    let k = num_coeffs(degree);
    let mut out = vec![0.0; k];
    let mut basis = vec![0.0; k];
    for (p, w) in quad.points() {
        let hv = h(p);
        if hv == 0.0 {
            continue;
        }
        eval_sh_into(p, degree, &mut basis);
        for (o, b) in out.iter_mut().zip(&basis) {
            *o += w * hv * b;
        }
    }
    ShVector::from_coeffs(degree, out)
}

/// `c_l0` of the normalized specular lobe `(s+1)/(2π) max(cos, 0)^s`,
/// together with its derivative in `s`.
pub fn phong_lobe_ratio(l: usize, s: f64) -> (f64, f64) {
    if l == 0 {
        return (1.0, 0.0);
    }
    let (num, den): (Vec<f64>, Vec<f64>) = if l % 2 == 1 {
        let count = l.div_ceil(2);
        (
            (0..count).map(|i| s + 1.0 - 2.0 * i as f64).collect(),
            (0..count).map(|i| s + 2.0 + 2.0 * i as f64).collect(),
        )
    } else {
        let count = l / 2;
        (
            (0..count).map(|i| s - 2.0 * i as f64).collect(),
            (0..count).map(|i| s + 3.0 + 2.0 * i as f64).collect(),
        )
    };
    let num_prod: f64 = num.iter().product();
    let den_prod: f64 = den.iter().product();
    let value = num_prod / den_prod;
    // product rule keeps this finite when a numerator factor vanishes
    let mut d_num = 0.0;
    for i in 0..num.len() {
        d_num += num
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, f)| f)
            .product::<f64>();
    }
    let d_den_log: f64 = den.iter().map(|f| 1.0 / f).sum();
    let deriv = d_num / den_prod - value * d_den_log;
    (value, deriv)
}

fn effective_shininess(mat: &Material, degree: usize) -> (f64, bool) {
    let cap = max_shininess(degree);
    if mat.shininess > cap {
        log::warn!(
            "shininess {} exceeds the degree-{degree} limit {cap}; clamping",
            mat.shininess
        );
        (cap, true)
    } else {
        (mat.shininess, false)
    }
}

/// Closed-form coefficient vector `f^c` of the diffuse + Phong BRDF.
pub fn phong_brdf_coeffs(mat: &Material, degree: usize) -> ColorSh {
    let (s, _) = effective_shininess(mat, degree);
    let k = mat.blend;
    let mut out = ColorSh::zeros(degree);
    let per = num_coeffs(degree);
    let ratios: Vec<f64> = (0..=degree).map(|l| phong_lobe_ratio(l, s).0).collect();
    for c in 0..3 {
        let ch = &mut out.data[c * per..(c + 1) * per];
        ch[0] = 4.0 * k * mat.kd[c] + (1.0 - k) * mat.ks[c];
        for l in 1..=degree {
            let base = (1.0 - k) * ratios[l] * mat.ks[c];
            for m in -(l as i64)..=(l as i64) {
                let sign = if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                ch[sh_index(l, m)] = sign * base;
            }
        }
    }
    out
}

/// Gradient of a scalar with respect to the material parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaterialGrad {
    pub kd: [f64; 3],
    pub ks: [f64; 3],
    pub shininess: f64,
    pub blend: f64,
}

/// Chains `∂L/∂f^c` back to the material parameters.
pub fn phong_brdf_param_grad(mat: &Material, degree: usize, d_coeffs: &ColorSh) -> MaterialGrad {
    let (s, clamped) = effective_shininess(mat, degree);
    let k = mat.blend;
    let mut g = MaterialGrad::default();
    let lobes: Vec<(f64, f64)> = (0..=degree).map(|l| phong_lobe_ratio(l, s)).collect();
    for c in 0..3 {
        let d = d_coeffs.channel(c);
        g.kd[c] += 4.0 * k * d[0];
        g.ks[c] += (1.0 - k) * d[0];
        g.blend += d[0] * (4.0 * mat.kd[c] - mat.ks[c]);
        for l in 1..=degree {
            let (ratio, dratio) = lobes[l];
            let mut signed = 0.0;
            for m in -(l as i64)..=(l as i64) {
                let sign = if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                signed += sign * d[sh_index(l, m)];
            }
            g.ks[c] += signed * (1.0 - k) * ratio;
            g.blend -= signed * ratio * mat.ks[c];
            if !clamped {
                g.shininess += signed * (1.0 - k) * mat.ks[c] * dratio;
            }
        }
    }
    g
}

/// Evaluates `f(ω_I, ω_O) = Σ c_lm Ȳ_lm(ω_I) Y_lm(ω_O)` per channel.
pub fn brdf_eval(
    f_c: &ColorSh,
    degree: usize,
    w_in: &Direction,
    w_out: &Direction,
) -> Result<[f64; 3]> {
    if f_c.degree() != degree {
        return Err(Error::InvalidArgument(format!(
            "BRDF has degree {} but degree {degree} was requested",
            f_c.degree()
        )));
    }
    let k = num_coeffs(degree);
    let mut y_in = vec![0.0; k];
    let mut y_out = vec![0.0; k];
    eval_sh_into(&-w_in.vec(), degree, &mut y_in);
    eval_sh_into(w_out.vec(), degree, &mut y_out);
    let prod: Vec<f64> = y_in.iter().zip(&y_out).map(|(a, b)| a * b).collect();
    Ok(f_c.eval_with_basis(&prod))
}
