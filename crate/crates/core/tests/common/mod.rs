#![allow(dead_code)]

use surfel_gi::fixtures::light_task;
use surfel_gi::optim::Target;
use surfel_gi::render::{render_image, Camera, RenderPass};
use surfel_gi::scene::{Surfel, OPACITY_POWER, OPACITY_SCALE};
use surfel_gi::sh::{gauss_legendre, project_function, sh_index, SphereQuadrature};
use surfel_gi::solvers::solve_dense;
use surfel_gi::{Scene, Vec3};

pub struct LightTask {
    pub truth: Scene,
    pub start: Scene,
    pub targets: Vec<Target>,
    pub radius: f64,
}

pub fn task_cameras(size: usize) -> Vec<Camera> {
    [Vec3::new(1.5, -1.8, 1.2), Vec3::new(-0.3, -2.0, 0.4)]
        .iter()
        .map(|p| Camera::look_at(*p, Vec3::new(-0.3, 0.3, -0.5), Vec3::z(), 1.0, size, size).unwrap())
        .collect()
}

pub fn render_targets(scene: &Scene, cameras: &[Camera]) -> Vec<Target> {
    let state = solve_dense(scene).unwrap();
    cameras
        .iter()
        .map(|c| Target {
            camera: c.clone(),
            image: render_image(scene, &state, c, RenderPass::Full).unwrap(),
        })
        .collect()
}

/// Ground truth, targets from two views, and a start with the light moved
/// by a fifth of the scene radius.
pub fn light_task_setup() -> LightTask {
    let truth = light_task(2);
    let targets = render_targets(&truth, &task_cameras(24));
    let radius = truth.bounding_radius();
    let mut start = truth.clone();
    start.lights[0].position += Vec3::new(1.0, -1.0, 1.0).normalize() * 0.2 * radius;
    LightTask {
        truth,
        start,
        targets,
        radius,
    }
}

/// Tensor-product Simpson rule over the tangent plane in world units.
pub fn opacity_area_quadrature(s: &Surfel) -> f64 {
    let (half, n) = (9.0, 1200);
    let h = 2.0 * half / n as f64;
    let w = |k: usize| match k {
        0 => 1.0,
        k if k == n => 1.0,
        k if k % 2 == 1 => 4.0,
        _ => 2.0,
    };
    let mut total = 0.0;
    for i in 0..=n {
        let u = -half + i as f64 * h;
        for j in 0..=n {
            let v = -half + j as f64 * h;
            let r2 = u * u + v * v;
            let a = 1.0 - (-OPACITY_SCALE * (s.g * (-0.5 * r2).exp()).powf(OPACITY_POWER)).exp();
            total += w(i) * w(j) * a;
        }
    }
    total * h * h / 9.0 * s.scale[0] * s.scale[1]
}

/// Composite Gauss–Legendre quadrature of `(1 - e^{-y}) / y` on `[0, c]`.
pub fn expint_quadrature(c: f64) -> f64 {
    let (x, w) = gauss_legendre(20);
    let panels = 400;
    let h = c / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            let y = a + 0.5 * h * (xi + 1.0);
            total += 0.5 * h * wi * (-(-y).exp_m1()) / y;
        }
    }
    total
}

pub fn expint_series(c: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 1..200 {
        term *= c / n as f64;
        let t = term / n as f64;
        sum += if n % 2 == 1 { t } else { -t };
        if t < 1e-18 {
            break;
        }
    }
    sum
}

pub fn lobe_moments(s: f64, degree: usize, quad: &SphereQuadrature) -> Vec<f64> {
    // zonal projections of the normalized clamped lobe, rescaled to Legendre moments
    let lobe = |p: &Vec3| (s + 1.0) / (2.0 * std::f64::consts::PI) * p.z.max(0.0).powf(s);
    let proj = project_function(lobe, degree, quad).unwrap();
    (0..=degree)
        .map(|l| proj.coeffs[sh_index(l, 0)] * (4.0 * std::f64::consts::PI / (2 * l + 1) as f64).sqrt())
        .collect()
}
