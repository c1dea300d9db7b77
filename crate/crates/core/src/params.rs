//! Addressing of individual scalar scene parameters, shared by the
//! finite-difference harness and the optimizer.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};

use crate::adjoint::GradBuffer;
use crate::error::{Error, Result};
use crate::scene::{KernelKind, Scene};
use crate::sh::{num_coeffs, phong_brdf_param_grad, ColorSh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamFamily {
    /// Surfel emission coefficients and light intensities.
    Emission,
    /// Material parameters (kd, ks, shininess, blend).
    Brdf,
    Centers,
    Scales,
    Frames,
    G,
    Lambda,
    LightPositions,
}

impl ParamFamily {
    pub const ALL: [ParamFamily; 8] = [
        ParamFamily::Emission,
        ParamFamily::Brdf,
        ParamFamily::Centers,
        ParamFamily::Scales,
        ParamFamily::Frames,
        ParamFamily::G,
        ParamFamily::Lambda,
        ParamFamily::LightPositions,
    ];

    pub const GEOMETRY: [ParamFamily; 5] = [
        ParamFamily::Centers,
        ParamFamily::Scales,
        ParamFamily::Frames,
        ParamFamily::G,
        ParamFamily::Lambda,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamFamily::Emission => "emission",
            ParamFamily::Brdf => "brdf",
            ParamFamily::Centers => "centers",
            ParamFamily::Scales => "scales",
            ParamFamily::Frames => "frames",
            ParamFamily::G => "g",
            ParamFamily::Lambda => "lambda",
            ParamFamily::LightPositions => "light_pos",
        }
    }

    /// Whether the optimizer updates this family in log space.
    pub fn log_space(&self) -> bool {
        matches!(self, ParamFamily::Scales | ParamFamily::G | ParamFamily::Lambda)
    }
}

impl fmt::Display for ParamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamFamily::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .or(match s {
                "light_positions" | "lights" => Some(ParamFamily::LightPositions),
                "center" => Some(ParamFamily::Centers),
                "frame" => Some(ParamFamily::Frames),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter family `{s}`")))
    }
}

/// Parses a comma-separated family list; `geometry` expands to every
/// geometric family.
pub fn parse_families(list: &str) -> Result<Vec<ParamFamily>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "geometry" {
            out.extend(ParamFamily::GEOMETRY);
        } else if item == "all" {
            out.extend(ParamFamily::ALL);
        } else {
            out.push(item.parse()?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidArgument("no parameter family selected".into()));
    }
    Ok(out)
}

/// One scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub family: ParamFamily,
    pub kernel: usize,
    pub component: usize,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}].{}", self.family, self.kernel, self.component)
    }
}

const MATERIAL_COMPONENTS: usize = 8;

/// Every scalar parameter of the given families that exists in `scene`.
pub fn enumerate_params(scene: &Scene, families: &[ParamFamily]) -> Vec<ParamId> {
    let mut out = Vec::new();
    let n_surf = scene.surfels.len();
    let per_emission = 3 * num_coeffs(scene.sh_degree);
    for &family in families {
        let mut push = |kernel: usize, count: usize| {
            out.extend((0..count).map(|component| ParamId { family, kernel, component }));
        };
        match family {
            ParamFamily::Emission => {
                for (i, s) in scene.surfels.iter().enumerate() {
                    if s.emission.is_some() {
                        push(i, per_emission);
                    }
                }
                for i in n_surf..scene.kernel_count() {
                    push(i, 3);
                }
            }
            ParamFamily::Brdf => (0..n_surf).for_each(|i| push(i, MATERIAL_COMPONENTS)),
            ParamFamily::Centers | ParamFamily::Frames => (0..n_surf).for_each(|i| push(i, 3)),
            ParamFamily::Scales => (0..n_surf).for_each(|i| push(i, 2)),
            ParamFamily::G | ParamFamily::Lambda => (0..n_surf).for_each(|i| push(i, 1)),
            ParamFamily::LightPositions => {
                for i in n_surf..scene.kernel_count() {
                    if scene.kind(i) == KernelKind::PointLight {
                        push(i, 3);
                    }
                }
            }
        }
    }
    out
}

fn bad(id: &ParamId) -> Error {
    Error::InvalidArgument(format!("parameter {id} does not exist in the scene"))
}

/// Current value of a parameter. Frames report 0: they are addressed by
/// rotation increments.
pub fn param_value(scene: &Scene, id: &ParamId) -> Result<f64> {
    let c = id.component;
    Ok(match id.family {
        ParamFamily::Emission => match scene.surfel(id.kernel) {
            Some(s) => s.emission.as_ref().ok_or_else(|| bad(id))?.as_slice()[c],
            None => scene.light(id.kernel).ok_or_else(|| bad(id))?.intensity[c],
        },
        ParamFamily::Brdf => {
            let m = &scene.surfel(id.kernel).ok_or_else(|| bad(id))?.material;
            match c {
                0..=2 => m.kd[c],
                3..=5 => m.ks[c - 3],
                6 => m.shininess,
                7 => m.blend,
                _ => return Err(bad(id)),
            }
        }
        ParamFamily::Centers => scene.surfel(id.kernel).ok_or_else(|| bad(id))?.center[c],
        ParamFamily::Scales => scene.surfel(id.kernel).ok_or_else(|| bad(id))?.scale[c],
        ParamFamily::Frames => 0.0,
        ParamFamily::G => scene.surfel(id.kernel).ok_or_else(|| bad(id))?.g,
        ParamFamily::Lambda => scene.surfel(id.kernel).ok_or_else(|| bad(id))?.lambda,
        ParamFamily::LightPositions => scene.light(id.kernel).ok_or_else(|| bad(id))?.position[c],
    })
}

/// Rotates a surfel frame by the axis-angle vector `theta`, then
/// re-orthonormalizes it.
pub fn rotate_frame(tu: &mut Vec3, tv: &mut Vec3, theta: &Vec3) {
    let angle = theta.norm();
    if angle > 0.0 {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*theta), angle);
        *tu = r * *tu;
        *tv = r * *tv;
    }
    *tu = tu.normalize();
    *tv = (*tv - *tu * tu.dot(tv)).normalize();
}

/// Adds `delta` to a parameter. Frames rotate about the world axis `component`.
pub fn perturb(scene: &mut Scene, id: &ParamId, delta: f64) -> Result<()> {
    let c = id.component;
    let n_surf = scene.surfels.len();
    if id.kernel >= scene.kernel_count() {
        return Err(bad(id));
    }
    match id.family {
        ParamFamily::Emission if id.kernel >= n_surf => {
            scene.lights[id.kernel - n_surf].intensity[c] += delta;
        }
        ParamFamily::LightPositions => {
            scene.light_mut(id.kernel).ok_or_else(|| bad(id))?.position[c] += delta;
        }
        _ => {
            let degree = scene.sh_degree;
            let s = scene.surfels.get_mut(id.kernel).ok_or_else(|| bad(id))?;
            match id.family {
                ParamFamily::Emission => {
                    let e = s.emission.get_or_insert_with(|| ColorSh::zeros(degree));
                    e.as_mut_slice()[c] += delta;
                }
                ParamFamily::Brdf => match c {
                    0..=2 => s.material.kd[c] += delta,
                    3..=5 => s.material.ks[c - 3] += delta,
                    6 => s.material.shininess += delta,
                    7 => s.material.blend += delta,
                    _ => return Err(bad(id)),
                },
                ParamFamily::Centers => s.center[c] += delta,
                ParamFamily::Scales => s.scale[c] += delta,
                ParamFamily::Frames => {
                    let mut axis = Vec3::zeros();
                    axis[c] = delta;
                    rotate_frame(&mut s.tangent_u, &mut s.tangent_v, &axis);
                }
                ParamFamily::G => s.g += delta,
                ParamFamily::Lambda => s.lambda += delta,
                ParamFamily::LightPositions => unreachable!(),
            }
        }
    }
    Ok(())
}

/// `∂L/∂param` read out of a gradient buffer.
pub fn param_gradient(scene: &Scene, grads: &GradBuffer, id: &ParamId) -> Result<f64> {
    let (i, c) = (id.kernel, id.component);
    if i >= grads.kernel_count() {
        return Err(bad(id));
    }
    Ok(match id.family {
        ParamFamily::Emission => {
            if scene.is_light_kernel(i) {
                // c00 = 2√π I
                grads.d_emission[i].channel(c)[0] * 2.0 * std::f64::consts::PI.sqrt()
            } else {
                grads.d_emission[i].as_slice()[c]
            }
        }
        ParamFamily::Brdf => {
            let s = scene.surfel(i).ok_or_else(|| bad(id))?;
            let g = phong_brdf_param_grad(&s.material, scene.sh_degree, &grads.d_brdf[i]);
            match c {
                0..=2 => g.kd[c],
                3..=5 => g.ks[c - 3],
                6 => g.shininess,
                7 => g.blend,
                _ => return Err(bad(id)),
            }
        }
        ParamFamily::Centers | ParamFamily::LightPositions => grads.d_center[i][c],
        ParamFamily::Scales => grads.d_scales[i][c],
        ParamFamily::Frames => grads.d_frame[i][c],
        ParamFamily::G => grads.d_g[i],
        ParamFamily::Lambda => grads.d_lambda[i],
    })
}
