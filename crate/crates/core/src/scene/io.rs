//! JSON scene files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Light, LightKind, Scene, Surfel, Tolerances};
use crate::error::{Error, Result};
use crate::sh::{num_coeffs, ColorSh, Material, Vec3, MAX_DEGREE};

const FRAME_TOL: f64 = 1e-6;

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    sh_degree: usize,
    #[serde(default)]
    surfels: Vec<SurfelFile>,
    #[serde(default)]
    lights: Vec<LightFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfelFile {
    center: [f64; 3],
    tangent_u: [f64; 3],
    tangent_v: [f64; 3],
    scale: [f64; 2],
    g: f64,
    #[serde(default = "one")]
    lambda: f64,
    material: MaterialFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emission_sh: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialFile {
    kd: [f64; 3],
    ks: [f64; 3],
    shininess: f64,
    blend: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightFile {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction: Option<[f64; 3]>,
    intensity: [f64; 3],
}

struct Checker<'a> {
    origin: &'a str,
}

impl Checker<'_> {
    fn fail(&self, path: String, msg: impl Into<String>) -> Error {
        Error::scene(format!("{}: {path}", self.origin), msg)
    }

    fn finite(&self, path: &str, vals: &[f64]) -> Result<()> {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(self.fail(path.to_string(), "values must be finite"))
        }
    }

    fn unit_range(&self, path: &str, vals: &[f64]) -> Result<()> {
        self.finite(path, vals)?;
        if vals.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(self.fail(path.to_string(), "values must lie in [0, 1]"))
        }
    }
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn convert_surfel(ck: &Checker, idx: usize, f: SurfelFile, degree: usize) -> Result<Surfel> {
    let at = |field: &str| format!("surfels[{idx}].{field}");
    ck.finite(&at("center"), &f.center)?;
    ck.finite(&at("tangent_u"), &f.tangent_u)?;
    ck.finite(&at("tangent_v"), &f.tangent_v)?;
    ck.finite(&at("scale"), &f.scale)?;
    let (tu, tv) = (vec3(f.tangent_u), vec3(f.tangent_v));
    if (tu.norm() - 1.0).abs() > FRAME_TOL {
        return Err(ck.fail(at("tangent_u"), "must be unit length"));
    }
    if (tv.norm() - 1.0).abs() > FRAME_TOL {
        return Err(ck.fail(at("tangent_v"), "must be unit length"));
    }
    if tu.dot(&tv).abs() > FRAME_TOL {
        return Err(ck.fail(at("tangent_v"), "tangent frame is not orthogonal"));
    }
    for (k, s) in f.scale.iter().enumerate() {
        if *s <= 0.0 {
            return Err(ck.fail(at(&format!("scale[{k}]")), format!("scale must be positive, got {s}")));
        }
    }
    if !(f.g.is_finite() && f.g >= 0.0) {
        return Err(ck.fail(at("g"), "geometry value must be finite and non-negative"));
    }
    if !(f.lambda.is_finite() && f.lambda > 0.0) {
        return Err(ck.fail(at("lambda"), "compensation factor must be positive"));
    }
    let m = &f.material;
    ck.unit_range(&at("material.kd"), &m.kd)?;
    ck.unit_range(&at("material.ks"), &m.ks)?;
    ck.unit_range(&at("material.blend"), &[m.blend])?;
    if !(m.shininess.is_finite() && m.shininess > 0.0) {
        return Err(ck.fail(at("material.shininess"), "shininess must be positive"));
    }
    let emission = match f.emission_sh {
        None => None,
        Some(v) => {
            ck.finite(&at("emission_sh"), &v)?;
            let want = 3 * num_coeffs(degree);
            if v.len() != want {
                return Err(ck.fail(
                    at("emission_sh"),
                    format!("expected {want} coefficients, got {}", v.len()),
                ));
            }
            Some(ColorSh::from_flat(degree, v)?)
        }
    };
    Ok(Surfel {
        center: vec3(f.center),
        tangent_u: tu,
        tangent_v: tv,
        scale: f.scale,
        g: f.g,
        lambda: f.lambda,
        material: Material {
            kd: m.kd,
            ks: m.ks,
            shininess: m.shininess,
            blend: m.blend,
        },
        emission,
    })
}

fn convert_light(ck: &Checker, idx: usize, f: LightFile) -> Result<Light> {
    let at = |field: &str| format!("lights[{idx}].{field}");
    ck.finite(&at("intensity"), &f.intensity)?;
    if f.intensity.iter().any(|v| *v < 0.0) {
        return Err(ck.fail(at("intensity"), "intensity must be non-negative"));
    }
    let (kind, pos) = match (f.kind.as_str(), f.position, f.direction) {
        ("point", Some(p), None) => {
            ck.finite(&at("position"), &p)?;
            (LightKind::Point, vec3(p))
        }
        ("directional", None, Some(d)) => {
            ck.finite(&at("direction"), &d)?;
            let v = vec3(d);
            if (v.norm() - 1.0).abs() > FRAME_TOL {
                return Err(ck.fail(at("direction"), "must be unit length"));
            }
            (LightKind::Directional, v)
        }
        ("point", _, _) => return Err(ck.fail(at("position"), "point lights need exactly a position")),
        ("directional", _, _) => {
            return Err(ck.fail(at("direction"), "directional lights need exactly a direction"))
        }
        (other, _, _) => {
            return Err(ck.fail(at("kind"), format!("unknown light kind `{other}`")));
        }
    };
    Ok(Light {
        kind,
        position: pos,
        intensity: f.intensity,
    })
}

fn parse_with_origin(text: &str, origin: &str) -> Result<Scene> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: SceneFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::scene(format!("{origin}: {path}"), e.into_inner().to_string())
    })?;
    let ck = Checker { origin };
    if file.sh_degree > MAX_DEGREE {
        return Err(ck.fail(
            "sh_degree".into(),
            format!("degree {} exceeds the supported maximum {MAX_DEGREE}", file.sh_degree),
        ));
    }
    let degree = file.sh_degree;
    let surfels = file
        .surfels
        .into_iter()
        .enumerate()
        .map(|(i, s)| convert_surfel(&ck, i, s, degree))
        .collect::<Result<Vec<_>>>()?;
    let lights = file
        .lights
        .into_iter()
        .enumerate()
        .map(|(i, l)| convert_light(&ck, i, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        sh_degree: degree,
        surfels,
        lights,
        tolerances: Tolerances::default(),
    })
}

/// Parses a scene document. Errors name the offending field path.
pub fn parse_scene(text: &str) -> Result<Scene> {
    parse_with_origin(text, "scene")
}

/// Canonical pretty-printed JSON for `scene`.
pub fn serialize_scene(scene: &Scene) -> String {
    let file = SceneFile {
        sh_degree: scene.sh_degree,
        surfels: scene
            .surfels
            .iter()
            .map(|s| SurfelFile {
                center: arr3(&s.center),
                tangent_u: arr3(&s.tangent_u),
                tangent_v: arr3(&s.tangent_v),
                scale: s.scale,
                g: s.g,
                lambda: s.lambda,
                material: MaterialFile {
                    kd: s.material.kd,
                    ks: s.material.ks,
                    shininess: s.material.shininess,
                    blend: s.material.blend,
                },
                emission_sh: s.emission.as_ref().map(|e| e.as_slice().to_vec()),
            })
            .collect(),
        lights: scene
            .lights
            .iter()
            .map(|l| {
                let p = Some(arr3(&l.position));
                let (kind, position, direction) = match l.kind {
                    LightKind::Point => ("point", p, None),
                    LightKind::Directional => ("directional", None, p),
                };
                LightFile {
                    kind: kind.into(),
                    position,
                    direction,
                    intensity: l.intensity,
                }
            })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("scene values are finite");
    out.push('\n');
    out
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_with_origin(&text, &path.display().to_string())
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_scene(scene)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "sh_degree": 2,
      "surfels": [{
        "center": [0, 0, 0], "tangent_u": [1, 0, 0], "tangent_v": [0, 1, 0],
        "scale": [0.5, 0.25], "g": 3.0,
        "material": {"kd": [0.5, 0.5, 0.5], "ks": [0, 0, 0], "shininess": 1, "blend": 1}
      }],
      "lights": [{"kind": "point", "position": [0, 0, 2], "intensity": [1, 1, 1]}]
    }"#;

    #[test]
    fn minimal_scene_round_trips() {
        let s = parse_scene(MINIMAL).unwrap();
        assert_eq!(s.surfels[0].lambda, 1.0);
        let text = serialize_scene(&s);
        let again = parse_scene(&text).unwrap();
        assert_eq!(again, s);
        assert_eq!(serialize_scene(&again), text);
    }

    #[test]
    fn negative_scale_names_field() {
        let bad = MINIMAL.replace("[0.5, 0.25]", "[-1, 0.25]");
        let err = parse_scene(&bad).unwrap_err().to_string();
        assert!(err.contains("surfels[0].scale[0]"), "{err}");
    }

    #[test]
    fn schema_errors_carry_paths() {
        let bad = MINIMAL.replace("\"g\": 3.0", "\"g\": \"x\"");
        let err = parse_scene(&bad).unwrap_err().to_string();
        assert!(err.contains("surfels[0].g"), "{err}");
        let skewed = MINIMAL.replace("\"tangent_v\": [0, 1, 0]", "\"tangent_v\": [0.1, 0.99498743710662, 0]");
        let err = parse_scene(&skewed).unwrap_err().to_string();
        assert!(err.contains("orthogonal"), "{err}");
    }

    #[test]
    fn rejects_non_finite_numbers() {
        let bad = MINIMAL.replace("\"g\": 3.0", "\"g\": NaN");
        assert!(parse_scene(&bad).is_err());
        let huge = MINIMAL.replace("\"g\": 3.0", "\"g\": 1e400");
        assert!(parse_scene(&huge).is_err());
    }
}
