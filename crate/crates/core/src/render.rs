//! View-independent rendering of a solved state, image files and the
//! image-loss backward chain.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{ray_intersect, Scene};
use crate::sh::{eval_sh_into, max_shininess, num_coeffs, ColorSh, Direction, Vec3};
use crate::solvers::{count_solve, direct_pass, SolveState, SolverKind};
use crate::transport::TransportSystem;

/// Pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

fn parse_triplet(s: &str) -> Result<Vec3> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("bad vector `{s}`: {e}")))?;
    if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("expected three finite numbers, got `{s}`")));
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}

impl Camera {
    pub fn look_at(position: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("field of view {fov_y} outside (0, π)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be at least 1x1".into()));
        }
        let forward = target - position;
        if !(forward.norm() > 0.0) {
            return Err(Error::InvalidArgument("camera looks at its own position".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if !(right.norm() > 1e-12) {
            return Err(Error::InvalidArgument("up vector is parallel to the view direction".into()));
        }
        let right = right.normalize();
        Ok(Camera {
            position,
            forward,
            right,
            up: right.cross(&forward),
            fov_y,
            width,
            height,
        })
    }

    /// Parses `"px,py,pz/lx,ly,lz/ux,uy,uz/fov"` and `"WxH"`.
    pub fn parse(spec: &str, size: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split('/').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "camera must be `position/look_at/up/fov`, got `{spec}`"
            )));
        }
        let fov: f64 = parts[3]
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("bad field of view `{}`: {e}", parts[3])))?;
        let (w, h) = parse_size(size)?;
        Camera::look_at(
            parse_triplet(parts[0])?,
            parse_triplet(parts[1])?,
            parse_triplet(parts[2])?,
            fov,
            w,
            h,
        )
    }

    /// Primary ray direction through the center of pixel `(x, y)`; row 0 is the top.
    pub fn ray(&self, x: usize, y: usize) -> Direction {
        let half = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = ((x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * half * aspect;
        let sy = (1.0 - (y as f64 + 0.5) / self.height as f64 * 2.0) * half;
        Direction::from_unit((self.forward + self.right * sx + self.up * sy).normalize())
    }
}

pub fn parse_size(size: &str) -> Result<(usize, usize)> {
    let (w, h) = size
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidArgument(format!("size must be WxH, got `{size}`")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("bad image size `{size}`")))
    };
    Ok((parse(w)?, parse(h)?))
}

/// Linear RGB image, row-major from the top row, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = 3 * (y * self.width + x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "images are {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    surfel: usize,
    t: f64,
    alpha: f64,
}

fn sorted_hits(scene: &Scene, origin: &Vec3, dir: &Direction) -> Vec<Hit> {
    let mut hits: Vec<Hit> = (0..scene.surfels.len())
        .filter_map(|k| {
            ray_intersect(scene, k, origin, dir).map(|h| Hit {
                surfel: k,
                t: h.t,
                alpha: h.alpha,
            })
        })
        .collect();
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.surfel.cmp(&b.surfel)));
    hits
}

/// Front-to-back compositing of `Y(-dir)ᵀB^c` along one ray.
pub fn trace_pixel(scene: &Scene, state: &SolveState, origin: &Vec3, dir: &Direction) -> [f64; 3] {
    let mut basis = vec![0.0; num_coeffs(scene.sh_degree)];
    eval_sh_into(&-dir.vec(), scene.sh_degree, &mut basis);
    composite(scene, origin, dir, |k| {
        state.radiosity[k].eval_with_basis(&basis).map(|v| v.max(0.0))
    })
    .0
}

fn composite(
    scene: &Scene,
    origin: &Vec3,
    dir: &Direction,
    mut value: impl FnMut(usize) -> [f64; 3],
) -> ([f64; 3], Vec<(usize, f64)>) {
    let mut out = [0.0; 3];
    let mut trans = 1.0;
    let mut weights = Vec::new();
    for h in sorted_hits(scene, origin, dir) {
        let w = h.alpha * trans;
        let v = value(h.surfel);
        for c in 0..3 {
            out[c] += w * v[c];
        }
        weights.push((h.surfel, w));
        trans *= 1.0 - h.alpha;
    }
    (out, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderPass {
    Full,
    Direct,
    Indirect,
    Albedo,
    Shininess,
}

impl FromStr for RenderPass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RenderPass::Full),
            "direct" => Ok(RenderPass::Direct),
            "indirect" => Ok(RenderPass::Indirect),
            "albedo" => Ok(RenderPass::Albedo),
            "shininess" => Ok(RenderPass::Shininess),
            other => Err(Error::InvalidArgument(format!("unknown render pass `{other}`"))),
        }
    }
}

impl fmt::Display for RenderPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenderPass::Full => "full",
            RenderPass::Direct => "direct",
            RenderPass::Indirect => "indirect",
            RenderPass::Albedo => "albedo",
            RenderPass::Shininess => "shininess",
        })
    }
}

/// Per-ray compositing record used by the loss backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTrace {
    pub dir: Direction,
    /// `(surfel, compositing weight, channels above the clamp)`.
    pub hits: Vec<(usize, f64, [bool; 3])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTrace {
    pub degree: usize,
    pub kernel_count: usize,
    pub pixels: Vec<PixelTrace>,
}

fn render_rows<T: Send>(camera: &Camera, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    (0..camera.height)
        .into_par_iter()
        .flat_map_iter(|y| (0..camera.width).map(move |x| (x, y)).collect::<Vec<_>>())
        .map(|(x, y)| f(x, y))
        .collect()
}

fn to_image(camera: &Camera, pixels: Vec<[f64; 3]>) -> ImageBuffer {
    ImageBuffer {
        width: camera.width,
        height: camera.height,
        // values are stored at single precision so PFM files reproduce them
        data: pixels.into_iter().flatten().map(|v| v as f32 as f64).collect(),
    }
}

fn check_state(scene: &Scene, state: &SolveState) -> Result<()> {
    if state.kernel_count() != scene.kernel_count() || state.degree != scene.sh_degree {
        return Err(Error::ShapeMismatch("state does not match the scene".into()));
    }
    Ok(())
}

/// Full-pass render together with the per-pixel compositing trace.
pub fn render_traced(scene: &Scene, state: &SolveState, camera: &Camera) -> Result<(ImageBuffer, RenderTrace)> {
    check_state(scene, state)?;
    let degree = scene.sh_degree;
    let per_pixel = render_rows(camera, |x, y| {
        let dir = camera.ray(x, y);
        let mut basis = vec![0.0; num_coeffs(degree)];
        eval_sh_into(&-dir.vec(), degree, &mut basis);
        let mut active = Vec::new();
        let (rgb, weights) = composite(scene, &camera.position, &dir, |k| {
            let raw = state.radiosity[k].eval_with_basis(&basis);
            active.push(raw.map(|v| v > 0.0));
            raw.map(|v| v.max(0.0))
        });
        let hits = weights
            .into_iter()
            .zip(active)
            .map(|((k, w), a)| (k, w, a))
            .collect();
        (rgb, PixelTrace { dir, hits })
    });
    let (rgb, pixels): (Vec<_>, Vec<_>) = per_pixel.into_iter().unzip();
    Ok((
        to_image(camera, rgb),
        RenderTrace {
            degree,
            kernel_count: scene.kernel_count(),
            pixels,
        },
    ))
}

fn render_radiance(scene: &Scene, state: &SolveState, camera: &Camera) -> ImageBuffer {
    let px = render_rows(camera, |x, y| trace_pixel(scene, state, &camera.position, &camera.ray(x, y)));
    to_image(camera, px)
}

fn render_attribute(scene: &Scene, camera: &Camera, value: impl Fn(usize) -> [f64; 3] + Sync) -> ImageBuffer {
    let px = render_rows(camera, |x, y| composite(scene, &camera.position, &camera.ray(x, y), &value).0);
    to_image(camera, px)
}

/// Radiosity after one shooting pass from every emitter.
pub fn direct_state(scene: &Scene) -> Result<SolveState> {
    count_solve();
    let sys = TransportSystem::build(scene)?;
    let shot = direct_pass(&sys);
    let mut state = SolveState::empty(&sys, SolverKind::Progressive);
    state.radiosity = shot.accumulated;
    state.unshot = shot.unshot;
    state.steps = 1;
    state.finish(&sys, false);
    Ok(state)
}

/// Renders one pass. Only the direct and indirect passes solve transport.
pub fn render_image(scene: &Scene, state: &SolveState, camera: &Camera, pass: RenderPass) -> Result<ImageBuffer> {
    check_state(scene, state)?;
    Ok(match pass {
        RenderPass::Full => render_radiance(scene, state, camera),
        RenderPass::Direct => render_radiance(scene, &direct_state(scene)?, camera),
        RenderPass::Indirect => {
            let full = render_radiance(scene, state, camera);
            let direct = render_radiance(scene, &direct_state(scene)?, camera);
            ImageBuffer {
                width: full.width,
                height: full.height,
                data: full.data.iter().zip(&direct.data).map(|(f, d)| f - d).collect(),
            }
        }
        RenderPass::Albedo => render_attribute(scene, camera, |k| scene.surfels[k].material.kd),
        RenderPass::Shininess => {
            let cap = max_shininess(scene.sh_degree);
            render_attribute(scene, camera, |k| {
                [(scene.surfels[k].material.shininess / cap).min(1.0); 3]
            })
        }
    })
}

/// Unbiased per-pixel, per-channel sample variance across renders.
pub fn pixel_variance(images: &[ImageBuffer]) -> Result<ImageBuffer> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("no images".into()));
    };
    if images.len() < 2 {
        return Err(Error::InvalidArgument("variance needs at least two images".into()));
    }
    for img in images {
        first.same_shape(img)?;
    }
    let n = images.len() as f64;
    let data = (0..first.data.len())
        .map(|k| {
            let mean = images.iter().map(|im| im.data[k]).sum::<f64>() / n;
            images.iter().map(|im| (im.data[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect();
    Ok(ImageBuffer {
        width: first.width,
        height: first.height,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

/// Mean over pixels of the summed per-channel L1 or squared error, and its
/// gradient with respect to each rendered value.
pub fn image_loss(rendered: &ImageBuffer, target: &ImageBuffer, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    rendered.same_shape(target)?;
    let scale = 1.0 / rendered.pixel_count() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| {
            let d = r - t;
            match kind {
                LossKind::L1 => {
                    loss += d.abs();
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                }
                LossKind::L2 => {
                    loss += d * d;
                    2.0 * d * scale
                }
            }
        })
        .collect();
    Ok((loss * scale, grad))
}

/// Loss value and its gradient with respect to every kernel's radiosity.
pub fn image_loss_backward(
    trace: &RenderTrace,
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    kind: LossKind,
) -> Result<(f64, Vec<ColorSh>)> {
    if trace.pixels.len() != rendered.pixel_count() {
        return Err(Error::ShapeMismatch("trace does not belong to this image".into()));
    }
    let (loss, grad) = image_loss(rendered, target, kind)?;
    const ROWS_PER_CHUNK: usize = 4096;
    let partials: Vec<Vec<ColorSh>> = trace
        .pixels
        .par_chunks(ROWS_PER_CHUNK)
        .enumerate()
        .map(|(chunk, pixels)| {
            let mut acc = vec![ColorSh::zeros(trace.degree); trace.kernel_count];
            let mut basis = vec![0.0; num_coeffs(trace.degree)];
            for (off, px) in pixels.iter().enumerate() {
                let p = chunk * ROWS_PER_CHUNK + off;
                let g = [grad[3 * p], grad[3 * p + 1], grad[3 * p + 2]];
                if g == [0.0; 3] || px.hits.is_empty() {
                    continue;
                }
                eval_sh_into(&-px.dir.vec(), trace.degree, &mut basis);
                for &(k, w, active) in &px.hits {
                    for c in 0..3 {
                        if !active[c] || g[c] == 0.0 {
                            continue;
                        }
                        let s = w * g[c];
                        for (o, b) in acc[k].channel_mut(c).iter_mut().zip(&basis) {
                            *o += s * b;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![ColorSh::zeros(trace.degree); trace.kernel_count];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add_assign(p);
        }
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pfm,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pfm") => Ok(ImageFormat::Pfm),
            Some("ppm") => Ok(ImageFormat::Ppm),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer image format of {}",
                path.display()
            ))),
        }
    }
}

/// Display-referred byte for a linear value.
pub fn tonemap_byte(linear: f64) -> u8 {
    (255.0 * linear.clamp(0.0, 1.0).powf(1.0 / 2.2)).round() as u8
}

pub fn encode_pfm(buf: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", buf.width, buf.height).into_bytes();
    for y in (0..buf.height).rev() {
        for v in &buf.data[3 * y * buf.width..3 * (y + 1) * buf.width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_ppm(buf: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", buf.width, buf.height).into_bytes();
    out.extend(buf.data.iter().map(|v| tonemap_byte(*v)));
    out
}

pub fn write_image(buf: &ImageBuffer, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ImageFormat::Pfm => encode_pfm(buf),
        ImageFormat::Ppm => encode_ppm(buf),
    };
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

pub fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<ImageBuffer> {
    let bad = |m: &str| Error::Image {
        path: origin.to_path_buf(),
        message: m.to_string(),
    };
    let mut pos = 0;
    if take_token(bytes, &mut pos) != Some("PF") {
        return Err(bad("missing `PF` magic (only RGB PFM is supported)"));
    }
    let mut number = |what: &str| -> Result<String> {
        take_token(bytes, &mut pos)
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing {what}")))
    };
    let w: usize = number("width")?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = number("height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = number("scale")?.parse().map_err(|_| bad("bad scale"))?;
    pos += 1; // single whitespace byte after the header
    let need = w * h * 12;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let mut buf = ImageBuffer::new(w, h);
    for (row_in_file, chunk) in body.chunks_exact(w * 12).enumerate() {
        let y = h - 1 - row_in_file;
        for (i, px) in chunk.chunks_exact(4).enumerate() {
            let raw = [px[0], px[1], px[2], px[3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            buf.data[3 * y * w + i] = v as f64;
        }
    }
    if buf.data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite pixel values"));
    }
    Ok(buf)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}
