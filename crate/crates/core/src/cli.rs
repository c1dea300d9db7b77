//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adjoint::{finite_diff_check, LossSpec, DEFAULT_EPS_SCHEDULE};
use crate::error::{Error, Result};
use crate::optim::{run_optimization, write_trace_csv, OptimConfig, ParamSelection, Target};
use crate::params::{enumerate_params, parse_families, ParamFamily};
use crate::render::{
    parse_size, pixel_variance, read_pfm, render_image, write_image, Camera, ImageFormat, LossKind, RenderPass,
};
use crate::scene::{read_scene, write_scene};
use crate::solvers::{kernel_variance, read_state, repeated_solves, solve, write_state, SolverConfig, SolverKind};

#[derive(Debug, Parser)]
#[command(name = "surfel-gi", version, about = "Differentiable surfel light transport")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve transport and write the radiosity state.
    Solve(SolveArgs),
    /// Render a view from a solved state.
    Render(RenderArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit scene parameters to target images.
    Optimize(OptimizeArgs),
    /// Repeat a stochastic solver and report its variance.
    Variance(VarianceArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "dense")]
    solver: SolverKind,
    /// Monte-Carlo steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
struct CameraSpec(String);

impl FromStr for CameraSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Camera::parse(s, "1x1")?;
        Ok(CameraSpec(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Size(usize, usize);

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_size(s).map(|(w, h)| Size(w, h))
    }
}

impl CameraSpec {
    fn camera(&self, size: Size) -> Result<Camera> {
        Camera::parse(&self.0, &format!("{}x{}", size.0, size.1))
    }
}

#[derive(Debug, Clone)]
struct FamilyList(Vec<ParamFamily>);

impl FromStr for FamilyList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_families(s).map(FamilyList)
    }
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    state: PathBuf,
    /// `px,py,pz/lx,ly,lz/ux,uy,uz/fov` with the field of view in radians.
    #[arg(long, allow_hyphen_values = true)]
    camera: CameraSpec,
    #[arg(long)]
    size: Size,
    #[arg(long, default_value = "full")]
    pass: RenderPass,
    #[arg(long)]
    out: PathBuf,
    /// Also write a gamma-encoded PPM.
    #[arg(long)]
    tonemap: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Comma-separated families; `geometry` and `all` expand.
    #[arg(long)]
    params: FamilyList,
    /// Single relative step instead of the default schedule.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(long)]
    scene: PathBuf,
    /// JSON list of `{"camera": ..., "image": "view.pfm"}`.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    learn: FamilyList,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value = "dense")]
    solver: SolverKind,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "l1")]
    loss: LossKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn stochastic_solver(s: &str) -> Result<SolverKind> {
    match s.parse()? {
        k @ (SolverKind::MonteCarlo | SolverKind::Hybrid) => Ok(k),
        other => Err(Error::InvalidArgument(format!("`{other}` is deterministic; use mc or hybrid"))),
    }
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_parser = stochastic_solver)]
    solver: SolverKind,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = crate::solvers::TRAINING_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Camera for a per-pixel variance map.
    #[arg(long, allow_hyphen_values = true, requires_all = ["size", "map"])]
    camera: Option<CameraSpec>,
    #[arg(long)]
    size: Option<Size>,
    /// Output PFM for the per-pixel variance map.
    #[arg(long, requires = "camera")]
    map: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    camera: String,
    image: PathBuf,
}

#[derive(Debug, Serialize)]
struct VarianceReport {
    solver: SolverKind,
    runs: usize,
    steps: usize,
    seed: u64,
    kernel_variance: Vec<f64>,
    mean_kernel_variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_pixel_variance: Option<f64>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 1 on runtime failure, 2 on usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Error::InvalidArgument(format!("cannot start {n} workers: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn solver_config(kind: SolverKind, steps: Option<usize>, seed: u64) -> SolverConfig {
    let cfg = SolverConfig::new(kind).with_seed(seed);
    match steps {
        Some(t) => cfg.with_steps(t),
        None => cfg,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    info!("seed {}", cli.seed);
    match &cli.command {
        Command::Solve(a) => {
            let scene = read_scene(&a.scene)?;
            let state = solve(&scene, &solver_config(a.solver, a.steps, cli.seed))?;
            info!(
                "{} solve of {} kernels, residual {:.3e}",
                a.solver,
                scene.kernel_count(),
                state.residual
            );
            write_state(&state, &a.out)
        }
        Command::Render(a) => {
            let scene = read_scene(&a.scene)?;
            let state = read_state(&a.state)?;
            let camera = a.camera.camera(a.size)?;
            let img = render_image(&scene, &state, &camera, a.pass)?;
            write_image(&img, &a.out, ImageFormat::from_path(&a.out)?)?;
            if let Some(p) = &a.tonemap {
                write_image(&img, p, ImageFormat::Ppm)?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let scene = read_scene(&a.scene)?;
            let ids = enumerate_params(&scene, &a.params.0);
            if ids.is_empty() {
                return Err(Error::InvalidArgument("the selected families have no parameters in this scene".into()));
            }
            let loss = LossSpec::random_linear(scene.kernel_count(), scene.sh_degree, cli.seed);
            let single;
            let schedule: &[f64] = match a.eps {
                Some(e) => {
                    single = [e];
                    &single
                }
                None => &DEFAULT_EPS_SCHEDULE,
            };
            let report = finite_diff_check(&scene, &ids, &loss, schedule, 1e-9)?;
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(report.to_table().as_bytes());
            let worst = report.max_relative_error();
            let _ = writeln!(out, "max relative error {worst:.3e} (tolerance {:.1e})", a.tol);
            if let Some(p) = &a.json {
                std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
            }
            if report.passed(a.tol) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "gradient check failed: {worst:.3e} exceeds {:.1e}",
                    a.tol
                )))
            }
        }
        Command::Optimize(a) => {
            let scene = read_scene(&a.scene)?;
            let targets = read_manifest(&a.targets)?;
            let selection = ParamSelection::new(a.learn.0.iter().copied())?;
            let mut cfg = OptimConfig::new(a.iters, a.lr);
            cfg.solver = solver_config(a.solver, a.steps, cli.seed);
            cfg.loss = a.loss;
            let result = run_optimization(&scene, &targets, &selection, &cfg)?;
            if let (Some(first), Some(last)) = (result.trace.first(), result.trace.last()) {
                info!("loss {:.4e} -> {:.4e} over {} iterations", first.loss, last.loss, result.trace.len());
            }
            write_scene(&result.scene, &a.out)?;
            match &a.trace {
                Some(p) => write_trace_csv(&result.trace, p),
                None => Ok(()),
            }
        }
        Command::Variance(a) => {
            let scene = read_scene(&a.scene)?;
            let cfg = solver_config(a.solver, Some(a.steps), cli.seed);
            let states = repeated_solves(&scene, &cfg, a.runs)?;
            let kv = kernel_variance(&states)?;
            let mean = kv.iter().sum::<f64>() / kv.len().max(1) as f64;
            let mut mean_pixel_variance = None;
            if let (Some(cam), Some(size), Some(map)) = (&a.camera, a.size, &a.map) {
                let camera = cam.camera(size)?;
                let images = states
                    .iter()
                    .map(|s| render_image(&scene, s, &camera, RenderPass::Full))
                    .collect::<Result<Vec<_>>>()?;
                let var = pixel_variance(&images)?;
                mean_pixel_variance = Some(var.data.iter().sum::<f64>() / var.data.len() as f64);
                write_image(&var, map, ImageFormat::Pfm)?;
            }
            let report = VarianceReport {
                solver: a.solver,
                runs: a.runs,
                steps: a.steps,
                seed: cli.seed,
                kernel_variance: kv,
                mean_kernel_variance: mean,
                mean_pixel_variance,
            };
            info!("{} mean kernel variance {:.4e}", a.solver, mean);
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))
        }
    }
}

/// Reads a targets manifest; image paths are relative to the manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<Target>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::scene(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let image = read_pfm(base.join(&e.image))?;
            let camera = Camera::parse(&e.camera, &format!("{}x{}", image.width, image.height))?;
            Ok(Target { camera, image })
        })
        .collect()
}
