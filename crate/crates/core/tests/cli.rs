use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use surfel_gi::scene::{read_scene, write_scene};
use surfel_gi::Vec3;

const TASK_CAMERAS: [&str; 2] = [
    "1.5,-1.8,1.2/-0.3,0.3,-0.5/0,0,1/1.0",
    "-0.3,-2,0.4/-0.3,0.3,-0.5/0,0,1/1.0",
];

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surfel-gi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_then_render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path().join("st.json");
    let scene = bundled("two_kernel.json");
    ok(&["solve", "--scene", s(&scene), "--solver", "dense", "--out", s(&st)]);
    let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&st).unwrap()).unwrap();
    assert_eq!(state["solver"], "dense");
    assert_eq!(state["radiosity"].as_array().unwrap().len(), 2);
    let (a, b) = (dir.path().join("a.pfm"), dir.path().join("b.pfm"));
    let ppm = dir.path().join("a.ppm");
    let cam = "0,0,5/0,0,0/0,1,0/0.8";
    for (out, extra) in [(&a, vec!["--tonemap", s(&ppm)]), (&b, vec![])] {
        let mut args = vec!["render", "--scene", s(&scene), "--state", s(&st), "--camera", cam, "--size", "64x64", "--out", s(out)];
        args.extend(extra);
        ok(&args);
    }
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(x.starts_with(b"PF\n64 64\n-1.0\n"));
    assert_eq!(x, y);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n64 64\n255\n"));
}

#[test]
fn gradcheck_passes_on_the_bundled_random_scene() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("g.json");
    let out = ok(&[
        "gradcheck",
        "--scene",
        s(&bundled("rand4.json")),
        "--params",
        "light_pos,emission,brdf,geometry",
        "--tol",
        "1e-3",
        "--json",
        s(&json),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("max relative error"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert!(rows.len() > 50);
    assert!(rows.iter().all(|r| r["relative_error"].as_f64().unwrap() <= 1e-3));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("st.json");
    let usage = run(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(!usage.stderr.is_empty());
    assert_eq!(run(&["solve", "--scene", "x.json", "--bogus", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["solve", "--scene", "x.json", "--solver", "exact", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "solve", "--scene", "x.json", "--out", s(&out)]).status.code(), Some(2));
    let scene = bundled("two_kernel.json");
    let bad_camera = ["render", "--scene", s(&scene), "--state", "st.json", "--camera", "0,0/1", "--size", "4x4", "--out", "o.pfm"];
    assert_eq!(run(&bad_camera).status.code(), Some(2));
    assert_eq!(run(&["variance", "--scene", s(&scene), "--solver", "dense", "--out", s(&out)]).status.code(), Some(2));
    let missing = run(&["solve", "--scene", "/nonexistent/scene.json", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));
    assert!(!out.exists());
}

/// Target images of the bundled light task plus a displaced start scene.
fn light_task_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let truth = bundled("light_task.json");
    let st = dir.join("truth_state.json");
    ok(&["solve", "--scene", s(&truth), "--out", s(&st)]);
    let mut entries = Vec::new();
    for (k, cam) in TASK_CAMERAS.iter().enumerate() {
        let img = dir.join(format!("view{k}.pfm"));
        ok(&["render", "--scene", s(&truth), "--state", s(&st), "--camera", cam, "--size", "24x24", "--out", s(&img)]);
        entries.push(serde_json::json!({"camera": cam, "image": format!("view{k}.pfm")}));
    }
    let manifest = dir.join("targets.json");
    std::fs::write(&manifest, serde_json::to_string(&entries).unwrap()).unwrap();
    let mut start = read_scene(&truth).unwrap();
    let r = start.bounding_radius();
    start.lights[0].position += Vec3::new(1.0, -1.0, 1.0).normalize() * 0.2 * r;
    let start_path = dir.join("start.json");
    write_scene(&start, &start_path).unwrap();
    (start_path, manifest)
}

#[test]
fn optimize_recovers_the_light_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (start, manifest) = light_task_inputs(dir.path());
    let (out, trace) = (dir.path().join("opt.json"), dir.path().join("trace.csv"));
    ok(&[
        "optimize", "--scene", s(&start), "--targets", s(&manifest), "--learn", "light_pos", "--iters", "500", "--lr",
        "5e-3", "--out", s(&out), "--trace", s(&trace),
    ]);
    let truth = read_scene(&bundled("light_task.json")).unwrap();
    let got = read_scene(&out).unwrap();
    let err = (got.lights[0].position - truth.lights[0].position).norm() / truth.bounding_radius();
    assert!(err <= 0.02, "{err}");
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss,grad_light_pos"));
    assert_eq!(csv.lines().count(), 501);
}

#[test]
fn variance_prefers_hybrid_on_the_direct_dominant_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = bundled("direct_dominant.json");
    let mut means = Vec::new();
    for solver in ["mc", "hybrid"] {
        let (out, map) = (dir.path().join(format!("{solver}.json")), dir.path().join(format!("{solver}.pfm")));
        ok(&[
            "variance", "--scene", s(&scene), "--solver", solver, "--runs", "20", "--steps", "64", "--out", s(&out),
            "--camera", "0,0,3/0,0,0/0,1,0/0.9", "--size", "16x16", "--map", s(&map), "--seed", "3",
        ]);
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(report["runs"], 20);
        assert_eq!(report["seed"], 3);
        assert!(report["mean_pixel_variance"].as_f64().is_some());
        assert!(std::fs::read(&map).unwrap().starts_with(b"PF\n16 16\n"));
        means.push(report["mean_kernel_variance"].as_f64().unwrap());
    }
    assert!(means[1] <= 0.5 * means[0], "{means:?}");
}

fn outputs_with_threads(threads: &str, dir: &Path, start: &Path, manifest: &Path) -> Vec<Vec<u8>> {
    let tag = |name: &str| dir.join(format!("{threads}_{name}"));
    let scene = bundled("reflective_four.json");
    let mut files = Vec::new();
    for solver in ["mc", "hybrid", "pr"] {
        let st = tag(&format!("{solver}.json"));
        ok(&["--threads", threads, "--seed", "11", "solve", "--scene", s(&scene), "--solver", solver, "--steps", "48", "--out", s(&st)]);
        let img = tag(&format!("{solver}.pfm"));
        ok(&["--threads", threads, "render", "--scene", s(&scene), "--state", s(&st), "--camera", "0,0,0.2/1,0.3,-0.5/0,0,1/1.2", "--size", "32x24", "--out", s(&img)]);
        files.extend([st, img]);
    }
    let var = tag("var.json");
    ok(&["--threads", threads, "variance", "--scene", s(&scene), "--solver", "mc", "--runs", "4", "--steps", "32", "--out", s(&var)]);
    let (opt, trace) = (tag("opt.json"), tag("trace.csv"));
    ok(&[
        "--threads", threads, "--seed", "5", "optimize", "--scene", s(start), "--targets", s(manifest), "--learn", "light_pos,emission",
        "--iters", "8", "--solver", "hybrid", "--steps", "16", "--out", s(&opt), "--trace", s(&trace),
    ]);
    let grad = tag("grad.json");
    ok(&["--threads", threads, "--seed", "2", "gradcheck", "--scene", s(&bundled("rand4.json")), "--params", "geometry", "--json", s(&grad)]);
    files.extend([var, opt, trace, grad]);
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

#[test]
fn worker_count_does_not_change_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let (start, manifest) = light_task_inputs(dir.path());
    let one = outputs_with_threads("1", dir.path(), &start, &manifest);
    let eight = outputs_with_threads("8", dir.path(), &start, &manifest);
    assert_eq!(one.len(), eight.len());
    for (k, (a, b)) in one.iter().zip(&eight).enumerate() {
        assert!(a == b, "output {k} differs between 1 and 8 workers");
    }
}
