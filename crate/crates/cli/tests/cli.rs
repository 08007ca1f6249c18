use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use shadefuse_core::mesh::read_ply;

const SMALL: &str = "\
synth.views = 6
synth.width = 96
synth.height = 80
synth.focal = 110
refine.voxel_size = 0.008
refine.grid_levels = 1
refine.image_levels = 1
refine.t_kf = 1
refine.lm_iterations = 2
eval.reference_voxel_size = 0.004
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shadefuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn cmd(&self, args: &[&str]) -> Output {
        let cfg = self.s("small.cfg");
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--config", &cfg]);
        run(&all)
    }

    fn ok(&self, args: &[&str]) {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }

    fn synth(&self, name: &str, extra: &[&str]) {
        let out = self.s(name);
        let mut args = vec!["synth", "--out", &out];
        args.extend(extra);
        self.ok(&args);
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn artifact_hashes(manifest: &Path) -> Vec<(String, String)> {
    json(manifest)["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn synth_is_deterministic_and_echoes_the_scene() {
    let w = Workdir::new();
    w.synth("a", &["--seed", "9"]);
    w.synth("b", &["--seed", "9"]);
    let (a, b) = (artifact_hashes(&w.path("a/manifest.json")), artifact_hashes(&w.path("b/manifest.json")));
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|(p, _)| p.starts_with("color/")).count(), 6);
    assert_eq!(json(&w.path("a/manifest.json"))["seed"], 9);

    let scene = json(&w.path("a/scene.json"));
    assert_eq!(scene["seed"], 9);
    assert_eq!(scene["poses"].as_array().unwrap().len(), 6);
    assert_eq!(scene["intrinsics"]["width"], 96);
    assert_eq!(scene["intrinsics"]["fx"], 110.0);
    assert_eq!(scene["noise"]["depth_sigma"], 0.002);
    assert_eq!(scene["shape"]["kind"], "bumpy_sphere");

    w.synth("c", &["--seed", "10"]);
    assert_ne!(a, artifact_hashes(&w.path("c/manifest.json")));
}

#[test]
fn fuse_noise_free_sphere_is_within_a_voxel() {
    let w = Workdir::new();
    w.synth(
        "ds",
        &[
            "--set",
            "synth.scene=sphere",
            "--set",
            "synth.depth_sigma=0",
            "--set",
            "synth.rot_sigma_deg=0",
            "--set",
            "synth.trans_sigma=0",
            "--set",
            "synth.bilateral=false",
        ],
    );
    let o = w.cmd(&["fuse", &w.s("ds"), "--out", &w.s("fz")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mesh = read_ply(&w.path("fz/fused.ply")).unwrap();
    assert!(!mesh.vertices.is_empty());
    let n = mesh.vertices.len() as f64;
    let rms = (mesh.vertices.iter().map(|v| (v.norm() - 0.1).powi(2)).sum::<f64>() / n).sqrt();
    assert!(rms < 0.008, "rms radius error {rms}");
    assert!(w.path("fz/fused.isdf").is_file());
}

#[test]
fn missing_depth_directory_is_a_data_error() {
    let w = Workdir::new();
    w.synth("ds", &[]);
    std::fs::remove_dir_all(w.path("ds/depth")).unwrap();
    let o = w.cmd(&["fuse", &w.s("ds"), "--out", &w.s("fz")]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("depth") && msg.contains("missing directory"), "{msg}");
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Workdir::new();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["fuse"]).status.code(), Some(1));
    let o = w.cmd(&["synth", "--out", &w.s("x"), "--set", "refine.lambda_q=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refine.lambda_q"));
    let o = w.cmd(&["synth", "--out", &w.s("x"), "--set", "refine.grid_levels=0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn refine_is_deterministic_and_reports_a_nonincreasing_trace() {
    let w = Workdir::new();
    w.synth("ds", &[]);
    for out in ["r1", "r2"] {
        w.ok(&["refine", &w.s("ds"), "--out", &w.s(out), "--threads", "1"]);
    }
    for f in ["refined.ply", "report.json", "refined.isdf", "lighting.txt", "trajectory.txt", "manifest.json"] {
        let (a, b) = (std::fs::read(w.path("r1").join(f)).unwrap(), std::fs::read(w.path("r2").join(f)).unwrap());
        assert!(a == b, "{f} differs between runs");
    }
    let report = json(&w.path("r1/report.json"));
    assert_eq!(report["albedo_fixed"], false);
    for stage in report["stages"].as_array().unwrap() {
        let mut last = stage["initial_energy"]["total"].as_f64().unwrap();
        for it in stage["iterations"].as_array().unwrap() {
            if it["accepted"].as_bool().unwrap() {
                let c = it["cost"].as_f64().unwrap();
                assert!(c <= last, "{c} > {last}");
                last = c;
            }
        }
    }
    assert!(w.path("r1/timing.json").is_file());
    let hashed = artifact_hashes(&w.path("r1/manifest.json"));
    assert!(hashed.iter().all(|(p, _)| p != "timing.json"));
    assert!(hashed.iter().any(|(p, _)| p == "refined.ply"));
}

#[test]
fn infinite_albedo_weight_marks_albedo_fixed() {
    let w = Workdir::new();
    w.synth("ds", &[]);
    w.ok(&["refine", &w.s("ds"), "--out", &w.s("r"), "--set", "refine.lambda_a=inf"]);
    assert_eq!(json(&w.path("r/report.json"))["albedo_fixed"], true);
}

#[test]
fn eval_scores_mesh_shading_and_poses() {
    let w = Workdir::new();
    w.synth("ds", &[]);
    w.ok(&["refine", &w.s("ds"), "--out", &w.s("r")]);
    let mesh = w.s("r/refined.ply");
    w.ok(&["eval", "--mesh", &mesh, "--reference", &mesh, "--out", &w.s("self")]);
    let s = json(&w.path("self/eval.json"));
    assert_eq!(s["mesh"]["mad_m"], 0.0);

    w.ok(&[
        "eval",
        "--mesh",
        &mesh,
        "--scene",
        &w.s("ds"),
        "--sdf",
        &w.s("r/refined.isdf"),
        "--lighting",
        &w.s("r/lighting.txt"),
        "--trajectory",
        &w.s("ds/trajectory.txt"),
        "--out",
        &w.s("ev"),
    ]);
    let s = json(&w.path("ev/eval.json"));
    assert!(s["mesh"]["mad_m"].as_f64().unwrap() > 0.0);
    assert!(s["shading"]["mad_255"].as_f64().unwrap() >= 0.0);
    assert_eq!(s["poses"]["frames"], 6);
    // The input trajectory carries only the synthetic pose noise.
    assert!(s["poses"]["mean_rotation_deg"].as_f64().unwrap() < 1.0);
    for f in ["vertex_distances.csv", "distance_heatmap.ply", "shading.csv", "shading_heatmap.ply", "pose_errors.csv"] {
        assert!(w.path("ev").join(f).is_file(), "{f}");
    }
}

#[test]
fn malformed_ply_reports_byte_offset() {
    let w = Workdir::new();
    let bad = w.path("bad.ply");
    std::fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n0.5\nnope\n").unwrap();
    let o = w.cmd(&["eval", "--mesh", &w.s("bad.ply"), "--reference", &w.s("bad.ply"), "--out", &w.s("ev")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_score_per_value() {
    let w = Workdir::new();
    w.synth("ds", &[]);
    w.ok(&["refine", &w.s("ds"), "--out", &w.s("sw"), "--sweep", "refine.t_sv=0.5,0.2"]);
    let csv = std::fs::read_to_string(w.path("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "refine.t_sv,mesh_mad_m");
    assert_eq!(rows.len(), 3);
    for (row, v) in rows[1..].iter().zip(["0.5", "0.2"]) {
        let (k, mad) = row.split_once(',').unwrap();
        assert_eq!(k, v);
        assert!(mad.parse::<f64>().unwrap() > 0.0);
        assert!(w.path(&format!("sw/refine.t_sv={v}/refined.ply")).is_file());
    }
}
