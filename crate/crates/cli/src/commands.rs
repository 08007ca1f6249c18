//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use shadefuse_core::camera::{read_trajectory, trajectory_to_text};
use shadefuse_core::config::{Config, SceneKind};
use shadefuse_core::eval::{
    mean_pose_error, mesh_mad, pose_error, shading_heatmap_points, shading_mad, write_heatmap_ply,
    write_pose_errors_csv, write_shading_csv, write_vertex_distances_csv,
};
use shadefuse_core::frames::load_dataset;
use shadefuse_core::lighting::SubvolumeLattice;
use shadefuse_core::mesh::{marching_cubes, read_ply, write_ply, TriMesh};
use shadefuse_core::refine::run_pipeline;
use shadefuse_core::sdf::SparseSdf;
use shadefuse_core::synth::{ground_truth_mesh, synthesize, write_scene_dataset, SceneSpec, Shape};

use crate::manifest::{finish, write};
use crate::CliError;

const SCENE_FILE: &str = "scene.json";

pub fn scene_from_config(cfg: &Config) -> SceneSpec {
    let s = &cfg.synth;
    match s.scene {
        SceneKind::BumpySphere => SceneSpec::bumpy_sphere(&s.orbit, s.noise.clone(), cfg.seed),
        SceneKind::Sphere => SceneSpec::orbit(
            Shape::Sphere {
                center: [0.0; 3],
                radius: s.orbit.radius,
            },
            &s.orbit,
            s.noise.clone(),
            cfg.seed,
        ),
    }
}

pub fn synth(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let scene = scene_from_config(cfg);
    let data = synthesize(&scene)?;
    write_scene_dataset(out, &scene, &data)?;
    println!("wrote {} frames to {}", data.frames.len(), out.display());
    finish(out, "synth", cfg, &[])
}

pub fn fuse(cfg: &Config, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    let r = &cfg.refine;
    let sdf = SparseSdf::fuse(&data.frames, &data.intrinsics, r.voxel_size, r.trunc_multiplier)?;
    sdf.write_snapshot(&out.join("fused.isdf"))?;
    let mesh = marching_cubes(&sdf);
    write_ply(&mesh, &out.join("fused.ply"))?;
    println!(
        "fused {} frames: {} voxels, {} triangles",
        data.frames.len(),
        sdf.len(),
        mesh.triangles.len()
    );
    finish(out, "fuse", cfg, &[dataset.to_path_buf()])
}

/// Runs the pipeline into `out` and returns the refined mesh.
fn refine_into(cfg: &Config, dataset: &Path, out: &Path) -> Result<TriMesh, CliError> {
    let data = load_dataset(dataset)?;
    let res = run_pipeline(&data.frames, &data.intrinsics, &cfg.refine)?;
    write_ply(&res.mesh, &out.join("refined.ply"))?;
    res.sdf.write_snapshot(&out.join("refined.isdf"))?;
    res.lattice.write(&out.join("lighting.txt"))?;
    res.intrinsics.write(&out.join("intrinsics.txt"))?;
    write(&out.join("trajectory.txt"), trajectory_to_text(&res.poses))?;
    write(&out.join("report.json"), res.report.to_json())?;
    write(&out.join("timing.json"), res.timing.to_json())?;
    let last = res.report.stages.last();
    println!(
        "refined {} keyframes over {} stages: {} triangles, final energy {:.6e}",
        res.report.keyframes.len(),
        res.report.stages.len(),
        res.mesh.triangles.len(),
        last.map_or(f64::NAN, |s| s.final_energy.total)
    );
    finish(out, "refine", cfg, &[dataset.to_path_buf()])?;
    Ok(res.mesh)
}

pub fn refine(cfg: &Config, dataset: &Path, out: &Path) -> Result<(), CliError> {
    refine_into(cfg, dataset, out).map(|_| ())
}

fn read_scene(dir: &Path) -> Result<SceneSpec, CliError> {
    let p = dir.join(SCENE_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| {
        CliError::Core(shadefuse_core::Error::Io {
            path: p.clone(),
            source: e,
        })
    })?;
    Ok(SceneSpec::from_json(&text)?)
}

/// One refinement per value of a config key. When the dataset carries its scene, each
/// result is scored against the noise-free reference in `sweep.csv`.
pub fn sweep(cfg: &Config, dataset: &Path, spec: &str, out: &Path) -> Result<(), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--sweep {spec:?} is not KEY=V1,V2,...")))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("--sweep {spec:?} lists no values")));
    }
    let mut runs = Vec::new();
    for v in &values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.validate()?;
        runs.push((v, c));
    }
    let reference = if dataset.join(SCENE_FILE).is_file() {
        let scene = read_scene(dataset)?;
        Some(ground_truth_mesh(&scene, cfg.eval.reference_voxel_size)?)
    } else {
        None
    };
    let mut csv = format!("{key},mesh_mad_m\n");
    for (v, c) in &runs {
        let dir = out.join(format!("{key}={v}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        let mesh = refine_into(c, dataset, &dir)?;
        let mad = match &reference {
            Some(r) => mesh_mad(&mesh, r)?.mean,
            None => f64::NAN,
        };
        writeln!(csv, "{v},{mad}").unwrap();
        println!("{key} = {v}: mesh MAD {:.4} mm", mad * 1e3);
    }
    write(&out.join("sweep.csv"), csv)?;
    finish(out, "refine sweep", cfg, &[dataset.to_path_buf()])
}

pub struct EvalInputs {
    pub mesh: PathBuf,
    pub reference: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub sdf: Option<PathBuf>,
    pub lighting: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
}

pub fn eval(cfg: &Config, inp: &EvalInputs, out: &Path) -> Result<(), CliError> {
    let mut inputs = vec![inp.mesh.clone()];
    let test = read_ply(&inp.mesh)?;
    let scene = inp.scene.as_deref().map(read_scene).transpose()?;
    let reference = match (&inp.reference, &scene) {
        (Some(p), _) => {
            inputs.push(p.clone());
            read_ply(p)?
        }
        (None, Some(s)) => ground_truth_mesh(s, cfg.eval.reference_voxel_size)?,
        (None, None) => return Err(CliError::Usage("eval needs --reference or --scene".into())),
    };
    if let Some(d) = &inp.scene {
        inputs.push(d.join(SCENE_FILE));
    }
    let d = mesh_mad(&test, &reference)?;
    write_vertex_distances_csv(&test, &d, &out.join("vertex_distances.csv"))?;
    write_heatmap_ply(&test, &d.per_vertex, d.max, &out.join("distance_heatmap.ply"))?;
    let mut summary = serde_json::json!({
        "mesh": { "mad_m": d.mean, "std_m": d.std, "max_m": d.max, "vertices": test.vertices.len() },
    });
    println!("mesh MAD {:.4} mm (std {:.4}, max {:.4})", d.mean * 1e3, d.std * 1e3, d.max * 1e3);

    if let (Some(sp), Some(lp)) = (&inp.sdf, &inp.lighting) {
        inputs.extend([sp.clone(), lp.clone()]);
        let sdf = SparseSdf::read_snapshot(sp)?;
        let lattice = SubvolumeLattice::read(lp)?;
        let shell = sdf.thin_shell(cfg.refine.t_shell.1);
        let e = shading_mad(&sdf, &lattice, &shell)?;
        write_shading_csv(&e, &out.join("shading.csv"))?;
        let vmax = e.per_voxel.iter().map(|(_, v)| *v).fold(0.0, f64::max);
        write_ply(&shading_heatmap_points(&sdf, &e, vmax), &out.join("shading_heatmap.ply"))?;
        summary["shading"] = serde_json::json!({ "mad_255": e.mad, "voxels": e.count });
        println!("shading MAD {:.4} (0-255 scale) over {} voxels", e.mad, e.count);
    }

    if let (Some(tp), Some(s)) = (&inp.trajectory, &scene) {
        inputs.push(tp.clone());
        let est = read_trajectory(tp)?;
        let truth = s.true_poses();
        let mut frames = Vec::new();
        let mut matched = Vec::new();
        for (i, p) in &est {
            let t = truth.get(*i).ok_or_else(|| {
                CliError::Core(shadefuse_core::Error::InvalidInput(format!(
                    "trajectory frame {i} is not in the scene"
                )))
            })?;
            frames.push(*i);
            matched.push((*p, *t));
        }
        let (e, t): (Vec<_>, Vec<_>) = matched.into_iter().unzip();
        let errs = pose_error(&e, &t)?;
        write_pose_errors_csv(&errs, &frames, &out.join("pose_errors.csv"))?;
        let (rot, trans) = mean_pose_error(&errs);
        summary["poses"] = serde_json::json!({ "mean_rotation_deg": rot, "mean_translation_m": trans, "frames": frames.len() });
        println!("pose error {rot:.4} deg, {:.4} mm", trans * 1e3);
    }

    write(&out.join("eval.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    finish(out, "eval", cfg, &inputs)
}
