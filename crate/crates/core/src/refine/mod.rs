//! Joint refinement of distances, albedo, poses and intrinsics with a nested
//! coarse-to-fine schedule over grid and image pyramid levels.

mod problem;
mod residuals;

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use problem::{
    build_problem, shading_blocks, BlockCounts, Layout, StageInput, StageProblem, StageView, TermGroups, VoxelViews,
    Weights,
};
pub use residuals::{
    chromaticity_kernel, LinearResidual, ProjectedShading, ShadingGradient, Slot, DISTANCE_OFFSETS,
    FORWARD_STENCIL, SHADING_PARAMS,
};

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::frames::{build_pyramid, select_keyframes, Frame, FramePyramid};
use crate::lighting::{estimate_lighting, SubvolumeLattice};
use crate::mesh::{marching_cubes, TriMesh};
use crate::sampling::{chromaticity_of, collect_observations, recolorize, View};
use crate::sdf::{SparseSdf, VoxelKey};
use crate::solver::{IterationRecord, LmState, SolveOptions, Termination};

/// Accepted steps in a row with rising energy before a solve is declared divergent.
pub const DIVERGENCE_STREAK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    /// Voxel size of the finest grid level.
    pub voxel_size: f64,
    pub grid_levels: usize,
    pub image_levels: usize,
    pub t_kf: usize,
    pub t_best: usize,
    pub t_sv: f64,
    /// Truncation band in voxels.
    pub trunc_multiplier: f64,
    /// Thin-shell half-width in voxels at the coarsest and finest grid level.
    pub t_shell: (f64, f64),
    pub weights: Weights,
    pub lambda_diffuse: f64,
    /// LM iteration budget per solve.
    pub lm_iterations: usize,
    pub optimize_poses: bool,
    pub optimize_intrinsics: bool,
    pub solver: SolveOptions,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.001,
            grid_levels: 3,
            image_levels: 3,
            t_kf: 20,
            t_best: 5,
            t_sv: 0.05,
            trunc_multiplier: 5.0,
            t_shell: (2.0, 1.0),
            weights: Weights::default(),
            lambda_diffuse: 0.01,
            lm_iterations: 10,
            optimize_poses: true,
            optimize_intrinsics: true,
            solver: SolveOptions::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad("voxel size must be positive");
        }
        if self.grid_levels == 0 || self.image_levels == 0 {
            return bad("pyramids need at least one level");
        }
        if self.t_kf == 0 || self.t_best == 0 {
            return bad("t_kf and t_best must be at least 1");
        }
        if !(self.t_sv > 0.0) {
            return bad("t_sv must be positive");
        }
        if !(self.t_shell.0 > 0.0 && self.t_shell.1 > 0.0) {
            return bad("thin-shell width must be positive");
        }
        if !(self.trunc_multiplier > self.t_shell.0.max(self.t_shell.1)) {
            return bad("truncation band must exceed the thin shell");
        }
        if !(self.lambda_diffuse >= 0.0) {
            return bad("lambda_diffuse must be nonnegative");
        }
        self.weights.validate()?;
        self.solver.validate()
    }

    pub fn grid_voxel_size(&self, level: usize) -> f64 {
        self.voxel_size * (1u64 << (self.grid_levels - 1 - level)) as f64
    }

    /// Thin-shell width at grid level `level`, linear from coarse to fine.
    pub fn grid_t_shell(&self, level: usize) -> f64 {
        if self.grid_levels == 1 {
            return self.t_shell.0;
        }
        let t = level as f64 / (self.grid_levels - 1) as f64;
        self.t_shell.0 + (self.t_shell.1 - self.t_shell.0) * t
    }

    /// Image levels solved at grid level `level`, coarse to fine.
    pub fn image_schedule(&self, level: usize) -> Vec<u32> {
        if level == 0 {
            (0..self.image_levels as u32).rev().collect()
        } else {
            vec![0]
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TermEnergies {
    pub shading_gradient: f64,
    pub volumetric: f64,
    pub stabilization: f64,
    pub albedo: f64,
    pub total: f64,
}

impl TermEnergies {
    fn of(sp: &StageProblem, x: &[f64]) -> Self {
        // Halved like the solver cost, so the parts sum to the total.
        let e: Vec<f64> = sp.problem.group_energies(x).iter().map(|v| 0.5 * v).collect();
        let g = &sp.groups;
        Self {
            shading_gradient: e[g.shading.0],
            volumetric: e[g.volumetric.0],
            stabilization: e[g.stabilization.0],
            albedo: e[g.albedo.0],
            total: sp.problem.cost(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub cost: f64,
    pub trial_cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub cg_iterations: usize,
    pub lambda_v: f64,
    pub lambda_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub grid_level: usize,
    pub image_level: u32,
    pub voxel_size: f64,
    pub t_shell: f64,
    pub shell_voxels: usize,
    pub unknowns: usize,
    pub blocks: BlockCounts,
    pub lighting_nodes: usize,
    pub initial_energy: TermEnergies,
    pub final_energy: TermEnergies,
    pub iterations: Vec<IterationReport>,
    pub termination: String,
    pub pose_increments: Vec<[f64; 6]>,
    pub intrinsic_deltas: [f64; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseEntry {
    pub frame: usize,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// Everything about a run except wall-clock timing, so identical runs
/// serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub keyframes: Vec<usize>,
    pub albedo_fixed: bool,
    pub stages: Vec<StageReport>,
    pub final_intrinsics: [f64; 7],
    pub final_poses: Vec<PoseEntry>,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Accepted-cost trace of every stage, in run order.
    pub fn accepted_costs(&self) -> Vec<Vec<f64>> {
        self.stages
            .iter()
            .map(|s| {
                std::iter::once(s.initial_energy.total)
                    .chain(s.iterations.iter().filter(|i| i.accepted).map(|i| i.cost))
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    /// `(phase, seconds)` in run order.
    pub phases: Vec<(String, f64)>,
}

impl Timing {
    fn record(&mut self, name: impl Into<String>, start: Instant) {
        self.phases.push((name.into(), start.elapsed().as_secs_f64()));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timing serializes")
    }
}

pub struct RefineOutput {
    pub sdf: SparseSdf,
    pub lattice: SubvolumeLattice,
    /// Refined keyframe poses by frame index.
    pub poses: Vec<(usize, Pose)>,
    pub intrinsics: CameraIntrinsics,
    pub mesh: TriMesh,
    pub report: Report,
    pub timing: Timing,
}

/// Result of one LM solve under the weight schedule.
#[derive(Clone, Debug)]
pub struct StageSolve {
    pub x: Vec<f64>,
    pub iterations: Vec<IterationReport>,
    pub termination: Option<Termination>,
    pub initial_energy: TermEnergies,
    pub final_energy: TermEnergies,
}

/// Runs up to `budget` LM iterations, moving `λ_v`, `λ_s` along their
/// schedule between iterations. Cost convergence ends the solve only once the
/// schedule has reached its final weights.
pub fn solve_stage(
    sp: &mut StageProblem,
    weights: &Weights,
    budget: usize,
    options: &SolveOptions,
) -> Result<StageSolve> {
    options.validate()?;
    let set_scales = |sp: &mut StageProblem, k: usize| {
        let (lv, ls) = weights.schedule(k, budget);
        sp.problem.set_group_scale(sp.groups.volumetric, lv.sqrt());
        sp.problem.set_group_scale(sp.groups.stabilization, ls.sqrt());
        (lv, ls)
    };
    set_scales(sp, 0);
    let initial_energy = TermEnergies::of(sp, &sp.x0);
    let mut state = LmState::new(sp.x0.clone(), options);
    let mut iterations = Vec::with_capacity(budget);
    let mut termination = None;
    let mut last_cost = initial_energy.total;
    let mut rising = 0;
    for k in 0..budget {
        let (lv, ls) = set_scales(sp, k);
        let (rec, term): (IterationRecord, _) = state.iterate(&sp.problem, options)?;
        if rec.accepted {
            rising = if rec.cost > last_cost { rising + 1 } else { 0 };
            last_cost = rec.cost;
            if rising >= DIVERGENCE_STREAK {
                return Err(Error::Diverged(format!(
                    "energy rose on {DIVERGENCE_STREAK} consecutive accepted steps"
                )));
            }
        }
        iterations.push(IterationReport {
            iteration: rec.iteration,
            cost: rec.cost,
            trial_cost: rec.trial_cost,
            damping: rec.damping,
            step_norm: rec.step_norm,
            accepted: rec.accepted,
            cg_iterations: rec.cg_iterations,
            lambda_v: lv,
            lambda_s: ls,
        });
        let schedule_done = k + 1 >= budget || weights.schedule(k + 1, budget) == (lv, ls);
        match term {
            Some(Termination::GradientTolerance) => {
                termination = term;
                break;
            }
            Some(Termination::CostTolerance) if schedule_done => {
                termination = term;
                break;
            }
            _ => {}
        }
    }
    if budget > 0 && termination.is_none() {
        termination = Some(Termination::MaxIterations);
    }
    let final_energy = TermEnergies::of(sp, &state.x);
    Ok(StageSolve {
        x: state.x,
        iterations,
        termination,
        initial_energy,
        final_energy,
    })
}

/// Best views of every shell voxel as `(keyframe slot, weight)`. Views must
/// carry their slot as `index`.
pub fn best_views(sdf: &SparseSdf, shell: &[VoxelKey], views: &[View], t_best: usize) -> Vec<VoxelViews> {
    shell
        .par_iter()
        .map(|&k| {
            let (Ok(n), Ok(p)) = (sdf.normal(k), sdf.iso_project(k)) else {
                return Vec::new();
            };
            collect_observations(&p, &(-n), views, sdf.voxel_size, t_best)
                .into_iter()
                .map(|o| (o.frame_index, o.weight))
                .collect()
        })
        .collect()
}

/// Writes a solution back: poses, intrinsics, distances and albedo.
pub fn apply_solution(
    x: &[f64],
    layout: &Layout,
    sdf: &mut SparseSdf,
    poses: &mut [Pose],
    intrinsics: &mut CameraIntrinsics,
) -> ([f64; 7], Vec<[f64; 6]>) {
    let incs: Vec<[f64; 6]> = (0..layout.num_keyframes)
        .map(|k| {
            let o = layout.pose(k);
            std::array::from_fn(|i| x[o + i])
        })
        .collect();
    for (p, inc) in poses.iter_mut().zip(&incs) {
        *p = p.apply_increment(inc);
    }
    let o = layout.intrinsics();
    let deltas: [f64; 7] = std::array::from_fn(|i| x[o + i]);
    let mut params = intrinsics.params();
    for (p, d) in params.iter_mut().zip(&deltas) {
        *p += d;
    }
    *intrinsics = intrinsics.with_params(&params);
    for (i, &key) in layout.shell.iter().enumerate() {
        let v = sdf.get_mut(key).expect("shell voxel is allocated");
        v.d_refined = x[layout.distance(i)];
        if let Some(a) = layout.albedo(i) {
            let g = chromaticity_of(v.color);
            v.albedo = g.map(|c| c * x[a]);
        }
    }
    (deltas, incs)
}

fn level_views<'a>(pyramids: &'a [FramePyramid], poses: &[Pose], intr: CameraIntrinsics) -> Vec<View<'a>> {
    pyramids
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(slot, (pyr, pose))| View {
            intrinsics: intr,
            ..View::from_level(slot, &pyr.levels[0], *pose)
        })
        .collect()
}

/// Full pipeline: keyframes, coarse fusion, then per grid level recolorize,
/// lighting, and one joint solve per image level; final recolorize and mesh.
pub fn run_pipeline(frames: &[Frame], intr: &CameraIntrinsics, config: &RefineConfig) -> Result<RefineOutput> {
    config.validate()?;
    intr.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames".into()));
    }
    let mut timing = Timing::default();
    let t0 = Instant::now();
    let keyframes = select_keyframes(frames, config.t_kf)?;
    let pyramids: Vec<FramePyramid> = keyframes
        .par_iter()
        .map(|f| build_pyramid(f, intr, config.image_levels))
        .collect::<Result<_>>()?;
    let mut poses: Vec<Pose> = keyframes.iter().map(|f| f.pose).collect();
    let mut intrinsics = *intr;
    timing.record("keyframes", t0);

    let t0 = Instant::now();
    let mut sdf = SparseSdf::fuse(frames, intr, config.grid_voxel_size(0), config.trunc_multiplier)?;
    timing.record("fusion", t0);

    let with_albedo = !config.weights.albedo_fixed();
    let mut stages = Vec::new();
    let mut lattice = None;
    for g in 0..config.grid_levels {
        let t0 = Instant::now();
        if g > 0 {
            sdf = sdf.upsample()?;
        }
        let t_shell = config.grid_t_shell(g);
        let all_keys = sdf.sorted_keys();
        let views = level_views(&pyramids, &poses, intrinsics);
        recolorize(&mut sdf, &all_keys, &views, config.t_best);
        let shell = sdf.thin_shell(t_shell);
        if shell.is_empty() {
            return Err(Error::EmptyShell);
        }
        let template = SubvolumeLattice::covering_sdf(&sdf, config.t_sv)?;
        let lat = estimate_lighting(&sdf, &shell, &template, config.lambda_diffuse)?;
        let best = best_views(&sdf, &shell, &views, config.t_best);
        drop(views);
        let layout = Layout::new(keyframes.len(), shell, with_albedo);
        timing.record(format!("grid {g} setup"), t0);

        for level in config.image_schedule(g) {
            let t0 = Instant::now();
            let views = level_views(&pyramids, &poses, intrinsics);
            let stage_views: Vec<StageView> = views
                .iter()
                .zip(&pyramids)
                .map(|(v, p)| StageView {
                    intensity: &p.levels[level as usize].intensity,
                    depth: &p.levels[level as usize].depth,
                    full: *v,
                })
                .collect();
            let input = StageInput {
                sdf: &sdf,
                layout: &layout,
                views: &stage_views,
                best_views: &best,
                lattice: &lat,
                intrinsics,
                image_level: level,
                weights: config.weights,
                optimize_poses: config.optimize_poses,
                optimize_intrinsics: config.optimize_intrinsics,
            };
            let mut sp = build_problem(&input)?;
            let solve = solve_stage(&mut sp, &config.weights, config.lm_iterations, &config.solver)?;
            let counts = sp.counts;
            let unknowns = sp.problem.num_unknowns();
            drop(sp);
            drop(stage_views);
            drop(views);
            let (deltas, incs) = apply_solution(&solve.x, &layout, &mut sdf, &mut poses, &mut intrinsics);
            stages.push(StageReport {
                grid_level: g,
                image_level: level,
                voxel_size: sdf.voxel_size,
                t_shell,
                shell_voxels: layout.shell.len(),
                unknowns,
                blocks: counts,
                lighting_nodes: lat.num_nodes(),
                initial_energy: solve.initial_energy,
                final_energy: solve.final_energy,
                iterations: solve.iterations,
                termination: solve
                    .termination
                    .map_or_else(|| "none".to_string(), |t| format!("{t:?}")),
                pose_increments: incs,
                intrinsic_deltas: deltas,
            });
            timing.record(format!("grid {g} image {level} solve"), t0);
        }
        lattice = Some(lat);
    }

    let t0 = Instant::now();
    let all_keys = sdf.sorted_keys();
    let views = level_views(&pyramids, &poses, intrinsics);
    recolorize(&mut sdf, &all_keys, &views, config.t_best);
    drop(views);
    let mesh = marching_cubes(&sdf);
    timing.record("extraction", t0);

    let out_poses: Vec<(usize, Pose)> = keyframes.iter().map(|f| f.index).zip(poses).collect();
    let report = Report {
        keyframes: keyframes.iter().map(|f| f.index).collect(),
        albedo_fixed: !with_albedo,
        stages,
        final_intrinsics: intrinsics.params(),
        final_poses: out_poses
            .iter()
            .map(|(frame, p)| PoseEntry {
                frame: *frame,
                rotation: std::array::from_fn(|r| std::array::from_fn(|c| p.rotation[(r, c)])),
                translation: [p.translation.x, p.translation.y, p.translation.z],
            })
            .collect(),
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
    };
    Ok(RefineOutput {
        sdf,
        lattice: lattice.expect("at least one grid level"),
        poses: out_poses,
        intrinsics,
        mesh,
        report,
        timing,
    })
}
