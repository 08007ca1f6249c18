//! Unknown layout and residual assembly for one refinement stage.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::residuals::{
    chromaticity_kernel, LinearResidual, ShadingGradient, Slot, DISTANCE_OFFSETS, SHADING_PARAMS,
};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::frames::{intensity_from_rgb, DepthImage, GrayImage};
use crate::lighting::SubvolumeLattice;
use crate::sampling::{chromaticity_of, visibility_threshold, visible, View};
use crate::sdf::{SparseSdf, VoxelKey};
use crate::solver::{AutoDiff, GroupId, Problem};

/// Term weights. `lambda_v` and `lambda_s` run linearly from `.0` to `.1`
/// over each solve's iteration budget. An infinite `lambda_a` fixes albedo.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub lambda_g: f64,
    pub lambda_v: (f64, f64),
    pub lambda_s: (f64, f64),
    pub lambda_a: f64,
    pub t_rob: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            lambda_g: 0.2,
            lambda_v: (160.0, 20.0),
            lambda_s: (120.0, 10.0),
            lambda_a: 0.1,
            t_rob: 10.0,
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_g,
            self.lambda_v.0,
            self.lambda_v.1,
            self.lambda_s.0,
            self.lambda_s.1,
            self.t_rob,
        ];
        if finite.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.lambda_a >= 0.0) {
            return Err(Error::InvalidInput("energy weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn albedo_fixed(&self) -> bool {
        self.lambda_a == f64::INFINITY
    }

    /// `(λ_v, λ_s)` at iteration `k` of a budget of `budget` iterations.
    pub fn schedule(&self, k: usize, budget: usize) -> (f64, f64) {
        let t = if budget <= 1 {
            0.0
        } else {
            k.min(budget - 1) as f64 / (budget - 1) as f64
        };
        let lerp = |(a, b): (f64, f64)| a + (b - a) * t;
        (lerp(self.lambda_v), lerp(self.lambda_s))
    }
}

/// Flat unknown vector: `[poses 6K | intrinsics 7 | distances N | albedo N]`.
/// The albedo block is absent when albedo is fixed.
#[derive(Clone, Debug)]
pub struct Layout {
    pub num_keyframes: usize,
    pub with_albedo: bool,
    pub shell: Vec<VoxelKey>,
    index: FxHashMap<VoxelKey, usize>,
}

impl Layout {
    pub fn new(num_keyframes: usize, shell: Vec<VoxelKey>, with_albedo: bool) -> Self {
        let index = shell.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self {
            num_keyframes,
            with_albedo,
            shell,
            index,
        }
    }

    pub fn pose(&self, keyframe: usize) -> usize {
        6 * keyframe
    }

    pub fn intrinsics(&self) -> usize {
        6 * self.num_keyframes
    }

    pub fn shell_index(&self, key: VoxelKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn distance(&self, i: usize) -> usize {
        6 * self.num_keyframes + 7 + i
    }

    pub fn albedo(&self, i: usize) -> Option<usize> {
        self.with_albedo
            .then(|| 6 * self.num_keyframes + 7 + self.shell.len() + i)
    }

    pub fn num_unknowns(&self) -> usize {
        let n = self.shell.len();
        6 * self.num_keyframes + 7 + n + if self.with_albedo { n } else { 0 }
    }

    /// Starting point: zero increments and deltas, current distances and albedo luma.
    pub fn initial(&self, sdf: &SparseSdf) -> Vec<f64> {
        let mut x = vec![0.0; self.num_unknowns()];
        for (i, k) in self.shell.iter().enumerate() {
            let v = sdf.get(*k).expect("shell voxel is allocated");
            x[self.distance(i)] = v.d_refined;
            if let Some(a) = self.albedo(i) {
                x[a] = intensity_from_rgb(v.albedo);
            }
        }
        x
    }
}

/// A keyframe at the current image level.
#[derive(Clone, Copy, Debug)]
pub struct StageView<'a> {
    /// Intensity and depth at the stage's image level.
    pub intensity: &'a GrayImage,
    pub depth: &'a DepthImage,
    /// Full-resolution images, used for depth-compatibility tests.
    pub full: View<'a>,
}

/// The keyframes observing one shell voxel, as `(keyframe slot, weight)`.
pub type VoxelViews = Vec<(usize, f64)>;

pub struct StageInput<'a> {
    pub sdf: &'a SparseSdf,
    pub layout: &'a Layout,
    pub views: &'a [StageView<'a>],
    /// Best views per shell voxel, parallel to `layout.shell`.
    pub best_views: &'a [VoxelViews],
    pub lattice: &'a SubvolumeLattice,
    /// Current level-0 intrinsics.
    pub intrinsics: CameraIntrinsics,
    pub image_level: u32,
    pub weights: Weights,
    pub optimize_poses: bool,
    pub optimize_intrinsics: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermGroups {
    pub shading: GroupId,
    pub volumetric: GroupId,
    pub stabilization: GroupId,
    pub albedo: GroupId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct BlockCounts {
    pub shading_gradient: usize,
    pub volumetric: usize,
    pub stabilization: usize,
    pub albedo: usize,
}

pub struct StageProblem<'a> {
    pub problem: Problem<'a>,
    pub groups: TermGroups,
    pub x0: Vec<f64>,
    pub counts: BlockCounts,
    /// Shell voxel of every block, in block order.
    pub block_voxels: Vec<VoxelKey>,
}

/// Assembles all residual blocks of one stage. Group scales start at the
/// first entry of each schedule.
pub fn build_problem<'a>(input: &StageInput<'a>) -> Result<StageProblem<'a>> {
    let layout = input.layout;
    if layout.shell.is_empty() {
        return Err(Error::EmptyShell);
    }
    input.weights.validate()?;
    if input.best_views.len() != layout.shell.len() {
        return Err(Error::InvalidInput("best views must parallel the shell".into()));
    }
    let sdf = input.sdf;
    let w = input.weights;
    let (lv, ls) = w.schedule(0, 1);
    let mut problem = Problem::new(layout.num_unknowns());
    let groups = TermGroups {
        shading: problem.add_group("shading_gradient", w.lambda_g.sqrt()),
        volumetric: problem.add_group("volumetric", lv.sqrt()),
        stabilization: problem.add_group("stabilization", ls.sqrt()),
        albedo: problem.add_group(
            "albedo",
            if w.albedo_fixed() { 0.0 } else { w.lambda_a.sqrt() },
        ),
    };
    let x0 = layout.initial(sdf);
    let mut counts = BlockCounts::default();
    let mut block_voxels = Vec::new();

    let shading: Vec<Vec<(ShadingGradient<'a>, Vec<usize>)>> = (0..layout.shell.len())
        .into_par_iter()
        .map(|i| shading_blocks(input, &x0, i))
        .collect();
    for (i, blocks) in shading.into_iter().enumerate() {
        for (b, params) in blocks {
            problem.add_block(
                groups.shading,
                Box::new(AutoDiff::<_, SHADING_PARAMS>::new(b, params)),
            );
            block_voxels.push(layout.shell[i]);
            counts.shading_gradient += 1;
        }
    }

    for (i, &key) in layout.shell.iter().enumerate() {
        let nbs = key.neighbors6();
        let vals: Option<Vec<Result<usize, f64>>> = nbs
            .iter()
            .map(|n| match layout.shell_index(*n) {
                Some(j) => Some(Ok(layout.distance(j))),
                None => sdf.get(*n).map(|v| Err(v.d_refined)),
            })
            .collect();
        if let Some(vals) = vals {
            let arr: [Result<usize, f64>; 6] = vals.try_into().expect("six neighbors");
            problem.add_block(
                groups.volumetric,
                Box::new(LinearResidual::laplacian(layout.distance(i), &arr)),
            );
            block_voxels.push(key);
            counts.volumetric += 1;
        }
    }

    for (i, &key) in layout.shell.iter().enumerate() {
        let v = sdf.get(key).expect("shell voxel is allocated");
        problem.add_block(
            groups.stabilization,
            Box::new(LinearResidual::stabilization(layout.distance(i), v.d_raw)),
        );
        block_voxels.push(key);
        counts.stabilization += 1;
    }

    if layout.with_albedo {
        let chroma: Vec<[f64; 3]> = layout
            .shell
            .iter()
            .map(|k| chromaticity_of(sdf.get(*k).expect("allocated").color))
            .collect();
        for (i, &key) in layout.shell.iter().enumerate() {
            for axis in 0..3 {
                let Some(j) = layout.shell_index(key.step(axis, 1)) else {
                    continue;
                };
                let dg = (0..3)
                    .map(|c| (chroma[i][c] - chroma[j][c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let phi = chromaticity_kernel(dg, w.t_rob);
                let (ai, aj) = (layout.albedo(i).unwrap(), layout.albedo(j).unwrap());
                problem.add_block(groups.albedo, Box::new(LinearResidual::albedo_pair(ai, aj, phi)));
                block_voxels.push(key);
                counts.albedo += 1;
            }
        }
    }

    Ok(StageProblem {
        problem,
        groups,
        x0,
        counts,
        block_voxels,
    })
}

/// Shading-gradient blocks of shell voxel `i` with their global parameter
/// lists, one per usable best view. Local order: distance unknowns, albedo
/// unknowns, pose increment, intrinsic deltas.
pub fn shading_blocks<'a>(
    input: &StageInput<'a>,
    x0: &[f64],
    i: usize,
) -> Vec<(ShadingGradient<'a>, Vec<usize>)> {
    let layout = input.layout;
    let sdf = input.sdf;
    let key = layout.shell[i];
    if input.weights.lambda_g == 0.0 || input.best_views[i].is_empty() {
        return Vec::new();
    }
    let mut voxel_params = Vec::with_capacity(SHADING_PARAMS);
    let mut distances = [Slot::Fixed(0.0); 10];
    for (s, off) in distances.iter_mut().zip(DISTANCE_OFFSETS) {
        let nk = key.offset(off[0], off[1], off[2]);
        if let Some(j) = layout.shell_index(nk) {
            *s = Slot::Unknown(voxel_params.len());
            voxel_params.push(layout.distance(j));
        } else {
            match sdf.get(nk) {
                Some(v) => *s = Slot::Fixed(v.d_refined),
                None => return Vec::new(),
            }
        }
    }
    let mut albedo = [Slot::Fixed(1.0); 4];
    let mut centers = [[0.0; 3]; 4];
    let mut lighting = [[0.0; 9]; 4];
    for j in 0..4 {
        let off = DISTANCE_OFFSETS[j];
        let nk = key.offset(off[0], off[1], off[2]);
        let v = sdf.get(nk).expect("checked above");
        albedo[j] = match layout.shell_index(nk).and_then(|s| layout.albedo(s)) {
            Some(g) => {
                voxel_params.push(g);
                Slot::Unknown(voxel_params.len() - 1)
            }
            None => Slot::Fixed(intensity_from_rgb(v.albedo)),
        };
        let c = sdf.center(nk);
        centers[j] = [c.x, c.y, c.z];
        match input.lattice.interp(&c) {
            Ok(l) => lighting[j] = l,
            Err(_) => return Vec::new(),
        }
    }
    let n_voxel = voxel_params.len();
    let pose_local = input.optimize_poses.then_some(n_voxel);
    let intr_local = input
        .optimize_intrinsics
        .then_some(n_voxel + if input.optimize_poses { 6 } else { 0 });
    let level_scale = (1u32 << input.image_level) as f64;

    let mut out = Vec::new();
    for &(slot, weight) in &input.best_views[i] {
        let view = &input.views[slot];
        let pose = view.full.pose;
        let b = ShadingGradient {
            image: view.intensity,
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| pose.rotation[(r, c)])),
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
            intrinsics: input.intrinsics.params(),
            level_scale,
            voxel_size: sdf.voxel_size,
            centers,
            lighting,
            distances,
            albedo,
            pose: pose_local,
            intrinsic_deltas: intr_local,
            sqrt_weight: weight.sqrt(),
        };
        let mut params = voxel_params.clone();
        if input.optimize_poses {
            params.extend(layout.pose(slot)..layout.pose(slot) + 6);
        }
        if input.optimize_intrinsics {
            params.extend(layout.intrinsics()..layout.intrinsics() + 7);
        }
        let local: Vec<f64> = params.iter().map(|&g| x0[g]).collect();
        if usable(&b, &local, view, sdf.voxel_size) {
            out.push((b, params));
        }
    }
    out
}

/// Build-time validity of a block at the current unknowns: defined normals,
/// all four iso-points visible with intensity samples on the observed
/// surface, and a well-conditioned gradient fit.
fn usable(b: &ShadingGradient, local: &[f64], view: &StageView, voxel_size: f64) -> bool {
    let proj = b.project(local);
    for ps in &proj {
        if !(ps.normal_norm >= 1e-9 && ps.depth > 1e-6) || !ps.pixel.iter().all(|v| v.is_finite()) {
            return false;
        }
        let iso = Vector3::from(ps.iso);
        if !visible(&iso, &view.full, voxel_size) {
            return false;
        }
    }
    // Every bilinear sample must lie inside the image on the observed surface.
    let tol = visibility_threshold(voxel_size);
    let (w, h) = (view.intensity.width as f64, view.intensity.height as f64);
    for ps in &proj {
        let u = ps.pixel;
        if !(u[0] >= 0.0 && u[1] >= 0.0 && u[0] <= w - 1.0 && u[1] <= h - 1.0) {
            return false;
        }
        let (x0, y0) = (u[0].floor() as usize, u[1].floor() as usize);
        for y in y0..(y0 + 2).min(view.depth.height()) {
            for x in x0..(x0 + 2).min(view.depth.width()) {
                match view.depth.get(x, y) {
                    Some(z) if (z - ps.depth).abs() < tol => {}
                    _ => return false,
                }
            }
        }
    }
    let (lmin, trace) = ShadingGradient::fit_conditioning(&proj.map(|q| q.pixel));
    lmin > 1e-2 && lmin > 1e-3 * trace
}
