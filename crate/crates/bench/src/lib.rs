//! Shared fixtures for the benchmarks.

use shadefuse_core::camera::{CameraIntrinsics, Pose};
use shadefuse_core::frames::{build_pyramid, Frame, FramePyramid};
use shadefuse_core::lighting::{estimate_lighting, SubvolumeLattice};
use shadefuse_core::refine::{best_views, StageView, VoxelViews};
use shadefuse_core::sampling::{recolorize, View};
use shadefuse_core::sdf::{SparseSdf, VoxelKey};
use shadefuse_core::synth::{synthesize, NoiseSpec, OrbitParams, SceneSpec};

pub const VOXEL: f64 = 0.004;
pub const TRUNCATION: f64 = 5.0;

/// Noisy bumpy sphere, 10 views at 160x120.
pub fn frames() -> (Vec<Frame>, CameraIntrinsics) {
    let p = OrbitParams {
        views: 10,
        width: 160,
        height: 120,
        focal: 150.0,
        ..Default::default()
    };
    let scene = SceneSpec::bumpy_sphere(&p, NoiseSpec::default(), 1);
    let data = synthesize(&scene).expect("scene synthesizes");
    (data.frames, data.intrinsics)
}

/// Fused, recolorized grid with its thin shell, lighting and best views.
pub struct Stage {
    pub intrinsics: CameraIntrinsics,
    pub pyramids: Vec<FramePyramid>,
    pub poses: Vec<Pose>,
    pub sdf: SparseSdf,
    pub shell: Vec<VoxelKey>,
    pub lattice: SubvolumeLattice,
    pub best: Vec<VoxelViews>,
}

impl Stage {
    pub fn new() -> Self {
        let (frames, intrinsics) = frames();
        let pyramids: Vec<FramePyramid> = frames
            .iter()
            .map(|f| build_pyramid(f, &intrinsics, 1).expect("pyramid"))
            .collect();
        let mut sdf = SparseSdf::fuse(&frames, &intrinsics, VOXEL, TRUNCATION).expect("fusion");
        let shell = sdf.thin_shell(1.0);
        let mut s = Self {
            intrinsics,
            pyramids,
            poses: frames.iter().map(|f| f.pose).collect(),
            sdf: sdf.clone(),
            shell,
            lattice: SubvolumeLattice::global([0.0; 9]),
            best: Vec::new(),
        };
        let keys = sdf.sorted_keys();
        recolorize(&mut sdf, &keys, &s.views(), 5);
        let template = SubvolumeLattice::covering_sdf(&sdf, 0.1).expect("lattice");
        s.lattice = estimate_lighting(&sdf, &s.shell, &template, 0.01).expect("lighting");
        s.best = best_views(&sdf, &s.shell, &s.views(), 5);
        s.sdf = sdf;
        s
    }

    pub fn views(&self) -> Vec<View<'_>> {
        self.pyramids
            .iter()
            .zip(&self.poses)
            .enumerate()
            .map(|(i, (p, pose))| View::from_level(i, &p.levels[0], *pose))
            .collect()
    }

    pub fn stage_views<'a>(&'a self, views: &[View<'a>]) -> Vec<StageView<'a>> {
        views
            .iter()
            .zip(&self.pyramids)
            .map(|(v, p)| StageView {
                intensity: &p.levels[0].intensity,
                depth: &p.levels[0].depth,
                full: *v,
            })
            .collect()
    }
}

impl Default for Stage {
    fn default() -> Self {
        Self::new()
    }
}
