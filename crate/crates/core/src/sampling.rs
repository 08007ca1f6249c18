//! Voxel observations in keyframes: visibility, view weights, colorization.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::frames::{intensity_from_rgb, ColorImage, DepthImage, Frame, GrayImage, PyramidLevel};
use crate::sdf::{SparseSdf, VoxelKey};

/// Borrowed images of one keyframe at one pyramid level, with its current pose.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub index: usize,
    pub color: &'a ColorImage,
    pub intensity: &'a GrayImage,
    pub depth: &'a DepthImage,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl<'a> View<'a> {
    pub fn from_frame(frame: &'a Frame, intrinsics: CameraIntrinsics) -> Self {
        Self {
            index: frame.index,
            color: &frame.color,
            intensity: &frame.intensity,
            depth: &frame.depth,
            pose: frame.pose,
            intrinsics,
        }
    }

    pub fn from_level(index: usize, level: &'a PyramidLevel, pose: Pose) -> Self {
        Self {
            index,
            color: &level.color,
            intensity: &level.intensity,
            depth: &level.depth,
            pose,
            intrinsics: level.intrinsics,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub frame_index: usize,
    pub color: [f64; 3],
    pub intensity: f64,
    pub weight: f64,
}

/// Depth-compatibility threshold `max(2·voxel_size, 1 cm)`.
pub fn visibility_threshold(voxel_size: f64) -> f64 {
    (2.0 * voxel_size).max(0.01)
}

/// Pixel position of a visible world point, or `None`.
pub fn visible_at(v0: &Vector3<f64>, view: &View, voxel_size: f64) -> Option<nalgebra::Vector2<f64>> {
    let pc = view.pose.inverse_transform(v0);
    if pc.z <= 0.0 {
        return None;
    }
    let px = view.intrinsics.project(&pc).ok()?;
    let zd = view.depth.sample(px.x, px.y).ok()??;
    ((pc.z - zd).abs() < visibility_threshold(voxel_size)).then_some(px)
}

pub fn visible(v0: &Vector3<f64>, view: &View, voxel_size: f64) -> bool {
    visible_at(v0, view, voxel_size).is_some()
}

/// `cos θ / d²` with `θ` between the outward normal and the direction to the camera.
pub fn observation_weight(v0: &Vector3<f64>, outward_normal: &Vector3<f64>, pose: &Pose) -> Result<f64> {
    let to_cam = pose.translation - v0;
    let d = to_cam.norm();
    if d < 1e-6 {
        return Err(Error::Degenerate(format!("point is {d} m from the camera center")));
    }
    let c = outward_normal.dot(&to_cam) / (d * outward_normal.norm());
    Ok(c.max(0.0) / (d * d))
}

/// Observations of an iso-surface point, best weight first, at most `t_best`.
pub fn collect_observations(
    v0: &Vector3<f64>,
    outward_normal: &Vector3<f64>,
    views: &[View],
    voxel_size: f64,
    t_best: usize,
) -> Vec<Observation> {
    let mut out: Vec<Observation> = views
        .iter()
        .filter_map(|view| {
            let px = visible_at(v0, view, voxel_size)?;
            let weight = observation_weight(v0, outward_normal, &view.pose).ok()?;
            if weight <= 0.0 {
                return None;
            }
            let color = view.color.sample(px.x, px.y).ok()?;
            let intensity = view.intensity.sample(px.x, px.y).ok()?;
            Some(Observation {
                frame_index: view.index,
                color,
                intensity,
                weight,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.frame_index.cmp(&b.frame_index))
    });
    out.truncate(t_best);
    out
}

/// Per-channel weighted mean.
pub fn colorize(obs: &[Observation]) -> Result<[f64; 3]> {
    let wsum: f64 = obs.iter().map(|o| o.weight).sum();
    if obs.is_empty() || !(wsum > 0.0) {
        return Err(Error::Unobserved);
    }
    let mut c = [0.0; 3];
    for o in obs {
        for ch in 0..3 {
            c[ch] += o.weight * o.color[ch];
        }
    }
    Ok(c.map(|v| v / wsum))
}

/// `C / I` per channel; neutral for near-black colors.
pub fn chromaticity(color: [f64; 3], intensity: f64) -> [f64; 3] {
    if intensity < 1e-4 {
        return [1.0; 3];
    }
    color.map(|c| c / intensity)
}

pub fn chromaticity_of(color: [f64; 3]) -> [f64; 3] {
    chromaticity(color, intensity_from_rgb(color))
}

/// Recomputes colors of the given voxels from their best views; unobserved voxels keep
/// their color. Returns the number of recolored voxels.
pub fn recolorize(sdf: &mut SparseSdf, keys: &[VoxelKey], views: &[View], t_best: usize) -> usize {
    let s = sdf.voxel_size;
    let sdf_ref = &*sdf;
    let colors: Vec<Option<(VoxelKey, [f64; 3])>> = keys
        .par_iter()
        .map(|&k| {
            let n = sdf_ref.normal(k).ok()?;
            let v0 = sdf_ref.iso_project(k).ok()?;
            let obs = collect_observations(&v0, &(-n), views, s, t_best);
            colorize(&obs).ok().map(|c| (k, c))
        })
        .collect();
    let mut count = 0;
    for (k, c) in colors.into_iter().flatten() {
        if let Some(v) = sdf.get_mut(k) {
            v.color = c;
            count += 1;
        }
    }
    count
}
