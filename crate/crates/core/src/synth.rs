//! Synthetic RGB-D scenes: analytic shapes rendered under SH lighting, noise injection,
//! and fused reference meshes.

use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::frames::{ColorImage, Dataset, DepthImage, Frame, Image};
use crate::lighting::{sh_basis, dot9, ShCoeffs, SubvolumeLattice};
use crate::mesh::{marching_cubes, TriMesh};
use crate::sdf::SparseSdf;

pub const TRACE_STEPS: usize = 128;
pub const HIT_TOLERANCE: f64 = 1e-5;
pub const BILATERAL_SIGMA_SPATIAL: f64 = 2.0;
pub const BILATERAL_SIGMA_RANGE: f64 = 0.01;
/// Truncation band of reference fusion, in voxels.
pub const REFERENCE_TRUNCATION: f64 = 5.0;

/// Analytic surface; `distance` is positive outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
    },
    /// Sphere displaced by `A·sin(f·ux)·sin(f·uy)·sin(f·uz)` along the radial direction `u`.
    BumpySphere {
        center: [f64; 3],
        radius: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Shape {
    /// Unnormalized implicit value and its gradient.
    fn implicit(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Shape::Sphere { center, radius } => {
                let q = p - Vector3::from(*center);
                let r = q.norm();
                let g = if r > 0.0 { q / r } else { Vector3::z() };
                (r - radius, g)
            }
            Shape::Plane { point, normal } => {
                let n = Vector3::from(*normal).normalize();
                ((p - Vector3::from(*point)).dot(&n), n)
            }
            Shape::BumpySphere {
                center,
                radius,
                amplitude,
                frequency,
            } => {
                let q = p - Vector3::from(*center);
                let r = q.norm();
                if r < 1e-12 {
                    return (-radius, Vector3::z());
                }
                let u = q / r;
                let f = *frequency;
                let (s, c) = (u.map(|v| (f * v).sin()), u.map(|v| (f * v).cos()));
                let h = amplitude * s.x * s.y * s.z;
                let dh_du = Vector3::new(c.x * s.y * s.z, s.x * c.y * s.z, s.x * s.y * c.z) * (amplitude * f);
                let proj = Matrix3::identity() - u * u.transpose();
                let grad = u - proj * dh_du / r;
                (r - radius - h, grad)
            }
        }
    }

    /// Signed distance, normalized to first order so the gradient has unit norm at the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let (g, grad) = self.implicit(p);
        g / grad.norm()
    }

    /// Outward unit normal.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.implicit(p).1.normalize()
    }

    pub fn center(&self) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, .. } | Shape::BumpySphere { center, .. } => Vector3::from(*center),
            Shape::Plane { point, .. } => Vector3::from(*point),
        }
    }

    /// Largest `|‖∇d‖ − 1|` by central differences over points within `band` of the surface.
    pub fn gradient_deviation(&self, band: f64, samples: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = self.center();
        let radius = match self {
            Shape::Sphere { radius, .. } | Shape::BumpySphere { radius, .. } => *radius,
            Shape::Plane { .. } => 0.0,
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let dir = random_unit(&mut rng);
            let mut p = c + dir * radius;
            if let Shape::Plane { normal, .. } = self {
                let n = Vector3::from(*normal).normalize();
                p = c + (dir - n * dir.dot(&n)) * 0.1;
            }
            // Snap to the surface along the normal, then offset within the band.
            for _ in 0..5 {
                p -= self.normal(&p) * self.distance(&p);
            }
            let off: f64 = rng.random_range(-band..=band);
            p += self.normal(&p) * off;
            let mut g = Vector3::zeros();
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                g[a] = (self.distance(&(p + e)) - self.distance(&(p - e))) / (2.0 * h);
            }
            worst = worst.max((g.norm() - 1.0).abs());
        }
        worst
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlbedoField {
    Uniform { rgb: [f64; 3] },
    /// `a` where `p·axis < offset`, `b` elsewhere.
    TwoTone {
        a: [f64; 3],
        b: [f64; 3],
        axis: [f64; 3],
        offset: f64,
    },
}

impl AlbedoField {
    pub fn at(&self, p: &Vector3<f64>) -> [f64; 3] {
        match self {
            AlbedoField::Uniform { rgb } => *rgb,
            AlbedoField::TwoTone { a, b, axis, offset } => {
                if p.dot(&Vector3::from(*axis)) < *offset {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneLighting {
    Global { coeffs: ShCoeffs },
    Lattice {
        t_sv: f64,
        dims: [usize; 3],
        origin: [f64; 3],
        coeffs: Vec<ShCoeffs>,
    },
}

impl SceneLighting {
    pub fn lattice(&self) -> SubvolumeLattice {
        match self {
            SceneLighting::Global { coeffs } => SubvolumeLattice::global(*coeffs),
            SceneLighting::Lattice {
                t_sv,
                dims,
                origin,
                coeffs,
            } => SubvolumeLattice {
                t_sv: *t_sv,
                dims: *dims,
                origin: Vector3::from(*origin),
                coeffs: coeffs.clone(),
            },
        }
    }

    pub fn from_lattice(l: &SubvolumeLattice) -> Self {
        if l.dims == [1, 1, 1] {
            SceneLighting::Global { coeffs: l.coeffs[0] }
        } else {
            SceneLighting::Lattice {
                t_sv: l.t_sv,
                dims: l.dims,
                origin: l.origin.into(),
                coeffs: l.coeffs.clone(),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Depth noise standard deviation (m).
    pub depth_sigma: f64,
    /// Pose rotation noise standard deviation (degrees).
    pub rot_sigma_deg: f64,
    /// Pose translation noise standard deviation per axis (m).
    pub trans_sigma: f64,
    /// Color noise standard deviation per channel (unit intensity).
    pub intensity_sigma: f64,
    pub bilateral: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            depth_sigma: 0.0,
            rot_sigma_deg: 0.0,
            trans_sigma: 0.0,
            intensity_sigma: 0.0,
            bilateral: false,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            depth_sigma: 0.002,
            rot_sigma_deg: 0.25,
            trans_sigma: 0.001,
            intensity_sigma: 0.0,
            bilateral: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let q = p.quaternion();
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: p.translation.into(),
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        let [w, x, y, z] = r.rotation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Pose::from_quaternion(Vector3::from(r.translation), q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraIntrinsics> for IntrinsicsRecord {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            k1: k.k1,
            k2: k.k2,
            p1: k.p1,
            width: k.width,
            height: k.height,
        }
    }
}

impl From<&IntrinsicsRecord> for CameraIntrinsics {
    fn from(r: &IntrinsicsRecord) -> Self {
        CameraIntrinsics {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            k1: r.k1,
            k2: r.k2,
            p1: r.p1,
            width: r.width,
            height: r.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub albedo: AlbedoField,
    pub lighting: SceneLighting,
    pub poses: Vec<PoseRecord>,
    pub intrinsics: IntrinsicsRecord,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Parameters of the default orbiting-camera scene.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitParams {
    pub radius: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub views: usize,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self {
            radius: 0.1,
            amplitude: 0.002,
            frequency: 8.0,
            views: 20,
            distance: 0.3,
            width: 320,
            height: 240,
            focal: 300.0,
        }
    }
}

/// Lighting with a dominant direction over an ambient term.
pub fn default_lighting() -> ShCoeffs {
    [1.9, 0.35, 0.45, 0.3, 0.05, -0.04, 0.06, 0.03, -0.05]
}

/// `n` cameras on a Fibonacci sphere of radius `distance` around `target`, all looking at it.
pub fn fibonacci_poses(n: usize, target: Vector3<f64>, distance: f64) -> Vec<Pose> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            let dir = Vector3::new(phi.cos() * r, y, phi.sin() * r);
            let up = if dir.y.abs() > 0.9 { Vector3::z() } else { Vector3::y() };
            Pose::look_at(target + dir * distance, target, up)
        })
        .collect()
}

impl SceneSpec {
    pub fn orbit(shape: Shape, p: &OrbitParams, noise: NoiseSpec, seed: u64) -> Self {
        let target = shape.center();
        let intr = CameraIntrinsics::pinhole(
            p.focal,
            p.focal,
            (p.width as f64 - 1.0) * 0.5,
            (p.height as f64 - 1.0) * 0.5,
            p.width,
            p.height,
        );
        Self {
            shape,
            albedo: AlbedoField::Uniform { rgb: [0.8, 0.7, 0.6] },
            lighting: SceneLighting::Global {
                coeffs: default_lighting(),
            },
            poses: fibonacci_poses(p.views, target, p.distance)
                .iter()
                .map(PoseRecord::from)
                .collect(),
            intrinsics: IntrinsicsRecord::from(&intr),
            noise,
            seed,
        }
    }

    pub fn bumpy_sphere(p: &OrbitParams, noise: NoiseSpec, seed: u64) -> Self {
        let shape = Shape::BumpySphere {
            center: [0.0; 3],
            radius: p.radius,
            amplitude: p.amplitude,
            frequency: p.frequency,
        };
        Self::orbit(shape, p, noise, seed)
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::from(&self.intrinsics)
    }

    pub fn true_poses(&self) -> Vec<Pose> {
        self.poses.iter().map(Pose::from).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.camera().validate()?;
        if self.poses.is_empty() {
            return Err(Error::InvalidInput("scene has no camera poses".into()));
        }
        let dev = self.shape.gradient_deviation(0.005, 400);
        if dev > 0.01 {
            return Err(Error::InvalidInput(format!(
                "shape is not a signed distance within 1% (gradient deviation {dev:.4})"
            )));
        }
        for (i, pose) in self.true_poses().iter().enumerate() {
            if self.shape.distance(&pose.translation) <= 0.0 {
                return Err(Error::InvalidInput(format!("camera {i} is inside the surface")));
            }
        }
        let n = self.noise.clone();
        if [n.depth_sigma, n.rot_sigma_deg, n.trans_sigma, n.intensity_sigma]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::InvalidInput("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("scene.json: {e}")))
    }
}

/// Unit ray direction (camera frame) through pixel `(x, y)`.
fn pixel_ray(intr: &CameraIntrinsics, x: usize, y: usize) -> Result<Vector3<f64>> {
    let p = intr.unproject(&Vector2::new(x as f64, y as f64), 1.0)?;
    Ok(p.normalize())
}

/// Sphere traces one ray; returns the travel distance at the hit.
fn trace(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let d = shape.distance(&(origin + dir * t));
        if d.abs() < HIT_TOLERANCE {
            return Some(t);
        }
        t += d;
        if t < 0.0 || t > t_max {
            return None;
        }
    }
    None
}

/// Noise-free color and depth of `scene` seen from `pose`.
pub fn render_frame(scene: &SceneSpec, index: usize, pose: &Pose, intr: &CameraIntrinsics) -> Result<Frame> {
    let lattice = scene.lighting.lattice();
    let (w, h) = (intr.width, intr.height);
    let t_max = 10.0 * ((pose.translation - scene.shape.center()).norm() + 1.0);
    let pixels: Vec<Result<([f32; 3], f32)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let ray_c = pixel_ray(intr, x, y)?;
            let dir = pose.rotation * ray_c;
            let Some(t) = trace(&scene.shape, &pose.translation, &dir, t_max) else {
                return Ok(([0.0; 3], 0.0));
            };
            let p = pose.translation + dir * t;
            let n = scene.shape.normal(&p);
            let b = dot9(&lattice.interp(&p)?, &sh_basis(&n)?);
            let a = scene.albedo.at(&p);
            let c = a.map(|v| (v * b).clamp(0.0, 1.0) as f32);
            Ok((c, (t * ray_c.z) as f32))
        })
        .collect();
    let mut color = Image::filled(w, h, [0.0f32; 3]);
    let mut depth = Image::filled(w, h, 0.0f32);
    for (i, px) in pixels.into_iter().enumerate() {
        let (c, d) = px?;
        color.data[i] = c;
        depth.data[i] = d;
    }
    Frame::new(index, color, DepthImage(depth), *pose)
}

/// All views of the scene at their true poses, without noise.
pub fn render_all(scene: &SceneSpec) -> Result<Vec<Frame>> {
    let intr = scene.camera();
    scene
        .true_poses()
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(scene, i, p, &intr))
        .collect()
}

/// Edge-preserving smoothing of valid depth pixels; holes stay holes.
pub fn bilateral_filter(depth: &DepthImage, sigma_spatial: f64, sigma_range: f64) -> DepthImage {
    let img = &depth.0;
    let (w, h) = (img.width, img.height);
    let r = (2.0 * sigma_spatial).ceil() as isize;
    let data: Vec<f32> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let d0 = img.data[i] as f64;
            if d0 <= 0.0 {
                return 0.0;
            }
            let (mut acc, mut wsum) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let d = img.get(xx as usize, yy as usize) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let ds = (dx * dx + dy * dy) as f64 / (2.0 * sigma_spatial * sigma_spatial);
                    let dr = (d - d0) * (d - d0) / (2.0 * sigma_range * sigma_range);
                    let wgt = (-ds - dr).exp();
                    acc += wgt * d;
                    wsum += wgt;
                }
            }
            (acc / wsum) as f32
        })
        .collect();
    DepthImage(Image { width: w, height: h, data })
}

/// Pose with a rotation of `N(0, σ_rot)` degrees about a uniform axis through the camera
/// center and a per-axis `N(0, σ_t)` translation.
pub fn perturb_pose(pose: &Pose, rot_sigma_deg: f64, trans_sigma: f64, rng: &mut impl Rng) -> Pose {
    let axis = random_unit(rng);
    let angle = rng.sample::<f64, _>(StandardNormal) * rot_sigma_deg.to_radians();
    let dr = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle);
    let dt = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * trans_sigma;
    Pose::new(pose.rotation * dr.into_inner(), pose.translation + dt)
}

/// Applies the noise model frame by frame: bilateral depth smoothing, depth noise, pose
/// noise, color noise. Each frame draws from its own stream of a seeded ChaCha generator.
pub fn perturb(frames: &[Frame], noise: &NoiseSpec, seed: u64) -> Result<Vec<Frame>> {
    frames
        .par_iter()
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f.index as u64);
            let mut depth = if noise.bilateral {
                bilateral_filter(&f.depth, BILATERAL_SIGMA_SPATIAL, BILATERAL_SIGMA_RANGE)
            } else {
                f.depth.clone()
            };
            if noise.depth_sigma > 0.0 {
                let dist = Normal::new(0.0, noise.depth_sigma).expect("finite sigma");
                for d in depth.0.data.iter_mut() {
                    if *d > 0.0 {
                        *d = (*d as f64 + dist.sample(&mut rng)).max(1e-4) as f32;
                    }
                }
            }
            let pose = if noise.rot_sigma_deg > 0.0 || noise.trans_sigma > 0.0 {
                perturb_pose(&f.pose, noise.rot_sigma_deg, noise.trans_sigma, &mut rng)
            } else {
                f.pose
            };
            let mut color = f.color.clone();
            if noise.intensity_sigma > 0.0 {
                let dist = Normal::new(0.0, noise.intensity_sigma).expect("finite sigma");
                for c in color.data.iter_mut() {
                    for v in c.iter_mut() {
                        *v = (*v as f64 + dist.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            Frame::new(f.index, color, depth, pose)
        })
        .collect()
}

/// Rounds color to 8 bits and depth to whole millimeters, as stored on disk.
pub fn quantize(frame: &Frame) -> Result<Frame> {
    let color: ColorImage = frame.color.map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0));
    let depth = DepthImage(frame.depth.0.map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) / 1000.0));
    Frame::new(frame.index, color, depth, frame.pose)
}

/// Rendered, perturbed and quantized dataset; identical to what `write_dataset` then
/// `load_dataset` produce.
pub fn synthesize(scene: &SceneSpec) -> Result<Dataset> {
    scene.validate()?;
    let clean = render_all(scene)?;
    let noisy = perturb(&clean, &scene.noise, scene.seed)?;
    let frames = noisy.iter().map(quantize).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        intrinsics: scene.camera(),
        frames,
    })
}

/// Fuses frames into a fresh grid with truncation `REFERENCE_TRUNCATION` voxels.
pub fn fuse_frames(frames: &[Frame], intr: &CameraIntrinsics, voxel_size: f64) -> Result<SparseSdf> {
    SparseSdf::fuse(frames, intr, voxel_size, REFERENCE_TRUNCATION)
}

/// Reference mesh: noise-free frames at true poses, fused at `voxel_size` and extracted.
pub fn ground_truth_mesh(scene: &SceneSpec, voxel_size: f64) -> Result<TriMesh> {
    let frames = render_all(scene)?;
    let sdf = fuse_frames(&frames, &scene.camera(), voxel_size)?;
    Ok(marching_cubes(&sdf))
}

/// Writes the dataset layout plus `scene.json` and `lighting_gt.txt`.
pub fn write_scene_dataset(dir: &Path, scene: &SceneSpec, data: &Dataset) -> Result<()> {
    crate::frames::write_dataset(dir, data)?;
    let sp = dir.join("scene.json");
    std::fs::write(&sp, scene.to_json()).map_err(|e| Error::io(&sp, e))?;
    scene.lighting.lattice().write(&dir.join("lighting_gt.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> OrbitParams {
        OrbitParams {
            views: 6,
            width: 80,
            height: 60,
            focal: 75.0,
            ..Default::default()
        }
    }

    #[test]
    fn plane_facing_camera_renders_constant_band_zero() {
        let c = 2.0;
        let a = 0.5;
        let p = small_params();
        let mut scene = SceneSpec::orbit(
            Shape::Plane {
                point: [0.0, 0.0, 1.0],
                normal: [0.0, 0.0, -1.0],
            },
            &p,
            NoiseSpec::none(),
            1,
        );
        scene.albedo = AlbedoField::Uniform { rgb: [a; 3] };
        scene.lighting = SceneLighting::Global {
            coeffs: [c, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let f = render_frame(&scene, 0, &Pose::identity(), &scene.camera()).unwrap();
        let want = (a * c * 0.282095) as f32;
        assert!(f.color.data.iter().all(|px| (px[0] - want).abs() < 1e-6));
        let center = f.depth.0.get(40, 30);
        assert!((center - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sphere_center_depth_and_background() {
        let p = small_params();
        let scene = SceneSpec::orbit(
            Shape::Sphere {
                center: [0.0, 0.0, 0.5],
                radius: 0.1,
            },
            &p,
            NoiseSpec::none(),
            1,
        );
        let intr = CameraIntrinsics::pinhole(75.0, 75.0, 40.0, 30.0, 81, 61);
        let f = render_frame(&scene, 0, &Pose::identity(), &intr).unwrap();
        assert!((f.depth.0.get(40, 30) as f64 - 0.4).abs() < 1e-4);
        assert_eq!(f.depth.0.get(0, 0), 0.0);
        assert_eq!(f.color.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn shading_matches_lighting_model_at_every_hit() {
        let scene = SceneSpec::bumpy_sphere(&small_params(), NoiseSpec::none(), 1);
        let intr = scene.camera();
        let pose = scene.true_poses()[2];
        let f = render_frame(&scene, 2, &pose, &intr).unwrap();
        let l = scene.lighting.lattice();
        let mut hits = 0;
        for y in 0..intr.height {
            for x in 0..intr.width {
                let Some(d) = f.depth.get(x, y) else { continue };
                hits += 1;
                let pc = intr.unproject(&Vector2::new(x as f64, y as f64), d).unwrap();
                let pw = pose.transform(&pc);
                // Recompute from the rendered depth; f32 depth storage limits agreement.
                let n = scene.shape.normal(&pw);
                let b = dot9(&l.interp(&pw).unwrap(), &sh_basis(&n).unwrap());
                let want = (0.8 * b).clamp(0.0, 1.0);
                assert!((f.color.get(x, y)[0] as f64 - want).abs() < 1e-4, "{x},{y}");
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn bumpy_sphere_is_a_signed_distance_near_the_surface() {
        let scene = SceneSpec::bumpy_sphere(&OrbitParams::default(), NoiseSpec::none(), 1);
        let dev = scene.shape.gradient_deviation(0.005, 2000);
        assert!(dev < 0.01, "{dev}");
        scene.validate().unwrap();
    }

    #[test]
    fn zero_noise_without_filter_is_identity() {
        let scene = SceneSpec::bumpy_sphere(&small_params(), NoiseSpec::none(), 3);
        let clean = render_all(&scene).unwrap();
        let same = perturb(&clean, &NoiseSpec::none(), 3).unwrap();
        for (a, b) in clean.iter().zip(&same) {
            assert_eq!(a.depth.0.data, b.depth.0.data);
            assert_eq!(a.color.data, b.color.data);
            assert_eq!(a.pose, b.pose);
        }
        let filtered = perturb(
            &clean,
            &NoiseSpec {
                bilateral: true,
                ..NoiseSpec::none()
            },
            3,
        )
        .unwrap();
        for (a, b) in clean.iter().zip(&filtered) {
            assert_eq!(a.color.data, b.color.data);
            assert_eq!(a.pose, b.pose);
            for (x, y) in a.depth.0.data.iter().zip(&b.depth.0.data) {
                assert_eq!(*x == 0.0, *y == 0.0);
            }
        }
    }

    #[test]
    fn depth_noise_has_requested_deviation_and_is_reproducible() {
        let p = OrbitParams {
            views: 4,
            ..Default::default()
        };
        let scene = SceneSpec::bumpy_sphere(&p, NoiseSpec::none(), 3);
        let clean = render_all(&scene).unwrap();
        let noise = NoiseSpec {
            depth_sigma: 0.002,
            ..NoiseSpec::none()
        };
        let a = perturb(&clean, &noise, 11).unwrap();
        let b = perturb(&clean, &noise, 11).unwrap();
        let (mut n, mut s2) = (0usize, 0.0);
        for (c, (x, y)) in clean.iter().zip(a.iter().zip(&b)) {
            assert_eq!(x.depth.0.data, y.depth.0.data);
            for (d0, d1) in c.depth.0.data.iter().zip(&x.depth.0.data) {
                if *d0 > 0.0 {
                    let e = (*d1 - *d0) as f64;
                    s2 += e * e;
                    n += 1;
                }
            }
        }
        assert!(n >= 100_000, "{n}");
        let std = (s2 / n as f64).sqrt();
        assert!((std - 0.002).abs() < 0.05 * 0.002, "{std}");
    }

    #[test]
    fn pose_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let (mut sa, mut st) = (0.0, 0.0);
        for _ in 0..n {
            let p = perturb_pose(&Pose::identity(), 0.5, 0.002, &mut rng);
            let a = Pose::identity().rotation_angle_deg(&p);
            sa += a * a;
            st += p.translation.norm_squared();
        }
        assert!(((sa / n as f64).sqrt() - 0.5).abs() < 0.05 * 0.5);
        assert!(((st / (3 * n) as f64).sqrt() - 0.002).abs() < 0.05 * 0.002);
    }

    #[test]
    fn sphere_reference_mesh_is_accurate_and_deterministic() {
        let p = OrbitParams {
            views: 12,
            amplitude: 0.0,
            ..Default::default()
        };
        let scene = SceneSpec::orbit(
            Shape::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            },
            &p,
            NoiseSpec::none(),
            1,
        );
        let s = 0.004;
        let m = ground_truth_mesh(&scene, s).unwrap();
        assert!(m.vertices.len() > 1000);
        let rms = (m.vertices.iter().map(|v| (v.norm() - 0.1).powi(2)).sum::<f64>() / m.vertices.len() as f64).sqrt();
        assert!(rms < s, "rms {rms}");
        assert_eq!(m, ground_truth_mesh(&scene, s).unwrap());
    }

    #[test]
    fn scene_json_round_trips() {
        let scene = SceneSpec::bumpy_sphere(&small_params(), NoiseSpec::default(), 42);
        let back = SceneSpec::from_json(&scene.to_json()).unwrap();
        assert_eq!(back, scene);
        let text = scene.to_json();
        for key in ["bumpy_sphere", "amplitude", "frequency", "depth_sigma", "rot_sigma_deg", "seed", "fx"] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn synthesized_dataset_survives_disk_round_trip() {
        let scene = SceneSpec::bumpy_sphere(&small_params(), NoiseSpec::default(), 9);
        let data = synthesize(&scene).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_dataset(dir.path(), &scene, &data).unwrap();
        let back = crate::frames::load_dataset(dir.path()).unwrap();
        assert_eq!(back.frames.len(), data.frames.len());
        for (a, b) in data.frames.iter().zip(&back.frames) {
            for (x, y) in a.color.data.iter().zip(&b.color.data) {
                for c in 0..3 {
                    assert!((x[c] - y[c]).abs() < 1e-6);
                }
            }
            for (x, y) in a.depth.0.data.iter().zip(&b.depth.0.data) {
                assert!((x - y).abs() < 1e-6);
            }
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-9);
        }
        assert!(dir.path().join("scene.json").is_file());
        assert!(dir.path().join("lighting_gt.txt").is_file());
    }
}
