//! Sparse truncated signed distance field.
//!
//! Distances are positive behind the observed surface (camera-space depth of the
//! voxel minus the measured depth), so [`SparseSdf::normal`] points into the
//! object and the outward surface normal is its negation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::frames::Frame;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"ISDF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    #[inline]
    pub fn offset(&self, di: i32, dj: i32, dk: i32) -> Self {
        Self::new(self.i + di, self.j + dj, self.k + dk)
    }

    /// Offset along axis `a` (0 = i, 1 = j, 2 = k).
    #[inline]
    pub fn step(&self, axis: usize, d: i32) -> Self {
        match axis {
            0 => self.offset(d, 0, 0),
            1 => self.offset(0, d, 0),
            _ => self.offset(0, 0, d),
        }
    }

    pub fn neighbors6(&self) -> [VoxelKey; 6] {
        [
            self.offset(1, 0, 0),
            self.offset(-1, 0, 0),
            self.offset(0, 1, 0),
            self.offset(0, -1, 0),
            self.offset(0, 0, 1),
            self.offset(0, 0, -1),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    pub d_raw: f64,
    pub weight: f64,
    pub color: [f64; 3],
    pub albedo: [f64; 3],
    pub d_refined: f64,
}

impl Default for Voxel {
    fn default() -> Self {
        Self {
            d_raw: 0.0,
            weight: 0.0,
            color: [0.0; 3],
            albedo: [1.0; 3],
            d_refined: 0.0,
        }
    }
}

impl Voxel {
    pub fn with_distance(d: f64) -> Self {
        Self {
            d_raw: d,
            d_refined: d,
            weight: 1.0,
            ..Default::default()
        }
    }
}

/// `min(|d|, t)·sgn(d)` with `sgn(0) = +1`.
pub fn truncate(d: f64, t_trunc: f64) -> f64 {
    let s = if d < 0.0 { -1.0 } else { 1.0 };
    d.abs().min(t_trunc) * s
}

#[derive(Clone, Debug)]
pub struct SparseSdf {
    voxels: FxHashMap<VoxelKey, Voxel>,
    pub voxel_size: f64,
    pub t_trunc: f64,
    pub origin: Vector3<f64>,
}

impl SparseSdf {
    pub fn new(voxel_size: f64, t_trunc: f64, origin: Vector3<f64>) -> Result<Self> {
        if !(voxel_size > 0.0) || !(t_trunc >= voxel_size) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "voxel_size {voxel_size} must be positive and t_trunc {t_trunc} at least voxel_size"
            )));
        }
        Ok(Self {
            voxels: FxHashMap::default(),
            voxel_size,
            t_trunc,
            origin,
        })
    }

    /// Grid populated from an explicit field over `keys`, with weight 1 and `d_refined = d_raw`.
    pub fn from_field(
        voxel_size: f64,
        t_trunc: f64,
        origin: Vector3<f64>,
        keys: impl IntoIterator<Item = VoxelKey>,
        mut f: impl FnMut(VoxelKey, Vector3<f64>) -> f64,
    ) -> Result<Self> {
        let mut sdf = Self::new(voxel_size, t_trunc, origin)?;
        for key in keys {
            let d = f(key, sdf.center(key));
            sdf.voxels.insert(key, Voxel::with_distance(d));
        }
        Ok(sdf)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, key: VoxelKey) -> Option<&Voxel> {
        self.voxels.get(&key)
    }

    pub fn get_mut(&mut self, key: VoxelKey) -> Option<&mut Voxel> {
        self.voxels.get_mut(&key)
    }

    pub fn insert(&mut self, key: VoxelKey, voxel: Voxel) {
        self.voxels.insert(key, voxel);
    }

    pub fn remove(&mut self, key: VoxelKey) -> Option<Voxel> {
        self.voxels.remove(&key)
    }

    /// Observed voxel (`weight > 0`).
    #[inline]
    pub fn observed(&self, key: VoxelKey) -> Option<&Voxel> {
        self.voxels.get(&key).filter(|v| v.weight > 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.voxels.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&VoxelKey, &mut Voxel)> {
        self.voxels.iter_mut()
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut k: Vec<VoxelKey> = self.voxels.keys().copied().collect();
        k.sort_unstable();
        k
    }

    /// World-space center of a voxel.
    #[inline]
    pub fn center(&self, key: VoxelKey) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                key.i as f64 + 0.5,
                key.j as f64 + 0.5,
                key.k as f64 + 0.5,
            ) * self.voxel_size
    }

    /// Voxel containing a world point.
    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        let q = (p - self.origin) / self.voxel_size;
        VoxelKey::new(q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32)
    }

    /// Axis-aligned bounds of allocated voxel centers.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.voxels.keys();
        let first = self.center(*it.next()?);
        let (mut lo, mut hi) = (first, first);
        for k in it {
            let c = self.center(*k);
            lo = lo.inf(&c);
            hi = hi.sup(&c);
        }
        Some((lo, hi))
    }

    /// Fuses all frames into a new grid with truncation `trunc_multiplier · voxel_size`.
    pub fn fuse(
        frames: &[Frame],
        intr: &CameraIntrinsics,
        voxel_size: f64,
        trunc_multiplier: f64,
    ) -> Result<Self> {
        let mut sdf = Self::new(voxel_size, trunc_multiplier * voxel_size, Vector3::zeros())?;
        for f in frames {
            sdf.integrate_frame(f, intr)?;
        }
        Ok(sdf)
    }

    /// Fuses one depth frame with a weighted running average.
    /// Returns the number of voxel updates.
    pub fn integrate_frame(&mut self, frame: &Frame, intr: &CameraIntrinsics) -> Result<usize> {
        let (w, h) = (frame.width(), frame.height());
        if (w, h) != (intr.width, intr.height) {
            return Err(Error::InvalidInput(format!(
                "frame {} is {w}x{h}, intrinsics are {}x{}",
                frame.index, intr.width, intr.height
            )));
        }
        let rays = pixel_rays(intr)?;
        let cos_img = depth_normal_weights(frame, &rays);

        // Candidate voxels along each valid pixel ray within the truncation band.
        let step = 0.5 * self.voxel_size;
        let band = self.t_trunc;
        let pose = frame.pose;
        let mut candidates: Vec<VoxelKey> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| {
                let mut out = Vec::new();
                for x in 0..w {
                    let Some(d) = frame.depth.get(x, y) else {
                        continue;
                    };
                    if cos_img[y * w + x] <= 0.0 {
                        continue;
                    }
                    let ray = rays[y * w + x];
                    let n = ((2.0 * band) / step).ceil() as usize;
                    for s in 0..=n {
                        let z = d - band + s as f64 * step;
                        if z <= 0.0 {
                            continue;
                        }
                        let pw = pose.transform(&(ray * z));
                        out.push(self.key_of(&pw));
                    }
                }
                out
            })
            .collect();
        candidates.par_sort_unstable();
        candidates.dedup();

        let updates: Vec<Option<(VoxelKey, f64, f64)>> = candidates
            .par_iter()
            .map(|&key| {
                let pc = pose.inverse_transform(&self.center(key));
                if pc.z <= 0.0 {
                    return None;
                }
                let px = intr.project(&pc).ok()?;
                let zd = frame.depth.sample(px.x, px.y).ok()??;
                let di = pc.z - zd;
                if di.abs() >= self.t_trunc {
                    return None;
                }
                let (nx, ny) = (px.x.round() as usize, px.y.round() as usize);
                let wi = cos_img[ny * w + nx] as f64;
                (wi > 0.0).then_some((key, truncate(di, self.t_trunc), wi))
            })
            .collect();

        let mut count = 0;
        for (key, d, wi) in updates.into_iter().flatten() {
            let v = self.voxels.entry(key).or_default();
            v.d_raw = (v.weight * v.d_raw + wi * d) / (v.weight + wi);
            v.weight += wi;
            v.d_refined = v.d_raw;
            count += 1;
        }
        Ok(count)
    }

    /// Forward-difference gradient of `d_refined` divided by its norm.
    pub fn normal(&self, key: VoxelKey) -> Result<Vector3<f64>> {
        let g = self.gradient(key)?;
        let n = g.norm();
        if !(n >= 1e-9) {
            return Err(Error::DegenerateGradient(key));
        }
        Ok(g / n)
    }

    pub fn gradient(&self, key: VoxelKey) -> Result<Vector3<f64>> {
        let d0 = self
            .voxels
            .get(&key)
            .ok_or(Error::UndefinedNormal(key))?
            .d_refined;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let v = self
                .voxels
                .get(&key.step(a, 1))
                .ok_or(Error::UndefinedNormal(key))?;
            g[a] = (v.d_refined - d0) / self.voxel_size;
        }
        Ok(g)
    }

    /// Nearest iso-surface point `v_c − n·D̃`.
    pub fn iso_project(&self, key: VoxelKey) -> Result<Vector3<f64>> {
        let n = self.normal(key)?;
        let d = self.voxels[&key].d_refined;
        Ok(self.center(key) - n * d)
    }

    /// Observed voxels with `|D̃| < t_shell·voxel_size` and a defined normal, sorted.
    pub fn thin_shell(&self, t_shell: f64) -> Vec<VoxelKey> {
        let band = t_shell * self.voxel_size;
        let mut out: Vec<VoxelKey> = self
            .voxels
            .par_iter()
            .filter(|(k, v)| {
                v.weight > 0.0 && v.d_refined.abs() < band && self.normal(**k).is_ok()
            })
            .map(|(k, _)| *k)
            .collect();
        out.par_sort_unstable();
        out
    }

    /// Unnormalized 6-neighbor Laplacian of `d_refined`; `None` if a neighbor is missing.
    pub fn laplacian(&self, key: VoxelKey) -> Option<f64> {
        let d0 = self.voxels.get(&key)?.d_refined;
        let mut acc = -6.0 * d0;
        for n in key.neighbors6() {
            acc += self.voxels.get(&n)?.d_refined;
        }
        Some(acc)
    }

    /// Trilinear interpolation of a voxel quantity at a world point over the
    /// observed voxels among the 8 surrounding centers, renormalized by the
    /// weight of those present. `None` if none is present.
    pub fn interpolate<const N: usize>(
        &self,
        p: &Vector3<f64>,
        f: impl Fn(&Voxel) -> [f64; N],
    ) -> Option<([f64; N], f64)> {
        let q = (p - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        let base = q.map(|v| v.floor());
        let t = q - base;
        let mut acc = [0.0; N];
        let mut wsum = 0.0;
        for c in 0..8 {
            let (a, b, d) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let wx = if a == 1 { t.x } else { 1.0 - t.x };
            let wy = if b == 1 { t.y } else { 1.0 - t.y };
            let wz = if d == 1 { t.z } else { 1.0 - t.z };
            let w = wx * wy * wz;
            if w == 0.0 {
                continue;
            }
            let key = VoxelKey::new(
                base.x as i32 + a as i32,
                base.y as i32 + b as i32,
                base.z as i32 + d as i32,
            );
            if let Some(v) = self.observed(key) {
                let val = f(v);
                for i in 0..N {
                    acc[i] += w * val[i];
                }
                wsum += w;
            }
        }
        if wsum <= 0.0 {
            return None;
        }
        Some((acc.map(|v| v / wsum), wsum))
    }

    /// Trilinear `d_refined` at `p`, requiring all contributing corners.
    pub fn sample_refined(&self, p: &Vector3<f64>) -> Option<f64> {
        let (v, w) = self.interpolate(p, |v| [v.d_refined])?;
        (w > 1.0 - 1e-12).then_some(v[0])
    }

    /// Grid at half the voxel size. Each voxel spawns 8 children whose distances
    /// and albedo are interpolated from the coarse grid; weight and color are
    /// inherited. Children farther than the new truncation band are dropped.
    pub fn upsample(&self) -> Result<SparseSdf> {
        if self.is_empty() {
            return Err(Error::InvalidInput("cannot upsample an empty grid".into()));
        }
        let mut fine = SparseSdf::new(self.voxel_size * 0.5, self.t_trunc * 0.5, self.origin)?;
        let keys = self.sorted_keys();
        let fine_ref = &fine;
        let children: Vec<(VoxelKey, Voxel)> = keys
            .par_iter()
            .flat_map_iter(|&key| {
                let parent = self.voxels[&key];
                (0..8).filter_map(move |c| {
                    let child = VoxelKey::new(
                        2 * key.i + (c & 1),
                        2 * key.j + ((c >> 1) & 1),
                        2 * key.k + ((c >> 2) & 1),
                    );
                    let p = fine_ref.center(child);
                    let (vals, _) = self
                        .interpolate(&p, |v| {
                            [v.d_raw, v.d_refined, v.albedo[0], v.albedo[1], v.albedo[2]]
                        })
                        .unwrap_or((
                            [
                                parent.d_raw,
                                parent.d_refined,
                                parent.albedo[0],
                                parent.albedo[1],
                                parent.albedo[2],
                            ],
                            1.0,
                        ));
                    if vals[1].abs() >= fine_ref.t_trunc {
                        return None;
                    }
                    Some((
                        child,
                        Voxel {
                            d_raw: truncate(vals[0], fine_ref.t_trunc),
                            d_refined: vals[1],
                            albedo: [vals[2], vals[3], vals[4]],
                            weight: parent.weight,
                            color: parent.color,
                        },
                    ))
                })
            })
            .collect();
        for (k, v) in children {
            fine.voxels.insert(k, v);
        }
        Ok(fine)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.len() * 60);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        for v in [self.voxel_size, self.t_trunc, self.origin.x, self.origin.y, self.origin.z] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for key in self.sorted_keys() {
            let v = &self.voxels[&key];
            for c in [key.i, key.j, key.k] {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            let vals = [
                v.d_raw,
                v.weight,
                v.d_refined,
                v.color[0],
                v.color[1],
                v.color[2],
                v.albedo[0],
                v.albedo[1],
                v.albedo[2],
            ];
            for f in vals {
                buf.extend_from_slice(&(f as f32).to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let perr = |offset: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: message.to_string(),
        };
        if buf.len() < 53 || &buf[..5] != SNAPSHOT_MAGIC {
            return Err(perr(0, "missing ISDF1 header"));
        }
        let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let voxel_size = f64_at(5);
        let t_trunc = f64_at(13);
        let origin = Vector3::new(f64_at(21), f64_at(29), f64_at(37));
        let count = u64::from_le_bytes(buf[45..53].try_into().unwrap()) as usize;
        const REC: usize = 12 + 9 * 4;
        if buf.len() != 53 + count * REC {
            return Err(perr(
                buf.len().min(53 + count * REC),
                &format!("expected {count} records"),
            ));
        }
        let mut sdf = SparseSdf::new(voxel_size, t_trunc, origin)
            .map_err(|e| perr(5, &e.to_string()))?;
        for r in 0..count {
            let o = 53 + r * REC;
            let i32_at = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
            let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
            let key = VoxelKey::new(i32_at(o), i32_at(o + 4), i32_at(o + 8));
            let f: Vec<f64> = (0..9).map(|n| f32_at(o + 12 + 4 * n)).collect();
            sdf.voxels.insert(
                key,
                Voxel {
                    d_raw: f[0],
                    weight: f[1],
                    d_refined: f[2],
                    color: [f[3], f[4], f[5]],
                    albedo: [f[6], f[7], f[8]],
                },
            );
        }
        Ok(sdf)
    }
}

/// Unit-depth camera rays (`z = 1`) for every pixel.
fn pixel_rays(intr: &CameraIntrinsics) -> Result<Vec<Vector3<f64>>> {
    let (w, h) = (intr.width, intr.height);
    (0..w * h)
        .into_par_iter()
        .map(|i| intr.unproject(&Vector2::new((i % w) as f64, (i / w) as f64), 1.0))
        .collect()
}

/// `cos θ` between the viewing ray and the depth-map normal (central differences
/// of back-projected points). Border pixels and pixels with missing neighbors get 0.
fn depth_normal_weights(frame: &Frame, rays: &[Vector3<f64>]) -> Vec<f32> {
    let (w, h) = (frame.width(), frame.height());
    let point = |x: usize, y: usize| frame.depth.get(x, y).map(|d| rays[y * w + x] * d);
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
                return 0.0;
            }
            let (Some(p), Some(xp), Some(xm), Some(yp), Some(ym)) = (
                point(x, y),
                point(x + 1, y),
                point(x - 1, y),
                point(x, y + 1),
                point(x, y - 1),
            ) else {
                return 0.0;
            };
            // dy × dx faces the camera for a visible surface.
            let n = (yp - ym).cross(&(xp - xm));
            let nn = n.norm();
            if nn < 1e-15 {
                return 0.0;
            }
            let c = -(n / nn).dot(&p.normalize());
            c.clamp(0.0, 1.0) as f32
        })
        .collect()
}
