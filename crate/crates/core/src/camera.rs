//! Pinhole camera with Brown-Conrady distortion and rigid poses.
//!
//! Poses map camera coordinates to world coordinates (`p_w = R p_c + t`).
//! Integer pixel `(u, v)` addresses the center of that pixel.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::solver::Real;

const UNDISTORT_MAX_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
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

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64
            && [self.k1, self.k2, self.p1].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// `(fx, fy, cx, cy, k1, k2, p1)`.
    pub fn params(&self) -> [f64; 7] {
        [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1]
    }

    pub fn with_params(&self, p: &[f64; 7]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            p1: p[6],
            ..*self
        }
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera(p.z));
        }
        let [u, v] = project_generic(&self.params(), [p.x, p.y, p.z]);
        Ok(Vector2::new(u, v))
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
        }
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        let (x, y) = if self.has_distortion() {
            self.undistort(xd, yd)?
        } else {
            (xd, yd)
        };
        Ok(Vector3::new(x * depth, y * depth, depth))
    }

    /// Fixed-point inversion of the distortion model in normalized coordinates.
    fn undistort(&self, xd: f64, yd: f64) -> Result<(f64, f64)> {
        let (mut x, mut y) = (xd, yd);
        let mut res = f64::INFINITY;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let r2 = x * x + y * y;
            let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
            let tx = 2.0 * self.p1 * x * y;
            let ty = self.p1 * (r2 + 2.0 * y * y);
            x = (xd - tx) / radial;
            y = (yd - ty) / radial;
            let (ex, ey) = distort(self.k1, self.k2, self.p1, x, y);
            res = ((ex - xd).powi(2) + (ey - yd).powi(2)).sqrt();
            if res < 1e-12 {
                break;
            }
        }
        if res.is_finite() && res < 1e-6 {
            Ok((x, y))
        } else {
            Err(Error::UndistortionDiverged(res))
        }
    }

    /// Intrinsics of image-pyramid level `level` (each level halves the resolution).
    pub fn for_level(&self, level: u32) -> Result<Self> {
        let s = 1usize << level;
        if self.width % s != 0 || self.height % s != 0 {
            return Err(Error::InvalidInput(format!(
                "image size {}x{} not divisible by {s}",
                self.width, self.height
            )));
        }
        let f = s as f64;
        Ok(Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / s,
            height: self.height / s,
            ..*self
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("k1", self.k1),
            ("k2", self.k2),
            ("p1", self.p1),
        ] {
            writeln!(s, "{k}={v:?}").unwrap();
        }
        writeln!(s, "width={}", self.width).unwrap();
        writeln!(s, "height={}", self.height).unwrap();
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut vals = [None; 9];
        let keys = ["fx", "fy", "cx", "cy", "k1", "k2", "p1", "width", "height"];
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: path.to_path_buf(),
                offset: start,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
            let idx = keys
                .iter()
                .position(|x| *x == k.trim())
                .ok_or_else(|| perr(format!("unknown key {:?}", k.trim())))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| perr(format!("invalid number {:?}", v.trim())))?;
            vals[idx] = Some(v);
        }
        let get = |i: usize| {
            vals[i].ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("missing key {}", keys[i]),
            })
        };
        let intr = Self {
            fx: get(0)?,
            fy: get(1)?,
            cx: get(2)?,
            cy: get(3)?,
            k1: vals[4].unwrap_or(0.0),
            k2: vals[5].unwrap_or(0.0),
            p1: vals[6].unwrap_or(0.0),
            width: get(7)? as usize,
            height: get(8)? as usize,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Applies radial (`k1`, `k2`) and single tangential (`p1`) distortion to normalized coordinates.
pub fn distort<T: Real>(k1: T, k2: T, p1: T, x: T, y: T) -> (T, T) {
    let r2 = x * x + y * y;
    let radial = k1 * r2 + k2 * r2 * r2 + 1.0;
    let xd = x * radial + p1 * x * y * 2.0;
    let yd = y * radial + p1 * (r2 + y * y * 2.0);
    (xd, yd)
}

/// Projection with intrinsics given as `(fx, fy, cx, cy, k1, k2, p1)`. Assumes `p.z > 0`.
pub fn project_generic<T: Real>(k: &[T; 7], p: [T; 3]) -> [T; 2] {
    let x = p[0] / p[2];
    let y = p[1] / p[2];
    let (xd, yd) = distort(k[4], k[5], k[6], x, y);
    [k[0] * xd + k[2], k[1] * yd + k[3]]
}

/// Rotation matrix of an axis-angle vector (row-major).
pub fn rodrigues<T: Real>(w: [T; 3]) -> [[T; 3]; 3] {
    let th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    // Series keeps the dual parts exact near zero, where sqrt has no derivative.
    let (a, b) = if th2.value() < 1e-8 {
        (
            T::cst(1.0) - th2 / 6.0,
            T::cst(0.5) - th2 / 24.0,
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (T::cst(1.0) - th.cos()) / th2)
    };
    let [x, y, z] = w;
    let one = T::cst(1.0);
    [
        [
            one - b * (y * y + z * z),
            b * x * y - a * z,
            b * x * z + a * y,
        ],
        [
            b * x * y + a * z,
            one - b * (x * x + z * z),
            b * y * z - a * x,
        ],
        [
            b * x * z - a * y,
            b * y * z + a * x,
            one - b * (x * x + y * y),
        ],
    ]
}

pub fn mat_vec<T: Real>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_t_vec<T: Real>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_quaternion(t: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self::new(q.to_rotation_matrix().into_inner(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// A camera at `eye` looking at `target`; camera +y points roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&(-up));
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x()).normalize();
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::y());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() < tol
            && (r.determinant() - 1.0).abs() < tol
    }

    /// `R p + t`.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `Rᵀ (p − t)`.
    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Left-multiplicative increment `(ω, τ)`: `R' = exp(ω) R`, `t' = exp(ω) t + τ`.
    pub fn apply_increment(&self, inc: &[f64; 6]) -> Self {
        let r = rodrigues([inc[0], inc[1], inc[2]]);
        let m = Matrix3::from_fn(|i, j| r[i][j]);
        let mut rot = m * self.rotation;
        orthonormalize(&mut rot);
        Self::new(
            rot,
            m * self.translation + Vector3::new(inc[3], inc[4], inc[5]),
        )
    }

    /// Geodesic rotation angle to `other`, in degrees.
    pub fn rotation_angle_deg(&self, other: &Pose) -> f64 {
        let d = self.rotation.transpose() * other.rotation;
        let c = ((d.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

fn orthonormalize(r: &mut Matrix3<f64>) {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut m = u * vt;
    if m.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        m = u2 * vt;
    }
    *r = m;
}

/// Serializes poses as `index tx ty tz qx qy qz qw` lines.
pub fn trajectory_to_text(poses: &[(usize, Pose)]) -> String {
    let mut s = String::new();
    for (i, p) in poses {
        let q = p.quaternion();
        let t = p.translation;
        writeln!(
            s,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            i, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(usize, Pose)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            offset: start,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(perr(format!("expected 8 fields, got {}", f.len())));
        }
        let idx: usize = f[0]
            .parse()
            .map_err(|_| perr(format!("invalid frame index {:?}", f[0])))?;
        let mut v = [0.0; 7];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| perr(format!("invalid number {s:?}")))?;
        }
        let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
        if q.norm() < 1e-9 {
            return Err(perr("zero quaternion".into()));
        }
        out.push((
            idx,
            Pose::from_quaternion(
                Vector3::new(v[0], v[1], v[2]),
                UnitQuaternion::from_quaternion(q),
            ),
        ));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}
