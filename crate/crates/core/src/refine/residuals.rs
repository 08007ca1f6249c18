//! Residual blocks of the joint refinement energy.

use crate::camera::{mat_t_vec, project_generic, rodrigues};
use crate::frames::GrayImage;
use crate::lighting::sh_basis_generic;
use crate::solver::{CostFunction, Real, ResidualFn};

/// Maximum local parameters of a shading-gradient block:
/// 10 distances, 4 albedos, 6 pose and 7 intrinsic entries.
pub const SHADING_PARAMS: usize = 27;

/// Grid offsets of the distance samples used by a shading-gradient block.
pub const DISTANCE_OFFSETS: [[i32; 3]; 10] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [1, 1, 0],
    [1, 0, 1],
    [0, 2, 0],
    [0, 1, 1],
    [0, 0, 2],
];

/// For the voxel and its three forward neighbors: indices into
/// [`DISTANCE_OFFSETS`] of itself and its own `+x`, `+y`, `+z` neighbors.
pub const FORWARD_STENCIL: [[usize; 4]; 4] = [[0, 1, 2, 3], [1, 4, 5, 6], [2, 5, 7, 8], [3, 6, 8, 9]];

/// A block input that is either a local unknown or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    Unknown(usize),
    Fixed(f64),
}

impl Slot {
    #[inline]
    fn get<T: Real>(&self, p: &[T]) -> T {
        match *self {
            Slot::Unknown(i) => p[i],
            Slot::Fixed(v) => T::cst(v),
        }
    }
}

/// Per-voxel quantities of a shading-gradient block at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedShading<T> {
    /// World-space iso-point.
    pub iso: [T; 3],
    pub pixel: [T; 2],
    pub shading: T,
    pub depth: T,
    pub normal_norm: T,
}

/// `√w · (∇B − ∇I)` for one voxel in one view.
///
/// `B = a · ℓ(c) · H(−n)` is evaluated at the voxel and its three forward
/// neighbors. Each voxel's iso-point `c − n·D̃` is projected into the view and
/// the intensity is sampled bilinearly there. Both image-plane gradients are
/// least-squares fits to the three neighbor differences over the current
/// projections.
#[derive(Clone, Debug)]
pub struct ShadingGradient<'a> {
    pub image: &'a GrayImage,
    /// Camera-to-world rotation (row-major) and translation before the increment.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Level-0 intrinsics `(fx, fy, cx, cy, k1, k2, p1)` before the deltas.
    pub intrinsics: [f64; 7],
    /// `2^level` of the image the gradient is compared against.
    pub level_scale: f64,
    pub voxel_size: f64,
    pub centers: [[f64; 3]; 4],
    pub lighting: [[f64; 9]; 4],
    pub distances: [Slot; 10],
    pub albedo: [Slot; 4],
    /// Local offset of the 6 pose increment unknowns, if optimized.
    pub pose: Option<usize>,
    /// Local offset of the 7 intrinsic delta unknowns, if optimized.
    pub intrinsic_deltas: Option<usize>,
    pub sqrt_weight: f64,
}

impl ShadingGradient<'_> {
    /// Projections and shading of the four voxels.
    pub fn project<T: Real>(&self, p: &[T]) -> [ProjectedShading<T>; 4] {
        let d: [T; 10] = std::array::from_fn(|i| self.distances[i].get(p));
        let k = self.level_intrinsics(p);
        let inc = self.pose.map(|o| {
            (
                rodrigues([p[o], p[o + 1], p[o + 2]]),
                [p[o + 3], p[o + 4], p[o + 5]],
            )
        });
        let s = self.voxel_size;
        std::array::from_fn(|j| {
            let st = FORWARD_STENCIL[j];
            let g = [
                (d[st[1]] - d[st[0]]) / s,
                (d[st[2]] - d[st[0]]) / s,
                (d[st[3]] - d[st[0]]) / s,
            ];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let n = [g[0] / norm, g[1] / norm, g[2] / norm];
            let c = self.centers[j];
            let iso = [
                -(n[0] * d[st[0]]) + c[0],
                -(n[1] * d[st[0]]) + c[1],
                -(n[2] * d[st[0]]) + c[2],
            ];
            // p_c = R0ᵀ (exp(ω)ᵀ (p − τ) − t0)
            let q = match &inc {
                Some((r, tau)) => mat_t_vec(r, [iso[0] - tau[0], iso[1] - tau[1], iso[2] - tau[2]]),
                None => iso,
            };
            let t0 = self.translation;
            let rel = [q[0] - t0[0], q[1] - t0[1], q[2] - t0[2]];
            let r0 = &self.rotation;
            let pc: [T; 3] = std::array::from_fn(|a| {
                rel[0] * r0[0][a] + rel[1] * r0[1][a] + rel[2] * r0[2][a]
            });
            let h = sh_basis_generic([-n[0], -n[1], -n[2]]);
            let l = &self.lighting[j];
            let mut lh = T::zero();
            for i in 0..9 {
                lh += h[i] * l[i];
            }
            ProjectedShading {
                iso,
                pixel: project_generic(&k, pc),
                shading: self.albedo[j].get(p) * lh,
                depth: pc[2],
                normal_norm: norm,
            }
        })
    }

    fn level_intrinsics<T: Real>(&self, p: &[T]) -> [T; 7] {
        let base = self.intrinsics;
        let k: [T; 7] = match self.intrinsic_deltas {
            Some(o) => std::array::from_fn(|i| p[o + i] + base[i]),
            None => base.map(T::cst),
        };
        let s = self.level_scale;
        [
            k[0] / s,
            k[1] / s,
            (k[2] + 0.5) / s - 0.5,
            (k[3] + 0.5) / s - 0.5,
            k[4],
            k[5],
            k[6],
        ]
    }

    /// Least-squares image-plane gradient of `values` over four pixel
    /// positions, fitted to the differences `v_j − v_0`, `j = 1..3`.
    pub fn fit_gradient<T: Real>(pixels: &[[T; 2]; 4], values: &[T; 4]) -> [T; 2] {
        let mut m = [T::zero(); 3];
        let mut b = [T::zero(); 2];
        for j in 1..4 {
            let du = pixels[j][0] - pixels[0][0];
            let dv = pixels[j][1] - pixels[0][1];
            let dval = values[j] - values[0];
            m[0] += du * du;
            m[1] += du * dv;
            m[2] += dv * dv;
            b[0] += du * dval;
            b[1] += dv * dval;
        }
        let det = m[0] * m[2] - m[1] * m[1];
        [(m[2] * b[0] - m[1] * b[1]) / det, (m[0] * b[1] - m[1] * b[0]) / det]
    }

    /// Smallest eigenvalue and trace of the 2x2 normal matrix of the fit.
    pub fn fit_conditioning(pixels: &[[f64; 2]; 4]) -> (f64, f64) {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for j in 1..4 {
            let du = pixels[j][0] - pixels[0][0];
            let dv = pixels[j][1] - pixels[0][1];
            a += du * du;
            b += du * dv;
            c += dv * dv;
        }
        let trace = a + c;
        let det = a * c - b * b;
        (0.5 * trace - (0.25 * trace * trace - det).max(0.0).sqrt(), trace)
    }

    /// Shading and image gradients at the given parameters.
    pub fn gradients<T: Real>(&self, p: &[T]) -> ([T; 2], [T; 2]) {
        let proj = self.project(p);
        let pixels = proj.map(|q| q.pixel);
        let shading = proj.map(|q| q.shading);
        let intensity = pixels.map(|u| self.image.sample_clamped(u[0], u[1]));
        (Self::fit_gradient(&pixels, &shading), Self::fit_gradient(&pixels, &intensity))
    }
}

impl ResidualFn for ShadingGradient<'_> {
    fn num_residuals(&self) -> usize {
        2
    }

    fn eval<T: Real>(&self, params: &[T], out: &mut [T]) {
        let proj = self.project(params);
        let pixels = proj.map(|q| q.pixel);
        // Both gradients share the fit operator, so fit the difference once.
        let diff = proj.map(|q| q.shading - self.image.sample_clamped(q.pixel[0], q.pixel[1]));
        let g = Self::fit_gradient(&pixels, &diff);
        out[0] = g[0] * self.sqrt_weight;
        out[1] = g[1] * self.sqrt_weight;
    }
}

/// Scalar affine residual `c + Σ a_i x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearResidual {
    pub params: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl LinearResidual {
    /// `Σ D̃(u) − 6·D̃(v)` over the six neighbors.
    /// `neighbors` are unknown indices or fixed values.
    pub fn laplacian(center: usize, neighbors: &[Result<usize, f64>; 6]) -> Self {
        let mut out = Self {
            params: vec![center],
            coeffs: vec![-6.0],
            constant: 0.0,
        };
        for n in neighbors {
            match *n {
                Ok(i) => {
                    out.params.push(i);
                    out.coeffs.push(1.0);
                }
                Err(v) => out.constant += v,
            }
        }
        out
    }

    /// `D̃(v) − D(v)`.
    pub fn stabilization(index: usize, d_raw: f64) -> Self {
        Self {
            params: vec![index],
            coeffs: vec![1.0],
            constant: -d_raw,
        }
    }

    /// `√φ · (a(v) − a(u))`.
    pub fn albedo_pair(v: usize, u: usize, phi: f64) -> Self {
        let s = phi.sqrt();
        Self {
            params: vec![v, u],
            coeffs: vec![s, -s],
            constant: 0.0,
        }
    }
}

impl CostFunction for LinearResidual {
    fn num_residuals(&self) -> usize {
        1
    }

    fn parameters(&self) -> &[usize] {
        &self.params
    }

    fn evaluate(&self, params: &[f64], residuals: &mut [f64], jacobian: Option<&mut [f64]>) {
        residuals[0] = self.constant
            + self
                .coeffs
                .iter()
                .zip(params)
                .map(|(a, x)| a * x)
                .sum::<f64>();
        if let Some(j) = jacobian {
            j.copy_from_slice(&self.coeffs);
        }
    }
}

/// Robust chromaticity kernel `1 / (1 + t_rob·x)³`.
pub fn chromaticity_kernel(x: f64, t_rob: f64) -> f64 {
    1.0 / (1.0 + t_rob * x).powi(3)
}
