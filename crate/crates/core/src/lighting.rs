//! Second-order spherical-harmonics shading with spatially varying coefficients.
//!
//! Coefficient sets live on the nodes of a regular lattice with spacing `t_sv`;
//! a point's lighting is the trilinear blend of its 8 surrounding nodes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::frames::intensity_from_rgb;
use crate::sdf::{SparseSdf, VoxelKey};
use crate::solver::Real;

pub type ShCoeffs = [f64; 9];

const C0: f64 = 0.282095;
const C1: f64 = 0.488603;
const C2: f64 = 1.092548;
const C3: f64 = 0.315392;
const C4: f64 = 0.546274;

/// Systems up to this many unknowns are solved densely.
const DENSE_LIMIT: usize = 1500;

/// Real SH basis for bands 0-2 at a unit normal.
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; 9]> {
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "SH basis needs a unit normal, got norm {}",
            n.norm()
        )));
    }
    Ok(sh_basis_generic([n.x, n.y, n.z]))
}

pub fn sh_basis_generic<T: Real>(n: [T; 3]) -> [T; 9] {
    let [x, y, z] = n;
    [
        T::cst(C0),
        y * C1,
        z * C1,
        x * C1,
        x * y * C2,
        y * z * C2,
        (z * z * 3.0 - 1.0) * C3,
        x * z * C2,
        (x * x - y * y) * C4,
    ]
}

/// `a · (ℓ · H(n))`.
pub fn shading(albedo: f64, n: &Vector3<f64>, coeffs: &ShCoeffs) -> Result<f64> {
    let h = sh_basis(n)?;
    Ok(albedo * dot9(coeffs, &h))
}

#[inline]
pub fn dot9(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubvolumeLattice {
    pub t_sv: f64,
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub coeffs: Vec<ShCoeffs>,
}

impl SubvolumeLattice {
    /// Single global coefficient set (K = 1).
    pub fn global(coeffs: ShCoeffs) -> Self {
        Self {
            t_sv: f64::INFINITY,
            dims: [1, 1, 1],
            origin: Vector3::zeros(),
            coeffs: vec![coeffs],
        }
    }

    /// Zero-initialized lattice covering `[lo, hi]` with at least half a
    /// subvolume of margin on every side.
    pub fn covering(lo: &Vector3<f64>, hi: &Vector3<f64>, t_sv: f64) -> Result<Self> {
        if !(t_sv > 0.0) {
            return Err(Error::InvalidInput(format!("t_sv must be positive, got {t_sv}")));
        }
        let origin = lo - Vector3::repeat(0.5 * t_sv);
        let mut dims = [0; 3];
        for a in 0..3 {
            let ext = (hi[a] - lo[a]).max(0.0);
            dims[a] = ((ext + t_sv) / t_sv).ceil() as usize + 1;
        }
        let k = dims.iter().product::<usize>();
        Ok(Self {
            t_sv,
            dims,
            origin,
            coeffs: vec![[0.0; 9]; k],
        })
    }

    /// Lattice over the bounds of an SDF's allocated voxels.
    pub fn covering_sdf(sdf: &SparseSdf, t_sv: f64) -> Result<Self> {
        let (lo, hi) = sdf.bounds().ok_or(Error::EmptyLattice)?;
        let m = Vector3::repeat(sdf.voxel_size);
        Self::covering(&(lo - m), &(hi + m), t_sv)
    }

    pub fn num_nodes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn with_coeffs(&self, coeffs: Vec<ShCoeffs>) -> Self {
        assert_eq!(coeffs.len(), self.num_nodes());
        Self {
            coeffs,
            ..self.clone()
        }
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn node_coords(&self, n: usize) -> [usize; 3] {
        let ix = n % self.dims[0];
        let iy = (n / self.dims[0]) % self.dims[1];
        let iz = n / (self.dims[0] * self.dims[1]);
        [ix, iy, iz]
    }

    pub fn node_position(&self, n: usize) -> Vector3<f64> {
        let c = self.node_coords(n);
        if self.dims == [1, 1, 1] {
            return self.origin;
        }
        self.origin + Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.t_sv
    }

    /// The 8 (node, weight) pairs enclosing `p`; axes of extent 1 contribute weight 1.
    pub fn weights(&self, p: &Vector3<f64>) -> Result<[(usize, f64); 8]> {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if self.dims[a] == 1 {
                continue;
            }
            let q = (p[a] - self.origin[a]) / self.t_sv;
            let last = (self.dims[a] - 1) as f64;
            if !(q >= -1e-9 && q <= last + 1e-9) {
                return Err(Error::InvalidInput(format!(
                    "point {:?} outside the lighting lattice",
                    p.as_slice()
                )));
            }
            let q = q.clamp(0.0, last);
            let b = (q.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = q - b as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, o) in out.iter_mut().enumerate() {
            let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if self.dims[a] == 1 {
                    // Only the first corner along a flat axis carries weight.
                    if bits[a] == 1 {
                        w = 0.0;
                    }
                    idx[a] = 0;
                } else {
                    w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                    idx[a] = base[a] + bits[a];
                }
            }
            *o = (self.node_index(idx[0], idx[1], idx[2]), w);
        }
        Ok(out)
    }

    /// Trilinear blend of node coefficients at `p`.
    pub fn interp(&self, p: &Vector3<f64>) -> Result<ShCoeffs> {
        let mut out = [0.0; 9];
        for (n, w) in self.weights(p)? {
            if w == 0.0 {
                continue;
            }
            for m in 0..9 {
                out[m] += w * self.coeffs[n][m];
            }
        }
        Ok(out)
    }

    /// Multiplies every coefficient by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        self.with_coeffs(self.coeffs.iter().map(|c| c.map(|v| v * s)).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# t_sv={:?} dims={} {} {} origin={:?} {:?} {:?}",
            self.t_sv,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.origin.x,
            self.origin.y,
            self.origin.z
        )
        .unwrap();
        for (n, c) in self.coeffs.iter().enumerate() {
            let [ix, iy, iz] = self.node_coords(n);
            write!(s, "{ix} {iy} {iz}").unwrap();
            for v in c {
                write!(s, " {v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |offset: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| perr(0, "empty lighting file".into()))?;
        let nums: Vec<f64> = header
            .trim_start_matches('#')
            .split(|c: char| c.is_whitespace() || c == '=')
            .filter_map(|t| t.parse().ok())
            .collect();
        if !header.starts_with("# t_sv=") || nums.len() != 7 {
            return Err(perr(0, "malformed lighting header".into()));
        }
        let dims = [nums[1] as usize, nums[2] as usize, nums[3] as usize];
        let mut lat = Self {
            t_sv: nums[0],
            dims,
            origin: Vector3::new(nums[4], nums[5], nums[6]),
            coeffs: vec![[0.0; 9]; dims.iter().product()],
        };
        let mut offset = header.len();
        let mut seen = 0;
        for line in lines {
            let start = offset;
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 12 {
                return Err(perr(start, format!("expected 12 fields, got {}", f.len())));
            }
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = f[a]
                    .parse()
                    .map_err(|_| perr(start, format!("invalid node index {:?}", f[a])))?;
                if idx[a] >= dims[a] {
                    return Err(perr(start, "node index out of range".into()));
                }
            }
            let n = lat.node_index(idx[0], idx[1], idx[2]);
            for m in 0..9 {
                lat.coeffs[n][m] = f[3 + m]
                    .parse()
                    .map_err(|_| perr(start, format!("invalid coefficient {:?}", f[3 + m])))?;
            }
            seen += 1;
        }
        if seen != lat.num_nodes() {
            return Err(perr(offset, format!("expected {} nodes, got {seen}", lat.num_nodes())));
        }
        Ok(lat)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One appearance constraint: `albedo · (ℓ(position) · H(normal)) ≈ intensity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightingSample {
    pub position: Vector3<f64>,
    /// Outward unit normal.
    pub normal: Vector3<f64>,
    pub albedo: f64,
    pub intensity: f64,
}

/// Samples for the given voxels: voxel center, outward normal, luma of albedo and color.
pub fn lighting_samples(sdf: &SparseSdf, keys: &[VoxelKey]) -> Vec<LightingSample> {
    keys.iter()
        .filter_map(|&k| {
            let v = sdf.observed(k)?;
            let n = sdf.normal(k).ok()?;
            Some(LightingSample {
                position: sdf.center(k),
                normal: -n,
                albedo: intensity_from_rgb(v.albedo),
                intensity: intensity_from_rgb(v.color),
            })
        })
        .collect()
}

type Block = SMatrix<f64, 9, 9>;

/// Offset slot of node `b` relative to node `a` in the 27-neighborhood.
fn slot(lat: &SubvolumeLattice, a: usize, b: usize) -> usize {
    let ca = lat.node_coords(a);
    let cb = lat.node_coords(b);
    let mut s = 0;
    for ax in (0..3).rev() {
        let d = cb[ax] as isize - ca[ax] as isize + 1;
        debug_assert!((0..3).contains(&d));
        s = s * 3 + d as usize;
    }
    s
}

fn neighbor_of(lat: &SubvolumeLattice, a: usize, s: usize) -> Option<usize> {
    let c = lat.node_coords(a);
    let d = [s % 3, (s / 3) % 3, s / 9];
    let mut idx = [0usize; 3];
    for ax in 0..3 {
        let v = c[ax] as isize + d[ax] as isize - 1;
        if v < 0 || v >= lat.dims[ax] as isize {
            return None;
        }
        idx[ax] = v as usize;
    }
    Some(lat.node_index(idx[0], idx[1], idx[2]))
}

/// Block-sparse normal equations, one row of 27 neighbor blocks per node.
struct NormalSystem {
    rows: FxHashMap<usize, Box<[Block; 27]>>,
    rhs: FxHashMap<usize, [f64; 9]>,
}

impl NormalSystem {
    fn new() -> Self {
        Self {
            rows: FxHashMap::default(),
            rhs: FxHashMap::default(),
        }
    }

    fn block(&mut self, a: usize, s: usize) -> &mut Block {
        &mut self.rows.entry(a).or_insert_with(|| Box::new([Block::zeros(); 27]))[s]
    }

    fn merge(&mut self, other: NormalSystem) {
        let mut keys: Vec<usize> = other.rows.keys().copied().collect();
        keys.sort_unstable();
        let mut rows = other.rows;
        for k in keys {
            let src = rows.remove(&k).unwrap();
            match self.rows.get_mut(&k) {
                Some(dst) => {
                    for s in 0..27 {
                        dst[s] += src[s];
                    }
                }
                None => {
                    self.rows.insert(k, src);
                }
            }
        }
        let mut keys: Vec<usize> = other.rhs.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let src = other.rhs[&k];
            let dst = self.rhs.entry(k).or_insert([0.0; 9]);
            for m in 0..9 {
                dst[m] += src[m];
            }
        }
    }
}

fn assemble_data(lat: &SubvolumeLattice, samples: &[LightingSample]) -> Result<NormalSystem> {
    const CHUNK: usize = 2048;
    let parts: Vec<Result<NormalSystem>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sys = NormalSystem::new();
            for s in chunk {
                let h = sh_basis(&s.normal)?;
                let w = lat.weights(&s.position)?;
                let terms: Vec<(usize, [f64; 9])> = w
                    .iter()
                    .filter(|(_, wt)| *wt != 0.0)
                    .map(|&(n, wt)| (n, h.map(|v| v * wt * s.albedo)))
                    .collect();
                for &(a, ra) in &terms {
                    let rhs = sys.rhs.entry(a).or_insert([0.0; 9]);
                    for m in 0..9 {
                        rhs[m] += ra[m] * s.intensity;
                    }
                    for &(b, rb) in &terms {
                        let blk = sys.block(a, slot(lat, a, b));
                        for i in 0..9 {
                            for j in 0..9 {
                                blk[(i, j)] += ra[i] * rb[j];
                            }
                        }
                    }
                }
            }
            Ok(sys)
        })
        .collect();
    let mut sys = NormalSystem::new();
    for p in parts {
        sys.merge(p?);
    }
    Ok(sys)
}

/// Solves for lattice coefficients minimizing
/// `Σ (a ℓ(p)·H(n) − I)² + λ Σ_{6-adjacent pairs} ‖ℓ_s − ℓ_r‖²`.
///
/// With `λ = 0`, nodes touched by no sample stay at zero.
pub fn estimate_lighting_from_samples(
    template: &SubvolumeLattice,
    samples: &[LightingSample],
    lambda_diffuse: f64,
) -> Result<SubvolumeLattice> {
    if !(lambda_diffuse >= 0.0) {
        return Err(Error::InvalidInput("lambda_diffuse must be nonnegative".into()));
    }
    let mut sys = assemble_data(template, samples)?;
    if sys.rows.is_empty() {
        return Err(Error::EmptyLattice);
    }
    if lambda_diffuse > 0.0 {
        let eye = Block::identity() * lambda_diffuse;
        for a in 0..template.num_nodes() {
            let c = template.node_coords(a);
            for ax in 0..3 {
                if c[ax] + 1 >= template.dims[ax] {
                    continue;
                }
                let mut cb = c;
                cb[ax] += 1;
                let b = template.node_index(cb[0], cb[1], cb[2]);
                *sys.block(a, 13) += eye;
                *sys.block(b, 13) += eye;
                *sys.block(a, slot(template, a, b)) -= eye;
                *sys.block(b, slot(template, b, a)) -= eye;
            }
        }
    }
    let mut active: Vec<usize> = sys.rows.keys().copied().collect();
    active.sort_unstable();
    let x = if active.len() * 9 <= DENSE_LIMIT {
        solve_dense(template, &sys, &active)?
    } else {
        solve_pcg(template, &sys, &active)?
    };
    let mut coeffs = vec![[0.0; 9]; template.num_nodes()];
    for (i, &n) in active.iter().enumerate() {
        coeffs[n].copy_from_slice(&x[9 * i..9 * i + 9]);
    }
    Ok(template.with_coeffs(coeffs))
}

/// [`estimate_lighting_from_samples`] over the given shell voxels of `sdf`.
pub fn estimate_lighting(
    sdf: &SparseSdf,
    shell: &[VoxelKey],
    template: &SubvolumeLattice,
    lambda_diffuse: f64,
) -> Result<SubvolumeLattice> {
    estimate_lighting_from_samples(template, &lighting_samples(sdf, shell), lambda_diffuse)
}

fn active_index(active: &[usize]) -> FxHashMap<usize, usize> {
    active.iter().enumerate().map(|(i, &n)| (n, i)).collect()
}

fn solve_dense(lat: &SubvolumeLattice, sys: &NormalSystem, active: &[usize]) -> Result<Vec<f64>> {
    let n = active.len() * 9;
    let pos = active_index(active);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (i, &node) in active.iter().enumerate() {
        let row = &sys.rows[&node];
        for s in 0..27 {
            let Some(nb) = neighbor_of(lat, node, s) else {
                continue;
            };
            let Some(&j) = pos.get(&nb) else {
                continue;
            };
            a.view_mut((9 * i, 9 * j), (9, 9)).copy_from(&row[s]);
        }
        if let Some(r) = sys.rhs.get(&node) {
            b.rows_mut(9 * i, 9).copy_from_slice(r);
        }
    }
    // Tiny ridge keeps rank-deficient directions (unobserved SH bands) at zero.
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
    for i in 0..n {
        a[(i, i)] += 1e-12 * scale;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Degenerate("lighting normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b).as_slice().to_vec())
}

fn solve_pcg(lat: &SubvolumeLattice, sys: &NormalSystem, active: &[usize]) -> Result<Vec<f64>> {
    let pos = active_index(active);
    let n = active.len() * 9;
    // Neighbor lists resolved once: (row, [(col, slot)]).
    let links: Vec<Vec<(usize, usize)>> = active
        .iter()
        .map(|&node| {
            (0..27)
                .filter_map(|s| {
                    let nb = neighbor_of(lat, node, s)?;
                    pos.get(&nb).map(|&j| (j, s))
                })
                .collect()
        })
        .collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        y.par_chunks_mut(9).enumerate().for_each(|(i, yi)| {
            let row = &sys.rows[&active[i]];
            let mut acc = [0.0; 9];
            for &(j, s) in &links[i] {
                let blk = &row[s];
                for r in 0..9 {
                    let mut v = 0.0;
                    for c in 0..9 {
                        v += blk[(r, c)] * x[9 * j + c];
                    }
                    acc[r] += v;
                }
            }
            yi.copy_from_slice(&acc);
        });
    };
    let pinv: Vec<Block> = active
        .iter()
        .map(|node| {
            let d = sys.rows[node][13];
            let ridge = 1e-9 * d.diagonal().max().max(1e-300);
            (d + Block::identity() * ridge)
                .try_inverse()
                .unwrap_or_else(Block::identity)
        })
        .collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        for (i, p) in pinv.iter().enumerate() {
            let ri = nalgebra::SVector::<f64, 9>::from_column_slice(&r[9 * i..9 * i + 9]);
            z[9 * i..9 * i + 9].copy_from_slice((p * ri).as_slice());
        }
    };
    let mut b = vec![0.0; n];
    for (i, node) in active.iter().enumerate() {
        if let Some(r) = sys.rhs.get(node) {
            b[9 * i..9 * i + 9].copy_from_slice(r);
        }
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut r = b.clone();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_it = 20 * n;
    let mut rel = 1.0;
    for _ in 0..max_it {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel < 1e-10 {
            break;
        }
        precond(&r, &mut z);
        let rz2 = dot(&r, &z);
        let beta = rz2 / rz;
        rz = rz2;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if !(rel < 1e-8) {
        return Err(Error::LinearSolve {
            residual: rel,
            iterations: max_it,
        });
    }
    Ok(x)
}

/// Value of the lighting objective at a given lattice.
pub fn lighting_objective(
    lat: &SubvolumeLattice,
    samples: &[LightingSample],
    lambda_diffuse: f64,
) -> Result<f64> {
    let mut e = 0.0;
    for s in samples {
        let l = lat.interp(&s.position)?;
        let r = s.albedo * dot9(&l, &sh_basis(&s.normal)?) - s.intensity;
        e += r * r;
    }
    for a in 0..lat.num_nodes() {
        let c = lat.node_coords(a);
        for ax in 0..3 {
            if c[ax] + 1 < lat.dims[ax] {
                let mut cb = c;
                cb[ax] += 1;
                let b = lat.node_index(cb[0], cb[1], cb[2]);
                for m in 0..9 {
                    e += lambda_diffuse * (lat.coeffs[a][m] - lat.coeffs[b][m]).powi(2);
                }
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn basis_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let h = sh_basis(&random_unit(&mut rng)).unwrap();
            assert!((h[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-6);
        }
        let h = sh_basis(&Vector3::z()).unwrap();
        assert_eq!(&h[1..4], &[0.0, 0.488603, 0.0]);
        assert!(sh_basis(&Vector3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn basis_is_orthonormal_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let mut g = [[0.0f64; 9]; 9];
        for _ in 0..n {
            let h = sh_basis_generic(random_unit(&mut rng).into());
            for i in 0..9 {
                for j in i..9 {
                    g[i][j] += h[i] * h[j];
                }
            }
        }
        let scale = 4.0 * std::f64::consts::PI / n as f64;
        for i in 0..9 {
            for j in i..9 {
                let v = g[i][j] * scale;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 0.01, "({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn shading_examples() {
        let mut l = [0.0; 9];
        l[0] = 1.0;
        let n = Vector3::new(0.6, 0.0, 0.8);
        assert!((shading(1.0, &n, &l).unwrap() - 0.282095).abs() < 1e-12);
        assert_eq!(shading(0.0, &n, &[0.3; 9]).unwrap(), 0.0);
        let l1 = [0.1, 0.2, -0.3, 0.4, 0.0, 0.5, -0.1, 0.2, 0.3];
        let l2 = [0.5, -0.2, 0.1, 0.0, 0.3, 0.1, 0.2, -0.4, 0.0];
        let sum: ShCoeffs = std::array::from_fn(|i| l1[i] + l2[i]);
        let a = shading(0.7, &n, &sum).unwrap();
        let b = shading(0.7, &n, &l1).unwrap() + shading(0.7, &n, &l2).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    fn test_lattice() -> SubvolumeLattice {
        let lat = SubvolumeLattice::covering(&Vector3::zeros(), &Vector3::new(0.2, 0.1, 0.1), 0.05).unwrap();
        let coeffs = (0..lat.num_nodes())
            .map(|n| std::array::from_fn(|m| (n * 9 + m) as f64 * 0.01))
            .collect();
        lat.with_coeffs(coeffs)
    }

    #[test]
    fn interpolation_examples() {
        let lat = test_lattice();
        let n = lat.node_index(2, 1, 3);
        let at = lat.interp(&lat.node_position(n)).unwrap();
        for m in 0..9 {
            assert!((at[m] - lat.coeffs[n][m]).abs() < 1e-12);
        }
        let n2 = lat.node_index(3, 1, 3);
        let mid = (lat.node_position(n) + lat.node_position(n2)) * 0.5;
        let v = lat.interp(&mid).unwrap();
        for m in 0..9 {
            assert!((v[m] - 0.5 * (lat.coeffs[n][m] + lat.coeffs[n2][m])).abs() < 1e-12);
        }
        let c = lat.with_coeffs(vec![[0.25; 9]; lat.num_nodes()]);
        assert_eq!(c.interp(&Vector3::new(0.0731, 0.0123, 0.0999)).unwrap(), [0.25; 9]);
        assert!(lat.interp(&Vector3::new(5.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn weights_partition_unity() {
        let lat = test_lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(0.0..0.2),
                rng.random_range(0.0..0.1),
                rng.random_range(0.0..0.1),
            );
            let s: f64 = lat.weights(&p).unwrap().iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let g = SubvolumeLattice::global([1.0; 9]);
        assert_eq!(g.interp(&Vector3::new(3.0, -2.0, 1.0)).unwrap(), [1.0; 9]);
    }

    fn sphere_samples(
        lat: &SubvolumeLattice,
        truth: &SubvolumeLattice,
        n: usize,
        albedo: f64,
    ) -> Vec<LightingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Vector3::new(0.1, 0.05, 0.05);
        let _ = lat;
        (0..n)
            .map(|_| {
                let nrm = random_unit(&mut rng);
                let p = c + nrm * 0.04;
                let l = truth.interp(&p).unwrap();
                LightingSample {
                    position: p,
                    normal: nrm,
                    albedo,
                    intensity: albedo * dot9(&l, &sh_basis(&nrm).unwrap()),
                }
            })
            .collect()
    }

    const LSTAR: ShCoeffs = [0.9, 0.2, 0.35, -0.1, 0.05, -0.04, 0.08, 0.03, -0.06];

    #[test]
    fn global_inversion_recovers_shading() {
        let truth = SubvolumeLattice::global(LSTAR);
        let samples = sphere_samples(&truth, &truth, 2000, 0.8);
        let est = estimate_lighting_from_samples(&SubvolumeLattice::global([0.0; 9]), &samples, 0.01).unwrap();
        let mad: f64 = samples
            .iter()
            .map(|s| (s.albedo * dot9(&est.coeffs[0], &sh_basis(&s.normal).unwrap()) - s.intensity).abs())
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mad < 1e-9, "{mad}");
    }

    #[test]
    fn huge_regularizer_matches_global_solution() {
        let base = test_lattice();
        let truth = base.with_coeffs(
            (0..base.num_nodes())
                .map(|n| {
                    let p = base.node_position(n);
                    let mut l = LSTAR;
                    l[0] += 2.0 * p.x;
                    l[2] -= 1.5 * p.y;
                    l
                })
                .collect(),
        );
        let samples = sphere_samples(&base, &truth, 3000, 1.0);
        let global = estimate_lighting_from_samples(&SubvolumeLattice::global([0.0; 9]), &samples, 0.0).unwrap();
        let stiff = estimate_lighting_from_samples(&base, &samples, 1e6).unwrap();
        for c in &stiff.coeffs {
            for m in 0..9 {
                assert!((c[m] - global.coeffs[0][m]).abs() < 1e-4, "{m}: {} vs {}", c[m], global.coeffs[0][m]);
            }
        }
    }

    #[test]
    fn zero_intensity_gives_zero_lighting() {
        let base = test_lattice();
        let mut samples = sphere_samples(&base, &SubvolumeLattice::global(LSTAR), 500, 1.0);
        samples.iter_mut().for_each(|s| s.intensity = 0.0);
        let est = estimate_lighting_from_samples(&base, &samples, 0.01).unwrap();
        assert!(est.coeffs.iter().all(|c| c.iter().all(|v| *v == 0.0)));
        assert!(matches!(
            estimate_lighting_from_samples(&base, &[], 0.01),
            Err(Error::EmptyLattice)
        ));
    }

    #[test]
    fn dense_and_iterative_solvers_agree() {
        let base = SubvolumeLattice::covering(&Vector3::zeros(), &Vector3::new(0.2, 0.1, 0.1), 0.035).unwrap();
        let truth = base.with_coeffs(
            (0..base.num_nodes())
                .map(|n| {
                    let p = base.node_position(n);
                    let mut l = LSTAR;
                    l[0] += p.x + p.z;
                    l
                })
                .collect(),
        );
        let samples = sphere_samples(&base, &truth, 4000, 0.9);
        let mut sys = assemble_data(&base, &samples).unwrap();
        let lam = 0.05;
        let eye = Block::identity() * lam;
        for a in 0..base.num_nodes() {
            let c = base.node_coords(a);
            for ax in 0..3 {
                if c[ax] + 1 < base.dims[ax] {
                    let mut cb = c;
                    cb[ax] += 1;
                    let b = base.node_index(cb[0], cb[1], cb[2]);
                    *sys.block(a, 13) += eye;
                    *sys.block(b, 13) += eye;
                    *sys.block(a, slot(&base, a, b)) -= eye;
                    *sys.block(b, slot(&base, b, a)) -= eye;
                }
            }
        }
        let mut active: Vec<usize> = sys.rows.keys().copied().collect();
        active.sort_unstable();
        let d = solve_dense(&base, &sys, &active).unwrap();
        let i = solve_pcg(&base, &sys, &active).unwrap();
        let err = d.iter().zip(&i).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn objective_improves_on_zero_and_finer_lattices_fit_better() {
        let coarse = SubvolumeLattice::covering(&Vector3::zeros(), &Vector3::new(0.2, 0.1, 0.1), 0.1).unwrap();
        // Nested: spacing halves and origins coincide.
        let fine = SubvolumeLattice {
            t_sv: 0.05,
            dims: coarse.dims.map(|d| 2 * d - 1),
            origin: coarse.origin,
            coeffs: vec![[0.0; 9]; coarse.dims.iter().map(|d| 2 * d - 1).product()],
        };
        let truth = fine.with_coeffs(
            (0..fine.num_nodes())
                .map(|n| {
                    let p = fine.node_position(n);
                    let mut l = LSTAR;
                    l[0] += 3.0 * (p.x * 20.0).sin() * p.y;
                    l[3] += 2.0 * p.z;
                    l
                })
                .collect(),
        );
        let samples = sphere_samples(&fine, &truth, 3000, 0.7);
        let lam = 0.01;
        let ec = estimate_lighting_from_samples(&coarse, &samples, lam).unwrap();
        let zero = lighting_objective(&coarse, &samples, lam).unwrap();
        assert!(lighting_objective(&ec, &samples, lam).unwrap() <= zero);
        let ec0 = estimate_lighting_from_samples(&coarse, &samples, 0.0).unwrap();
        let ef0 = estimate_lighting_from_samples(&fine, &samples, 0.0).unwrap();
        let oc = lighting_objective(&ec0, &samples, 0.0).unwrap();
        let of = lighting_objective(&ef0, &samples, 0.0).unwrap();
        assert!(of <= oc * (1.0 + 1e-9), "{of} > {oc}");
    }

    #[test]
    fn albedo_light_ambiguity_is_exact() {
        let lat = test_lattice();
        let n = Vector3::new(0.0, 0.6, -0.8);
        let p = Vector3::new(0.07, 0.03, 0.08);
        let l = lat.interp(&p).unwrap();
        let s = 4.0;
        let ls = lat.scaled(1.0 / s).interp(&p).unwrap();
        let a = shading(0.5, &n, &l).unwrap();
        let b = shading(0.5 * s, &n, &ls).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let lat = test_lattice();
        let back = SubvolumeLattice::parse(&lat.to_text(), Path::new("l.txt")).unwrap();
        assert_eq!(back, lat);
        let g = SubvolumeLattice::global(LSTAR);
        let back = SubvolumeLattice::parse(&g.to_text(), Path::new("l.txt")).unwrap();
        assert_eq!(back.coeffs, g.coeffs);
        assert!(SubvolumeLattice::parse("# t_sv=1\n", Path::new("l.txt")).is_err());
    }
}
