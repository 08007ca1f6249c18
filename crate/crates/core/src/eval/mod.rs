//! Reconstruction metrics: shading error, mesh-to-mesh distance, pose error, and exports.

mod colormap;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::lighting::{dot9, lighting_samples, sh_basis_generic, SubvolumeLattice};
use crate::mesh::{write_ply, TriMesh};
use crate::sdf::{SparseSdf, VoxelKey};

/// Scale factor from unit intensities to the reported 0-255 range.
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ShadingError {
    /// Mean of `|B − I|` on the 0-255 scale.
    pub mad: f64,
    pub count: usize,
    /// Per-voxel `|B − I|` on the 0-255 scale, sorted by key.
    pub per_voxel: Vec<(VoxelKey, f64)>,
}

/// Mean absolute difference between modeled shading `B` and observed intensity `I` over
/// the given voxels (typically the thin shell).
pub fn shading_mad(sdf: &SparseSdf, lattice: &SubvolumeLattice, keys: &[VoxelKey]) -> Result<ShadingError> {
    let usable: Vec<VoxelKey> = keys
        .iter()
        .copied()
        .filter(|&k| sdf.observed(k).is_some() && sdf.normal(k).is_ok())
        .collect();
    let samples = lighting_samples(sdf, &usable);
    if samples.is_empty() {
        return Err(Error::EmptyShell);
    }
    let diffs: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let l = lattice.interp(&s.position)?;
            let h = sh_basis_generic([s.normal.x, s.normal.y, s.normal.z]);
            let b = s.albedo * dot9(&l, &h);
            Ok((b - s.intensity).abs() * INTENSITY_SCALE)
        })
        .collect::<Result<_>>()?;
    let mad = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok(ShadingError {
        mad,
        count: diffs.len(),
        per_voxel: usable.into_iter().zip(diffs).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshDistance {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Distance of every test vertex to the reference surface (m).
    pub per_vertex: Vec<f64>,
}

impl MeshDistance {
    fn from_distances(per_vertex: Vec<f64>) -> Self {
        let n = per_vertex.len() as f64;
        let mean = per_vertex.iter().sum::<f64>() / n;
        let var = per_vertex.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let max = per_vertex.iter().cloned().fold(0.0, f64::max);
        Self {
            mean,
            std: var.sqrt(),
            max,
            per_vertex,
        }
    }
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    if ab.cross(&ac).norm_squared() <= f64::EPSILON * ab.norm_squared() * ac.norm_squared() {
        // Degenerate: nearest of the three edges.
        let cands = [closest_on_segment(p, a, b), closest_on_segment(p, b, c), closest_on_segment(p, c, a)];
        return *cands
            .iter()
            .min_by(|x, y| (*x - p).norm_squared().total_cmp(&(*y - p).norm_squared()))
            .unwrap();
    }
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn closest_on_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let l2 = ab.norm_squared();
    if l2 == 0.0 {
        return *a;
    }
    a + ab * ((p - a).dot(&ab) / l2).clamp(0.0, 1.0)
}

/// Uniform grid over a mesh's triangles for nearest-surface queries.
pub struct TriangleGrid<'a> {
    mesh: &'a TriMesh,
    lo: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriangleGrid<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for t in &mesh.triangles {
            for &i in t {
                lo = lo.inf(&mesh.vertices[i as usize]);
                hi = hi.sup(&mesh.vertices[i as usize]);
            }
        }
        let ext = hi - lo;
        // About two triangles per occupied cell on a surface mesh.
        let area: f64 = (0..mesh.triangles.len()).map(|t| 0.5 * mesh.face_normal(t).norm()).sum();
        let mut cell = (2.0 * area / mesh.triangles.len() as f64).sqrt() * 2.0;
        let max_ext = ext.max();
        if !(cell > 0.0) {
            cell = max_ext.max(1e-9);
        }
        cell = cell.max(max_ext / 256.0).max(1e-12);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).max(1));
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let vs = t.map(|i| mesh.vertices[i as usize]);
            let tlo = vs[0].inf(&vs[1]).inf(&vs[2]);
            let thi = vs[0].sup(&vs[1]).sup(&vs[2]);
            let a = [0, 1, 2].map(|k| (((tlo[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1));
            let b = [0, 1, 2].map(|k| (((thi[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1));
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        cells[(z * dims[1] + y) * dims[0] + x].push(ti as u32);
                    }
                }
            }
        }
        Ok(Self {
            mesh,
            lo,
            cell,
            dims,
            cells,
        })
    }

    /// Distance from `p` to the nearest point of the mesh surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let c0 = [0, 1, 2].map(|a| {
            let q = ((p[a] - self.lo[a]) / self.cell).floor();
            q.clamp(0.0, (self.dims[a] - 1) as f64) as isize
        });
        let max_ring = self.dims.iter().copied().max().unwrap() as isize;
        let mut best2 = f64::INFINITY;
        for r in 0..=max_ring {
            for z in c0[2] - r..=c0[2] + r {
                for y in c0[1] - r..=c0[1] + r {
                    for x in c0[0] - r..=c0[0] + r {
                        let ring = (x - c0[0]).abs().max((y - c0[1]).abs()).max((z - c0[2]).abs());
                        if ring != r {
                            continue;
                        }
                        if x < 0
                            || y < 0
                            || z < 0
                            || x >= self.dims[0] as isize
                            || y >= self.dims[1] as isize
                            || z >= self.dims[2] as isize
                        {
                            continue;
                        }
                        let idx = (z as usize * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                        for &t in &self.cells[idx] {
                            let [a, b, c] = self.mesh.triangle(t as usize);
                            let q = closest_point_on_triangle(p, &a, &b, &c);
                            best2 = best2.min((q - p).norm_squared());
                        }
                    }
                }
            }
            // Cells in ring r + 1 are at least r cell widths away.
            let bound = r as f64 * self.cell;
            if best2 <= bound * bound {
                break;
            }
        }
        best2.sqrt()
    }
}

/// Distance from every vertex of `test` to the surface of `reference` (test → reference).
pub fn mesh_mad(test: &TriMesh, reference: &TriMesh) -> Result<MeshDistance> {
    if test.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let grid = TriangleGrid::new(reference)?;
    let d: Vec<f64> = test.vertices.par_iter().map(|v| grid.distance(v)).collect();
    Ok(MeshDistance::from_distances(d))
}

/// Symmetric Hausdorff distance: the larger of the two directed maxima.
pub fn hausdorff(a: &TriMesh, b: &TriMesh) -> Result<f64> {
    Ok(mesh_mad(a, b)?.max.max(mesh_mad(b, a)?.max))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
}

/// Per-frame errors after mapping the estimated trajectory so that its first pose
/// coincides with the first true pose.
pub fn pose_error(estimated: &[Pose], truth: &[Pose]) -> Result<Vec<PoseError>> {
    if estimated.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            truth.len()
        )));
    }
    let Some((e0, t0)) = estimated.first().zip(truth.first()) else {
        return Ok(Vec::new());
    };
    let gauge = t0.compose(&e0.inverse());
    Ok(estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            let a = gauge.compose(e);
            PoseError {
                rotation_deg: a.rotation_angle_deg(t),
                translation: (a.translation - t.translation).norm(),
            }
        })
        .collect())
}

/// Mean rotation (deg) and translation (m) error.
pub fn mean_pose_error(errs: &[PoseError]) -> (f64, f64) {
    if errs.is_empty() {
        return (0.0, 0.0);
    }
    let n = errs.len() as f64;
    (
        errs.iter().map(|e| e.rotation_deg).sum::<f64>() / n,
        errs.iter().map(|e| e.translation).sum::<f64>() / n,
    )
}

/// Colormap entry for `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let i = (t.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap::VIRIDIS[i]
}

/// Copy of `mesh` with vertex colors mapped from `values` over `[0, vmax]`.
pub fn heatmap_mesh(mesh: &TriMesh, values: &[f64], vmax: f64) -> Result<TriMesh> {
    if values.len() != mesh.vertices.len() {
        return Err(Error::InvalidInput(format!(
            "{} values for {} vertices",
            values.len(),
            mesh.vertices.len()
        )));
    }
    let scale = if vmax > 0.0 { 1.0 / vmax } else { 0.0 };
    let mut out = mesh.clone();
    out.colors = values
        .iter()
        .map(|v| colormap(v * scale).map(|c| c as f64 / 255.0))
        .collect();
    Ok(out)
}

pub fn write_heatmap_ply(mesh: &TriMesh, values: &[f64], vmax: f64, path: &Path) -> Result<()> {
    write_ply(&heatmap_mesh(mesh, values, vmax)?, path)
}

fn write_text(path: &Path, s: String) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `vertex,x,y,z,distance` rows.
pub fn write_vertex_distances_csv(mesh: &TriMesh, d: &MeshDistance, path: &Path) -> Result<()> {
    let mut s = String::from("vertex,x,y,z,distance\n");
    for (i, (v, dist)) in mesh.vertices.iter().zip(&d.per_vertex).enumerate() {
        writeln!(s, "{i},{},{},{},{dist}", v.x, v.y, v.z).unwrap();
    }
    write_text(path, s)
}

/// `i,j,k,shading_diff` rows.
pub fn write_shading_csv(e: &ShadingError, path: &Path) -> Result<()> {
    let mut s = String::from("i,j,k,shading_diff\n");
    for (k, v) in &e.per_voxel {
        writeln!(s, "{},{},{},{v}", k.i, k.j, k.k).unwrap();
    }
    write_text(path, s)
}

/// `frame,rotation_deg,translation_m` rows.
pub fn write_pose_errors_csv(errs: &[PoseError], frames: &[usize], path: &Path) -> Result<()> {
    let mut s = String::from("frame,rotation_deg,translation_m\n");
    for (f, e) in frames.iter().zip(errs) {
        writeln!(s, "{f},{},{}", e.rotation_deg, e.translation).unwrap();
    }
    write_text(path, s)
}

/// Colors of thin-shell voxels mapped from per-voxel shading differences, as a point mesh
/// (vertices only) for viewing.
pub fn shading_heatmap_points(sdf: &SparseSdf, e: &ShadingError, vmax: f64) -> TriMesh {
    let scale = if vmax > 0.0 { 1.0 / vmax } else { 0.0 };
    let mut m = TriMesh::default();
    for (k, v) in &e.per_voxel {
        m.vertices.push(sdf.center(*k));
        m.normals.push(sdf.normal(*k).map(|n| -n).unwrap_or(Vector3::z()));
        m.colors.push(colormap(v * scale).map(|c| c as f64 / 255.0));
    }
    m
}
