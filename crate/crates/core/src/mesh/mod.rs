//! Marching-cubes extraction of the zero level set and mesh file I/O.

mod ply;
mod table;

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::sdf::{SparseSdf, VoxelKey};

pub use ply::{parse_ply, read_ply, write_obj, write_ply};

/// Triangles below this area (m²) are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() || self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Twice-area-weighted normal of triangle `t` (unnormalized).
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a))
    }

    /// Checks index ranges and attribute lengths.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.colors.len() != n {
            return Err(crate::Error::InvalidInput(format!(
                "attribute lengths {} / {} do not match {n} vertices",
                self.normals.len(),
                self.colors.len()
            )));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(crate::Error::InvalidInput(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        Ok(())
    }

    /// Counts of undirected edges by number of incident triangles.
    pub fn edge_valence(&self) -> FxHashMap<(u32, u32), usize> {
        let mut m = FxHashMap::default();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// True if every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_valence().values().all(|&c| c == 2)
    }
}

const CORNERS: [(i32, i32, i32); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Grid edge identified by its lower endpoint and axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct EdgeKey {
    base: VoxelKey,
    axis: u8,
}

fn edge_key(cell: VoxelKey, edge: usize) -> EdgeKey {
    let (a, b) = EDGES[edge];
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let lo = (ca.0.min(cb.0), ca.1.min(cb.1), ca.2.min(cb.2));
    let axis = if ca.0 != cb.0 {
        0
    } else if ca.1 != cb.1 {
        1
    } else {
        2
    };
    EdgeKey {
        base: cell.offset(lo.0, lo.1, lo.2),
        axis,
    }
}

/// Triangles of one cell as edge-key triples, or `None` if the cell is skipped.
fn cell_triangles(sdf: &SparseSdf, cell: VoxelKey) -> Option<Vec<[EdgeKey; 3]>> {
    let mut index = 0usize;
    for (c, &(di, dj, dk)) in CORNERS.iter().enumerate() {
        let v = sdf.observed(cell.offset(di, dj, dk))?;
        if v.d_refined < 0.0 {
            index |= 1 << c;
        }
    }
    if index == 0 || index == 255 {
        return None;
    }
    let row = &table::TRIANGLES[index];
    let tris = row
        .chunks(3)
        .take_while(|t| t[0] >= 0)
        .map(|t| {
            // The table winds triangles toward the corners flagged negative, which
            // here are outside, so the order already matches outward normals.
            [
                edge_key(cell, t[0] as usize),
                edge_key(cell, t[1] as usize),
                edge_key(cell, t[2] as usize),
            ]
        })
        .collect();
    Some(tris)
}

struct EdgeVertex {
    position: Vector3<f64>,
    normal: Option<Vector3<f64>>,
    color: [f64; 3],
}

fn edge_vertex(sdf: &SparseSdf, e: EdgeKey) -> EdgeVertex {
    let ka = e.base;
    let kb = e.base.step(e.axis as usize, 1);
    let va = sdf.get(ka).expect("edge endpoint allocated");
    let vb = sdf.get(kb).expect("edge endpoint allocated");
    let t = va.d_refined / (va.d_refined - vb.d_refined);
    let position = sdf.center(ka) * (1.0 - t) + sdf.center(kb) * t;
    let mut color = [0.0; 3];
    for c in 0..3 {
        color[c] = va.color[c] * (1.0 - t) + vb.color[c] * t;
    }
    let normal = match (sdf.gradient(ka).ok(), sdf.gradient(kb).ok()) {
        (Some(ga), Some(gb)) => Some(ga * (1.0 - t) + gb * t),
        (Some(g), None) | (None, Some(g)) => Some(g),
        (None, None) => None,
    }
    .and_then(|g| {
        let n = g.norm();
        (n > 1e-12).then(|| -g / n)
    });
    EdgeVertex {
        position,
        normal,
        color,
    }
}

/// Extracts the zero level set of `d_refined` over cells whose 8 corners are all observed.
/// Vertex normals point outward (toward negative distances).
pub fn marching_cubes(sdf: &SparseSdf) -> TriMesh {
    let cells = sdf
        .sorted_keys()
        .into_iter()
        .filter(|k| sdf.observed(*k).is_some())
        .collect::<Vec<_>>();
    let per_cell: Vec<Option<Vec<[EdgeKey; 3]>>> =
        cells.par_iter().map(|&c| cell_triangles(sdf, c)).collect();

    let mut index_of: FxHashMap<EdgeKey, u32> = FxHashMap::default();
    let mut edges: Vec<EdgeKey> = Vec::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();
    for t in per_cell.into_iter().flatten().flatten() {
        tris.push(t.map(|e| {
            *index_of.entry(e).or_insert_with(|| {
                edges.push(e);
                (edges.len() - 1) as u32
            })
        }));
    }
    let verts: Vec<EdgeVertex> = edges.par_iter().map(|&e| edge_vertex(sdf, e)).collect();
    let vertices: Vec<Vector3<f64>> = verts.iter().map(|v| v.position).collect();
    tris.retain(|t| {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm() >= MIN_TRIANGLE_AREA
    });

    let mut mesh = TriMesh {
        normals: vec![Vector3::zeros(); vertices.len()],
        colors: verts.iter().map(|v| v.color).collect(),
        vertices,
        triangles: tris,
    };
    if verts.iter().any(|v| v.normal.is_none()) {
        let mut acc = vec![Vector3::zeros(); mesh.vertices.len()];
        for t in 0..mesh.triangles.len() {
            let n = mesh.face_normal(t);
            for &i in &mesh.triangles[t] {
                acc[i as usize] += n;
            }
        }
        for (i, v) in verts.iter().enumerate() {
            mesh.normals[i] = v.normal.unwrap_or_else(|| acc[i].try_normalize(0.0).unwrap_or(Vector3::z()));
        }
    } else {
        for (i, v) in verts.iter().enumerate() {
            mesh.normals[i] = v.normal.unwrap();
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_sdf(voxel: f64, r: f64) -> SparseSdf {
        let n = ((r * 1.3) / voxel).ceil() as i32;
        let keys: Vec<VoxelKey> = (-n..n)
            .flat_map(|i| (-n..n).flat_map(move |j| (-n..n).map(move |k| VoxelKey::new(i, j, k))))
            .collect();
        let mut sdf = SparseSdf::from_field(voxel, 5.0 * voxel, Vector3::zeros(), keys, |_, c| r - c.norm()).unwrap();
        for (_, v) in sdf.iter_mut() {
            v.color = [0.5, 0.25, 1.0];
        }
        sdf
    }

    #[test]
    fn table_edges_close_each_case() {
        // Every edge used by a case must connect a flagged and an unflagged corner,
        // and each case yields a closed boundary loop on the cube surface.
        for case in 1..255usize {
            let row = &table::TRIANGLES[case];
            let mut count = [0usize; 12];
            for &e in row.iter().take_while(|&&e| e >= 0) {
                let (a, b) = EDGES[e as usize];
                assert_ne!((case >> a) & 1, (case >> b) & 1, "case {case} edge {e}");
                count[e as usize] += 1;
            }
            for (e, &(a, b)) in EDGES.iter().enumerate() {
                if (case >> a) & 1 != (case >> b) & 1 {
                    assert!(count[e] > 0, "case {case} misses crossing edge {e}");
                }
            }
        }
    }

    #[test]
    fn single_negative_corner_gives_one_triangle() {
        let keys: Vec<VoxelKey> = CORNERS.iter().map(|&(i, j, k)| VoxelKey::new(i, j, k)).collect();
        let sdf = SparseSdf::from_field(1.0, 5.0, Vector3::zeros(), keys, |k, _| {
            if k == VoxelKey::new(0, 0, 0) { -1.0 } else { 1.0 }
        })
        .unwrap();
        let m = marching_cubes(&sdf);
        assert_eq!(m.triangles.len(), 1);
        assert_eq!(m.vertices.len(), 3);
        for v in &m.vertices {
            let c = v - Vector3::repeat(0.5);
            let offs = c.iter().filter(|x| x.abs() > 1e-12).count();
            assert_eq!(offs, 1, "vertex {v:?} should be an edge midpoint");
            assert!((c.sum() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn no_sign_change_gives_empty_mesh() {
        let keys: Vec<VoxelKey> = CORNERS.iter().map(|&(i, j, k)| VoxelKey::new(i, j, k)).collect();
        let sdf = SparseSdf::from_field(1.0, 5.0, Vector3::zeros(), keys, |_, _| 1.0).unwrap();
        assert!(marching_cubes(&sdf).is_empty());
    }

    #[test]
    fn unobserved_corner_skips_cell() {
        let keys: Vec<VoxelKey> = CORNERS.iter().map(|&(i, j, k)| VoxelKey::new(i, j, k)).collect();
        let mut sdf = SparseSdf::from_field(1.0, 5.0, Vector3::zeros(), keys, |k, _| {
            if k == VoxelKey::new(0, 0, 0) { -1.0 } else { 1.0 }
        })
        .unwrap();
        sdf.get_mut(VoxelKey::new(1, 1, 1)).unwrap().weight = 0.0;
        assert!(marching_cubes(&sdf).is_empty());
    }

    #[test]
    fn sphere_is_accurate_watertight_and_outward() {
        let r = 0.1;
        let s = 0.004;
        let sdf = sphere_sdf(s, r);
        let m = marching_cubes(&sdf);
        m.validate().unwrap();
        assert!(m.triangles.len() > 1000);
        let errs: Vec<f64> = m.vertices.iter().map(|v| v.norm() - r).collect();
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(rms < s && mean.abs() < 0.001, "rms {rms} mean {mean}");
        assert!(m.is_watertight());

        let mut outward = 0;
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(t);
            if m.face_normal(t).dot(&((a + b + c) / 3.0)) > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, m.triangles.len());

        let mut angles: Vec<f64> = (0..m.triangles.len())
            .flat_map(|t| {
                let fnrm = m.face_normal(t).normalize();
                m.triangles[t].map(|i| m.normals[i as usize].dot(&fnrm).clamp(-1.0, 1.0).acos().to_degrees())
            })
            .collect();
        angles.sort_by(f64::total_cmp);
        assert!(angles[angles.len() / 2] < 15.0, "median {}", angles[angles.len() / 2]);
        assert!(m.colors.iter().all(|c| (c[1] - 0.25).abs() < 1e-12));
    }

    #[test]
    fn vertices_lie_in_generating_cells_and_extraction_is_deterministic() {
        let sdf = sphere_sdf(0.01, 0.05);
        let a = marching_cubes(&sdf);
        let b = marching_cubes(&sdf);
        assert_eq!(a, b);
        // Each vertex lies on a grid edge between two voxel centers.
        for v in &a.vertices {
            let q = v / 0.01 - Vector3::repeat(0.5);
            let off = q.iter().filter(|x| (*x - x.round()).abs() > 1e-9).count();
            assert!(off <= 1, "{q:?}");
        }
    }
}
