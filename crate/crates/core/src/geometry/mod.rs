//! Tetrahedral lattice, differentiable surface extraction, mesh
//! regularizers, level-set initialization, and mesh export.

mod export;
mod regularizers;
mod sdf;
mod tet;

pub use export::{export_mesh, export_obj, export_ply, AtlasConfig};
pub use regularizers::{
    build_edge_faces, build_vertex_neighbors, laplacian_energy, normal_consistency,
};
pub use sdf::{density_to_sdf, edt_3d, DensityToSdfConfig};
pub use tet::{marching_tets, marching_tets_backward, ExtractedMesh, TetGrid, TetTopology};

use crate::math::{Real, Vec3};

/// Plain indexed triangle mesh.
#[derive(Debug, Clone)]
pub struct TriMesh<S> {
    pub vertices: Vec<Vec3<S>>,
    pub faces: Vec<[u32; 3]>,
}

impl<S: Real> TriMesh<S> {
    pub fn face_normal(&self, f: usize) -> Vec3<S> {
        let [a, b, c] = self.faces[f];
        let pa = self.vertices[a as usize];
        let pb = self.vertices[b as usize];
        let pc = self.vertices[c as usize];
        (pb - pa).cross(pc - pa)
    }

    /// Area-weighted vertex normals, normalized.
    pub fn vertex_normals(&self) -> Vec<Vec3<S>> {
        let mut out = vec![Vec3::zero(); self.vertices.len()];
        for f in 0..self.faces.len() {
            let n = self.face_normal(f);
            for &v in &self.faces[f] {
                out[v as usize] += n;
            }
        }
        for n in &mut out {
            let len = n.norm();
            if len > S::zero() {
                *n = *n * (S::one() / len);
            }
        }
        out
    }

    pub fn surface_area(&self) -> S {
        let half = S::of(0.5);
        (0..self.faces.len())
            .map(|f| self.face_normal(f).norm() * half)
            .sum()
    }

    /// Undirected edge list, each edge once.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}
