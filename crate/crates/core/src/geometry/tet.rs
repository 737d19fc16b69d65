//! Body-centered tetrahedral lattice over [-1,1]^3 with a signed distance
//! value and a bounded position offset per lattice vertex, plus
//! differentiable marching-tets surface extraction.
//!
//! Lattice: an n^3 corner grid and an (n-1)^3 cell-center grid. Every
//! interior corner-grid face (shared by two adjacent cells) spawns four
//! tetrahedra, one per face edge, connecting the two cell centers with that
//! edge. The outermost half-cell shell is therefore not tetrahedralized;
//! scenes are expected to live inside the unit sphere, well clear of it.
//!
//! Offsets are stored raw and squashed through tanh, so each component of an
//! effective offset is bounded by a quarter of the lattice spacing no matter
//! what the optimizer does.

use super::TriMesh;
use crate::math::{vec3, Real, Vec3};
use crate::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct TetGrid<S> {
    n: usize,
    tets: Vec<[u32; 4]>,
    /// Signed distance per lattice vertex, negative inside.
    pub sdf: Vec<S>,
    /// Raw per-vertex offsets, 3 per vertex; effective offset is
    /// `offset_bound() * tanh(raw)` componentwise.
    pub offsets: Vec<S>,
}

impl<S: Real> TetGrid<S> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 4, "tet lattice needs n >= 4, got {n}");
        let nc = n - 1;
        let corner = |x: usize, y: usize, z: usize| ((z * n + y) * n + x) as u32;
        let center = |x: usize, y: usize, z: usize| (n * n * n + (z * nc + y) * nc + x) as u32;

        let mut tets = Vec::with_capacity(12 * (n - 2) * nc * nc);
        // axis 0: cell pairs along x, shared face at corner plane x = cx+1
        for cx in 0..n - 2 {
            for cy in 0..nc {
                for cz in 0..nc {
                    let a = center(cx, cy, cz);
                    let b = center(cx + 1, cy, cz);
                    let q = [
                        corner(cx + 1, cy, cz),
                        corner(cx + 1, cy + 1, cz),
                        corner(cx + 1, cy + 1, cz + 1),
                        corner(cx + 1, cy, cz + 1),
                    ];
                    push_face_tets(&mut tets, a, b, q);
                }
            }
        }
        // axis 1: cell pairs along y
        for cy in 0..n - 2 {
            for cx in 0..nc {
                for cz in 0..nc {
                    let a = center(cx, cy, cz);
                    let b = center(cx, cy + 1, cz);
                    let q = [
                        corner(cx, cy + 1, cz),
                        corner(cx + 1, cy + 1, cz),
                        corner(cx + 1, cy + 1, cz + 1),
                        corner(cx, cy + 1, cz + 1),
                    ];
                    push_face_tets(&mut tets, a, b, q);
                }
            }
        }
        // axis 2: cell pairs along z
        for cz in 0..n - 2 {
            for cx in 0..nc {
                for cy in 0..nc {
                    let a = center(cx, cy, cz);
                    let b = center(cx, cy, cz + 1);
                    let q = [
                        corner(cx, cy, cz + 1),
                        corner(cx + 1, cy, cz + 1),
                        corner(cx + 1, cy + 1, cz + 1),
                        corner(cx, cy + 1, cz + 1),
                    ];
                    push_face_tets(&mut tets, a, b, q);
                }
            }
        }

        let vcount = n * n * n + nc * nc * nc;
        let mut grid = TetGrid {
            n,
            tets,
            sdf: vec![S::zero(); vcount],
            offsets: vec![S::zero(); 3 * vcount],
        };
        grid.orient_tets();
        grid
    }

    fn orient_tets(&mut self) {
        let mut fixed = Vec::new();
        std::mem::swap(&mut fixed, &mut self.tets);
        for tet in &mut fixed {
            let p: Vec<Vec3<S>> = tet.iter().map(|&v| self.base_position(v as usize)).collect();
            let vol = (p[1] - p[0]).cross(p[2] - p[0]).dot(p[3] - p[0]);
            if vol < S::zero() {
                tet.swap(2, 3);
            }
        }
        self.tets = fixed;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Lattice side length this grid was built with.
    pub fn res(&self) -> usize {
        self.n
    }

    pub fn vertex_count(&self) -> usize {
        self.sdf.len()
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn offset_bound(&self) -> f64 {
        self.spacing() / 4.0
    }

    /// Lattice vertex position before offsets.
    pub fn base_position(&self, i: usize) -> Vec3<S> {
        let n = self.n;
        let n3 = n * n * n;
        let h = S::of(self.spacing());
        let one = S::one();
        if i < n3 {
            let x = i % n;
            let y = (i / n) % n;
            let z = i / (n * n);
            vec3(
                S::of(x as f64) * h - one,
                S::of(y as f64) * h - one,
                S::of(z as f64) * h - one,
            )
        } else {
            let nc = n - 1;
            let j = i - n3;
            let x = j % nc;
            let y = (j / nc) % nc;
            let z = j / (nc * nc);
            let half = S::of(0.5);
            vec3(
                (S::of(x as f64) + half) * h - one,
                (S::of(y as f64) + half) * h - one,
                (S::of(z as f64) + half) * h - one,
            )
        }
    }

    /// Effective position: base plus tanh-bounded offset.
    pub fn position(&self, i: usize) -> Vec3<S> {
        let b = S::of(self.offset_bound());
        let base = self.base_position(i);
        vec3(
            base.x + b * self.offsets[3 * i].tanh(),
            base.y + b * self.offsets[3 * i + 1].tanh(),
            base.z + b * self.offsets[3 * i + 2].tanh(),
        )
    }
}

fn push_face_tets(tets: &mut Vec<[u32; 4]>, a: u32, b: u32, q: [u32; 4]) {
    for k in 0..4 {
        tets.push([a, b, q[k], q[(k + 1) % 4]]);
    }
}

/// Surface topology extracted at a fixed sign pattern. As long as no lattice
/// sdf value crosses zero, connectivity is frozen and only vertex positions
/// move; re-extraction then reuses this and skips the tet sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TetTopology {
    pub signs: Vec<bool>,
    /// Generating lattice edge (canonical low < high) per mesh vertex.
    pub edge_vertices: Vec<(u32, u32)>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone)]
pub struct ExtractedMesh<S> {
    pub mesh: TriMesh<S>,
    pub topology: TetTopology,
}

fn crossing_point<S: Real>(grid: &TetGrid<S>, a: u32, b: u32) -> Vec3<S> {
    let sa = grid.sdf[a as usize];
    let sb = grid.sdf[b as usize];
    let tau = sa / (sa - sb);
    let pa = grid.position(a as usize);
    let pb = grid.position(b as usize);
    pa + (pb - pa) * tau
}

/// Extracts the zero level set. `previous` enables the frozen-topology fast
/// path when the sign pattern is unchanged.
pub fn marching_tets<S: Real>(
    grid: &TetGrid<S>,
    previous: Option<&TetTopology>,
) -> Result<ExtractedMesh<S>> {
    let signs: Vec<bool> = grid.sdf.iter().map(|s| *s < S::zero()).collect();

    if let Some(prev) = previous {
        if prev.signs == signs {
            let vertices = prev
                .edge_vertices
                .iter()
                .map(|&(a, b)| crossing_point(grid, a, b))
                .collect();
            return Ok(ExtractedMesh {
                mesh: TriMesh {
                    vertices,
                    faces: prev.faces.clone(),
                },
                topology: prev.clone(),
            });
        }
    }

    let mut edge_ids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut edge_vertices: Vec<(u32, u32)> = Vec::new();
    let mut vertices: Vec<Vec3<S>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    let vertex_on = |grid: &TetGrid<S>,
                         a: u32,
                         b: u32,
                         edge_ids: &mut HashMap<(u32, u32), u32>,
                         edge_vertices: &mut Vec<(u32, u32)>,
                         vertices: &mut Vec<Vec3<S>>|
     -> u32 {
        let key = (a.min(b), a.max(b));
        *edge_ids.entry(key).or_insert_with(|| {
            let id = vertices.len() as u32;
            vertices.push(crossing_point(grid, key.0, key.1));
            edge_vertices.push(key);
            id
        })
    };

    for tet in grid.tets() {
        let inside: Vec<usize> = (0..4).filter(|&k| signs[tet[k] as usize]).collect();
        if inside.is_empty() || inside.len() == 4 {
            continue;
        }
        let outside: Vec<usize> = (0..4).filter(|&k| !signs[tet[k] as usize]).collect();

        // outward reference: from the inside verts toward the outside verts
        let mean = |ks: &[usize]| {
            let mut m = Vec3::zero();
            for &k in ks {
                m += grid.position(tet[k] as usize);
            }
            m * (S::one() / S::of(ks.len() as f64))
        };
        let out_dir = mean(&outside) - mean(&inside);

        let emit = |tri: [u32; 3],
                        vertices: &Vec<Vec3<S>>,
                        faces: &mut Vec<[u32; 3]>| {
            let p0 = vertices[tri[0] as usize];
            let p1 = vertices[tri[1] as usize];
            let p2 = vertices[tri[2] as usize];
            let n = (p1 - p0).cross(p2 - p0);
            if n.norm_sq() <= S::of(1e-24) {
                return; // collapsed sliver, both endpoints on the same lattice vertex
            }
            if n.dot(out_dir) < S::zero() {
                faces.push([tri[0], tri[2], tri[1]]);
            } else {
                faces.push(tri);
            }
        };

        match inside.len() {
            1 | 3 => {
                // lone vertex (inside or outside): one triangle on its 3 edges
                let lone = if inside.len() == 1 { inside[0] } else { outside[0] };
                let others: Vec<usize> = (0..4).filter(|&k| k != lone).collect();
                let tri = [
                    vertex_on(grid, tet[lone], tet[others[0]], &mut edge_ids, &mut edge_vertices, &mut vertices),
                    vertex_on(grid, tet[lone], tet[others[1]], &mut edge_ids, &mut edge_vertices, &mut vertices),
                    vertex_on(grid, tet[lone], tet[others[2]], &mut edge_ids, &mut edge_vertices, &mut vertices),
                ];
                emit(tri, &vertices, &mut faces);
            }
            2 => {
                // quad on the 4 crossing edges, walked so neighbors share a tet vertex
                let (a1, a2) = (inside[0], inside[1]);
                let (b1, b2) = (outside[0], outside[1]);
                let q = [
                    vertex_on(grid, tet[a1], tet[b1], &mut edge_ids, &mut edge_vertices, &mut vertices),
                    vertex_on(grid, tet[a1], tet[b2], &mut edge_ids, &mut edge_vertices, &mut vertices),
                    vertex_on(grid, tet[a2], tet[b2], &mut edge_ids, &mut edge_vertices, &mut vertices),
                    vertex_on(grid, tet[a2], tet[b1], &mut edge_ids, &mut edge_vertices, &mut vertices),
                ];
                emit([q[0], q[1], q[2]], &vertices, &mut faces);
                emit([q[0], q[2], q[3]], &vertices, &mut faces);
            }
            _ => unreachable!(),
        }
    }

    if vertices.is_empty() {
        return Err(Error::geometry(
            "marching tets found no level-set crossing; the field has no surface at this threshold",
        ));
    }

    let topology = TetTopology {
        signs,
        edge_vertices,
        faces: faces.clone(),
    };
    Ok(ExtractedMesh {
        mesh: TriMesh { vertices, faces },
        topology,
    })
}

/// Backpropagates mesh-vertex gradients to the lattice sdf values and raw
/// offsets. Topology is treated as frozen, matching the forward pass.
pub fn marching_tets_backward<S: Real>(
    grid: &TetGrid<S>,
    extracted: &ExtractedMesh<S>,
    d_vertices: &[Vec3<S>],
    d_sdf: &mut [S],
    d_offsets: &mut [S],
) {
    assert_eq!(d_vertices.len(), extracted.mesh.vertices.len());
    assert_eq!(d_sdf.len(), grid.sdf.len());
    assert_eq!(d_offsets.len(), grid.offsets.len());
    let bound = S::of(grid.offset_bound());

    for (vid, &(a, b)) in extracted.topology.edge_vertices.iter().enumerate() {
        let g = d_vertices[vid];
        let (ai, bi) = (a as usize, b as usize);
        let sa = grid.sdf[ai];
        let sb = grid.sdf[bi];
        let denom = sa - sb;
        let tau = sa / denom;
        let pa = grid.position(ai);
        let pb = grid.position(bi);
        let dir = pb - pa;

        // v = pa + tau (pb - pa)
        let g_dot_dir = g.dot(dir);
        d_sdf[ai] += g_dot_dir * (-sb / (denom * denom));
        d_sdf[bi] += g_dot_dir * (sa / (denom * denom));

        let one = S::one();
        for axis in 0..3 {
            let ga = g[axis] * (one - tau);
            let gb = g[axis] * tau;
            let ta = grid.offsets[3 * ai + axis].tanh();
            let tb = grid.offsets[3 * bi + axis].tanh();
            d_offsets[3 * ai + axis] += ga * bound * (one - ta * ta);
            d_offsets[3 * bi + axis] += gb * bound * (one - tb * tb);
        }
    }
}
