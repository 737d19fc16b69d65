//! Mesh smoothness terms for the surface phase: uniform-Laplacian energy and
//! normal consistency across edges. Both return means so their weights do not
//! depend on extraction resolution, and both accumulate hand-derived vertex
//! gradients.

use super::TriMesh;
use crate::math::{Real, Vec3};
use std::collections::HashMap;

pub fn build_vertex_neighbors(faces: &[[u32; 3]], n_vertices: usize) -> Vec<Vec<u32>> {
    let mut nb: Vec<Vec<u32>> = vec![Vec::new(); n_vertices];
    for &[a, b, c] in faces {
        for (x, y) in [(a, b), (b, c), (c, a)] {
            nb[x as usize].push(y);
            nb[y as usize].push(x);
        }
    }
    for list in &mut nb {
        list.sort_unstable();
        list.dedup();
    }
    nb
}

/// Mean over vertices of `|mean(neighbors) - v|^2`. Gradients are added into
/// `d_vertices` when given.
pub fn laplacian_energy<S: Real>(
    vertices: &[Vec3<S>],
    neighbors: &[Vec<u32>],
    mut d_vertices: Option<&mut [Vec3<S>]>,
) -> S {
    assert_eq!(vertices.len(), neighbors.len());
    let active = neighbors.iter().filter(|n| !n.is_empty()).count();
    if active == 0 {
        return S::zero();
    }
    let inv_count = S::of(1.0 / active as f64);
    let two = S::of(2.0);
    let mut energy = S::zero();
    for (v, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let inv_deg = S::of(1.0 / nb.len() as f64);
        let mut mean = Vec3::zero();
        for &u in nb {
            mean += vertices[u as usize];
        }
        mean = mean * inv_deg;
        let r = mean - vertices[v];
        energy += r.norm_sq();
        if let Some(g) = d_vertices.as_deref_mut() {
            let coef = two * inv_count;
            g[v] += -r * coef;
            let spread = coef * inv_deg;
            for &u in nb {
                g[u as usize] += r * spread;
            }
        }
    }
    energy * inv_count
}

/// Pairs of faces sharing an edge.
pub fn build_edge_faces(faces: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut edge_face: HashMap<(u32, u32), u32> = HashMap::new();
    let mut pairs = Vec::new();
    for (fi, &[a, b, c]) in faces.iter().enumerate() {
        for (x, y) in [(a, b), (b, c), (c, a)] {
            let key = (x.min(y), x.max(y));
            match edge_face.entry(key) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    pairs.push((*e.get(), fi as u32));
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(fi as u32);
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Mean over adjacent face pairs of `1 - cos(angle between normals)`.
/// Degenerate faces are skipped.
pub fn normal_consistency<S: Real>(
    mesh: &TriMesh<S>,
    pairs: &[(u32, u32)],
    mut d_vertices: Option<&mut [Vec3<S>]>,
) -> S {
    if pairs.is_empty() {
        return S::zero();
    }
    let inv_pairs = S::of(1.0 / pairs.len() as f64);
    let tiny = S::of(1e-24);
    let mut energy = S::zero();
    for &(fa, fb) in pairs {
        let raw_a = mesh.face_normal(fa as usize);
        let raw_b = mesh.face_normal(fb as usize);
        let la = raw_a.norm();
        let lb = raw_b.norm();
        if la * la < tiny || lb * lb < tiny {
            continue;
        }
        let na = raw_a * (S::one() / la);
        let nb = raw_b * (S::one() / lb);
        energy += S::one() - na.dot(nb);

        if let Some(g) = d_vertices.as_deref_mut() {
            // dE/dn_a = -n_b (times the mean weight), through the
            // normalization Jacobian (I - n n^T)/|raw|, then the cross
            // product: for raw = (b-a) x (c-a) and cotangent vector q,
            // d/da = (b-c) x q, d/db = (c-a) x q, d/dc = (a-b) x q.
            let accumulate = |g: &mut [Vec3<S>],
                              mesh: &TriMesh<S>,
                              f: usize,
                              n: Vec3<S>,
                              len: S,
                              other: Vec3<S>| {
                let dn = -other * inv_pairs;
                let q = (dn - n * n.dot(dn)) * (S::one() / len);
                let [ia, ib, ic] = mesh.faces[f];
                let pa = mesh.vertices[ia as usize];
                let pb = mesh.vertices[ib as usize];
                let pc = mesh.vertices[ic as usize];
                g[ia as usize] += (pb - pc).cross(q);
                g[ib as usize] += (pc - pa).cross(q);
                g[ic as usize] += (pa - pb).cross(q);
            };
            accumulate(g, mesh, fa as usize, na, la, nb);
            accumulate(g, mesh, fb as usize, nb, lb, na);
        }
    }
    energy * inv_pairs
}
