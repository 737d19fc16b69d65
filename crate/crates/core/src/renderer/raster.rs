//! Soft triangle rasterization with depth-sorted front-to-back compositing.
//! Coverage falls off smoothly over a ~1 px band around each triangle's
//! screen-space boundary, which is what carries gradients to vertex
//! positions (the silhouette path). Surface color comes from querying the
//! texture field at the barycentrically interpolated world point.
//!
//! Barycentric weights are frozen in the backward pass: vertex gradients
//! flow through the coverage band, through interpolated world position, and
//! through fragment depth, but not through the weights themselves. Interior
//! texture-sliding terms are deliberately dropped (screen-space
//! approximation); field-parameter gradients are exact.

use super::{Camera, Rect, RenderConfig};
use crate::field::{FieldGrads, HashGridField, QuerySlots, SampleField};
use crate::geometry::TriMesh;
use crate::image::Image;
use crate::math::{smoothstep, smoothstep_deriv, vec3, Real, Vec3};

/// Coverage reaches its cap this far inside the boundary (in pixels); the
/// soft band spans d in (-BAND_OFF, 1 - BAND_OFF).
const BAND_OFF: f64 = 0.9;
/// Coverage never saturates fully so occluded fragments keep a live path.
const COV_CAP: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone)]
pub struct RasterFrame<S> {
    pub rect: Rect,
    pub albedo: Image<S>,
    pub depth: Image<S>,
    pub alpha: Image<S>,
}

struct Projected<S> {
    px: S,
    py: S,
    z: S,
    ok: bool,
}

fn project_vertices<S: Real>(mesh: &TriMesh<S>, cam: &Camera<S>, znear: S) -> Vec<Projected<S>> {
    mesh.vertices
        .iter()
        .map(|&v| {
            let (px, py, z) = cam.project(v);
            Projected { px, py, z, ok: z.as_f64() > znear.as_f64() }
        })
        .collect()
}

fn cross2<S: Real>(ax: S, ay: S, bx: S, by: S) -> S {
    ax * by - ay * bx
}

/// Signed pixel distance to the triangle boundary (positive inside) and the
/// index of the nearest edge. Exact inside; slightly generous outside sharp
/// corners, which only widens the soft band there.
fn signed_distance<S: Real>(p: &[(S, S); 3], s: S, qx: S, qy: S) -> (S, usize) {
    let mut best = S::of(f64::INFINITY);
    let mut edge = 0usize;
    for i in 0..3 {
        let (ax, ay) = p[i];
        let (bx, by) = p[(i + 1) % 3];
        let e = cross2(bx - ax, by - ay, qx - ax, qy - ay);
        let len = ((bx - ax) * (bx - ax) + (by - ay) * (by - ay)).sqrt();
        let d = s * e / len;
        if d.as_f64() < best.as_f64() {
            best = d;
            edge = i;
        }
    }
    (best, edge)
}

fn coverage<S: Real>(d: S) -> S {
    S::of(COV_CAP) * smoothstep(crate::math::clamp01(S::of(BAND_OFF) + d))
}

fn coverage_deriv<S: Real>(d: S) -> S {
    let y = S::of(BAND_OFF) + d;
    if y.as_f64() <= 0.0 || y.as_f64() >= 1.0 {
        S::zero()
    } else {
        S::of(COV_CAP) * smoothstep_deriv(y)
    }
}

/// 2D barycentrics (clamped, renormalized) then perspective-corrected.
fn barycentric<S: Real>(p: &[(S, S); 3], area2: S, qx: S, qy: S) -> [S; 3] {
    let mut lam = [S::zero(); 3];
    for i in 0..3 {
        let (ax, ay) = p[(i + 1) % 3];
        let (bx, by) = p[(i + 2) % 3];
        lam[i] = cross2(bx - ax, by - ay, qx - ax, qy - ay) / area2;
    }
    let mut total = S::zero();
    for l in lam.iter_mut() {
        *l = l.max(S::zero());
        total = total + *l;
    }
    if total.as_f64() <= 0.0 {
        return [S::of(1.0 / 3.0); 3];
    }
    for l in lam.iter_mut() {
        *l = *l / total;
    }
    lam
}

fn perspective_correct<S: Real>(lam: [S; 3], z: [S; 3]) -> [S; 3] {
    let mut pc = [S::zero(); 3];
    let mut total = S::zero();
    for i in 0..3 {
        pc[i] = lam[i] / z[i];
        total = total + pc[i];
    }
    for v in pc.iter_mut() {
        *v = *v / total;
    }
    pc
}

struct Candidate<S> {
    tri: u32,
    depth: S,
    cov: S,
    d: S,
    edge: u8,
    bary: [S; 3],
    pos: Vec3<S>,
}

/// Rasterizes every triangle into per-pixel candidate lists, sorted
/// front-to-back. Shared by the plain and taped paths.
fn gather_candidates<S: Real>(
    mesh: &TriMesh<S>,
    cam: &Camera<S>,
    rect: Rect,
    cfg: &RenderConfig<S>,
) -> Vec<Vec<Candidate<S>>> {
    let proj = project_vertices(mesh, cam, cfg.znear);
    let mut pixels: Vec<Vec<Candidate<S>>> = (0..rect.pixels()).map(|_| Vec::new()).collect();
    let margin = BAND_OFF + 0.5;

    for (tri, f) in mesh.faces.iter().enumerate() {
        let [i0, i1, i2] = [f[0] as usize, f[1] as usize, f[2] as usize];
        let (p0, p1, p2) = (&proj[i0], &proj[i1], &proj[i2]);
        if !(p0.ok && p1.ok && p2.ok) {
            continue;
        }
        let p = [(p0.px, p0.py), (p1.px, p1.py), (p2.px, p2.py)];
        let area2 = cross2(p[1].0 - p[0].0, p[1].1 - p[0].1, p[2].0 - p[0].0, p[2].1 - p[0].1);
        if area2.as_f64().abs() < 1e-12 {
            continue;
        }
        let s = if area2.as_f64() > 0.0 { S::one() } else { -S::one() };

        let (fx0, fx1) = (
            p[0].0.as_f64().min(p[1].0.as_f64()).min(p[2].0.as_f64()) - margin,
            p[0].0.as_f64().max(p[1].0.as_f64()).max(p[2].0.as_f64()) + margin,
        );
        let (fy0, fy1) = (
            p[0].1.as_f64().min(p[1].1.as_f64()).min(p[2].1.as_f64()) - margin,
            p[0].1.as_f64().max(p[1].1.as_f64()).max(p[2].1.as_f64()) + margin,
        );
        let x_lo = (fx0.ceil().max(rect.x0 as f64) as usize).min(rect.x0 + rect.w);
        let x_hi = ((fx1.floor() as i64).min((rect.x0 + rect.w) as i64 - 1).max(-1)) as i64;
        let y_lo = (fy0.ceil().max(rect.y0 as f64) as usize).min(rect.y0 + rect.h);
        let y_hi = ((fy1.floor() as i64).min((rect.y0 + rect.h) as i64 - 1).max(-1)) as i64;

        let zs = [p0.z, p1.z, p2.z];
        let verts = [mesh.vertices[i0], mesh.vertices[i1], mesh.vertices[i2]];
        for gy in y_lo as i64..=y_hi {
            if gy < rect.y0 as i64 {
                continue;
            }
            for gx in x_lo as i64..=x_hi {
                if gx < rect.x0 as i64 {
                    continue;
                }
                let (qx, qy) = (S::of(gx as f64), S::of(gy as f64));
                let (d, edge) = signed_distance(&p, s, qx, qy);
                let cov = coverage(d);
                if cov.as_f64() <= 0.0 {
                    continue;
                }
                let lam = barycentric(&p, area2, qx, qy);
                let bary = perspective_correct(lam, zs);
                let pos = verts[0].scale(bary[0]) + verts[1].scale(bary[1]) + verts[2].scale(bary[2]);
                let depth = (pos - cam.origin).norm();
                let pix = (gy as usize - rect.y0) * rect.w + (gx as usize - rect.x0);
                pixels[pix].push(Candidate { tri: tri as u32, depth, cov, d, edge: edge as u8, bary, pos });
            }
        }
    }
    for list in pixels.iter_mut() {
        list.sort_unstable_by(|a, b| {
            a.depth
                .as_f64()
                .partial_cmp(&b.depth.as_f64())
                .unwrap()
                .then(a.tri.cmp(&b.tri))
        });
    }
    pixels
}

/// Forward-only mesh render; any sampleable field supplies surface color.
pub fn rasterize_mesh<S: Real>(
    mesh: &TriMesh<S>,
    field: &(impl SampleField<S> + ?Sized),
    cam: &Camera<S>,
    rect: Rect,
    cfg: &RenderConfig<S>,
) -> RasterFrame<S> {
    let d_bg = cfg.background_depth_for(cam);
    let pixels = gather_candidates(mesh, cam, rect, cfg);
    let mut frame = RasterFrame {
        rect,
        albedo: Image::zeros(rect.h, rect.w, 3),
        depth: Image::filled(rect.h, rect.w, 1, d_bg),
        alpha: Image::zeros(rect.h, rect.w, 1),
    };
    for py in 0..rect.h {
        for px in 0..rect.w {
            let list = &pixels[py * rect.w + px];
            if list.is_empty() {
                continue;
            }
            let mut trans = S::one();
            let mut acc_c = [S::zero(); 3];
            let mut acc_z = S::zero();
            for cand in list {
                let w = trans * cand.cov;
                let c = field.sample(cand.pos).albedo;
                for ch in 0..3 {
                    acc_c[ch] = acc_c[ch] + w * c[ch];
                }
                acc_z = acc_z + w * cand.depth;
                trans = trans * (S::one() - cand.cov);
            }
            let alpha = S::one() - trans;
            for ch in 0..3 {
                *frame.albedo.at_mut(py, px, ch) = acc_c[ch];
            }
            *frame.alpha.at_mut(py, px, 0) = alpha;
            *frame.depth.at_mut(py, px, 0) = acc_z + (S::one() - alpha) * d_bg;
        }
    }
    frame
}

/// Taped rasterization against the hash-grid texture field.
pub struct RasterTape<S> {
    pub frame: RasterFrame<S>,
    d_bg: S,
    pix_off: Vec<usize>,
    pix_cnt: Vec<usize>,
    // Per fragment, in per-pixel front-to-back order.
    tri: Vec<u32>,
    cov: Vec<S>,
    weight: Vec<S>,
    depth: Vec<S>,
    dist: Vec<S>,
    edge: Vec<u8>,
    bary: Vec<[S; 3]>,
    pos: Vec<Vec3<S>>,
    color: Vec<[S; 3]>,
    features: Vec<S>,
    z1: Vec<S>,
    z2: Vec<S>,
    raw: Vec<S>,
}

impl<S> RasterTape<S> {
    pub fn fragments(&self) -> usize {
        self.tri.len()
    }
}

pub fn rasterize_mesh_train<S: Real>(
    mesh: &TriMesh<S>,
    field: &HashGridField<S>,
    cam: &Camera<S>,
    rect: Rect,
    cfg: &RenderConfig<S>,
) -> RasterTape<S> {
    let d_bg = cfg.background_depth_for(cam);
    let pixels = gather_candidates(mesh, cam, rect, cfg);
    let feat = field.feature_dim();
    let hid = field.cfg().hidden;

    let total: usize = pixels.iter().map(|l| l.len()).sum();
    let mut tape = RasterTape {
        frame: RasterFrame {
            rect,
            albedo: Image::zeros(rect.h, rect.w, 3),
            depth: Image::filled(rect.h, rect.w, 1, d_bg),
            alpha: Image::zeros(rect.h, rect.w, 1),
        },
        d_bg,
        pix_off: Vec::with_capacity(rect.pixels()),
        pix_cnt: Vec::with_capacity(rect.pixels()),
        tri: Vec::with_capacity(total),
        cov: Vec::with_capacity(total),
        weight: Vec::with_capacity(total),
        depth: Vec::with_capacity(total),
        dist: Vec::with_capacity(total),
        edge: Vec::with_capacity(total),
        bary: Vec::with_capacity(total),
        pos: Vec::with_capacity(total),
        color: Vec::with_capacity(total),
        features: vec![S::zero(); total * feat],
        z1: vec![S::zero(); total * hid],
        z2: vec![S::zero(); total * hid],
        raw: vec![S::zero(); total * 4],
    };

    let mut idx = 0usize;
    for py in 0..rect.h {
        for px in 0..rect.w {
            let list = &pixels[py * rect.w + px];
            tape.pix_off.push(idx);
            tape.pix_cnt.push(list.len());
            if list.is_empty() {
                continue;
            }
            let mut trans = S::one();
            let mut acc_c = [S::zero(); 3];
            let mut acc_z = S::zero();
            for cand in list {
                let mut slots = QuerySlots {
                    features: &mut tape.features[idx * feat..(idx + 1) * feat],
                    z1: &mut tape.z1[idx * hid..(idx + 1) * hid],
                    z2: &mut tape.z2[idx * hid..(idx + 1) * hid],
                    raw: &mut tape.raw[idx * 4..(idx + 1) * 4],
                };
                let c = field.query_into(cand.pos, &mut slots).albedo;
                let w = trans * cand.cov;
                for ch in 0..3 {
                    acc_c[ch] = acc_c[ch] + w * c[ch];
                }
                acc_z = acc_z + w * cand.depth;
                trans = trans * (S::one() - cand.cov);
                tape.tri.push(cand.tri);
                tape.cov.push(cand.cov);
                tape.weight.push(w);
                tape.depth.push(cand.depth);
                tape.dist.push(cand.d);
                tape.edge.push(cand.edge);
                tape.bary.push(cand.bary);
                tape.pos.push(cand.pos);
                tape.color.push(c);
                idx += 1;
            }
            let alpha = S::one() - trans;
            for ch in 0..3 {
                *tape.frame.albedo.at_mut(py, px, ch) = acc_c[ch];
            }
            *tape.frame.alpha.at_mut(py, px, 0) = alpha;
            *tape.frame.depth.at_mut(py, px, 0) = acc_z + (S::one() - alpha) * d_bg;
        }
    }
    tape
}

/// Jacobian rows of the screen projection at vertex `v`: d(px)/dv, d(py)/dv.
fn projection_jacobian<S: Real>(cam: &Camera<S>, v: Vec3<S>) -> (Vec3<S>, Vec3<S>) {
    let rel = v - cam.origin;
    let x = rel.dot(cam.right);
    let y = rel.dot(cam.up);
    let z = rel.dot(cam.forward);
    let kappa = S::of(cam.height as f64) / (S::of(2.0) * (cam.fov_y * S::of(0.5)).tan());
    let d_px = cam.right.scale(kappa / z) - cam.forward.scale(kappa * x / (z * z));
    let d_py = cam.up.scale(-kappa / z) + cam.forward.scale(kappa * y / (z * z));
    (d_px, d_py)
}

/// Accumulates texture-field and vertex-position gradients from upstream
/// gradients on the frame buffers. `g_verts` must match `mesh.vertices`.
#[allow(clippy::too_many_arguments)]
pub fn raster_backward<S: Real>(
    mesh: &TriMesh<S>,
    field: &HashGridField<S>,
    cam: &Camera<S>,
    tape: &RasterTape<S>,
    g_albedo: &Image<S>,
    g_depth: &Image<S>,
    g_alpha: &Image<S>,
    grads: &mut FieldGrads<S>,
    g_verts: &mut [Vec3<S>],
) {
    assert_eq!(g_verts.len(), mesh.vertices.len());
    let rect = tape.frame.rect;
    let feat = field.feature_dim();
    let hid = field.cfg().hidden;
    let mut f_buf = vec![S::zero(); feat];
    let mut z1_buf = vec![S::zero(); hid];
    let mut z2_buf = vec![S::zero(); hid];
    let mut raw_buf = vec![S::zero(); 4];

    for py in 0..rect.h {
        for px in 0..rect.w {
            let pix = py * rect.w + px;
            let n = tape.pix_cnt[pix];
            if n == 0 {
                continue;
            }
            let off = tape.pix_off[pix];
            let ga = [g_albedo.at(py, px, 0), g_albedo.at(py, px, 1), g_albedo.at(py, px, 2)];
            let gd = g_depth.at(py, px, 0);
            let gal = g_alpha.at(py, px, 0);

            let mut suffix = S::zero();
            for k in (0..n).rev() {
                let i = off + k;
                let w = tape.weight[i];
                let cov = tape.cov[i];
                let c = tape.color[i];
                let u = ga[0] * c[0] + ga[1] * c[1] + ga[2] * c[2]
                    + gd * (tape.depth[i] - tape.d_bg)
                    + gal;
                let g_cov = u * w / cov - suffix / (S::one() - cov);
                suffix = suffix + u * w;

                // Texture-field path, with world-position gradient.
                f_buf.copy_from_slice(&tape.features[i * feat..(i + 1) * feat]);
                z1_buf.copy_from_slice(&tape.z1[i * hid..(i + 1) * hid]);
                z2_buf.copy_from_slice(&tape.z2[i * hid..(i + 1) * hid]);
                raw_buf.copy_from_slice(&tape.raw[i * 4..(i + 1) * 4]);
                let slots = QuerySlots {
                    features: &mut f_buf,
                    z1: &mut z1_buf,
                    z2: &mut z2_buf,
                    raw: &mut raw_buf,
                };
                let mut g_pos = Vec3::zero();
                field.backward(
                    tape.pos[i],
                    &slots,
                    S::zero(),
                    [w * ga[0], w * ga[1], w * ga[2]],
                    grads,
                    Some(&mut g_pos),
                );
                // Fragment depth |pos - origin| moves with pos too.
                let dir = (tape.pos[i] - cam.origin).scale(S::one() / tape.depth[i]);
                g_pos = g_pos + dir.scale(gd * w);
                let face = mesh.faces[tape.tri[i] as usize];
                for (slot, &vi) in face.iter().enumerate() {
                    g_verts[vi as usize] = g_verts[vi as usize] + g_pos.scale(tape.bary[i][slot]);
                }

                // Silhouette-band path: coverage -> signed distance -> the
                // two endpoints of the nearest edge, through the projection.
                let dcov_dd = coverage_deriv(tape.dist[i]);
                if dcov_dd.as_f64() == 0.0 {
                    continue;
                }
                let g_d = g_cov * dcov_dd;
                let e = tape.edge[i] as usize;
                let (ia, ib) = (face[e] as usize, face[(e + 1) % 3] as usize);
                let (pax, pay, _) = cam.project(mesh.vertices[ia]);
                let (pbx, pby, _) = cam.project(mesh.vertices[ib]);
                let (qx, qy) = (S::of((rect.x0 + px) as f64), S::of((rect.y0 + py) as f64));

                let ex = pbx - pax;
                let ey = pby - pay;
                let len = (ex * ex + ey * ey).sqrt();
                let ecross = cross2(ex, ey, qx - pax, qy - pay);
                // Triangle orientation sign, frozen.
                let (p0x, p0y, _) = cam.project(mesh.vertices[face[0] as usize]);
                let (p1x, p1y, _) = cam.project(mesh.vertices[face[1] as usize]);
                let (p2x, p2y, _) = cam.project(mesh.vertices[face[2] as usize]);
                let area2 = cross2(p1x - p0x, p1y - p0y, p2x - p0x, p2y - p0y);
                let s = if area2.as_f64() > 0.0 { S::one() } else { -S::one() };

                // d = s * ecross / len.
                let de_da = vec3(pby - qy, qx - pbx, S::zero());
                let de_db = vec3(qy - pay, pax - qx, S::zero());
                let common = s * ecross / (len * len * len);
                let gd_a = vec3(
                    s * de_da.x / len + common * ex,
                    s * de_da.y / len + common * ey,
                    S::zero(),
                );
                let gd_b = vec3(
                    s * de_db.x / len - common * ex,
                    s * de_db.y / len - common * ey,
                    S::zero(),
                );

                let (ja_px, ja_py) = projection_jacobian(cam, mesh.vertices[ia]);
                let (jb_px, jb_py) = projection_jacobian(cam, mesh.vertices[ib]);
                g_verts[ia] = g_verts[ia] + (ja_px.scale(gd_a.x) + ja_py.scale(gd_a.y)).scale(g_d);
                g_verts[ib] = g_verts[ib] + (jb_px.scale(gd_b.x) + jb_py.scale(gd_b.y)).scale(g_d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSample, FnField, HashGridConfig};
    use crate::gradcheck;
    use crate::math::derive_rng;
    use rand::Rng;

    fn cam(fov: f64, res: usize, dist: f64) -> Camera<f64> {
        Camera::look_at(
            vec3(0.0, 0.0, -dist),
            Vec3::zero(),
            vec3(0.0, 1.0, 0.0),
            fov,
            (res, res),
            0,
        )
    }

    fn flat_field(albedo: [f64; 3]) -> impl SampleField<f64> {
        FnField(move |_p: Vec3<f64>| FieldSample { density: 0.0, albedo })
    }

    fn icosphere(subdiv: usize) -> TriMesh<f64> {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3<f64>> = [
            (-1.0, phi, 0.0), (1.0, phi, 0.0), (-1.0, -phi, 0.0), (1.0, -phi, 0.0),
            (0.0, -1.0, phi), (0.0, 1.0, phi), (0.0, -1.0, -phi), (0.0, 1.0, -phi),
            (phi, 0.0, -1.0), (phi, 0.0, 1.0), (-phi, 0.0, -1.0), (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| vec3(x, y, z).normalized())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdiv {
            let mut midpoint = std::collections::HashMap::new();
            let mut next = Vec::new();
            for f in &faces {
                let mut mid = [0u32; 3];
                for i in 0..3 {
                    let (a, b) = (f[i].min(f[(i + 1) % 3]), f[i].max(f[(i + 1) % 3]));
                    mid[i] = *midpoint.entry((a, b)).or_insert_with(|| {
                        verts.push((verts[a as usize] + verts[b as usize]).normalized());
                        (verts.len() - 1) as u32
                    });
                }
                next.push([f[0], mid[0], mid[2]]);
                next.push([f[1], mid[1], mid[0]]);
                next.push([f[2], mid[2], mid[1]]);
                next.push([mid[0], mid[1], mid[2]]);
            }
            faces = next;
        }
        TriMesh { vertices: verts, faces }
    }

    #[test]
    fn empty_mesh_renders_background() {
        let mesh = TriMesh::<f64> { vertices: Vec::new(), faces: Vec::new() };
        let c = cam(0.4, 8, 2.5);
        let cfg = RenderConfig::default();
        let f = rasterize_mesh(&mesh, &flat_field([0.9, 0.1, 0.1]), &c, Rect::full(8, 8), &cfg);
        assert!(f.alpha.data().iter().all(|&a| a == 0.0));
        let d_bg = cfg.background_depth_for(&c);
        assert!(f.depth.data().iter().all(|&d| (d - d_bg).abs() < 1e-12));
    }

    #[test]
    fn sphere_silhouette_area_matches_analytic_disc() {
        let mesh = icosphere(3);
        let res = 256;
        let dist = 12.0;
        let c = cam(10f64.to_radians(), res, dist);
        let cfg = RenderConfig::default();
        let f = rasterize_mesh(&mesh, &flat_field([0.5; 3]), &c, Rect::full(res, res), &cfg);
        let count = f.alpha.data().iter().filter(|&&a| a > 0.5).count();
        let kappa = res as f64 / (2.0 * (5f64.to_radians()).tan());
        let r_pix = (1.0f64 / dist).asin().tan() * kappa;
        let analytic = std::f64::consts::PI * r_pix * r_pix;
        let ratio = count as f64 / analytic;
        assert!((ratio - 1.0).abs() < 0.02, "pixel count {count} vs analytic {analytic}");
    }

    #[test]
    fn interior_depth_tracks_axial_translation() {
        let tri = TriMesh {
            vertices: vec![vec3(-0.6, -0.5, 0.0), vec3(0.7, -0.4, 0.0), vec3(0.0, 0.6, 0.0)],
            faces: vec![[0, 1, 2]],
        };
        let c = cam(0.5, 16, 2.5);
        let cfg = RenderConfig::default();
        let f0 = rasterize_mesh(&tri, &flat_field([0.5; 3]), &c, Rect::full(16, 16), &cfg);
        let shifted = TriMesh {
            vertices: tri.vertices.iter().map(|v| *v + vec3(0.0, 0.0, 0.1)).collect(),
            faces: tri.faces.clone(),
        };
        let f1 = rasterize_mesh(&shifted, &flat_field([0.5; 3]), &c, Rect::full(16, 16), &cfg);
        // Central pixel is interior both times; its depth moves by ~0.1.
        let d0 = f0.depth.at(8, 8, 0);
        let d1 = f1.depth.at(8, 8, 0);
        assert!((d1 - d0 - 0.1).abs() < 2e-3, "depth step {}", d1 - d0);
    }

    #[test]
    fn train_path_agrees_with_plain_render() {
        let field = HashGridField::<f64>::new(HashGridConfig::default(), 3);
        let mesh = icosphere(1);
        let c = cam(0.6, 12, 2.5);
        let cfg = RenderConfig::default();
        let rect = Rect { x0: 2, y0: 1, w: 8, h: 9 };
        let plain = rasterize_mesh(&mesh, &field, &c, rect, &cfg);
        let tape = rasterize_mesh_train(&mesh, &field, &c, rect, &cfg);
        assert_eq!(plain.albedo.data(), tape.frame.albedo.data());
        assert_eq!(plain.depth.data(), tape.frame.depth.data());
        assert_eq!(plain.alpha.data(), tape.frame.alpha.data());
    }

    #[test]
    fn texture_gradients_match_central_differences() {
        let field = HashGridField::<f64>::new(HashGridConfig::default(), 41);
        let mesh = icosphere(1);
        let c = cam(0.6, 8, 2.5);
        let cfg = RenderConfig::default();
        let rect = Rect::full(8, 8);

        let mut rng = derive_rng(5, "rast-fd", &[]);
        let qa: Vec<f64> = (0..rect.pixels() * 3).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss = |f: &HashGridField<f64>| {
            let fr = rasterize_mesh(&mesh, f, &c, rect, &cfg);
            fr.albedo.data().iter().zip(&qa).map(|(a, b)| a * b).sum::<f64>()
        };

        let tape = rasterize_mesh_train(&mesh, &field, &c, rect, &cfg);
        let g_albedo = Image::from_vec(8, 8, 3, qa.clone());
        let g_zero1 = Image::zeros(8, 8, 1);
        let mut grads = FieldGrads::zeros_like(&field);
        let mut g_verts = vec![Vec3::zero(); mesh.vertices.len()];
        raster_backward(&mesh, &field, &c, &tape, &g_albedo, &g_zero1, &g_zero1, &mut grads, &mut g_verts);

        for (name, params, grad) in [
            ("raster.hash", &field.hash, &grads.hash),
            ("raster.mlp", &field.mlp, &grads.mlp),
        ] {
            let report = gradcheck::check_group(
                name,
                params,
                grad,
                &mut |v| {
                    let mut tmp = field.clone();
                    if name.ends_with("hash") {
                        tmp.hash.copy_from_slice(v);
                    } else {
                        tmp.mlp.copy_from_slice(v);
                    }
                    loss(&tmp)
                },
                &gradcheck::CheckOpts::strict_f64().with_seed(17),
            );
            assert!(report.max_rel_err < 5e-6, "{report}");
        }
    }

    // The silhouette band is the contract for vertex gradients: an
    // alpha-only loss isolates it (no frozen-barycentric approximation in
    // play).
    #[test]
    fn silhouette_vertex_gradients_match_central_differences() {
        let tri = TriMesh {
            vertices: vec![vec3(-0.5, -0.45, 0.1), vec3(0.6, -0.3, -0.2), vec3(0.05, 0.55, 0.0)],
            faces: vec![[0, 1, 2]],
        };
        let field = HashGridField::<f64>::new(HashGridConfig::default(), 7);
        let c = cam(0.55, 10, 2.5);
        let cfg = RenderConfig::default();
        let rect = Rect::full(10, 10);

        let mut rng = derive_rng(9, "sil-fd", &[]);
        let ql: Vec<f64> = (0..rect.pixels()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss = |verts: &[f64]| {
            let m = TriMesh {
                vertices: verts.chunks(3).map(|v| vec3(v[0], v[1], v[2])).collect(),
                faces: tri.faces.clone(),
            };
            let fr = rasterize_mesh(&m, &field, &c, rect, &cfg);
            fr.alpha.data().iter().zip(&ql).map(|(a, b)| a * b).sum::<f64>()
        };

        let tape = rasterize_mesh_train(&tri, &field, &c, rect, &cfg);
        let g_alpha = Image::from_vec(10, 10, 1, ql.clone());
        let g_zero3 = Image::zeros(10, 10, 3);
        let g_zero1 = Image::zeros(10, 10, 1);
        let mut grads = FieldGrads::zeros_like(&field);
        let mut g_verts = vec![Vec3::zero(); 3];
        raster_backward(&tri, &field, &c, &tape, &g_zero3, &g_zero1, &g_alpha, &mut grads, &mut g_verts);

        let flat: Vec<f64> = tri.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let grad_flat: Vec<f64> = g_verts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let report = gradcheck::check_group(
            "raster.verts",
            &flat,
            &grad_flat,
            &mut |v| loss(v),
            &gradcheck::CheckOpts::strict_f64().with_seed(23),
        );
        assert!(report.max_rel_err < 5e-6, "{report}");
    }

    #[test]
    fn repeated_raster_is_bit_identical() {
        let field = HashGridField::<f64>::new(HashGridConfig::default(), 3);
        let mesh = icosphere(2);
        let c = cam(0.6, 24, 2.5);
        let cfg = RenderConfig::default();
        let a = rasterize_mesh(&mesh, &field, &c, Rect::full(24, 24), &cfg);
        let b = rasterize_mesh(&mesh, &field, &c, Rect::full(24, 24), &cfg);
        assert_eq!(a.albedo.data(), b.albedo.data());
        assert_eq!(a.depth.data(), b.depth.data());
        assert_eq!(a.alpha.data(), b.alpha.data());
    }
}
