//! Deterministic evaluation: masked PSNR, silhouette IoU, map total
//! variation, and brute-force Chamfer distance against the analytic scene.

use rayon::prelude::*;
use serde::Serialize;

use super::scene::ProceduralScene;
use crate::geometry::TriMesh;
use crate::image::Image;
use crate::losses::erode_foreground;
use crate::math::{derive_rng, Real, Vec3};
use crate::renderer::RenderedViewSet;

use rand::Rng;

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub masked_psnr: f64,
    pub silhouette_iou: f64,
    /// Mean per-view TV of the normal maps over the eroded foreground.
    pub normal_tv: f64,
    /// Mean per-view TV of the albedo maps over the eroded foreground; the
    /// shading-free texture detail statistic.
    pub texture_tv: f64,
    pub chamfer: Option<f64>,
    pub failed: bool,
}

/// PSNR over the eroded ground-truth foreground, pooled across views and
/// channels; capped so identical inputs stay finite.
pub fn masked_psnr<S: Real>(
    pred: &[&Image<S>],
    gt: &[&Image<S>],
    gt_alpha: &[&Image<S>],
    erosion_px: f64,
) -> f64 {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), gt_alpha.len());
    let mut num = 0.0;
    let mut count = 0.0;
    for ((p, g), a) in pred.iter().zip(gt).zip(gt_alpha) {
        let mask = erode_foreground(*a, erosion_px);
        for i in 0..p.height() {
            for j in 0..p.width() {
                if mask.at(i, j, 0) == S::zero() {
                    continue;
                }
                for ch in 0..p.channels() {
                    let d = (p.at(i, j, ch) - g.at(i, j, ch)).as_f64();
                    num += d * d;
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return 0.0;
    }
    let mse = num / count;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn silhouette_iou<S: Real>(pred_alpha: &[&Image<S>], gt_alpha: &[&Image<S>]) -> f64 {
    assert_eq!(pred_alpha.len(), gt_alpha.len());
    let half = S::of(0.5);
    let mut inter = 0.0;
    let mut union = 0.0;
    for (p, g) in pred_alpha.iter().zip(gt_alpha) {
        for (a, b) in p.data().iter().zip(g.data()) {
            let pa = *a >= half;
            let gb = *b >= half;
            if pa && gb {
                inter += 1.0;
            }
            if pa || gb {
                union += 1.0;
            }
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Masked total variation at exponent 1: sum_chw w * |grad| with forward
/// differences. The detail statistic behind the texture/normal TV columns.
pub fn map_tv<S: Real>(img: &Image<S>, mask: &Image<S>) -> f64 {
    let mut total = 0.0;
    for i in 0..img.height() {
        for j in 0..img.width() {
            let w = mask.at(i, j, 0).as_f64();
            if w == 0.0 {
                continue;
            }
            for ch in 0..img.channels() {
                let v = img.at(i, j, ch).as_f64();
                let dx = if j + 1 < img.width() { img.at(i, j + 1, ch).as_f64() - v } else { 0.0 };
                let dy = if i + 1 < img.height() { img.at(i + 1, j, ch).as_f64() - v } else { 0.0 };
                total += w * (dx * dx + dy * dy).sqrt();
            }
        }
    }
    total
}

/// Fraction of rendered rays whose alpha falls strictly inside (lo, hi):
/// the fuzziness proxy for inflated, semi-transparent geometry. No hard
/// metric exists for this; treat it as directional only.
pub fn mid_alpha_fraction<S: Real>(views: &RenderedViewSet<S>, lo: f64, hi: f64) -> f64 {
    let mut mid = 0usize;
    let mut total = 0usize;
    for v in views {
        for i in 0..v.alpha.height() {
            for j in 0..v.alpha.width() {
                let a = v.alpha.at(i, j, 0).as_f64();
                if a > lo && a < hi {
                    mid += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        mid as f64 / total as f64
    }
}

/// Perceptual-proxy error between predicted and reference albedo maps over
/// the reference foreground: block-mean pyramid L1, averaged across views.
/// Shading-free, so it isolates texture fidelity.
pub fn albedo_perceptual<S: Real>(pred: &RenderedViewSet<S>, gt: &RenderedViewSet<S>) -> f64 {
    assert_eq!(pred.len(), gt.len(), "view sets must align");
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += crate::losses::patch_pyramid_l1(&p.albedo, &g.albedo, &g.alpha).as_f64();
    }
    total / pred.len().max(1) as f64
}

fn point_triangle_distance(p: Vec3<f64>, a: Vec3<f64>, b: Vec3<f64>, c: Vec3<f64>) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab.scale(v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac.scale(w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b).scale(w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab.scale(v) + ac.scale(w))).norm()
}

/// Symmetric Chamfer distance between the mesh surface and the analytic
/// scene surface: `samples` area-weighted points per side, brute force, no
/// acceleration structure. Returns None for a mesh with no faces.
pub fn chamfer<S: Real>(
    mesh: &TriMesh<S>,
    scene: &ProceduralScene,
    samples: usize,
    seed: u64,
) -> Option<f64> {
    if mesh.faces.is_empty() || samples == 0 {
        return None;
    }
    let verts: Vec<Vec3<f64>> = mesh.vertices.iter().map(|v| v.to_f64()).collect();
    let tris: Vec<[Vec3<f64>; 3]> = mesh
        .faces
        .iter()
        .map(|f| [verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]])
        .collect();

    // Cumulative areas for uniform surface sampling of the mesh.
    let mut cum = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in &tris {
        total += 0.5 * (t[1] - t[0]).cross(t[2] - t[0]).norm();
        cum.push(total);
    }
    if total <= 0.0 {
        return None;
    }

    let mut rng = derive_rng(seed, "chamfer-mesh-side", &[]);
    let mesh_points: Vec<Vec3<f64>> = (0..samples)
        .map(|_| {
            let pick = rng.gen_range(0.0..total);
            let ti = cum.partition_point(|&c| c < pick).min(tris.len() - 1);
            let t = &tris[ti];
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            t[0] + (t[1] - t[0]).scale(u) + (t[2] - t[0]).scale(v)
        })
        .collect();

    let mesh_to_scene: f64 = mesh_points.par_iter().map(|&p| scene.sdf(p).abs()).sum::<f64>() / samples as f64;

    let scene_points = scene.sample_surface(samples, seed ^ 0x5ce9e);
    let scene_to_mesh: f64 = scene_points
        .par_iter()
        .map(|&p| {
            tris.iter()
                .map(|t| point_triangle_distance(p, t[0], t[1], t[2]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / samples as f64;

    Some(0.5 * (mesh_to_scene + scene_to_mesh))
}

/// Full report for one run. `mesh = None` leaves Chamfer absent; an empty
/// mesh marks the report failed with an infinite Chamfer sentinel.
pub fn evaluate<S: Real>(
    pred: &RenderedViewSet<S>,
    gt: &RenderedViewSet<S>,
    mesh: Option<&TriMesh<S>>,
    scene: &ProceduralScene,
    erosion_px: f64,
    chamfer_samples: usize,
    seed: u64,
) -> MetricsReport {
    assert_eq!(pred.len(), gt.len(), "view sets must align");
    let pred_rgb: Vec<&Image<S>> = pred.iter().map(|v| &v.rgb).collect();
    let gt_rgb: Vec<&Image<S>> = gt.iter().map(|v| &v.rgb).collect();
    let pred_alpha: Vec<&Image<S>> = pred.iter().map(|v| &v.alpha).collect();
    let gt_alpha: Vec<&Image<S>> = gt.iter().map(|v| &v.alpha).collect();

    let masked_psnr = masked_psnr(&pred_rgb, &gt_rgb, &gt_alpha, erosion_px);
    let silhouette_iou = silhouette_iou(&pred_alpha, &gt_alpha);

    let mut normal_tv = 0.0;
    let mut texture_tv = 0.0;
    for v in pred {
        let mask = erode_foreground(&v.alpha, erosion_px);
        normal_tv += map_tv(&v.normal, &mask);
        texture_tv += map_tv(&v.albedo, &mask);
    }
    normal_tv /= pred.len().max(1) as f64;
    texture_tv /= pred.len().max(1) as f64;

    let (chamfer_d, failed) = match mesh {
        None => (None, false),
        Some(m) => match chamfer(m, scene, chamfer_samples, seed) {
            Some(d) => (Some(d), false),
            None => (Some(f64::INFINITY), true),
        },
    };

    MetricsReport {
        masked_psnr,
        silhouette_iou,
        normal_tv,
        texture_tv,
        chamfer: chamfer_d,
        failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{render_ground_truth, AlbedoKind, ProceduralScene, ShapeKind};
    use crate::math::vec3;
    use crate::renderer::{orbit_rig, RenderConfig};

    fn uv_sphere(radius: f64, rings: usize, segs: usize) -> TriMesh<f64> {
        let mut vertices = vec![vec3(0.0, radius, 0.0)];
        for r in 1..rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segs {
                let th = std::f64::consts::TAU * s as f64 / segs as f64;
                vertices.push(vec3(
                    radius * phi.sin() * th.cos(),
                    radius * phi.cos(),
                    radius * phi.sin() * th.sin(),
                ));
            }
        }
        vertices.push(vec3(0.0, -radius, 0.0));
        let bottom = vertices.len() as u32 - 1;
        let idx = |r: usize, s: usize| 1 + (r - 1) * segs + (s % segs);
        let mut faces = Vec::new();
        for s in 0..segs {
            faces.push([0, idx(1, s + 1) as u32, idx(1, s) as u32]);
            faces.push([bottom, idx(rings - 1, s) as u32, idx(rings - 1, s + 1) as u32]);
        }
        for r in 1..rings - 1 {
            for s in 0..segs {
                let (a, b) = (idx(r, s) as u32, idx(r, s + 1) as u32);
                let (c, d) = (idx(r + 1, s) as u32, idx(r + 1, s + 1) as u32);
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
        TriMesh { vertices, faces }
    }

    #[test]
    fn ground_truth_against_itself_is_perfect() {
        let scene = ProceduralScene::new(ShapeKind::Box, AlbedoKind::Checker, 2);
        let cams = orbit_rig::<f64>(3, 2.5, 0.7, (48, 48), &[15.0]);
        let gt = render_ground_truth(&scene, &cams, &RenderConfig::default());
        let report = evaluate(&gt, &gt, None, &scene, 2.0, 0, 0);
        assert_eq!(report.masked_psnr, PSNR_CAP);
        assert_eq!(report.silhouette_iou, 1.0);
        assert!(report.chamfer.is_none());
        assert!(!report.failed);
    }

    #[test]
    fn uniform_error_gives_the_textbook_psnr() {
        let gt = Image::<f64>::filled(20, 20, 3, 0.4);
        let pred = gt.map(|v| v + 0.1);
        let alpha = Image::<f64>::filled(20, 20, 1, 1.0);
        let psnr = masked_psnr(&[&pred], &[&gt], &[&alpha], 0.0);
        assert!((psnr - 20.0).abs() < 1e-9, "psnr {psnr}");
    }

    #[test]
    fn iou_counts_overlap() {
        let mut a = Image::<f64>::zeros(10, 10, 1);
        let mut b = Image::<f64>::zeros(10, 10, 1);
        for i in 0..10 {
            for j in 0..5 {
                *a.at_mut(i, j, 0) = 1.0;
            }
            for j in 0..10 {
                *b.at_mut(i, j, 0) = 1.0;
            }
        }
        assert!((silhouette_iou(&[&a], &[&b]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_map_has_zero_tv() {
        let img = Image::<f64>::filled(16, 16, 3, 0.37);
        let mask = Image::<f64>::filled(16, 16, 1, 1.0);
        assert_eq!(map_tv(&img, &mask), 0.0);
    }

    #[test]
    fn chamfer_between_concentric_spheres_matches_the_gap() {
        let scene = ProceduralScene::new(ShapeKind::Sphere, AlbedoKind::Checker, 1);
        let mesh = uv_sphere(0.51, 48, 96);
        let d = chamfer(&mesh, &scene, 4000, 77).unwrap();
        let expected = 0.01;
        assert!(
            (d - expected).abs() < 0.1 * expected,
            "chamfer {d} vs expected {expected}"
        );
    }

    #[test]
    fn point_triangle_distance_covers_all_regions() {
        let a = vec3(0.0, 0.0, 0.0);
        let b = vec3(1.0, 0.0, 0.0);
        let c = vec3(0.0, 1.0, 0.0);
        // Above the interior, beyond a vertex, beside an edge.
        assert!((point_triangle_distance(vec3(0.2, 0.2, 0.5), a, b, c) - 0.5).abs() < 1e-12);
        assert!((point_triangle_distance(vec3(2.0, 0.0, 0.0), a, b, c) - 1.0).abs() < 1e-12);
        assert!((point_triangle_distance(vec3(0.5, -0.3, 0.4), a, b, c) - 0.5).abs() < 1e-12);
        let d = point_triangle_distance(vec3(1.0, 1.0, 0.0), a, b, c);
        assert!((d - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_mesh_flags_the_report() {
        let scene = ProceduralScene::new(ShapeKind::Sphere, AlbedoKind::Checker, 1);
        let cams = orbit_rig::<f64>(1, 2.5, 0.7, (16, 16), &[0.0]);
        let gt = render_ground_truth(&scene, &cams, &RenderConfig::default());
        let empty = TriMesh::<f64> { vertices: vec![], faces: vec![] };
        let report = evaluate(&gt, &gt, Some(&empty), &scene, 1.0, 100, 3);
        assert!(report.failed);
        assert_eq!(report.chamfer, Some(f64::INFINITY));
    }
}
