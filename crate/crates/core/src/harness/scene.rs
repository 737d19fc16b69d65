//! Procedural test scenes with analytic signed distance and seeded 3D
//! textures, plus the sphere-traced ground-truth renderer.
//!
//! Distance contract: exact (to float precision) everywhere outside and in a
//! shell around the surface. Deep inside the superquadric falls back to a
//! conservative radial bound, and inside the two-sphere union the min() can
//! overstate the distance near the weld; nothing traces or measures there.
//!
//! Ground-truth views are shaded through the same deferred path as the
//! differentiable renderers (normals from the depth map, identical
//! light/tonemap), so comparisons between them isolate the reconstruction.
//! The exposed `normal` channel, by contrast, is the analytic SDF gradient:
//! it serves as the regression target, not as the shading input.

use crate::image::Image;
use crate::math::{derive_rng, Real, Vec3};
use crate::renderer::{assign_lights, finish_view, Camera, RenderConfig, RenderedViewSet};

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    Superquadric,
    UnionOfTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlbedoKind {
    Checker,
    Noise,
    Stripes,
}

#[derive(Debug, Clone)]
pub struct ProceduralScene {
    pub shape: ShapeKind,
    pub albedo: AlbedoKind,
    pub seed: u64,
}

const SPHERE_R: f64 = 0.5;
const BOX_HALF: [f64; 3] = [0.42, 0.3, 0.36];
const TORUS_MAJOR: f64 = 0.35;
const TORUS_MINOR: f64 = 0.15;
const SQ_R: f64 = 0.45;
const UNION_C: f64 = 0.22;
const UNION_R: [f64; 2] = [0.33, 0.27];

impl ProceduralScene {
    pub fn new(shape: ShapeKind, albedo: AlbedoKind, seed: u64) -> Self {
        ProceduralScene { shape, albedo, seed }
    }

    /// The standard 3x3 scene grid: shape varies fastest, albedo follows.
    pub fn roster(count: usize, seed: u64) -> Vec<ProceduralScene> {
        let shapes = [
            ShapeKind::Sphere,
            ShapeKind::Torus,
            ShapeKind::Box,
            ShapeKind::UnionOfTwo,
            ShapeKind::Superquadric,
        ];
        let albedos = [AlbedoKind::Checker, AlbedoKind::Stripes, AlbedoKind::Noise];
        (0..count)
            .map(|i| ProceduralScene::new(shapes[i % shapes.len()], albedos[i % albedos.len()], seed.wrapping_add(i as u64)))
            .collect()
    }

    /// Everything fits well inside the unit sphere.
    pub fn bounding_radius(&self) -> f64 {
        0.8
    }

    pub fn sdf(&self, p: Vec3<f64>) -> f64 {
        match self.shape {
            ShapeKind::Sphere => p.norm() - SPHERE_R,
            ShapeKind::Box => {
                let q = Vec3 {
                    x: p.x.abs() - BOX_HALF[0],
                    y: p.y.abs() - BOX_HALF[1],
                    z: p.z.abs() - BOX_HALF[2],
                };
                let outside = Vec3 { x: q.x.max(0.0), y: q.y.max(0.0), z: q.z.max(0.0) };
                outside.norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            ShapeKind::Torus => {
                let ring = (p.x * p.x + p.z * p.z).sqrt() - TORUS_MAJOR;
                (ring * ring + p.y * p.y).sqrt() - TORUS_MINOR
            }
            ShapeKind::Superquadric => superquadric_distance(p),
            ShapeKind::UnionOfTwo => {
                let a = (p - Vec3 { x: UNION_C, y: 0.0, z: 0.0 }).norm() - UNION_R[0];
                let b = (p + Vec3 { x: UNION_C, y: 0.05, z: 0.0 }).norm() - UNION_R[1];
                a.min(b)
            }
        }
    }

    /// Central-difference gradient of the SDF, normalized. Unit length
    /// wherever the distance is exact.
    pub fn normal(&self, p: Vec3<f64>) -> Vec3<f64> {
        let h = 1e-5;
        let g = Vec3 {
            x: self.sdf(p + Vec3 { x: h, y: 0.0, z: 0.0 }) - self.sdf(p - Vec3 { x: h, y: 0.0, z: 0.0 }),
            y: self.sdf(p + Vec3 { x: 0.0, y: h, z: 0.0 }) - self.sdf(p - Vec3 { x: 0.0, y: h, z: 0.0 }),
            z: self.sdf(p + Vec3 { x: 0.0, y: 0.0, z: h }) - self.sdf(p - Vec3 { x: 0.0, y: 0.0, z: h }),
        };
        g.normalized()
    }

    /// Seeded 3D texture, evaluated at surface points. Values in [0,1].
    pub fn albedo_at(&self, p: Vec3<f64>) -> [f64; 3] {
        let mut rng = derive_rng(self.seed, "albedo-palette", &[]);
        let mut color = || -> [f64; 3] { [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)] };
        let (ca, cb) = (color(), color());
        let mix = |t: f64| -> [f64; 3] {
            [
                ca[0] + (cb[0] - ca[0]) * t,
                ca[1] + (cb[1] - ca[1]) * t,
                ca[2] + (cb[2] - ca[2]) * t,
            ]
        };
        match self.albedo {
            AlbedoKind::Checker => {
                let s = 0.125;
                let k = (p.x / s).floor() + (p.y / s).floor() + (p.z / s).floor();
                if (k as i64).rem_euclid(2) == 0 {
                    ca
                } else {
                    cb
                }
            }
            AlbedoKind::Stripes => {
                let mut drng = derive_rng(self.seed, "stripe-dir", &[]);
                let dir = loop {
                    let v = Vec3 {
                        x: drng.gen_range(-1.0..1.0),
                        y: drng.gen_range(-1.0..1.0),
                        z: drng.gen_range(-1.0..1.0),
                    };
                    let n = v.norm();
                    if n > 0.2 && n < 1.0 {
                        break v.scale(1.0 / n);
                    }
                };
                let phase = (dir.dot(p) / 0.09) * core::f64::consts::TAU;
                mix(0.5 + 0.5 * phase.sin())
            }
            AlbedoKind::Noise => {
                let t = value_noise(p.scale(6.0), self.seed) * 0.65 + value_noise(p.scale(13.0), self.seed ^ 0x9e37) * 0.35;
                mix(t.clamp(0.0, 1.0))
            }
        }
    }

    /// Near-uniform surface points for Chamfer sampling.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = derive_rng(seed, "surface-sample", &[self.seed]);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let p = match self.shape {
                ShapeKind::Sphere => random_unit(&mut rng).scale(SPHERE_R),
                ShapeKind::Torus => {
                    // Area weight 1 + (r/R) cos(theta) via rejection.
                    loop {
                        let u = rng.gen_range(0.0..core::f64::consts::TAU);
                        let v = rng.gen_range(0.0..core::f64::consts::TAU);
                        let w = (1.0 + (TORUS_MINOR / TORUS_MAJOR) * v.cos()) / (1.0 + TORUS_MINOR / TORUS_MAJOR);
                        if rng.gen::<f64>() < w {
                            let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                            break Vec3 { x: ring * u.cos(), y: TORUS_MINOR * v.sin(), z: ring * u.sin() };
                        }
                    }
                }
                ShapeKind::Box => {
                    let areas = [
                        BOX_HALF[1] * BOX_HALF[2],
                        BOX_HALF[0] * BOX_HALF[2],
                        BOX_HALF[0] * BOX_HALF[1],
                    ];
                    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                    let mut pick = rng.gen_range(0.0..total);
                    let mut axis = 0;
                    for (k, &a) in areas.iter().enumerate() {
                        if pick < 2.0 * a {
                            axis = k;
                            break;
                        }
                        pick -= 2.0 * a;
                    }
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let mut c = [
                        rng.gen_range(-BOX_HALF[0]..BOX_HALF[0]),
                        rng.gen_range(-BOX_HALF[1]..BOX_HALF[1]),
                        rng.gen_range(-BOX_HALF[2]..BOX_HALF[2]),
                    ];
                    c[axis] = sign * BOX_HALF[axis];
                    Vec3 { x: c[0], y: c[1], z: c[2] }
                }
                ShapeKind::Superquadric => {
                    // Project a sphere draw onto the L4 surface, then polish
                    // with the exact distance gradient.
                    let d = random_unit(&mut rng);
                    let l4 = (d.x.powi(4) + d.y.powi(4) + d.z.powi(4)).powf(0.25);
                    let mut q = d.scale(SQ_R / l4);
                    for _ in 0..3 {
                        q = q - self.normal(q).scale(self.sdf(q));
                    }
                    q
                }
                ShapeKind::UnionOfTwo => loop {
                    let first = rng.gen_bool(UNION_R[0] * UNION_R[0] / (UNION_R[0] * UNION_R[0] + UNION_R[1] * UNION_R[1]));
                    let (center, r) = if first {
                        (Vec3 { x: UNION_C, y: 0.0, z: 0.0 }, UNION_R[0])
                    } else {
                        (Vec3 { x: -UNION_C, y: -0.05, z: 0.0 }, UNION_R[1])
                    };
                    let p = center + random_unit(&mut rng).scale(r);
                    if self.sdf(p) > -1e-9 {
                        break p;
                    }
                },
            };
            out.push(p);
        }
        out
    }
}

/// Exact distance to the L4 ball |q|_4 = SQ_R (convex). Outside and in the
/// near-surface shell the KKT projection q + 4 mu q^3 = p is solved by
/// bisection on mu; deep inside falls back to the radial crossing, which
/// understates the distance and is never traced or measured.
fn superquadric_distance(p: Vec3<f64>) -> f64 {
    let a = [p.x.abs(), p.y.abs(), p.z.abs()];
    let l4 = (a[0].powi(4) + a[1].powi(4) + a[2].powi(4)).powf(0.25);
    if l4 < 1e-12 {
        return -SQ_R;
    }
    let inside = l4 < SQ_R;
    if inside && l4 < 0.7 * SQ_R {
        return l4 - SQ_R;
    }
    // q_i(mu): the positive root of q + 4 mu q^3 = a_i, monotone in mu over
    // the bracket below.
    let coord = |mu: f64, ai: f64| -> f64 {
        if ai == 0.0 {
            return 0.0;
        }
        let mut lo = 0.0;
        let mut hi = if mu >= 0.0 { ai } else { SQ_R * 1.3 };
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if mid + 4.0 * mu * mid * mid * mid < ai {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let l4_of = |mu: f64| -> f64 {
        let q = [coord(mu, a[0]), coord(mu, a[1]), coord(mu, a[2])];
        (q[0].powi(4) + q[1].powi(4) + q[2].powi(4)).powf(0.25)
    };
    let (mut lo, mut hi) = if inside { (-0.35, 0.0) } else { (0.0, 60.0) };
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if l4_of(mid) > SQ_R {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let q = Vec3 {
        x: coord(mu, a[0]),
        y: coord(mu, a[1]),
        z: coord(mu, a[2]),
    };
    let d = (Vec3 { x: a[0], y: a[1], z: a[2] } - q).norm();
    if inside {
        -d
    } else {
        d
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3<f64> {
    loop {
        let v = Vec3 {
            x: rng.gen_range(-1.0..1.0),
            y: rng.gen_range(-1.0..1.0),
            z: rng.gen_range(-1.0..1.0),
        };
        let n = v.norm();
        if n > 0.2 && n <= 1.0 {
            return v.scale(1.0 / n);
        }
    }
}

/// Trilinear value noise on an integer lattice keyed by splitmix64; in [0,1].
fn value_noise(p: Vec3<f64>, seed: u64) -> f64 {
    let cell = |ix: i64, iy: i64, iz: i64| -> f64 {
        let mut h = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(ix as u64)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9)
            .wrapping_add(iy as u64)
            .wrapping_mul(0x94d0_49bb_1331_11eb)
            .wrapping_add(iz as u64);
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy, sz) = (s(tx), s(ty), s(tz));
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - sx), (1, sx)] {
        for (dy, wy) in [(0, 1.0 - sy), (1, sy)] {
            for (dz, wz) in [(0, 1.0 - sz), (1, sz)] {
                acc += wx * wy * wz * cell(ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

const TRACE_EPS: f64 = 1e-6;
const TRACE_MAX_STEPS: usize = 256;

/// Sphere-traces one ray; returns the hit distance along the ray.
fn trace(scene: &ProceduralScene, origin: Vec3<f64>, dir: Vec3<f64>, t_far: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let d = scene.sdf(origin + dir.scale(t));
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > t_far {
            return None;
        }
    }
    None
}

/// Renders the analytic scene through the shared deferred shading path.
/// Deterministic: two calls with equal inputs produce identical images.
pub fn render_ground_truth<S: Real>(
    scene: &ProceduralScene,
    cameras: &[Camera<S>],
    cfg: &RenderConfig<S>,
) -> RenderedViewSet<S> {
    let lights = assign_lights(cameras.len(), cfg.seed, S::of(2.5), S::one());
    cameras
        .iter()
        .zip(&lights)
        .map(|(cam, light)| {
            let h = cam.height;
            let w = cam.width;
            let camf = cam.cast::<f64>();
            let t_far = camf.origin.norm() + scene.bounding_radius() + 0.5;
            let bg_depth = cfg.background_depth_for(cam).as_f64();
            let mut albedo = Image::<S>::zeros(h, w, 3);
            let mut depth = Image::<S>::zeros(h, w, 1);
            let mut alpha = Image::<S>::zeros(h, w, 1);
            let mut normal = Image::<S>::zeros(h, w, 3);
            for i in 0..h {
                for j in 0..w {
                    let (o, d) = camf.ray_at(j as f64, i as f64);
                    match trace(scene, o, d, t_far) {
                        Some(t) => {
                            let hit = o + d.scale(t);
                            let alb = scene.albedo_at(hit);
                            let n = scene.normal(hit);
                            for ch in 0..3 {
                                *albedo.at_mut(i, j, ch) = S::of(alb[ch]);
                                *normal.at_mut(i, j, ch) = S::of(n.to_array()[ch]);
                            }
                            *depth.at_mut(i, j, 0) = S::of(t);
                            *alpha.at_mut(i, j, 0) = S::one();
                        }
                        None => {
                            *depth.at_mut(i, j, 0) = S::of(bg_depth);
                        }
                    }
                }
            }
            let mut view = finish_view(albedo, depth, alpha, cam, light, cfg);
            view.normal = normal;
            view
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{orbit_rig, Camera, RenderConfig};
    use crate::math::vec3;

    fn all_scenes() -> Vec<ProceduralScene> {
        ProceduralScene::roster(15, 7)
    }

    #[test]
    fn surface_samples_sit_on_the_zero_set() {
        for scene in all_scenes() {
            let pts = scene.sample_surface(160, 11);
            assert_eq!(pts.len(), 160);
            for p in pts {
                assert!(
                    scene.sdf(p).abs() < 1e-6,
                    "{:?}: residual {}",
                    scene.shape,
                    scene.sdf(p).abs()
                );
                assert!(p.norm() <= scene.bounding_radius() + 1e-9);
            }
        }
    }

    #[test]
    fn distance_field_has_unit_gradient_outside() {
        // Central differences on points pushed off the surface. Union points
        // near the plane where the two sphere distances tie are skipped: the
        // min() field has a crease there and one-sided gradients disagree.
        let h = 1e-5;
        for scene in all_scenes() {
            let mut checked = 0;
            for p in scene.sample_surface(60, 23) {
                let n = scene.normal(p);
                let q = p + n.scale(0.05);
                if let ShapeKind::UnionOfTwo = scene.shape {
                    let a = (q - vec3(UNION_C, 0.0, 0.0)).norm() - UNION_R[0];
                    let b = (q + vec3(UNION_C, 0.05, 0.0)).norm() - UNION_R[1];
                    if (a - b).abs() < 1e-3 {
                        continue;
                    }
                }
                let mut g = [0.0; 3];
                for ax in 0..3 {
                    let mut lo = q.to_array();
                    let mut hi = q.to_array();
                    lo[ax] -= h;
                    hi[ax] += h;
                    g[ax] = (scene.sdf(vec3(hi[0], hi[1], hi[2]))
                        - scene.sdf(vec3(lo[0], lo[1], lo[2])))
                        / (2.0 * h);
                }
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                assert!(
                    (norm - 1.0).abs() < 1e-3,
                    "{:?}: |grad| = {} at {:?}",
                    scene.shape,
                    norm,
                    q.to_array()
                );
                checked += 1;
            }
            assert!(checked >= 50, "{:?}: only {} usable probes", scene.shape, checked);
        }
    }

    #[test]
    fn albedo_stays_inside_unit_cube() {
        for scene in all_scenes() {
            for p in scene.sample_surface(100, 31) {
                let a = scene.albedo_at(p);
                for c in a {
                    assert!((0.0..=1.0).contains(&c), "albedo {c} out of range");
                }
            }
        }
    }

    #[test]
    fn sphere_silhouette_matches_the_analytic_disc() {
        let scene = ProceduralScene::new(ShapeKind::Sphere, AlbedoKind::Checker, 3);
        let res = 160;
        let dist = 2.6;
        let fov = 0.6;
        let cam = Camera::look_at(
            vec3(0.0, 0.0, dist),
            vec3(0.0, 0.0, 0.0),
            vec3(0.0, 1.0, 0.0),
            fov,
            (res, res),
            0,
        );
        let cfg = RenderConfig::<f64>::default();
        let views = render_ground_truth(&scene, &[cam], &cfg);
        let count = views[0].alpha.data().iter().filter(|a| **a > 0.5).count() as f64;

        let kappa = res as f64 / (2.0 * (fov / 2.0).tan());
        let theta = (SPHERE_R / dist).asin();
        let analytic = std::f64::consts::PI * (kappa * theta.tan()).powi(2);
        let rel = (count - analytic).abs() / analytic;
        assert!(rel < 0.01, "pixel count {count} vs analytic {analytic}: rel {rel}");
    }

    #[test]
    fn ground_truth_normals_are_unit_length_analytic_gradients() {
        let scene = ProceduralScene::new(ShapeKind::Torus, AlbedoKind::Stripes, 5);
        let cams = orbit_rig::<f64>(2, 2.4, 0.6, (40, 40), &[12.0]);
        let cfg = RenderConfig::default();
        let views = render_ground_truth(&scene, &cams, &cfg);
        let mut hits = 0;
        for v in &views {
            for i in 0..40 {
                for j in 0..40 {
                    if v.alpha.at(i, j, 0) < 0.5 {
                        continue;
                    }
                    let n = vec3(v.normal.at(i, j, 0), v.normal.at(i, j, 1), v.normal.at(i, j, 2));
                    assert!((n.norm() - 1.0).abs() < 1e-6, "|n| = {}", n.norm());
                    hits += 1;
                }
            }
        }
        assert!(hits > 200);
    }

    #[test]
    fn ground_truth_render_is_deterministic() {
        let scene = ProceduralScene::new(ShapeKind::Superquadric, AlbedoKind::Noise, 9);
        let cams = orbit_rig::<f32>(3, 2.5, 0.7, (32, 32), &[-10.0, 25.0]);
        let cfg = RenderConfig::default();
        let a = render_ground_truth(&scene, &cams, &cfg);
        let b = render_ground_truth(&scene, &cams, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rgb.data(), y.rgb.data());
            assert_eq!(x.depth.data(), y.depth.data());
            assert_eq!(x.alpha.data(), y.alpha.data());
            assert_eq!(x.normal.data(), y.normal.data());
        }
    }

    #[test]
    fn roster_cycles_shapes_and_albedos() {
        let roster = ProceduralScene::roster(7, 100);
        assert_eq!(roster.len(), 7);
        assert!(matches!(roster[0].shape, ShapeKind::Sphere));
        assert!(matches!(roster[5].shape, ShapeKind::Sphere));
        assert_ne!(roster[0].seed, roster[5].seed);
    }
}
