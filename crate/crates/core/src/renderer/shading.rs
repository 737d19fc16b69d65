//! Deferred shading shared by the volume and mesh paths: normals from the
//! depth map, a point-light Lambertian shade over premultiplied albedo,
//! background compositing, and a Reinhard + gamma tonemap.
//!
//! Normals use orthographic unprojection (lateral coordinates from the pixel
//! grid at a fixed reference depth): point differences are then invariant to
//! constant depth shifts, and a constant-depth map yields exactly the negated
//! view axis. The pinhole error this introduces is quadratic in the field of
//! view and is shared by render and ground-truth paths alike.

use super::{Camera, PointLight, RenderConfig};
use crate::image::Image;
use crate::math::{vec3, Real, Vec3};

const GAMMA: f64 = 2.2;
/// Below this linear intensity the gamma curve continues linearly, keeping
/// the derivative finite at zero.
const TOE: f64 = 1e-4;

/// Reinhard range compression followed by gamma encoding. Strictly monotone
/// on [0, inf).
pub fn tonemap<S: Real>(x: S) -> S {
    let r = x / (S::one() + x);
    if r.as_f64() <= TOE {
        r * S::of(TOE.powf(1.0 / GAMMA - 1.0))
    } else {
        r.powf(S::of(1.0 / GAMMA))
    }
}

pub fn tonemap_deriv<S: Real>(x: S) -> S {
    let one = S::one();
    let r = x / (one + x);
    let dr = one / ((one + x) * (one + x));
    let dg = if r.as_f64() <= TOE {
        S::of(TOE.powf(1.0 / GAMMA - 1.0))
    } else {
        S::of(1.0 / GAMMA) * r.powf(S::of(1.0 / GAMMA - 1.0))
    };
    dg * dr
}

/// World-space unit normals from a depth map via central differences of
/// orthographically unprojected points. Border pixels (no 4-neighborhood)
/// get the negated view axis and a `false` flag.
pub fn normals_from_depth<S: Real>(
    depth: &Image<S>,
    cam: &Camera<S>,
    _rect_origin: (usize, usize),
) -> (Image<S>, Vec<bool>) {
    let (h, w) = (depth.height(), depth.width());
    let s = cam.pixel_scale(S::of(cam.origin.to_f64().norm()));
    let mut normals = Image::zeros(h, w, 3);
    let mut interior = vec![false; h * w];
    let back = cam.forward.scale(-S::one());
    for py in 0..h {
        for px in 0..w {
            let n_world = if py > 0 && py + 1 < h && px > 0 && px + 1 < w {
                interior[py * w + px] = true;
                let a = (depth.at(py, px + 1, 0) - depth.at(py, px - 1, 0)) * S::of(0.5);
                let b = (depth.at(py + 1, px, 0) - depth.at(py - 1, px, 0)) * S::of(0.5);
                let v = vec3(a, -b, -s);
                let n_cam = v.normalized();
                cam.right.scale(n_cam.x) + cam.up.scale(n_cam.y) + cam.forward.scale(n_cam.z)
            } else {
                back
            };
            *normals.at_mut(py, px, 0) = n_world.x;
            *normals.at_mut(py, px, 1) = n_world.y;
            *normals.at_mut(py, px, 2) = n_world.z;
        }
    }
    (normals, interior)
}

/// Accumulates dLoss/dDepth given dLoss/dNormals. Border pixels carry no
/// gradient (their normal is constant).
pub fn normals_from_depth_backward<S: Real>(
    depth: &Image<S>,
    cam: &Camera<S>,
    g_normal: &Image<S>,
    g_depth: &mut Image<S>,
) {
    let (h, w) = (depth.height(), depth.width());
    let s = cam.pixel_scale(S::of(cam.origin.to_f64().norm()));
    let half = S::of(0.5);
    for py in 1..h.saturating_sub(1) {
        for px in 1..w.saturating_sub(1) {
            let gn = vec3(g_normal.at(py, px, 0), g_normal.at(py, px, 1), g_normal.at(py, px, 2));
            // Project the world gradient into the camera frame.
            let g_cam = vec3(gn.dot(cam.right), gn.dot(cam.up), gn.dot(cam.forward));
            let a = (depth.at(py, px + 1, 0) - depth.at(py, px - 1, 0)) * half;
            let b = (depth.at(py + 1, px, 0) - depth.at(py - 1, px, 0)) * half;
            let v = vec3(a, -b, -s);
            let len = v.norm();
            let n = v.scale(S::one() / len);
            let gv = (g_cam - n.scale(n.dot(g_cam))).scale(S::one() / len);
            let (ga, gb) = (gv.x, -gv.y);
            *g_depth.at_mut(py, px + 1, 0) = g_depth.at(py, px + 1, 0) + ga * half;
            *g_depth.at_mut(py, px - 1, 0) = g_depth.at(py, px - 1, 0) - ga * half;
            *g_depth.at_mut(py + 1, px, 0) = g_depth.at(py + 1, px, 0) + gb * half;
            *g_depth.at_mut(py - 1, px, 0) = g_depth.at(py - 1, px, 0) - gb * half;
        }
    }
}

fn shade_point<S: Real>(
    cam: &Camera<S>,
    light: &PointLight<S>,
    cfg: &RenderConfig<S>,
    gx: S,
    gy: S,
    depth: S,
    normal: Vec3<S>,
) -> (S, Vec3<S>, S) {
    let p = cam.unproject_ortho(gx, gy, depth);
    let lvec = light.position - p;
    let dist = lvec.norm();
    let lhat = lvec.scale(S::one() / dist);
    let ndotl = normal.dot(lhat);
    let intensity = cfg.ambient + cfg.diffuse * light.intensity * ndotl.max(S::zero());
    (intensity, lhat, dist)
}

/// Shades premultiplied albedo with ambient + Lambertian point-light terms,
/// composites the background where alpha < 1, and tonemaps.
#[allow(clippy::too_many_arguments)]
pub fn shade_compose<S: Real>(
    albedo: &Image<S>,
    alpha: &Image<S>,
    depth: &Image<S>,
    normal: &Image<S>,
    cam: &Camera<S>,
    light: &PointLight<S>,
    cfg: &RenderConfig<S>,
    rect_origin: (usize, usize),
) -> Image<S> {
    let (h, w) = (albedo.height(), albedo.width());
    let mut rgb = Image::zeros(h, w, 3);
    for py in 0..h {
        for px in 0..w {
            let n = vec3(normal.at(py, px, 0), normal.at(py, px, 1), normal.at(py, px, 2));
            let (intensity, _, _) = shade_point(
                cam,
                light,
                cfg,
                S::of((rect_origin.0 + px) as f64),
                S::of((rect_origin.1 + py) as f64),
                depth.at(py, px, 0),
                n,
            );
            let bg_w = S::one() - alpha.at(py, px, 0);
            for ch in 0..3 {
                let lin = albedo.at(py, px, ch) * intensity + bg_w * cfg.background[ch];
                *rgb.at_mut(py, px, ch) = tonemap(lin);
            }
        }
    }
    rgb
}

/// Gradient buffers for the shading inputs, accumulated by
/// `shade_compose_backward`.
pub struct ShadeGrads<S> {
    pub albedo: Image<S>,
    pub alpha: Image<S>,
    pub depth: Image<S>,
    pub normal: Image<S>,
}

impl<S: Real> ShadeGrads<S> {
    pub fn zeros(h: usize, w: usize) -> Self {
        ShadeGrads {
            albedo: Image::zeros(h, w, 3),
            alpha: Image::zeros(h, w, 1),
            depth: Image::zeros(h, w, 1),
            normal: Image::zeros(h, w, 3),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn shade_compose_backward<S: Real>(
    albedo: &Image<S>,
    alpha: &Image<S>,
    depth: &Image<S>,
    normal: &Image<S>,
    cam: &Camera<S>,
    light: &PointLight<S>,
    cfg: &RenderConfig<S>,
    rect_origin: (usize, usize),
    g_rgb: &Image<S>,
    out: &mut ShadeGrads<S>,
) {
    let (h, w) = (albedo.height(), albedo.width());
    for py in 0..h {
        for px in 0..w {
            let n = vec3(normal.at(py, px, 0), normal.at(py, px, 1), normal.at(py, px, 2));
            let gx = S::of((rect_origin.0 + px) as f64);
            let gy = S::of((rect_origin.1 + py) as f64);
            let z = depth.at(py, px, 0);
            let (intensity, lhat, dist) = shade_point(cam, light, cfg, gx, gy, z, n);
            let mut g_intensity = S::zero();
            for ch in 0..3 {
                let lin = albedo.at(py, px, ch) * intensity
                    + (S::one() - alpha.at(py, px, 0)) * cfg.background[ch];
                let g_lin = g_rgb.at(py, px, ch) * tonemap_deriv(lin);
                *out.albedo.at_mut(py, px, ch) = out.albedo.at(py, px, ch) + g_lin * intensity;
                *out.alpha.at_mut(py, px, 0) =
                    out.alpha.at(py, px, 0) - g_lin * cfg.background[ch];
                g_intensity = g_intensity + g_lin * albedo.at(py, px, ch);
            }

            let ndotl = n.dot(lhat);
            if ndotl.as_f64() > 0.0 {
                let g_ndotl = g_intensity * cfg.diffuse * light.intensity;
                for (ch, comp) in [lhat.x, lhat.y, lhat.z].into_iter().enumerate() {
                    *out.normal.at_mut(py, px, ch) = out.normal.at(py, px, ch) + g_ndotl * comp;
                }
                // ndotl also moves with the unprojected point through lhat.
                let g_lhat = n.scale(g_ndotl);
                let g_p = (g_lhat - lhat.scale(lhat.dot(g_lhat))).scale(-S::one() / dist);
                *out.depth.at_mut(py, px, 0) =
                    out.depth.at(py, px, 0) + g_p.dot(cam.forward);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::math::derive_rng;
    use rand::Rng;

    fn cam(fov: f64, res: usize) -> Camera<f64> {
        Camera::look_at(
            vec3(0.0, 0.0, -3.0),
            Vec3::zero(),
            vec3(0.0, 1.0, 0.0),
            fov,
            (res, res),
            0,
        )
    }

    fn light() -> PointLight<f64> {
        PointLight { position: vec3(1.5, 2.0, -2.0), intensity: 1.0 }
    }

    #[test]
    fn constant_depth_gives_negated_view_axis() {
        let c = cam(0.6, 12);
        let depth = Image::filled(12, 12, 1, 2.7);
        let (n, interior) = normals_from_depth(&depth, &c, (0, 0));
        for py in 1..11 {
            for px in 1..11 {
                assert!(interior[py * 12 + px]);
                let nv = vec3(n.at(py, px, 0), n.at(py, px, 1), n.at(py, px, 2));
                assert!((nv + c.forward).norm() < 1e-12);
            }
        }
        assert!(!interior[0]);
    }

    #[test]
    fn depth_shift_leaves_normals_unchanged() {
        let c = cam(0.6, 10);
        let mut rng = derive_rng(3, "nshift", &[]);
        let depth = Image::from_fn(10, 10, 1, |_, _, _| 2.5 + 0.1 * rng.gen::<f64>());
        let shifted = depth.map(|v| v + 0.37);
        let (n0, _) = normals_from_depth(&depth, &c, (0, 0));
        let (n1, _) = normals_from_depth(&shifted, &c, (0, 0));
        for (a, b) in n0.data().iter().zip(n1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_plane_normals_within_one_degree() {
        // The slope bias of ray-length depth under orthographic unprojection
        // scales with fov * tan(tilt); 1 degree fov puts it near 0.8 deg.
        let res = 64;
        let c = cam(1f64.to_radians(), res);
        let tilt = 30f64.to_radians();
        let tan_t = tilt.tan();
        let depth = Image::from_fn(res, res, 1, |py, px, _| {
            let (o, d) = c.ray(px, py);
            (tan_t * o.y - o.z) / (d.z - tan_t * d.y)
        });
        let n_true = vec3(0.0, tilt.sin(), -tilt.cos());
        let (n, interior) = normals_from_depth(&depth, &c, (0, 0));
        let mut worst: f64 = 0.0;
        for py in 0..res {
            for px in 0..res {
                if !interior[py * res + px] {
                    continue;
                }
                let nv = vec3(n.at(py, px, 0), n.at(py, px, 1), n.at(py, px, 2));
                let ang = nv.dot(n_true).clamp(-1.0, 1.0).acos().to_degrees();
                worst = worst.max(ang);
            }
        }
        assert!(worst < 1.0, "max angular error {worst} deg");
    }

    #[test]
    fn normal_gradients_match_central_differences() {
        let c = cam(0.5, 6);
        let mut rng = derive_rng(11, "nfd", &[]);
        let depth = Image::from_fn(6, 6, 1, |_, _, _| 2.4 + 0.2 * rng.gen::<f64>());
        let q: Vec<f64> = (0..6 * 6 * 3).map(|_| rng.gen::<f64>() - 0.5).collect();

        let loss = |d: &[f64]| {
            let img = Image::from_vec(6, 6, 1, d.to_vec());
            let (n, _) = normals_from_depth(&img, &c, (0, 0));
            n.data().iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
        };

        let g_normal = Image::from_vec(6, 6, 3, q.clone());
        let mut g_depth = Image::zeros(6, 6, 1);
        normals_from_depth_backward(&depth, &c, &g_normal, &mut g_depth);

        let report = gradcheck::check_group(
            "normals.depth",
            depth.data(),
            g_depth.data(),
            &mut |d| loss(d),
            &gradcheck::CheckOpts::strict_f64().with_seed(7),
        );
        assert!(report.max_rel_err < 5e-6, "{report}");
    }

    #[test]
    fn tonemap_is_strictly_monotone_and_continuous_at_the_toe() {
        let mut prev = tonemap(0.0f64);
        for i in 1..400 {
            let x = i as f64 * 0.01;
            let cur = tonemap(x);
            assert!(cur > prev, "not monotone at {x}");
            prev = cur;
        }
        let r_at_toe = TOE / (1.0 - TOE);
        let below = tonemap(r_at_toe - 1e-12);
        let above = tonemap(r_at_toe + 1e-12);
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn aligned_light_maximizes_shade() {
        let c = cam(0.5, 3);
        let cfg = RenderConfig::<f64>::default();
        let albedo = Image::filled(3, 3, 3, 0.8);
        let alpha = Image::filled(3, 3, 1, 1.0);
        let depth = Image::filled(3, 3, 1, 3.0);
        let normal = Image::from_fn(3, 3, 3, |_, _, ch| if ch == 2 { -1.0 } else { 0.0 });
        // Surface point is near the origin with normal -z; a light on the -z
        // axis is aligned.
        let mut best = (f64::MIN, 0usize);
        let dirs = [vec3(0.0, 0.0, -1.0), vec3(1.0, 0.0, 0.0), vec3(0.0, 1.0, 0.0), vec3(0.7, 0.7, 0.1).normalized()];
        for (i, d) in dirs.iter().enumerate() {
            let l = PointLight { position: d.scale(2.5), intensity: 1.0 };
            let rgb = shade_compose(&albedo, &alpha, &depth, &normal, &c, &l, &cfg, (0, 0));
            let v = rgb.at(1, 1, 0);
            if v > best.0 {
                best = (v, i);
            }
        }
        assert_eq!(best.1, 0);
    }

    #[test]
    fn shade_gradients_match_central_differences() {
        let c = cam(0.5, 5);
        let cfg = RenderConfig::<f64>::default();
        let l = light();
        let mut rng = derive_rng(21, "shfd", &[]);
        let albedo = Image::from_fn(5, 5, 3, |_, _, _| 0.2 + 0.6 * rng.gen::<f64>());
        let alpha = Image::from_fn(5, 5, 1, |_, _, _| rng.gen::<f64>());
        let depth = Image::from_fn(5, 5, 1, |_, _, _| 2.5 + 0.4 * rng.gen::<f64>());
        let normal = Image::from_fn(5, 5, 3, |_, _, _| rng.gen::<f64>() - 0.5);
        let q: Vec<f64> = (0..5 * 5 * 3).map(|_| rng.gen::<f64>() - 0.5).collect();
        let g_rgb = Image::from_vec(5, 5, 3, q.clone());

        let mut grads = ShadeGrads::zeros(5, 5);
        shade_compose_backward(&albedo, &alpha, &depth, &normal, &c, &l, &cfg, (2, 3), &g_rgb, &mut grads);

        let loss_with = |al: &Image<f64>, ap: &Image<f64>, de: &Image<f64>, no: &Image<f64>| {
            let rgb = shade_compose(al, ap, de, no, &c, &l, &cfg, (2, 3));
            rgb.data().iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
        };

        for (name, data, grad, which) in [
            ("shade.albedo", albedo.data(), grads.albedo.data(), 0usize),
            ("shade.alpha", alpha.data(), grads.alpha.data(), 1),
            ("shade.depth", depth.data(), grads.depth.data(), 2),
            ("shade.normal", normal.data(), grads.normal.data(), 3),
        ] {
            let report = gradcheck::check_group(
                name,
                data,
                grad,
                &mut |v| {
                    let img = |h, w, ch: usize| Image::from_vec(h, w, ch, v.to_vec());
                    match which {
                        0 => loss_with(&img(5, 5, 3), &alpha, &depth, &normal),
                        1 => loss_with(&albedo, &img(5, 5, 1), &depth, &normal),
                        2 => loss_with(&albedo, &alpha, &img(5, 5, 1), &normal),
                        _ => loss_with(&albedo, &alpha, &depth, &img(5, 5, 3)),
                    }
                },
                &gradcheck::CheckOpts::strict_f64().with_seed(9),
            );
            assert!(report.max_rel_err < 5e-6, "{report}");
        }
    }

    #[test]
    fn deferred_chain_gradient_reaches_depth() {
        // depth -> normals -> shade, both backward passes composed.
        let c = cam(0.5, 6);
        let cfg = RenderConfig::<f64>::default();
        let l = light();
        let mut rng = derive_rng(31, "chainfd", &[]);
        let albedo = Image::from_fn(6, 6, 3, |_, _, _| 0.2 + 0.6 * rng.gen::<f64>());
        let alpha = Image::from_fn(6, 6, 1, |_, _, _| rng.gen::<f64>());
        let depth = Image::from_fn(6, 6, 1, |_, _, _| 2.6 + 0.3 * rng.gen::<f64>());
        let q: Vec<f64> = (0..6 * 6 * 3).map(|_| rng.gen::<f64>() - 0.5).collect();

        let loss = |d: &[f64]| {
            let di = Image::from_vec(6, 6, 1, d.to_vec());
            let (n, _) = normals_from_depth(&di, &c, (0, 0));
            let rgb = shade_compose(&albedo, &alpha, &di, &n, &c, &l, &cfg, (0, 0));
            rgb.data().iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
        };

        let (n, _) = normals_from_depth(&depth, &c, (0, 0));
        let g_rgb = Image::from_vec(6, 6, 3, q.clone());
        let mut sg = ShadeGrads::zeros(6, 6);
        shade_compose_backward(&albedo, &alpha, &depth, &n, &c, &l, &cfg, (0, 0), &g_rgb, &mut sg);
        normals_from_depth_backward(&depth, &c, &sg.normal, &mut sg.depth);

        let report = gradcheck::check_group(
            "chain.depth",
            depth.data(),
            sg.depth.data(),
            &mut |d| loss(d),
            &gradcheck::CheckOpts::strict_f64().with_seed(13),
        );
        assert!(report.max_rel_err < 5e-6, "{report}");
    }
}
