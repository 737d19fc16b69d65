//! Pinhole cameras on look-at rigs around the origin.

use crate::math::{vec3, Real, Vec3};

/// Pinhole camera looking at the world origin region. `forward` points from
/// the eye into the scene; (right, up, forward) is an orthonormal frame.
#[derive(Debug, Clone, Copy)]
pub struct Camera<S> {
    pub origin: Vec3<S>,
    pub right: Vec3<S>,
    pub up: Vec3<S>,
    pub forward: Vec3<S>,
    /// Vertical field of view in radians.
    pub fov_y: S,
    pub width: usize,
    pub height: usize,
    pub view_index: usize,
}

impl<S: Real> Camera<S> {
    pub fn look_at(
        eye: Vec3<S>,
        target: Vec3<S>,
        up_hint: Vec3<S>,
        fov_y: S,
        (height, width): (usize, usize),
        view_index: usize,
    ) -> Self {
        let forward = (target - eye).normalized();
        let right = forward.cross(up_hint).normalized();
        let up = right.cross(forward);
        Camera { origin: eye, right, up, forward, fov_y, width, height, view_index }
    }

    fn tan_half(&self) -> S {
        (self.fov_y * S::of(0.5)).tan()
    }

    /// World-units-per-pixel of the image plane at distance `depth` along
    /// `forward`. Shared by the raster coverage band and depth-map normals.
    pub fn pixel_scale(&self, depth: S) -> S {
        S::of(2.0) * depth * self.tan_half() / S::of(self.height as f64)
    }

    /// Ray through the center of pixel (px, py); px is the column. Returns
    /// (origin, unit direction).
    pub fn ray(&self, px: usize, py: usize) -> (Vec3<S>, Vec3<S>) {
        self.ray_at(S::of(px as f64), S::of(py as f64))
    }

    /// Ray through fractional pixel coordinates.
    pub fn ray_at(&self, px: S, py: S) -> (Vec3<S>, Vec3<S>) {
        let (w, h) = (S::of(self.width as f64), S::of(self.height as f64));
        let t = self.tan_half();
        let half = S::of(0.5);
        let sx = ((px + half) / w * S::of(2.0) - S::one()) * t * (w / h);
        let sy = (S::one() - (py + half) / h * S::of(2.0)) * t;
        let dir = self.forward + self.right.scale(sx) + self.up.scale(sy);
        (self.origin, dir.normalized())
    }

    /// Projects a world point to fractional pixel coordinates plus camera
    /// depth (distance along `forward`). Points with depth <= 0 are behind
    /// the eye and unusable.
    pub fn project(&self, p: Vec3<S>) -> (S, S, S) {
        let v = p - self.origin;
        let z = v.dot(self.forward);
        let x = v.dot(self.right);
        let y = v.dot(self.up);
        let (w, h) = (S::of(self.width as f64), S::of(self.height as f64));
        let t = self.tan_half();
        let half = S::of(0.5);
        let ndc_x = x / (z * t * (w / h));
        let ndc_y = y / (z * t);
        let px = (ndc_x + S::one()) * half * w - half;
        let py = (S::one() - ndc_y) * half * h - half;
        (px, py, z)
    }

    /// Orthographic-style unprojection used by depth-map normals: lateral
    /// coordinates from the pixel grid at the reference depth, longitudinal
    /// from the stored depth. Differences of these points are translation
    /// invariant in depth, which exact pinhole unprojection is not.
    pub fn unproject_ortho(&self, px: S, py: S, depth: S) -> Vec3<S> {
        let s = self.pixel_scale(S::of(self.origin.to_f64().norm()));
        let (w, h) = (S::of(self.width as f64), S::of(self.height as f64));
        let half = S::of(0.5);
        let x = (px + half - w * half) * s;
        let y = (h * half - py - half) * s;
        self.origin + self.right.scale(x) + self.up.scale(y) + self.forward.scale(depth)
    }

    pub fn cast<T: Real>(&self) -> Camera<T> {
        Camera {
            origin: Vec3::from_f64(self.origin.to_f64()),
            right: Vec3::from_f64(self.right.to_f64()),
            up: Vec3::from_f64(self.up.to_f64()),
            forward: Vec3::from_f64(self.forward.to_f64()),
            fov_y: T::of(self.fov_y.as_f64()),
            width: self.width,
            height: self.height,
            view_index: self.view_index,
        }
    }
}

/// Golden-angle orbit rig: any prefix of the list is well spread in azimuth,
/// so dropping trailing views keeps coverage. Elevations cycle through
/// `elevations_deg`.
pub fn orbit_rig<S: Real>(
    count: usize,
    radius: S,
    fov_y: S,
    (height, width): (usize, usize),
    elevations_deg: &[f64],
) -> Vec<Camera<S>> {
    assert!(!elevations_deg.is_empty());
    let golden = core::f64::consts::TAU * 0.381_966_011_250_105;
    (0..count)
        .map(|i| {
            let az = golden * i as f64;
            let el = elevations_deg[i % elevations_deg.len()].to_radians();
            let eye = vec3(
                S::of(az.cos() * el.cos()),
                S::of(el.sin()),
                S::of(az.sin() * el.cos()),
            )
            .scale(radius);
            Camera::look_at(
                eye,
                Vec3::zero(),
                vec3(S::zero(), S::one(), S::zero()),
                fov_y,
                (height, width),
                i,
            )
        })
        .collect()
}

/// True when the sphere of `radius` at the origin is fully inside the
/// camera frustum, with a small margin.
pub fn sees_bounding_sphere<S: Real>(cam: &Camera<S>, radius: S) -> bool {
    let dist = cam.origin.norm();
    if dist <= radius {
        return false;
    }
    let needed = (radius / dist).asin();
    let tan_half = (cam.fov_y * S::of(0.5)).tan();
    let aspect = S::of(cam.width as f64 / cam.height as f64);
    let horiz = (tan_half * aspect).atan();
    let vert = (cam.fov_y * S::of(0.5)).min(horiz);
    vert * S::of(0.98) >= needed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cam() -> Camera<f64> {
        Camera::look_at(
            vec3(1.3, 0.9, -2.1),
            Vec3::zero(),
            vec3(0.0, 1.0, 0.0),
            0.7,
            (48, 64),
            0,
        )
    }

    #[test]
    fn frame_is_orthonormal() {
        let c = test_cam();
        for (a, b) in [(c.right, c.up), (c.up, c.forward), (c.forward, c.right)] {
            assert!(a.dot(b).abs() < 1e-12);
            assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_inverts_ray() {
        let c = test_cam();
        for (px, py) in [(0usize, 0usize), (63, 47), (31, 20), (5, 40)] {
            let (o, d) = c.ray(px, py);
            let p = o + d.scale(2.7);
            let (qx, qy, z) = c.project(p);
            assert!((qx - px as f64).abs() < 1e-9, "px {px} -> {qx}");
            assert!((qy - py as f64).abs() < 1e-9, "py {py} -> {qy}");
            assert!((z - 2.7 * d.dot(c.forward)).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_prefixes_spread_and_see_the_object() {
        let rig = orbit_rig::<f64>(12, 2.8, 0.9, (64, 64), &[15.0, -12.0, 32.0]);
        for cam in &rig {
            assert!(sees_bounding_sphere(cam, 1.0), "view {}", cam.view_index);
            assert!((cam.origin.norm() - 2.8).abs() < 1e-12);
        }
        // Any 4-view prefix covers at least 3 azimuth quadrants.
        for n in [4usize, 6, 12] {
            let mut quads = [false; 4];
            for cam in &rig[..n] {
                let az = cam.origin.z.atan2(cam.origin.x);
                let q = (((az + core::f64::consts::PI) / (core::f64::consts::PI / 2.0))
                    .floor() as usize)
                    .min(3);
                quads[q] = true;
            }
            assert!(quads.iter().filter(|&&q| q).count() >= 3, "prefix {n}: {quads:?}");
        }
    }

    #[test]
    fn ortho_unproject_differences_ignore_depth_shift() {
        let c = test_cam();
        let p1 = c.unproject_ortho(10.0, 12.0, 2.0) - c.unproject_ortho(11.0, 12.0, 2.1);
        let p2 = c.unproject_ortho(10.0, 12.0, 2.5) - c.unproject_ortho(11.0, 12.0, 2.6);
        assert!((p1 - p2).norm() < 1e-12);
    }
}
