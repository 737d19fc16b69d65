//! Differentiable rendering: volumetric ray marching of the hash-grid field,
//! soft rasterization of extracted meshes, and the shared deferred-shading
//! path (depth -> normals -> Lambertian shade -> tonemap) applied to both.

pub mod camera;
pub mod raster;
pub mod shading;
pub mod volume;

pub use camera::{orbit_rig, sees_bounding_sphere, Camera};
pub use raster::{rasterize_mesh, rasterize_mesh_train, raster_backward, RasterTape};
pub use shading::{
    normals_from_depth, normals_from_depth_backward, shade_compose, shade_compose_backward,
    tonemap, tonemap_deriv, ShadeGrads,
};
pub use volume::{volume_backward, volume_render, volume_render_train, VolumeFrame, VolumeTape};

use crate::image::Image;
use crate::math::{Real, Vec3};

/// Pixel rectangle inside an image, in (column, row) = (x, y) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Rect { x0: 0, y0: 0, w: width, h: height }
    }

    pub fn pixels(&self) -> usize {
        self.w * self.h
    }
}

/// One point light, fixed per view for a whole run.
#[derive(Debug, Clone, Copy)]
pub struct PointLight<S> {
    pub position: Vec3<S>,
    pub intensity: S,
}

impl<S: Real> PointLight<S> {
    pub fn cast<T: Real>(&self) -> PointLight<T> {
        PointLight {
            position: Vec3::from_f64(self.position.to_f64()),
            intensity: T::of(self.intensity.as_f64()),
        }
    }
}

/// Seeded per-view light placement on a shell of `radius`, biased toward the
/// camera hemisphere is deliberately avoided: lights are global so that a
/// surface point keeps its shade across views.
pub fn assign_lights<S: Real>(count: usize, seed: u64, radius: S, intensity: S) -> Vec<PointLight<S>> {
    use rand::Rng;
    (0..count)
        .map(|i| {
            let mut rng = crate::math::derive_rng(seed, "view-light", &[i as u64]);
            // Rejection-sampled unit direction, deterministic per view.
            let dir = loop {
                let v = Vec3 {
                    x: rng.gen::<f64>() * 2.0 - 1.0,
                    y: rng.gen::<f64>() * 2.0 - 1.0,
                    z: rng.gen::<f64>() * 2.0 - 1.0,
                };
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v.scale(1.0 / n);
                }
            };
            PointLight { position: Vec3::from_f64(dir).scale(radius), intensity }
        })
        .collect()
}

/// Rendering knobs shared by the volume and mesh paths.
#[derive(Debug, Clone)]
pub struct RenderConfig<S> {
    pub samples_per_ray: usize,
    /// Stratified jitter along rays; off = bin midpoints.
    pub jitter: bool,
    /// Bounding sphere radius; rays march only inside it.
    pub bound_radius: S,
    /// Linear-space background color composited where alpha < 1.
    pub background: [S; 3],
    /// Depth written where nothing is hit; None = camera distance to origin.
    pub background_depth: Option<S>,
    pub ambient: S,
    pub diffuse: S,
    /// Near clip for rasterized geometry and ray starts.
    pub znear: S,
    /// Seed for ray jitter; combined with a per-call salt.
    pub seed: u64,
}

impl<S: Real> Default for RenderConfig<S> {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 32,
            jitter: true,
            bound_radius: S::one(),
            background: [S::of(0.5); 3],
            background_depth: None,
            ambient: S::of(0.3),
            diffuse: S::of(0.7),
            znear: S::of(0.05),
            seed: 0x5eed_cafe,
        }
    }
}

impl<S: Real> RenderConfig<S> {
    pub fn background_depth_for(&self, cam: &Camera<S>) -> S {
        self.background_depth.unwrap_or_else(|| cam.origin.norm())
    }

    pub fn cast<T: Real>(&self) -> RenderConfig<T> {
        RenderConfig {
            samples_per_ray: self.samples_per_ray,
            jitter: self.jitter,
            bound_radius: T::of(self.bound_radius.as_f64()),
            background: self.background.map(|v| T::of(v.as_f64())),
            background_depth: self.background_depth.map(|v| T::of(v.as_f64())),
            ambient: T::of(self.ambient.as_f64()),
            diffuse: T::of(self.diffuse.as_f64()),
            znear: T::of(self.znear.as_f64()),
            seed: self.seed,
        }
    }
}

/// Full per-view render product: geometry buffers plus the shaded RGB.
#[derive(Debug, Clone)]
pub struct RenderedView<S> {
    pub rgb: Image<S>,
    /// Premultiplied foreground albedo before shading.
    pub albedo: Image<S>,
    pub depth: Image<S>,
    pub alpha: Image<S>,
    pub normal: Image<S>,
    pub view_index: usize,
}

pub type RenderedViewSet<S> = Vec<RenderedView<S>>;

impl<S: Real> RenderedView<S> {
    /// Resamples every channel to `h x w`; normals are re-normalized after
    /// interpolation.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        let normal = self.normal.resample(h, w);
        let normal = Image::from_fn(h, w, 3, |i, j, ch| {
            let n = crate::math::vec3(normal.at(i, j, 0), normal.at(i, j, 1), normal.at(i, j, 2));
            let len = n.norm();
            if len > S::of(1e-9) {
                (n * (S::one() / len))[ch]
            } else {
                n[ch]
            }
        });
        RenderedView {
            rgb: self.rgb.resample(h, w),
            albedo: self.albedo.resample(h, w),
            depth: self.depth.resample(h, w),
            alpha: self.alpha.resample(h, w),
            normal,
            view_index: self.view_index,
        }
    }
}

/// Geometry buffers -> shaded view, the deferred pipeline both renderers and
/// the harness ground truth share.
pub fn finish_view<S: Real>(
    albedo: Image<S>,
    depth: Image<S>,
    alpha: Image<S>,
    cam: &Camera<S>,
    light: &PointLight<S>,
    cfg: &RenderConfig<S>,
) -> RenderedView<S> {
    let (normal, _flags) = normals_from_depth(&depth, cam, (0, 0));
    let rgb = shade_compose(&albedo, &alpha, &depth, &normal, cam, light, cfg, (0, 0));
    RenderedView { rgb, albedo, depth, alpha, normal, view_index: cam.view_index }
}
