//! The 3D adapter: per-timestep reconstruction of the scene from denoised
//! views, rendering of RGBD condition views, and the glue that turns a plain
//! sampler step into a 3D-consistent one.
//!
//! Step order (one-pass architecture): denoise every view conditioned on the
//! previous step's renders, blend render over denoised for t above the gate,
//! feed the blended images to the solver (multistep history included), then
//! reconstruct from the blended images and render fresh conditions. The
//! two-pass variant reconstructs from an unconditioned first pass and spends
//! a second denoiser pass on the same timestep instead.

use crate::denoiser::{blend, ControlInput, ControlSchedule, DenoiseRequest, Denoiser};
use crate::field::{FieldGrads, HashGridConfig, HashGridField};
use crate::geometry::{
    build_edge_faces, build_vertex_neighbors, density_to_sdf, laplacian_energy, marching_tets,
    marching_tets_backward, normal_consistency, DensityToSdfConfig, ExtractedMesh, TetGrid,
    TetTopology, TriMesh,
};
use crate::image::Image;
use crate::losses::{
    masked_l1, masked_l1_backward, normal_grad_l15, normal_grad_l15_backward, patch_pyramid_l1,
    patch_pyramid_l1_backward, ray_entropy_uniform, ray_entropy_uniform_backward, LossWeights,
};
use crate::math::{derive_rng, Real, Vec3};
use crate::optim::{Adam, AdamConfig};
use crate::renderer::{
    assign_lights, finish_view, normals_from_depth, normals_from_depth_backward, rasterize_mesh,
    rasterize_mesh_train, raster_backward, shade_compose, shade_compose_backward, volume_render,
    volume_render_train, volume_backward, Camera, PointLight, Rect, RenderConfig,
    RenderedViewSet, ShadeGrads,
};
use crate::schedule::{perturb, NoiseSchedule};
use crate::solver::{predict_denoised, solver_step, SolverConfig, SolverState};
use crate::{Error, Result};

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Nerf,
    Mesh,
    TextureOnly,
}

/// Noisy multi-view sampler state: one latent image per active view plus the
/// per-view multistep solver history.
pub struct MultiViewState<S> {
    pub x: Vec<Image<S>>,
    pub cameras: Vec<Camera<S>>,
    pub solver: Vec<SolverState<S>>,
    pub t: f64,
}

impl<S: Real> MultiViewState<S> {
    /// Diffuses the initial views to t_start: x = alpha x_init + sigma eps,
    /// with a per-view seeded unit Gaussian draw.
    pub fn perturb(
        x_init: &[Image<S>],
        cameras: &[Camera<S>],
        schedule: &NoiseSchedule,
        t_start: f64,
        seed: u64,
    ) -> Result<Self> {
        if x_init.len() != cameras.len() {
            return Err(Error::config(format!(
                "{} initial views vs {} cameras",
                x_init.len(),
                cameras.len()
            )));
        }
        if !(0.0..=schedule.t_max()).contains(&t_start) {
            return Err(Error::config(format!(
                "t_start {t_start} outside [0, {}]",
                schedule.t_max()
            )));
        }
        let mut x = Vec::with_capacity(x_init.len());
        for (i, (img, cam)) in x_init.iter().zip(cameras).enumerate() {
            if img.height() != cam.height || img.width() != cam.width {
                return Err(Error::config(format!(
                    "view {i} is {}x{} but its camera expects {}x{}",
                    img.height(),
                    img.width(),
                    cam.height,
                    cam.width
                )));
            }
            let mut noise = Image::zeros(img.height(), img.width(), img.channels());
            noise.fill_standard_normal(&mut derive_rng(seed, "init-noise", &[i as u64]));
            x.push(perturb(img, schedule, t_start, &noise));
        }
        Ok(MultiViewState {
            x,
            cameras: cameras.to_vec(),
            solver: (0..x_init.len()).map(|_| SolverState::new()).collect(),
            t: t_start,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Drops the highest-index views; the survivors' latents and solver
    /// history are untouched.
    pub fn truncate_views(&mut self, n: usize) {
        self.x.truncate(n);
        self.cameras.truncate(n);
        self.solver.truncate(n);
    }
}

/// Geometry half of the scene parameters. The hash-grid field always carries
/// density and albedo; once a mesh exists it takes over the surface and the
/// field serves as its texture.
pub enum Geometry<S> {
    None,
    /// Marching-tets surface with optimizable lattice sdf and offsets.
    Tet(TetScene<S>),
    /// Externally supplied surface; never optimized.
    Frozen(TriMesh<S>),
}

pub struct TetScene<S> {
    pub grid: TetGrid<S>,
    /// Extraction cache; reused verbatim while vertex signs are unchanged.
    pub topology: Option<TetTopology>,
}

pub struct SceneParams<S> {
    pub field: HashGridField<S>,
    pub geo: Geometry<S>,
}

impl<S: Real> SceneParams<S> {
    /// Current surface for rendering, refreshing the extraction cache.
    pub fn surface(&mut self) -> Result<Option<TriMesh<S>>> {
        match &mut self.geo {
            Geometry::None => Ok(None),
            Geometry::Frozen(m) => Ok(Some(m.clone())),
            Geometry::Tet(t) => {
                let ex = marching_tets(&t.grid, t.topology.as_ref())?;
                t.topology = Some(ex.topology);
                Ok(Some(ex.mesh))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterConfig<S> {
    pub iters_3d: usize,
    pub iters_texture: usize,
    pub lr_hash: f64,
    pub lr_other: f64,
    pub adam: AdamConfig,
    /// Loss patch side in pixels; rendered with a 1-px apron so the normal
    /// stencil is valid on every loss pixel.
    pub patch: usize,
    pub views_per_iter: usize,
    pub two_pass: bool,
    pub seed: u64,
    pub render: RenderConfig<S>,
    pub weights: LossWeights<S>,
    pub field: HashGridConfig,
    pub tet_res: usize,
    pub d2s: DensityToSdfConfig,
}

impl<S: Real> Default for AdapterConfig<S> {
    fn default() -> Self {
        AdapterConfig {
            iters_3d: 96,
            iters_texture: 48,
            lr_hash: 1e-2,
            lr_other: 1e-3,
            adam: AdamConfig::default(),
            patch: 16,
            views_per_iter: 2,
            two_pass: false,
            seed: 0,
            render: RenderConfig::default(),
            weights: LossWeights::default(),
            field: HashGridConfig::default(),
            tet_res: 40,
            d2s: DensityToSdfConfig::default(),
        }
    }
}

/// Optional reconstruction targets besides the denoised RGB: alpha maps
/// (softened before use) and normal maps for the regression terms.
#[derive(Clone, Copy, Default)]
pub struct AuxTargets<'a, S> {
    pub alpha: Option<&'a [Image<S>]>,
    pub normal: Option<&'a [Image<S>]>,
}

impl<S> AuxTargets<'_, S> {
    pub fn none() -> Self {
        AuxTargets { alpha: None, normal: None }
    }
}

pub struct AdapterState<S> {
    pub phase: Phase,
    pub scene: SceneParams<S>,
    pub lights: Vec<PointLight<S>>,
    /// Fraction of the timestep plan consumed; set by the pipeline.
    pub progress: f64,
    pub cfg: AdapterConfig<S>,
    opt: Adam<S>,
    iter_count: u64,
    step_count: u64,
}

fn nerf_groups<S: Real>(cfg: &AdapterConfig<S>, field: &HashGridField<S>) -> Adam<S> {
    Adam::new(
        cfg.adam,
        &[
            ("hash", field.hash.len(), cfg.lr_hash),
            ("mlp", field.mlp.len(), cfg.lr_other),
        ],
    )
}

fn mesh_groups<S: Real>(cfg: &AdapterConfig<S>, field: &HashGridField<S>, grid: &TetGrid<S>) -> Adam<S> {
    Adam::new(
        cfg.adam,
        &[
            ("hash", field.hash.len(), cfg.lr_hash),
            ("mlp", field.mlp.len(), cfg.lr_other),
            ("sdf", grid.sdf.len(), cfg.lr_other),
            ("offsets", grid.offsets.len(), cfg.lr_other),
        ],
    )
}

impl<S: Real> AdapterState<S> {
    /// Fresh NeRF-phase state. Lights are drawn once per run and keyed by
    /// view index, so they agree with harness ground truth under the same
    /// render seed.
    pub fn new(cfg: AdapterConfig<S>, views: usize) -> Result<Self> {
        cfg.weights.validate()?;
        if cfg.patch < 4 {
            return Err(Error::config(format!("patch {} too small", cfg.patch)));
        }
        let field = HashGridField::new(cfg.field, cfg.seed);
        let lights = assign_lights(views, cfg.render.seed, S::of(2.5), S::one());
        let opt = nerf_groups(&cfg, &field);
        Ok(AdapterState {
            phase: Phase::Nerf,
            scene: SceneParams { field, geo: Geometry::None },
            lights,
            progress: 0.0,
            cfg,
            opt,
            iter_count: 0,
            step_count: 0,
        })
    }

    /// NeRF -> mesh handoff: distance-transform the density level set onto a
    /// tet lattice and switch the optimizer to the mesh parameter groups.
    pub fn handoff_to_mesh(&mut self) -> Result<()> {
        if self.phase != Phase::Nerf {
            return Err(Error::config("handoff_to_mesh requires the nerf phase"));
        }
        let mut grid = TetGrid::new(self.cfg.tet_res);
        density_to_sdf(&self.scene.field, &mut grid, &self.cfg.d2s)?;
        self.opt = mesh_groups(&self.cfg, &self.scene.field, &grid);
        self.scene.geo = Geometry::Tet(TetScene { grid, topology: None });
        self.phase = Phase::Mesh;
        Ok(())
    }

    /// Locks the current geometry; only the texture field keeps training.
    pub fn freeze_geometry(&mut self) {
        self.opt = nerf_groups(&self.cfg, &self.scene.field);
        self.phase = Phase::TextureOnly;
    }

    /// Installs an external surface and enters texture-only mode.
    pub fn set_frozen_mesh(&mut self, mesh: TriMesh<S>) {
        self.scene.geo = Geometry::Frozen(mesh);
        self.freeze_geometry();
    }

    pub fn iters_for_phase(&self) -> usize {
        match self.phase {
            Phase::Nerf | Phase::Mesh => self.cfg.iters_3d,
            Phase::TextureOnly => self.cfg.iters_texture,
        }
    }
}

fn embed_add<S: Real>(dst: &mut Image<S>, src: &Image<S>, y0: usize, x0: usize) {
    for i in 0..src.height() {
        for j in 0..src.width() {
            for ch in 0..src.channels() {
                *dst.at_mut(y0 + i, x0 + j, ch) = dst.at(y0 + i, x0 + j, ch) + src.at(i, j, ch);
            }
        }
    }
}

/// Per-patch loss pieces, in rendered-buffer coordinates (the outer rect).
struct PatchGrads<S> {
    loss: f64,
    g_albedo: Image<S>,
    g_depth: Image<S>,
    g_alpha: Image<S>,
    /// Per-ray bin gradients for the entropy term (volume path only).
    g_bins: Option<Vec<Vec<S>>>,
}

struct PatchTargets<'a, S> {
    rgb: &'a Image<S>,
    /// Pre-blurred alpha target, full frame.
    soft_alpha: Option<&'a Image<S>>,
    normal: Option<&'a Image<S>>,
    /// Hard foreground mask for the normal terms, full frame.
    fg: Option<&'a Image<S>>,
}

/// Shades one rendered patch, evaluates every active loss term on its
/// interior, and pulls the gradients back to the renderer outputs.
#[allow(clippy::too_many_arguments)]
fn patch_objective<S: Real>(
    albedo: &Image<S>,
    depth: &Image<S>,
    alpha: &Image<S>,
    bins: Option<(&[Vec<S>], &[S])>,
    rect: Rect,
    cam: &Camera<S>,
    light: &PointLight<S>,
    render_cfg: &RenderConfig<S>,
    weights: &LossWeights<S>,
    targets: &PatchTargets<S>,
    scale: S,
) -> Result<PatchGrads<S>> {
    let (oh, ow) = (rect.h, rect.w);
    let (ph, pw) = (oh - 2, ow - 2);
    let origin = (rect.x0, rect.y0);
    let (gy0, gx0) = (rect.y0 + 1, rect.x0 + 1);

    let (normal_map, _) = normals_from_depth(depth, cam, origin);
    let rgb = shade_compose(albedo, alpha, depth, &normal_map, cam, light, render_cfg, origin);

    let ones = Image::filled(ph, pw, 1, S::one());
    let rgb_in = rgb.crop(1, 1, ph, pw);
    let rgb_t = targets.rgb.crop(gy0, gx0, ph, pw);

    let mut loss = S::zero();
    let mut g_rgb_in = Image::zeros(ph, pw, 3);
    if weights.rgb_l1 > S::zero() {
        loss = loss + weights.rgb_l1 * masked_l1(&rgb_in, &rgb_t, &ones);
        masked_l1_backward(&rgb_in, &rgb_t, &ones, scale * weights.rgb_l1, &mut g_rgb_in);
    }
    if weights.rgb_patch > S::zero() {
        loss = loss + weights.rgb_patch * patch_pyramid_l1(&rgb_in, &rgb_t, &ones);
        patch_pyramid_l1_backward(&rgb_in, &rgb_t, &ones, scale * weights.rgb_patch, &mut g_rgb_in);
    }

    let mut g_rgb = Image::zeros(oh, ow, 3);
    embed_add(&mut g_rgb, &g_rgb_in, 1, 1);
    let mut grads = ShadeGrads::zeros(oh, ow);
    shade_compose_backward(
        albedo, alpha, depth, &normal_map, cam, light, render_cfg, origin, &g_rgb, &mut grads,
    );

    if weights.alpha > S::zero() {
        if let Some(soft) = targets.soft_alpha {
            let a_in = alpha.crop(1, 1, ph, pw);
            let a_t = soft.crop(gy0, gx0, ph, pw);
            loss = loss + weights.alpha * masked_l1(&a_in, &a_t, &ones);
            let mut g_a_in = Image::zeros(ph, pw, 1);
            masked_l1_backward(&a_in, &a_t, &ones, scale * weights.alpha, &mut g_a_in);
            embed_add(&mut grads.alpha, &g_a_in, 1, 1);
        }
    }

    let normal_in = normal_map.crop(1, 1, ph, pw);
    let fg_in = match targets.fg {
        Some(fg) => fg.crop(gy0, gx0, ph, pw),
        None => ones.clone(),
    };
    let mut g_n_in = Image::zeros(ph, pw, 3);
    let mut any_normal = false;
    if let Some(nt) = targets.normal {
        let n_t = nt.crop(gy0, gx0, ph, pw);
        if weights.normal_reg > S::zero() {
            loss = loss + weights.normal_reg * normal_grad_l15(&normal_in, Some(&n_t), &fg_in);
            normal_grad_l15_backward(&normal_in, Some(&n_t), &fg_in, scale * weights.normal_reg, &mut g_n_in);
            any_normal = true;
        }
        if weights.normal_highpass > S::zero() {
            loss = loss + weights.normal_highpass * patch_pyramid_l1(&normal_in, &n_t, &fg_in);
            patch_pyramid_l1_backward(&normal_in, &n_t, &fg_in, scale * weights.normal_highpass, &mut g_n_in);
            any_normal = true;
        }
    }
    if weights.normal_tv > S::zero() {
        loss = loss + weights.normal_tv * normal_grad_l15(&normal_in, None, &fg_in);
        normal_grad_l15_backward(&normal_in, None, &fg_in, scale * weights.normal_tv, &mut g_n_in);
        any_normal = true;
    }
    if any_normal {
        let mut g_n = Image::zeros(oh, ow, 3);
        embed_add(&mut g_n, &g_n_in, 1, 1);
        embed_add(&mut g_n, &grads.normal, 0, 0);
        grads.normal = g_n;
    }
    // Normals are a function of the depth map; fold their gradient down.
    normals_from_depth_backward(depth, cam, &grads.normal, &mut grads.depth);

    let mut g_bins = None;
    if weights.ray_entropy > S::zero() {
        if let Some((bin_p, bin_delta)) = bins {
            let rays = bin_p.iter().filter(|p| !p.is_empty()).count();
            if rays > 0 {
                let per_ray = weights.ray_entropy * S::of(1.0 / rays as f64);
                let d = weights.background_thickness;
                let mut acc = S::zero();
                let mut out: Vec<Vec<S>> = Vec::with_capacity(bin_p.len());
                for (p, delta) in bin_p.iter().zip(bin_delta) {
                    let mut g = vec![S::zero(); p.len()];
                    if !p.is_empty() {
                        acc = acc + ray_entropy_uniform(p, *delta, d)?;
                        ray_entropy_uniform_backward(p, *delta, d, scale * per_ray, &mut g);
                    }
                    out.push(g);
                }
                loss = loss + per_ray * acc;
                g_bins = Some(out);
            }
        }
    }

    Ok(PatchGrads {
        loss: loss.as_f64(),
        g_albedo: grads.albedo,
        g_depth: grads.depth,
        g_alpha: grads.alpha,
        g_bins,
    })
}

fn pick_views(rng: &mut impl Rng, total: usize, wanted: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    if wanted >= total {
        return idx;
    }
    idx.shuffle(rng);
    idx.truncate(wanted);
    idx
}

/// Per-iteration loss report from a reconstruction call.
#[derive(Debug, Clone, Copy)]
pub struct ReconReport {
    pub first_loss: f64,
    pub last_loss: f64,
    pub iters: usize,
}

/// Fits the active phase's parameters to the target views with seeded random
/// patches, Adam, and the full loss stack. Targets are full-frame images in
/// the same tonemapped domain the renderer produces.
pub fn reconstruct<S: Real>(
    state: &mut AdapterState<S>,
    target_rgb: &[Image<S>],
    cameras: &[Camera<S>],
    aux: &AuxTargets<S>,
    iters: usize,
) -> Result<ReconReport> {
    if cameras.len() < 2 {
        return Err(Error::config(format!("reconstruct needs >= 2 views, got {}", cameras.len())));
    }
    if target_rgb.len() != cameras.len() {
        return Err(Error::config(format!(
            "{} targets vs {} cameras",
            target_rgb.len(),
            cameras.len()
        )));
    }
    if iters == 0 {
        return Err(Error::config("reconstruct needs iters >= 1"));
    }
    if let Some(a) = aux.alpha {
        if a.len() != cameras.len() {
            return Err(Error::config("alpha target count mismatch"));
        }
    }
    if let Some(n) = aux.normal {
        if n.len() != cameras.len() {
            return Err(Error::config("normal target count mismatch"));
        }
    }

    let cfg_iters = iters;
    let weights = state.cfg.weights.clone();
    let render_cfg = state.cfg.render.clone();
    for cam in cameras {
        if cam.view_index >= state.lights.len() {
            return Err(Error::config(format!(
                "camera view_index {} has no assigned light (state built for {} views)",
                cam.view_index,
                state.lights.len()
            )));
        }
    }

    // Alpha targets are blurred once per call; the blur radius tracks the
    // frame height. Foreground masks for the normal terms come from the
    // unblurred maps.
    let soft_alpha: Option<Vec<Image<S>>> = aux.alpha.map(|list| {
        list.iter()
            .map(|a| a.gaussian_blur(weights.sigma_px(a.height())))
            .collect()
    });
    let fg_mask: Option<Vec<Image<S>>> = aux.alpha.map(|list| {
        list.iter()
            .map(|a| a.map(|v| if v.as_f64() >= 0.5 { S::one() } else { S::zero() }))
            .collect()
    });

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for _ in 0..cfg_iters {
        let mut rng = derive_rng(state.cfg.seed, "recon-iter", &[state.iter_count]);
        let chosen = pick_views(&mut rng, cameras.len(), state.cfg.views_per_iter.max(1));
        let patches = chosen.len();
        let scale = S::of(1.0 / patches as f64);

        let mut grads = FieldGrads::zeros_like(&state.scene.field);
        let mut iter_loss = 0.0;

        // Mesh phases pull the surface out of the lattice once per iteration.
        let extracted: Option<ExtractedMesh<S>> = match &state.scene.geo {
            Geometry::None => None,
            Geometry::Frozen(_) => None,
            Geometry::Tet(t) => Some(marching_tets(&t.grid, t.topology.as_ref())?),
        };
        let frozen_mesh = match &state.scene.geo {
            Geometry::Frozen(m) => Some(m),
            _ => None,
        };
        let active_mesh: Option<&TriMesh<S>> =
            frozen_mesh.or(extracted.as_ref().map(|e| &e.mesh));
        let mut g_verts: Vec<Vec3<S>> = match (&extracted, state.phase) {
            (Some(e), Phase::Mesh) => vec![Vec3::zero(); e.mesh.vertices.len()],
            _ => Vec::new(),
        };

        for &v in &chosen {
            let cam = &cameras[v];
            let (h, w) = (cam.height, cam.width);
            let p = state.cfg.patch.min(h - 2).min(w - 2);
            let y0 = rng.gen_range(0..=h - p - 2);
            let x0 = rng.gen_range(0..=w - p - 2);
            let rect = Rect { x0, y0, w: p + 2, h: p + 2 };
            let light = &state.lights[cam.view_index];
            let targets = PatchTargets {
                rgb: &target_rgb[v],
                soft_alpha: soft_alpha.as_ref().map(|s| &s[v]),
                normal: aux.normal.map(|n| &n[v]),
                fg: fg_mask.as_ref().map(|f| &f[v]),
            };

            let patch = match active_mesh {
                None => {
                    let tape =
                        volume_render_train(&state.scene.field, cam, rect, &render_cfg, state.iter_count);
                    let pg = patch_objective(
                        &tape.frame.albedo,
                        &tape.frame.depth,
                        &tape.frame.alpha,
                        Some((&tape.frame.bin_p, &tape.frame.bin_delta)),
                        rect,
                        cam,
                        light,
                        &render_cfg,
                        &weights,
                        &targets,
                        scale,
                    )?;
                    volume_backward(
                        &state.scene.field,
                        &tape,
                        &pg.g_albedo,
                        &pg.g_depth,
                        &pg.g_alpha,
                        pg.g_bins.as_deref(),
                        &mut grads,
                    );
                    pg
                }
                Some(mesh) => {
                    let tape = rasterize_mesh_train(mesh, &state.scene.field, cam, rect, &render_cfg);
                    let pg = patch_objective(
                        &tape.frame.albedo,
                        &tape.frame.depth,
                        &tape.frame.alpha,
                        None,
                        rect,
                        cam,
                        light,
                        &render_cfg,
                        &weights,
                        &targets,
                        scale,
                    )?;
                    let mut verts_sink = vec![Vec3::zero(); mesh.vertices.len()];
                    let sink: &mut [Vec3<S>] = if state.phase == Phase::Mesh && !g_verts.is_empty() {
                        &mut g_verts
                    } else {
                        &mut verts_sink
                    };
                    raster_backward(
                        mesh,
                        &state.scene.field,
                        cam,
                        &tape,
                        &pg.g_albedo,
                        &pg.g_depth,
                        &pg.g_alpha,
                        &mut grads,
                        sink,
                    );
                    pg
                }
            };

            if !patch.loss.is_finite() {
                return Err(Error::numerical(
                    "reconstruct",
                    format!(
                        "non-finite patch loss {} on view {v} rect ({y0},{x0})+{p} phase {:?}",
                        patch.loss, state.phase
                    ),
                ));
            }
            iter_loss += patch.loss / patches as f64;
        }

        // Geometry regularizers act on the whole extracted surface once per
        // iteration, not per patch.
        if state.phase == Phase::Mesh {
            if let Some(ex) = &extracted {
                let mesh = &ex.mesh;
                if !mesh.faces.is_empty() {
                    let mut reg_grads = vec![Vec3::zero(); mesh.vertices.len()];
                    if weights.laplacian > S::zero() {
                        let neighbors = build_vertex_neighbors(&mesh.faces, mesh.vertices.len());
                        let e = laplacian_energy(&mesh.vertices, &neighbors, Some(&mut reg_grads));
                        iter_loss += (weights.laplacian * e).as_f64();
                        for (g, r) in g_verts.iter_mut().zip(&reg_grads) {
                            *g += *r * weights.laplacian;
                        }
                        reg_grads.iter_mut().for_each(|g| *g = Vec3::zero());
                    }
                    if weights.normal_consistency > S::zero() {
                        let pairs = build_edge_faces(&mesh.faces);
                        let e = normal_consistency(mesh, &pairs, Some(&mut reg_grads));
                        iter_loss += (weights.normal_consistency * e).as_f64();
                        for (g, r) in g_verts.iter_mut().zip(&reg_grads) {
                            *g += *r * weights.normal_consistency;
                        }
                    }
                }
            }
        }

        if !iter_loss.is_finite() {
            return Err(Error::numerical(
                "reconstruct",
                format!("non-finite iteration loss {iter_loss} phase {:?}", state.phase),
            ));
        }

        state.opt.begin_step();
        let hash_g = state.opt.group_index("hash");
        let mlp_g = state.opt.group_index("mlp");
        state.opt.update(hash_g, &mut state.scene.field.hash, &grads.hash);
        state.opt.update(mlp_g, &mut state.scene.field.mlp, &grads.mlp);

        if state.phase == Phase::Mesh {
            if let (Some(ex), Geometry::Tet(t)) = (&extracted, &mut state.scene.geo) {
                let mut g_sdf = vec![S::zero(); t.grid.sdf.len()];
                let mut g_off = vec![S::zero(); t.grid.offsets.len()];
                marching_tets_backward(&t.grid, ex, &g_verts, &mut g_sdf, &mut g_off);
                let sdf_g = state.opt.group_index("sdf");
                let off_g = state.opt.group_index("offsets");
                state.opt.update(sdf_g, &mut t.grid.sdf, &g_sdf);
                state.opt.update(off_g, &mut t.grid.offsets, &g_off);
            }
        }

        if let (Some(ex), Geometry::Tet(t)) = (extracted, &mut state.scene.geo) {
            t.topology = Some(ex.topology);
        }

        if first_loss.is_nan() {
            first_loss = iter_loss;
        }
        last_loss = iter_loss;
        state.iter_count += 1;
    }

    Ok(ReconReport { first_loss, last_loss, iters: cfg_iters })
}

/// Full-frame RGBD condition views of the current scene, one per camera,
/// shaded exactly like the training patches.
pub fn render_conditions<S: Real>(
    state: &mut AdapterState<S>,
    cameras: &[Camera<S>],
) -> Result<RenderedViewSet<S>> {
    let mesh = state.scene.surface()?;
    let cfg = &state.cfg.render.clone();
    let mut out = Vec::with_capacity(cameras.len());
    for cam in cameras {
        if cam.view_index >= state.lights.len() {
            return Err(Error::config(format!(
                "camera view_index {} has no assigned light",
                cam.view_index
            )));
        }
        let rect = Rect::full(cam.height, cam.width);
        let (albedo, depth, alpha) = match &mesh {
            None => {
                let f = volume_render(&state.scene.field, cam, rect, cfg, CONDITION_SALT, false);
                (f.albedo, f.depth, f.alpha)
            }
            Some(m) => {
                let f = rasterize_mesh(m, &state.scene.field, cam, rect, cfg);
                (f.albedo, f.depth, f.alpha)
            }
        };
        out.push(finish_view(albedo, depth, alpha, cam, &state.lights[cam.view_index], cfg));
    }
    Ok(out)
}

const CONDITION_SALT: u64 = 0x00c0_0d17;

/// One step's outputs: the fresh condition renders plus loss diagnostics.
pub struct StepOutcome<S> {
    pub conditions: RenderedViewSet<S>,
    pub recon: ReconReport,
}

/// One MVEdit timestep. `conditions` are the previous step's renders; absent
/// on the first invocation, which therefore denoises unconditioned.
///
/// `control_override`, when set, replaces `conditions` as the denoiser's
/// control input (texture super-resolution conditions on the initial renders
/// for the whole run); blending still mixes in `conditions`.
///
/// `render_cams` selects the reconstruction/render resolution. Targets are
/// downsampled to it and the returned conditions are upsampled back to the
/// latent resolution, so callers always blend at one size.
#[allow(clippy::too_many_arguments)]
pub fn adapter_step<S: Real>(
    state: &mut AdapterState<S>,
    mv: &mut MultiViewState<S>,
    schedule: &NoiseSchedule,
    ctrl: &ControlSchedule,
    denoiser: &dyn Denoiser<S>,
    solver_cfg: &SolverConfig,
    conditions: Option<&RenderedViewSet<S>>,
    control_override: Option<&RenderedViewSet<S>>,
    aux: &AuxTargets<S>,
    t_next: f64,
    is_final: bool,
    render_cams: Option<&[Camera<S>]>,
) -> Result<StepOutcome<S>> {
    if mv.t <= 0.0 {
        return Err(Error::config(format!("adapter_step at t {} <= 0", mv.t)));
    }
    for set in [conditions, control_override].into_iter().flatten() {
        if set.len() < mv.len() {
            return Err(Error::config(format!(
                "{} condition views for {} active views",
                set.len(),
                mv.len()
            )));
        }
    }
    if let Some(rc) = render_cams {
        if rc.len() != mv.len() {
            return Err(Error::config(format!(
                "{} render cameras for {} active views",
                rc.len(),
                mv.len()
            )));
        }
    }
    let t = mv.t;
    let n = mv.len();
    let (lat_h, lat_w) = (mv.x[0].height(), mv.x[0].width());

    let denoise_pass = |state: &AdapterState<S>,
                        mv: &MultiViewState<S>,
                        conds: Option<&RenderedViewSet<S>>,
                        label: &str|
     -> Result<Vec<Image<S>>> {
        let weight = match conds {
            Some(_) => ctrl.tile_weight(t),
            None => 0.0,
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let control = conds.map(|c| ControlInput {
                rgb: Some(&c[i].rgb),
                depth: Some(&c[i].depth),
            });
            let req = DenoiseRequest {
                x_t: &mv.x[i],
                t,
                view_index: mv.cameras[i].view_index,
                condition: None,
                control,
                control_weight: weight,
            };
            let mut rng = derive_rng(state.cfg.seed, label, &[state.step_count, i as u64]);
            let eps = denoiser.denoise(&req, schedule, &mut rng)?;
            out.push(predict_denoised(schedule, &mv.x[i], &eps, t));
        }
        Ok(out)
    };

    // Two-pass runs its reconstruction mid-timestep; one-pass reconstructs
    // after the solver advances, from the same blended images the solver saw.
    let (blended, mid) = if state.cfg.two_pass {
        let x_first = denoise_pass(state, mv, None, "denoise")?;
        let (renders, recon) =
            fit_and_render_at(state, &mv.cameras, render_cams, &x_first, aux, (lat_h, lat_w))?;
        let control_src = control_override.or(Some(&renders));
        let x_second = denoise_pass(state, mv, control_src, "denoise2")?;
        let blended: Vec<Image<S>> = x_second
            .iter()
            .zip(&renders)
            .map(|(x, r)| blend(x, &r.rgb, t, ctrl))
            .collect();
        (blended, Some((renders, recon)))
    } else {
        let x_hat = denoise_pass(state, mv, control_override.or(conditions), "denoise")?;
        let blended: Vec<Image<S>> = match conditions {
            Some(c) => x_hat
                .iter()
                .zip(c.iter())
                .map(|(x, r)| blend(x, &r.rgb, t, ctrl))
                .collect(),
            None => x_hat,
        };
        (blended, None)
    };

    for i in 0..n {
        let noise = if solver_cfg.sde {
            let mut img = Image::zeros(mv.x[i].height(), mv.x[i].width(), mv.x[i].channels());
            img.fill_standard_normal(&mut derive_rng(
                state.cfg.seed,
                "sde-noise",
                &[state.step_count, i as u64],
            ));
            Some(img)
        } else {
            None
        };
        let next = solver_step(
            &mut mv.solver[i],
            solver_cfg,
            schedule,
            &mv.x[i],
            &blended[i],
            t,
            t_next,
            is_final,
            noise.as_ref(),
        )?;
        mv.x[i] = next;
    }
    mv.t = t_next;

    let (out_conditions, recon) = match mid {
        Some(pair) => pair,
        None => fit_and_render_at(state, &mv.cameras, render_cams, &blended, aux, (lat_h, lat_w))?,
    };
    state.step_count += 1;

    Ok(StepOutcome { conditions: out_conditions, recon })
}

/// Reconstructs from `targets` and renders fresh conditions, translating
/// between the latent resolution and an optional lower render resolution.
pub(crate) fn fit_and_render_at<S: Real>(
    state: &mut AdapterState<S>,
    latent_cams: &[Camera<S>],
    render_cams: Option<&[Camera<S>]>,
    targets: &[Image<S>],
    aux: &AuxTargets<S>,
    (lat_h, lat_w): (usize, usize),
) -> Result<(RenderedViewSet<S>, ReconReport)> {
    let iters = state.iters_for_phase();
    let rc = match render_cams {
        None => {
            let recon = reconstruct(state, targets, latent_cams, aux, iters)?;
            let renders = render_conditions(state, latent_cams)?;
            return Ok((renders, recon));
        }
        Some(rc) => rc,
    };
    let (rh, rw) = (rc[0].height, rc[0].width);
    if (rh, rw) == (lat_h, lat_w) {
        let recon = reconstruct(state, targets, rc, aux, iters)?;
        let renders = render_conditions(state, rc)?;
        return Ok((renders, recon));
    }
    let t_small: Vec<Image<S>> = targets.iter().map(|t| t.resample(rh, rw)).collect();
    let a_small: Option<Vec<Image<S>>> =
        aux.alpha.map(|l| l.iter().map(|a| a.resample(rh, rw)).collect());
    let n_small: Option<Vec<Image<S>>> =
        aux.normal.map(|l| l.iter().map(|m| m.resample(rh, rw)).collect());
    let aux_small = AuxTargets { alpha: a_small.as_deref(), normal: n_small.as_deref() };
    let recon = reconstruct(state, &t_small, rc, &aux_small, iters)?;
    let renders = render_conditions(state, rc)?;
    let up = renders.iter().map(|v| v.resized(lat_h, lat_w)).collect();
    Ok((up, recon))
}
