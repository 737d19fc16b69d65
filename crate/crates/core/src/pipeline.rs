//! The four sampling pipelines over the adapter loop: 3D editing, image-set
//! to 3D, retexturing, and texture super-resolution. Each one owns a view
//! and resolution schedule, a t_start, and the NeRF-to-mesh handoff point;
//! the denoiser is the synthetic oracle seeded with per-view target images.

use crate::adapter::{
    adapter_step, fit_and_render_at, reconstruct, render_conditions, AdapterConfig, AdapterState,
    AuxTargets, MultiViewState, Phase,
};
use crate::denoiser::{ControlSchedule, OracleModel};
use crate::geometry::{marching_tets, TetGrid, TriMesh};
use crate::harness::{
    evaluate, render_ground_truth, silhouette_iou, MetricsReport, ProceduralScene,
};
use crate::image::Image;
use crate::math::{PiecewiseLinear, Real};
use crate::renderer::{orbit_rig, Camera, RenderedViewSet};
use crate::schedule::{build_schedule, NoiseScheduleKind, TimestepPlan};
use crate::solver::SolverConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Edit3d,
    Img23dLite,
    Retexture,
    Texsr,
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Edit3d => "edit3d",
            PipelineKind::Img23dLite => "img23d_lite",
            PipelineKind::Retexture => "retexture",
            PipelineKind::Texsr => "texsr",
        }
    }
}

/// Which control/blend schedule the run uses. `NoSkip` zeroes the control
/// weight and blends the render back at full strength on every timestep,
/// which collapses a step to reconstruct-then-render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPreset {
    Standard,
    NoSkip,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig<S> {
    pub kind: PipelineKind,
    /// Starting noise level as a fraction of the chain length.
    pub t_start_frac: f64,
    pub steps: usize,
    /// (progress, active view count), piecewise constant, first entry at 0.
    pub view_schedule: Vec<(f64, usize)>,
    /// (progress, render pixels per side); the final entry fixes the latent
    /// resolution the denoiser sees.
    pub resolution_schedule: Vec<(f64, usize)>,
    /// Progress at which the density field hands off to the tet mesh.
    pub handoff: f64,
    pub schedule_kind: NoiseScheduleKind,
    pub chain_len: usize,
    pub solver: SolverConfig,
    pub control: ControlPreset,
    pub adapter: AdapterConfig<S>,
    /// Reconstruction iterations used to initialize the scene from inputs.
    pub warmup_iters: usize,
    pub rig_radius: f64,
    pub rig_fov: f64,
    pub rig_elevations: Vec<f64>,
    /// Oracle low/high frequency split, in pixels at 64-row reference scale.
    pub detail_split_sigma_64: f64,
    pub model_error_sigma: f64,
    /// Bypass the denoiser and solver entirely; every step reconstructs from
    /// the raw targets and renders. The diffusion-free baseline.
    pub reconstruction_only: bool,
    pub chamfer_samples: usize,
    pub tet_res: usize,
    pub seed: u64,
}

impl<S: Real> PipelineConfig<S> {
    /// Desk-scale defaults: small enough to run a full pipeline on one core
    /// in minutes while keeping every schedule transition exercised.
    pub fn desk(kind: PipelineKind) -> Self {
        let (t_start_frac, view_schedule, resolution_schedule) = match kind {
            PipelineKind::Edit3d => (
                0.6,
                vec![(0.0, 12), (0.35, 8), (0.6, 6)],
                vec![(0.0, 32), (0.35, 64), (0.7, 128)],
            ),
            PipelineKind::Img23dLite => (
                0.75,
                vec![(0.0, 12), (0.35, 8), (0.6, 6)],
                vec![(0.0, 32), (0.35, 64), (0.7, 128)],
            ),
            PipelineKind::Retexture => (
                1.0,
                vec![(0.0, 12), (0.5, 8)],
                vec![(0.0, 32), (0.35, 64), (0.7, 128)],
            ),
            PipelineKind::Texsr => (0.4, vec![(0.0, 6)], vec![(0.0, 64), (0.5, 128)]),
        };
        let solver = SolverConfig { sde: kind == PipelineKind::Texsr, ..SolverConfig::default() };
        let model_error_sigma = match kind {
            PipelineKind::Retexture => 0.1,
            _ => 0.0,
        };
        PipelineConfig {
            kind,
            t_start_frac,
            steps: 20,
            view_schedule,
            resolution_schedule,
            handoff: 0.6,
            schedule_kind: NoiseScheduleKind::ScaledLinear,
            chain_len: 1000,
            solver,
            control: ControlPreset::Standard,
            adapter: AdapterConfig::default(),
            warmup_iters: 128,
            rig_radius: 2.2,
            rig_fov: 0.7,
            rig_elevations: vec![15.0, -10.0, 30.0],
            detail_split_sigma_64: 2.0,
            model_error_sigma,
            reconstruction_only: false,
            chamfer_samples: 3000,
            tet_res: 40,
            seed: 0,
        }
    }

    /// Full-scale schedules (32 views, up to 512 px, 50 steps). Orders of
    /// magnitude slower than `desk`; exposed for completeness.
    pub fn full(kind: PipelineKind) -> Self {
        let mut cfg = Self::desk(kind);
        cfg.steps = 50;
        match kind {
            PipelineKind::Edit3d | PipelineKind::Img23dLite => {
                cfg.view_schedule = vec![(0.0, 32), (0.3, 16), (0.6, 9)];
                cfg.resolution_schedule = vec![(0.0, 128), (0.34, 256), (0.67, 512)];
            }
            PipelineKind::Retexture => {
                cfg.view_schedule = vec![(0.0, 32), (0.5, 7)];
                cfg.resolution_schedule = vec![(0.0, 128), (0.34, 256), (0.67, 512)];
            }
            PipelineKind::Texsr => {
                cfg.view_schedule = vec![(0.0, 6)];
                cfg.resolution_schedule = vec![(0.0, 512)];
            }
        }
        cfg.tet_res = 128;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("pipeline needs steps >= 1"));
        }
        if !(self.t_start_frac > 0.0 && self.t_start_frac <= 1.0) {
            return Err(Error::config(format!(
                "t_start fraction {} outside (0, 1]",
                self.t_start_frac
            )));
        }
        if !(self.handoff > 0.0 && self.handoff < 1.0) {
            return Err(Error::config(format!("handoff {} outside (0, 1)", self.handoff)));
        }
        if self.chain_len < 2 {
            return Err(Error::config("chain_len must be >= 2"));
        }
        for (name, sched) in [
            ("view_schedule", &self.view_schedule),
            ("resolution_schedule", &self.resolution_schedule),
        ] {
            if sched.is_empty() {
                return Err(Error::config(format!("{name} is empty")));
            }
            if sched[0].0 != 0.0 {
                return Err(Error::config(format!("{name} must start at progress 0")));
            }
            for pair in sched.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::config(format!("{name} progresses must increase")));
                }
            }
        }
        for pair in self.view_schedule.windows(2) {
            if pair[1].1 > pair[0].1 {
                return Err(Error::config("view counts must be non-increasing"));
            }
        }
        if self.view_schedule.iter().any(|&(_, v)| v < 2) {
            return Err(Error::config("every scheduled view count must be >= 2"));
        }
        if self.resolution_schedule.iter().any(|&(_, r)| r < 8) {
            return Err(Error::config("scheduled resolutions must be >= 8"));
        }
        if self.rig_elevations.is_empty() {
            return Err(Error::config("rig needs at least one elevation"));
        }
        if !(self.rig_radius > 1.0) {
            return Err(Error::config("rig radius must exceed the unit bound"));
        }
        if self.detail_split_sigma_64 < 0.0 || self.model_error_sigma < 0.0 {
            return Err(Error::config("oracle sigmas must be >= 0"));
        }
        if self.tet_res < 4 {
            return Err(Error::config("tet_res must be >= 4"));
        }
        self.adapter.weights.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    /// Resolution the denoiser and latents run at: the final scheduled one.
    pub fn latent_resolution(&self) -> usize {
        self.resolution_schedule.last().unwrap().1
    }

    pub fn rig(&self, views: usize, res: usize) -> Vec<Camera<S>> {
        orbit_rig(
            views,
            S::of(self.rig_radius),
            S::of(self.rig_fov),
            (res, res),
            &self.rig_elevations,
        )
    }
}

/// Flat (key, debug-value) listing of every configuration field. Ablation
/// arms are audited against their baseline by diffing these listings, so
/// every tunable must appear here under a stable dotted key.
pub fn config_fingerprint<S: Real>(cfg: &PipelineConfig<S>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    macro_rules! kv {
        ($k:expr, $v:expr) => {
            out.push(($k.to_string(), format!("{:?}", $v)))
        };
    }
    kv!("kind", cfg.kind);
    kv!("t_start_frac", cfg.t_start_frac);
    kv!("steps", cfg.steps);
    kv!("view_schedule", cfg.view_schedule);
    kv!("resolution_schedule", cfg.resolution_schedule);
    kv!("handoff", cfg.handoff);
    kv!("schedule_kind", cfg.schedule_kind);
    kv!("chain_len", cfg.chain_len);
    kv!("solver", cfg.solver);
    kv!("control", cfg.control);
    kv!("warmup_iters", cfg.warmup_iters);
    kv!("rig_radius", cfg.rig_radius);
    kv!("rig_fov", cfg.rig_fov);
    kv!("rig_elevations", cfg.rig_elevations);
    kv!("detail_split_sigma_64", cfg.detail_split_sigma_64);
    kv!("model_error_sigma", cfg.model_error_sigma);
    kv!("reconstruction_only", cfg.reconstruction_only);
    kv!("chamfer_samples", cfg.chamfer_samples);
    kv!("tet_res", cfg.tet_res);
    kv!("seed", cfg.seed);
    let a = &cfg.adapter;
    kv!("adapter.iters_3d", a.iters_3d);
    kv!("adapter.iters_texture", a.iters_texture);
    kv!("adapter.lr_hash", a.lr_hash);
    kv!("adapter.lr_other", a.lr_other);
    kv!("adapter.adam", a.adam);
    kv!("adapter.patch", a.patch);
    kv!("adapter.views_per_iter", a.views_per_iter);
    kv!("adapter.two_pass", a.two_pass);
    kv!("adapter.seed", a.seed);
    kv!("adapter.render", a.render);
    kv!("adapter.field", a.field);
    kv!("adapter.tet_res", a.tet_res);
    kv!("adapter.d2s", a.d2s);
    let w = &a.weights;
    kv!("adapter.weights.rgb_l1", w.rgb_l1);
    kv!("adapter.weights.rgb_patch", w.rgb_patch);
    kv!("adapter.weights.alpha", w.alpha);
    kv!("adapter.weights.normal_tv", w.normal_tv);
    kv!("adapter.weights.normal_reg", w.normal_reg);
    kv!("adapter.weights.normal_highpass", w.normal_highpass);
    kv!("adapter.weights.ray_entropy", w.ray_entropy);
    kv!("adapter.weights.laplacian", w.laplacian);
    kv!("adapter.weights.normal_consistency", w.normal_consistency);
    kv!("adapter.weights.background_thickness", w.background_thickness);
    kv!("adapter.weights.alpha_blur_sigma", w.alpha_blur_sigma);
    kv!("adapter.weights.mask_erosion_radius", w.mask_erosion_radius);
    out
}

fn piecewise_usize(entries: &[(f64, usize)], progress: f64) -> usize {
    let p = progress.clamp(0.0, 1.0);
    let mut out = entries[0].1;
    for &(q, v) in entries {
        if q <= p {
            out = v;
        } else {
            break;
        }
    }
    out
}

/// Active view count at `progress` (piecewise constant, clamped).
pub fn schedule_views<S: Real>(cfg: &PipelineConfig<S>, progress: f64) -> usize {
    piecewise_usize(&cfg.view_schedule, progress)
}

/// Render resolution at `progress` (piecewise constant, clamped).
pub fn schedule_resolution<S: Real>(cfg: &PipelineConfig<S>, progress: f64) -> usize {
    piecewise_usize(&cfg.resolution_schedule, progress)
}

/// A set of externally supplied views standing in for an off-the-shelf
/// multi-view generator's output. `truth`, when known, is used for final
/// metrics only and never leaks into the run.
pub struct ViewSetInput<S> {
    pub images: Vec<Image<S>>,
    pub alpha: Option<Vec<Image<S>>>,
    pub truth: Option<ProceduralScene>,
}

pub enum PipelineInputs<S> {
    /// Re-generate `source` toward `target` starting from t_start noise.
    Edit3d { source: ProceduralScene, target: ProceduralScene },
    /// Lift a (possibly inconsistent) view set to a textured mesh.
    Img23dLite { views: ViewSetInput<S> },
    /// Synthesize a fresh texture for a frozen surface.
    Retexture { mesh: TriMesh<S>, target: ProceduralScene },
    /// Sharpen an existing coarse texture on a frozen surface.
    Texsr { mesh: TriMesh<S>, target: ProceduralScene },
}

impl<S> PipelineInputs<S> {
    fn kind(&self) -> PipelineKind {
        match self {
            PipelineInputs::Edit3d { .. } => PipelineKind::Edit3d,
            PipelineInputs::Img23dLite { .. } => PipelineKind::Img23dLite,
            PipelineInputs::Retexture { .. } => PipelineKind::Retexture,
            PipelineInputs::Texsr { .. } => PipelineKind::Texsr,
        }
    }
}

/// Extracts the frozen-surface mesh for a procedural scene by sampling its
/// distance field onto the tet lattice.
pub fn scene_mesh<S: Real>(scene: &ProceduralScene, tet_res: usize) -> Result<TriMesh<S>> {
    let mut grid = TetGrid::<S>::new(tet_res);
    for i in 0..grid.vertex_count() {
        grid.sdf[i] = S::of(scene.sdf(grid.position(i).to_f64()));
    }
    let ex = marching_tets(&grid, None)?;
    if ex.mesh.faces.is_empty() {
        return Err(Error::geometry("scene surface missed the tet lattice"));
    }
    Ok(ex.mesh)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub t_next: f64,
    pub views: usize,
    pub resolution: usize,
    pub phase: String,
    pub recon_first: f64,
    pub recon_last: f64,
}

pub struct RunOutput<S> {
    pub state: AdapterState<S>,
    pub mesh: Option<TriMesh<S>>,
    /// Final full-frame renders at the latent resolution.
    pub final_views: RenderedViewSet<S>,
    pub metrics: Option<MetricsReport>,
    pub steps: Vec<StepRecord>,
    /// Silhouette IoU across the NeRF-to-mesh handoff, when one happened.
    pub handoff_iou: Option<f64>,
}

fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Nerf => "nerf",
        Phase::Mesh => "mesh",
        Phase::TextureOnly => "texture",
    }
}

fn control_schedule(preset: ControlPreset, t_max: f64) -> ControlSchedule {
    match preset {
        ControlPreset::Standard => ControlSchedule::default_for(t_max),
        ControlPreset::NoSkip => ControlSchedule::custom(
            PiecewiseLinear::constant(0.0),
            PiecewiseLinear::constant(1.0),
            PiecewiseLinear::constant(1.0),
            0.0,
        ),
    }
}

/// Runs one pipeline end to end and returns the in-memory artifacts.
/// Input/config mismatches and shape errors are rejected before any compute.
pub fn run<S: Real>(cfg: &PipelineConfig<S>, inputs: PipelineInputs<S>) -> Result<RunOutput<S>> {
    cfg.validate()?;
    if inputs.kind() != cfg.kind {
        return Err(Error::config(format!(
            "config is for {} but inputs are for {}",
            cfg.kind.name(),
            inputs.kind().name()
        )));
    }

    let schedule = build_schedule(cfg.schedule_kind, cfg.chain_len)?;
    let t_max = schedule.t_max();
    let plan = TimestepPlan::new(cfg.t_start_frac * t_max, cfg.steps, &schedule)?;
    let ctrl = control_schedule(cfg.control, t_max);

    let latent_res = cfg.latent_resolution();
    let views0 = schedule_views(cfg, 0.0);
    let latent_rig = cfg.rig(views0, latent_res);

    let mut adapter_cfg = cfg.adapter.clone();
    adapter_cfg.seed = cfg.seed;
    adapter_cfg.tet_res = cfg.tet_res;

    // Per-kind setup: scene state, oracle targets, initial latents, aux maps.
    let mut state = AdapterState::new(adapter_cfg, views0)?;

    let res0 = schedule_resolution(cfg, 0.0);
    let warm_rig = cfg.rig(views0, res0);

    type Setup<S> = (
        Vec<Image<S>>,
        Vec<Image<S>>,
        Option<Vec<Image<S>>>,
        Option<Vec<Image<S>>>,
        Option<RenderedViewSet<S>>,
        Option<ProceduralScene>,
    );
    let (targets, x_init, aux_alpha, aux_normal, mut control_fixed, eval_scene): Setup<S> =
        match inputs {
        PipelineInputs::Edit3d { source, target } => {
            let source_gt = render_ground_truth(&source, &warm_rig, &state.cfg.render);
            let source_rgb: Vec<Image<S>> = source_gt.iter().map(|v| v.rgb.clone()).collect();
            let source_alpha: Vec<Image<S>> = source_gt.iter().map(|v| v.alpha.clone()).collect();
            let warm_aux = AuxTargets { alpha: Some(&source_alpha), normal: None };
            reconstruct(&mut state, &source_rgb, &warm_rig, &warm_aux, cfg.warmup_iters)?;

            let target_gt = render_ground_truth(&target, &latent_rig, &state.cfg.render);
            let alpha = target_gt.iter().map(|v| v.alpha.clone()).collect();
            let normal = target_gt.iter().map(|v| v.normal.clone()).collect();
            let targets = target_gt.iter().map(|v| v.rgb.clone()).collect();

            let init = render_conditions(&mut state, &latent_rig)?;
            let x_init = init.into_iter().map(|v| v.rgb).collect();
            (targets, x_init, Some(alpha), Some(normal), None, Some(target))
        }
        PipelineInputs::Img23dLite { views } => {
            if views.images.len() != views0 {
                return Err(Error::config(format!(
                    "{} input views but the schedule starts at {views0}",
                    views.images.len()
                )));
            }
            for (i, img) in views.images.iter().enumerate() {
                if (img.height(), img.width(), img.channels()) != (latent_res, latent_res, 3) {
                    return Err(Error::config(format!(
                        "input view {i} is {}x{}x{}, expected {latent_res}x{latent_res}x3",
                        img.height(),
                        img.width(),
                        img.channels()
                    )));
                }
            }
            if let Some(a) = &views.alpha {
                if a.len() != views.images.len() {
                    return Err(Error::config("alpha count differs from view count"));
                }
            }
            let small: Vec<Image<S>> =
                views.images.iter().map(|v| v.resample(res0, res0)).collect();
            let small_alpha: Option<Vec<Image<S>>> =
                views.alpha.as_ref().map(|l| l.iter().map(|a| a.resample(res0, res0)).collect());
            let warm_aux = AuxTargets { alpha: small_alpha.as_deref(), normal: None };
            reconstruct(&mut state, &small, &warm_rig, &warm_aux, cfg.warmup_iters)?;

            let x_init = views.images.clone();
            (views.images, x_init, views.alpha, None, None, views.truth)
        }
        PipelineInputs::Retexture { mesh, target } => {
            state.set_frozen_mesh(mesh);
            let target_gt = render_ground_truth(&target, &latent_rig, &state.cfg.render);
            let alpha = target_gt.iter().map(|v| v.alpha.clone()).collect();
            let normal = target_gt.iter().map(|v| v.normal.clone()).collect();
            let targets: Vec<Image<S>> = target_gt.iter().map(|v| v.rgb.clone()).collect();

            let init = render_conditions(&mut state, &latent_rig)?;
            let x_init = init.into_iter().map(|v| v.rgb).collect();
            (targets, x_init, Some(alpha), Some(normal), None, Some(target))
        }
        PipelineInputs::Texsr { mesh, target } => {
            state.set_frozen_mesh(mesh);
            let target_gt = render_ground_truth(&target, &latent_rig, &state.cfg.render);
            let alpha: Vec<Image<S>> = target_gt.iter().map(|v| v.alpha.clone()).collect();
            let normal = target_gt.iter().map(|v| v.normal.clone()).collect();
            let targets: Vec<Image<S>> = target_gt.iter().map(|v| v.rgb.clone()).collect();

            // Coarse-texture start: fit against 4x-blurred targets, then
            // condition on those renders for the entire run.
            let coarse: Vec<Image<S>> = targets
                .iter()
                .map(|v| v.resample(latent_res / 4, latent_res / 4).resample(res0, res0))
                .collect();
            let coarse_alpha: Vec<Image<S>> =
                alpha.iter().map(|a| a.resample(res0, res0)).collect();
            let warm_aux = AuxTargets { alpha: Some(&coarse_alpha), normal: None };
            reconstruct(&mut state, &coarse, &warm_rig, &warm_aux, cfg.warmup_iters)?;

            let init = render_conditions(&mut state, &latent_rig)?;
            let x_init = init.iter().map(|v| v.rgb.clone()).collect();
            (targets, x_init, Some(alpha), Some(normal), Some(init), Some(target))
        }
    };

    let oracle = OracleModel::new(
        targets.clone(),
        cfg.detail_split_sigma_64 * latent_res as f64 / 64.0,
        cfg.model_error_sigma,
    )?;

    let mut mv = MultiViewState::perturb(&x_init, &latent_rig, &schedule, plan.t_start(), cfg.seed)?;

    let mut conditions: Option<RenderedViewSet<S>> = None;
    let mut steps_log: Vec<StepRecord> = Vec::with_capacity(cfg.steps);
    let mut handoff_iou = None;
    let nodes = plan.nodes().to_vec();

    for k in 0..plan.steps() {
        let progress = k as f64 / plan.steps() as f64;
        let views_now = schedule_views(cfg, progress);
        let res_now = schedule_resolution(cfg, progress);

        if views_now < mv.len() {
            mv.truncate_views(views_now);
            if let Some(c) = &mut conditions {
                c.truncate(views_now);
            }
            if let Some(c) = &mut control_fixed {
                c.truncate(views_now);
            }
        }
        let render_rig = cfg.rig(views_now, res_now);

        let wants_mesh = matches!(cfg.kind, PipelineKind::Edit3d | PipelineKind::Img23dLite);
        if wants_mesh && state.phase == Phase::Nerf && progress >= cfg.handoff {
            let before = render_conditions(&mut state, &render_rig)?;
            state.handoff_to_mesh()?;
            let after = render_conditions(&mut state, &render_rig)?;
            let b: Vec<&Image<S>> = before.iter().map(|v| &v.alpha).collect();
            let a: Vec<&Image<S>> = after.iter().map(|v| &v.alpha).collect();
            handoff_iou = Some(silhouette_iou(&a, &b));
        }
        state.progress = progress;

        let aux = AuxTargets {
            alpha: aux_alpha.as_deref().map(|a| &a[..views_now]),
            normal: aux_normal.as_deref().map(|n| &n[..views_now]),
        };
        let record = if cfg.reconstruction_only {
            let recon = fit_and_render_at(
                &mut state,
                &latent_rig,
                Some(&render_rig),
                &targets[..views_now],
                &aux,
                (latent_res, latent_res),
            )?;
            conditions = Some(recon.0);
            StepRecord {
                step: k,
                t: nodes[k],
                t_next: nodes[k + 1],
                views: views_now,
                resolution: res_now,
                phase: phase_name(state.phase).into(),
                recon_first: recon.1.first_loss,
                recon_last: recon.1.last_loss,
            }
        } else {
            let out = adapter_step(
                &mut state,
                &mut mv,
                &schedule,
                &ctrl,
                &oracle,
                &cfg.solver,
                conditions.as_ref(),
                control_fixed.as_ref(),
                &aux,
                nodes[k + 1],
                k + 1 == plan.steps(),
                Some(&render_rig),
            )?;
            let rec = StepRecord {
                step: k,
                t: nodes[k],
                t_next: nodes[k + 1],
                views: views_now,
                resolution: res_now,
                phase: phase_name(state.phase).into(),
                recon_first: out.recon.first_loss,
                recon_last: out.recon.last_loss,
            };
            conditions = Some(out.conditions);
            rec
        };
        steps_log.push(record);
    }

    let views_end = conditions.as_ref().map_or(views0, |c| c.len());
    let final_rig = cfg.rig(views_end, latent_res);
    let final_views = render_conditions(&mut state, &final_rig)?;
    let mesh = state.scene.surface()?;

    let metrics = match &eval_scene {
        Some(scene) => {
            let gt = render_ground_truth(scene, &final_rig, &state.cfg.render);
            let erosion = state.cfg.weights.erosion_px(latent_res);
            Some(evaluate(
                &final_views,
                &gt,
                mesh.as_ref(),
                scene,
                erosion,
                cfg.chamfer_samples,
                cfg.seed,
            ))
        }
        None => None,
    };

    Ok(RunOutput { state, mesh, final_views, metrics, steps: steps_log, handoff_iou })
}
