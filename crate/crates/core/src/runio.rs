//! Run-directory plumbing: input loading (meshes, view sets), the manifest
//! written around each run, artifact export, and render-state snapshots.
//! Every exported file is byte-deterministic given the same run.

use crate::adapter::{AdapterConfig, AdapterState, Geometry, Phase, SceneParams, TetScene};
use crate::config::{full_patch, ConfigPatch};
use crate::field::HashGridConfig;
use crate::geometry::{export_mesh, AtlasConfig, TetGrid, TriMesh};
use crate::harness::{img23d_inputs, ComparisonTable, InconsistencySpec, ProceduralScene};
use crate::image::Image;
use crate::math::{vec3, Real};
use crate::pipeline::{
    schedule_views, PipelineConfig, PipelineInputs, PipelineKind, RunOutput,
};
use crate::renderer::{Camera, RenderConfig};
use crate::{Error, Result};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Loads an 8-bit PNG as values in [0,1]; RGB files come back 3-channel,
/// grayscale 1-channel.
pub fn load_png<S: Real>(path: &Path) -> Result<Image<S>> {
    let dynamic = image::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let norm = |v: u8| S::of(v as f64 / 255.0);
    match dynamic {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok(Image::from_fn(h, w, 1, |i, j, _| norm(g.get_pixel(j as u32, i as u32)[0])))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Ok(Image::from_fn(h, w, 3, |i, j, c| norm(rgb.get_pixel(j as u32, i as u32)[c])))
        }
    }
}

/// Minimal OBJ reader: `v` and `f` records, 1-based and negative indices,
/// polygon fan triangulation. Everything else is ignored.
pub fn import_obj<S: Real>(path: &Path) -> Result<TriMesh<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |ln: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail: format!("line {}: {detail}", ln + 1),
    };
    let mut vertices = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0f64; 3];
                for slot in &mut c {
                    let tok = it.next().ok_or_else(|| bad(ln, "vertex needs 3 floats".into()))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| bad(ln, format!("bad vertex coordinate '{tok}'")))?;
                }
                vertices.push(vec3(S::of(c[0]), S::of(c[1]), S::of(c[2])));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|_| bad(ln, format!("bad face index '{tok}'")))?;
                    let v = if raw < 0 { vertices.len() as i64 + raw } else { raw - 1 };
                    if v < 0 || v as usize >= vertices.len() {
                        return Err(bad(ln, format!("face index {raw} out of range")));
                    }
                    idx.push(v as u32);
                }
                if idx.len() < 3 {
                    return Err(bad(ln, "face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(Error::geometry(format!("{}: no faces", path.display())));
    }
    let mesh = TriMesh { vertices, faces };
    let max_norm = mesh.vertices.iter().map(|v| v.norm().as_f64()).fold(0.0, f64::max);
    if max_norm > 1.5 {
        return Err(Error::config(format!(
            "mesh extends to radius {max_norm:.2}; the engine works in the unit ball, rescale it"
        )));
    }
    Ok(mesh)
}

/// Reads `view_00.png`, `view_01.png`, ... plus optional
/// `view_00_alpha.png` companions from a directory.
pub fn load_views_dir<S: Real>(dir: &Path, count: usize) -> Result<Vec<(Image<S>, Option<Image<S>>)>> {
    if !dir.is_dir() {
        return Err(Error::config(format!("views directory not found: {}", dir.display())));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let rgb_path = dir.join(format!("view_{i:02}.png"));
        if !rgb_path.is_file() {
            return Err(Error::config(format!("missing input view: {}", rgb_path.display())));
        }
        let rgb = load_png::<S>(&rgb_path)?;
        let alpha_path = dir.join(format!("view_{i:02}_alpha.png"));
        let alpha = if alpha_path.is_file() { Some(load_png::<S>(&alpha_path)?) } else { None };
        out.push((rgb, alpha));
    }
    Ok(out)
}

/// Where each pipeline's inputs come from, as recorded in the manifest.
/// Scene indices refer to the deterministic procedural roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSpec {
    pub source_scene: usize,
    pub target_scene: usize,
    pub scene_seed: u64,
    /// Directory of PNG views for img23d; synthesized from the target scene
    /// when absent.
    pub views_dir: Option<PathBuf>,
    /// OBJ surface for retexture/texsr; extracted from the target scene's
    /// distance field when absent.
    pub mesh: Option<PathBuf>,
    /// Scale on the default inconsistency spec for synthesized view sets.
    pub inconsistency: f64,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            source_scene: 0,
            target_scene: 1,
            scene_seed: 0,
            views_dir: None,
            mesh: None,
            inconsistency: 1.0,
        }
    }
}

fn roster_for(spec: &InputSpec) -> Vec<ProceduralScene> {
    let count = spec.source_scene.max(spec.target_scene) + 1;
    ProceduralScene::roster(count, spec.scene_seed)
}

fn load_mesh_input<S: Real>(cfg: &PipelineConfig<S>, spec: &InputSpec, target: &ProceduralScene) -> Result<TriMesh<S>> {
    match &spec.mesh {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::config(format!("input mesh not found: {}", path.display())));
            }
            import_obj(path)
        }
        None => crate::pipeline::scene_mesh(target, cfg.tet_res),
    }
}

/// Builds the pipeline inputs a spec describes, for the config's kind.
pub fn build_inputs<S: Real>(cfg: &PipelineConfig<S>, spec: &InputSpec) -> Result<PipelineInputs<S>> {
    let roster = roster_for(spec);
    let target = roster[spec.target_scene].clone();
    match cfg.kind {
        PipelineKind::Edit3d => Ok(PipelineInputs::Edit3d {
            source: roster[spec.source_scene].clone(),
            target,
        }),
        PipelineKind::Img23dLite => {
            let views = match &spec.views_dir {
                Some(dir) => {
                    let n = schedule_views(cfg, 0.0);
                    let loaded = load_views_dir::<S>(dir, n)?;
                    let all_alpha = loaded.iter().all(|(_, a)| a.is_some());
                    let images = loaded.iter().map(|(v, _)| v.clone()).collect();
                    let alpha = all_alpha
                        .then(|| loaded.into_iter().map(|(_, a)| a.unwrap()).collect());
                    crate::pipeline::ViewSetInput { images, alpha, truth: None }
                }
                None => {
                    let base = InconsistencySpec::default();
                    let k = spec.inconsistency;
                    let inc = InconsistencySpec {
                        max_translation_px: base.max_translation_px * k,
                        max_rotation_deg: base.max_rotation_deg * k,
                        max_gain: base.max_gain * k,
                        max_offset: base.max_offset * k,
                        detail_noise_sigma: base.detail_noise_sigma * k,
                        seed: cfg.seed,
                    };
                    img23d_inputs(cfg, &target, &inc)?
                }
            };
            Ok(PipelineInputs::Img23dLite { views })
        }
        PipelineKind::Retexture => Ok(PipelineInputs::Retexture {
            mesh: load_mesh_input(cfg, spec, &target)?,
            target,
        }),
        PipelineKind::Texsr => Ok(PipelineInputs::Texsr {
            mesh: load_mesh_input(cfg, spec, &target)?,
            target,
        }),
    }
}

/// Content hash over the input description and any referenced files.
pub fn input_hash(spec: &InputSpec) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(format!("{spec:?}").as_bytes());
    let mut files: Vec<PathBuf> = Vec::new();
    if let Some(m) = &spec.mesh {
        files.push(m.clone());
    }
    if let Some(dir) = &spec.views_dir {
        if dir.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            entries.sort();
            files.extend(entries);
        }
    }
    for f in &files {
        if f.is_file() {
            hasher.update(std::fs::read(f).map_err(|e| Error::io(f, e))?);
        }
    }
    let mut hex = String::with_capacity(64);
    for b in hasher.finalize() {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// The audit record around one run: the fully materialized config, input
/// identity, and artifact list. Written with status "running" before any
/// compute and rewritten as "complete" afterwards; replaying preset +
/// config + inputs reproduces ODE-pipeline outputs byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub status: String,
    pub preset: String,
    pub scalar: String,
    pub config: ConfigPatch,
    pub inputs: InputSpec,
    pub seeds: Vec<u64>,
    pub input_hash: String,
    pub artifacts: Vec<String>,
    pub timings_sec: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new<S: Real>(
        preset: &str,
        cfg: &PipelineConfig<S>,
        inputs: &InputSpec,
    ) -> Result<Self> {
        Ok(RunManifest {
            schema: 1,
            status: "running".into(),
            preset: preset.to_string(),
            scalar: S::NAME.to_string(),
            config: full_patch(cfg),
            inputs: inputs.clone(),
            seeds: vec![cfg.seed],
            input_hash: input_hash(inputs)?,
            artifacts: Vec::new(),
            timings_sec: BTreeMap::new(),
        })
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::path(dir);
        write_text(&path, &to_pretty_json(self))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn finalize(
        &mut self,
        dir: &Path,
        artifacts: &[PathBuf],
        timings_sec: BTreeMap<String, f64>,
    ) -> Result<()> {
        self.artifacts = artifacts
            .iter()
            .map(|p| {
                p.strip_prefix(dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        self.artifacts.sort();
        self.timings_sec = timings_sec;
        self.status = "complete".into();
        self.write(dir)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct CameraJson {
    origin: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
    fov_y: f64,
    width: usize,
    height: usize,
    view_index: usize,
}

fn cameras_json<S: Real>(cams: &[Camera<S>]) -> Vec<CameraJson> {
    cams.iter()
        .map(|c| CameraJson {
            origin: c.origin.to_f64().to_array(),
            right: c.right.to_f64().to_array(),
            up: c.up.to_f64().to_array(),
            forward: c.forward.to_f64().to_array(),
            fov_y: c.fov_y.as_f64(),
            width: c.width,
            height: c.height,
            view_index: c.view_index,
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
pub struct SavedTet {
    pub res: usize,
    pub sdf: Vec<f64>,
    pub offsets: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SavedMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SavedGeometry {
    None,
    Tet(SavedTet),
    Frozen(SavedMesh),
}

#[derive(Serialize, Deserialize)]
struct SavedRender {
    samples_per_ray: usize,
    jitter: bool,
    bound_radius: f64,
    background: [f64; 3],
    background_depth: Option<f64>,
    ambient: f64,
    diffuse: f64,
    znear: f64,
    seed: u64,
}

/// Everything needed to re-render a finished run offline: field parameters,
/// geometry, render settings, and the final rig. Parameters are stored as
/// exact f64 widenings, so a round trip at the original scalar is lossless.
#[derive(Serialize, Deserialize)]
pub struct SavedState {
    pub scalar: String,
    pub phase: String,
    pub field_cfg: HashGridConfig,
    pub hash: Vec<f64>,
    pub mlp: Vec<f64>,
    pub geometry: SavedGeometry,
    render: SavedRender,
    pub views: usize,
    pub resolution: usize,
    pub rig_radius: f64,
    pub rig_fov: f64,
    pub rig_elevations: Vec<f64>,
}

impl SavedState {
    pub fn capture<S: Real>(
        cfg: &PipelineConfig<S>,
        state: &AdapterState<S>,
        views: usize,
    ) -> Self {
        let r = &state.cfg.render;
        SavedState {
            scalar: S::NAME.to_string(),
            phase: match state.phase {
                Phase::Nerf => "nerf",
                Phase::Mesh => "mesh",
                Phase::TextureOnly => "texture",
            }
            .to_string(),
            field_cfg: state.scene.field.cfg().clone(),
            hash: state.scene.field.hash.iter().map(|v| v.as_f64()).collect(),
            mlp: state.scene.field.mlp.iter().map(|v| v.as_f64()).collect(),
            geometry: match &state.scene.geo {
                Geometry::None => SavedGeometry::None,
                Geometry::Tet(t) => SavedGeometry::Tet(SavedTet {
                    res: t.grid.res(),
                    sdf: t.grid.sdf.iter().map(|v| v.as_f64()).collect(),
                    offsets: t.grid.offsets.iter().map(|v| v.as_f64()).collect(),
                }),
                Geometry::Frozen(m) => SavedGeometry::Frozen(SavedMesh {
                    vertices: m.vertices.iter().map(|v| v.to_f64().to_array()).collect(),
                    faces: m.faces.clone(),
                }),
            },
            render: SavedRender {
                samples_per_ray: r.samples_per_ray,
                jitter: r.jitter,
                bound_radius: r.bound_radius.as_f64(),
                background: [
                    r.background[0].as_f64(),
                    r.background[1].as_f64(),
                    r.background[2].as_f64(),
                ],
                background_depth: r.background_depth.map(|v| v.as_f64()),
                ambient: r.ambient.as_f64(),
                diffuse: r.diffuse.as_f64(),
                znear: r.znear.as_f64(),
                seed: r.seed,
            },
            views,
            resolution: cfg.latent_resolution(),
            rig_radius: cfg.rig_radius,
            rig_fov: cfg.rig_fov,
            rig_elevations: cfg.rig_elevations.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &to_pretty_json(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Rebuilds a render-ready state and its saved rig. The optimizer inside
    /// is fresh; snapshots carry rendering state, not training state.
    pub fn rebuild<S: Real>(&self) -> Result<(AdapterState<S>, Vec<Camera<S>>)> {
        if self.scalar != S::NAME {
            return Err(Error::config(format!(
                "state was saved at {} but is being loaded at {}",
                self.scalar,
                S::NAME
            )));
        }
        let render = RenderConfig {
            samples_per_ray: self.render.samples_per_ray,
            jitter: self.render.jitter,
            bound_radius: S::of(self.render.bound_radius),
            background: [
                S::of(self.render.background[0]),
                S::of(self.render.background[1]),
                S::of(self.render.background[2]),
            ],
            background_depth: self.render.background_depth.map(S::of),
            ambient: S::of(self.render.ambient),
            diffuse: S::of(self.render.diffuse),
            znear: S::of(self.render.znear),
            seed: self.render.seed,
        };
        let adapter_cfg = AdapterConfig::<S> {
            field: self.field_cfg.clone(),
            render,
            ..AdapterConfig::default()
        };
        let mut state = AdapterState::new(adapter_cfg, self.views)?;
        if state.scene.field.hash.len() != self.hash.len()
            || state.scene.field.mlp.len() != self.mlp.len()
        {
            return Err(Error::config("saved field parameters do not match field_cfg"));
        }
        state.scene.field.hash = self.hash.iter().map(|&v| S::of(v)).collect();
        state.scene.field.mlp = self.mlp.iter().map(|&v| S::of(v)).collect();
        state.phase = match self.phase.as_str() {
            "nerf" => Phase::Nerf,
            "mesh" => Phase::Mesh,
            "texture" => Phase::TextureOnly,
            other => return Err(Error::config(format!("unknown phase '{other}'"))),
        };
        state.scene.geo = match &self.geometry {
            SavedGeometry::None => Geometry::None,
            SavedGeometry::Tet(t) => {
                let mut grid = TetGrid::<S>::new(t.res);
                if grid.sdf.len() != t.sdf.len() || grid.offsets.len() != t.offsets.len() {
                    return Err(Error::config("saved tet arrays do not match lattice size"));
                }
                grid.sdf = t.sdf.iter().map(|&v| S::of(v)).collect();
                grid.offsets = t.offsets.iter().map(|&v| S::of(v)).collect();
                Geometry::Tet(TetScene { grid, topology: None })
            }
            SavedGeometry::Frozen(m) => Geometry::Frozen(TriMesh {
                vertices: m
                    .vertices
                    .iter()
                    .map(|v| vec3(S::of(v[0]), S::of(v[1]), S::of(v[2])))
                    .collect(),
                faces: m.faces.clone(),
            }),
        };
        if matches!(state.phase, Phase::Mesh) && !matches!(state.scene.geo, Geometry::Tet(_)) {
            return Err(Error::config("mesh phase requires tet geometry"));
        }
        let rig = crate::renderer::orbit_rig(
            self.views,
            S::of(self.rig_radius),
            S::of(self.rig_fov),
            (self.resolution, self.resolution),
            &self.rig_elevations,
        );
        Ok((state, rig))
    }
}

fn steps_csv(steps: &[crate::pipeline::StepRecord]) -> String {
    let mut out = String::from("step,t,t_next,views,resolution,phase,recon_first,recon_last\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.step, s.t, s.t_next, s.views, s.resolution, s.phase, s.recon_first, s.recon_last
        );
    }
    out
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    metrics: Option<&'a crate::harness::MetricsReport>,
    handoff_iou: Option<f64>,
}

/// Writes the full artifact set for a finished run into `dir`:
/// per-view RGB and alpha PNGs, the mesh bundle when one exists, metrics
/// and step logs, the render-state snapshot, and the camera rig.
pub fn export_run<S: Real>(
    dir: &Path,
    cfg: &PipelineConfig<S>,
    out: &RunOutput<S>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();

    for (i, v) in out.final_views.iter().enumerate() {
        let rgb = dir.join(format!("view_{i:02}.png"));
        v.rgb.save_png(&rgb)?;
        let alpha = dir.join(format!("view_{i:02}_alpha.png"));
        v.alpha.save_png(&alpha)?;
        paths.push(rgb);
        paths.push(alpha);
    }

    if let Some(mesh) = &out.mesh {
        paths.extend(export_mesh(
            dir,
            "mesh",
            mesh,
            &out.state.scene.field,
            &AtlasConfig::default(),
        )?);
    }

    let metrics_path = dir.join("metrics.json");
    write_text(
        &metrics_path,
        &to_pretty_json(&MetricsFile {
            metrics: out.metrics.as_ref(),
            handoff_iou: out.handoff_iou,
        }),
    )?;
    paths.push(metrics_path);

    let steps_path = dir.join("steps.csv");
    write_text(&steps_path, &steps_csv(&out.steps))?;
    paths.push(steps_path);

    let views = out.final_views.len();
    let state_path = dir.join("state.json");
    SavedState::capture(cfg, &out.state, views).save(&state_path)?;
    paths.push(state_path);

    let cams_path = dir.join("cameras.json");
    let rig = cfg.rig(views, cfg.latent_resolution());
    write_text(&cams_path, &to_pretty_json(&cameras_json(&rig)))?;
    paths.push(cams_path);

    Ok(paths)
}

/// Writes an ablation comparison table as CSV + JSON.
pub fn export_ablation(dir: &Path, table: &ComparisonTable) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = table.suite.name();
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&csv, &table.to_csv())?;
    let json = dir.join(format!("{stem}.json"));
    write_text(&json, &to_pretty_json(table))?;
    Ok(vec![csv, json])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::render_conditions;
    use crate::pipeline::scene_mesh;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mvfuse_runio_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn obj_import_round_trips_export() {
        let dir = tmpdir("obj");
        let scene = &ProceduralScene::roster(1, 4)[0];
        let mesh = scene_mesh::<f64>(scene, 10).unwrap();
        let field = crate::field::HashGridField::<f64>::new(HashGridConfig::default(), 1);
        crate::geometry::export_obj(&dir, "m", &mesh, &field, &AtlasConfig::default()).unwrap();

        let back = import_obj::<f64>(&dir.join("m.obj")).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((*a - *b).norm() < 2e-6);
        }
        let missing = import_obj::<f64>(&dir.join("nope.obj"));
        assert!(missing.is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn png_round_trip_is_quantization_exact() {
        let dir = tmpdir("png");
        let img = Image::<f32>::from_fn(9, 7, 3, |i, j, c| {
            ((i * 31 + j * 17 + c * 5) % 97) as f32 / 96.0
        });
        let path = dir.join("x.png");
        img.save_png(&path).unwrap();
        let back = load_png::<f32>(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (9, 7, 3));
        for i in 0..9 {
            for j in 0..7 {
                for c in 0..3 {
                    let q = (img.at(i, j, c) * 255.0).round() / 255.0;
                    assert!((back.at(i, j, c) - q).abs() < 1e-6);
                }
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_mesh_input_is_a_config_error_naming_the_path() {
        let cfg = PipelineConfig::<f32>::desk(PipelineKind::Retexture);
        let spec = InputSpec {
            mesh: Some(PathBuf::from("/no/such/thing.obj")),
            ..InputSpec::default()
        };
        let err = build_inputs(&cfg, &spec).err().expect("must fail");
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such/thing.obj"));
    }

    #[test]
    fn manifest_round_trips_and_tracks_status() {
        let dir = tmpdir("manifest");
        let cfg = PipelineConfig::<f32>::desk(PipelineKind::Edit3d);
        let spec = InputSpec::default();
        let mut m = RunManifest::new("desk/edit3d", &cfg, &spec).unwrap();
        let path = m.write(&dir).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.status, "running");
        assert_eq!(loaded.input_hash, m.input_hash);

        m.finalize(&dir, &[dir.join("a.png")], BTreeMap::new()).unwrap();
        let done = RunManifest::load(&path).unwrap();
        assert_eq!(done.status, "complete");
        assert_eq!(done.artifacts, vec!["a.png".to_string()]);

        let mut replay = crate::config::preset_config::<f32>(&done.preset).unwrap();
        done.config.apply(&mut replay).unwrap();
        assert_eq!(
            crate::pipeline::config_fingerprint(&replay),
            crate::pipeline::config_fingerprint(&cfg)
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn saved_state_rebuild_renders_bit_identically() {
        let dir = tmpdir("state");
        let mut cfg = PipelineConfig::<f32>::desk(PipelineKind::Retexture);
        cfg.resolution_schedule = vec![(0.0, 18)];
        cfg.view_schedule = vec![(0.0, 3)];
        cfg.tet_res = 10;
        let scene = &ProceduralScene::roster(1, 9)[0];
        let mesh = scene_mesh::<f32>(scene, cfg.tet_res).unwrap();

        let mut adapter_cfg = AdapterConfig::<f32>::default();
        adapter_cfg.render.samples_per_ray = 8;
        let mut state = AdapterState::new(adapter_cfg, 3).unwrap();
        state.set_frozen_mesh(mesh);
        let rig = cfg.rig(3, 18);
        let want = render_conditions(&mut state, &rig).unwrap();

        let path = dir.join("state.json");
        SavedState::capture(&cfg, &state, 3).save(&path).unwrap();
        let (mut rebuilt, saved_rig) = SavedState::load(&path).unwrap().rebuild::<f32>().unwrap();
        let got = render_conditions(&mut rebuilt, &saved_rig).unwrap();

        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!(a.rgb.data() == b.rgb.data());
            assert!(a.depth.data() == b.depth.data());
        }

        let wrong = SavedState::load(&path).unwrap().rebuild::<f64>();
        assert!(wrong.is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
