//! Matched-pair ablation suites: each suite runs a baseline and a variant
//! config that differ in exactly the ablated keys (audited by config diff)
//! over a grid of scenes and seeds, then reports per-metric medians and
//! win/loss directions. Individual run failures are recorded and the suite
//! continues.

use crate::harness::inconsistency::{inject_inconsistency, InconsistencySpec};
use crate::harness::metrics::{albedo_perceptual, mid_alpha_fraction};
use crate::harness::scene::{render_ground_truth, ProceduralScene};
use crate::image::Image;
use crate::math::Real;
use crate::pipeline::{
    self, config_fingerprint, scene_mesh, schedule_views, ControlPreset, PipelineConfig,
    PipelineInputs, PipelineKind, ViewSetInput,
};
use crate::{Error, Result};

use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// ControlNet-conditioned denoising vs blending the render back at full
    /// strength (no skip connection around the reconstruction).
    Skip,
    /// Full sampling loop vs fitting the 3D scene directly to the inputs.
    ReconstructionOnly,
    /// Ray entropy loss on vs off; fuzziness measured by mid-alpha fraction.
    Entropy,
    /// Normal TV loss on vs off; measured by rendered normal-map TV.
    NormalTv,
    /// One conditioned denoise per step vs unconditioned-then-conditioned.
    #[serde(rename = "architecture_c_vs_d")]
    ArchitectureCVsD,
}

pub const ALL_SUITES: [AblationSuite; 5] = [
    AblationSuite::Skip,
    AblationSuite::ReconstructionOnly,
    AblationSuite::Entropy,
    AblationSuite::NormalTv,
    AblationSuite::ArchitectureCVsD,
];

impl AblationSuite {
    pub fn name(&self) -> &'static str {
        match self {
            AblationSuite::Skip => "skip",
            AblationSuite::ReconstructionOnly => "reconstruction_only",
            AblationSuite::Entropy => "entropy",
            AblationSuite::NormalTv => "normal_tv",
            AblationSuite::ArchitectureCVsD => "architecture_c_vs_d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ALL_SUITES.iter().copied().find(|k| k.name() == s)
    }

    /// Pipeline each suite runs on. Texture suites use the frozen-surface
    /// retexture pipeline; geometry suites lift an inconsistent view set.
    pub fn kind(&self) -> PipelineKind {
        match self {
            AblationSuite::Skip | AblationSuite::ArchitectureCVsD => PipelineKind::Retexture,
            _ => PipelineKind::Img23dLite,
        }
    }

    /// (baseline, variant) row labels.
    pub fn arm_names(&self) -> (&'static str, &'static str) {
        match self {
            AblationSuite::Skip => ("with_skip", "no_skip"),
            AblationSuite::ReconstructionOnly => ("full", "reconstruction_only"),
            AblationSuite::Entropy => ("with_entropy", "no_entropy"),
            AblationSuite::NormalTv => ("with_normal_tv", "no_normal_tv"),
            AblationSuite::ArchitectureCVsD => ("one_pass", "two_pass"),
        }
    }

    /// Exactly the config keys the variant may differ from the baseline in.
    pub fn ablated_keys(&self) -> &'static [&'static str] {
        match self {
            AblationSuite::Skip => &["control"],
            AblationSuite::ReconstructionOnly => &["reconstruction_only"],
            AblationSuite::Entropy => &["adapter.weights.ray_entropy"],
            AblationSuite::NormalTv => &["adapter.weights.normal_tv"],
            AblationSuite::ArchitectureCVsD => &["adapter.two_pass"],
        }
    }

    /// Desk-scale baseline for this suite. The regularizer suites measure
    /// volume-render fuzziness, so they park the handoff past the last step
    /// and stay in the density-field phase throughout.
    pub fn desk_config<S: Real>(&self) -> PipelineConfig<S> {
        let mut cfg = PipelineConfig::desk(self.kind());
        if matches!(self, AblationSuite::Entropy | AblationSuite::NormalTv) {
            cfg.handoff = 0.99;
        }
        cfg
    }

    fn apply<S: Real>(&self, base: &PipelineConfig<S>) -> PipelineConfig<S> {
        let mut cfg = base.clone();
        match self {
            AblationSuite::Skip => cfg.control = ControlPreset::NoSkip,
            AblationSuite::ReconstructionOnly => cfg.reconstruction_only = true,
            AblationSuite::Entropy => cfg.adapter.weights.ray_entropy = S::zero(),
            AblationSuite::NormalTv => cfg.adapter.weights.normal_tv = S::zero(),
            AblationSuite::ArchitectureCVsD => cfg.adapter.two_pass = true,
        }
        cfg
    }
}

/// One scene x seed x arm outcome. Metric fields are None when that metric
/// does not apply (no mesh -> no chamfer) or the run failed.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub scene: usize,
    pub seed: u64,
    pub arm: String,
    pub masked_psnr: Option<f64>,
    pub silhouette_iou: Option<f64>,
    pub normal_tv: Option<f64>,
    pub texture_tv: Option<f64>,
    pub chamfer: Option<f64>,
    pub mid_alpha: Option<f64>,
    pub perceptual: Option<f64>,
    pub error: Option<String>,
}

pub const METRIC_NAMES: [&str; 7] = [
    "masked_psnr",
    "silhouette_iou",
    "normal_tv",
    "texture_tv",
    "chamfer",
    "mid_alpha",
    "perceptual",
];

impl RunRow {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "masked_psnr" => self.masked_psnr,
            "silhouette_iou" => self.silhouette_iou,
            "normal_tv" => self.normal_tv,
            "texture_tv" => self.texture_tv,
            "chamfer" => self.chamfer,
            "mid_alpha" => self.mid_alpha,
            "perceptual" => self.perceptual,
            _ => None,
        }
    }

    fn failed(scene: usize, seed: u64, arm: &str, err: &Error) -> Self {
        RunRow {
            scene,
            seed,
            arm: arm.to_string(),
            masked_psnr: None,
            silhouette_iou: None,
            normal_tv: None,
            texture_tv: None,
            chamfer: None,
            mid_alpha: None,
            perceptual: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub suite: AblationSuite,
    pub ablated_keys: Vec<String>,
    pub baseline_arm: String,
    pub variant_arm: String,
    pub rows: Vec<RunRow>,
    /// metric -> (baseline median, variant median), over successful runs.
    pub medians: BTreeMap<String, (f64, f64)>,
    /// metric -> "baseline_higher" | "variant_higher" | "tie".
    pub directions: BTreeMap<String, String>,
    pub failures: usize,
}

impl ComparisonTable {
    pub fn median(&self, arm: &str, metric: &str) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm && r.error.is_none())
            .filter_map(|r| r.metric(metric))
            .collect();
        median_of(&mut vals)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scene,seed,arm,masked_psnr,silhouette_iou,normal_tv,texture_tv,chamfer,mid_alpha,perceptual,error\n",
        );
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scene,
                r.seed,
                r.arm,
                cell(r.masked_psnr),
                cell(r.silhouette_iou),
                cell(r.normal_tv),
                cell(r.texture_tv),
                cell(r.chamfer),
                cell(r.mid_alpha),
                cell(r.perceptual),
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

fn median_of(vals: &mut Vec<f64>) -> Option<f64> {
    vals.retain(|v| v.is_finite());
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    Some(if n % 2 == 1 { vals[n / 2] } else { 0.5 * (vals[n / 2 - 1] + vals[n / 2]) })
}

fn audit_diff<S: Real>(
    suite: AblationSuite,
    base: &PipelineConfig<S>,
    variant: &PipelineConfig<S>,
) -> Result<()> {
    let a = config_fingerprint(base);
    let b = config_fingerprint(variant);
    let mut changed: Vec<&str> = Vec::new();
    for ((ka, va), (kb, vb)) in a.iter().zip(&b) {
        assert_eq!(ka, kb, "fingerprints must enumerate keys in one order");
        if va != vb {
            changed.push(ka);
        }
    }
    let expected = suite.ablated_keys();
    if changed != expected {
        return Err(Error::config(format!(
            "ablation arm for {} changed keys {:?}, expected {:?}",
            suite.name(),
            changed,
            expected
        )));
    }
    Ok(())
}

/// Synthesizes an inconsistent input view set for the img23d pipeline:
/// ground truth on the config's starting rig, corrupted per `spec`.
pub fn img23d_inputs<S: Real>(
    cfg: &PipelineConfig<S>,
    scene: &ProceduralScene,
    spec: &InconsistencySpec,
) -> Result<ViewSetInput<S>> {
    let views0 = schedule_views(cfg, 0.0);
    let latent = cfg.latent_resolution();
    let rig = cfg.rig(views0, latent);
    let gt = render_ground_truth(scene, &rig, &cfg.adapter.render);
    let rgb: Vec<Image<S>> = gt.iter().map(|v| v.rgb.clone()).collect();
    let alpha: Vec<Image<S>> = gt.iter().map(|v| v.alpha.clone()).collect();
    let (images, _) = inject_inconsistency(&rgb, spec)?;
    // Alphas ride the same warp; the translation/rotation draws come first
    // in the per-view stream, so zeroing the color fields preserves them.
    let warp_only = InconsistencySpec {
        max_gain: 0.0,
        max_offset: 0.0,
        detail_noise_sigma: 0.0,
        ..*spec
    };
    let (alpha, _) = inject_inconsistency(&alpha, &warp_only)?;
    Ok(ViewSetInput { images, alpha: Some(alpha), truth: Some(scene.clone()) })
}

fn stats_row<S: Real>(
    scene_idx: usize,
    seed: u64,
    arm: &str,
    cfg: &PipelineConfig<S>,
    scene: &ProceduralScene,
    out: &pipeline::RunOutput<S>,
) -> RunRow {
    let rig = cfg.rig(out.final_views.len(), cfg.latent_resolution());
    let gt = render_ground_truth(scene, &rig, &out.state.cfg.render);
    let m = out.metrics.as_ref();
    RunRow {
        scene: scene_idx,
        seed,
        arm: arm.to_string(),
        masked_psnr: m.map(|r| r.masked_psnr),
        silhouette_iou: m.map(|r| r.silhouette_iou),
        normal_tv: m.map(|r| r.normal_tv),
        texture_tv: m.map(|r| r.texture_tv),
        chamfer: m.and_then(|r| r.chamfer).filter(|c| c.is_finite()),
        mid_alpha: Some(mid_alpha_fraction(&out.final_views, 0.1, 0.9)),
        perceptual: Some(albedo_perceptual(&out.final_views, &gt)),
        error: None,
    }
}

/// Runs a suite over `scenes` x `seeds` with both arms on identical inputs.
/// `base` must target the suite's pipeline kind; start from `desk_config`.
pub fn run_ablation<S: Real>(
    suite: AblationSuite,
    base: &PipelineConfig<S>,
    scenes: &[ProceduralScene],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if scenes.len() < 3 || seeds.len() < 3 {
        return Err(Error::config(format!(
            "ablation needs >= 3 scenes and >= 3 seeds, got {} x {}",
            scenes.len(),
            seeds.len()
        )));
    }
    if base.kind != suite.kind() {
        return Err(Error::config(format!(
            "suite {} runs on {}, config is for {}",
            suite.name(),
            suite.kind().name(),
            base.kind.name()
        )));
    }
    base.validate()?;
    let variant = suite.apply(base);
    audit_diff(suite, base, &variant)?;

    // Frozen surfaces are per-scene, shared by arms and seeds.
    let meshes: Vec<_> = if suite.kind() == PipelineKind::Retexture {
        scenes
            .iter()
            .map(|s| scene_mesh::<S>(s, base.tet_res))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let (base_arm, var_arm) = suite.arm_names();
    let mut rows = Vec::with_capacity(scenes.len() * seeds.len() * 2);
    let mut failures = 0usize;

    for (si, scene) in scenes.iter().enumerate() {
        for &seed in seeds {
            for (arm_name, arm_cfg) in [(base_arm, base), (var_arm, &variant)] {
                let mut cfg = arm_cfg.clone();
                cfg.seed = seed;
                let inputs = match suite.kind() {
                    PipelineKind::Retexture => Ok(PipelineInputs::Retexture {
                        mesh: meshes[si].clone(),
                        target: scene.clone(),
                    }),
                    PipelineKind::Img23dLite => {
                        let spec = InconsistencySpec {
                            seed: seed ^ (si as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                            ..InconsistencySpec::default()
                        };
                        img23d_inputs(&cfg, scene, &spec)
                            .map(|views| PipelineInputs::Img23dLite { views })
                    }
                    other => Err(Error::config(format!(
                        "no ablation suite runs on {}",
                        other.name()
                    ))),
                };
                let row = inputs.and_then(|inp| pipeline::run(&cfg, inp)).map_or_else(
                    |e| {
                        failures += 1;
                        RunRow::failed(si, seed, arm_name, &e)
                    },
                    |out| stats_row(si, seed, arm_name, &cfg, scene, &out),
                );
                rows.push(row);
            }
        }
    }

    let mut medians = BTreeMap::new();
    let mut directions = BTreeMap::new();
    for name in METRIC_NAMES {
        let collect = |arm: &str| {
            let mut vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm && r.error.is_none())
                .filter_map(|r| r.metric(name))
                .collect();
            median_of(&mut vals)
        };
        if let (Some(b), Some(v)) = (collect(base_arm), collect(var_arm)) {
            medians.insert(name.to_string(), (b, v));
            let dir = if b > v {
                "baseline_higher"
            } else if v > b {
                "variant_higher"
            } else {
                "tie"
            };
            directions.insert(name.to_string(), dir.to_string());
        }
    }

    Ok(ComparisonTable {
        suite,
        ablated_keys: suite.ablated_keys().iter().map(|s| s.to_string()).collect(),
        baseline_arm: base_arm.to_string(),
        variant_arm: var_arm.to_string(),
        rows,
        medians,
        directions,
        failures,
    })
}
