//! Synthetic evaluation harness: analytic SDF scenes with procedural
//! albedos, controlled cross-view corruption, and run metrics.

pub mod ablation;
pub mod inconsistency;
pub mod metrics;
pub mod scene;

pub use ablation::{img23d_inputs, run_ablation, AblationSuite, ComparisonTable, RunRow, ALL_SUITES};
pub use inconsistency::{inject_inconsistency, AppliedInconsistency, InconsistencySpec};
pub use metrics::{
    albedo_perceptual, chamfer, evaluate, map_tv, masked_psnr, mid_alpha_fraction, silhouette_iou,
    MetricsReport,
};
pub use scene::{render_ground_truth, AlbedoKind, ProceduralScene, ShapeKind};
