//! Pluggable denoiser interface and the synthetic oracle backend.
//!
//! The oracle stands in for a frozen 2D UNet plus its control adapters. It
//! composites an effective clean target from a frequency split: structure
//! (low band) comes from the conditioning render, detail (high band) from the
//! per-view target image, so the causal loop of controlled multi-view
//! sampling is preserved while every value stays analytically predictable.

use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::math::{PiecewiseLinear, Real};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Conditioning render for one view. `rgb` drives the frequency-split
/// compositing; `depth` is carried as a geometry hint for diagnostics and
/// leaves the composited target untouched.
#[derive(Debug, Clone, Copy)]
pub struct ControlInput<'a, S> {
    pub rgb: Option<&'a Image<S>>,
    pub depth: Option<&'a Image<S>>,
}

/// One denoiser invocation. `condition` is an opaque per-view token so a
/// learned backend can be plugged in later; the oracle ignores it.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a, S> {
    pub x_t: &'a Image<S>,
    pub t: f64,
    pub view_index: usize,
    pub condition: Option<&'a str>,
    pub control: Option<ControlInput<'a, S>>,
    pub control_weight: f64,
}

impl<S: Real> DenoiseRequest<'_, S> {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.control_weight) {
            return Err(Error::config(format!(
                "control_weight must be in [0,1], got {}",
                self.control_weight
            )));
        }
        if self.control.is_none() && self.control_weight != 0.0 {
            return Err(Error::config(
                "control_weight must be 0 when no control image is supplied",
            ));
        }
        Ok(())
    }
}

pub trait Denoiser<S: Real> {
    /// Predicts the noise component of `req.x_t`. Pure given the request and
    /// the RNG state.
    fn denoise(
        &self,
        req: &DenoiseRequest<S>,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Image<S>>;
}

/// Synthetic denoiser: knows the per-view target images (ground truth plus
/// whatever inconsistency the harness injected) and answers with the noise
/// that would remain if the current sample were headed toward the composited
/// target. `model_error_sigma` adds a per-call Gaussian error on the result.
#[derive(Debug, Clone)]
pub struct OracleModel<S> {
    pub targets: Vec<Image<S>>,
    pub detail_split_sigma: f64,
    pub model_error_sigma: f64,
}

impl<S: Real> OracleModel<S> {
    pub fn new(targets: Vec<Image<S>>, detail_split_sigma: f64, model_error_sigma: f64) -> Result<Self> {
        if detail_split_sigma < 0.0 || model_error_sigma < 0.0 {
            return Err(Error::config("oracle sigmas must be >= 0"));
        }
        Ok(OracleModel { targets, detail_split_sigma, model_error_sigma })
    }

    /// The composited clean target y*: low band of the control RGB blended
    /// over the target's low band by `control_weight`, target detail kept.
    fn effective_target(&self, req: &DenoiseRequest<S>) -> Result<Image<S>> {
        let y = self
            .targets
            .get(req.view_index)
            .ok_or_else(|| Error::config(format!("oracle has no target for view {}", req.view_index)))?;
        let rgb = req.control.as_ref().and_then(|c| c.rgb);
        let lambda = match rgb {
            Some(_) => req.control_weight,
            None => 0.0,
        };
        if lambda == 0.0 {
            return Ok(y.clone());
        }
        let ctrl = rgb.unwrap();
        if (ctrl.height(), ctrl.width(), ctrl.channels()) != (y.height(), y.width(), y.channels()) {
            return Err(Error::config("control RGB shape differs from the view target"));
        }
        let low_y = y.gaussian_blur(self.detail_split_sigma);
        let low_c = ctrl.gaussian_blur(self.detail_split_sigma);
        let high_y = y.sub(&low_y);
        Ok(low_c
            .axpby(S::of(lambda), &low_y, S::of(1.0 - lambda))
            .add(&high_y))
    }
}

impl<S: Real> Denoiser<S> for OracleModel<S> {
    fn denoise(
        &self,
        req: &DenoiseRequest<S>,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Image<S>> {
        req.validate()?;
        let y_star = self.effective_target(req)?;
        if y_star.data().len() != req.x_t.data().len() {
            return Err(Error::config("x_t shape differs from the view target"));
        }
        let (alpha, sigma) = schedule.alpha_sigma(req.t);
        if sigma < 1e-8 {
            return Err(Error::numerical(
                "oracle_denoise",
                format!("sigma(t) = {sigma} at t = {} is below 1e-8", req.t),
            ));
        }
        let mut eps = req.x_t.axpby(S::of(1.0 / sigma), &y_star, S::of(-alpha / sigma));
        if self.model_error_sigma > 0.0 {
            let mut eta = Image::zeros(eps.height(), eps.width(), eps.channels());
            eta.fill_standard_normal(rng);
            eps = eps.axpby(S::one(), &eta, S::of(self.model_error_sigma));
        }
        Ok(eps)
    }
}

/// Time-dependent control weights. Blending is hard-gated: below
/// `gate_fraction * t_max` the rendered views stop overwriting the denoised
/// ones no matter what the curve says.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    tile: PiecewiseLinear,
    blend: PiecewiseLinear,
    depth: PiecewiseLinear,
    gate_t: f64,
}

impl ControlSchedule {
    pub const GATE_FRACTION: f64 = 0.4;

    /// Tile weight ramps 0.4 -> 1.0 while t runs t_max -> 0.4 t_max, then
    /// holds at 1.0; blend weight ramps 0.6 -> 0 over the same span and is
    /// zero at and below the gate.
    pub fn default_for(t_max: f64) -> Self {
        let gate_t = Self::GATE_FRACTION * t_max;
        ControlSchedule {
            tile: PiecewiseLinear::new(vec![(gate_t, 1.0), (t_max, 0.4)]).unwrap(),
            blend: PiecewiseLinear::new(vec![(gate_t, 0.0), (t_max, 0.6)]).unwrap(),
            depth: PiecewiseLinear::constant(1.0),
            gate_t,
        }
    }

    pub fn custom(tile: PiecewiseLinear, blend: PiecewiseLinear, depth: PiecewiseLinear, gate_t: f64) -> Self {
        ControlSchedule { tile, blend, depth, gate_t }
    }

    /// Ablation switch: drop the blending pass entirely (the denoised views
    /// go to the solver unmixed) while the conditioning weights stay active.
    pub fn without_blend(mut self) -> Self {
        self.blend = PiecewiseLinear::constant(0.0);
        self
    }

    pub fn tile_weight(&self, t: f64) -> f64 {
        self.tile.eval(t).clamp(0.0, 1.0)
    }

    pub fn blend_weight(&self, t: f64) -> f64 {
        if t <= self.gate_t {
            return 0.0;
        }
        self.blend.eval(t).clamp(0.0, 1.0)
    }

    pub fn depth_weight(&self, t: f64) -> f64 {
        self.depth.eval(t).clamp(0.0, 1.0)
    }
}

/// Mixes the rendered RGB back over the denoised view:
/// w(t) * x_rend + (1 - w(t)) * x_ctrl.
pub fn blend<S: Real>(
    x_ctrl: &Image<S>,
    x_rend_rgb: &Image<S>,
    t: f64,
    sched: &ControlSchedule,
) -> Image<S> {
    let w = sched.blend_weight(t);
    if w == 0.0 {
        return x_ctrl.clone();
    }
    x_rend_rgb.axpby(S::of(w), x_ctrl, S::of(1.0 - w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::derive_rng;
    use crate::schedule::{build_schedule, NoiseScheduleKind, TimestepPlan};
    use crate::solver::{predict_denoised, solver_step, SolverConfig, SolverState};
    use rand::Rng;

    fn sched() -> NoiseSchedule {
        build_schedule(NoiseScheduleKind::ScaledLinear, 1000).unwrap()
    }

    fn rand_image(h: usize, w: usize, salt: u64) -> Image<f64> {
        let mut rng = derive_rng(0xdead, "denoiser-fixture", &[salt]);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn noisy(y: &Image<f64>, t: f64, schedule: &NoiseSchedule, salt: u64) -> Image<f64> {
        let (alpha, sigma) = schedule.alpha_sigma(t);
        let mut eta = Image::zeros(y.height(), y.width(), y.channels());
        eta.fill_standard_normal(&mut derive_rng(0xbeef, "denoiser-noise", &[salt]));
        y.axpby(alpha, &eta, sigma)
    }

    #[test]
    fn uncontrolled_oracle_recovers_the_target_exactly() {
        let schedule = sched();
        let y = rand_image(12, 10, 1);
        let model = OracleModel::new(vec![y.clone()], 2.0, 0.0).unwrap();
        let t = 612.0;
        let x_t = noisy(&y, t, &schedule, 1);
        let req = DenoiseRequest {
            x_t: &x_t,
            t,
            view_index: 0,
            condition: None,
            control: None,
            control_weight: 0.0,
        };
        let mut rng = derive_rng(0, "denoise", &[0]);
        let eps = model.denoise(&req, &schedule, &mut rng).unwrap();
        let recovered = predict_denoised(&schedule, &x_t, &eps, t);
        for (a, b) in recovered.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn full_control_pins_the_low_band_to_the_render() {
        // Target = control + constant shift: identical detail bands, so the
        // composited result reproduces the control exactly and its low band
        // matches after one more blur.
        let schedule = sched();
        let ctrl = rand_image(16, 16, 2);
        let y = ctrl.map(|v| v + 0.2);
        let model = OracleModel::new(vec![y], 2.0, 0.0).unwrap();
        let t = 700.0;
        let x_t = noisy(&ctrl, t, &schedule, 2);
        let req = DenoiseRequest {
            x_t: &x_t,
            t,
            view_index: 0,
            condition: None,
            control: Some(ControlInput { rgb: Some(&ctrl), depth: None }),
            control_weight: 1.0,
        };
        let mut rng = derive_rng(0, "denoise", &[1]);
        let eps = model.denoise(&req, &schedule, &mut rng).unwrap();
        let pred = predict_denoised(&schedule, &x_t, &eps, t);
        let low_pred = pred.gaussian_blur(2.0);
        let low_ctrl = ctrl.gaussian_blur(2.0);
        for (a, b) in low_pred.data().iter().zip(low_ctrl.data()) {
            assert!((a - b).abs() < 1e-5, "low bands disagree: {a} vs {b}");
        }
    }

    #[test]
    fn depth_only_control_is_inert() {
        let schedule = sched();
        let y = rand_image(12, 10, 3);
        let depth = Image::filled(12, 10, 1, 0.5);
        let model = OracleModel::new(vec![y.clone()], 2.0, 0.0).unwrap();
        let t = 500.0;
        let x_t = noisy(&y, t, &schedule, 3);
        let mut rng = derive_rng(0, "denoise", &[2]);
        let with_depth = model
            .denoise(
                &DenoiseRequest {
                    x_t: &x_t,
                    t,
                    view_index: 0,
                    condition: None,
                    control: Some(ControlInput { rgb: None, depth: Some(&depth) }),
                    control_weight: 0.8,
                },
                &schedule,
                &mut rng,
            )
            .unwrap();
        let mut rng = derive_rng(0, "denoise", &[2]);
        let without = model
            .denoise(
                &DenoiseRequest {
                    x_t: &x_t,
                    t,
                    view_index: 0,
                    condition: None,
                    control: None,
                    control_weight: 0.0,
                },
                &schedule,
                &mut rng,
            )
            .unwrap();
        assert_eq!(with_depth.data(), without.data());
    }

    #[test]
    fn oracle_rejects_degenerate_requests() {
        let schedule = sched();
        let y = rand_image(8, 8, 4);
        let model = OracleModel::new(vec![y.clone()], 2.0, 0.0).unwrap();
        let x_t = noisy(&y, 400.0, &schedule, 4);
        let mut rng = derive_rng(0, "denoise", &[3]);

        let at = |t: f64, view: usize, weight: f64| DenoiseRequest {
            x_t: &x_t,
            t,
            view_index: view,
            condition: None,
            control: None,
            control_weight: weight,
        };
        assert!(model.denoise(&at(0.0, 0, 0.0), &schedule, &mut rng).is_err(), "sigma ~ 0 must fail");
        assert!(model.denoise(&at(400.0, 5, 0.0), &schedule, &mut rng).is_err(), "missing view");
        assert!(model.denoise(&at(400.0, 0, 0.5), &schedule, &mut rng).is_err(), "weight without control");
    }

    #[test]
    fn model_error_is_seeded_noise() {
        let schedule = sched();
        let y = rand_image(8, 8, 5);
        let model = OracleModel::new(vec![y.clone()], 2.0, 0.05).unwrap();
        let x_t = noisy(&y, 300.0, &schedule, 5);
        let req = DenoiseRequest {
            x_t: &x_t,
            t: 300.0,
            view_index: 0,
            condition: None,
            control: None,
            control_weight: 0.0,
        };
        let run = |stream: u64| {
            let mut rng = derive_rng(7, "denoise", &[stream]);
            model.denoise(&req, &schedule, &mut rng).unwrap()
        };
        assert_eq!(run(0).data(), run(0).data(), "same seed must reproduce");
        assert!(run(0).data() != run(1).data(), "different streams must differ");
    }

    #[test]
    fn solving_with_the_oracle_lands_on_the_target() {
        let schedule = sched();
        let y = rand_image(10, 10, 6);
        let model = OracleModel::new(vec![y.clone()], 2.0, 0.0).unwrap();
        let plan = TimestepPlan::new(schedule.t_max(), 12, &schedule).unwrap();
        let nodes = plan.nodes();

        let mut x = Image::zeros(10, 10, 3);
        x.fill_standard_normal(&mut derive_rng(0xabc, "init", &[0]));
        let mut state = SolverState::new();
        let cfg = SolverConfig::default();
        for k in 0..nodes.len() - 1 {
            let t = nodes[k];
            let req = DenoiseRequest {
                x_t: &x,
                t,
                view_index: 0,
                condition: None,
                control: None,
                control_weight: 0.0,
            };
            let mut rng = derive_rng(1, "denoise", &[k as u64]);
            let eps = model.denoise(&req, &schedule, &mut rng).unwrap();
            let denoised = predict_denoised(&schedule, &x, &eps, t);
            x = solver_step(
                &mut state,
                &cfg,
                &schedule,
                &x,
                &denoised,
                t,
                nodes[k + 1],
                k + 2 == nodes.len(),
                None,
            )
            .unwrap();
        }
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6, "terminal sample missed the target: {a} vs {b}");
        }
    }

    #[test]
    fn default_schedule_shapes() {
        let cs = ControlSchedule::default_for(1000.0);
        assert!((cs.tile_weight(1000.0) - 0.4).abs() < 1e-12);
        assert!((cs.tile_weight(400.0) - 1.0).abs() < 1e-12);
        assert!((cs.tile_weight(100.0) - 1.0).abs() < 1e-12);
        assert!((cs.blend_weight(1000.0) - 0.6).abs() < 1e-12);
        assert_eq!(cs.blend_weight(400.0), 0.0);
        assert_eq!(cs.blend_weight(300.0), 0.0);
        assert!(cs.blend_weight(401.0) > 0.0);
        for k in 0..=100 {
            let t = k as f64 * 10.0;
            for v in [cs.tile_weight(t), cs.blend_weight(t), cs.depth_weight(t)] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let off = cs.without_blend();
        assert_eq!(off.blend_weight(1000.0), 0.0);
        assert!((off.tile_weight(1000.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn blend_endpoints_and_gate() {
        let rend = rand_image(6, 6, 7);
        let ctrl = rand_image(6, 6, 8);
        let always = |w: f64| {
            ControlSchedule::custom(
                PiecewiseLinear::constant(1.0),
                PiecewiseLinear::constant(w),
                PiecewiseLinear::constant(1.0),
                400.0,
            )
        };
        assert_eq!(blend(&ctrl, &rend, 800.0, &always(1.0)).data(), rend.data());
        assert_eq!(blend(&ctrl, &rend, 800.0, &always(0.0)).data(), ctrl.data());
        // Below the gate the curve is ignored outright.
        assert_eq!(blend(&ctrl, &rend, 300.0, &always(0.6)).data(), ctrl.data());
    }

    #[test]
    fn blend_is_affine() {
        let u = rand_image(5, 5, 9);
        let v = rand_image(5, 5, 10);
        let cs = ControlSchedule::default_for(1000.0);
        let t = 700.0;
        let (a, b) = (1.7, -0.3);
        let lhs = blend(&u.map(|x| a * x + b), &v.map(|x| a * x + b), t, &cs);
        let rhs = blend(&u, &v, t, &cs).map(|x| a * x + b);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
