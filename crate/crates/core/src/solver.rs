//! Multistep ODE/SDE ancestral sampler in data-prediction form
//! (DPM-Solver++ style, up to second order with a multistep history).
//!
//! The caller owns the denoiser: each step takes the current sample `x_t` and
//! a denoised estimate for it, and returns the sample at the next (smaller)
//! time. In the fusion loop the denoised estimate handed in is the
//! render-blended one, so the solver history tracks exactly what conditioned
//! the trajectory.

use crate::image::Image;
use crate::math::Real;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    /// 1 = exponential Euler, 2 = multistep second order.
    pub order: u8,
    /// Drop to first order on the final step; keeps the last transition
    /// exact when it lands on sigma = 0.
    pub lower_order_final: bool,
    /// Stochastic variant: adds schedule-scaled fresh noise each step.
    pub sde: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            order: 2,
            lower_order_final: true,
            sde: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > 2 {
            return Err(Error::config(format!(
                "solver order must be 1 or 2, got {}",
                self.order
            )));
        }
        Ok(())
    }
}

/// Per-trajectory multistep memory: the previous node's time and denoised
/// estimate.
#[derive(Debug, Clone, Default)]
pub struct SolverState<S> {
    history: Option<(f64, Image<S>)>,
}

impl<S: Real> SolverState<S> {
    pub fn new() -> Self {
        SolverState { history: None }
    }

    pub fn reset(&mut self) {
        self.history = None;
    }
}

/// Recovers the clean-data estimate from a noise prediction:
/// `(x_t - sigma * eps_hat) / alpha`.
pub fn predict_denoised<S: Real>(
    schedule: &NoiseSchedule,
    x_t: &Image<S>,
    noise_pred: &Image<S>,
    t: f64,
) -> Image<S> {
    let (alpha, sigma) = schedule.alpha_sigma(t);
    x_t.axpby(S::of(1.0 / alpha), noise_pred, S::of(-sigma / alpha))
}

/// One ancestral step from `t` to `t_next < t`. `denoised` is the clean-data
/// estimate at `t`. For the SDE variant with `sigma(t_next) > 0`, `noise`
/// must hold standard normal draws of the same shape.
///
/// Calling with `t_next == t` is a no-op and leaves the history untouched.
pub fn solver_step<S: Real>(
    state: &mut SolverState<S>,
    cfg: &SolverConfig,
    schedule: &NoiseSchedule,
    x_t: &Image<S>,
    denoised: &Image<S>,
    t: f64,
    t_next: f64,
    is_final: bool,
    noise: Option<&Image<S>>,
) -> Result<Image<S>> {
    cfg.validate()?;
    if x_t.data().len() != denoised.data().len() {
        return Err(Error::config("solver_step: x_t and denoised shapes differ"));
    }
    if t_next == t {
        return Ok(x_t.clone());
    }
    if t_next > t {
        return Err(Error::config(format!(
            "solver_step: t_next = {t_next} must not exceed t = {t}"
        )));
    }

    let (_, sigma_t) = schedule.alpha_sigma(t);
    let (alpha_next, sigma_next) = schedule.alpha_sigma(t_next);
    let lam_t = schedule.half_log_snr(t);
    let lam_next = schedule.half_log_snr(t_next);
    let h = lam_next - lam_t;

    // Second order needs a previous node; the final step optionally falls
    // back to first order, and a landing on sigma = 0 always does (the
    // higher-order correction is undefined there).
    let use_second = cfg.order == 2
        && state.history.is_some()
        && !(cfg.lower_order_final && is_final)
        && sigma_next > 0.0;

    // Effective clean-data target D: either the denoised estimate itself or
    // the extrapolation through the previous estimate.
    let (ca, cb) = if use_second {
        let (t_prev, _) = state.history.as_ref().unwrap();
        let lam_prev = schedule.half_log_snr(*t_prev);
        let h_prev = lam_t - lam_prev;
        let r = h_prev / h;
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::numerical(
                "solver_step",
                format!("step-size ratio r = {r} from history at t = {t_prev}"),
            ));
        }
        (1.0 + 0.5 / r, -0.5 / r)
    } else {
        (1.0, 0.0)
    };

    let exp_mh = (-h).exp(); // 0 when landing on sigma = 0 (h = inf)
    let out = if cfg.sde {
        // x_next = (sigma_next/sigma_t) e^{-h} x_t
        //        + alpha_next (1 - e^{-2h}) D0
        //        + 0.5 alpha_next (1 - e^{-2h}) D1
        //        + sigma_next sqrt(1 - e^{-2h}) eps
        // with D0 the current denoised estimate and D1 = (D0 - prev)/r.
        let decay = 1.0 - exp_mh * exp_mh;
        let keep = sigma_next / sigma_t * exp_mh;
        let (d0_coef, d1_coef) = if use_second {
            let (t_prev, _) = state.history.as_ref().unwrap();
            let lam_prev = schedule.half_log_snr(*t_prev);
            let r = (lam_t - lam_prev) / h;
            (
                alpha_next * decay + 0.5 * alpha_next * decay / r,
                -0.5 * alpha_next * decay / r,
            )
        } else {
            (alpha_next * decay, 0.0)
        };
        let noise_scale = sigma_next * decay.max(0.0).sqrt();
        let mut out = x_t.scale(S::of(keep));
        accumulate(&mut out, denoised, d0_coef);
        if d1_coef != 0.0 {
            let (_, prev) = state.history.as_ref().unwrap();
            accumulate(&mut out, prev, d1_coef);
        }
        if noise_scale > 0.0 {
            let eps = noise.ok_or_else(|| {
                Error::config("solver_step: SDE step needs a noise image")
            })?;
            if eps.data().len() != x_t.data().len() {
                return Err(Error::config("solver_step: noise shape differs from x_t"));
            }
            accumulate(&mut out, eps, noise_scale);
        }
        out
    } else {
        // x_next = (sigma_next/sigma_t) x_t - alpha_next (e^{-h} - 1) D
        let keep = sigma_next / sigma_t;
        let d_coef = -alpha_next * (exp_mh - 1.0);
        let mut out = x_t.scale(S::of(keep));
        accumulate(&mut out, denoised, d_coef * ca);
        if cb != 0.0 {
            let (_, prev) = state.history.as_ref().unwrap();
            accumulate(&mut out, prev, d_coef * cb);
        }
        out
    };

    if !out.is_finite() {
        return Err(Error::numerical(
            "solver_step",
            format!("non-finite sample stepping {t} -> {t_next}"),
        ));
    }
    state.history = Some((t, denoised.clone()));
    Ok(out)
}

fn accumulate<S: Real>(acc: &mut Image<S>, x: &Image<S>, coef: f64) {
    let c = S::of(coef);
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += c * b;
    }
}

/// Analytic 1-D Gaussian world for validating the sampler end to end. With
/// data x0 ~ N(mu, s^2), both the exact posterior-mean denoiser and the exact
/// probability-flow transport map are closed form, so solver output can be
/// checked per sample, not just in distribution.
pub mod testbed {
    use super::*;
    use crate::schedule::TimestepPlan;

    pub struct GaussianTestbed {
        pub mu: f64,
        pub s: f64,
        pub schedule: NoiseSchedule,
    }

    impl GaussianTestbed {
        /// Marginal std at time t: sqrt(alpha^2 s^2 + sigma^2).
        pub fn marginal_std(&self, t: f64) -> f64 {
            let (a, sg) = self.schedule.alpha_sigma(t);
            (a * a * self.s * self.s + sg * sg).sqrt()
        }

        /// E[x0 | x_t] = mu + alpha s^2 / (alpha^2 s^2 + sigma^2) (x_t - alpha mu).
        pub fn denoise(&self, x_t: &Image<f64>, t: f64) -> Image<f64> {
            let (a, sg) = self.schedule.alpha_sigma(t);
            let gain = a * self.s * self.s / (a * a * self.s * self.s + sg * sg);
            x_t.map(|x| self.mu + gain * (x - a * self.mu))
        }

        /// Exact probability-flow endpoint for a sample at time t:
        /// the ODE preserves the standardized coordinate, so
        /// x0 = mu + s (x_t - alpha mu) / marginal_std(t).
        pub fn exact_terminal(&self, x_t: &Image<f64>, t: f64) -> Image<f64> {
            let (a, _) = self.schedule.alpha_sigma(t);
            let std = self.marginal_std(t);
            x_t.map(|x| self.mu + self.s * (x - a * self.mu) / std)
        }

        /// Draws n independent forward-diffused samples at time t: returns
        /// (x0, x_t) as 1 x n single-channel images.
        pub fn sample_forward(&self, n: usize, t: f64, seed: u64) -> (Image<f64>, Image<f64>) {
            let (a, sg) = self.schedule.alpha_sigma(t);
            let mut x0 = Image::zeros(1, n, 1);
            let mut eps = Image::zeros(1, n, 1);
            let mut rng = crate::math::derive_rng(seed, "gaussian-testbed", &[]);
            x0.fill_standard_normal(&mut rng);
            eps.fill_standard_normal(&mut rng);
            let x0 = x0.map(|z| self.mu + self.s * z);
            let x_t = x0.axpby(a, &eps, sg);
            (x0, x_t)
        }

        /// Runs the full solver chain with the exact denoiser.
        pub fn run(
            &self,
            x_start: &Image<f64>,
            plan: &TimestepPlan,
            cfg: &SolverConfig,
            seed: u64,
        ) -> Result<Image<f64>> {
            let mut state = SolverState::new();
            let mut x = x_start.clone();
            let nodes = plan.nodes();
            for k in 0..plan.steps() {
                let (t, t_next) = (nodes[k], nodes[k + 1]);
                let denoised = self.denoise(&x, t);
                let noise = if cfg.sde {
                    let mut eps = Image::zeros(x.height(), x.width(), 1);
                    let mut rng = crate::math::derive_rng(seed, "testbed-sde", &[k as u64]);
                    eps.fill_standard_normal(&mut rng);
                    Some(eps)
                } else {
                    None
                };
                x = solver_step(
                    &mut state,
                    cfg,
                    &self.schedule,
                    &x,
                    &denoised,
                    t,
                    t_next,
                    k + 1 == plan.steps(),
                    noise.as_ref(),
                )?;
            }
            Ok(x)
        }
    }

    pub fn mean_var(img: &Image<f64>) -> (f64, f64) {
        let n = img.data().len() as f64;
        let mean = img.data().iter().sum::<f64>() / n;
        let var = img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    pub fn median_abs_error(a: &Image<f64>, b: &Image<f64>) -> f64 {
        let mut errs: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .collect();
        errs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        errs[errs.len() / 2]
    }
}

#[cfg(test)]
mod tests {
    use super::testbed::*;
    use super::*;
    use crate::schedule::{build_schedule, NoiseScheduleKind, TimestepPlan};

    fn sched() -> NoiseSchedule {
        build_schedule(NoiseScheduleKind::ScaledLinear, 1000).unwrap()
    }

    #[test]
    fn predict_denoised_inverts_perturb() {
        let sched = sched();
        let mut rng = crate::math::derive_rng(3, "solver-test", &[]);
        let mut x0 = Image::<f64>::zeros(8, 8, 3);
        let mut eps = Image::zeros(8, 8, 3);
        x0.fill_standard_normal(&mut rng);
        eps.fill_standard_normal(&mut rng);
        for t in [1.0, 250.0, 777.5, 1000.0] {
            let x_t = crate::schedule::perturb(&x0, &sched, t, &eps);
            let rec = predict_denoised(&sched, &x_t, &eps, t);
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-9, "t={t}");
            }
        }
    }

    #[test]
    fn step_to_same_time_is_noop() {
        let sched = sched();
        let mut state = SolverState::new();
        let cfg = SolverConfig::default();
        let x = Image::from_fn(4, 4, 1, |i, j, _| (i * 7 + j) as f64 * 0.01);
        let d = x.map(|v| v * 0.5);
        let out = solver_step(&mut state, &cfg, &sched, &x, &d, 400.0, 400.0, false, None).unwrap();
        assert_eq!(out, x);
        assert!(state.history.is_none());
    }

    #[test]
    fn rejects_time_increase() {
        let sched = sched();
        let mut state = SolverState::new();
        let x = Image::<f64>::zeros(2, 2, 1);
        let got = solver_step(
            &mut state,
            &SolverConfig::default(),
            &sched,
            &x,
            &x,
            100.0,
            200.0,
            false,
            None,
        );
        assert!(got.is_err());
    }

    #[test]
    fn final_step_lands_on_denoised() {
        let sched = sched();
        for sde in [false, true] {
            let cfg = SolverConfig {
                sde,
                ..SolverConfig::default()
            };
            let mut state = SolverState::new();
            let x = Image::from_fn(3, 3, 1, |i, j, _| (i + j) as f64 * 0.3 - 0.5);
            let d = Image::filled(3, 3, 1, 0.42f64);
            let out =
                solver_step(&mut state, &cfg, &sched, &x, &d, 50.0, 0.0, true, None).unwrap();
            for &v in out.data() {
                assert!((v - 0.42).abs() < 1e-12, "sde={sde}");
            }
        }
    }

    #[test]
    fn ode_chain_recovers_gaussian_statistics() {
        let tb = GaussianTestbed {
            mu: 0.3,
            s: 0.8,
            schedule: sched(),
        };
        let n = 4000;
        let t_start = 1000.0;
        let (_, x_t) = tb.sample_forward(n, t_start, 99);
        let plan = TimestepPlan::new(t_start, 30, &tb.schedule).unwrap();
        let out = tb.run(&x_t, &plan, &SolverConfig::default(), 0).unwrap();
        let (mean, var) = mean_var(&out);
        assert!((mean - tb.mu).abs() < 0.04, "mean {mean}");
        assert!((var - tb.s * tb.s).abs() / (tb.s * tb.s) < 0.08, "var {var}");
    }

    #[test]
    fn per_sample_error_shrinks_with_more_steps() {
        let tb = GaussianTestbed {
            mu: -0.2,
            s: 0.5,
            schedule: sched(),
        };
        let (_, x_t) = tb.sample_forward(2000, 1000.0, 7);
        let exact = tb.exact_terminal(&x_t, 1000.0);
        let cfg = SolverConfig::default();
        let mut errs = Vec::new();
        for steps in [5, 10, 20, 40] {
            let plan = TimestepPlan::new(1000.0, steps, &tb.schedule).unwrap();
            let out = tb.run(&x_t, &plan, &cfg, 0).unwrap();
            errs.push(median_abs_error(&out, &exact));
        }
        for w in errs.windows(2) {
            assert!(
                w[1] < w[0] * 0.7,
                "median error should drop when steps double: {errs:?}"
            );
        }
    }

    #[test]
    fn second_order_beats_first_order() {
        let tb = GaussianTestbed {
            mu: 0.1,
            s: 0.7,
            schedule: sched(),
        };
        let (_, x_t) = tb.sample_forward(2000, 900.0, 21);
        let exact = tb.exact_terminal(&x_t, 900.0);
        let plan = TimestepPlan::new(900.0, 12, &tb.schedule).unwrap();
        let e1 = {
            let cfg = SolverConfig {
                order: 1,
                ..Default::default()
            };
            median_abs_error(&tb.run(&x_t, &plan, &cfg, 0).unwrap(), &exact)
        };
        let e2 = median_abs_error(
            &tb.run(&x_t, &plan, &SolverConfig::default(), 0).unwrap(),
            &exact,
        );
        assert!(e2 < e1, "order 2 ({e2}) should beat order 1 ({e1})");
    }

    #[test]
    fn sde_chain_recovers_gaussian_statistics() {
        let tb = GaussianTestbed {
            mu: 0.25,
            s: 0.6,
            schedule: sched(),
        };
        let (_, x_t) = tb.sample_forward(4000, 1000.0, 5);
        let plan = TimestepPlan::new(1000.0, 40, &tb.schedule).unwrap();
        let cfg = SolverConfig {
            sde: true,
            ..Default::default()
        };
        let out = tb.run(&x_t, &plan, &cfg, 17).unwrap();
        let (mean, var) = mean_var(&out);
        assert!((mean - tb.mu).abs() < 0.05, "mean {mean}");
        assert!((var - tb.s * tb.s).abs() / (tb.s * tb.s) < 0.12, "var {var}");
    }

    #[test]
    fn sde_step_requires_noise() {
        let sched = sched();
        let cfg = SolverConfig {
            sde: true,
            ..Default::default()
        };
        let mut state = SolverState::new();
        let x = Image::<f64>::zeros(2, 2, 1);
        assert!(
            solver_step(&mut state, &cfg, &sched, &x, &x, 500.0, 400.0, false, None).is_err()
        );
    }
}
