//! Variance-preserving diffusion noise schedules and timestep plans.
//!
//! Time runs over `[0, t_max]` with `t = 0` meaning clean data. The discrete
//! beta chain is extended to continuous time by linear interpolation of
//! `log(alpha_bar)`, so `alpha(0) = 1` and `sigma(0) = 0` hold exactly and
//! `alpha^2 + sigma^2 = 1` holds by construction at every `t`.

use crate::image::Image;
use crate::math::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScheduleKind {
    /// Beta linear in sqrt space between 0.00085 and 0.012, the standard
    /// latent-diffusion training chain.
    ScaledLinear,
    /// Squared-cosine alpha_bar chain with betas capped at 0.999.
    Cosine,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: NoiseScheduleKind,
    t_max: f64,
    /// `log_alpha_bar[i]` is log of the alpha_bar product after `i` chain
    /// steps; entry 0 is 0 (clean data).
    log_alpha_bar: Vec<f64>,
}

pub const SCALED_LINEAR_BETA_START: f64 = 0.00085;
pub const SCALED_LINEAR_BETA_END: f64 = 0.012;

pub fn build_schedule(kind: NoiseScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::config(format!(
            "noise schedule needs at least 2 chain steps, got {t_max}"
        )));
    }
    let betas = match kind {
        NoiseScheduleKind::ScaledLinear => {
            let s0 = SCALED_LINEAR_BETA_START.sqrt();
            let s1 = SCALED_LINEAR_BETA_END.sqrt();
            (0..t_max)
                .map(|i| {
                    let s = s0 + (s1 - s0) * i as f64 / (t_max - 1) as f64;
                    s * s
                })
                .collect::<Vec<_>>()
        }
        NoiseScheduleKind::Cosine => {
            let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..t_max)
                .map(|i| {
                    let t1 = i as f64 / t_max as f64;
                    let t2 = (i + 1) as f64 / t_max as f64;
                    (1.0 - f(t2) / f(t1)).min(0.999)
                })
                .collect::<Vec<_>>()
        }
    };
    let mut log_alpha_bar = Vec::with_capacity(t_max + 1);
    log_alpha_bar.push(0.0);
    let mut acc = 0.0;
    for (i, &b) in betas.iter().enumerate() {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::numerical(
                "build_schedule",
                format!("beta[{i}] = {b} outside (0, 1)"),
            ));
        }
        acc += (1.0 - b).ln();
        log_alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        t_max: t_max as f64,
        log_alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> NoiseScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn log_alpha_bar_at(&self, t: f64) -> f64 {
        assert!(
            (0.0..=self.t_max).contains(&t),
            "t = {t} outside schedule range [0, {}]",
            self.t_max
        );
        let i = t.floor() as usize;
        if i as f64 == t {
            return self.log_alpha_bar[i];
        }
        let frac = t - i as f64;
        self.log_alpha_bar[i] + frac * (self.log_alpha_bar[i + 1] - self.log_alpha_bar[i])
    }

    /// Signal and noise scales at continuous time `t`.
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        let lab = self.log_alpha_bar_at(t);
        let alpha_sq = lab.exp();
        (alpha_sq.sqrt(), (1.0 - alpha_sq).max(0.0).sqrt())
    }

    /// Half log-SNR `log(alpha / sigma)`. Positive infinity at `t = 0`.
    pub fn half_log_snr(&self, t: f64) -> f64 {
        let (alpha, sigma) = self.alpha_sigma(t);
        if sigma == 0.0 {
            f64::INFINITY
        } else {
            (alpha / sigma).ln()
        }
    }
}

/// Decreasing solver node times `t_0 = t_start > ... > t_n = 0`, evenly
/// spaced. A plan with `n` steps has `n + 1` nodes and always lands on clean
/// data.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepPlan {
    nodes: Vec<f64>,
}

impl TimestepPlan {
    pub fn new(t_start: f64, steps: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if !(t_start > 0.0 && t_start <= schedule.t_max()) {
            return Err(Error::config(format!(
                "t_start = {t_start} outside (0, {}]",
                schedule.t_max()
            )));
        }
        if steps == 0 {
            return Err(Error::config("timestep plan needs at least one step"));
        }
        let nodes = (0..=steps)
            .map(|k| t_start * (1.0 - k as f64 / steps as f64))
            .collect();
        Ok(TimestepPlan { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.nodes[0]
    }
}

/// Forward diffusion of a clean image to time `t`: `alpha * x + sigma * eps`.
pub fn perturb<S: Real>(
    x: &Image<S>,
    schedule: &NoiseSchedule,
    t: f64,
    noise: &Image<S>,
) -> Image<S> {
    let (alpha, sigma) = schedule.alpha_sigma(t);
    x.axpby(S::of(alpha), noise, S::of(sigma))
}
