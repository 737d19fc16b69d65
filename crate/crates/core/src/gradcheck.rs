//! Central-difference auditing of hand-derived gradients. Probes a subset of
//! coordinates (the largest analytic entries plus a random sample) and
//! reports the worst relative error, with differencing arithmetic done in
//! f64 regardless of the scalar type under test.

use crate::math::Real;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Coordinate budget: half spent on the largest analytic gradients, half
    /// on a seeded random sample of the rest.
    pub max_probes: usize,
    pub seed: u64,
    /// Error denominators are floored at `rel_floor * max|analytic|`, so
    /// near-zero entries are judged in absolute terms on that scale.
    pub rel_floor: f64,
}

impl CheckOpts {
    pub fn strict_f64() -> Self {
        CheckOpts {
            h: 1e-6,
            max_probes: 200,
            seed: 0,
            rel_floor: 1e-3,
        }
    }

    /// f32 forward passes leave ~1e-7 relative noise on the loss; a larger
    /// step keeps the difference quotient above it.
    pub fn loose_f32() -> Self {
        CheckOpts {
            h: 2e-3,
            max_probes: 120,
            seed: 0,
            rel_floor: 3e-3,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// (coordinate, analytic, central difference) at the worst probe.
    pub worst: Option<(usize, f64, f64)>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} probes, max rel err {:.3e}",
            self.name, self.probes, self.max_rel_err
        )?;
        if let Some((idx, an, fd)) = self.worst {
            write!(f, " (worst at [{idx}]: analytic {an:.6e}, fd {fd:.6e})")?;
        }
        Ok(())
    }
}

/// Audits `analytic` as the gradient of `loss` at `params`.
pub fn check_group<S: Real>(
    name: &str,
    params: &[S],
    analytic: &[S],
    loss: &mut dyn FnMut(&[S]) -> S,
    opts: &CheckOpts,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let n = params.len();
    let grad_scale = analytic
        .iter()
        .fold(0.0f64, |m, g| m.max(g.as_f64().abs()));
    let floor = (opts.rel_floor * grad_scale).max(f64::MIN_POSITIVE);

    let probes = select_probes(analytic, opts);
    let mut work: Vec<S> = params.to_vec();
    let h = S::of(opts.h);

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for &i in &probes {
        let orig = work[i];
        work[i] = orig + h;
        let lp = loss(&work).as_f64();
        work[i] = orig - h;
        let lm = loss(&work).as_f64();
        work[i] = orig;
        let fd = (lp - lm) / (2.0 * opts.h);
        let an = analytic[i].as_f64();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some((i, an, fd));
        }
    }
    GradCheckReport {
        name: name.to_string(),
        probes: probes.len().min(n),
        max_rel_err,
        worst,
    }
}

fn select_probes<S: Real>(analytic: &[S], opts: &CheckOpts) -> Vec<usize> {
    let n = analytic.len();
    if n <= opts.max_probes {
        return (0..n).collect();
    }
    let top_count = opts.max_probes / 2;
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| {
        analytic[b]
            .abs()
            .partial_cmp(&analytic[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = by_mag[..top_count].to_vec();
    let mut rest: Vec<usize> = by_mag[top_count..].to_vec();
    let mut rng = crate::math::derive_rng(opts.seed, "gradcheck-probes", &[]);
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(opts.max_probes - top_count));
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        // loss = sum w_i x_i^2, gradient 2 w_i x_i
        let w: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 * 0.03).collect();
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let grad: Vec<f64> = w.iter().zip(&x).map(|(w, x)| 2.0 * w * x).collect();
        let wc = w.clone();
        let report = check_group(
            "quadratic",
            &x,
            &grad,
            &mut |p| p.iter().zip(&wc).map(|(x, w)| w * x * x).sum::<f64>(),
            &CheckOpts::strict_f64(),
        );
        assert!(report.max_rel_err < 1e-7, "{report}");
    }

    #[test]
    fn flags_wrong_gradient() {
        let x: Vec<f64> = (0..20).map(|i| 0.5 + i as f64 * 0.1).collect();
        let mut grad: Vec<f64> = x.iter().map(|x| 2.0 * x).collect();
        grad[7] *= 1.5; // corrupt one coordinate
        let report = check_group(
            "corrupted",
            &x,
            &grad,
            &mut |p| p.iter().map(|x| x * x).sum::<f64>(),
            &CheckOpts::strict_f64(),
        );
        assert!(report.max_rel_err > 0.1, "{report}");
        assert_eq!(report.worst.unwrap().0, 7);
    }
}
