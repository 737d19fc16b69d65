//! Controlled multi-view inconsistency: per-view similarity warps, color
//! jitter, and detail noise, with every drawn parameter recorded so tests can
//! audit the corruption against the images.

use crate::image::Image;
use crate::math::{derive_rng, Real};
use crate::{Error, Result};

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InconsistencySpec {
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
    pub max_gain: f64,
    pub max_offset: f64,
    pub detail_noise_sigma: f64,
    pub seed: u64,
}

impl Default for InconsistencySpec {
    /// Strong enough to visibly break reconstruction-only fusion at 64
    /// pixels while remaining solvable.
    fn default() -> Self {
        InconsistencySpec {
            max_translation_px: 2.0,
            max_rotation_deg: 2.0,
            max_gain: 0.05,
            max_offset: 0.0,
            detail_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl InconsistencySpec {
    pub fn zero(seed: u64) -> Self {
        InconsistencySpec {
            max_translation_px: 0.0,
            max_rotation_deg: 0.0,
            max_gain: 0.0,
            max_offset: 0.0,
            detail_noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("max_translation_px", self.max_translation_px),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_gain", self.max_gain),
            ("max_offset", self.max_offset),
            ("detail_noise_sigma", self.detail_noise_sigma),
        ];
        for (name, v) in named {
            if !(v >= 0.0) {
                return Err(Error::config(format!("inconsistency {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.max_translation_px == 0.0
            && self.max_rotation_deg == 0.0
            && self.max_gain == 0.0
            && self.max_offset == 0.0
            && self.detail_noise_sigma == 0.0
    }
}

/// The parameters actually drawn for one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedInconsistency {
    pub view_index: usize,
    pub translation_px: (f64, f64),
    pub rotation_deg: f64,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub noise_sigma: f64,
}

/// Bilinear sample with clamp-to-edge.
fn sample<S: Real>(img: &Image<S>, x: f64, y: f64, ch: usize) -> S {
    let xc = x.clamp(0.0, (img.width() - 1) as f64);
    let yc = y.clamp(0.0, (img.height() - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let tx = S::of(xc - x0 as f64);
    let ty = S::of(yc - y0 as f64);
    let a = img.at(y0, x0, ch) * (S::one() - tx) + img.at(y0, x1, ch) * tx;
    let b = img.at(y1, x0, ch) * (S::one() - tx) + img.at(y1, x1, ch) * tx;
    a * (S::one() - ty) + b * ty
}

/// Applies seeded per-view corruption. A zero spec returns bit-identical
/// copies. Output values may leave [0,1] slightly; downstream consumers
/// treat views as unclamped tensors.
pub fn inject_inconsistency<S: Real>(
    views: &[Image<S>],
    spec: &InconsistencySpec,
) -> Result<(Vec<Image<S>>, Vec<AppliedInconsistency>)> {
    spec.validate()?;
    let mut out = Vec::with_capacity(views.len());
    let mut applied = Vec::with_capacity(views.len());
    for (vi, img) in views.iter().enumerate() {
        let mut rng = derive_rng(spec.seed, "inconsistency", &[vi as u64]);
        let range = |rng: &mut rand_chacha::ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..m) } else { 0.0 };
        let dx = range(&mut rng, spec.max_translation_px);
        let dy = range(&mut rng, spec.max_translation_px);
        let rot = range(&mut rng, spec.max_rotation_deg);
        let mut gain = [1.0; 3];
        let mut offset = [0.0; 3];
        for ch in 0..3 {
            gain[ch] = 1.0 + range(&mut rng, spec.max_gain);
            offset[ch] = range(&mut rng, spec.max_offset);
        }

        let warped = if dx == 0.0 && dy == 0.0 && rot == 0.0 {
            img.clone()
        } else {
            let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
            let (sin, cos) = rot.to_radians().sin_cos();
            Image::from_fn(img.height(), img.width(), img.channels(), |i, j, ch| {
                // Inverse map: undo translation, then rotation about center.
                let x = j as f64 - cx - dx;
                let y = i as f64 - cy - dy;
                let sx = cos * x + sin * y + cx;
                let sy = -sin * x + cos * y + cy;
                sample(img, sx, sy, ch)
            })
        };

        let identity_color = gain == [1.0; 3] && offset == [0.0; 3];
        let mut jittered = if img.channels() == 3 && !identity_color {
            Image::from_fn(warped.height(), warped.width(), 3, |i, j, ch| {
                warped.at(i, j, ch) * S::of(gain[ch]) + S::of(offset[ch])
            })
        } else {
            warped
        };

        if spec.detail_noise_sigma > 0.0 {
            let mut noise = Image::zeros(jittered.height(), jittered.width(), jittered.channels());
            noise.fill_standard_normal(&mut rng);
            jittered = jittered.axpby(S::one(), &noise, S::of(spec.detail_noise_sigma));
        }

        out.push(jittered);
        applied.push(AppliedInconsistency {
            view_index: vi,
            translation_px: (dx, dy),
            rotation_deg: rot,
            gain,
            offset,
            noise_sigma: spec.detail_noise_sigma,
        });
    }
    Ok((out, applied))
}
