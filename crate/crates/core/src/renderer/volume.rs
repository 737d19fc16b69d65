//! Volumetric ray marching with stratified sampling inside the bounding
//! sphere. The train path records a full tape (sample positions, field
//! activations, weights) so gradients reach every field parameter without
//! recomputation.

use rand::Rng;

use super::{Camera, Rect, RenderConfig};
use crate::field::{FieldGrads, HashGridField, QuerySlots, SampleField};
use crate::image::Image;
use crate::math::{derive_rng, Real, Vec3};

/// Geometry buffers of one rendered rect. `albedo` is premultiplied by the
/// per-sample weights (no background inside it); `depth` is blended with the
/// background constant; `alpha` is the accumulated opacity.
#[derive(Debug, Clone)]
pub struct VolumeFrame<S> {
    pub rect: Rect,
    pub albedo: Image<S>,
    pub depth: Image<S>,
    pub alpha: Image<S>,
    /// Per-ray contribution masses and common bin width, row-major over the
    /// rect; rays that miss the bounding sphere keep an empty mass list.
    pub bin_p: Vec<Vec<S>>,
    pub bin_delta: Vec<S>,
}

fn ray_span<S: Real>(o: Vec3<S>, dir: Vec3<S>, radius: S, znear: S) -> Option<(S, S)> {
    let b = o.dot(dir);
    let c = o.norm_sq() - radius * radius;
    let disc = b * b - c;
    if disc.as_f64() <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let enter = (-b - sq).max(znear);
    let exit = -b + sq;
    if exit.as_f64() <= enter.as_f64() {
        return None;
    }
    Some((enter, exit))
}

fn jitter_offsets<S: Real>(cfg: &RenderConfig<S>, view: usize, salt: u64, gx: usize, gy: usize, n: usize) -> Vec<S> {
    if !cfg.jitter {
        return vec![S::of(0.5); n];
    }
    let mut rng = derive_rng(cfg.seed, "vol-jitter", &[view as u64, salt, gy as u64, gx as u64]);
    (0..n).map(|_| S::of(rng.gen::<f64>())).collect()
}

/// Forward-only render of `rect`, usable with any sampleable field. Rows are
/// rendered in parallel; output is identical regardless of thread count.
pub fn volume_render<S: Real>(
    field: &(impl SampleField<S> + ?Sized),
    cam: &Camera<S>,
    rect: Rect,
    cfg: &RenderConfig<S>,
    salt: u64,
    want_bins: bool,
) -> VolumeFrame<S> {
    use rayon::prelude::*;

    let n = cfg.samples_per_ray;
    let d_bg = cfg.background_depth_for(cam);
    let rows: Vec<_> = (0..rect.h)
        .into_par_iter()
        .map(|py| {
            let mut albedo = vec![S::zero(); rect.w * 3];
            let mut depth = vec![d_bg; rect.w];
            let mut alpha = vec![S::zero(); rect.w];
            let mut bins_p = Vec::new();
            let mut bins_d = vec![S::zero(); rect.w];
            for px in 0..rect.w {
                let (gx, gy) = (rect.x0 + px, rect.y0 + py);
                let (o, dir) = cam.ray(gx, gy);
                let mut p_list = Vec::new();
                if let Some((enter, exit)) = ray_span(o, dir, cfg.bound_radius, cfg.znear) {
                    let delta = (exit - enter) / S::of(n as f64);
                    bins_d[px] = delta;
                    let us = jitter_offsets(cfg, cam.view_index, salt, gx, gy, n);
                    let mut trans = S::one();
                    let mut acc_c = [S::zero(); 3];
                    let mut acc_t = S::zero();
                    if want_bins {
                        p_list.reserve(n);
                    }
                    for (k, &u) in us.iter().enumerate() {
                        let t = enter + (S::of(k as f64) + u) * delta;
                        let s = field.sample(o + dir.scale(t));
                        let a = S::one() - (-s.density * delta).exp();
                        let w = trans * a;
                        for ch in 0..3 {
                            acc_c[ch] = acc_c[ch] + w * s.albedo[ch];
                        }
                        acc_t = acc_t + w * t;
                        trans = trans * (S::one() - a);
                        if want_bins {
                            p_list.push(w);
                        }
                    }
                    let a_total = S::one() - trans;
                    for ch in 0..3 {
                        albedo[px * 3 + ch] = acc_c[ch];
                    }
                    alpha[px] = a_total;
                    depth[px] = acc_t + (S::one() - a_total) * d_bg;
                }
                if want_bins {
                    bins_p.push(p_list);
                }
            }
            (albedo, depth, alpha, bins_p, bins_d)
        })
        .collect();

    let mut frame = VolumeFrame {
        rect,
        albedo: Image::zeros(rect.h, rect.w, 3),
        depth: Image::zeros(rect.h, rect.w, 1),
        alpha: Image::zeros(rect.h, rect.w, 1),
        bin_p: Vec::new(),
        bin_delta: Vec::new(),
    };
    for (py, (albedo, depth, alpha, bins_p, bins_d)) in rows.into_iter().enumerate() {
        frame.albedo.data_mut()[py * rect.w * 3..(py + 1) * rect.w * 3].copy_from_slice(&albedo);
        frame.depth.data_mut()[py * rect.w..(py + 1) * rect.w].copy_from_slice(&depth);
        frame.alpha.data_mut()[py * rect.w..(py + 1) * rect.w].copy_from_slice(&alpha);
        if want_bins {
            frame.bin_p.extend(bins_p);
            frame.bin_delta.extend(bins_d);
        }
    }
    frame
}

/// Everything the backward sweep needs, laid out SoA per sample.
pub struct VolumeTape<S> {
    pub frame: VolumeFrame<S>,
    cam_view: usize,
    d_bg: S,
    // Per pixel (row-major over rect): sample range and bin width.
    off: Vec<usize>,
    count: Vec<usize>,
    delta: Vec<S>,
    // Per sample.
    ts: Vec<S>,
    pos: Vec<Vec3<S>>,
    weight: Vec<S>,
    trans: Vec<S>,
    color: Vec<[S; 3]>,
    features: Vec<S>,
    z1: Vec<S>,
    z2: Vec<S>,
    raw: Vec<S>,
}

impl<S> VolumeTape<S> {
    pub fn samples(&self) -> usize {
        self.ts.len()
    }

    pub fn view_index(&self) -> usize {
        self.cam_view
    }
}

/// Taped render of `rect` against the hash-grid field. Always records ray
/// bins (the entropy loss consumes them).
pub fn volume_render_train<S: Real>(
    field: &HashGridField<S>,
    cam: &Camera<S>,
    rect: Rect,
    cfg: &RenderConfig<S>,
    salt: u64,
) -> VolumeTape<S> {
    let n = cfg.samples_per_ray;
    let d_bg = cfg.background_depth_for(cam);
    let feat = field.feature_dim();
    let hid = field.cfg().hidden;

    let mut tape = VolumeTape {
        frame: VolumeFrame {
            rect,
            albedo: Image::zeros(rect.h, rect.w, 3),
            depth: Image::zeros(rect.h, rect.w, 1),
            alpha: Image::zeros(rect.h, rect.w, 1),
            bin_p: Vec::with_capacity(rect.pixels()),
            bin_delta: Vec::with_capacity(rect.pixels()),
        },
        cam_view: cam.view_index,
        d_bg,
        off: Vec::with_capacity(rect.pixels()),
        count: Vec::with_capacity(rect.pixels()),
        delta: Vec::with_capacity(rect.pixels()),
        ts: Vec::new(),
        pos: Vec::new(),
        weight: Vec::new(),
        trans: Vec::new(),
        color: Vec::new(),
        features: Vec::new(),
        z1: Vec::new(),
        z2: Vec::new(),
        raw: Vec::new(),
    };

    for py in 0..rect.h {
        for px in 0..rect.w {
            let (gx, gy) = (rect.x0 + px, rect.y0 + py);
            let (o, dir) = cam.ray(gx, gy);
            let start = tape.ts.len();
            tape.off.push(start);
            let span = ray_span(o, dir, cfg.bound_radius, cfg.znear);
            let Some((enter, exit)) = span else {
                tape.count.push(0);
                tape.delta.push(S::zero());
                tape.frame.bin_p.push(Vec::new());
                tape.frame.bin_delta.push(S::zero());
                *tape.frame.depth.at_mut(py, px, 0) = d_bg;
                continue;
            };
            let delta = (exit - enter) / S::of(n as f64);
            tape.count.push(n);
            tape.delta.push(delta);
            tape.frame.bin_delta.push(delta);

            let us = jitter_offsets(cfg, cam.view_index, salt, gx, gy, n);
            tape.features.resize(tape.features.len() + n * feat, S::zero());
            tape.z1.resize(tape.z1.len() + n * hid, S::zero());
            tape.z2.resize(tape.z2.len() + n * hid, S::zero());
            tape.raw.resize(tape.raw.len() + n * 4, S::zero());

            let mut trans = S::one();
            let mut acc_c = [S::zero(); 3];
            let mut acc_t = S::zero();
            let mut p_list = Vec::with_capacity(n);
            for (k, &u) in us.iter().enumerate() {
                let idx = start + k;
                let t = enter + (S::of(k as f64) + u) * delta;
                let p = o + dir.scale(t);
                let mut slots = QuerySlots {
                    features: &mut tape.features[idx * feat..(idx + 1) * feat],
                    z1: &mut tape.z1[idx * hid..(idx + 1) * hid],
                    z2: &mut tape.z2[idx * hid..(idx + 1) * hid],
                    raw: &mut tape.raw[idx * 4..(idx + 1) * 4],
                };
                let s = field.query_into(p, &mut slots);
                let a = S::one() - (-s.density * delta).exp();
                let w = trans * a;
                tape.ts.push(t);
                tape.pos.push(p);
                tape.trans.push(trans);
                tape.weight.push(w);
                tape.color.push(s.albedo);
                p_list.push(w);
                for ch in 0..3 {
                    acc_c[ch] = acc_c[ch] + w * s.albedo[ch];
                }
                acc_t = acc_t + w * t;
                trans = trans * (S::one() - a);
            }
            let a_total = S::one() - trans;
            for ch in 0..3 {
                *tape.frame.albedo.at_mut(py, px, ch) = acc_c[ch];
            }
            *tape.frame.alpha.at_mut(py, px, 0) = a_total;
            *tape.frame.depth.at_mut(py, px, 0) = acc_t + (S::one() - a_total) * d_bg;
            tape.frame.bin_p.push(p_list);
        }
    }
    tape
}

/// Accumulates dLoss/dField into `grads` given upstream gradients on the
/// frame buffers and optionally on the per-ray bin masses. Sequential over
/// samples so accumulation order is fixed.
pub fn volume_backward<S: Real>(
    field: &HashGridField<S>,
    tape: &VolumeTape<S>,
    g_albedo: &Image<S>,
    g_depth: &Image<S>,
    g_alpha: &Image<S>,
    g_bins: Option<&[Vec<S>]>,
    grads: &mut FieldGrads<S>,
) {
    let rect = tape.frame.rect;
    let feat = field.feature_dim();
    let hid = field.cfg().hidden;
    let mut f_buf = vec![S::zero(); feat];
    let mut z1_buf = vec![S::zero(); hid];
    let mut z2_buf = vec![S::zero(); hid];
    let mut raw_buf = vec![S::zero(); 4];
    for py in 0..rect.h {
        for px in 0..rect.w {
            let pix = py * rect.w + px;
            let n = tape.count[pix];
            if n == 0 {
                continue;
            }
            let off = tape.off[pix];
            let delta = tape.delta[pix];
            let ga = [g_albedo.at(py, px, 0), g_albedo.at(py, px, 1), g_albedo.at(py, px, 2)];
            let gd = g_depth.at(py, px, 0);
            let gal = g_alpha.at(py, px, 0);

            // u_i = dL/dw_i holding sigma fixed; the (1-alpha) background
            // blend in depth contributes -gd*d_bg through alpha = sum w.
            // dL/dsigma_i = delta * ((T_i - w_i) u_i - sum_{j>i} w_j u_j).
            let mut suffix = S::zero();
            for k in (0..n).rev() {
                let i = off + k;
                let w = tape.weight[i];
                let c = tape.color[i];
                let mut u = ga[0] * c[0] + ga[1] * c[1] + ga[2] * c[2];
                u = u + gd * (tape.ts[i] - tape.d_bg) + gal;
                if let Some(bins) = g_bins {
                    if let Some(&gw) = bins[pix].get(k) {
                        u = u + gw;
                    }
                }
                let d_sigma = delta * ((tape.trans[i] - w) * u - suffix);
                suffix = suffix + w * u;

                let d_albedo = [w * ga[0], w * ga[1], w * ga[2]];
                f_buf.copy_from_slice(&tape.features[i * feat..(i + 1) * feat]);
                z1_buf.copy_from_slice(&tape.z1[i * hid..(i + 1) * hid]);
                z2_buf.copy_from_slice(&tape.z2[i * hid..(i + 1) * hid]);
                raw_buf.copy_from_slice(&tape.raw[i * 4..(i + 1) * 4]);
                let slots = QuerySlots {
                    features: &mut f_buf,
                    z1: &mut z1_buf,
                    z2: &mut z2_buf,
                    raw: &mut raw_buf,
                };
                field.backward(tape.pos[i], &slots, d_sigma, d_albedo, grads, None);
            }
        }
    }
}
