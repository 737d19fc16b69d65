//! Multiresolution hash-grid radiance field: trilinear feature encoding over
//! a pyramid of virtual grids backed by fixed-size tables, followed by a
//! small SiLU MLP producing density and albedo. Gradients for both parameter
//! groups and the query position are derived by hand; there is no autodiff
//! anywhere in this crate, which keeps every backward pass auditable against
//! central differences.

use crate::math::{Real, Vec3};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub table_size_log2: usize,
    pub features_per_level: usize,
    pub hidden: usize,
    /// Density = density_scale * softplus(raw); the raw head bias is
    /// initialized to density_bias so fresh fields start as thin fog.
    pub density_scale: f64,
    pub density_bias: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 8,
            base_resolution: 16,
            growth: 1.5,
            table_size_log2: 14,
            features_per_level: 2,
            hidden: 32,
            density_scale: 25.0,
            density_bias: -2.0,
        }
    }
}

const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];
const OUT_DIM: usize = 4;

#[derive(Debug, Clone)]
pub struct HashGridField<S> {
    cfg: HashGridConfig,
    level_res: Vec<usize>,
    level_offset: Vec<usize>,
    level_entries: Vec<usize>,
    level_direct: Vec<bool>,
    /// Feature tables for all levels, flattened: entry e of level l lives at
    /// `level_offset[l] + e * features_per_level`.
    pub hash: Vec<S>,
    /// MLP weights packed W1 | b1 | W2 | b2 | W3 | b3, row major.
    pub mlp: Vec<S>,
}

/// Gradient buffers matching the two parameter groups of a field.
#[derive(Debug, Clone)]
pub struct FieldGrads<S> {
    pub hash: Vec<S>,
    pub mlp: Vec<S>,
}

impl<S: Real> FieldGrads<S> {
    pub fn zeros_like(field: &HashGridField<S>) -> Self {
        FieldGrads {
            hash: vec![S::zero(); field.hash.len()],
            mlp: vec![S::zero(); field.mlp.len()],
        }
    }

    pub fn clear(&mut self) {
        self.hash.iter_mut().for_each(|v| *v = S::zero());
        self.mlp.iter_mut().for_each(|v| *v = S::zero());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FieldSample<S> {
    pub density: S,
    pub albedo: [S; 3],
}

/// Anything that can be point-sampled for density and albedo. The hash-grid
/// field is the one that matters; closures stand in for it in renderer and
/// level-set tests.
pub trait SampleField<S: Real>: Sync {
    fn sample(&self, p: Vec3<S>) -> FieldSample<S>;
}

impl<S: Real> SampleField<S> for HashGridField<S> {
    fn sample(&self, p: Vec3<S>) -> FieldSample<S> {
        self.query(p)
    }
}

/// Closure adapter for tests and procedural ground truth.
pub struct FnField<F>(pub F);

impl<S: Real, F: Fn(Vec3<S>) -> FieldSample<S> + Sync> SampleField<S> for FnField<F> {
    fn sample(&self, p: Vec3<S>) -> FieldSample<S> {
        self.0(p)
    }
}

/// Per-query activation record, written by `query_into` and consumed by
/// `backward`. Sliced out of flat SoA buffers owned by the caller so batched
/// rendering does no per-sample allocation.
pub struct QuerySlots<'a, S> {
    pub features: &'a mut [S],
    pub z1: &'a mut [S],
    pub z2: &'a mut [S],
    pub raw: &'a mut [S],
}

impl<S: Real> HashGridField<S> {
    pub fn new(cfg: HashGridConfig, seed: u64) -> Self {
        assert!(cfg.levels >= 1 && cfg.features_per_level >= 1 && cfg.hidden >= 1);
        let table_cap = 1usize << cfg.table_size_log2;
        let mut level_res = Vec::with_capacity(cfg.levels);
        let mut level_offset = Vec::with_capacity(cfg.levels);
        let mut level_entries = Vec::with_capacity(cfg.levels);
        let mut level_direct = Vec::with_capacity(cfg.levels);
        let mut offset = 0usize;
        for l in 0..cfg.levels {
            let res = (cfg.base_resolution as f64 * cfg.growth.powi(l as i32)).floor() as usize;
            let corners = (res + 1) * (res + 1) * (res + 1);
            let entries = corners.min(table_cap);
            level_res.push(res);
            level_offset.push(offset);
            level_entries.push(entries);
            level_direct.push(corners <= table_cap);
            offset += entries * cfg.features_per_level;
        }

        let mut rng = crate::math::derive_rng(seed, "field-init", &[]);
        let hash = (0..offset)
            .map(|_| S::of(rng.gen_range(-1e-2..1e-2)))
            .collect();

        let in_dim = cfg.levels * cfg.features_per_level;
        let hid = cfg.hidden;
        let mlp_len = hid * in_dim + hid + hid * hid + hid + OUT_DIM * hid + OUT_DIM;
        let mut mlp = vec![S::zero(); mlp_len];
        let mut cursor = 0;
        for (rows, cols) in [(hid, in_dim), (hid, hid), (OUT_DIM, hid)] {
            let bound = (6.0 / cols as f64).sqrt();
            for _ in 0..rows * cols {
                mlp[cursor] = S::of(rng.gen_range(-bound..bound));
                cursor += 1;
            }
            cursor += rows; // biases stay zero
        }
        // raw density head starts negative: a fresh field is thin fog, not a wall
        let b3_density = mlp_len - OUT_DIM;
        mlp[b3_density] = S::of(cfg.density_bias);

        HashGridField {
            cfg,
            level_res,
            level_offset,
            level_entries,
            level_direct,
            hash,
            mlp,
        }
    }

    pub fn cfg(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.levels * self.cfg.features_per_level
    }

    pub fn cast<T: Real>(&self) -> HashGridField<T> {
        HashGridField {
            cfg: self.cfg,
            level_res: self.level_res.clone(),
            level_offset: self.level_offset.clone(),
            level_entries: self.level_entries.clone(),
            level_direct: self.level_direct.clone(),
            hash: self.hash.iter().map(|v| T::of(v.as_f64())).collect(),
            mlp: self.mlp.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    fn mlp_offsets(&self) -> (usize, usize, usize, usize, usize, usize) {
        let in_dim = self.feature_dim();
        let hid = self.cfg.hidden;
        let w1 = 0;
        let b1 = w1 + hid * in_dim;
        let w2 = b1 + hid;
        let b2 = w2 + hid * hid;
        let w3 = b2 + hid;
        let b3 = w3 + OUT_DIM * hid;
        (w1, b1, w2, b2, w3, b3)
    }

    #[inline]
    fn entry_index(&self, level: usize, cx: u64, cy: u64, cz: u64) -> usize {
        let res = self.level_res[level] as u64;
        let idx = if self.level_direct[level] {
            (cz * (res + 1) + cy) * (res + 1) + cx
        } else {
            (cx.wrapping_mul(HASH_PRIMES[0])
                ^ cy.wrapping_mul(HASH_PRIMES[1])
                ^ cz.wrapping_mul(HASH_PRIMES[2]))
                % self.level_entries[level] as u64
        };
        self.level_offset[level] + idx as usize * self.cfg.features_per_level
    }

    /// Trilinear cell lookup for one level: cell base, fractional position.
    #[inline]
    fn cell(&self, level: usize, p: Vec3<S>) -> ([u64; 3], [S; 3]) {
        let res = self.level_res[level];
        let mut base = [0u64; 3];
        let mut frac = [S::zero(); 3];
        for a in 0..3 {
            let x = crate::math::clamp01((p[a] + S::one()) * S::of(0.5));
            let u = x * S::of(res as f64);
            let mut i = u.floor();
            if i.as_f64() as usize >= res {
                i = S::of(res as f64 - 1.0);
            }
            base[a] = i.as_f64() as u64;
            frac[a] = u - i;
        }
        (base, frac)
    }

    /// Encodes a position into the concatenated per-level features.
    pub fn encode(&self, p: Vec3<S>, features: &mut [S]) {
        let fpl = self.cfg.features_per_level;
        debug_assert_eq!(features.len(), self.feature_dim());
        for l in 0..self.cfg.levels {
            let (base, frac) = self.cell(l, p);
            let out = &mut features[l * fpl..(l + 1) * fpl];
            out.iter_mut().for_each(|v| *v = S::zero());
            for corner in 0..8u64 {
                let dx = corner & 1;
                let dy = (corner >> 1) & 1;
                let dz = (corner >> 2) & 1;
                let wx = if dx == 1 { frac[0] } else { S::one() - frac[0] };
                let wy = if dy == 1 { frac[1] } else { S::one() - frac[1] };
                let wz = if dz == 1 { frac[2] } else { S::one() - frac[2] };
                let w = wx * wy * wz;
                let e = self.entry_index(l, base[0] + dx, base[1] + dy, base[2] + dz);
                for f in 0..fpl {
                    out[f] += w * self.hash[e + f];
                }
            }
        }
    }

    /// Full forward query, recording activations into the caller's slots.
    pub fn query_into(&self, p: Vec3<S>, slots: &mut QuerySlots<S>) -> FieldSample<S> {
        self.encode(p, slots.features);
        let in_dim = self.feature_dim();
        let hid = self.cfg.hidden;
        let (w1, b1, w2, b2, w3, b3) = self.mlp_offsets();

        for i in 0..hid {
            let row = &self.mlp[w1 + i * in_dim..w1 + (i + 1) * in_dim];
            let mut acc = self.mlp[b1 + i];
            for (w, f) in row.iter().zip(slots.features.iter()) {
                acc += *w * *f;
            }
            slots.z1[i] = acc;
        }
        for i in 0..hid {
            let row = &self.mlp[w2 + i * hid..w2 + (i + 1) * hid];
            let mut acc = self.mlp[b2 + i];
            for (w, z) in row.iter().zip(slots.z1.iter()) {
                acc += *w * silu(*z);
            }
            slots.z2[i] = acc;
        }
        for i in 0..OUT_DIM {
            let row = &self.mlp[w3 + i * hid..w3 + (i + 1) * hid];
            let mut acc = self.mlp[b3 + i];
            for (w, z) in row.iter().zip(slots.z2.iter()) {
                acc += *w * silu(*z);
            }
            slots.raw[i] = acc;
        }

        FieldSample {
            density: S::of(self.cfg.density_scale) * softplus(slots.raw[0]),
            albedo: [
                sigmoid(slots.raw[1]),
                sigmoid(slots.raw[2]),
                sigmoid(slots.raw[3]),
            ],
        }
    }

    /// Forward query without an activation record.
    pub fn query(&self, p: Vec3<S>) -> FieldSample<S> {
        let in_dim = self.feature_dim();
        let hid = self.cfg.hidden;
        let mut features = vec![S::zero(); in_dim];
        let mut z1 = vec![S::zero(); hid];
        let mut z2 = vec![S::zero(); hid];
        let mut raw = vec![S::zero(); OUT_DIM];
        let mut slots = QuerySlots {
            features: &mut features,
            z1: &mut z1,
            z2: &mut z2,
            raw: &mut raw,
        };
        self.query_into(p, &mut slots)
    }

    /// Backpropagates (d_density, d_albedo) for the query recorded in
    /// `slots`, accumulating parameter gradients and optionally the gradient
    /// with respect to the query position (needed when the position itself is
    /// a function of optimized geometry).
    pub fn backward(
        &self,
        p: Vec3<S>,
        slots: &QuerySlots<S>,
        d_density: S,
        d_albedo: [S; 3],
        grads: &mut FieldGrads<S>,
        mut d_pos: Option<&mut Vec3<S>>,
    ) {
        let in_dim = self.feature_dim();
        let hid = self.cfg.hidden;
        let (w1, b1, w2, b2, w3, b3) = self.mlp_offsets();

        let mut d_raw = [S::zero(); OUT_DIM];
        d_raw[0] = d_density * S::of(self.cfg.density_scale) * sigmoid(slots.raw[0]);
        for k in 0..3 {
            let s = sigmoid(slots.raw[1 + k]);
            d_raw[1 + k] = d_albedo[k] * s * (S::one() - s);
        }

        // layer 3
        let mut d_h2 = vec![S::zero(); hid];
        for i in 0..OUT_DIM {
            grads.mlp[b3 + i] += d_raw[i];
            let row = &self.mlp[w3 + i * hid..w3 + (i + 1) * hid];
            let grow = &mut grads.mlp[w3 + i * hid..w3 + (i + 1) * hid];
            for j in 0..hid {
                grow[j] += d_raw[i] * silu(slots.z2[j]);
                d_h2[j] += d_raw[i] * row[j];
            }
        }
        // layer 2
        let mut d_h1 = vec![S::zero(); hid];
        for i in 0..hid {
            let dz = d_h2[i] * silu_deriv(slots.z2[i]);
            grads.mlp[b2 + i] += dz;
            let row = &self.mlp[w2 + i * hid..w2 + (i + 1) * hid];
            let grow = &mut grads.mlp[w2 + i * hid..w2 + (i + 1) * hid];
            for j in 0..hid {
                grow[j] += dz * silu(slots.z1[j]);
                d_h1[j] += dz * row[j];
            }
        }
        // layer 1
        let mut d_feat = vec![S::zero(); in_dim];
        for i in 0..hid {
            let dz = d_h1[i] * silu_deriv(slots.z1[i]);
            grads.mlp[b1 + i] += dz;
            let row = &self.mlp[w1 + i * in_dim..w1 + (i + 1) * in_dim];
            let grow = &mut grads.mlp[w1 + i * in_dim..w1 + (i + 1) * in_dim];
            for j in 0..in_dim {
                grow[j] += dz * slots.features[j];
                d_feat[j] += dz * row[j];
            }
        }

        // encoding: scatter into tables, optionally accumulate position grads
        let fpl = self.cfg.features_per_level;
        let half = S::of(0.5);
        for l in 0..self.cfg.levels {
            let (base, frac) = self.cell(l, p);
            let df = &d_feat[l * fpl..(l + 1) * fpl];
            let res_scale = S::of(self.level_res[l] as f64) * half;
            for corner in 0..8u64 {
                let dx = corner & 1;
                let dy = (corner >> 1) & 1;
                let dz = (corner >> 2) & 1;
                let wx = if dx == 1 { frac[0] } else { S::one() - frac[0] };
                let wy = if dy == 1 { frac[1] } else { S::one() - frac[1] };
                let wz = if dz == 1 { frac[2] } else { S::one() - frac[2] };
                let sx = if dx == 1 { S::one() } else { -S::one() };
                let sy = if dy == 1 { S::one() } else { -S::one() };
                let sz = if dz == 1 { S::one() } else { -S::one() };
                let w = wx * wy * wz;
                let e = self.entry_index(l, base[0] + dx, base[1] + dy, base[2] + dz);
                let mut dot = S::zero();
                for f in 0..fpl {
                    grads.hash[e + f] += w * df[f];
                    dot += df[f] * self.hash[e + f];
                }
                if let Some(dp) = d_pos.as_deref_mut() {
                    dp.x += dot * sx * wy * wz * res_scale;
                    dp.y += dot * wx * sy * wz * res_scale;
                    dp.z += dot * wx * wy * sz * res_scale;
                }
            }
        }
    }
}

#[inline]
fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn silu<S: Real>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
fn silu_deriv<S: Real>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}
