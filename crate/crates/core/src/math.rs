//! Scalar abstraction, small fixed-size linear algebra, and seeded RNG
//! derivation. Everything differentiable in this crate is generic over
//! [`Real`] so gradient audits can run the same code at f32 and f64.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

pub fn vec3<S>(x: S, y: S, z: S) -> Vec3<S> {
    Vec3 { x, y, z }
}

impl<S: Real> Vec3<S> {
    pub fn splat(v: S) -> Self {
        vec3(v, v, v)
    }

    pub fn zero() -> Self {
        Self::splat(S::zero())
    }

    pub fn from_f64(v: Vec3<f64>) -> Self {
        vec3(S::of(v.x), S::of(v.y), S::of(v.z))
    }

    pub fn to_f64(self) -> Vec3<f64> {
        vec3(self.x.as_f64(), self.y.as_f64(), self.z.as_f64())
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [S; 3]) -> Self {
        vec3(a[0], a[1], a[2])
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> S {
        self.dot(self)
    }

    pub fn norm(self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (S::one() / self.norm())
    }

    pub fn scale(self, s: S) -> Self {
        vec3(self.x * s, self.y * s, self.z * s)
    }

    pub fn lerp(self, o: Self, t: S) -> Self {
        self + (o - self).scale(t)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_component(self) -> S {
        self.x.max(self.y).max(self.z)
    }
}

impl<S: Real> std::ops::Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> std::ops::Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Real> std::ops::Mul<S> for Vec3<S> {
    type Output = Self;
    fn mul(self, s: S) -> Self {
        self.scale(s)
    }
}

impl<S: Real> std::ops::Neg for Vec3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl<S: Real> std::ops::AddAssign for Vec3<S> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Real> std::ops::Index<usize> for Vec3<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<S: Real> std::ops::IndexMut<usize> for Vec3<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3x3 matrix. Only what cameras and normal transforms need.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat3<S> {
    pub rows: [Vec3<S>; 3],
}

impl<S: Real> Mat3<S> {
    pub fn from_rows(r0: Vec3<S>, r1: Vec3<S>, r2: Vec3<S>) -> Self {
        Mat3 { rows: [r0, r1, r2] }
    }

    pub fn identity() -> Self {
        Self::from_rows(
            vec3(S::one(), S::zero(), S::zero()),
            vec3(S::zero(), S::one(), S::zero()),
            vec3(S::zero(), S::zero(), S::one()),
        )
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        vec3(
            self.rows[0].dot(v),
            self.rows[1].dot(v),
            self.rows[2].dot(v),
        )
    }

    pub fn transpose(&self) -> Self {
        Self::from_rows(
            vec3(self.rows[0].x, self.rows[1].x, self.rows[2].x),
            vec3(self.rows[0].y, self.rows[1].y, self.rows[2].y),
            vec3(self.rows[0].z, self.rows[1].z, self.rows[2].z),
        )
    }

    /// Transposed multiply: `M^T v`, the inverse rotation for orthonormal M.
    pub fn mul_vec_t(&self, v: Vec3<S>) -> Vec3<S> {
        self.rows[0].scale(v.x) + self.rows[1].scale(v.y) + self.rows[2].scale(v.z)
    }

    pub fn to_f64(&self) -> Mat3<f64> {
        Mat3 {
            rows: [
                self.rows[0].to_f64(),
                self.rows[1].to_f64(),
                self.rows[2].to_f64(),
            ],
        }
    }

    pub fn from_f64(m: Mat3<f64>) -> Self {
        Mat3 {
            rows: [
                Vec3::from_f64(m.rows[0]),
                Vec3::from_f64(m.rows[1]),
                Vec3::from_f64(m.rows[2]),
            ],
        }
    }
}

/// Cubic smoothstep on the already-clamped argument: `x^2 (3 - 2x)`.
/// Satisfies `smoothstep(x) + smoothstep(1 - x) == 1`, which the soft
/// rasterizer relies on for edge coverage symmetry.
pub fn smoothstep<S: Real>(x: S) -> S {
    let three = S::of(3.0);
    let two = S::of(2.0);
    x * x * (three - two * x)
}

/// Derivative of [`smoothstep`] in the open interval: `6x(1 - x)`.
pub fn smoothstep_deriv<S: Real>(x: S) -> S {
    S::of(6.0) * x * (S::one() - x)
}

pub fn clamp01<S: Real>(x: S) -> S {
    x.max(S::zero()).min(S::one())
}

pub fn lerp<S: Real>(a: S, b: S, t: S) -> S {
    a + (b - a) * t
}

/// Piecewise-linear curve with clamped extrapolation. Knot abscissas must be
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> crate::Result<Self> {
        if knots.is_empty() {
            return Err(crate::Error::config("piecewise-linear curve needs knots"));
        }
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(crate::Error::config(format!(
                    "piecewise-linear knots must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(PiecewiseLinear { knots })
    }

    pub fn constant(v: f64) -> Self {
        PiecewiseLinear {
            knots: vec![(0.0, v)],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0].0 {
            return k[0].1;
        }
        if x >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let i = k.partition_point(|p| p.0 <= x);
        let (x0, y0) = k[i - 1];
        let (x1, y1) = k[i];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Deterministic stream derivation: one master seed fans out into independent
/// streams keyed by a purpose label and integer coordinates (step, view, ...).
/// Every random draw in the engine goes through here, so a rerun with the same
/// seed replays the exact same streams regardless of thread count.
pub fn derive_rng(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([label.len() as u8]);
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
