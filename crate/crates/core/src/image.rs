//! Dense HWC image container generic over the scalar type, plus the handful
//! of resampling and filtering ops the engine needs. All filters here are
//! deterministic and run identically regardless of thread count.

use crate::math::Real;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<S> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<S>,
}

impl<S: Real> Image<S> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![S::zero(); h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: S) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), h * w * c, "image buffer size mismatch");
        Image { h, w, c, data }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut img = Self::zeros(h, w, c);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    *img.at_mut(i, j, ch) = f(i, j, ch);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, ch: usize) -> S {
        self.data[(i * self.w + j) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, ch: usize) -> &mut S {
        &mut self.data[(i * self.w + j) * self.c + ch]
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[S] {
        let base = (i * self.w + j) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [S] {
        let base = (i * self.w + j) * self.c;
        &mut self.data[base..base + self.c]
    }

    /// Copy of the sub-image starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        Image::from_fn(h, w, self.c, |i, j, ch| self.at(y0 + i, x0 + j, ch))
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "image shape mismatch");
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self * a + other * b`, elementwise.
    pub fn axpby(&self, a: S, other: &Self, b: S) -> Self {
        self.zip_map(other, |x, y| x * a + y * b)
    }

    pub fn scale(&self, a: S) -> Self {
        self.map(|x| x * a)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Image<T> {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    /// Fills every element with an independent standard normal draw, in
    /// row-major channel-interleaved order.
    pub fn fill_standard_normal(&mut self, rng: &mut impl Rng) {
        for v in &mut self.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = S::of(z);
        }
    }

    /// Separable Gaussian blur with symmetric (reflective) boundary handling.
    /// The kernel is normalized, so constant images are fixed points and the
    /// total mass of any image is preserved.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        let mut kernel = Vec::with_capacity(2 * radius + 1);
        let mut sum = 0.0;
        for k in 0..=2 * radius {
            let x = k as f64 - radius as f64;
            let v = (-0.5 * x * x / (sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let kernel: Vec<S> = kernel.into_iter().map(S::of).collect();

        // horizontal pass
        let mut tmp = Image::zeros(self.h, self.w, self.c);
        for i in 0..self.h {
            for j in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = S::zero();
                    for (k, &kv) in kernel.iter().enumerate() {
                        let jj = reflect(j as isize + k as isize - radius as isize, self.w);
                        acc = acc + kv * self.at(i, jj, ch);
                    }
                    *tmp.at_mut(i, j, ch) = acc;
                }
            }
        }
        // vertical pass
        let mut out = Image::zeros(self.h, self.w, self.c);
        for i in 0..self.h {
            for j in 0..self.w {
                for ch in 0..self.c {
                    let mut acc = S::zero();
                    for (k, &kv) in kernel.iter().enumerate() {
                        let ii = reflect(i as isize + k as isize - radius as isize, self.h);
                        acc = acc + kv * tmp.at(ii, j, ch);
                    }
                    *out.at_mut(i, j, ch) = acc;
                }
            }
        }
        out
    }

    /// Bilinear resize with half-pixel center alignment.
    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Self {
        if nh == self.h && nw == self.w {
            return self.clone();
        }
        let sy = self.h as f64 / nh as f64;
        let sx = self.w as f64 / nw as f64;
        let mut out = Image::zeros(nh, nw, self.c);
        for i in 0..nh {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let i0 = fy.floor() as usize;
            let i1 = (i0 + 1).min(self.h - 1);
            let ty = S::of(fy - i0 as f64);
            for j in 0..nw {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let j0 = fx.floor() as usize;
                let j1 = (j0 + 1).min(self.w - 1);
                let tx = S::of(fx - j0 as f64);
                for ch in 0..self.c {
                    let a = crate::math::lerp(self.at(i0, j0, ch), self.at(i0, j1, ch), tx);
                    let b = crate::math::lerp(self.at(i1, j0, ch), self.at(i1, j1, ch), tx);
                    *out.at_mut(i, j, ch) = crate::math::lerp(a, b, ty);
                }
            }
        }
        out
    }

    /// Catmull-Rom bicubic resize with half-pixel center alignment and
    /// clamped borders. Used when conditioning images move up a resolution
    /// rung; smoother than bilinear so it does not inject grid artifacts that
    /// the denoiser would mistake for detail.
    pub fn resize_bicubic(&self, nh: usize, nw: usize) -> Self {
        if nh == self.h && nw == self.w {
            return self.clone();
        }
        let sy = self.h as f64 / nh as f64;
        let sx = self.w as f64 / nw as f64;
        let mut out = Image::zeros(nh, nw, self.c);
        let mut wx = [S::zero(); 4];
        let mut wy = [S::zero(); 4];
        for i in 0..nh {
            let fy = (i as f64 + 0.5) * sy - 0.5;
            let iy = fy.floor();
            cubic_weights(fy - iy, &mut wy);
            for j in 0..nw {
                let fx = (j as f64 + 0.5) * sx - 0.5;
                let ix = fx.floor();
                cubic_weights(fx - ix, &mut wx);
                for ch in 0..self.c {
                    let mut acc = S::zero();
                    for (dy, &wyv) in wy.iter().enumerate() {
                        let ii = clamp_index(iy as isize + dy as isize - 1, self.h);
                        let mut row = S::zero();
                        for (dx, &wxv) in wx.iter().enumerate() {
                            let jj = clamp_index(ix as isize + dx as isize - 1, self.w);
                            row = row + wxv * self.at(ii, jj, ch);
                        }
                        acc = acc + wyv * row;
                    }
                    *out.at_mut(i, j, ch) = acc;
                }
            }
        }
        out
    }

    /// Exact box-mean downsample by an integer factor.
    pub fn downsample_box(&self, factor: usize) -> Self {
        assert!(factor >= 1 && self.h % factor == 0 && self.w % factor == 0);
        if factor == 1 {
            return self.clone();
        }
        let nh = self.h / factor;
        let nw = self.w / factor;
        let inv = S::of(1.0 / (factor * factor) as f64);
        let mut out = Image::zeros(nh, nw, self.c);
        for i in 0..nh {
            for j in 0..nw {
                for ch in 0..self.c {
                    let mut acc = S::zero();
                    for di in 0..factor {
                        for dj in 0..factor {
                            acc = acc + self.at(i * factor + di, j * factor + dj, ch);
                        }
                    }
                    *out.at_mut(i, j, ch) = acc * inv;
                }
            }
        }
        out
    }

    /// Resamples to the target size: exact box means when shrinking by an
    /// integer factor, bicubic otherwise.
    pub fn resample(&self, nh: usize, nw: usize) -> Self {
        if nh == self.h && nw == self.w {
            self.clone()
        } else if nh < self.h && self.h % nh == 0 && nw < self.w && self.w % nw == 0 && self.h / nh == self.w / nw {
            self.downsample_box(self.h / nh)
        } else {
            self.resize_bicubic(nh, nw)
        }
    }

    /// Writes an 8-bit PNG. One channel is written as grayscale, three as RGB.
    /// Quantization is round(clamp01(v) * 255), so identical floats always
    /// produce identical bytes.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: S| -> u8 { (crate::math::clamp01(v).as_f64() * 255.0).round() as u8 };
        let w = self.w as u32;
        let h = self.h as u32;
        let res = match self.c {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::save_buffer(path, &buf, w, h, image::ColorType::L8)
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::save_buffer(path, &buf, w, h, image::ColorType::Rgb8)
            }
            c => {
                return Err(Error::config(format!(
                    "cannot write {c}-channel image as PNG"
                )))
            }
        };
        res.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Catmull-Rom weights (a = -0.5) for fractional offset `t` in [0, 1),
/// applied to taps at offsets {-1, 0, 1, 2}.
fn cubic_weights<S: Real>(t: f64, w: &mut [S; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    w[0] = S::of(-0.5 * t3 + t2 - 0.5 * t);
    w[1] = S::of(1.5 * t3 - 2.5 * t2 + 1.0);
    w[2] = S::of(-1.5 * t3 + 2.0 * t2 + 0.5 * t);
    w[3] = S::of(0.5 * t3 - 0.5 * t2);
}
