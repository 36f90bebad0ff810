use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::real::Real;

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(off: usize, rows: usize, cols: usize) -> Self {
        Self {
            off,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            off: self.off,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// `c += a @ b` (or `c = a @ b` when `overwrite`).
pub(crate) fn gemm_view<T: Real>(
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    c: &mut [T],
    cv: View,
    overwrite: bool,
) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    let beta = if overwrite { T::zero() } else { T::one() };
    T::gemm(
        av.rows,
        av.cols,
        bv.cols,
        &a[av.off..],
        av.rs,
        av.cs,
        &b[bv.off..],
        bv.rs,
        bv.cs,
        beta,
        &mut c[cv.off..],
        cv.rs,
        cv.cs,
    );
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (kernel - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub len_in: usize,
    pub c_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, o: usize, kk: usize) -> Option<usize> {
        let pos = (o * self.stride + kk * self.dil) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }
}

/// `cols[b, o, kk, ci] = x[b, o*s - p + kk*d, ci]`, zero outside.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let row = g.kernel * g.c_in;
    let mut cols = vec![T::zero(); g.batch * g.len_out * row];
    for b in 0..g.batch {
        let xb = &x[b * g.len_in * g.c_in..(b + 1) * g.len_in * g.c_in];
        for o in 0..g.len_out {
            let dst = &mut cols[(b * g.len_out + o) * row..(b * g.len_out + o + 1) * row];
            for kk in 0..g.kernel {
                if let Some(p) = g.src(o, kk) {
                    dst[kk * g.c_in..(kk + 1) * g.c_in]
                        .copy_from_slice(&xb[p * g.c_in..(p + 1) * g.c_in]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let row = g.kernel * g.c_in;
    for b in 0..g.batch {
        let xb = &mut dx[b * g.len_in * g.c_in..(b + 1) * g.len_in * g.c_in];
        for o in 0..g.len_out {
            let src = &cols[(b * g.len_out + o) * row..(b * g.len_out + o + 1) * row];
            for kk in 0..g.kernel {
                if let Some(p) = g.src(o, kk) {
                    for (d, &s) in xb[p * g.c_in..(p + 1) * g.c_in]
                        .iter_mut()
                        .zip(&src[kk * g.c_in..(kk + 1) * g.c_in])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh(u))
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = tanh(u);
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// `tanh` through one `exp`; libm's version is several times slower.
#[inline]
pub(crate) fn tanh<T: Real>(x: T) -> T {
    if x.abs() < T::lit(0.02) {
        let x2 = x * x;
        return x * (T::one() - x2 * (T::lit(1.0 / 3.0) - x2 * T::lit(2.0 / 15.0)));
    }
    let e = (x + x).exp();
    T::one() - T::lit(2.0) / (e + T::one())
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Rotary angles `pos * base^(-2i/dim)` laid out `[n, dim/2]`.
pub(crate) fn rope_table(n: usize, dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for p in 0..n {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (cos, sin)
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub(crate) const STFT_EPS: f64 = 1e-12;

pub(crate) struct Stft<T: Real> {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Stft<T> {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft).into_iter().map(T::lit).collect(),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn spectrum(&self, frame: &[T], buf: &mut [Complex<T>]) {
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, T::zero());
        }
        self.fwd.process(buf);
    }

    /// Magnitudes `[rows, frames, bins]` for `rows` signals of length `len`.
    pub fn forward(&self, x: &[T], rows: usize, len: usize) -> Vec<T> {
        let frames = self.frames(len);
        let bins = self.bins();
        let eps = T::lit(STFT_EPS);
        let mut out = Vec::with_capacity(rows * frames * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        for r in 0..rows {
            let sig = &x[r * len..(r + 1) * len];
            for f in 0..frames {
                self.spectrum(&sig[f * self.hop..f * self.hop + self.n_fft], &mut buf);
                out.extend(buf[..bins].iter().map(|c| (c.norm_sqr() + eps).sqrt()));
            }
        }
        out
    }

    pub fn backward(&self, x: &[T], mag: &[T], g: &[T], rows: usize, len: usize, dx: &mut [T]) {
        let frames = self.frames(len);
        let bins = self.bins();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        for r in 0..rows {
            let sig = &x[r * len..(r + 1) * len];
            for f in 0..frames {
                let start = f * self.hop;
                self.spectrum(&sig[start..start + self.n_fft], &mut buf);
                let base = (r * frames + f) * bins;
                for k in 0..self.n_fft {
                    buf[k] = if k < bins {
                        buf[k] * (g[base + k] / mag[base + k])
                    } else {
                        Complex::new(T::zero(), T::zero())
                    };
                }
                self.inv.process(&mut buf);
                let dst = &mut dx[r * len + start..r * len + start + self.n_fft];
                for ((d, c), &w) in dst.iter_mut().zip(&buf).zip(&self.window) {
                    *d = *d + w * c.re;
                }
            }
        }
    }
}
