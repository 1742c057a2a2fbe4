//! Radix-2 2D FFT and a direct DFT.
//!
//! Butterflies run in `f64` and are rounded to `f32` only at the public
//! [`ComplexGrid`] boundary. Forward transforms are unnormalized; inverse
//! transforms carry the `1/(H·W)` factor.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H x W` complex grid stored as interleaved `(re, im)` `f32` pairs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ComplexGrid {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * h * w {
            return Err(Error::invalid(
                "complex_grid",
                format!("{h}x{w} grid needs {} floats, got {}", 2 * h * w, data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_complex(h: usize, w: usize, values: &[Complex64]) -> Self {
        let mut data = Vec::with_capacity(2 * values.len());
        for c in values {
            data.push(c.re as f32);
            data.push(c.im as f32);
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.w + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.data
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0] as f64, p[1] as f64))
            .collect()
    }

    pub fn real(&self) -> Tensor {
        let re = self.data.iter().step_by(2).copied().collect();
        Tensor::new(vec![self.h, self.w], re).expect("grid extents are positive")
    }

    pub fn max_abs_imag(&self) -> f32 {
        self.data
            .iter()
            .skip(1)
            .step_by(2)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h.is_power_of_two() && w.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo { op, h, w })
    }
}

/// In-place iterative radix-2 transform of one contiguous or strided line.
fn fft_line(buf: &mut [Complex64], inverse: bool, twiddles: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let mut tw = twiddles[k * step];
                if inverse {
                    tw = tw.conj();
                }
                let a = buf[start + k];
                let b = buf[start + k + half] * tw;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// `e^{-2πik/n}` for `k < n/2`.
fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, -std::f64::consts::TAU * k as f64 / n as f64))
        .collect()
}

/// 2D transform of a row-major `h x w` buffer in place. Extents must be powers of two.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let tw_w = twiddles(w);
    for row in buf.chunks_exact_mut(w) {
        fft_line(row, inverse, &tw_w);
    }
    let tw_h = twiddles(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fft_line(&mut col, inverse, &tw_h);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Spectrum of a real `h x w` plane in `f64`.
pub(crate) fn real_spectrum(plane: &[f32], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    fft2_in_place(&mut buf, h, w, false);
    buf
}

pub fn fft2(input: &Tensor) -> Result<ComplexGrid> {
    let [h, w] = input.dims2()?;
    check_pow2("fft2", h, w)?;
    let spec = real_spectrum(input.data(), h, w);
    Ok(ComplexGrid::from_complex(h, w, &spec))
}

pub fn fft2_complex(input: &ComplexGrid) -> Result<ComplexGrid> {
    check_pow2("fft2", input.h, input.w)?;
    let mut buf = input.to_complex();
    fft2_in_place(&mut buf, input.h, input.w, false);
    Ok(ComplexGrid::from_complex(input.h, input.w, &buf))
}

pub fn ifft2(input: &ComplexGrid) -> Result<ComplexGrid> {
    check_pow2("ifft2", input.h, input.w)?;
    let mut buf = input.to_complex();
    fft2_in_place(&mut buf, input.h, input.w, true);
    Ok(ComplexGrid::from_complex(input.h, input.w, &buf))
}

/// Direct `O((HW)^2)` DFT in `f64`, valid for any extents.
pub fn dft2(input: &ComplexGrid, inverse: bool) -> ComplexGrid {
    let (h, w) = (input.h, input.w);
    let src = input.to_complex();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = sign
                        * std::f64::consts::TAU
                        * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += src[y * w + x] * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = if inverse { acc / (h * w) as f64 } else { acc };
        }
    }
    ComplexGrid::from_complex(h, w, &out)
}

/// Real plane as a complex grid with zero imaginary part.
pub fn complex_from_real(input: &Tensor) -> Result<ComplexGrid> {
    let [h, w] = input.dims2()?;
    let mut data = Vec::with_capacity(2 * h * w);
    for &v in input.data() {
        data.push(v);
        data.push(0.0);
    }
    ComplexGrid::new(h, w, data)
}

/// Moves the zero frequency from `(0, 0)` to `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn fftshift<T: Copy>(values: &[T], h: usize, w: usize) -> Vec<T> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = values.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + ch) % h) * w + (x + cw) % w] = values[y * w + x];
        }
    }
    out
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy>(values: &[T], h: usize, w: usize) -> Vec<T> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = values.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = values[((y + ch) % h) * w + (x + cw) % w];
        }
    }
    out
}
