//! Orthonormal 2-D real FFTs over the spatial axes of `[N, H, W, C]` maps.
//!
//! The half spectrum has `W / 2 + 1` columns and is stored as `[N, H, W/2+1, 2C]`
//! with real parts in channels `0..C` and imaginary parts in `C..2C`.

use num_traits::{Float, FromPrimitive};
use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `kw` in the full spectrum.
fn multiplicity(kw: usize, w: usize) -> usize {
    if kw == 0 || (w.is_multiple_of(2) && kw == w / 2) {
        1
    } else {
        2
    }
}

struct Plans<T: FftNum> {
    row: std::sync::Arc<dyn rustfft::Fft<T>>,
    col: std::sync::Arc<dyn rustfft::Fft<T>>,
}

impl<T: FftNum> Plans<T> {
    fn new(h: usize, w: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        if inverse {
            Self {
                row: planner.plan_fft_inverse(w),
                col: planner.plan_fft_inverse(h),
            }
        } else {
            Self {
                row: planner.plan_fft_forward(w),
                col: planner.plan_fft_forward(h),
            }
        }
    }

    /// Unnormalized in-place 2-D transform of an `h x w` row-major plane.
    fn run(&self, plane: &mut [Complex<T>], h: usize, w: usize, column: &mut Vec<Complex<T>>) {
        for row in plane.chunks_exact_mut(w) {
            self.row.process(row);
        }
        column.resize(h, Complex::new(T::zero(), T::zero()));
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            self.col.process(column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

fn norm<T: Float + FromPrimitive>(h: usize, w: usize) -> T {
    T::from_f64(1.0 / ((h * w) as f64).sqrt()).unwrap()
}

/// Forward real FFT: `[N, H, W, C]` to `[N, H, W/2+1, 2C]`.
pub fn rfft2<T: FftNum + Float>(x: &[T], (n, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let wf = half_width(w);
    let s: T = norm(h, w);
    let plans = Plans::new(h, w, false);
    let mut out = vec![T::zero(); n * h * wf * 2 * c];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut column = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                plane[p] = Complex::new(x[(b * h * w + p) * c + ch], T::zero());
            }
            plans.run(&mut plane, h, w, &mut column);
            for y in 0..h {
                for kw in 0..wf {
                    let z = plane[y * w + kw];
                    let o = ((b * h + y) * wf + kw) * 2 * c;
                    out[o + ch] = z.re * s;
                    out[o + c + ch] = z.im * s;
                }
            }
        }
    }
    out
}

/// Shared body of the two half-spectrum-to-real maps. `weighted` applies the
/// Hermitian column multiplicities (inverse transform); without it this is the
/// adjoint of [`rfft2`].
fn half_to_real<T: FftNum + Float>(
    z: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    weighted: bool,
) -> Vec<T> {
    let wf = half_width(w);
    assert_eq!(z.len(), n * h * wf * 2 * c, "half spectrum has the wrong size");
    let s: T = norm(h, w);
    let plans = Plans::new(h, w, true);
    let mut out = vec![T::zero(); n * h * w * c];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut column = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            plane.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            for y in 0..h {
                for kw in 0..wf {
                    let o = ((b * h + y) * wf + kw) * 2 * c;
                    let m = if weighted {
                        T::from(multiplicity(kw, w)).unwrap()
                    } else {
                        T::one()
                    };
                    plane[y * w + kw] = Complex::new(z[o + ch] * m, z[o + c + ch] * m);
                }
            }
            plans.run(&mut plane, h, w, &mut column);
            for p in 0..h * w {
                out[(b * h * w + p) * c + ch] = plane[p].re * s;
            }
        }
    }
    out
}

/// Inverse real FFT: `[N, H, W/2+1, 2C]` to `[N, H, W, C]`.
pub fn irfft2<T: FftNum + Float>(z: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    half_to_real(z, dims, true)
}

/// Adjoint of [`rfft2`] as a real-linear map.
pub fn rfft2_adjoint(g: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    half_to_real(g, dims, false)
}

/// Adjoint of [`irfft2`] as a real-linear map.
pub fn irfft2_adjoint(g: &[f64], (n, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
    let wf = half_width(w);
    let mut out = rfft2(g, (n, h, w, c));
    for b in 0..n {
        for y in 0..h {
            for kw in 0..wf {
                let m = multiplicity(kw, w) as f64;
                if m != 1.0 {
                    let o = ((b * h + y) * wf + kw) * 2 * c;
                    out[o..o + 2 * c].iter_mut().for_each(|v| *v *= m);
                }
            }
        }
    }
    out
}
