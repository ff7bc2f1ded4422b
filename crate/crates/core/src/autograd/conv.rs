//! 2-D convolution on channels-last maps via chunked im2col + GEMM.

use super::Var;
use crate::tensor::{gemm, Tensor};

/// Column buffers are capped at roughly this many elements.
const COL_BUDGET: usize = 1 << 20;

pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "input {len} too small for kernel {kernel} with pad {pad}");
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.wo * self.patch()).max(1)).clamp(1, self.ho)
    }

    /// Fills `col` with the patches of output rows `y0..y1` of sample `x`.
    fn im2col(&self, x: &[f64], y0: usize, y1: usize, col: &mut Vec<f64>) {
        let patch = self.patch();
        col.clear();
        col.resize((y1 - y0) * self.wo * patch, 0.0);
        for oy in y0..y1 {
            for ox in 0..self.wo {
                let row = ((oy - y0) * self.wo + ox) * patch;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = row + (ky * self.k + kx) * self.cin;
                        col[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
    }

    /// Scatter-adds column gradients back onto the input-gradient plane `dx`.
    fn col2im(&self, dcol: &[f64], y0: usize, y1: usize, dx: &mut [f64]) {
        let patch = self.patch();
        for oy in y0..y1 {
            for ox in 0..self.wo {
                let row = ((oy - y0) * self.wo + ox) * patch;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = row + (ky * self.k + kx) * self.cin;
                        for c in 0..self.cin {
                            dx[dst + c] += dcol[src + c];
                        }
                    }
                }
            }
        }
    }
}

impl Var {
    /// Zero-padded convolution; `weight` is `[K, K, C_in, C_out]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let (n, h, w, cin) = self.value().dims4();
        let (k, cout) = match weight.shape() {
            [k1, k2, ci, co] if k1 == k2 && *ci == cin => (*k1, *co),
            s => panic!("conv weight {s:?} incompatible with {cin} input channels"),
        };
        let g = Geom {
            h,
            w,
            cin,
            k,
            stride,
            pad,
            ho: conv_output_len(h, k, stride, pad),
            wo: conv_output_len(w, k, stride, pad),
        };
        let patch = g.patch();
        let in_plane = h * w * cin;
        let out_plane = g.ho * g.wo * cout;
        let chunk = g.rows_per_chunk();

        let mut out = vec![0.0; n * out_plane];
        let mut col = Vec::new();
        let wd = weight.value().data();
        for b in 0..n {
            let xs = &self.value().data()[b * in_plane..(b + 1) * in_plane];
            let mut y0 = 0;
            while y0 < g.ho {
                let y1 = (y0 + chunk).min(g.ho);
                g.im2col(xs, y0, y1, &mut col);
                let rows = (y1 - y0) * g.wo;
                let o = b * out_plane + y0 * g.wo * cout;
                gemm(rows, patch, cout, &col, false, wd, false, &mut out[o..o + rows * cout], 0.0);
                y0 = y1;
            }
        }

        let y = Var::from_op(
            Tensor::new(vec![n, g.ho, g.wo, cout], out),
            vec![self.clone(), weight.clone()],
            move |ctx| {
                let gy = ctx.grad.data();
                let x = ctx.input(0).data();
                let wd = ctx.input(1).data();
                let mut dx = ctx.needs[0].then(|| vec![0.0; n * in_plane]);
                let mut dw = ctx.needs[1].then(|| vec![0.0; patch * cout]);
                let mut col = Vec::new();
                let mut dcol = Vec::new();
                for b in 0..n {
                    let xs = &x[b * in_plane..(b + 1) * in_plane];
                    let mut y0 = 0;
                    while y0 < g.ho {
                        let y1 = (y0 + chunk).min(g.ho);
                        let rows = (y1 - y0) * g.wo;
                        let o = b * out_plane + y0 * g.wo * cout;
                        let gys = &gy[o..o + rows * cout];
                        if let Some(dw) = dw.as_mut() {
                            g.im2col(xs, y0, y1, &mut col);
                            gemm(patch, rows, cout, &col, true, gys, false, dw, 1.0);
                        }
                        if let Some(dx) = dx.as_mut() {
                            dcol.clear();
                            dcol.resize(rows * patch, 0.0);
                            gemm(rows, cout, patch, gys, false, wd, true, &mut dcol, 0.0);
                            g.col2im(&dcol, y0, y1, &mut dx[b * in_plane..(b + 1) * in_plane]);
                        }
                        y0 = y1;
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(vec![n, h, w, cin], d)),
                    dw.map(|d| Tensor::new(vec![k, k, cin, cout], d)),
                ]
            },
        );
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, h, wd, cin) = x.dims4();
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let ho = conv_output_len(h, k, stride, pad);
        let wo = conv_output_len(wd, k, stride, pad);
        let mut out = Tensor::zeros(vec![n, ho, wo, cout]);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.data()[((b * h + iy as usize) * wd + ix as usize) * cin + ci]
                                        * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out.data_mut()[((b * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn(vec![2, 7, 6, 3], |i| (i as f64 * 0.13).sin());
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (3, 2, 1), (1, 1, 0)] {
            let w = Tensor::from_fn(vec![k, k, 3, 5], |i| (i as f64 * 0.29).cos());
            let got = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), None, s, p);
            assert!(got.value().max_abs_diff(&reference(&x, &w, s, p)) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::from_fn(vec![1, 5, 4, 2], |i| (i as f64 * 0.41).sin());
        let w = Tensor::from_fn(vec![3, 3, 2, 3], |i| (i as f64 * 0.23).cos());
        let r = Tensor::from_fn(vec![1, 3, 2, 3], |i| (i as f64 * 0.77).sin());
        let f = |x: &Tensor, w: &Tensor| {
            reference(x, w, 2, 1).zip_map(&r, |a, b| a * b).sum()
        };
        let (xv, wv) = (Var::leaf(x.clone()), Var::leaf(w.clone()));
        let g = xv.conv2d(&wv, None, 2, 1).mul(&Var::constant(r.clone())).sum().backward();
        let eps = 1e-6;
        for i in 0..x.numel() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (f(&p, &w) - f(&m, &w)) / (2.0 * eps);
            assert!((g.get(&xv).unwrap().data()[i] - num).abs() < 1e-7);
        }
        for i in 0..w.numel() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (f(&x, &p) - f(&x, &m)) / (2.0 * eps);
            assert!((g.get(&wv).unwrap().data()[i] - num).abs() < 1e-7);
        }
    }
}
