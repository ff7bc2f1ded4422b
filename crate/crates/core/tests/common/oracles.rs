//! Independent reference implementations used by the tests.

#![allow(dead_code)]

use std::path::Path;

/// Rows (or columns) seen by a query at `i`: the `min(k, len)` consecutive
/// indices whose center is nearest to `i`, preferring the lower window on ties.
pub fn window_indices(i: usize, len: usize, k: usize) -> Vec<usize> {
    let size = k.min(len);
    let best = (0..=len - size)
        .min_by_key(|&s| {
            let center2 = 2 * s + size - 1;
            (2 * i as i64 - center2 as i64).abs()
        })
        .unwrap();
    (best..best + size).collect()
}

/// Brute-force neighborhood attention on `[n, h, w, c]` buffers.
pub fn neighborhood_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    heads: usize,
    kernel: usize,
) -> Vec<f64> {
    let d = c / heads;
    let at = |b: usize, y: usize, x: usize, ch: usize| ((b * h + y) * w + x) * c + ch;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for hd in 0..heads {
                    let mut keys = Vec::new();
                    for &ky in &window_indices(y, h, kernel) {
                        for &kx in &window_indices(x, w, kernel) {
                            keys.push((ky, kx));
                        }
                    }
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|&(ky, kx)| {
                            (0..d)
                                .map(|e| q[at(b, y, x, hd * d + e)] * k[at(b, ky, kx, hd * d + e)])
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for e in 0..d {
                        out[at(b, y, x, hd * d + e)] = keys
                            .iter()
                            .zip(&logits)
                            .map(|(&(ky, kx), l)| (l - m).exp() / z * v[at(b, ky, kx, hd * d + e)])
                            .sum();
                    }
                }
            }
        }
    }
    out
}

/// `x @ w + b` over rows of width `cin`.
pub fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>, cin: usize, cout: usize) -> Vec<f64> {
    let rows = x.len() / cin;
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                s += x[r * cin + i] * w[i * cout + o];
            }
            out[r * cout + o] = s;
        }
    }
    out
}

/// Bilinear sample of an `h x w x c` plane at normalized `(x, y)` in
/// `[-1, 1]`, pixel centers at `-1 + (2i + 1) / len`, edges clamped.
pub fn bilinear(src: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let pos = |t: f64, len: usize| ((t + 1.0) * len as f64 / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
    let (u, v) = (pos(x, w), pos(y, h));
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    (0..c)
        .map(|ch| {
            let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
            (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
        })
        .collect()
}

/// Naive orthonormal 2-D DFT of one real `h x w` plane; returns `(re, im)`
/// over the half spectrum `w / 2 + 1`.
pub fn dft2_half(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let wf = w / 2 + 1;
    let s = 1.0 / ((h * w) as f64).sqrt();
    let mut re = vec![0.0; h * wf];
    let mut im = vec![0.0; h * wf];
    for ky in 0..h {
        for kx in 0..wf {
            let (mut a, mut b) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                    a += plane[y * w + x] * ang.cos();
                    b += plane[y * w + x] * ang.sin();
                }
            }
            re[ky * wf + kx] = a * s;
            im[ky * wf + kx] = b * s;
        }
    }
    (re, im)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// PSNR of two 8-bit RGB PNG files, decoded without the crate's own loaders.
pub fn psnr_png(a: &Path, b: &Path) -> f64 {
    let a = image::open(a).unwrap().to_rgb8();
    let b = image::open(b).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), b.dimensions());
    let n = a.as_raw().len() as f64;
    let mse: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x as f64 / 255.0 - y as f64 / 255.0;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
