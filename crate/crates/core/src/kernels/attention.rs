//! Neighborhood attention kernels.
//!
//! Each query attends to the `k x k` window centered on it. Near borders the
//! window is shifted inward so it keeps `k` rows and columns whenever the grid
//! is at least that large; along an axis shorter than `k` the window spans the
//! whole axis.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub kernel: usize,
}

impl Geometry {
    pub fn new((n, h, w, c): (usize, usize, usize, usize), heads: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "neighborhood kernel must be odd, got {kernel}");
        assert!(heads > 0 && c % heads == 0, "{c} channels do not split into {heads} heads");
        Self {
            n,
            h,
            w,
            c,
            heads,
            kernel,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    pub fn window_h(&self) -> usize {
        self.kernel.min(self.h)
    }

    pub fn window_w(&self) -> usize {
        self.kernel.min(self.w)
    }

    /// Keys per query.
    pub fn window(&self) -> usize {
        self.window_h() * self.window_w()
    }

    /// Length of the attention-probability buffer.
    pub fn probs_len(&self) -> usize {
        self.n * self.h * self.w * self.heads * self.window()
    }
}

/// First index and length of the window around `i` on an axis of length `len`.
pub fn window_start(i: usize, len: usize, kernel: usize) -> (usize, usize) {
    let size = kernel.min(len);
    let start = i.saturating_sub(kernel / 2).min(len - size);
    (start, size)
}

/// Forward pass; returns the output map and the per-query attention weights laid
/// out as `[N, H, W, heads, window]`.
pub fn forward<T: Float>(q: &[T], k: &[T], v: &[T], g: &Geometry) -> (Vec<T>, Vec<T>) {
    let Geometry { n, h, w, c, heads, kernel } = *g;
    let d = g.head_dim();
    let win = g.window();
    let scale = T::from(1.0 / (d as f64).sqrt()).unwrap();
    let mut out = vec![T::zero(); n * h * w * c];
    let mut probs = vec![T::zero(); g.probs_len()];
    let mut logits = vec![T::zero(); win];

    for b in 0..n {
        for i in 0..h {
            let (r0, rh) = window_start(i, h, kernel);
            for j in 0..w {
                let (c0, cw) = window_start(j, w, kernel);
                let qpos = (b * h + i) * w + j;
                for hd in 0..heads {
                    let qv = &q[qpos * c + hd * d..qpos * c + (hd + 1) * d];
                    let mut max = T::neg_infinity();
                    for (t, logit) in logits.iter_mut().enumerate() {
                        let kpos = (b * h + r0 + t / cw) * w + c0 + t % cw;
                        let kv = &k[kpos * c + hd * d..kpos * c + (hd + 1) * d];
                        let dot = qv.iter().zip(kv).fold(T::zero(), |acc, (&a, &bb)| acc + a * bb);
                        *logit = dot * scale;
                        max = max.max(*logit);
                    }
                    debug_assert_eq!(rh * cw, win);
                    let mut denom = T::zero();
                    for logit in logits.iter_mut() {
                        *logit = (*logit - max).exp();
                        denom = denom + *logit;
                    }
                    let pbase = (qpos * heads + hd) * win;
                    let o = &mut out[qpos * c + hd * d..qpos * c + (hd + 1) * d];
                    for (t, logit) in logits.iter().enumerate() {
                        let p = *logit / denom;
                        probs[pbase + t] = p;
                        let kpos = (b * h + r0 + t / cw) * w + c0 + t % cw;
                        let vv = &v[kpos * c + hd * d..kpos * c + (hd + 1) * d];
                        for (oo, &x) in o.iter_mut().zip(vv) {
                            *oo = *oo + p * x;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k`, `v` given the output cotangent.
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    g: &Geometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Geometry { n, h, w, c, heads, kernel } = *g;
    let d = g.head_dim();
    let win = g.window();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; win];

    for b in 0..n {
        for i in 0..h {
            let (r0, _) = window_start(i, h, kernel);
            for j in 0..w {
                let (c0, cw) = window_start(j, w, kernel);
                let qpos = (b * h + i) * w + j;
                for hd in 0..heads {
                    let lo = hd * d;
                    let go = &gout[qpos * c + lo..qpos * c + lo + d];
                    let pbase = (qpos * heads + hd) * win;
                    let p = &probs[pbase..pbase + win];
                    let mut weighted = 0.0;
                    for t in 0..win {
                        let kpos = (b * h + r0 + t / cw) * w + c0 + t % cw;
                        let vv = &v[kpos * c + lo..kpos * c + lo + d];
                        dp[t] = go.iter().zip(vv).map(|(a, b)| a * b).sum();
                        weighted += p[t] * dp[t];
                        let dvv = &mut dv[kpos * c + lo..kpos * c + lo + d];
                        for (x, gg) in dvv.iter_mut().zip(go) {
                            *x += p[t] * gg;
                        }
                    }
                    for t in 0..win {
                        let ds = p[t] * (dp[t] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kpos = (b * h + r0 + t / cw) * w + c0 + t % cw;
                        for e in 0..d {
                            dq[qpos * c + lo + e] += ds * k[kpos * c + lo + e];
                            dk[kpos * c + lo + e] += ds * q[qpos * c + lo + e];
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
