use std::rc::Rc;

use super::{BackwardCtx, Var};
use crate::kernels::attention;
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Var {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value().map(f);
        Var::from_op(value, vec![self.clone()], move |ctx: &BackwardCtx<'_>| {
            let x = ctx.input(0).data();
            let y = ctx.value.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, g)| g * df(x[i], y[i]))
                .collect();
            vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            let neg = if ctx.needs[1] {
                Some(ctx.grad.scale(-1.0))
            } else {
                None
            };
            vec![Some(ctx.grad.clone()), neg]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(value, vec![self.clone(), other.clone()], |ctx| {
            let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.input(1), |g, b| g * b));
            let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.input(0), |g, a| g * a));
            vec![ga, gb]
        })
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.value().scale(s), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.scale(s))]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|v| v + s), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.clone())]
        })
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_bias(&self, bias: &Var) -> Var {
        let c = self.value().last_dim();
        assert_eq!(bias.shape(), &[c], "bias shape mismatch");
        let mut value = self.value().clone();
        let b = bias.value().data();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Var::from_op(value, vec![self.clone(), bias.clone()], |ctx| {
            let gb = ctx.needs[1].then(|| ctx.grad.sum_rows());
            vec![Some(ctx.grad.clone()), gb]
        })
    }

    /// Scales each channel of an `[N, H, W, C]` tensor by a per-sample `[N, C]` gate.
    pub fn mul_channels(&self, gate: &Var) -> Var {
        let (n, h, w, c) = self.value().dims4();
        assert_eq!(gate.shape(), &[n, c], "gate shape mismatch");
        let hw = h * w;
        let mut value = self.value().clone();
        {
            let g = gate.value().data();
            let out = value.data_mut();
            for b in 0..n {
                for p in 0..hw {
                    let off = (b * hw + p) * c;
                    for ch in 0..c {
                        out[off + ch] *= g[b * c + ch];
                    }
                }
            }
        }
        Var::from_op(value, vec![self.clone(), gate.clone()], move |ctx| {
            let gy = ctx.grad.data();
            let x = ctx.input(0).data();
            let g = ctx.input(1).data();
            let gx = ctx.needs[0].then(|| {
                let mut d = vec![0.0; gy.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let off = (b * hw + p) * c;
                        for ch in 0..c {
                            d[off + ch] = gy[off + ch] * g[b * c + ch];
                        }
                    }
                }
                Tensor::new(vec![n, h, w, c], d)
            });
            let gg = ctx.needs[1].then(|| {
                let mut d = vec![0.0; n * c];
                for b in 0..n {
                    for p in 0..hw {
                        let off = (b * hw + p) * c;
                        for ch in 0..c {
                            d[b * c + ch] += gy[off + ch] * x[off + ch];
                        }
                    }
                }
                Tensor::new(vec![n, c], d)
            });
            vec![gx, gg]
        })
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Var {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.item()))],
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Global average pool: `[N, H, W, C]` to `[N, C]`.
    pub fn mean_spatial(&self) -> Var {
        let (n, h, w, c) = self.value().dims4();
        let hw = h * w;
        let x = self.value().data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for p in 0..hw {
                let off = (b * hw + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += x[off + ch];
                }
            }
        }
        let inv = 1.0 / hw as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Var::from_op(Tensor::new(vec![n, c], out), vec![self.clone()], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0; n * hw * c];
            for b in 0..n {
                for p in 0..hw {
                    let off = (b * hw + p) * c;
                    for ch in 0..c {
                        d[off + ch] = g[b * c + ch] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, h, w, c], d))]
        })
    }

    /// `x @ w + b` over the trailing dimension; `w` is `[C_in, C_out]`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Var {
        let cin = self.value().last_dim();
        let (wi, cout) = match weight.shape() {
            [a, b] => (*a, *b),
            s => panic!("linear weight must be 2-D, got {s:?}"),
        };
        assert_eq!(wi, cin, "linear input width {cin} != weight rows {wi}");
        let m = self.value().rows();
        let mut out = vec![0.0; m * cout];
        gemm(m, cin, cout, self.value().data(), false, weight.value().data(), false, &mut out, 0.0);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let y = Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone(), weight.clone()],
            move |ctx| {
                let gy = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * cin];
                    gemm(m, cout, cin, gy, false, ctx.input(1).data(), true, &mut d, 0.0);
                    Tensor::new(ctx.input(0).shape().to_vec(), d)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; cin * cout];
                    gemm(cin, m, cout, ctx.input(0).data(), true, gy, false, &mut d, 0.0);
                    Tensor::new(vec![cin, cout], d)
                });
                vec![gx, gw]
            },
        );
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let c = self.value().last_dim();
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let x = self.value().data();
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = gamma.value().data();
        let b = beta.value().data();
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = row[ch] * g[ch] + b[ch];
            }
        }
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::new(shape.clone(), out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let gy = ctx.grad.data();
                let g = ctx.input(1).data();
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; gy.len()];
                    for r in 0..rows {
                        let o = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ch in 0..c {
                            let dxh = gy[o + ch] * g[ch];
                            m1 += dxh;
                            m2 += dxh * xhat[o + ch];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for ch in 0..c {
                            let dxh = gy[o + ch] * g[ch];
                            d[o + ch] = rstd[r] * (dxh - m1 - xhat[o + ch] * m2);
                        }
                    }
                    Tensor::new(shape.clone(), d)
                });
                let gg = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (row, xr) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            d[ch] += row[ch] * xr[ch];
                        }
                    }
                    Tensor::new(vec![c], d)
                });
                let gb = ctx.needs[2].then(|| ctx.grad.sum_rows());
                vec![gx, gg, gb]
            },
        )
    }

    /// Concatenates along the trailing dimension.
    pub fn concat_last(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let widths: Vec<usize> = parts.iter().map(|p| p.value().last_dim()).collect();
        for p in parts {
            assert_eq!(&p.shape()[..p.shape().len() - 1], lead, "concat leading dims differ");
        }
        let total: usize = widths.iter().sum();
        let rows = parts[0].value().rows();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let src = p.value().data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Var::from_op(Tensor::new(shape, out), parts.to_vec(), move |ctx| {
            let gy = ctx.grad.data();
            let mut off = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &wd) in widths.iter().enumerate() {
                if ctx.needs[i] {
                    let mut d = vec![0.0; rows * wd];
                    for r in 0..rows {
                        d[r * wd..(r + 1) * wd]
                            .copy_from_slice(&gy[r * total + off..r * total + off + wd]);
                    }
                    grads.push(Some(Tensor::new(ctx.input(i).shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                off += wd;
            }
            grads
        })
    }

    /// Channels `start..start + len` of the trailing dimension.
    pub fn slice_last(&self, start: usize, len: usize) -> Var {
        let c = self.value().last_dim();
        assert!(start + len <= c, "slice {start}+{len} exceeds width {c}");
        let rows = self.value().rows();
        let x = self.value().data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&x[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_shape = self.shape().to_vec();
        Var::from_op(Tensor::new(shape, out), vec![self.clone()], move |ctx| {
            let gy = ctx.grad.data();
            let mut d = vec![0.0; rows * c];
            for r in 0..rows {
                d[r * c + start..r * c + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(in_shape.clone(), d))]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var {
        let in_shape = self.shape().to_vec();
        Var::from_op(self.value().clone().reshape(shape), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.clone().reshape(in_shape.clone()))]
        })
    }

    /// Selects rows of the `[rows, C]` view of `self`; gradients scatter-add back.
    pub fn gather_rows(&self, index: Rc<[usize]>) -> Var {
        let c = self.value().last_dim();
        let src_rows = self.value().rows();
        let x = self.value().data();
        let mut out = vec![0.0; index.len() * c];
        for (o, &i) in index.iter().enumerate() {
            assert!(i < src_rows, "gather index {i} out of range {src_rows}");
            out[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
        }
        let in_shape = self.shape().to_vec();
        let m = index.len();
        Var::from_op(Tensor::new(vec![m, c], out), vec![self.clone()], move |ctx| {
            let gy = ctx.grad.data();
            let mut d = vec![0.0; src_rows * c];
            for (o, &i) in index.iter().enumerate() {
                for ch in 0..c {
                    d[i * c + ch] += gy[o * c + ch];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), d))]
        })
    }

    /// Weighted sum over consecutive groups of `group` rows: `[M * group, C]` to `[M, C]`.
    pub fn group_weighted_sum(&self, weights: Rc<[f64]>, group: usize) -> Var {
        let c = self.value().last_dim();
        let rows = self.value().rows();
        assert_eq!(rows % group, 0);
        assert_eq!(weights.len(), rows);
        let m = rows / group;
        let x = self.value().data();
        let mut out = vec![0.0; m * c];
        for r in 0..rows {
            let wgt = weights[r];
            let dst = (r / group) * c;
            for ch in 0..c {
                out[dst + ch] += wgt * x[r * c + ch];
            }
        }
        let in_shape = self.shape().to_vec();
        Var::from_op(Tensor::new(vec![m, c], out), vec![self.clone()], move |ctx| {
            let gy = ctx.grad.data();
            let mut d = vec![0.0; rows * c];
            for r in 0..rows {
                let wgt = weights[r];
                let src = (r / group) * c;
                for ch in 0..c {
                    d[r * c + ch] = wgt * gy[src + ch];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), d))]
        })
    }

    /// Multi-head neighborhood attention on `[N, H, W, C]` query/key/value maps.
    pub fn neighborhood_attention(q: &Var, k: &Var, v: &Var, heads: usize, kernel: usize) -> Var {
        let dims = q.value().dims4();
        assert_eq!(k.value().dims4(), dims);
        assert_eq!(v.value().dims4(), dims);
        let geom = attention::Geometry::new(dims, heads, kernel);
        let (out, probs) = attention::forward(
            q.value().data(),
            k.value().data(),
            v.value().data(),
            &geom,
        );
        let (n, h, w, c) = dims;
        Var::from_op(
            Tensor::new(vec![n, h, w, c], out),
            vec![q.clone(), k.clone(), v.clone()],
            move |ctx| {
                let (dq, dk, dv) = attention::backward(
                    ctx.input(0).data(),
                    ctx.input(1).data(),
                    ctx.input(2).data(),
                    &probs,
                    ctx.grad.data(),
                    &geom,
                );
                let shape = vec![n, h, w, c];
                vec![
                    ctx.needs[0].then(|| Tensor::new(shape.clone(), dq)),
                    ctx.needs[1].then(|| Tensor::new(shape.clone(), dk)),
                    ctx.needs[2].then(|| Tensor::new(shape.clone(), dv)),
                ]
            },
        )
    }
}
