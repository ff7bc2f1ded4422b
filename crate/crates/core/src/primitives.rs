//! Spectral transform, fast Fourier convolution, channel attention and
//! neighborhood attention blocks, plus a finite-difference gradient checker.
//!
//! All blocks take and return `[N, H, W, C]` variables and read their weights
//! from a [`Scope`].

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Error, Result};
use crate::kernels::attention;
use crate::params::{Binder, ParamStore, Scope};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NabConfig {
    pub kernel: usize,
    pub heads: usize,
}

impl Default for NabConfig {
    fn default() -> Self {
        Self { kernel: 7, heads: 4 }
    }
}

impl NabConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!(
                "neighborhood kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{channels} channels do not split into {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn channels_per_head(&self, channels: usize) -> usize {
        channels / self.heads
    }
}

/// Real FFT over space, pointwise linear map on the stacked real/imaginary
/// channels (plus ReLU when `nonlinear`), inverse real FFT.
pub fn spectral_transform(s: &Scope, x: &Var, cout: usize, nonlinear: bool) -> Result<Var> {
    let (_, _, w, c) = x.value().dims4();
    ensure!(x.value().is_finite(), "spectral transform input is not finite");
    let z = s.linear(&x.rfft2(), 2 * c, 2 * cout, true);
    let z = if nonlinear { z.relu() } else { z };
    Ok(z.irfft2(w))
}

/// Channels routed to the global branch for a given ratio.
pub fn global_channels(c: usize, ratio: f64) -> Result<usize> {
    ensure!((0.0..=1.0).contains(&ratio), "global ratio {ratio} outside [0, 1]");
    let g = c as f64 * ratio;
    ensure!(
        (g - g.round()).abs() < 1e-9,
        "{c} channels cannot be split with global ratio {ratio}"
    );
    Ok(g.round() as usize)
}

/// Fast Fourier convolution: local (3x3 conv) and global (spectral) branches
/// with all four cross paths, each output branch layer-normalized and ReLU'd.
pub fn ffc_block(s: &Scope, x: &Var, cout: usize, global_ratio: f64, nonlinear: bool) -> Result<Var> {
    let cin = x.value().last_dim();
    let (gin, gout) = (global_channels(cin, global_ratio)?, global_channels(cout, global_ratio)?);
    let (lin, lout) = (cin - gin, cout - gout);
    let xl = (lin > 0).then(|| x.slice_last(0, lin));
    let xg = (gin > 0).then(|| x.slice_last(lin, gin));

    let sum = |parts: Vec<Var>| parts.into_iter().reduce(|a, b| a.add(&b));
    let mut outs = Vec::new();
    if lout > 0 {
        let mut parts = Vec::new();
        if let Some(xl) = &xl {
            parts.push(s.sub("l2l").conv(xl, 3, lin, lout, 1, 1));
        }
        if let Some(xg) = &xg {
            parts.push(s.sub("g2l").conv(xg, 3, gin, lout, 1, 1));
        }
        let y = sum(parts).expect("ffc has at least one input channel");
        outs.push(s.sub("norm_l").layer_norm(&y, lout).relu());
    }
    if gout > 0 {
        let mut parts = Vec::new();
        if let Some(xl) = &xl {
            parts.push(s.sub("l2g").conv(xl, 3, lin, gout, 1, 1));
        }
        if let Some(xg) = &xg {
            parts.push(spectral_transform(&s.sub("g2g"), xg, gout, nonlinear)?);
        }
        let y = sum(parts).expect("ffc has at least one input channel");
        outs.push(s.sub("norm_g").layer_norm(&y, gout).relu());
    }
    Ok(Var::concat_last(&outs))
}

/// Squeeze-and-excitation gate: pool, bottleneck MLP, sigmoid, rescale.
pub fn channel_attention(s: &Scope, x: &Var, reduction: usize) -> Var {
    let c = x.value().last_dim();
    let hidden = (c / reduction.max(1)).max(1);
    let pooled = x.mean_spatial();
    let h = s.sub("fc1").linear(&pooled, c, hidden, true).relu();
    let gate = s.sub("fc2").linear(&h, hidden, c, true).sigmoid();
    x.mul_channels(&gate)
}

fn qkv(s: &Scope, x: &Var, c: usize) -> (Var, Var, Var) {
    let t = s.sub("qkv").linear(x, c, 3 * c, true);
    (t.slice_last(0, c), t.slice_last(c, c), t.slice_last(2 * c, c))
}

/// Multi-head attention over the border-clamped `k x k` window of every
/// position, followed by an output projection.
pub fn neighborhood_attention(s: &Scope, x: &Var, cfg: &NabConfig) -> Result<Var> {
    let c = x.value().last_dim();
    cfg.validate(c)?;
    let (q, k, v) = qkv(s, x, c);
    let y = Var::neighborhood_attention(&q, &k, &v, cfg.heads, cfg.kernel);
    Ok(s.sub("proj").linear(&y, c, c, true))
}

/// Attention weights of [`neighborhood_attention`] laid out as
/// `[N, H, W, heads, window]`, where `window` is the clamped key count.
pub fn neighborhood_attention_weights(s: &Scope, x: &Var, cfg: &NabConfig) -> Result<Tensor> {
    let (n, h, w, c) = x.value().dims4();
    cfg.validate(c)?;
    let (q, k, v) = qkv(s, x, c);
    let geom = attention::Geometry::new((n, h, w, c), cfg.heads, cfg.kernel);
    let (_, probs) = attention::forward(q.value().data(), k.value().data(), v.value().data(), &geom);
    Ok(Tensor::new(vec![n, h, w, cfg.heads, geom.window()], probs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Fails naming the worst parameter if any entry exceeds `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        match self.worst() {
            Some(e) if e.rel_err > tol || !e.rel_err.is_finite() => Err(Error::Validation(format!(
                "gradient check failed for `{}`[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e} > {tol:.1e}",
                e.name, e.index, e.analytic, e.numeric, e.rel_err
            ))),
            _ => Ok(()),
        }
    }
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Compares analytic gradients of the scalar `f` against central differences
/// for up to `per_param` randomly chosen elements of each named parameter.
///
/// `f` must build the same graph for a training and a frozen binder. Inputs
/// can be checked by storing them as parameters.
pub fn grad_check(
    store: &mut ParamStore,
    names: &[&str],
    per_param: usize,
    eps: f64,
    seed: u64,
    f: impl Fn(&Binder) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let binder = Binder::train(store);
        let loss = f(&binder)?;
        ensure!(loss.value().numel() == 1, "gradient check needs a scalar loss");
        let g = loss.backward();
        binder.grads(&g)
    };
    let eval = |s: &ParamStore| -> Result<f64> { Ok(f(&Binder::frozen(s))?.value().item()) };
    let mut rng = SeededRng::new(seed);
    let mut report = GradCheckReport::default();
    for &name in names {
        let numel = store
            .get(name)
            .ok_or_else(|| Error::Validation(format!("no parameter `{name}`")))?
            .value
            .numel();
        let grad = analytic
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(vec![numel]));
        let mut idx: Vec<usize> = (0..numel).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_param);
        idx.sort_unstable();
        for i in idx {
            let orig = store.get(name).unwrap().value.data()[i];
            store.get_mut(name).unwrap().value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(name).unwrap().value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            report.entries.push(GradCheckEntry {
                name: name.to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.range_f64(-1.0, 1.0))
    }

    #[test]
    fn channel_attention_hand_computation() {
        let mut store = ParamStore::new(0);
        store.insert("ca.fc1.w", Tensor::new(vec![2, 1], vec![1.0, -1.0]));
        store.insert("ca.fc1.b", Tensor::new(vec![1], vec![0.5]));
        store.insert("ca.fc2.w", Tensor::new(vec![1, 2], vec![2.0, -3.0]));
        store.insert("ca.fc2.b", Tensor::new(vec![2], vec![0.0, 1.0]));
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 0.0, 2.0, 1.0, 3.0, 1.0, 2.0, 2.0]);
        let binder = Binder::frozen(&store);
        let y = channel_attention(&binder.scope("ca"), &Var::constant(x.clone()), 2);
        // pool = (2, 1); hidden = relu(2 - 1 + 0.5) = 1.5; gate = sigmoid(3, -3.5)
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = [sig(3.0), sig(-3.5)];
        for (i, v) in y.value().data().iter().enumerate() {
            assert!((v - x.data()[i] * gate[i % 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_open_gate_and_zero_input() {
        let mut store = ParamStore::new(1);
        let x = Var::constant(random(&[1, 3, 3, 4], 2));
        {
            let b = Binder::init(&mut store);
            channel_attention(&b.scope("ca"), &x, 2);
        }
        store.set("ca.fc2.b", Tensor::full(vec![4], 40.0));
        store.set("ca.fc2.w", Tensor::zeros(vec![2, 4]));
        let b = Binder::frozen(&store);
        let y = channel_attention(&b.scope("ca"), &x, 2);
        assert!(y.value().max_abs_diff(x.value()) < 1e-6);
        let zero = Var::constant(Tensor::zeros(vec![1, 3, 3, 4]));
        assert_eq!(channel_attention(&b.scope("ca"), &zero, 2).value().sum(), 0.0);
    }

    #[test]
    fn spectral_identity_weights_round_trip() {
        let mut store = ParamStore::new(0);
        let mut eye = Tensor::zeros(vec![6, 6]);
        for i in 0..6 {
            eye.data_mut()[i * 6 + i] = 1.0;
        }
        store.insert("st.w", eye);
        store.insert("st.b", Tensor::zeros(vec![6]));
        let x = random(&[2, 6, 8, 3], 4);
        let b = Binder::frozen(&store);
        let y = spectral_transform(&b.scope("st"), &Var::constant(x.clone()), 3, false).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
        let bad = Tensor::full(vec![1, 2, 2, 3], f64::NAN);
        assert!(spectral_transform(&b.scope("st"), &Var::constant(bad), 3, false).is_err());
    }

    #[test]
    fn spectral_linear_without_nonlinearity() {
        let mut store = ParamStore::new(3);
        store.get_or_init("st.w", &[4, 4], Init::Uniform(1.0));
        store.insert("st.b", Tensor::zeros(vec![4]));
        let b = Binder::frozen(&store);
        let t = |x: &Tensor| {
            spectral_transform(&b.scope("st"), &Var::constant(x.clone()), 2, false)
                .unwrap()
                .value()
                .clone()
        };
        let (x, y) = (random(&[1, 4, 6, 2], 5), random(&[1, 4, 6, 2], 6));
        let (a, c) = (0.7, -1.3);
        let lhs = t(&x.zip_map(&y, |p, q| a * p + c * q));
        let rhs = t(&x).zip_map(&t(&y), |p, q| a * p + c * q);
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn ffc_degenerate_split_and_zero_input() {
        let mut store = ParamStore::new(7);
        let x = Var::constant(random(&[1, 8, 8, 4], 8));
        let b = Binder::init(&mut store);
        let y = ffc_block(&b.scope("f"), &x, 4, 0.0, true).unwrap();
        let plain = b.scope("f").sub("l2l").conv(&x, 3, 4, 4, 1, 1);
        let plain = b.scope("f").sub("norm_l").layer_norm(&plain, 4).relu();
        assert_eq!(y.value(), plain.value());
        let zero = Var::constant(Tensor::zeros(vec![1, 8, 8, 4]));
        let y = ffc_block(&b.scope("g"), &zero, 4, 0.5, true).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
        assert!(ffc_block(&b.scope("h"), &x, 4, 0.3, true).is_err());
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let mut store = ParamStore::new(0);
        let b = Binder::init(&mut store);
        let x = Var::constant(random(&[1, 4, 4, 4], 1));
        let cfg = NabConfig { kernel: 4, heads: 2 };
        assert!(matches!(
            neighborhood_attention(&b.scope("na"), &x, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_names_failing_parameter() {
        let report = GradCheckReport {
            entries: vec![GradCheckEntry {
                name: "blk.w".into(),
                index: 3,
                analytic: 1.0,
                numeric: 2.0,
                rel_err: 0.5,
            }],
        };
        let err = report.check(1e-4).unwrap_err().to_string();
        assert!(err.contains("blk.w"));
        assert!(report.check(0.6).is_ok());
    }
}
