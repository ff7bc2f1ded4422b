//! Patch discriminator, adversarial / perceptual / feature-matching losses and
//! the R1 gradient penalty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Error, Result};
use crate::params::{Binder, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    /// Output channels of the four stride-2 stages.
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        Ok(())
    }
}

/// Patch logits `[N, h, w, 1]` and the activation after every stage.
#[derive(Clone)]
pub struct DiscOutput {
    pub logits: Var,
    pub activations: Vec<Var>,
}

/// Fully convolutional patch discriminator on `[N, H, W, 3]` images in `[0, 1]`.
pub fn discriminator_forward(s: &Scope, x: &Var, cfg: &DiscConfig) -> Result<DiscOutput> {
    let (_, h, w, c) = x.value().dims4();
    let min = 1usize << cfg.channels.len();
    ensure!(h >= min && w >= min, "discriminator input {h}x{w} below {min}x{min}");
    let mut y = x.scale(2.0).add_scalar(-1.0);
    let mut cin = c;
    let mut activations = Vec::with_capacity(cfg.channels.len());
    for (i, &cout) in cfg.channels.iter().enumerate() {
        y = s.sub(i).conv(&y, 4, cin, cout, 2, 1).leaky_relu(cfg.slope);
        activations.push(y.clone());
        cin = cout;
    }
    let logits = s.sub("out").conv(&y, 3, cin, 1, 1, 1);
    Ok(DiscOutput { logits, activations })
}

/// `mean(-log sigmoid(z))` over fake logits.
pub fn loss_g_adv(fake: &Var) -> Var {
    fake.scale(-1.0).softplus().mean()
}

/// `mean(-log sigmoid(z_real)) + mean(-log(1 - sigmoid(z_fake)))`.
pub fn loss_d_adv(real: &Var, fake: &Var) -> Var {
    real.scale(-1.0).softplus().mean().add(&fake.softplus().mean())
}

/// Sum over layers of the mean absolute difference; the real side is detached.
pub fn loss_feature_matching(real: &[Var], fake: &[Var]) -> Result<Var> {
    ensure!(
        real.len() == fake.len() && !real.is_empty(),
        "feature matching needs equally many layers, got {} and {}",
        real.len(),
        fake.len()
    );
    let mut total: Option<Var> = None;
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        ensure!(
            r.shape() == f.shape(),
            "activation {i} shapes differ: {:?} vs {:?}",
            r.shape(),
            f.shape()
        );
        let term = f.sub(&r.detach()).abs().mean();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Ordered feature layers of an image network.
pub trait FeatureExtractor {
    /// Feature maps of `x` (`[N, H, W, 3]` in `[0, 1]`), shallow to deep.
    fn features(&self, x: &Var) -> Vec<Var>;
}

/// Convolutional pyramid: optional raw-pixel layer, then stride-2 3x3 conv +
/// ReLU stages. The desk profile draws its weights from a seed; the production
/// profile loads them from a checkpoint archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPyramid {
    pub params: ParamStore,
    pub channels: Vec<usize>,
    pub include_pixels: bool,
}

impl ConvPyramid {
    pub fn seeded(channels: Vec<usize>, include_pixels: bool, seed: u64) -> Result<Self> {
        ensure!(
            include_pixels || !channels.is_empty(),
            "perceptual extractor has no layers"
        );
        let mut params = ParamStore::new(seed);
        {
            let b = Binder::init(&mut params);
            let x = Var::constant(Tensor::zeros(vec![1, 1 << channels.len(), 1 << channels.len(), 3]));
            pyramid_features(&b.scope("ext"), &x, &channels, include_pixels);
        }
        Ok(Self {
            params,
            channels,
            include_pixels,
        })
    }

    pub fn desk(seed: u64) -> Self {
        Self::seeded(vec![8, 16, 32], true, seed).expect("desk profile has layers")
    }

    /// Loads weights named `ext.<i>.w` / `ext.<i>.b` from a checkpoint archive.
    pub fn load(path: &Path, include_pixels: bool) -> Result<Self> {
        let ckpt = crate::checkpoint::Checkpoint::read(path)?;
        let mut params = ParamStore::new(0);
        let mut channels = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (ckpt.tensor(&format!("ext.{i}.w")), ckpt.tensor(&format!("ext.{i}.b"))) else {
                break;
            };
            let cin = if i == 0 { 3 } else { channels[i - 1] };
            let shape = w.shape();
            if shape.len() != 4 || shape[0] != 3 || shape[1] != 3 || shape[2] != cin || b.shape() != [shape[3]] {
                return Err(Error::Incompatible(format!(
                    "extractor layer {i} has shape {shape:?}, expected [3, 3, {cin}, C]"
                )));
            }
            channels.push(shape[3]);
            params.insert(&format!("ext.{i}.w"), w.clone());
            params.insert(&format!("ext.{i}.b"), b.clone());
        }
        if channels.is_empty() {
            return Err(Error::Config(format!(
                "{} holds no extractor layers (ext.0.w, ext.0.b, ...)",
                path.display()
            )));
        }
        Ok(Self {
            params,
            channels,
            include_pixels,
        })
    }
}

fn pyramid_features(s: &Scope, x: &Var, channels: &[usize], include_pixels: bool) -> Vec<Var> {
    let mut out = Vec::new();
    if include_pixels {
        out.push(x.clone());
    }
    let mut y = x.scale(2.0).add_scalar(-1.0);
    let mut cin = 3;
    for (i, &c) in channels.iter().enumerate() {
        let (_, h, w, _) = y.value().dims4();
        let stride = if h >= 2 && w >= 2 { 2 } else { 1 };
        y = s.sub(i).conv(&y, 3, cin, c, stride, 1).relu();
        out.push(y.clone());
        cin = c;
    }
    out
}

impl FeatureExtractor for ConvPyramid {
    fn features(&self, x: &Var) -> Vec<Var> {
        let b = Binder::frozen(&self.params);
        pyramid_features(&b.scope("ext"), x, &self.channels, self.include_pixels)
    }
}

/// Raw pixels as the only layer.
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn features(&self, x: &Var) -> Vec<Var> {
        vec![x.clone()]
    }
}

/// `sum_i mean |phi_i(pred) - phi_i(target)|`; the target side carries no gradient.
pub fn loss_perceptual(pred: &Var, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Var> {
    let fp = extractor.features(pred);
    let ft = extractor.features(&Var::constant(target.clone()));
    if fp.is_empty() {
        return Err(Error::Config("perceptual extractor has no layers".into()));
    }
    loss_feature_matching(&ft, &fp)
}

/// R1 value `mean_n |grad_x sum D(x)_n|^2` (or the unsquared norm) for a
/// discriminator `d` that maps `[N, H, W, C]` images to logits.
pub fn r1_penalty(real: &Tensor, unsquared: bool, d: impl Fn(&Var) -> Var) -> f64 {
    let (value, _) = r1_value_and_direction(real, unsquared, &d);
    value
}

fn r1_value_and_direction(real: &Tensor, unsquared: bool, d: &impl Fn(&Var) -> Var) -> (f64, Tensor) {
    let x = Var::leaf(real.clone());
    let g = d(&x).sum().backward();
    let n = real.shape()[0];
    let gx = g
        .get(&x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(real.shape().to_vec()));
    let per = gx.numel() / n.max(1);
    let mut value = 0.0;
    let mut dir = gx.clone();
    for (b, chunk) in dir.data_mut().chunks_mut(per).enumerate() {
        let sq: f64 = gx.data()[b * per..(b + 1) * per].iter().map(|v| v * v).sum();
        // Derivative of the per-sample term with respect to the input gradient.
        let scale = if unsquared {
            value += sq.sqrt();
            if sq > 0.0 {
                1.0 / (n as f64 * sq.sqrt())
            } else {
                0.0
            }
        } else {
            value += sq;
            2.0 / n as f64
        };
        chunk.iter_mut().for_each(|v| *v *= scale);
    }
    (value / n as f64, dir)
}

/// R1 value and its gradient with respect to the discriminator parameters.
///
/// The parameter gradient is the mixed second derivative
/// `d/dt grad_theta S(x + t v)` along the direction `v` that the penalty
/// assigns to the input gradient, taken by central differences. For
/// piecewise-linear discriminators this is exact unless `x +- t v` crosses an
/// activation kink.
pub fn r1_with_param_grads(
    store: &ParamStore,
    real: &Tensor,
    unsquared: bool,
    d: impl Fn(&Binder, &Var) -> Result<Var>,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let frozen = |x: &Var| {
        let b = Binder::frozen(store);
        d(&b, x).expect("discriminator forward")
    };
    let (value, dir) = r1_value_and_direction(real, unsquared, &frozen);
    let rms = (dir.data().iter().map(|v| v * v).sum::<f64>() / dir.numel() as f64).sqrt();
    if rms == 0.0 {
        return Ok((value, Vec::new()));
    }
    let t = 1e-4 / rms;
    let param_grads = |sign: f64| -> Result<Vec<(String, Tensor)>> {
        let x = real.zip_map(&dir, |a, v| a + sign * t * v);
        let mut scratch = store.clone();
        let b = Binder::train(&mut scratch);
        let g = d(&b, &Var::constant(x))?.sum().backward();
        Ok(b.grads(&g))
    };
    let plus = param_grads(1.0)?;
    let minus = param_grads(-1.0)?;
    let grads = plus
        .into_iter()
        .zip(minus)
        .map(|((name, p), (_, m))| (name, p.zip_map(&m, |a, b| (a - b) / (2.0 * t))))
        .collect();
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_per: f64,
    pub lambda_fm: f64,
    pub lambda_r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_per: 10.0,
            lambda_fm: 0.1,
            lambda_r1: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_per, self.lambda_fm, self.lambda_r1]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Scalar values of the four objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv: f64,
    pub per: f64,
    pub fm: f64,
    pub r1: f64,
}

/// `adv + lambda_per * per + lambda_fm * fm + lambda_r1 * r1`; a non-finite
/// part aborts naming the part.
pub fn loss_total(parts: &LossParts, w: &LossWeights, step: u64) -> Result<f64> {
    for (name, v) in [("adv", parts.adv), ("per", parts.per), ("fm", parts.fm), ("r1", parts.r1)] {
        if !v.is_finite() {
            return Err(Error::TrainingAbort {
                step,
                part: name.into(),
                last_checkpoint: None,
            });
        }
    }
    Ok(parts.adv + w.lambda_per * parts.per + w.lambda_fm * parts.fm + w.lambda_r1 * parts.r1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform())
    }

    #[test]
    fn discriminator_shapes() {
        let mut store = ParamStore::new(0);
        let b = Binder::init(&mut store);
        let cfg = DiscConfig::desk();
        let out = discriminator_forward(&b.scope("d"), &Var::constant(random(&[2, 64, 64, 3], 1)), &cfg).unwrap();
        assert_eq!(out.logits.shape(), &[2, 4, 4, 1]);
        assert_eq!(out.activations.len(), 4);
        let out = discriminator_forward(&b.scope("d"), &Var::constant(random(&[1, 72, 56, 3], 1)), &cfg).unwrap();
        assert_eq!(out.logits.shape(), &[1, 4, 3, 1]);
        assert!(discriminator_forward(&b.scope("d"), &Var::constant(random(&[1, 8, 56, 3], 1)), &cfg).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut store = ParamStore::new(0);
        let x = Var::constant(random(&[1, 32, 32, 3], 2));
        let cfg = DiscConfig::desk();
        discriminator_forward(&Binder::init(&mut store).scope("d"), &x, &cfg).unwrap();
        for (_, p) in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let b = Binder::frozen(&store);
        let out = discriminator_forward(&b.scope("d"), &x, &cfg).unwrap();
        assert!(out.logits.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softplus_identity_links_g_and_d_terms() {
        for z in [-30.0, -2.0, -0.1, 0.0, 0.7, 5.0, 40.0] {
            let v = Var::constant(Tensor::full(vec![3], z));
            let g = loss_g_adv(&v).value().item();
            let d_fake = v.softplus().mean().value().item();
            assert!((g - d_fake + z).abs() < 1e-12, "z = {z}");
        }
    }

    #[test]
    fn feature_matching_offsets_and_shapes() {
        let a = Var::constant(Tensor::full(vec![1, 4, 4, 2], 0.3));
        let b = Var::constant(Tensor::full(vec![1, 4, 4, 2], 0.8));
        let small = loss_feature_matching(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap().value().item();
        assert!((small - 0.5).abs() < 1e-12);
        let a8 = Var::constant(Tensor::full(vec![1, 8, 8, 2], 0.3));
        let b8 = Var::constant(Tensor::full(vec![1, 8, 8, 2], 0.8));
        let big = loss_feature_matching(std::slice::from_ref(&a8), &[b8]).unwrap().value().item();
        assert!((small - big).abs() < 1e-12);
        assert!(loss_feature_matching(&[a], &[a8]).is_err());
    }

    #[test]
    fn feature_matching_gives_real_branch_no_gradient() {
        let r = Var::leaf(Tensor::full(vec![2, 2], 0.1));
        let f = Var::leaf(Tensor::full(vec![2, 2], 0.5));
        let g = loss_feature_matching(std::slice::from_ref(&r), std::slice::from_ref(&f)).unwrap().backward();
        assert!(g.get(&r).is_none());
        assert!(g.get(&f).is_some());
    }

    #[test]
    fn perceptual_degenerate_and_symmetric_zero() {
        let x = random(&[1, 16, 16, 3], 3);
        let y = random(&[1, 16, 16, 3], 4);
        let direct = x.zip_map(&y, |a, b| (a - b).abs()).sum() / x.numel() as f64;
        let l = loss_perceptual(&Var::constant(x.clone()), &y, &PixelExtractor).unwrap();
        assert!((l.value().item() - direct).abs() < 1e-12);
        let ext = ConvPyramid::desk(9);
        assert_eq!(loss_perceptual(&Var::constant(x.clone()), &x, &ext).unwrap().value().item(), 0.0);
        assert!(ConvPyramid::seeded(vec![], false, 0).is_err());
    }

    #[test]
    fn r1_of_constant_and_linear_discriminators() {
        let x = random(&[1, 4, 4, 3], 5);
        assert_eq!(r1_penalty(&x, false, |v| v.scale(0.0).sum()), 0.0);
        let w = random(&[1, 4, 4, 3], 6);
        let wv = Var::constant(w.clone());
        let r1 = r1_penalty(&x, false, |v| v.mul(&wv).sum());
        let norm2: f64 = w.data().iter().map(|v| v * v).sum();
        assert!((r1 - norm2).abs() < 1e-12);
        let r1u = r1_penalty(&x, true, |v| v.mul(&wv).sum());
        assert!((r1u - norm2.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn r1_param_gradient_matches_finite_differences() {
        let cfg = DiscConfig { channels: vec![4, 4], slope: 0.2 };
        let mut store = ParamStore::new(11);
        let x = random(&[2, 8, 8, 3], 7);
        discriminator_forward(&Binder::init(&mut store).scope("d"), &Var::constant(x.clone()), &cfg).unwrap();
        let d = |b: &Binder, v: &Var| Ok(discriminator_forward(&b.scope("d"), v, &cfg)?.logits);
        for unsquared in [false, true] {
            let (_, grads) = r1_with_param_grads(&store, &x, unsquared, d).unwrap();
            let value = |s: &ParamStore| {
                r1_penalty(&x, unsquared, |v| discriminator_forward(&Binder::frozen(s).scope("d"), v, &cfg).unwrap().logits)
            };
            for (name, g) in grads.iter().filter(|(n, _)| n.ends_with(".w")) {
                for i in [0, g.numel() / 2, g.numel() - 1] {
                    let eps = 1e-6;
                    let mut p = store.clone();
                    p.get_mut(name).unwrap().value.data_mut()[i] += eps;
                    let mut m = store.clone();
                    m.get_mut(name).unwrap().value.data_mut()[i] -= eps;
                    let num = (value(&p) - value(&m)) / (2.0 * eps);
                    let rel = (num - g.data()[i]).abs() / num.abs().max(1e-6);
                    assert!(rel < 1e-4, "{name}[{i}] unsquared={unsquared}: {} vs {num}", g.data()[i]);
                }
            }
        }
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        let ones = LossParts { adv: 1.0, per: 1.0, fm: 1.0, r1: 1.0 };
        assert!((loss_total(&ones, &w, 0).unwrap() - 21.1).abs() < 1e-12);
        assert_eq!(loss_total(&LossParts::default(), &w, 0).unwrap(), 0.0);
        let zero = LossWeights { lambda_per: 0.0, lambda_fm: 0.0, lambda_r1: 0.0 };
        assert_eq!(loss_total(&ones, &zero, 0).unwrap(), 1.0);
        let bad = LossParts { fm: f64::NAN, ..ones };
        match loss_total(&bad, &w, 7) {
            Err(Error::TrainingAbort { step: 7, part, .. }) => assert_eq!(part, "fm"),
            other => panic!("{other:?}"),
        }
    }
}
