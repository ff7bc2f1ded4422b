//! Adversarial training: warm-up + cosine learning rate, Adam, alternating
//! discriminator / generator steps, checkpoints and a JSONL metric log.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{
    discriminator_forward, loss_d_adv, loss_feature_matching, loss_g_adv, loss_perceptual, loss_total,
    r1_with_param_grads, ConvPyramid, DiscConfig, FeatureExtractor, LossParts, LossWeights,
};
use crate::autograd::Var;
use crate::checkpoint::{fingerprint, Checkpoint, Header};
use crate::dataset::{AtsConfig, Batch, BatchConfig, BatchIterator, CropMode, SampleManifest};
use crate::error::{ensure, Error, Result};
use crate::generator::{forward_tensors, Generator, GeneratorConfig};
use crate::image::{images_to_tensor, masks_to_tensor};
use crate::maskgen::MaskSpec;
use crate::params::{Binder, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    /// Adaptive aspect-ratio crops.
    Ats,
    /// Centered square crops of `sqrt(target_area)` pixels per side.
    Fixed,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualProfile {
    /// Seeded random convolutional pyramid.
    Desk,
    /// Weights loaded from `perceptual.path`.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub profile: PerceptualProfile,
    pub path: Option<PathBuf>,
    pub channels: Vec<usize>,
    pub include_pixels: bool,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            profile: PerceptualProfile::Desk,
            path: None,
            channels: vec![8, 16, 32],
            include_pixels: true,
            seed: 0,
        }
    }
}

impl PerceptualConfig {
    pub fn build(&self) -> Result<ConvPyramid> {
        match self.profile {
            PerceptualProfile::Desk => ConvPyramid::seeded(self.channels.clone(), self.include_pixels, self.seed),
            PerceptualProfile::Pretrained => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Config("perceptual.profile = \"pretrained\" needs perceptual.path".into())
                })?;
                ConvPyramid::load(path, self.include_pixels)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_max: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Apply R1 every this many discriminator steps, scaled by the interval.
    pub r1_interval: u64,
    pub r1_unsquared: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub crop: CropKind,
    pub ats: AtsConfig,
    pub drop_last: bool,
    /// Steps between checkpoints; 0 writes one at the end of every epoch.
    pub checkpoint_every: u64,
    pub perceptual: PerceptualConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 3,
            lr_init: 4e-5,
            lr_max: 4e-4,
            warmup_epochs: 15.0,
            seed: 0,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            r1_interval: 16,
            r1_unsquared: false,
            grad_clip: 0.0,
            loss_weights: LossWeights::default(),
            crop: CropKind::Ats,
            ats: AtsConfig::default(),
            drop_last: true,
            checkpoint_every: 0,
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad("warmup_epochs must be in [0, epochs)");
        }
        if !(0.0 <= self.lr_init && self.lr_init <= self.lr_max) {
            return bad("learning rates must satisfy 0 <= lr_init <= lr_max");
        }
        if self.r1_interval == 0 {
            return bad("r1_interval must be at least 1");
        }
        self.loss_weights.validate()
    }

    pub fn crop_mode(&self) -> CropMode {
        match self.crop {
            CropKind::Ats => CropMode::Ats(self.ats.clone()),
            CropKind::Fixed => {
                let side = self.ats.target_area.sqrt().round() as usize;
                CropMode::Fixed {
                    height: side,
                    width: side,
                }
            }
            CropKind::None => CropMode::None,
        }
    }
}

/// Linear warm-up from `lr_init` to `lr_max`, then cosine decay to 0 at the
/// last epoch.
pub fn lr_schedule(step: u64, steps_per_epoch: u64, cfg: &TrainConfig) -> f64 {
    let e = step as f64 / steps_per_epoch.max(1) as f64;
    if e < cfg.warmup_epochs {
        cfg.lr_init + (cfg.lr_max - cfg.lr_init) * e / cfg.warmup_epochs
    } else {
        let span = cfg.epochs as f64 - cfg.warmup_epochs;
        let p = ((e - cfg.warmup_epochs) / span).min(1.0);
        cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    /// Applies one update from the gradients stored in `params`, then clears them.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let clip = if cfg.grad_clip > 0.0 {
            let n = params.grad_norm();
            if n > cfg.grad_clip {
                cfg.grad_clip / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape));
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                *x -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
        params.zero_grad();
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub generator: Generator,
    pub disc_config: DiscConfig,
    pub disc: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub seed: u64,
}

/// Scalars reported for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub g_adv: f64,
    pub per: f64,
    pub fm: f64,
    pub r1: f64,
    pub d_adv: f64,
    pub g_total: f64,
    pub masked_l1: f64,
    pub wall: f64,
}

const STATE_KIND: &str = "train_state";
const GENERATOR_KIND: &str = "generator";

fn model_fingerprint(gen: &GeneratorConfig, disc: &DiscConfig) -> String {
    fingerprint(&serde_json::json!({ "generator": gen, "disc": disc }))
}

impl TrainState {
    pub fn new(gen_cfg: GeneratorConfig, disc_cfg: DiscConfig, seed: u64) -> Result<Self> {
        disc_cfg.validate()?;
        let generator = Generator::new(gen_cfg, crate::rng::derive_seed(seed, &[crate::rng::label("generator")]))?;
        let mut disc = ParamStore::new(crate::rng::derive_seed(seed, &[crate::rng::label("disc")]));
        {
            let b = Binder::init(&mut disc);
            let side = 1 << disc_cfg.channels.len();
            discriminator_forward(&b.scope("disc"), &Var::constant(Tensor::zeros(vec![1, side, side, 3])), &disc_cfg)?;
        }
        Ok(Self {
            step: 0,
            epoch: 0,
            batch: 0,
            generator,
            disc_config: disc_cfg,
            disc,
            gen_opt: Adam::default(),
            disc_opt: Adam::default(),
            seed,
        })
    }

    pub fn fingerprint(&self) -> String {
        model_fingerprint(&self.generator.config, &self.disc_config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore, opt: &Adam| {
            for (name, p) in store.iter() {
                tensors.push((format!("{prefix}.p.{name}"), p.value.clone()));
            }
            for (name, t) in &opt.m {
                tensors.push((format!("{prefix}.m.{name}"), t.clone()));
            }
            for (name, t) in &opt.v {
                tensors.push((format!("{prefix}.v.{name}"), t.clone()));
            }
        };
        push("g", &self.generator.params, &self.gen_opt);
        push("d", &self.disc, &self.disc_opt);
        Checkpoint::new(
            Header {
                kind: STATE_KIND.into(),
                fingerprint: self.fingerprint(),
                seed: self.seed,
                step: self.step,
                epoch: self.epoch,
                config: serde_json::json!({ "generator": self.generator.config, "disc": self.disc_config }),
                extra: serde_json::json!({
                    "batch": self.batch,
                    "gen_seed": self.generator.params.seed(),
                    "disc_seed": self.disc.seed(),
                    "gen_adam_t": self.gen_opt.t,
                    "disc_adam_t": self.disc_opt.t,
                    // Batches, crops and masks draw from streams derived from
                    // (seed, epoch, batch), so the cursor is the whole RNG position.
                    "rng": RngState { seed: self.seed, word_pos: 0 },
                }),
            },
            tensors,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.kind != STATE_KIND {
            return Err(Error::Incompatible(format!("archive holds `{}`, expected `{STATE_KIND}`", h.kind)));
        }
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        let gen_cfg: GeneratorConfig = serde_json::from_value(h.config["generator"].clone())
            .map_err(|e| Error::Corrupt(format!("generator config: {e}")))?;
        let disc_cfg: DiscConfig = serde_json::from_value(h.config["disc"].clone())
            .map_err(|e| Error::Corrupt(format!("disc config: {e}")))?;
        if model_fingerprint(&gen_cfg, &disc_cfg) != h.fingerprint {
            return Err(corrupt("fingerprint does not match stored config"));
        }
        let num = |k: &str| h.extra[k].as_u64().ok_or_else(|| corrupt(&format!("missing `{k}`")));
        let mut gen_params = ParamStore::new(num("gen_seed")?);
        let mut disc = ParamStore::new(num("disc_seed")?);
        let mut gen_opt = Adam { t: num("gen_adam_t")?, ..Adam::default() };
        let mut disc_opt = Adam { t: num("disc_adam_t")?, ..Adam::default() };
        for (name, t) in &ckpt.tensors {
            let (net, rest) = name.split_once('.').ok_or_else(|| corrupt("bad tensor name"))?;
            let (part, pname) = rest.split_once('.').ok_or_else(|| corrupt("bad tensor name"))?;
            let (store, opt) = match net {
                "g" => (&mut gen_params, &mut gen_opt),
                "d" => (&mut disc, &mut disc_opt),
                _ => return Err(corrupt("bad tensor name")),
            };
            match part {
                "p" => store.insert(pname, t.clone()),
                "m" => {
                    opt.m.insert(pname.to_string(), t.clone());
                }
                "v" => {
                    opt.v.insert(pname.to_string(), t.clone());
                }
                _ => return Err(corrupt("bad tensor name")),
            }
        }
        // Parameter sets must match what the configs build.
        let fresh = TrainState::new(gen_cfg.clone(), disc_cfg.clone(), h.seed)?;
        for (stored, built) in [(&gen_params, &fresh.generator.params), (&disc, &fresh.disc)] {
            let a: Vec<_> = stored.iter().map(|(n, p)| (n, p.value.shape())).collect();
            let b: Vec<_> = built.iter().map(|(n, p)| (n, p.value.shape())).collect();
            if a != b {
                return Err(Error::Incompatible("stored parameters do not match the configured architecture".into()));
            }
        }
        Ok(Self {
            step: h.step,
            epoch: h.epoch,
            batch: num("batch")? as usize,
            generator: Generator {
                config: gen_cfg,
                params: gen_params,
            },
            disc_config: disc_cfg,
            disc,
            gen_opt,
            disc_opt,
            seed: h.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads and checks that the stored architecture matches the given configs.
    pub fn load_expecting(path: impl AsRef<Path>, gen: &GeneratorConfig, disc: &DiscConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.expect(STATE_KIND, &model_fingerprint(gen, disc))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Writes a generator-only archive for inference.
pub fn save_generator(gen: &Generator, path: impl AsRef<Path>) -> Result<()> {
    let tensors = gen.params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect();
    Checkpoint::new(
        Header {
            kind: GENERATOR_KIND.into(),
            fingerprint: fingerprint(&gen.config),
            seed: gen.params.seed(),
            step: 0,
            epoch: 0,
            config: serde_json::to_value(&gen.config).expect("config serializes"),
            extra: serde_json::Value::Null,
        },
        tensors,
    )
    .write(path)
}

/// Loads a generator from a generator archive or a training-state archive.
pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    let ckpt = Checkpoint::read(path)?;
    match ckpt.header.kind.as_str() {
        STATE_KIND => Ok(TrainState::from_checkpoint(&ckpt)?.generator),
        GENERATOR_KIND => {
            let config: GeneratorConfig = serde_json::from_value(ckpt.header.config.clone())
                .map_err(|e| Error::Corrupt(format!("generator config: {e}")))?;
            ckpt.expect(GENERATOR_KIND, &fingerprint(&config))?;
            let fresh = Generator::new(config.clone(), ckpt.header.seed)?;
            let mut params = ParamStore::new(ckpt.header.seed);
            for (name, t) in &ckpt.tensors {
                params.insert(name, t.clone());
            }
            let same = fresh
                .params
                .iter()
                .map(|(n, p)| (n, p.value.shape()))
                .eq(params.iter().map(|(n, p)| (n, p.value.shape())));
            if !same {
                return Err(Error::Incompatible("stored parameters do not match the configured architecture".into()));
            }
            Ok(Generator { config, params })
        }
        other => Err(Error::Incompatible(format!("archive holds `{other}`, not a generator"))),
    }
}

/// Loads a generator and requires its configuration to equal `expected`.
pub fn load_generator_expecting(path: impl AsRef<Path>, expected: &GeneratorConfig) -> Result<Generator> {
    let gen = load_generator(path)?;
    if fingerprint(&gen.config) != fingerprint(expected) {
        return Err(Error::Incompatible(
            "checkpoint generator config differs from the current configuration".into(),
        ));
    }
    Ok(gen)
}

/// `m * pred + (1 - m) * img` as a graph node (gradient flows into `pred`).
fn composite_var(pred: &Var, images: &Tensor, masks: &Tensor) -> Var {
    let (n, h, w, _) = images.dims4();
    let m3 = Tensor::from_fn(vec![n, h, w, 3], |i| masks.data()[i / 3]);
    let known = images.zip_map(&m3, |x, m| x * (1.0 - m));
    pred.mul(&Var::constant(m3)).add(&Var::constant(known))
}

/// Mean absolute error over masked pixels (all channels).
pub fn masked_l1(pred: &Tensor, images: &Tensor, masks: &Tensor) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (p, x)) in pred.data().iter().zip(images.data()).enumerate() {
        if masks.data()[i / 3] > 0.5 {
            sum += (p - x).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    lr: f64,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let images = images_to_tensor(&batch.images)?;
    let masks = masks_to_tensor(&batch.masks)?;
    let gcfg = state.generator.config.clone();
    let dcfg = state.disc_config.clone();
    let w = cfg.loss_weights;
    let step = state.step;
    for (part, store) in [("generator parameters", &state.generator.params), ("discriminator parameters", &state.disc)] {
        if !store.all_finite() {
            return Err(Error::TrainingAbort {
                step,
                part: part.into(),
                last_checkpoint: None,
            });
        }
    }

    // Discriminator step on the composited prediction.
    let pred = {
        let b = Binder::frozen(&state.generator.params);
        forward_tensors(&b, &images, &masks, None, &gcfg)?
    };
    let fake = composite_var(&Var::constant(pred.value().clone()), &images, &masks);
    let d_adv = {
        let b = Binder::train(&mut state.disc);
        let s = b.scope("disc");
        let real = discriminator_forward(&s, &Var::constant(images.clone()), &dcfg)?;
        let fake = discriminator_forward(&s, &fake, &dcfg)?;
        let loss = loss_d_adv(&real.logits, &fake.logits);
        let g = loss.backward();
        let grads = b.grads(&g);
        drop(b);
        state.disc.accumulate(&grads);
        loss.value().item()
    };
    let mut r1 = 0.0;
    if w.lambda_r1 > 0.0 && step.is_multiple_of(cfg.r1_interval) {
        let (value, grads) = r1_with_param_grads(&state.disc, &images, cfg.r1_unsquared, |b, x| {
            Ok(discriminator_forward(&b.scope("disc"), x, &dcfg)?.logits)
        })?;
        r1 = value;
        let scale = w.lambda_r1 * cfg.r1_interval as f64;
        let scaled: Vec<_> = grads.into_iter().map(|(n, g)| (n, g.scale(scale))).collect();
        state.disc.accumulate(&scaled);
    }
    if !(d_adv.is_finite() && r1.is_finite()) {
        let part = if d_adv.is_finite() { "r1" } else { "d_adv" };
        return Err(Error::TrainingAbort {
            step,
            part: part.into(),
            last_checkpoint: None,
        });
    }
    state.disc_opt.step(&mut state.disc, lr, cfg);

    // Generator step against the updated, frozen discriminator.
    let (parts, g_total, l1) = {
        let b = Binder::train(&mut state.generator.params);
        let pred = forward_tensors(&b, &images, &masks, None, &gcfg)?;
        let fake = composite_var(&pred, &images, &masks);
        let db = Binder::frozen(&state.disc);
        let ds = db.scope("disc");
        let real = discriminator_forward(&ds, &Var::constant(images.clone()), &dcfg)?;
        let fake_out = discriminator_forward(&ds, &fake, &dcfg)?;
        let adv = loss_g_adv(&fake_out.logits);
        let fm = loss_feature_matching(&real.activations, &fake_out.activations)?;
        let per = loss_perceptual(&pred, &images, extractor)?;
        let parts = LossParts {
            adv: adv.value().item(),
            per: per.value().item(),
            fm: fm.value().item(),
            r1: 0.0,
        };
        let total_value = loss_total(&parts, &w, step)?;
        let total = adv.add(&per.scale(w.lambda_per)).add(&fm.scale(w.lambda_fm));
        let g = total.backward();
        let grads = b.grads(&g);
        let l1 = masked_l1(pred.value(), &images, &masks);
        drop(b);
        state.generator.params.accumulate(&grads);
        (parts, total_value, l1)
    };
    state.gen_opt.step(&mut state.generator.params, lr, cfg);
    state.step += 1;

    Ok(StepMetrics {
        step,
        epoch: state.epoch,
        lr,
        g_adv: parts.adv,
        per: parts.per,
        fm: parts.fm,
        r1,
        d_adv,
        g_total,
        masked_l1: l1,
        wall: start.elapsed().as_secs_f64(),
    })
}

/// Training loop over a manifest with periodic, atomic checkpoints.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    pub data: BatchIterator,
    extractor: ConvPyramid,
    out_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscConfig,
        mask_spec: MaskSpec,
        manifest: SampleManifest,
    ) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(gen_cfg, disc_cfg, config.seed)?;
        Self::with_state(config, state, mask_spec, manifest)
    }

    pub fn with_state(config: TrainConfig, state: TrainState, mask_spec: MaskSpec, manifest: SampleManifest) -> Result<Self> {
        config.validate()?;
        let data = BatchIterator::new(
            manifest,
            BatchConfig {
                batch_size: config.batch_size,
                drop_last: config.drop_last,
                crop: config.crop_mode(),
                mask_spec,
                seed: config.seed,
            },
        )?;
        ensure!(data.batches_per_epoch() > 0, "manifest yields no full batch");
        let extractor = config.perceptual.build()?;
        Ok(Self {
            config,
            state,
            data,
            extractor,
            out_dir: None,
            last_checkpoint: None,
        })
    }

    /// Writes `metrics.jsonl`, `last.ckpt` and `final.ckpt` into `dir`.
    pub fn output_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.batches_per_epoch() as u64
    }

    pub fn extractor(&self) -> &ConvPyramid {
        &self.extractor
    }

    fn checkpoint(&mut self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("last.ckpt");
            self.state.save(&path)?;
            self.last_checkpoint = Some(path);
        }
        Ok(())
    }

    fn log(&self, m: &StepMetrics) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Runs up to `max_steps` more steps (or to the end of training).
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<Vec<StepMetrics>> {
        let spe = self.steps_per_epoch();
        let mut out = Vec::new();
        while self.state.epoch < self.config.epochs {
            let epoch = self.state.epoch;
            let plan = self.data.plan(epoch);
            while self.state.epoch == epoch && self.state.batch < plan.len() {
                if max_steps.is_some_and(|m| out.len() as u64 >= m) {
                    return Ok(out);
                }
                let b = self.state.batch;
                let batch = self.data.load(self.state.epoch, b, &plan[b])?;
                let lr = lr_schedule(self.state.step, spe, &self.config);
                let m = train_step(&mut self.state, &batch, lr, &self.config, &self.extractor).map_err(|e| match e {
                    Error::TrainingAbort { step, part, .. } => Error::TrainingAbort {
                        step,
                        part,
                        last_checkpoint: self.last_checkpoint.clone(),
                    },
                    other => other,
                })?;
                self.state.batch += 1;
                if self.state.batch == plan.len() {
                    self.state.batch = 0;
                    self.state.epoch += 1;
                }
                self.log(&m)?;
                out.push(m);
                let every = self.config.checkpoint_every;
                if (every > 0 && self.state.step.is_multiple_of(every)) || (every == 0 && self.state.batch == 0) {
                    self.checkpoint()?;
                }
            }
        }
        Ok(out)
    }

    /// Trains to completion and writes `final.ckpt` if an output dir is set.
    pub fn fit(&mut self) -> Result<Option<PathBuf>> {
        self.run(None)?;
        match &self.out_dir {
            Some(dir) => {
                let path = dir.join("final.ckpt");
                self.state.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

/// Trains from scratch (or resumes from `resume`) and returns the final
/// checkpoint path.
pub fn fit(
    config: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscConfig,
    mask_spec: MaskSpec,
    manifest: SampleManifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let mut trainer = match resume {
        Some(path) => {
            let state = TrainState::load_expecting(path, &gen_cfg, &disc_cfg)?;
            Trainer::with_state(config, state, mask_spec, manifest)?
        }
        None => Trainer::new(config, gen_cfg, disc_cfg, mask_spec, manifest)?,
    }
    .output_dir(out_dir)?;
    Ok(trainer.fit()?.expect("output dir set"))
}
