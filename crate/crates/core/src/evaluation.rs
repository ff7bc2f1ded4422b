//! Image-quality metrics, inference adapters for fixed-shape models and the
//! experiment runner that produces result tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adversarial::FeatureExtractor;
use crate::autograd::Var;
use crate::dataset::SampleManifest;
use crate::error::{ensure, Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{composite, images_to_tensor, save_image, Image, Mask, MIN_EDGE};
use crate::maskgen::MaskSpec;
use crate::training::{load_generator_expecting, PerceptualConfig};

/// PSNR shown in tables when the images are identical.
pub const PSNR_TABLE_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    ensure!(a.dims() == b.dims(), "image dims differ: {:?} vs {:?}", a.dims(), b.dims());
    Ok(())
}

/// `10 log10(1 / MSE)` for data range 1; `+inf` when the images are equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window luminance and contrast-structure terms of one channel.
fn ssim_terms(a: &Image, b: &Image, c: usize) -> (Vec<f64>, Vec<f64>) {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (h, w) = a.dims();
    let g = gaussian_window();
    let pa: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
    let pb: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&pa, h, w, &g);
    let mu_b = filter_valid(&pb, h, w, &g);
    let saa = filter_valid(&prod(&pa, &pa), h, w, &g);
    let sbb = filter_valid(&prod(&pb, &pb), h, w, &g);
    let sab = filter_valid(&prod(&pa, &pb), h, w, &g);
    let mut lum = Vec::with_capacity(mu_a.len());
    let mut cs = Vec::with_capacity(mu_a.len());
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        lum.push((2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1));
        cs.push((2.0 * cov + C2) / (va + vb + C2));
    }
    (lum, cs)
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, valid positions),
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    let mut total = 0.0;
    for c in 0..3 {
        let (lum, cs) = ssim_terms(a, b, c);
        total += lum.iter().zip(&cs).map(|(l, s)| l * s).sum::<f64>() / lum.len() as f64;
    }
    Ok(total / 3.0)
}

/// Perceptual distance with unit channel weights.
pub fn lpips(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    lpips_weighted(a, b, extractor, None)
}

/// `sum_l mean_pos sum_c w_lc (f_a / |f_a| - f_b / |f_b|)^2` over the
/// extractor's layers; `weights[l]` holds one weight per channel of layer `l`.
pub fn lpips_weighted(
    a: &Image,
    b: &Image,
    extractor: &dyn FeatureExtractor,
    weights: Option<&[Vec<f64>]>,
) -> Result<f64> {
    same_dims(a, b)?;
    let fa = extractor.features(&Var::constant(images_to_tensor(std::slice::from_ref(a))?));
    let fb = extractor.features(&Var::constant(images_to_tensor(std::slice::from_ref(b))?));
    if fa.is_empty() {
        return Err(Error::Config("lpips extractor has no layers".into()));
    }
    if let Some(w) = weights {
        ensure!(w.len() == fa.len(), "{} weight vectors for {} layers", w.len(), fa.len());
    }
    let mut total = 0.0;
    for (l, (xa, xb)) in fa.iter().zip(&fb).enumerate() {
        let c = xa.value().last_dim();
        let (da, db) = (xa.value().data(), xb.value().data());
        let positions = da.len() / c;
        if let Some(w) = weights {
            ensure!(w[l].len() == c, "layer {l} has {c} channels, {} weights", w[l].len());
        }
        let mut sum = 0.0;
        for p in 0..positions {
            let ra = &da[p * c..(p + 1) * c];
            let rb = &db[p * c..(p + 1) * c];
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            for k in 0..c {
                let d = ra[k] / na - rb[k] / nb;
                sum += weights.map_or(1.0, |w| w[l][k]) * d * d;
            }
        }
        total += sum / positions as f64;
    }
    Ok(total)
}

/// Anything that fills holes in an image.
pub trait InpaintModel {
    fn name(&self) -> &str;
    /// Raw prediction for every pixel of `img`; `mask` marks the holes.
    fn predict(&self, img: &Image, mask: &Mask) -> Result<Image>;
}

impl InpaintModel for Generator {
    fn name(&self) -> &str {
        "in2"
    }

    fn predict(&self, img: &Image, mask: &Mask) -> Result<Image> {
        self.forward(img, mask, None)
    }
}

/// Fills holes with the mean known color, and only accepts square inputs
/// (of one fixed size, if given).
#[derive(Clone, Copy, Debug, Default)]
pub struct SquareOnlyModel {
    pub size: Option<usize>,
}

impl InpaintModel for SquareOnlyModel {
    fn name(&self) -> &str {
        "square-only"
    }

    fn predict(&self, img: &Image, mask: &Mask) -> Result<Image> {
        let (h, w) = img.dims();
        if h != w || self.size.is_some_and(|s| s != h) {
            let want = self.size.map_or("square input".to_string(), |s| format!("{s}x{s} input"));
            return Err(Error::Capability(format!("{} accepts only {want}, got {h}x{w}", self.name())));
        }
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) == 0 {
                    n += 1;
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += img.get(y, x, c);
                    }
                }
            }
        }
        let mean = sum.map(|s| if n == 0 { 0.5 } else { s / n as f64 });
        Image::from_fn(h, w, |_, _, c| mean[c])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Direct,
    Resize,
    PadConstant,
    PadEdge,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [Self::Direct, Self::Resize, Self::PadConstant, Self::PadEdge];

    pub fn label(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Resize => "resize",
            Self::PadConstant => "pad_constant",
            Self::PadEdge => "pad_edge",
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter `{s}` (direct, resize, pad_constant, pad_edge)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMode {
    pub kind: AdapterKind,
    /// Working edge for the resize and pad adapters.
    pub train_size: usize,
}

impl AdapterMode {
    pub fn new(kind: AdapterKind, train_size: usize) -> Self {
        Self { kind, train_size }
    }
}

/// Dims after scaling the long edge of `(h, w)` to `size`.
pub fn long_edge_dims(h: usize, w: usize, size: usize) -> (usize, usize) {
    let scale = |e: usize, long: usize| ((e as f64 * size as f64 / long as f64).round() as usize).max(1);
    if h >= w {
        (size, scale(w, h))
    } else {
        (scale(h, w), size)
    }
}

/// Layout of content inside a padded square canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadLayout {
    pub size: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PadLayout {
    pub fn new(h: usize, w: usize, size: usize) -> Self {
        let (height, width) = long_edge_dims(h, w, size);
        Self {
            size,
            top: (size - height) / 2,
            left: (size - width) / 2,
            height,
            width,
        }
    }
}

fn pad_image(img: &Image, lay: PadLayout, edge: bool) -> Result<Image> {
    Image::from_fn(lay.size, lay.size, |y, x, c| {
        let inside = (lay.top..lay.top + lay.height).contains(&y) && (lay.left..lay.left + lay.width).contains(&x);
        if inside || edge {
            let sy = y.clamp(lay.top, lay.top + lay.height - 1) - lay.top;
            let sx = x.clamp(lay.left, lay.left + lay.width - 1) - lay.left;
            img.get(sy, sx, c)
        } else {
            0.0
        }
    })
}

fn pad_mask(mask: &Mask, lay: PadLayout) -> Mask {
    let mut out = Mask::zeros(lay.size, lay.size);
    for y in 0..lay.height {
        for x in 0..lay.width {
            out.set(lay.top + y, lay.left + x, mask.get(y, x) == 1);
        }
    }
    out
}

/// Runs `model` through the adapter and returns the composited result at the
/// input dims.
pub fn infer_adapter(img: &Image, mask: &Mask, model: &dyn InpaintModel, mode: AdapterMode) -> Result<Image> {
    ensure!(img.dims() == mask.dims(), "image {:?} and mask {:?} dims differ", img.dims(), mask.dims());
    let (h, w) = img.dims();
    let ts = mode.train_size;
    let pred = match mode.kind {
        AdapterKind::Direct => model.predict(img, mask)?,
        AdapterKind::Resize => {
            ensure!(ts >= MIN_EDGE, "train_size {ts} is below the minimum edge {MIN_EDGE}");
            let out = model.predict(&img.resize_bilinear(ts, ts)?, &mask.resize_nearest(ts, ts))?;
            out.resize_bilinear(h, w)?
        }
        AdapterKind::PadConstant | AdapterKind::PadEdge => {
            let lay = PadLayout::new(h, w, ts);
            ensure!(
                lay.height >= MIN_EDGE && lay.width >= MIN_EDGE,
                "{h}x{w} scaled to long edge {ts} is {}x{}, below the minimum edge {MIN_EDGE}",
                lay.height,
                lay.width
            );
            let small = img.resize_bilinear(lay.height, lay.width)?;
            let small_mask = mask.resize_nearest(lay.height, lay.width);
            let canvas = pad_image(&small, lay, mode.kind == AdapterKind::PadEdge)?;
            let out = model.predict(&canvas, &pad_mask(&small_mask, lay))?;
            out.crop(lay.top, lay.left, lay.height, lay.width)?.resize_bilinear(h, w)?
        }
    };
    ensure!(pred.dims() == (h, w), "model returned {:?} for a {h}x{w} input", pred.dims());
    composite(&pred, img, mask)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad dB value `{s}`"))),
    }
}

/// Metrics of one output image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub adapter: AdapterKind,
    pub index: usize,
    pub image: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// Dumped output, relative to the dump directory.
    pub output: Option<String>,
}

/// Means over one (split, adapter) setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub setting: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// Aligned text table; infinite PSNR is shown capped.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>8}  {:>7}  {:>7}  {:>5}\n", "setting", "PSNR", "SSIM", "LPIPS", "n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.3}  {:>7.4}  {:>7.4}  {:>5}",
                r.setting,
                r.psnr.min(PSNR_TABLE_CAP),
                r.ssim,
                r.lpips,
                r.n_images
            );
        }
        s
    }

    /// One JSON object per image record, then one per summary row.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("record serializes");
            v["type"] = "record".into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["type"] = "row".into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }

    /// Writes `report.txt` and `report.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("report.txt", self.table()), ("report.jsonl", self.to_jsonl())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRef {
    pub label: String,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generator archive; a seeded untrained generator is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub model_seed: u64,
    pub splits: Vec<SplitRef>,
    pub adapters: Vec<AdapterKind>,
    pub train_size: usize,
    pub lpips: PerceptualConfig,
    pub dump_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model_seed: 0,
            splits: Vec::new(),
            adapters: vec![AdapterKind::Direct],
            train_size: 512,
            lpips: PerceptualConfig::default(),
            dump_dir: None,
        }
    }
}

/// Evaluates `model` on every (split, adapter) pair. Outputs are composited
/// and quantized to 8 bits before scoring, exactly as they are dumped.
pub fn evaluate(
    model: &dyn InpaintModel,
    splits: &[(String, SampleManifest)],
    adapters: &[AdapterKind],
    train_size: usize,
    masks: &MaskSpec,
    extractor: &dyn FeatureExtractor,
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (label, manifest) in splits {
        let inputs = (0..manifest.entries.len())
            .map(|i| Ok((manifest.load_image(i)?, manifest.load_mask(i, masks)?)))
            .collect::<Result<Vec<_>>>()?;
        for &kind in adapters {
            let mode = AdapterMode::new(kind, train_size);
            let mut recs = Vec::new();
            for (i, (img, mask)) in inputs.iter().enumerate() {
                let out = infer_adapter(img, mask, model, mode)?.quantized();
                let stem = manifest.entries[i]
                    .image
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string();
                let output = match dump_dir {
                    Some(dir) => {
                        let rel = format!("{label}/{}/{i:05}_{stem}.png", kind.label());
                        let path = dir.join(&rel);
                        if let Some(parent) = path.parent() {
                            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                        }
                        save_image(&out, &path)?;
                        Some(rel)
                    }
                    None => None,
                };
                recs.push(EvalRecord {
                    split: label.clone(),
                    adapter: kind,
                    index: i,
                    image: manifest.entries[i].image.display().to_string(),
                    psnr: psnr(&out, img)?,
                    ssim: ssim(&out, img)?,
                    lpips: lpips(&out, img, extractor)?,
                    output,
                });
            }
            let n = recs.len();
            let mean = |f: fn(&EvalRecord) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    recs.iter().map(f).sum::<f64>() / n as f64
                }
            };
            report.rows.push(EvalRow {
                setting: format!("{label}/{}", kind.label()),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                lpips: mean(|r| r.lpips),
                n_images: n,
            });
            report.records.extend(recs);
        }
    }
    Ok(report)
}

/// Loads the generator and every split, failing with a list of all missing
/// files, then evaluates.
pub fn run_experiment(cfg: &EvalConfig, model_cfg: &GeneratorConfig, masks: &MaskSpec) -> Result<EvalReport> {
    ensure!(!cfg.splits.is_empty(), "no evaluation splits configured");
    ensure!(!cfg.adapters.is_empty(), "no adapters configured");
    let mut missing = Vec::new();
    if let Some(p) = &cfg.checkpoint {
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
    }
    let mut splits = Vec::new();
    for s in &cfg.splits {
        if !s.manifest.is_file() {
            missing.push(s.manifest.display().to_string());
            continue;
        }
        let m = SampleManifest::load(&s.manifest)?;
        if let Err(Error::MissingArtifacts(files)) = m.check_files() {
            missing.extend(files);
        }
        splits.push((s.label.clone(), m));
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let model = match &cfg.checkpoint {
        Some(p) => load_generator_expecting(p, model_cfg)?,
        None => Generator::new(model_cfg.clone(), cfg.model_seed)?,
    };
    let extractor = cfg.lpips.build()?;
    let report = evaluate(
        &model,
        &splits,
        &cfg.adapters,
        cfg.train_size,
        masks,
        &extractor,
        cfg.dump_dir.as_deref(),
    )?;
    if let Some(dir) = &cfg.dump_dir {
        report.write(dir)?;
    }
    Ok(report)
}
