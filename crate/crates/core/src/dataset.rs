//! Training corpora with adaptive aspect-ratio cropping, real-world test splits,
//! plain-text sample manifests and deterministic batch iteration.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{load_image, load_mask, save_image, Image, Mask, MIN_EDGE};
use crate::maskgen::{generate_freeform_mask, MaskSpec};
use crate::rng::{derive_seed, label, SeededRng};

/// Aspect ratio as `height : width`, written `"H:W"` in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Ratio {
    pub h: u32,
    pub w: u32,
}

impl Ratio {
    pub const fn new(h: u32, w: u32) -> Self {
        Self { h, w }
    }

    /// Crop dims for this ratio at a pixel budget, each rounded to the nearest
    /// multiple of `round_to`.
    pub fn dims_for_area(self, target_area: f64, round_to: usize) -> (usize, usize) {
        let q = self.h as f64 / self.w as f64;
        let round = |v: f64| {
            let step = round_to.max(1) as f64;
            ((v / step).round() * step).max(step) as usize
        };
        (round((target_area * q).sqrt()), round((target_area / q).sqrt()))
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.h, self.w)
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("ratio `{s}` is not of the form H:W"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let h = a.trim().parse().map_err(|_| bad())?;
        let w = b.trim().parse().map_err(|_| bad())?;
        ensure!(h > 0 && w > 0, "ratio `{s}` must have positive terms");
        Ok(Self { h, w })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtsConfig {
    /// Pixel budget of each crop.
    pub target_area: f64,
    pub ratios: Vec<Ratio>,
    /// Crop edges are rounded to a multiple of this.
    pub round_to: usize,
}

impl Default for AtsConfig {
    fn default() -> Self {
        Self {
            target_area: 512.0 * 512.0,
            ratios: vec![
                Ratio::new(1, 1),
                Ratio::new(3, 4),
                Ratio::new(4, 3),
                Ratio::new(16, 9),
            ],
            round_to: 1,
        }
    }
}

impl AtsConfig {
    /// Ratios whose crop fits inside an `h x w` image.
    pub fn admissible(&self, h: usize, w: usize) -> Vec<(Ratio, (usize, usize))> {
        self.ratios
            .iter()
            .map(|&r| (r, r.dims_for_area(self.target_area, self.round_to)))
            .filter(|&(_, (ch, cw))| ch <= h && cw <= w && ch >= MIN_EDGE && cw >= MIN_EDGE)
            .collect()
    }

    pub fn draw_ratio(&self, h: usize, w: usize, rng: &mut SeededRng) -> Result<(Ratio, (usize, usize))> {
        let options = self.admissible(h, w);
        ensure!(
            !options.is_empty(),
            "{h}x{w} image is smaller than every crop at area {}",
            self.target_area
        );
        Ok(options[rng.range_usize(0, options.len() - 1)])
    }
}

/// Offset along one axis for a window of `len` inside `total` that keeps the
/// center pixel `total / 2` covered.
fn center_keeping_offset(total: usize, len: usize, rng: &mut SeededRng) -> usize {
    let c = total / 2;
    let lo = (c + 1).saturating_sub(len);
    let hi = c.min(total - len);
    rng.range_usize(lo, hi)
}

/// Random marginal crop of `dims` that always contains the image center.
pub fn ats_crop_to(img: &Image, dims: (usize, usize), rng: &mut SeededRng) -> Result<Image> {
    let (h, w) = img.dims();
    ensure!(
        dims.0 <= h && dims.1 <= w,
        "crop {}x{} does not fit {h}x{w}",
        dims.0,
        dims.1
    );
    let top = center_keeping_offset(h, dims.0, rng);
    let left = center_keeping_offset(w, dims.1, rng);
    img.crop(top, left, dims.0, dims.1)
}

/// Adaptive training crop: draws a ratio among those that fit, then crops a
/// center-containing window of roughly `cfg.target_area` pixels.
pub fn ats_crop(img: &Image, rng: &mut SeededRng, cfg: &AtsConfig) -> Result<Image> {
    let (_, dims) = cfg.draw_ratio(img.height(), img.width(), rng)?;
    ats_crop_to(img, dims, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropPolicy {
    Center,
    Sides,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub target_h: usize,
    pub target_w: usize,
    pub crop_policy: CropPolicy,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.target_h >= MIN_EDGE && self.target_w >= MIN_EDGE,
            "split `{}` target {}x{} below {MIN_EDGE}",
            self.name,
            self.target_h,
            self.target_w
        );
        Ok(())
    }

    /// Crop window `(top, left)` for a source of `h x w`, or why it is rejected.
    pub fn window(&self, h: usize, w: usize) -> std::result::Result<(usize, usize), String> {
        let (th, tw) = (self.target_h, self.target_w);
        match self.crop_policy {
            CropPolicy::None => Ok((0, 0)),
            _ if th > h || tw > w => Err(format!("source {h}x{w} smaller than target {th}x{tw}")),
            CropPolicy::Sides if th != h && tw != w => Err(format!(
                "sides policy crops one axis only, but {h}x{w} -> {th}x{tw} crops both"
            )),
            CropPolicy::Center | CropPolicy::Sides => Ok(((h - th) / 2, (w - tw) / 2)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSource {
    File(PathBuf),
    Seed(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: MaskSource,
    /// Crop window `(top, left)` applied to the decoded image, if any.
    pub offset: Option<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

/// Line-delimited sample list.
///
/// Each non-comment line holds five tab-separated fields:
/// `image  mask  offset  height  width`, where `mask` is `seed:<n>` or a path,
/// and `offset` is `-` or `<top>,<left>`. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleManifest {
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "# in2 manifest v1: image\tmask\toffset\theight\twidth";

impl SampleManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let mask = match &e.mask {
                MaskSource::File(p) => p.display().to_string(),
                MaskSource::Seed(n) => format!("seed:{n}"),
            };
            let offset = e
                .offset
                .map(|(t, l)| format!("{t},{l}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{}\t{mask}\t{offset}\t{}\t{}",
                e.image.display(),
                e.height,
                e.width
            );
        }
        s
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Validation(format!("manifest line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            };
            let mask = match fields[1].strip_prefix("seed:") {
                Some(n) => MaskSource::Seed(n.parse().map_err(|_| bad("bad mask seed"))?),
                None => MaskSource::File(resolve(fields[1])),
            };
            let offset = match fields[2] {
                "-" => None,
                o => {
                    let (t, l) = o.split_once(',').ok_or_else(|| bad("bad offset"))?;
                    Some((
                        t.parse().map_err(|_| bad("bad offset"))?,
                        l.parse().map_err(|_| bad("bad offset"))?,
                    ))
                }
            };
            entries.push(ManifestEntry {
                image: resolve(fields[0]),
                mask,
                offset,
                height: fields[3].parse().map_err(|_| bad("bad height"))?,
                width: fields[4].parse().map_err(|_| bad("bad width"))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Fails naming every referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        let mut missing = Vec::new();
        for e in &self.entries {
            if !e.image.is_file() {
                missing.push(e.image.display().to_string());
            }
            if let MaskSource::File(p) = &e.mask {
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }

    /// Decodes entry `i` and applies its crop window.
    pub fn load_image(&self, i: usize) -> Result<Image> {
        let e = &self.entries[i];
        let img = load_image(&e.image)?;
        let img = match e.offset {
            Some((t, l)) => img.crop(t, l, e.height, e.width)?,
            None => img,
        };
        ensure!(
            img.dims() == (e.height, e.width),
            "{} is {:?}, manifest declares {}x{}",
            e.image.display(),
            img.dims(),
            e.height,
            e.width
        );
        Ok(img)
    }

    /// Mask of entry `i`: loaded from file or regenerated from its seed.
    pub fn load_mask(&self, i: usize, spec: &MaskSpec) -> Result<Mask> {
        let e = &self.entries[i];
        let mask = match &e.mask {
            MaskSource::File(p) => load_mask(p)?,
            MaskSource::Seed(s) => generate_freeform_mask(e.height, e.width, spec, &mut SeededRng::new(*s))?,
        };
        ensure!(
            mask.dims() == (e.height, e.width),
            "mask for {} is {:?}, expected {}x{}",
            e.image.display(),
            mask.dims(),
            e.height,
            e.width
        );
        Ok(mask)
    }
}

/// Sorted list of PNG/JPEG files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitOutcome {
    pub manifest: SampleManifest,
    /// Sources that could not be cropped to the target, with the reason.
    pub rejects: Vec<(PathBuf, String)>,
}

/// Builds a deterministic real-world test split from every image in `src_dir`.
/// Entry `i` gets mask seed `derive_seed(mask_seed, [i])`.
pub fn build_realworld_split(src_dir: &Path, spec: &SplitSpec, mask_seed: u64) -> Result<SplitOutcome> {
    spec.validate()?;
    let mut manifest = SampleManifest::default();
    let mut rejects = Vec::new();
    for path in list_images(src_dir)? {
        let (w, h) = match ::image::image_dimensions(&path) {
            Ok(d) => (d.0 as usize, d.1 as usize),
            Err(e) => {
                rejects.push((path, format!("cannot read dims: {e}")));
                continue;
            }
        };
        match spec.window(h, w) {
            Ok(offset) => {
                let (th, tw) = match spec.crop_policy {
                    CropPolicy::None => (h, w),
                    _ => (spec.target_h, spec.target_w),
                };
                let seed = derive_seed(mask_seed, &[manifest.entries.len() as u64]);
                manifest.entries.push(ManifestEntry {
                    image: path,
                    mask: MaskSource::Seed(seed),
                    offset: (spec.crop_policy != CropPolicy::None).then_some(offset),
                    height: th,
                    width: tw,
                });
            }
            Err(reason) => rejects.push((path, reason)),
        }
    }
    Ok(SplitOutcome { manifest, rejects })
}

/// Writes every cropped image of `manifest` as a PNG in `out_dir` and returns
/// a manifest pointing at the written files (relative to `out_dir`).
pub fn materialize_split(manifest: &SampleManifest, out_dir: &Path) -> Result<SampleManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = SampleManifest::default();
    for (i, e) in manifest.entries.iter().enumerate() {
        let stem = e
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let name = format!("{i:05}_{stem}.png");
        save_image(&manifest.load_image(i)?, out_dir.join(&name))?;
        out.entries.push(ManifestEntry {
            image: PathBuf::from(name),
            mask: e.mask.clone(),
            offset: None,
            height: e.height,
            width: e.width,
        });
    }
    Ok(out)
}

/// How training samples are cut from their source images.
#[derive(Clone, Debug, PartialEq)]
pub enum CropMode {
    /// Adaptive crops; one ratio per batch.
    Ats(AtsConfig),
    /// Centered crop of fixed dims.
    Fixed { height: usize, width: usize },
    /// Images are used as declared in the manifest.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub drop_last: bool,
    pub crop: CropMode,
    pub mask_spec: MaskSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    /// Manifest indices of the samples.
    pub indices: Vec<usize>,
}

/// Small least-recently-used cache of decoded source images.
pub struct ImageCache {
    capacity: usize,
    map: HashMap<usize, Image>,
    order: VecDeque<usize>,
}

impl ImageCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn get_or_load(&mut self, key: usize, load: impl FnOnce() -> Result<Image>) -> Result<Image> {
        if let Some(img) = self.map.get(&key) {
            let img = img.clone();
            self.order.retain(|&k| k != key);
            self.order.push_back(key);
            return Ok(img);
        }
        let img = load()?;
        if self.capacity > 0 {
            if self.map.len() == self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.map.remove(&old);
                }
            }
            self.map.insert(key, img.clone());
            self.order.push_back(key);
        }
        Ok(img)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Deterministic epoch-wise batching. Entries are grouped by declared dims,
/// shuffled within groups, chunked, and the batch order shuffled, all from
/// sub-seeds of `(seed, epoch)`.
pub struct BatchIterator {
    manifest: SampleManifest,
    config: BatchConfig,
    cache: ImageCache,
}

impl BatchIterator {
    pub fn new(manifest: SampleManifest, config: BatchConfig) -> Result<Self> {
        ensure!(config.batch_size >= 1, "batch size must be at least 1");
        ensure!(!manifest.entries.is_empty(), "manifest is empty");
        config.mask_spec.validate()?;
        Ok(Self {
            manifest,
            config,
            cache: ImageCache::new(64),
        })
    }

    pub fn manifest(&self) -> &SampleManifest {
        &self.manifest
    }

    /// Manifest indices of every batch of `epoch`, in emission order.
    pub fn plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.manifest.entries.iter().enumerate() {
            groups.entry((e.height, e.width)).or_default().push(i);
        }
        let mut rng = SeededRng::derive(self.config.seed, &[label("plan"), epoch]);
        let mut batches = Vec::new();
        for (_, mut idx) in groups {
            rng.shuffle(&mut idx);
            for chunk in idx.chunks(self.config.batch_size) {
                if chunk.len() == self.config.batch_size || !self.config.drop_last {
                    batches.push(chunk.to_vec());
                }
            }
        }
        rng.shuffle(&mut batches);
        batches
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan(0).len()
    }

    /// Loads batch `b` of `epoch` given that epoch's plan.
    pub fn load(&mut self, epoch: u64, b: usize, indices: &[usize]) -> Result<Batch> {
        let seed = self.config.seed;
        let mut crop_rng = SeededRng::derive(seed, &[label("crop"), epoch, b as u64]);
        let mut sources = Vec::with_capacity(indices.len());
        for &i in indices {
            let manifest = &self.manifest;
            sources.push(self.cache.get_or_load(i, || manifest.load_image(i))?);
        }
        let dims = sources[0].dims();
        ensure!(
            sources.iter().all(|s| s.dims() == dims),
            "batch {b} of epoch {epoch} mixes source dims"
        );
        let images = match &self.config.crop {
            CropMode::None => sources,
            CropMode::Fixed { height, width } => {
                let top = dims.0.checked_sub(*height);
                let left = dims.1.checked_sub(*width);
                let (top, left) = top.zip(left).ok_or_else(|| {
                    Error::Validation(format!("{dims:?} source smaller than fixed crop {height}x{width}"))
                })?;
                sources
                    .iter()
                    .map(|s| s.crop(top / 2, left / 2, *height, *width))
                    .collect::<Result<_>>()?
            }
            CropMode::Ats(cfg) => {
                let (_, crop) = cfg.draw_ratio(dims.0, dims.1, &mut crop_rng)?;
                sources
                    .iter()
                    .map(|s| ats_crop_to(s, crop, &mut crop_rng))
                    .collect::<Result<_>>()?
            }
        };
        let mut masks = Vec::with_capacity(indices.len());
        for (img, &i) in images.iter().zip(indices) {
            let mask = match (&self.manifest.entries[i].mask, &self.config.crop) {
                (MaskSource::File(_), CropMode::None) => self.manifest.load_mask(i, &self.config.mask_spec)?,
                _ => {
                    let mut rng = SeededRng::derive(seed, &[label("mask"), epoch, i as u64]);
                    generate_freeform_mask(img.height(), img.width(), &self.config.mask_spec, &mut rng)?
                }
            };
            masks.push(mask);
        }
        Ok(Batch {
            images,
            masks,
            indices: indices.to_vec(),
        })
    }

    /// Every batch of `epoch` in order.
    pub fn epoch(&mut self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let plan = self.plan(epoch);
        plan.into_iter()
            .enumerate()
            .map(move |(b, idx)| self.load(epoch, b, &idx))
    }
}
