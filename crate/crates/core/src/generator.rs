//! The inpainting generator: a downsampling encoder of FFC blocks, a body of
//! neighbor hybrid attention blocks and an implicit pyramid decoder that can be
//! queried on any output grid.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Error, Result};
use crate::image::{images_to_tensor, make_cell, make_coord_grid, masks_to_tensor, Cell, CoordGrid, Image, Mask};
use crate::params::{Binder, Init, ParamStore, Scope};
use crate::primitives::{channel_attention, ffc_block, global_channels, neighborhood_attention, NabConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stride-2 conv, FFC block, channel attention per stage.
    Dpb,
    /// Stride-2 conv and ReLU per stage.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    Nhab,
    /// Residual FFC blocks in place of attention blocks.
    Ffc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMode {
    /// `(h / H, w / W)`.
    Raw,
    /// `(2 / H', 2 / W')` in the normalized frame of the query grid.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    /// Bilinear area weights.
    Area,
    /// Weights proportional to inverse offset length.
    InverseDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InrbMode {
    Learned,
    /// The corner transform and the output MLP are pass-throughs, so the block
    /// reduces to interpolation of the source features.
    InterpolationOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output channels of the three encoder stages.
    pub encoder_channels: Vec<usize>,
    pub nhab_groups: usize,
    pub nhab_per_group: usize,
    pub alpha: f64,
    pub pyramid_layers: usize,
    /// Feature widths of the decoder layers; the last `pyramid_layers` are used.
    pub decoder_channels: Vec<usize>,
    pub decoder_hidden: usize,
    pub nab: NabConfig,
    pub mlp_ratio: usize,
    pub cab_reduction: usize,
    /// Fraction of FFC channels on the spectral branch.
    pub ffc_global_ratio: f64,
    pub spectral_nonlinear: bool,
    /// Drop the residual around the attention branch of each hybrid block.
    pub strict_eq1: bool,
    pub encoder: EncoderKind,
    pub body: BodyKind,
    pub cell: CellMode,
    pub ensemble: EnsembleKind,
    /// Queries decoded per chunk when not training.
    pub query_chunk: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256],
            nhab_groups: 2,
            nhab_per_group: 4,
            alpha: 0.03,
            pyramid_layers: 3,
            decoder_channels: vec![256, 128, 64],
            decoder_hidden: 128,
            nab: NabConfig::default(),
            mlp_ratio: 2,
            cab_reduction: 4,
            ffc_global_ratio: 0.25,
            spectral_nonlinear: true,
            strict_eq1: false,
            encoder: EncoderKind::Dpb,
            body: BodyKind::Nhab,
            cell: CellMode::Raw,
            ensemble: EnsembleKind::Area,
            query_chunk: 4096,
        }
    }
}

impl GeneratorConfig {
    /// Small widths for fast CPU experiments.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64],
            nhab_groups: 2,
            nhab_per_group: 2,
            decoder_channels: vec![64, 32, 16],
            decoder_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() != 3 || self.encoder_channels.contains(&0) {
            return bad(format!(
                "encoder_channels must list 3 positive stage widths, got {:?}",
                self.encoder_channels
            ));
        }
        if self.pyramid_layers == 0 || self.pyramid_layers > self.decoder_channels.len() {
            return bad(format!(
                "pyramid_layers {} must be in 1..={}",
                self.pyramid_layers,
                self.decoder_channels.len()
            ));
        }
        if self.decoder_channels.contains(&0) || self.decoder_hidden == 0 {
            return bad("decoder widths must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if self.mlp_ratio == 0 || self.cab_reduction == 0 || self.query_chunk == 0 {
            return bad("mlp_ratio, cab_reduction and query_chunk must be positive".into());
        }
        for &c in &self.encoder_channels {
            global_channels(c, self.ffc_global_ratio).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.nab.validate(self.width())
    }

    /// Channel width of the attention body.
    pub fn width(&self) -> usize {
        self.encoder_channels[2]
    }

    fn decoder_widths(&self) -> &[usize] {
        &self.decoder_channels[self.decoder_channels.len() - self.pyramid_layers..]
    }
}

/// Size of the input before and after padding to a multiple of 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub h: usize,
    pub w: usize,
    pub hp: usize,
    pub wp: usize,
}

impl PadInfo {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            hp: h.div_ceil(8) * 8,
            wp: w.div_ceil(8) * 8,
        }
    }
}

/// Reflection padding of an `[N, H, W, C]` tensor at the bottom and right.
pub fn reflect_pad(t: &Tensor, hp: usize, wp: usize) -> Tensor {
    let (n, h, w, c) = t.dims4();
    assert!(hp >= h && wp >= w && hp - h < h && wp - w < w, "reflection pad too large");
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    let mut out = Vec::with_capacity(n * hp * wp * c);
    for b in 0..n {
        for y in 0..hp {
            let sy = reflect(y, h);
            for x in 0..wp {
                let o = ((b * h + sy) * w + reflect(x, w)) * c;
                out.extend_from_slice(&t.data()[o..o + c]);
            }
        }
    }
    Tensor::new(vec![n, hp, wp, c], out)
}

/// Network input: known pixels mapped to `[-1, 1]` (zero where missing) and
/// the mask, reflection-padded to a multiple of 8.
pub fn encoder_input(images: &Tensor, masks: &Tensor) -> Result<(Tensor, PadInfo)> {
    let (n, h, w, c) = images.dims4();
    ensure!(c == 3, "images must have 3 channels");
    ensure!(masks.shape() == [n, h, w, 1], "mask tensor {:?} does not match images", masks.shape());
    let mut data = Vec::with_capacity(n * h * w * 4);
    for (px, m) in images.data().chunks_exact(3).zip(masks.data()) {
        data.extend(px.iter().map(|v| (2.0 * v - 1.0) * (1.0 - m)));
        data.push(*m);
    }
    let pad = PadInfo::new(h, w);
    let x = Tensor::new(vec![n, h, w, 4], data);
    Ok((reflect_pad(&x, pad.hp, pad.wp), pad))
}

/// Downsample processing block: stride-2 conv, FFC block, channel attention.
pub fn dpb_forward(s: &Scope, x: &Var, cout: usize, cfg: &GeneratorConfig) -> Result<Var> {
    let (_, h, w, cin) = x.value().dims4();
    ensure!(h % 2 == 0 && w % 2 == 0, "downsample block needs even dims, got {h}x{w}");
    let d = s.sub("down").conv(x, 3, cin, cout, 2, 1);
    match cfg.encoder {
        EncoderKind::Dpb => {
            let f = ffc_block(&s.sub("ffc"), &d, cout, cfg.ffc_global_ratio, cfg.spectral_nonlinear)?;
            Ok(channel_attention(&s.sub("cab"), &f, cfg.cab_reduction))
        }
        EncoderKind::Plain => Ok(d.relu()),
    }
}

/// Three downsampling stages over the padded network input.
pub fn encode(s: &Scope, input: &Tensor, cfg: &GeneratorConfig) -> Result<Var> {
    let mut x = Var::constant(input.clone());
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        x = dpb_forward(&s.sub(i), &x, c, cfg)?;
    }
    Ok(x)
}

/// Neighbor hybrid attention block:
/// `X_M = NA(LN X) + alpha * CAB(LN X) + X`, `Y = MLP(LN X_M) + X_M`.
pub fn nhab_forward(s: &Scope, x: &Var, cfg: &GeneratorConfig) -> Result<Var> {
    let c = x.value().last_dim();
    let xn = s.sub("ln1").layer_norm(x, c);
    let mut xm = neighborhood_attention(&s.sub("na"), &xn, &cfg.nab)?;
    let cab = channel_attention(&s.sub("cab"), &xn, cfg.cab_reduction);
    xm = xm.add(&cab.scale(cfg.alpha));
    if !cfg.strict_eq1 {
        xm = xm.add(x);
    }
    let hidden = c * cfg.mlp_ratio;
    let y = s.sub("ln2").layer_norm(&xm, c);
    let y = s.sub("mlp").sub("fc1").linear(&y, c, hidden, true).gelu();
    let y = s.sub("mlp").sub("fc2").linear(&y, hidden, c, true);
    Ok(y.add(&xm))
}

/// Groups of blocks, each closed by a 3x3 conv and a group residual.
pub fn body_forward(s: &Scope, x: &Var, cfg: &GeneratorConfig) -> Result<Var> {
    let c = x.value().last_dim();
    let mut x = x.clone();
    for g in 0..cfg.nhab_groups {
        let gs = s.sub(g);
        let mut y = x.clone();
        for b in 0..cfg.nhab_per_group {
            y = match cfg.body {
                BodyKind::Nhab => nhab_forward(&gs.sub(b), &y, cfg)?,
                BodyKind::Ffc => {
                    let f = ffc_block(&gs.sub(b), &y, c, cfg.ffc_global_ratio, cfg.spectral_nonlinear)?;
                    y.add(&f)
                }
            };
        }
        x = gs.sub("conv").conv(&y, 3, c, c, 1, 1).add(&x);
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InrbConfig {
    pub cout: usize,
    pub hidden: usize,
    pub mode: InrbMode,
    pub ensemble: EnsembleKind,
    pub query_chunk: usize,
}

/// The four neighbors of each query, their local-ensemble weights and the
/// signed offsets from each neighbor to the query in cell units.
#[derive(Clone, Debug)]
pub struct Neighbors {
    /// Row of `[N * hs * ws, C]` per (sample, query, corner).
    pub index: Vec<usize>,
    pub weights: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

fn axis_neighbors(coord: f64, len: usize) -> ([usize; 2], [f64; 2], [f64; 2]) {
    let u = (coord + 1.0) / 2.0 * len as f64 - 0.5;
    let last = len - 1;
    let fl = u.floor();
    let (i0, i1) = if fl < 0.0 {
        (0, 0)
    } else if fl as usize >= last {
        (last, last)
    } else {
        (fl as usize, fl as usize + 1)
    };
    let off = [u - i0 as f64, u - i1 as f64];
    // Each corner takes the share of the distance to the opposite corner.
    let wts = if i0 == i1 {
        [0.5, 0.5]
    } else {
        [i1 as f64 - u, u - i0 as f64]
    };
    ([i0, i1], wts, off)
}

/// Neighbor lookup for `coords` on a `hs x ws` source grid, for `n` samples.
pub fn neighbors(coords: &[[f64; 2]], n: usize, hs: usize, ws: usize, ensemble: EnsembleKind) -> Neighbors {
    let q = coords.len();
    let mut out = Neighbors {
        index: Vec::with_capacity(n * q * 4),
        weights: Vec::with_capacity(n * q * 4),
        offsets: Vec::with_capacity(n * q * 4),
    };
    for b in 0..n {
        for &[x, y] in coords {
            let (xi, xw, xo) = axis_neighbors(x, ws);
            let (yi, yw, yo) = axis_neighbors(y, hs);
            let mut w4 = [0.0; 4];
            for cy in 0..2 {
                for cx in 0..2 {
                    let k = cy * 2 + cx;
                    out.index.push((b * hs + yi[cy]) * ws + xi[cx]);
                    out.offsets.push([xo[cx], yo[cy]]);
                    w4[k] = match ensemble {
                        EnsembleKind::Area => yw[cy] * xw[cx],
                        EnsembleKind::InverseDistance => 1.0 / (xo[cx].hypot(yo[cy]) + 1e-9),
                    };
                }
            }
            let total: f64 = w4.iter().sum();
            out.weights.extend(w4.iter().map(|w| w / total));
        }
    }
    out
}

/// Implicit neural representation block: for every query, transforms the four
/// neighboring source features together with their offsets, blends them with
/// ensemble weights, and refines the blend with an MLP that also sees the cell.
///
/// `src` is `[N, hs, ws, C]`; the result is `[N, grid.h, grid.w, cout]` (or
/// `C` channels in interpolation-only mode).
pub fn inrb_forward(s: &Scope, src: &Var, grid: &CoordGrid, cell: Cell, cfg: &InrbConfig) -> Result<Var> {
    let (n, hs, ws, c) = src.value().dims4();
    let coords = grid.coords();
    ensure!(
        coords.iter().flatten().all(|v| (-1.0..=1.0).contains(v)),
        "query coordinates must lie within [-1, 1]"
    );
    let cout = match cfg.mode {
        InrbMode::Learned => cfg.cout,
        InrbMode::InterpolationOnly => c,
    };
    // Shared first layer of the corner transform, applied once per source cell.
    let src_hidden = match cfg.mode {
        InrbMode::Learned => Some(s.sub("f").sub("a").linear(src, c, cfg.hidden, false)),
        InrbMode::InterpolationOnly => None,
    };
    let run = |chunk: &[[f64; 2]]| -> Var {
        let nb = neighbors(chunk, n, hs, ws, cfg.ensemble);
        let weights: Rc<[f64]> = nb.weights.into();
        let index: Rc<[usize]> = nb.index.into();
        match &src_hidden {
            None => src.gather_rows(index).group_weighted_sum(weights, 4),
            Some(h) => {
                let offs = Tensor::new(
                    vec![nb.offsets.len(), 2],
                    nb.offsets.iter().flatten().copied().collect(),
                );
                let d = s.sub("f").sub("d").linear(&Var::constant(offs), 2, cfg.hidden, true);
                let z = h.gather_rows(index).add(&d).relu();
                let a = z.group_weighted_sum(weights, 4);
                let a = s.sub("f").sub("out").linear(&a, cfg.hidden, cfg.cout, true);
                let rows = a.shape()[0];
                let cells = Tensor::new(
                    vec![rows, 2],
                    (0..rows).flat_map(|_| [cell.c_h, cell.c_w]).collect(),
                );
                let m = Var::concat_last(&[a, Var::constant(cells)]);
                let m = s.sub("mlp").sub("fc1").linear(&m, cfg.cout + 2, cfg.hidden, true).relu();
                s.sub("mlp").sub("fc2").linear(&m, cfg.hidden, cfg.cout, true)
            }
        }
    };
    let q = coords.len();
    let out_shape = vec![n, grid.height(), grid.width(), cout];
    if s.is_training() || q <= cfg.query_chunk {
        return Ok(run(coords).reshape(out_shape));
    }
    let mut out = vec![0.0; n * q * cout];
    for start in (0..q).step_by(cfg.query_chunk) {
        let end = (start + cfg.query_chunk).min(q);
        let part = run(&coords[start..end]);
        let len = end - start;
        for b in 0..n {
            let src_rows = &part.value().data()[b * len * cout..(b + 1) * len * cout];
            out[(b * q + start) * cout..(b * q + end) * cout].copy_from_slice(src_rows);
        }
    }
    Ok(Var::constant(Tensor::new(out_shape, out)))
}

/// Queries covering only the unpadded `pad.h x pad.w` region of the padded
/// frame, on a `th x tw` grid.
pub fn unpadded_grid(pad: PadInfo, th: usize, tw: usize) -> Result<CoordGrid> {
    ensure!(th >= 1 && tw >= 1, "target dims must be positive");
    let fy = pad.h as f64 / pad.hp as f64;
    let fx = pad.w as f64 / pad.wp as f64;
    let mut coords = Vec::with_capacity(th * tw);
    for r in 0..th {
        let y = -1.0 + (2 * r + 1) as f64 / th as f64 * fy;
        for c in 0..tw {
            coords.push([-1.0 + (2 * c + 1) as f64 / tw as f64 * fx, y]);
        }
    }
    CoordGrid::from_coords(th, tw, coords)
}

fn layer_cell(mode: CellMode, raw: Cell, hs: usize, ws: usize) -> Cell {
    match mode {
        CellMode::Raw => raw,
        CellMode::Normalized => Cell {
            c_h: 2.0 * raw.c_h / hs as f64,
            c_w: 2.0 * raw.c_w / ws as f64,
        },
    }
}

/// Implicit pyramid decoder: every layer but the last doubles the working
/// resolution over the padded frame; the last queries the `th x tw` grid of
/// the unpadded region. A linear head and sigmoid map to RGB.
pub fn decode(s: &Scope, feat: &Var, pad: PadInfo, th: usize, tw: usize, cfg: &GeneratorConfig) -> Result<Var> {
    let widths = cfg.decoder_widths();
    let mut cur = feat.clone();
    for (i, &cout) in widths.iter().enumerate() {
        let (_, hs, ws, _) = cur.value().dims4();
        let last = i + 1 == widths.len();
        let (grid, raw) = if last {
            (
                unpadded_grid(pad, th, tw)?,
                make_cell(hs * pad.h, ws * pad.w, th * pad.hp, tw * pad.wp)?,
            )
        } else {
            (make_coord_grid(2 * hs, 2 * ws)?, make_cell(hs, ws, 2 * hs, 2 * ws)?)
        };
        let icfg = InrbConfig {
            cout,
            hidden: cfg.decoder_hidden,
            mode: InrbMode::Learned,
            ensemble: cfg.ensemble,
            query_chunk: cfg.query_chunk,
        };
        cur = inrb_forward(&s.sub(i), &cur, &grid, layer_cell(cfg.cell, raw, hs, ws), &icfg)?;
    }
    // A small head keeps the sigmoid out of saturation at init.
    let c = cur.value().last_dim();
    let head = s.sub("head");
    let w = head.param("w", &[c, 3], Init::Uniform(0.01 / (c as f64).sqrt()));
    let b = head.param("b", &[3], Init::Zeros);
    Ok(cur.linear(&w, Some(&b)).sigmoid())
}

/// Full forward on `[N, H, W, 3]` images and `[N, H, W, 1]` masks, returning
/// the raw `[N, th, tw, 3]` prediction.
pub fn forward_tensors(
    binder: &Binder,
    images: &Tensor,
    masks: &Tensor,
    target: Option<(usize, usize)>,
    cfg: &GeneratorConfig,
) -> Result<Var> {
    let (_, h, w, _) = images.dims4();
    ensure!(h >= 8 && w >= 8, "input {h}x{w} below the 8x8 minimum");
    let (th, tw) = target.unwrap_or((h, w));
    let (input, pad) = encoder_input(images, masks)?;
    let feat = encode(&binder.scope("enc"), &input, cfg)?;
    let feat = body_forward(&binder.scope("body"), &feat, cfg)?;
    decode(&binder.scope("dec"), &feat, pad, th, tw, cfg)
}

/// Generator configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
}

impl Generator {
    /// Validates the config and materializes every parameter from `seed`.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        {
            let binder = Binder::init(&mut params);
            let img = Tensor::full(vec![1, 8, 8, 3], 0.5);
            let mask = Tensor::zeros(vec![1, 8, 8, 1]);
            forward_tensors(&binder, &img, &mask, None, &config)?;
        }
        Ok(Self { config, params })
    }

    /// Raw prediction at `target` dims (input dims by default).
    pub fn forward(&self, img: &Image, mask: &Mask, target: Option<(usize, usize)>) -> Result<Image> {
        ensure!(
            img.dims() == mask.dims(),
            "image {:?} and mask {:?} dims differ",
            img.dims(),
            mask.dims()
        );
        let binder = Binder::frozen(&self.params);
        let y = forward_tensors(
            &binder,
            &images_to_tensor(std::slice::from_ref(img))?,
            &masks_to_tensor(std::slice::from_ref(mask))?,
            target,
            &self.config,
        )?;
        ensure!(y.value().is_finite(), "generator produced non-finite output");
        Image::from_tensor(y.value(), 0)
    }

    /// Prediction composited into the known pixels of `img`.
    pub fn inpaint(&self, img: &Image, mask: &Mask) -> Result<Image> {
        crate::image::composite(&self.forward(img, mask, None)?, img, mask)
    }
}

/// Functional form of [`Generator::forward`].
pub fn generator_forward(gen: &Generator, img: &Image, mask: &Mask, target: Option<(usize, usize)>) -> Result<Image> {
    gen.forward(img, mask, target)
}
