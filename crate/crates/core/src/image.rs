//! Core raster types: RGB images, binary masks, feature maps, query coordinate
//! grids and decoding cells, plus file I/O, resizing and compositing.

use std::path::Path;

use image::{ColorType, GrayImage, ImageBuffer, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Smallest edge the three-stage encoder can consume.
pub const MIN_EDGE: usize = 8;

/// `H x W x 3` raster with values in `[0, 1]`, stored row-major channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height >= MIN_EDGE && width >= MIN_EDGE,
            "image is {height}x{width}, both edges must be at least {MIN_EDGE}"
        );
        ensure!(
            data.len() == height * width * 3,
            "image buffer has {} values, expected {}",
            data.len(),
            height * width * 3
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "image values must be finite and within [0, 1]"
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Converts sample `index` of an `[N, H, W, 3]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, h, w, c) = t.dims4();
        ensure!(c == 3 && index < n, "tensor {:?} has no RGB sample {index}", t.shape());
        let plane = h * w * 3;
        let data = t.data()[index * plane..(index + 1) * plane]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect::<Vec<_>>();
        ensure!(data.iter().all(|v| v.is_finite()), "tensor sample is not finite");
        Self::new(h, w, data)
    }

    /// Crops the window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}+{top}+{left} exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let o = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[o..o + width * 3]);
        }
        Self::new(height, width, data)
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        let data = resize_bilinear(&self.data, self.height, self.width, 3, height, width);
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| quantize(*v) as f64 / 255.0).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling of a channels-last plane.
pub fn resize_bilinear(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Binary raster; 1 marks a missing pixel to synthesize, 0 a known pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "mask must be non-empty");
        ensure!(
            data.len() == height * width,
            "mask buffer has {} values, expected {}",
            data.len(),
            height * width
        );
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            "mask crop exceeds bounds"
        );
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let o = y * self.width + left;
            data.extend_from_slice(&self.data[o..o + width]);
        }
        Self::new(height, width, data)
    }

    /// Nearest-neighbor resize, which keeps the mask binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let pick = |dst: usize, n_in: usize, n_out: usize| {
            (((dst as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = pick(y, self.height, height);
            for x in 0..width {
                data.push(self.data[sy * self.width + pick(x, self.width, width)]);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }
}

/// `h x w x C` grid of real feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && channels > 0,
            "feature map dims must be positive"
        );
        ensure!(
            data.len() == height * width * channels,
            "feature buffer has {} values, expected {}",
            data.len(),
            height * width * channels
        );
        ensure!(data.iter().all(|v| v.is_finite()), "feature map values must be finite");
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, h, w, c) = t.dims4();
        ensure!(index < n, "sample {index} out of range");
        let plane = h * w * c;
        Self::new(h, w, c, t.data()[index * plane..(index + 1) * plane].to_vec())
    }

    /// `[1, H, W, C]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width, self.channels],
            self.data.clone(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Query positions in the normalized `[-1, 1]^2` frame, row-major, each stored
/// as `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn from_coords(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        ensure!(coords.len() == height * width, "grid size mismatch");
        ensure!(
            coords
                .iter()
                .all(|c| c.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))),
            "query coordinates must lie within [-1, 1]"
        );
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

/// Cell-center coordinate of index `i` on an axis of `n` cells.
pub fn cell_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Queries at the centers of an `h x w` grid of cells.
pub fn make_coord_grid(h: usize, w: usize) -> Result<CoordGrid> {
    ensure!(h >= 1 && w >= 1, "coordinate grid dims must be positive, got {h}x{w}");
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = cell_center(i, h);
        for j in 0..w {
            coords.push([cell_center(j, w), y]);
        }
    }
    Ok(CoordGrid {
        height: h,
        width: w,
        coords,
    })
}

/// Height and width of one query pixel measured in source-feature cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub c_h: f64,
    pub c_w: f64,
}

impl Cell {
    pub fn new(c_h: f64, c_w: f64) -> Result<Self> {
        ensure!(
            c_h > 0.0 && c_w > 0.0 && c_h.is_finite() && c_w.is_finite(),
            "cell extents must be positive"
        );
        Ok(Self { c_h, c_w })
    }
}

pub fn make_cell(src_h: usize, src_w: usize, tgt_h: usize, tgt_w: usize) -> Result<Cell> {
    ensure!(
        src_h >= 1 && src_w >= 1 && tgt_h >= 1 && tgt_w >= 1,
        "cell dims must be positive"
    );
    Cell::new(src_h as f64 / tgt_h as f64, src_w as f64 / tgt_w as f64)
}

/// Blends `pred` into the missing region of `input`: `mask * pred + (1 - mask) * input`.
pub fn composite(pred: &Image, input: &Image, mask: &Mask) -> Result<Image> {
    ensure!(
        pred.dims() == input.dims() && input.dims() == mask.dims(),
        "composite dims differ: pred {:?}, input {:?}, mask {:?}",
        pred.dims(),
        input.dims(),
        mask.dims()
    );
    let data = input
        .data
        .iter()
        .zip(&pred.data)
        .enumerate()
        .map(|(i, (&known, &p))| {
            if mask.data[i / 3] == 1 {
                p.clamp(0.0, 1.0)
            } else {
                known
            }
        })
        .collect();
    Image::new(input.height, input.width, data)
}

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| codec_err(path, e))
}

/// Loads an 8-bit RGB PNG or JPEG, mapping `0..=255` to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = open(path)?;
    ensure!(
        img.color() == ColorType::Rgb8,
        "{} is {:?}, expected 8-bit RGB",
        path.display(),
        img.color()
    );
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf: RgbImage = ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => codec_err(path, other),
        })
}

/// Loads a single-channel mask PNG whose values are 0 or 255.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = open(path)?;
    ensure!(
        img.color() == ColorType::L8,
        "{} is {:?}, expected an 8-bit single-channel mask",
        path.display(),
        img.color()
    );
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for v in gray.into_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::Validation(format!(
                    "{} contains mask value {other}; only 0 and 255 are allowed",
                    path.display()
                )))
            }
        }
    }
    Mask::new(h as usize, w as usize, data)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    let buf: GrayImage = ImageBuffer::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => codec_err(path, other),
        })
}

/// Stacks same-sized images into an `[N, H, W, 3]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    ensure!(!images.is_empty(), "empty image batch");
    let (h, w) = images[0].dims();
    ensure!(
        images.iter().all(|i| i.dims() == (h, w)),
        "images in a batch must share dims"
    );
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(vec![images.len(), h, w, 3], data))
}

/// Stacks masks into an `[N, H, W, 1]` tensor of 0.0 / 1.0.
pub fn masks_to_tensor(masks: &[Mask]) -> Result<Tensor> {
    ensure!(!masks.is_empty(), "empty mask batch");
    let (h, w) = masks[0].dims();
    ensure!(masks.iter().all(|m| m.dims() == (h, w)), "masks in a batch must share dims");
    let data = masks
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| v as f64))
        .collect();
    Ok(Tensor::new(vec![masks.len(), h, w, 1], data))
}
