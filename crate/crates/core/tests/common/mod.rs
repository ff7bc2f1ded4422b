#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use in2::adversarial::DiscConfig;
use in2::dataset::{AtsConfig, ManifestEntry, MaskSource, SampleManifest};
use in2::generator::{Generator, GeneratorConfig};
use in2::image::{save_image, save_mask, Image, Mask};
use in2::maskgen::{generate_freeform_mask, MaskSpec};
use in2::rng::{label, SeededRng};
use in2::training::{masked_l1, CropKind, TrainConfig};

/// Smooth synthetic picture: two color ramps and a soft disk.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = SeededRng::new(seed);
    let base: Vec<f64> = (0..3).map(|_| rng.range_f64(0.2, 0.8)).collect();
    let gy: Vec<f64> = (0..3).map(|_| rng.range_f64(-0.3, 0.3)).collect();
    let gx: Vec<f64> = (0..3).map(|_| rng.range_f64(-0.3, 0.3)).collect();
    let disk: Vec<f64> = (0..3).map(|_| rng.range_f64(0.0, 1.0)).collect();
    let cy = rng.range_f64(0.3, 0.7) * h as f64;
    let cx = rng.range_f64(0.3, 0.7) * w as f64;
    let r = rng.range_f64(0.15, 0.3) * h.min(w) as f64;
    Image::from_fn(h, w, |y, x, c| {
        let (fy, fx) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        let t = 1.0 / (1.0 + ((d - r) / 2.0).exp());
        let v = base[c] + gy[c] * fy + gx[c] * fx;
        (v * (1.0 - t) + disk[c] * t).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Writes `n` synthetic PNGs into `dir` and returns a manifest over them.
pub fn write_corpus(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> SampleManifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut manifest = SampleManifest::default();
    for i in 0..n {
        let path = dir.join(format!("img{i:02}.png"));
        save_image(&synthetic_image(h, w, seed * 1000 + i as u64), &path).unwrap();
        manifest.entries.push(ManifestEntry {
            image: path,
            mask: MaskSource::Seed(seed * 1000 + i as u64),
            offset: None,
            height: h,
            width: w,
        });
    }
    manifest
}

pub fn desk_disc() -> DiscConfig {
    DiscConfig::desk()
}

/// Training config of the overfit fixture: 8 images of 64x64, batch 2,
/// 500 steps on fixed (image, mask) pairs.
pub fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 125,
        batch_size: 2,
        seed: 7,
        lr_init: 5e-4,
        lr_max: 5e-4,
        warmup_epochs: 0.5,
        beta1: 0.9,
        crop: CropKind::None,
        ..TrainConfig::default()
    }
}

/// Config for short runs on small images with adaptive crops near 48x48.
pub fn small_ats_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 3,
        warmup_epochs: 0.3,
        ats: AtsConfig {
            target_area: 48.0 * 48.0,
            ..AtsConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Overfit corpus: every image paired with its fixed probe mask on disk.
pub fn write_overfit_corpus(dir: &Path) -> (SampleManifest, Vec<Image>, Vec<Mask>) {
    let mut manifest = write_corpus(dir, 8, 64, 64, 1);
    let masks = probe_masks(8, 64, 64);
    for (i, (e, m)) in manifest.entries.iter_mut().zip(&masks).enumerate() {
        let path = dir.join(format!("mask{i:02}.png"));
        save_mask(m, &path).unwrap();
        e.mask = MaskSource::File(path);
    }
    let images = (0..8).map(|i| manifest.load_image(i).unwrap()).collect();
    (manifest, images, masks)
}

/// Fixed full-size masks for measuring reconstruction on the training images.
pub fn probe_masks(n: usize, h: usize, w: usize) -> Vec<Mask> {
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::derive(11, &[label("probe"), i as u64]);
            generate_freeform_mask(h, w, &MaskSpec::default(), &mut rng).unwrap()
        })
        .collect()
}

pub fn probe_l1(gen: &Generator, images: &[Image], masks: &[Mask]) -> f64 {
    let mut total = 0.0;
    for (img, mask) in images.iter().zip(masks) {
        let pred = gen.forward(img, mask, None).unwrap();
        let t = |i: &Image| in2::image::images_to_tensor(std::slice::from_ref(i)).unwrap();
        total += masked_l1(
            &t(&pred),
            &t(img),
            &in2::image::masks_to_tensor(std::slice::from_ref(mask)).unwrap(),
        );
    }
    total / images.len() as f64
}

pub fn desk_generator_config() -> GeneratorConfig {
    GeneratorConfig::desk()
}
