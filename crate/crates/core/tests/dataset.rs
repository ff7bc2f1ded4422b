mod common;

use std::collections::BTreeSet;

use common::*;
use in2::dataset::{
    build_realworld_split, materialize_split, BatchConfig, BatchIterator, CropMode, CropPolicy, MaskSource,
    SampleManifest, SplitSpec,
};
use in2::image::{load_image, save_image};
use in2::maskgen::MaskSpec;
use in2::Error;

fn batch_config(batch_size: usize, drop_last: bool, crop: CropMode) -> BatchConfig {
    BatchConfig {
        batch_size,
        drop_last,
        crop,
        mask_spec: MaskSpec::default(),
        seed: 21,
    }
}

#[test]
fn manifests_round_trip_through_text() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = write_corpus(dir.path(), 3, 16, 20, 4);
    m.entries[1].mask = MaskSource::File(dir.path().join("m.png"));
    m.entries[2].offset = Some((3, 5));
    let path = dir.path().join("x.manifest");
    m.save(&path).unwrap();
    assert_eq!(SampleManifest::load(&path).unwrap(), m);
    assert!(SampleManifest::parse("a\tseed:1\t-\t8\n", dir.path()).is_err());
    assert!(SampleManifest::parse("a\tseed:x\t-\t8\t8\n", dir.path()).is_err());

    // Relative entries resolve against the manifest's folder.
    let rel = SampleManifest::parse("img00.png\tseed:4\t-\t16\t20\n", dir.path()).unwrap();
    assert_eq!(rel.load_image(0).unwrap(), m.load_image(0).unwrap());
    match m.check_files() {
        Err(Error::MissingArtifacts(files)) => assert_eq!(files.len(), 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn realworld_split_crops_and_seeds_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_corpus(&src, 3, 40, 64, 2);
    save_image(&synthetic_image(40, 40, 9), src.join("narrow.png")).unwrap();
    let spec = SplitSpec {
        name: "wide".into(),
        target_h: 40,
        target_w: 48,
        crop_policy: CropPolicy::Sides,
    };
    let a = build_realworld_split(&src, &spec, 7).unwrap();
    let b = build_realworld_split(&src, &spec, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.manifest.entries.len(), 3);
    assert_eq!(a.rejects.len(), 1);
    let e = &a.manifest.entries[0];
    assert_eq!((e.offset, e.height, e.width), (Some((0, 8)), 40, 48));
    let seeds: BTreeSet<_> = a
        .manifest
        .entries
        .iter()
        .map(|e| match e.mask {
            MaskSource::Seed(s) => s,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(seeds.len(), 3);

    // The sides policy refuses windows that would crop both axes.
    let both = SplitSpec {
        target_h: 32,
        ..spec.clone()
    };
    assert_eq!(build_realworld_split(&src, &both, 7).unwrap().manifest.entries.len(), 0);

    let full = load_image(&a.manifest.entries[0].image).unwrap();
    let out = dir.path().join("mat");
    let mat = materialize_split(&a.manifest, &out).unwrap();
    let cropped = load_image(out.join(&mat.entries[0].image)).unwrap();
    assert_eq!(cropped, full.crop(0, 8, 40, 48).unwrap().quantized());
    assert_eq!(mat.entries[0].mask, a.manifest.entries[0].mask);
}

#[test]
fn batches_group_by_size_and_drop_the_remainder() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = write_corpus(&dir.path().join("a"), 5, 24, 24, 1);
    m.entries.extend(write_corpus(&dir.path().join("b"), 3, 24, 32, 2).entries);
    let it = BatchIterator::new(m.clone(), batch_config(2, true, CropMode::None)).unwrap();
    let plan = it.plan(0);
    assert_eq!(plan.len(), 3);
    for batch in &plan {
        let dims: BTreeSet<_> = batch.iter().map(|&i| (m.entries[i].height, m.entries[i].width)).collect();
        assert_eq!(dims.len(), 1);
    }
    assert_ne!(it.plan(0), it.plan(1));
    assert_eq!(it.plan(3), BatchIterator::new(m.clone(), batch_config(2, true, CropMode::None)).unwrap().plan(3));

    let keep = BatchIterator::new(m, batch_config(2, false, CropMode::None)).unwrap();
    let seen: Vec<usize> = keep.plan(0).concat();
    assert_eq!(seen.len(), 8);
    assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), 8);
}

#[test]
fn batch_contents_are_reproducible_and_share_one_crop() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(dir.path(), 4, 64, 64, 3);
    let crop = CropMode::Ats(small_ats_config().ats);
    let mut a = BatchIterator::new(m.clone(), batch_config(2, true, crop.clone())).unwrap();
    let mut b = BatchIterator::new(m, batch_config(2, true, crop)).unwrap();
    for epoch in 0..3 {
        let xa: Vec<_> = a.epoch(epoch).collect::<Result<_, _>>().unwrap();
        let xb: Vec<_> = b.epoch(epoch).collect::<Result<_, _>>().unwrap();
        for (p, q) in xa.iter().zip(&xb) {
            assert_eq!(p.images, q.images);
            assert_eq!(p.masks, q.masks);
            let dims = p.images[0].dims();
            assert!(p.images.iter().all(|i| i.dims() == dims));
            assert!(p.masks.iter().all(|k| k.dims() == dims));
            let area = (dims.0 * dims.1) as f64;
            assert!((area - 48.0 * 48.0).abs() <= 0.05 * 48.0 * 48.0, "{dims:?}");
        }
    }
}

#[test]
fn fixed_crops_are_centered() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(dir.path(), 2, 40, 50, 3);
    let mut it = BatchIterator::new(
        m.clone(),
        batch_config(
            2,
            true,
            CropMode::Fixed {
                height: 20,
                width: 30,
            },
        ),
    )
    .unwrap();
    let batch = it.epoch(0).next().unwrap().unwrap();
    let i = batch.indices[0];
    assert_eq!(batch.images[0], m.load_image(i).unwrap().crop(10, 10, 20, 30).unwrap());
    let mut too_big = BatchIterator::new(m, batch_config(2, true, CropMode::Fixed { height: 48, width: 48 })).unwrap();
    assert!(too_big.epoch(0).next().unwrap().is_err());
}
