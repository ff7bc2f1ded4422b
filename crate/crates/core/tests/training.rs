mod common;

use common::*;
use in2::adversarial::{discriminator_forward, loss_g_adv};
use in2::autograd::Var;
use in2::checkpoint::Checkpoint;
use in2::generator::{forward_tensors, GeneratorConfig};
use in2::image::{images_to_tensor, masks_to_tensor};
use in2::maskgen::MaskSpec;
use in2::params::Binder;
use in2::tensor::Tensor;
use in2::training::{
    load_generator, load_generator_expecting, save_generator, CropKind, StepMetrics, TrainConfig, TrainState,
    Trainer,
};
use in2::Error;

fn small_run(dir: &std::path::Path, images: usize) -> (TrainConfig, in2::dataset::SampleManifest) {
    let manifest = write_corpus(dir, images, 64, 64, 5);
    (small_ats_config(), manifest)
}

fn trainer(cfg: &TrainConfig, manifest: &in2::dataset::SampleManifest) -> Trainer {
    Trainer::new(cfg.clone(), desk_generator_config(), desk_disc(), MaskSpec::default(), manifest.clone()).unwrap()
}

fn without_wall(m: &[StepMetrics]) -> Vec<StepMetrics> {
    m.iter().cloned().map(|m| StepMetrics { wall: 0.0, ..m }).collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_run(dir.path(), 4);
    let mut a = trainer(&cfg, &manifest);
    let mut b = trainer(&cfg, &manifest);
    let ma = a.run(Some(3)).unwrap();
    let mb = b.run(Some(3)).unwrap();
    assert_eq!(without_wall(&ma), without_wall(&mb));
    assert_eq!(a.state, b.state);

    let other = TrainConfig { seed: cfg.seed + 1, ..cfg };
    let mut c = trainer(&other, &manifest);
    let mc = c.run(Some(3)).unwrap();
    assert_ne!(without_wall(&ma), without_wall(&mc));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_run(&dir.path().join("data"), 4);
    let mut straight = trainer(&cfg, &manifest);
    let all = straight.run(Some(3)).unwrap();

    let mut first = trainer(&cfg, &manifest);
    let head = first.run(Some(1)).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.state.save(&path).unwrap();
    drop(first);
    let state = TrainState::load_expecting(&path, &desk_generator_config(), &desk_disc()).unwrap();
    let mut second = Trainer::with_state(cfg, state, MaskSpec::default(), manifest).unwrap();
    let tail = second.run(Some(2)).unwrap();

    let joined: Vec<_> = head.into_iter().chain(tail).collect();
    assert_eq!(without_wall(&joined), without_wall(&all));
    assert_eq!(second.state, straight.state);
}

#[test]
fn one_epoch_over_six_images_in_batches_of_three_is_two_steps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 6, 32, 32, 9);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 3,
        warmup_epochs: 0.0,
        crop: CropKind::None,
        ..TrainConfig::default()
    };
    let mut t = trainer(&cfg, &manifest).output_dir(dir.path().join("run")).unwrap();
    assert_eq!(t.steps_per_epoch(), 2);
    let final_path = t.fit().unwrap().unwrap();
    assert_eq!(t.state.step, 2);
    assert_eq!(t.state.epoch, 1);
    let lines = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(dir.path().join("run/last.ckpt").exists());
    assert_eq!(TrainState::load(final_path).unwrap(), t.state);
}

#[test]
fn zero_discriminator_gives_log_two_and_no_generator_gradient() {
    // With perceptual and feature-matching weights at zero, the generator
    // loss against a constant-zero discriminator is softplus(0) = ln 2.
    let mut state = TrainState::new(desk_generator_config(), desk_disc(), 4).unwrap();
    for (_, p) in state.disc.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let img = synthetic_image(16, 16, 1);
    let images = images_to_tensor(std::slice::from_ref(&img)).unwrap();
    let masks = masks_to_tensor(&probe_masks(1, 16, 16)).unwrap();
    let gcfg = state.generator.config.clone();
    let gb = Binder::train(&mut state.generator.params);
    let db = Binder::frozen(&state.disc);
    let pred = forward_tensors(&gb, &images, &masks, None, &gcfg).unwrap();
    let out = discriminator_forward(&db.scope("disc"), &pred, &state.disc_config).unwrap();
    let loss = loss_g_adv(&out.logits);
    assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
    let grads = gb.grads(&loss.backward());
    assert!(!grads.is_empty());
    for (name, g) in grads {
        assert!(g.data().iter().all(|&v| v == 0.0), "{name} got gradient");
    }
}

#[test]
fn frozen_discriminator_receives_no_gradient_in_the_generator_loss() {
    let mut state = TrainState::new(desk_generator_config(), desk_disc(), 5).unwrap();
    let images = images_to_tensor(&[synthetic_image(16, 16, 2)]).unwrap();
    let masks = masks_to_tensor(&probe_masks(1, 16, 16)).unwrap();
    let gcfg = state.generator.config.clone();
    let gb = Binder::train(&mut state.generator.params);
    let db = Binder::frozen(&state.disc);
    let pred = forward_tensors(&gb, &images, &masks, None, &gcfg).unwrap();
    let loss = loss_g_adv(&discriminator_forward(&db.scope("disc"), &pred, &state.disc_config).unwrap().logits);
    let g = loss.backward();
    assert!(db.grads(&g).is_empty());
    assert!(gb.grads(&g).iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_run(&dir.path().join("data"), 4);
    let mut t = trainer(&cfg, &manifest);
    t.run(Some(2)).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.state.save(&a).unwrap();
    let loaded = TrainState::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, t.state);

    let g1 = dir.path().join("g1.ckpt");
    let g2 = dir.path().join("g2.ckpt");
    save_generator(&t.state.generator, &g1).unwrap();
    let gen = load_generator(&g1).unwrap();
    save_generator(&gen, &g2).unwrap();
    assert_eq!(std::fs::read(&g1).unwrap(), std::fs::read(&g2).unwrap());

    // A training-state archive also loads as a generator.
    let from_state = load_generator(&a).unwrap();
    let img = synthetic_image(24, 20, 3);
    let mask = probe_masks(1, 24, 20).remove(0);
    let x = t.state.generator.forward(&img, &mask, None).unwrap();
    let y = gen.forward(&img, &mask, None).unwrap();
    let z = from_state.forward(&img, &mask, None).unwrap();
    assert_eq!(x.data(), y.data());
    assert_eq!(x.data(), z.data());
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::new(desk_generator_config(), desk_disc(), 1).unwrap();
    let path = dir.path().join("s.ckpt");
    state.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(TrainState::load(&cut), Err(Error::Corrupt(_))));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Corrupt(_))));

    let other = GeneratorConfig {
        pyramid_layers: 1,
        ..desk_generator_config()
    };
    let e = TrainState::load_expecting(&path, &other, &desk_disc()).unwrap_err();
    assert!(matches!(e, Error::Incompatible(_)), "{e}");
    let e = load_generator_expecting(&path, &other).unwrap_err();
    assert!(matches!(e, Error::Incompatible(_)), "{e}");
    assert!(load_generator_expecting(&path, &desk_generator_config()).is_ok());
}

#[test]
fn non_finite_loss_aborts_with_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, manifest) = small_run(&dir.path().join("data"), 4);
    cfg.checkpoint_every = 1;
    let mut t = trainer(&cfg, &manifest).output_dir(dir.path().join("run")).unwrap();
    t.run(Some(1)).unwrap();
    for (_, p) in t.state.generator.params.iter_mut() {
        p.value = Tensor::full(p.value.shape().to_vec(), f64::NAN);
    }
    let e = t.run(Some(1)).unwrap_err();
    match &e {
        Error::TrainingAbort { step, last_checkpoint, .. } => {
            assert_eq!(*step, 1);
            assert_eq!(last_checkpoint.as_deref(), Some(dir.path().join("run/last.ckpt").as_path()));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn training_moves_both_networks() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_run(dir.path(), 4);
    let mut t = trainer(&cfg, &manifest);
    let g0 = t.state.generator.params.clone();
    let d0 = t.state.disc.clone();
    let m = t.run(Some(1)).unwrap();
    assert_ne!(g0, t.state.generator.params);
    assert_ne!(d0, t.state.disc);
    // Lazy R1 is applied on step 0.
    assert!(m[0].r1 > 0.0 && m[0].r1.is_finite());
    let _ = Var::constant(Tensor::zeros(vec![1]));
}
