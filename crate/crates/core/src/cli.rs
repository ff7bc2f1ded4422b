//! Command-line front end.
//!
//! Any `--section.key value` pair overrides the configuration file, e.g.
//! `in2 train --config run.toml --train.epochs 1`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::Config;
use crate::dataset::{build_realworld_split, materialize_split, CropPolicy, SampleManifest, SplitSpec};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{infer_adapter, run_experiment, AdapterKind, AdapterMode, SplitRef};
use crate::generator::Generator;
use crate::image::{load_image, load_mask, save_image, save_mask, Image, Mask};
use crate::maskgen::{generate_freeform_mask, mask_ratio};
use crate::rng::{derive_seed, SeededRng};
use crate::training::{fit, load_generator_expecting, save_generator, TrainState};

#[derive(Debug, Parser)]
#[command(name = "in2", version, about = "Arbitrary-shape image inpainting with an implicit decoder")]
pub struct Cli {
    /// TOML configuration file (defaults apply to anything it omits).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate free-form masks plus a `masks.tsv` manifest.
    MakeMasks(MakeMasksArgs),
    /// Build a real-world test split (crop windows and mask seeds) from a folder.
    MakeSplits(MakeSplitsArgs),
    /// Train a generator and discriminator.
    Train(TrainArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// Evaluate on the configured splits and adapters.
    Eval(EvalArgs),
    /// Report parameter count and latency of the configured generator.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct MakeMasksArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    /// Base seed; mask `i` uses a seed derived from it and `i`. Defaults to `masks.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MakeSplitsArgs {
    /// Folder of source PNG/JPEG images.
    #[arg(long)]
    pub src: PathBuf,
    /// Output folder; the manifest is written as `<out>/<name>.manifest`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: String,
    /// Target size as `HxW`, e.g. `576x1024`.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    /// center, sides or none.
    #[arg(long, default_value = "center", value_parser = parse_policy)]
    pub policy: CropPolicy,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Also write the cropped images into `<out>/<name>/`.
    #[arg(long)]
    pub materialize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (overrides `data.train_manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory (overrides `data.out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-state archive to continue from (overrides `data.resume`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Generator or training-state archive; a seeded untrained model when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    /// Mask PNG, 255 marks holes.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "direct", value_parser = parse_adapter)]
    pub adapter: AdapterKind,
    #[arg(long, default_value_t = 512)]
    pub train_size: usize,
    /// Write the raw prediction instead of the composited image (direct only).
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Overrides `eval.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `label=manifest`; replaces `eval.splits` when given.
    #[arg(long = "split", value_parser = parse_split)]
    pub splits: Vec<SplitRef>,
    /// Overrides `eval.adapters`.
    #[arg(long = "adapter", value_parser = parse_adapter)]
    pub adapters: Vec<AdapterKind>,
    /// Overrides `eval.dump_dir`.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated `HxW` sizes.
    #[arg(long, default_value = "256x256,512x512", value_delimiter = ',', value_parser = parse_size)]
    pub sizes: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("`{s}` is not HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{s}` is not HxW"));
    Ok((p(h)?, p(w)?))
}

fn parse_policy(s: &str) -> std::result::Result<CropPolicy, String> {
    match s {
        "center" => Ok(CropPolicy::Center),
        "sides" => Ok(CropPolicy::Sides),
        "none" => Ok(CropPolicy::None),
        _ => Err(format!("unknown crop policy `{s}` (center, sides, none)")),
    }
}

fn parse_adapter(s: &str) -> std::result::Result<AdapterKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<SplitRef, String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("`{s}` is not label=manifest"))?;
    Ok(SplitRef {
        label: label.to_string(),
        manifest: PathBuf::from(path),
    })
}

/// Splits `--section.key value` (or `--section.key=value`) pairs from the
/// arguments clap understands.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.split('=').next().is_some_and(|k| k.contains('.')) => {
                if let Some((k, v)) = flag.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("override `--{flag}` needs a value")))?;
                    overrides.push((flag.to_string(), v));
                }
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn make_masks(cfg: &Config, a: &MakeMasksArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let base = a.seed.unwrap_or(cfg.masks.seed);
    let mut lines = String::from("# filename\theight\twidth\tseed\tratio\n");
    for i in 0..a.count {
        let seed = derive_seed(base, &[i as u64]);
        let mask = generate_freeform_mask(a.height, a.width, &cfg.masks, &mut SeededRng::new(seed))?;
        let name = format!("mask_{i:05}.png");
        save_mask(&mask, a.out.join(&name))?;
        lines.push_str(&format!("{name}\t{}\t{}\t{seed}\t{:.6}\n", a.height, a.width, mask_ratio(&mask)));
    }
    let path = a.out.join("masks.tsv");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    info!("wrote {} masks to {}", a.count, a.out.display());
    Ok(())
}

fn make_splits(a: &MakeSplitsArgs) -> Result<()> {
    let spec = SplitSpec {
        name: a.name.clone(),
        target_h: a.size.0,
        target_w: a.size.1,
        crop_policy: a.policy,
    };
    let outcome = build_realworld_split(&a.src, &spec, a.mask_seed)?;
    for (p, why) in &outcome.rejects {
        info!("skipped {}: {why}", p.display());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = if a.materialize {
        let dir = a.out.join(&a.name);
        let m = materialize_split(&outcome.manifest, &dir)?;
        SampleManifest {
            entries: m
                .entries
                .into_iter()
                .map(|mut e| {
                    e.image = dir.join(&e.image);
                    e
                })
                .collect(),
        }
    } else {
        outcome.manifest
    };
    let path = a.out.join(format!("{}.manifest", a.name));
    manifest.save(&path)?;
    println!(
        "{}: {} images, {} skipped -> {}",
        a.name,
        manifest.entries.len(),
        outcome.rejects.len(),
        path.display()
    );
    Ok(())
}

fn train(mut cfg: Config, a: &TrainArgs) -> Result<()> {
    if let Some(m) = &a.manifest {
        cfg.data.train_manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.data.out_dir = o.clone();
    }
    if let Some(r) = &a.resume {
        cfg.data.resume = Some(r.clone());
    }
    let manifest_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("no training manifest (data.train_manifest or --manifest)".into()))?;
    let manifest = SampleManifest::load(&manifest_path)?;
    ensure!(!manifest.entries.is_empty(), "training manifest {} is empty", manifest_path.display());
    manifest.check_files()?;
    let out = cfg.data.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    let last = fit(
        cfg.train.clone(),
        cfg.model.clone(),
        cfg.disc.clone(),
        cfg.masks.clone(),
        manifest,
        &out,
        cfg.data.resume.as_deref(),
    )?;
    let state = TrainState::load(&last)?;
    let gen_path = out.join("generator.ckpt");
    save_generator(&state.generator, &gen_path)?;
    println!("trained {} steps -> {}", state.step, gen_path.display());
    Ok(())
}

fn model(cfg: &Config, checkpoint: Option<&Path>) -> Result<Generator> {
    match checkpoint {
        Some(p) => load_generator_expecting(p, &cfg.model),
        None => Generator::new(cfg.model.clone(), cfg.eval.model_seed),
    }
}

fn infer(cfg: &Config, a: &InferArgs) -> Result<()> {
    let gen = model(cfg, a.checkpoint.as_deref())?;
    let img = load_image(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let out = if a.raw {
        ensure!(a.adapter == AdapterKind::Direct, "--raw is only available with the direct adapter");
        gen.forward(&img, &mask, None)?
    } else {
        infer_adapter(&img, &mask, &gen, AdapterMode::new(a.adapter, a.train_size))?
    };
    save_image(&out, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn eval(mut cfg: Config, a: &EvalArgs) -> Result<()> {
    if a.checkpoint.is_some() {
        cfg.eval.checkpoint = a.checkpoint.clone();
    }
    if !a.splits.is_empty() {
        cfg.eval.splits = a.splits.clone();
    }
    if !a.adapters.is_empty() {
        cfg.eval.adapters = a.adapters.clone();
    }
    if a.dump.is_some() {
        cfg.eval.dump_dir = a.dump.clone();
    }
    let report = run_experiment(&cfg.eval, &cfg.model, &cfg.masks)?;
    print!("{}", report.table());
    Ok(())
}

fn bench(cfg: &Config, a: &BenchArgs) -> Result<()> {
    ensure!(a.repeats > 0, "--repeats must be positive");
    let gen = model(cfg, a.checkpoint.as_deref())?;
    let params = gen.params.numel();
    println!("{:<8}  {:>10}  {:>11}  {:>11}", "model", "params(M)", "size", "latency(ms)");
    for &(h, w) in &a.sizes {
        let img = Image::filled(h, w, 0.5)?;
        let mut mask = Mask::zeros(h, w);
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                mask.set(y, x, true);
            }
        }
        gen.forward(&img, &mask, None)?;
        let start = Instant::now();
        for _ in 0..a.repeats {
            gen.forward(&img, &mask, None)?;
        }
        let ms = start.elapsed().as_secs_f64() * 1000.0 / a.repeats as f64;
        println!(
            "{:<8}  {:>10.3}  {:>11}  {:>11.1}",
            "in2",
            params as f64 / 1e6,
            format!("{h}x{w}"),
            ms
        );
    }
    Ok(())
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), overrides)?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    match &cli.command {
        Command::MakeMasks(a) => make_masks(&cfg, a),
        Command::MakeSplits(a) => make_splits(a),
        Command::Train(a) => train(cfg, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Bench(a) => bench(&cfg, a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, over) =
            split_overrides(strings(&["in2", "train", "--train.epochs", "1", "--out", "x", "--model.alpha=0.1"])).unwrap();
        assert_eq!(rest, strings(&["in2", "train", "--out", "x"]));
        assert_eq!(
            over,
            vec![
                ("train.epochs".to_string(), "1".to_string()),
                ("model.alpha".to_string(), "0.1".to_string())
            ]
        );
        assert!(split_overrides(strings(&["in2", "--train.epochs"])).is_err());
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_size("576x1024"), Ok((576, 1024)));
        assert!(parse_size("576").is_err());
        assert_eq!(parse_adapter("pad_edge"), Ok(AdapterKind::PadEdge));
        assert_eq!(parse_split("a=b.manifest").unwrap().label, "a");
    }

    #[test]
    fn bad_usage_is_a_validation_exit() {
        assert_eq!(run(strings(&["in2", "nope"])), 1);
        assert_eq!(run(strings(&["in2", "bench", "--model.pyrmid_layers", "2"])), 1);
    }
}
