use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use dcac::backbone::{analyze as analyze_network, NetworkConfig};
use dcac::checks::layer_gradcheck_suite;
use dcac::datapipe::{
    augment, load_image, patient_split, read_id_list, save_image, substream, write_toy_dataset, AugmentConfig, DirSource, Manifest,
};
use dcac::evaluation::evaluate as evaluate_manifest;
use dcac::training::{Checkpoint, TrainConfig, TrainData, Trainer};
use serde_json::json;

use crate::run_manifest::RunManifest;
use crate::{Format, NetworkArgs};

pub struct Ctx {
    pub format: Format,
    pub run_manifest: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A problem with the invocation itself (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<dcac::Error>() {
        Some(dcac::Error::Config { .. } | dcac::Error::InvalidArgument { .. }) => 2,
        _ => 1,
    }
}

/// Runs `body` and writes the run manifest whatever the outcome.
fn tracked(ctx: &Ctx, command: &str, out_dir: Option<&Path>, body: impl FnOnce(&mut RunManifest) -> Result<u8>) -> Result<u8> {
    let mut manifest = RunManifest::start(command, ctx.threads);
    let result = body(&mut manifest);
    let status = match &result {
        Ok(0) => "ok".to_string(),
        Ok(code) => format!("exit {code}"),
        Err(e) => format!("error: {e:#}"),
    };
    let dir = out_dir.filter(|d| d.is_dir());
    let written = manifest.finish(&status, dir, ctx.run_manifest.as_deref());
    let code = result?;
    written?;
    Ok(code)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn network_config(args: &NetworkArgs, manifest: &mut RunManifest) -> Result<NetworkConfig> {
    match (&args.config, &args.preset) {
        (Some(path), _) => {
            manifest.config_paths.push(path.clone());
            Ok(NetworkConfig::load(path)?)
        }
        (None, Some(name)) => NetworkConfig::preset(name).ok_or_else(|| usage(format!("unknown network preset {name:?} (expected paper or tiny)"))),
        (None, None) => Err(usage("pass --config PATH or --preset NAME")),
    }
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    network: NetworkArgs,
    /// Input height and width; defaults to the configured input size.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    input_size: Option<Vec<usize>>,
}

pub fn analyze(ctx: &Ctx, args: AnalyzeArgs) -> Result<u8> {
    tracked(ctx, "analyze", None, |m| {
        let cfg = network_config(&args.network, m)?;
        let [c, h, w] = cfg.input_size;
        let size = match args.input_size.as_deref() {
            Some([h, w]) => [c, *h, *w],
            _ => [c, h, w],
        };
        let report = analyze_network(&cfg, size)?;
        match ctx.format {
            Format::Json => print_json(&report)?,
            Format::Text => println!("{report}"),
        }
        Ok(0)
    })
}

#[derive(Args)]
pub struct SplitArgs {
    /// Manifest CSV with the ISIC training columns.
    #[arg(long)]
    manifest: PathBuf,
    /// Image names to drop before splitting, one per line.
    #[arg(long)]
    duplicates: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn split(ctx: &Ctx, args: SplitArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    tracked(ctx, "split", Some(&args.out), |m| {
        m.config_paths.push(args.manifest.clone());
        m.seeds.push(args.seed);
        let full = Manifest::load(&args.manifest)?;
        let (manifest, dedup) = match &args.duplicates {
            Some(path) => {
                m.config_paths.push(path.clone());
                full.remove_duplicates(&read_id_list(path)?)
            }
            None => full.remove_duplicates::<&str>(&[]),
        };
        let split = patient_split(&manifest, args.val_frac, args.seed)?;
        split.write(&args.out)?;
        for name in ["train.csv", "val.csv", "split_summary.json"] {
            m.outputs.push(args.out.join(name));
        }
        let report = json!({
            "records_in": full.len(),
            "records_after_dedup": manifest.len(),
            "malignant_after_dedup": manifest.malignant_count(),
            "dedup": dedup,
            "split": split.summary,
        });
        match ctx.format {
            Format::Json => print_json(&report)?,
            Format::Text => {
                println!(
                    "{} records, {} after removing {} duplicates ({} malignant)",
                    full.len(),
                    manifest.len(),
                    dedup.removed,
                    manifest.malignant_count()
                );
                for (side, c) in [("train", &split.summary.train), ("val", &split.summary.val)] {
                    println!(
                        "{side:<5} {} patients, {} images, {} malignant",
                        c.patients, c.images, c.malignant
                    );
                }
            }
        }
        Ok(0)
    })
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long, conflicts_with_all = ["preset", "resume"])]
    config: Option<PathBuf>,
    /// Built-in training recipe: `toy` or `paper`.
    #[arg(long, conflicts_with = "resume")]
    preset: Option<String>,
    /// Directory with train.csv, optional val.csv and images/.
    #[arg(long)]
    data: PathBuf,
    /// Image directory, if not `<data>/images`.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint whose backbone weights initialise the network.
    #[arg(long, conflicts_with = "resume")]
    pretrained: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Stop after this many epochs; resume later with --resume.
    #[arg(long)]
    max_epochs: Option<usize>,
}

pub fn train(ctx: &Ctx, args: TrainArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    tracked(ctx, "train", Some(&args.out), |m| {
        let train_manifest = Manifest::load(&args.data.join("train.csv"))?;
        let val_path = args.data.join("val.csv");
        let val_manifest = if val_path.exists() { Some(Manifest::load(&val_path)?) } else { None };
        let source = DirSource::new(args.images.clone().unwrap_or_else(|| args.data.join("images")));
        let data = TrainData {
            train: &train_manifest,
            val: val_manifest.as_ref(),
            source: &source,
        };

        let mut trainer = match &args.resume {
            Some(path) => {
                m.config_paths.push(path.clone());
                Trainer::resume(&Checkpoint::load(path)?, &train_manifest.labels())?
            }
            None => {
                let mut cfg = match (&args.config, &args.preset) {
                    (Some(path), _) => {
                        m.config_paths.push(path.clone());
                        TrainConfig::load(path)?
                    }
                    (None, Some(name)) => TrainConfig::preset(name, 0).ok_or_else(|| usage(format!("unknown training preset {name:?} (expected toy or paper)")))?,
                    (None, None) => bail!(UsageError("pass --config PATH, --preset NAME or --resume CKPT".into())),
                };
                if let Some(seed) = args.seed {
                    cfg.seed = seed;
                }
                if let Some(p) = &args.pretrained {
                    m.config_paths.push(p.clone());
                    cfg.pretrained_checkpoint = Some(p.clone());
                }
                Trainer::new(cfg, &data)?
            }
        };
        m.seeds.push(trainer.config().seed);
        std::fs::write(args.out.join("train_config.json"), serde_json::to_string_pretty(trainer.config())? + "\n")?;

        let records = trainer.run(&data, Some(&args.out), args.max_epochs, |rec| {
            let s = &rec.summary;
            let val = s.val_auroc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            eprintln!(
                "phase {} epoch {:>3}  lr {:.3e}  loss {:.5}  val auroc {val}  {} ms",
                s.phase, s.epoch, s.lr, s.train_loss, rec.wall_ms
            );
            if let Some(err) = &rec.val_error {
                eprintln!("  validation skipped: {err}");
            }
        })?;
        for name in ["train_config.json", "train_log.ndjson", "latest.dcac"] {
            m.outputs.push(args.out.join(name));
        }
        if trainer.is_done() {
            m.outputs.push(args.out.join("final.dcac"));
        }
        let cursor = trainer.cursor();
        let summary = json!({
            "epochs_run": records.len(),
            "complete": trainer.is_done(),
            "phase": cursor.phase,
            "epoch": cursor.epoch,
            "global_step": cursor.global_step,
            "last": records.last(),
        });
        match ctx.format {
            Format::Json => print_json(&summary)?,
            Format::Text => println!(
                "{} epochs run, {} optimizer steps in total, {}",
                records.len(),
                cursor.global_step,
                if trainer.is_done() { "training complete" } else { "stopped early" }
            ),
        }
        Ok(0)
    })
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Seed of the public/private partition.
    #[arg(long)]
    seed: u64,
    /// Side length images are resized to; defaults to the training size.
    #[arg(long)]
    image_size: Option<usize>,
    /// Directory for report.json and scores.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn evaluate(ctx: &Ctx, args: EvaluateArgs) -> Result<u8> {
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    tracked(ctx, "evaluate", args.out.as_deref(), |m| {
        m.config_paths.extend([args.checkpoint.clone(), args.manifest.clone()]);
        m.seeds.push(args.seed);
        let ckpt = Checkpoint::load(&args.checkpoint)?;
        let size = args
            .image_size
            .or(ckpt.meta.train.as_ref().map(|t| t.image_size))
            .unwrap_or(ckpt.meta.network.input_size[1]);
        let net = ckpt.to_network()?;
        let manifest = Manifest::load(&args.manifest)?;
        let (report, scored) = evaluate_manifest(&net, &manifest, &DirSource::new(&args.images), size, args.seed)?;
        if let Some(out) = &args.out {
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            scored.write_csv(&out.join("scores.csv"))?;
            m.outputs.extend([out.join("report.json"), out.join("scores.csv")]);
        }
        match ctx.format {
            Format::Json => print_json(&report)?,
            Format::Text => {
                let show = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
                println!("AUROC full    {} ({} pos, {} neg)", show(report.auroc_full), report.n_pos, report.n_neg);
                println!("AUROC public  {} ({} images)", show(report.auroc_public), report.n_public);
                println!("AUROC private {} ({} images)", show(report.auroc_private), report.n_private);
            }
        }
        Ok(0)
    })
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Shape preset; `tiny` draws inputs up to 2x8x16x16.
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Swap in a deliberately wrong sigmoid backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

pub fn gradcheck(ctx: &Ctx, args: GradcheckArgs) -> Result<u8> {
    tracked(ctx, "gradcheck", None, |m| {
        if args.preset != "tiny" {
            return Err(usage(format!("unknown gradcheck preset {:?} (expected tiny)", args.preset)));
        }
        m.seeds.push(args.seed);
        let report = layer_gradcheck_suite(args.seed, args.inject_fault)?;
        match ctx.format {
            Format::Json => print_json(&json!({ "passed": report.passed(), "suite": report }))?,
            Format::Text => println!("{report}"),
        }
        Ok(if report.passed() { 0 } else { 1 })
    })
}

#[derive(Args)]
pub struct AugmentPreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    size: usize,
    /// Only resize; no random transforms.
    #[arg(long)]
    identity: bool,
    /// Augmentation settings (JSON) instead of the defaults.
    #[arg(long, conflicts_with = "identity")]
    config: Option<PathBuf>,
    /// Output file type: png or ppm.
    #[arg(long, default_value = "png")]
    ext: String,
}

pub fn augment_preview(ctx: &Ctx, args: AugmentPreviewArgs) -> Result<u8> {
    if !matches!(args.ext.as_str(), "png" | "ppm") {
        return Err(usage(format!("--ext must be png or ppm, got {:?}", args.ext)));
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    tracked(ctx, "augment-preview", Some(&args.out), |m| {
        m.seeds.push(args.seed);
        m.config_paths.push(args.image.clone());
        let cfg = if args.identity {
            AugmentConfig::identity(args.size)
        } else if let Some(path) = &args.config {
            m.config_paths.push(path.clone());
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        } else {
            AugmentConfig {
                output_size: args.size,
                ..Default::default()
            }
        };
        cfg.validate()?;
        let img = load_image(&args.image)?;
        let mut written = Vec::new();
        for k in 0..args.n {
            let out = augment(&img, &cfg, &mut substream(args.seed, &[k as u64]))?;
            let path = args.out.join(format!("aug_{k:03}.{}", args.ext));
            save_image(&path, &out)?;
            written.push(path);
        }
        m.outputs.extend(written.iter().cloned());
        match ctx.format {
            Format::Json => print_json(&json!({ "files": written, "size": cfg.output_size }))?,
            Format::Text => {
                for p in &written {
                    println!("{}", p.display());
                }
            }
        }
        Ok(0)
    })
}

#[derive(Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn make_toy(ctx: &Ctx, args: MakeToyArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    tracked(ctx, "make-toy", Some(&args.out), |m| {
        m.seeds.push(args.seed);
        let manifest = write_toy_dataset(&args.out, args.n, args.size, args.seed)?;
        m.outputs.extend([args.out.join("train.csv"), args.out.join("images")]);
        match ctx.format {
            Format::Json => print_json(&json!({
                "images": manifest.len(),
                "malignant": manifest.malignant_count(),
                "size": args.size,
                "dir": args.out,
            }))?,
            Format::Text => println!("{} images ({} malignant) in {}", manifest.len(), manifest.malignant_count(), args.out.display()),
        }
        Ok(0)
    })
}
