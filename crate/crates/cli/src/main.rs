#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use celldetr::data::{load_dataset, load_split, read_gray, save_dataset, save_split, split_dataset, synth_generate};
use celldetr::pipeline::{
    benchmark_latency, evaluate, measure_fluorescence, measure_labels, predict, train, write_measurements_csv,
    TrainOptions,
};
use celldetr::{load_checkpoint, save_checkpoint, CellDetrF32, CheckpointMeta, Config, EvalReport, SampleF32, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "celldetr", version, about = "Instance segmentation of trapped cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with [model], [loss] and [train] sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (samples/ and split.json)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Train and validation fractions; the rest is the test split
        #[arg(long, num_args = 2, value_names = ["TRAIN", "VAL"], default_values_t = [0.8, 0.1])]
        fractions: Vec<f64>,
    },
    /// Train a model and keep the checkpoint with the best validation cell Jaccard
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_augment: bool,
        #[arg(long, default_value_t = 1)]
        validate_every: usize,
    },
    /// Report metrics of a checkpoint on a dataset split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Segment images and write overlays plus an instance listing
    Predict {
        #[command(flatten)]
        common: Common,
        images: Vec<PathBuf>,
    },
    /// Measure cell area and total fluorescence
    Measure {
        #[command(flatten)]
        common: Common,
        /// Brightfield image (with --fluor) instead of a dataset
        #[arg(long, requires = "fluor")]
        image: Option<PathBuf>,
        #[arg(long)]
        fluor: Option<PathBuf>,
        /// Use the annotated masks instead of predictions
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, value_enum, default_value_t = SplitName::All)]
        split: SplitName,
    },
    /// Time single-image forward passes
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        /// Distinct synthetic images to cycle through when no dataset is given
        #[arg(long, default_value_t = 300)]
        images: usize,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("--{flag} is required"))
}

fn select(root: &Path, samples: Vec<SampleF32>, split: SplitName) -> Result<Vec<SampleF32>> {
    let ids = match split {
        SplitName::All => return Ok(samples),
        _ => {
            let s = load_split(root)?.with_context(|| format!("{}: no split.json", root.display()))?;
            match split {
                SplitName::Train => s.train,
                SplitName::Val => s.val,
                _ => s.test,
            }
        }
    };
    let mut by_id: std::collections::HashMap<String, SampleF32> =
        samples.into_iter().map(|s| (s.id.clone(), s)).collect();
    ids.iter()
        .map(|id| by_id.remove(id).with_context(|| format!("split names unknown sample '{id}'")))
        .collect()
}

fn load_model(common: &Common) -> Result<(CellDetrF32, CheckpointMeta)> {
    let path = required(&common.checkpoint, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn print_report(r: &EvalReport) {
    println!("samples                 {}", r.samples);
    println!("dice                    {:.4}", r.dice);
    println!("foreground_jaccard      {:.4}", r.foreground_jaccard);
    for (c, j) in &r.class_jaccard {
        println!("jaccard_{:<16}{:.4}", c.name(), j);
    }
    match r.mean_instance_jaccard {
        Some(j) => println!("instance_jaccard        {j:.4}"),
        None => println!("instance_jaccard        n/a"),
    }
    println!("seg_accuracy            {:.4}", r.seg_accuracy);
    match r.bbox_jaccard {
        Some(j) => println!("bbox_jaccard            {j:.4}"),
        None => println!("bbox_jaccard            n/a"),
    }
    println!("classification_accuracy {:.4}", r.classification_accuracy);
    for (c, n) in &r.counts {
        println!("count_{:<18}{}", c.name(), n);
    }
}

fn load_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, raw, max) = read_gray(path)?;
    Ok((w, h, raw.iter().map(|&v| v as f32 / max as f32).collect()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            count,
            fractions,
        } => {
            // the dataset root may be given either way
            let out = match (&common.out, &common.data) {
                (Some(p), _) | (None, Some(p)) => p,
                (None, None) => bail!("--out (or --data) is required"),
            };
            let seed = common.seed.unwrap_or(0);
            let samples: Vec<SampleF32> = synth_generate(count, seed);
            save_dataset(out, &samples)?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let split = split_dataset(&ids, seed, (fractions[0], fractions[1]));
            save_split(out, &split)?;
            println!(
                "wrote {count} samples to {} (train {}, val {}, test {})",
                out.display(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::Train {
            common,
            epochs,
            no_augment,
            validate_every,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.total_epochs = e;
                cfg.train.lr_drops.retain(|&d| d < e);
            }
            let root = required(&common.data, "data")?;
            let out = required(&common.out, "out")?;
            let samples: Vec<SampleF32> = load_dataset(root)?;
            let train_set = select(root, samples.clone(), SplitName::Train)?;
            let val_set = select(root, samples, SplitName::Val)?;
            let best_path = common.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"));
            let model = CellDetrF32::new(&cfg.model, cfg.train.seed)?;
            log::info!("{} trainable parameters", model.num_parameters());
            let opts = TrainOptions {
                augment: !no_augment,
                validate_every,
                checkpoint: Some(best_path.clone()),
                ..Default::default()
            };
            let outcome = train(model, &cfg.loss, &cfg.train, &train_set, &val_set, &opts)?;
            fs::create_dir_all(out).with_context(|| out.display().to_string())?;
            outcome.log.write_steps_csv(&out.join("train_log.csv"))?;
            outcome.log.write_epochs_csv(&out.join("epochs.csv"))?;
            save_checkpoint(
                &out.join("last.ckpt"),
                &outcome.last,
                &CheckpointMeta {
                    epoch: outcome.log.epochs.last().map(|e| e.epoch),
                    val_cell_jaccard: None,
                    seed: Some(cfg.train.seed),
                },
            )?;
            fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            match &outcome.best {
                Some((_, m)) => println!(
                    "best epoch {} with validation cell Jaccard {:.4} -> {}",
                    m.epoch.unwrap_or(0),
                    m.val_cell_jaccard.unwrap_or(f64::NAN),
                    best_path.display()
                ),
                None => println!("no validation split; final weights in {}", out.join("last.ckpt").display()),
            }
        }
        Command::Eval { common, split } => {
            let (model, _) = load_model(&common)?;
            let mut cfg = load_config(&common)?;
            cfg.model = model.config.clone();
            let root = required(&common.data, "data")?;
            let samples = select(root, load_dataset(root)?, split)?;
            print_report(&evaluate(&model, &samples, &cfg.loss)?);
        }
        Command::Predict { common, images } => {
            let (model, _) = load_model(&common)?;
            let out = required(&common.out, "out")?;
            fs::create_dir_all(out).with_context(|| out.display().to_string())?;
            if images.is_empty() {
                bail!("no input images given");
            }
            for path in &images {
                let (w, h, img) = load_image(path)?;
                let pred = predict(&model, &img, w, h).with_context(|| path.display().to_string())?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let overlay = out.join(format!("{stem}_overlay.png"));
                pred.overlay.save(&overlay).with_context(|| overlay.display().to_string())?;
                let listing: Vec<_> = pred
                    .instances
                    .iter()
                    .map(|i| {
                        json!({
                            "class": i.class,
                            "confidence": i.confidence,
                            "bbox": i.bbox.to_array(),
                            "area_px": i.mask.area(),
                        })
                    })
                    .collect();
                let listing_path = out.join(format!("{stem}_instances.json"));
                fs::write(&listing_path, serde_json::to_string_pretty(&listing)?)?;
                println!("{}: {} instances", path.display(), pred.instances.len());
            }
        }
        Command::Measure {
            common,
            image,
            fluor,
            ground_truth,
            split,
        } => {
            let mut rows = Vec::new();
            if let (Some(img), Some(fl)) = (&image, &fluor) {
                let (model, _) = load_model(&common)?;
                let (w, h, bf) = load_image(img)?;
                let (fw, fh, counts, _) = read_gray(fl)?;
                if (w, h) != (fw, fh) {
                    bail!("brightfield is {w}x{h} but fluorescence is {fw}x{fh}");
                }
                if w != h {
                    bail!("expected a square crop, got {w}x{h}");
                }
                let fl: Vec<f32> = counts.iter().map(|&v| v as f32).collect();
                let prefix = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                rows = measure_fluorescence(&model, &prefix, &bf, &fl, w)?;
            } else {
                let root = required(&common.data, "data")?;
                let samples = select(root, load_dataset(root)?, split)?;
                let model = if ground_truth { None } else { Some(load_model(&common)?.0) };
                for s in &samples {
                    let Some(fl) = &s.fluorescence else {
                        log::warn!("sample '{}' has no fluorescence channel, skipped", s.id);
                        continue;
                    };
                    rows.extend(match &model {
                        Some(m) => measure_fluorescence(m, &s.id, &s.image, fl, s.size)?,
                        None => measure_labels(&s.id, &s.instances, fl)?,
                    });
                }
            }
            match &common.out {
                Some(p) => {
                    let f = fs::File::create(p).with_context(|| p.display().to_string())?;
                    write_measurements_csv(f, &rows)?;
                }
                None => write_measurements_csv(std::io::stdout().lock(), &rows)?,
            }
        }
        Command::Bench { common, runs, images } => {
            let model = match &common.checkpoint {
                Some(_) => load_model(&common)?.0,
                None => {
                    let cfg = load_config(&common)?;
                    CellDetrF32::new(&cfg.model, cfg.train.seed)?
                }
            };
            let inputs: Vec<Vec<f32>> = match &common.data {
                Some(root) => load_dataset::<f32>(root)?.into_iter().map(|s| s.image).collect(),
                None => synth_generate::<f32>(images, common.seed.unwrap_or(0))
                    .into_iter()
                    .map(|s| s.image)
                    .collect(),
            };
            let r = benchmark_latency(&model, &inputs, runs)?;
            println!(
                "variant {}: {} runs over {} images, mean {:.2} ms, std {:.2} ms ({:.1}%)",
                model.config.variant,
                r.runs,
                inputs.len(),
                r.mean_ms,
                r.std_ms,
                100.0 * r.relative_std()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        // library errors already spell out their cause
        let mut msg = e.to_string();
        for cause in e.chain().skip(1) {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg = format!("{msg}: {c}");
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
