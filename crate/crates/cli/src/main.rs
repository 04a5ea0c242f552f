//! `attnage`: train, generate, evaluate and materialize synthetic data.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including
//! unreadable inputs and checkpoints), 3 numeric failure during a run,
//! 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use attnage_core::conditioning::{AgeGroupLabel, AgeGroupScheme, NUM_GROUPS};
use attnage_core::config::RunConfig;
use attnage_core::data::{from_rgb8, ingest_directory, materialize, synth_dataset, to_rgb8, DatasetRecord};
use attnage_core::eval::{
    age_discrepancy, export_triptych, verification, IdentityEmbedder, OracleClassifier, PixelEmbedder,
    VerificationPair, DEFAULT_THRESHOLD,
};
use attnage_core::image::ImageTensor;
use attnage_core::models::generate;
use attnage_core::trainer::{load_checkpoint, run_training, read_checkpoint_meta, RunDirectory, TrainState, TrainingData};
use attnage_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attnage", version, about = "Attention-conditioned adversarial age progression")]
#[command(after_help = RunConfig::reference())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair from a TOML config.
    #[command(after_help = RunConfig::reference())]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint (its step count, weights, optimizer and rng state).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory for the config echo, metrics.csv and checkpoints.
        #[arg(long, default_value = "run")]
        run_dir: PathBuf,
    },
    /// Age input images towards each requested target group.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// An image file or a directory of PNG/JPEG files.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated target group indices (0-4).
        #[arg(long, default_value = "0,1,2,3,4")]
        targets: String,
        #[arg(long)]
        out: PathBuf,
        /// Resize inputs to the checkpoint resolution instead of rejecting them.
        #[arg(long)]
        resize: bool,
    },
    /// Age-distribution and identity-verification reports on a labelled image directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with images and metadata.csv.
        #[arg(long)]
        data: PathBuf,
        /// Age estimator: an oracle file written by `train-oracle`.
        #[arg(long)]
        estimator: PathBuf,
        /// Identity embedder: an oracle file, or `pixel`. Defaults to the estimator.
        #[arg(long)]
        embedder: Option<String>,
        /// Verification threshold on the 0-100 confidence scale.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train the evaluation oracle on the training split of a config's dataset.
    TrainOracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic face dataset (PNGs plus metadata.csv).
    SynthData {
        #[arg(long)]
        n: usize,
        /// `N` for NxN, or `HxW`.
        #[arg(long, default_value = "32")]
        resolution: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numeric { .. } | Error::NonFiniteLoss { .. }) => 3,
        Some(Error::Invariant(_) | Error::Tensor(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, resume, run_dir } => cmd_train(&config, resume.as_deref(), &run_dir),
        Command::Generate {
            ckpt,
            input,
            targets,
            out,
            resize,
        } => cmd_generate(&ckpt, &input, &targets, &out, resize),
        Command::Eval {
            ckpt,
            data,
            estimator,
            embedder,
            threshold,
            out,
        } => cmd_eval(&ckpt, &data, &estimator, embedder.as_deref(), threshold, &out),
        Command::TrainOracle { config, out } => cmd_train_oracle(&config, &out),
        Command::SynthData {
            n,
            resolution,
            seed,
            out,
        } => cmd_synth(n, &resolution, seed, &out),
    }
}

fn cmd_train(config: &Path, resume: Option<&Path>, run_dir: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let scheme = cfg.scheme()?;
    let resolution = cfg.train.resolution();
    let (train, _) = cfg.load_splits()?;
    let data = TrainingData::new(&train, &scheme, resolution)?;
    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint::<f32>(path, Some(resolution))?;
            if state.model_config != cfg.model {
                bail!(Error::Config(format!(
                    "{}: model section differs from the checkpoint's architecture",
                    config.display()
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), state.step);
            state
        }
        None => TrainState::<f32>::new(&cfg.model, &scheme, &cfg.train)?,
    };
    let run = RunDirectory::create(run_dir, Some(&cfg.echo()))?;
    log::info!(
        "training on {} images for {} steps into {}",
        data.len(),
        cfg.train.total_steps(data.len()),
        run_dir.display()
    );
    run_training(&mut state, &data, &cfg.train, &run, |_, _| Ok(true))?;
    println!("finished at step {}; checkpoint {}", state.step, run.latest_checkpoint().display());
    Ok(())
}

fn parse_targets(plan: &str) -> anyhow::Result<Vec<AgeGroupLabel>> {
    plan.split(',')
        .map(|s| {
            let k: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("--targets: `{s}` is not a group index")))?;
            Ok(AgeGroupLabel::new(k).map_err(|_| {
                Error::Argument(format!("--targets: group {k} is outside 0..{}", NUM_GROUPS - 1))
            })?)
        })
        .collect()
}

fn image_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::Data(format!("{}: no PNG or JPEG images", input.display())));
    }
    Ok(files)
}

fn load_input(path: &Path, resolution: (usize, usize), resize: bool) -> anyhow::Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (h, w) = resolution;
    if (img.height() as usize, img.width() as usize) == (h, w) {
        return Ok(from_rgb8(&img));
    }
    if !resize {
        bail!(Error::Shape(format!(
            "{} is {}x{} but the checkpoint was trained at {h}x{w} (pass --resize to rescale)",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    let resized = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
    Ok(from_rgb8(&resized))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn save_png(image: &ImageTensor, path: &Path) -> anyhow::Result<()> {
    to_rgb8(image)
        .save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn cmd_generate(ckpt: &Path, input: &Path, targets: &str, out: &Path, resize: bool) -> anyhow::Result<()> {
    let targets = parse_targets(targets)?;
    let state = load_checkpoint::<f32>(ckpt, None)?;
    let resolution = state.resolution();
    let files = image_files(input)?;
    create_dir(out)?;
    for file in &files {
        let image = load_input(file, resolution, resize)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mut columns = Vec::with_capacity(targets.len());
        for &target in &targets {
            let (masks, output) = generate(&state.generator, &image, target)?;
            let name = format!("{stem}_to_{}.png", state.scheme.group_name(target.index()));
            save_png(&output, &out.join(name))?;
            columns.push((masks, output));
        }
        export_triptych(&image, &columns, &out.join(format!("{stem}_triptych.png")))?;
    }
    println!(
        "wrote {} generated images and {} triptychs to {}",
        files.len() * targets.len(),
        files.len(),
        out.display()
    );
    Ok(())
}

fn load_oracle(path: &Path, resolution: (usize, usize), scheme: &AgeGroupScheme) -> anyhow::Result<OracleClassifier> {
    let oracle = OracleClassifier::load(path)?;
    if oracle.resolution() != resolution {
        bail!(Error::Config(format!(
            "{}: oracle resolution {:?} differs from the checkpoint's {:?}",
            path.display(),
            oracle.resolution(),
            resolution
        )));
    }
    if oracle.scheme() != scheme {
        bail!(Error::Config(format!(
            "{}: oracle age scheme {} differs from the checkpoint's {scheme}",
            path.display(),
            oracle.scheme()
        )));
    }
    Ok(oracle)
}

fn write_report(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    estimator: &Path,
    embedder: Option<&str>,
    threshold: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let meta = read_checkpoint_meta(ckpt)?;
    let resolution = (meta.resolution[0], meta.resolution[1]);
    let scheme = meta.scheme;
    let oracle = load_oracle(estimator, resolution, &scheme)?;
    let embedding_oracle;
    let embedder: &dyn IdentityEmbedder = match embedder {
        None => &oracle,
        Some("pixel") => &PixelEmbedder,
        Some(path) => {
            embedding_oracle = load_oracle(Path::new(path), resolution, &scheme)?;
            &embedding_oracle
        }
    };
    let state = load_checkpoint::<f32>(ckpt, Some(resolution))?;

    let report = ingest_directory(data, &data.join("metadata.csv"), resolution, &scheme)?;
    for e in &report.errors {
        log::warn!("skipping {}: {}", e.file, e.reason);
    }
    let records: Vec<DatasetRecord> = report.records;
    let mut generic: Vec<Vec<ImageTensor>> = vec![Vec::new(); NUM_GROUPS];
    let mut generated: Vec<Vec<ImageTensor>> = vec![Vec::new(); NUM_GROUPS];
    let mut pairs = Vec::new();
    for record in &records {
        generic[record.label(&scheme)?.index()].push(record.image.clone());
        for target in AgeGroupLabel::all() {
            let (_, output) = generate(&state.generator, &record.image, target)?;
            pairs.push(VerificationPair {
                group: scheme.group_name(target.index()),
                input: record.image.clone(),
                generated: output.clone(),
            });
            generated[target.index()].push(output);
        }
    }
    let ages = age_discrepancy(&oracle, &generated, &generic, &scheme)?;
    let verify = verification(embedder, &pairs, threshold)?;

    create_dir(out)?;
    write_report(&out.join("age_distribution.csv"), &ages.to_csv())?;
    write_report(&out.join("age_distribution.md"), &ages.to_markdown())?;
    write_report(&out.join("verification.csv"), &verify.to_csv())?;
    write_report(&out.join("verification.md"), &verify.to_markdown())?;
    println!("{}\n{}", ages.to_markdown(), verify.to_markdown());
    Ok(())
}

fn cmd_train_oracle(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let scheme = cfg.scheme()?;
    let resolution = cfg.train.resolution();
    let (train, test) = cfg.load_splits()?;
    let oracle = OracleClassifier::train(&train, &scheme, resolution, &cfg.eval.oracle)?;
    let images: Vec<&ImageTensor> = test.iter().map(|r| &r.image).collect();
    let labels = test.iter().map(|r| r.label(&scheme)).collect::<Result<Vec<_>, _>>()?;
    let accuracy = oracle.accuracy(&images, &labels)?;
    oracle.save(out)?;
    println!("oracle test accuracy {accuracy:.3} on {} images; saved {}", test.len(), out.display());
    Ok(())
}

fn parse_resolution(plan: &str) -> anyhow::Result<(usize, usize)> {
    let bad = || Error::Argument(format!("--resolution: expected N or HxW, got `{plan}`"));
    let parts: Vec<&str> = plan.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [n] => Ok((n, n)),
        [h, w] => Ok((h, w)),
        _ => Err(bad().into()),
    }
}

fn cmd_synth(n: usize, resolution: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let resolution = parse_resolution(resolution)?;
    let records = synth_dataset(n, resolution, seed)?;
    let files = materialize(&records, out)?;
    println!("wrote {} images and metadata.csv to {}", files.len(), out.display());
    Ok(())
}
