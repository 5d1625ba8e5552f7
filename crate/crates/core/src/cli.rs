//! The `murmur` command line.
//!
//! Stages are chained through manifest files:
//! `synth`/`scan` -> `augment` -> `folds`/`train` -> `eval`.
//! Exit status: 0 success, 1 verification or metric failure, 2 usage or
//! environment error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audio::write_wav;
use crate::codec::{augment_manifest, parse_bitrates, Engine, DEFAULT_TEMPLATE};
use crate::dataset::{make_folds, scan_y18, synth_pcg, Class, ClassDirs, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::{INPUT_RATE, NUM_CLASSES};
use crate::seed::derive;
use crate::train::{cross_validate, evaluate_checkpoint, Confusion, RunOptions, Subset, SubsetOutcome, TrainConfig};
use crate::verify::{gradient_suite, Precision};

/// Name of the manifest each producing stage writes into its output directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(
    name = "murmur",
    version,
    about = "Heart sound classification with codec augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a Y-18 style directory (one subdirectory per class) into a manifest.
    Scan {
        /// Dataset root.
        #[arg(long)]
        root: PathBuf,
        /// Manifest to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic five-class PCG corpus and its manifest.
    Synth {
        /// Output directory; the manifest is written as manifest.jsonl inside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample rate of the written files.
        #[arg(long, default_value_t = 8000)]
        rate: u32,
    },
    /// Add codec-distorted copies of every original at each bitrate.
    Augment {
        /// Manifest of originals.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the copies and the augmented manifest.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated bitrates, e.g. 4.5k,5.5k,7.7k or 4500,5500.
        #[arg(long, default_value = "4.5k,5.5k,7.7k")]
        bitrates: String,
        #[arg(long, value_enum, default_value_t = EngineArg::External)]
        engine: EngineArg,
        /// Transcoder command; placeholders {input} {output} {temp} {bitrate}.
        #[arg(long, default_value = DEFAULT_TEMPLATE)]
        encoder_template: String,
        /// Seed of the builtin engine's dither.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Write a stratified k-fold assignment of the originals.
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        /// Fold plan (JSON) to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run k-fold cross-validation and write the report and per-fold checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the originals and/or codec copies of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SubsetArg::Both)]
        subset: SubsetArg,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Floating-point width: 32 or 64.
        #[arg(long, value_parser = clap::value_parser!(u32).range(32..=64))]
        mode: u32,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        jobs: Jobs,
    },
}

#[derive(Debug, Args)]
struct Jobs {
    /// Worker threads; defaults to the number of cores. Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Jobs {
    fn count(&self) -> Result<usize> {
        match self.jobs {
            Some(0) => Err(Error::InvalidArgument("--jobs must be at least 1".into())),
            Some(n) => Ok(n),
            None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = self.count()?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {n} worker(s): {e}")))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for report.json and checkpoints/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on codec copies of the training originals too.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    augmented_train: Toggle,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EngineArg {
    External,
    Builtin,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Original,
    Codec,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 1,
        Error::Fold { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Scan { root, out } => scan(&root, &out),
        Command::Synth {
            out,
            per_class,
            seed,
            rate,
        } => synth(&out, per_class, seed, rate),
        Command::Augment {
            manifest,
            out,
            bitrates,
            engine,
            encoder_template,
            seed,
            jobs,
        } => {
            let bitrates = parse_bitrates(&bitrates)?;
            let engine = match engine {
                EngineArg::External => Engine::External {
                    template: encoder_template,
                },
                EngineArg::Builtin => Engine::Builtin { seed },
            };
            let pool = jobs.pool()?;
            let manifest = Manifest::load(&manifest)?;
            let augmented = pool.install(|| augment_manifest(&manifest, &bitrates, &engine, &out))?;
            let path = out.join(MANIFEST_FILE);
            augmented.save(&path)?;
            println!(
                "{} originals + {} codec copies -> {}",
                manifest.len(),
                augmented.len() - manifest.len(),
                path.display()
            );
            Ok(0)
        }
        Command::Folds { manifest, out, k, seed } => {
            let manifest = Manifest::load(&manifest)?;
            let plan = make_folds(&manifest, k, seed)?;
            plan.save(&out)?;
            let mut sizes = vec![0usize; k];
            for f in plan.assignment.values() {
                sizes[*f] += 1;
            }
            for (f, n) in sizes.iter().enumerate() {
                println!("fold {f}: {n} originals");
            }
            println!("plan -> {}", out.display());
            Ok(0)
        }
        Command::Train(args) => train(args),
        Command::Eval {
            checkpoint,
            manifest,
            subset,
            out,
        } => eval(&checkpoint, &manifest, subset, out.as_deref()),
        Command::Gradcheck { mode, seeds, jobs } => {
            let precision = Precision::from_bits(mode)
                .ok_or_else(|| Error::InvalidArgument(format!("--mode must be 32 or 64, got {mode}")))?;
            if seeds == 0 {
                return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
            }
            let pool = jobs.pool()?;
            let outcomes = pool.install(|| gradient_suite(precision, 0..seeds))?;
            Ok(print_gradcheck(&outcomes))
        }
    }
}

fn scan(root: &Path, out: &Path) -> Result<i32> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let report = scan_y18(root, &ClassDirs::default())?;
    report.manifest.save(out)?;
    let counts = report.manifest.class_counts();
    for class in Class::ALL {
        println!("{class:>4}: {}", counts[class.index()]);
    }
    println!("total: {}", report.manifest.len());
    if report.skipped_non_wav > 0 {
        println!("skipped {} non-WAV file(s)", report.skipped_non_wav);
    }
    Ok(0)
}

fn synth(out: &Path, per_class: usize, seed: u64, rate: u32) -> Result<i32> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("--per-class must be at least 1".into()));
    }
    if rate == 0 {
        return Err(Error::InvalidArgument("--rate must be positive".into()));
    }
    let mut entries = Vec::with_capacity(per_class * Class::ALL.len());
    for class in Class::ALL {
        let dir = out.join(class.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let id = format!("{class}/{i:04}");
            // durations cycle through 1, 2, 3, 4 s
            let secs = 1.0 + (i % 4) as f64;
            let clip = synth_pcg(class, derive(seed, &format!("synth/{id}")), secs, rate)?;
            let path = dir.join(format!("{i:04}.wav"));
            write_wav(&clip, &path)?;
            entries.push(ManifestEntry::original(id, path, class));
        }
    }
    let manifest = Manifest::new(entries)?;
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    println!("{} clips -> {}", manifest.len(), path.display());
    Ok(0)
}

fn train(args: TrainArgs) -> Result<i32> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        k: args.k,
        seed: args.seed,
        use_augmented_train: args.augmented_train == Toggle::On,
        ..TrainConfig::default()
    };
    config.validate()?;
    let jobs = args.jobs.count()?;
    let manifest = Manifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let options = RunOptions {
        jobs,
        checkpoint_dir: Some(args.out.join("checkpoints")),
    };
    let report = cross_validate(&manifest, &config, &options)?;
    let path = args.out.join(REPORT_FILE);
    report.save(&path)?;
    for f in &report.folds {
        println!(
            "fold {:>2}: original CER {:6.2}%{}",
            f.fold,
            f.cer_original,
            f.cer_codec.map(|c| format!("  codec CER {c:6.2}%")).unwrap_or_default()
        );
    }
    println!(
        "mean original CER {:.2}% (std {:.2})",
        report.mean_cer_original, report.std_cer_original
    );
    match (report.mean_cer_codec, report.std_cer_codec) {
        (Some(m), Some(s)) => {
            println!("mean codec CER {m:.2}% (std {s:.2})");
            for (tag, v) in &report.mean_cer_codec_by_variant {
                println!("  {tag}: {v:.2}%");
            }
        }
        _ => println!("codec CER: no codec entries in the manifest"),
    }
    println!("report -> {}", path.display());
    Ok(0)
}

fn eval(checkpoint: &Path, manifest: &Path, subset: SubsetArg, out: Option<&Path>) -> Result<i32> {
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let manifest = Manifest::load(manifest)?;
    let subset = match subset {
        SubsetArg::Original => Subset::Original,
        SubsetArg::Codec => Subset::Codec,
        SubsetArg::Both => Subset::Both,
    };
    let arch = TrainConfig::default().arch();
    let report = evaluate_checkpoint(checkpoint, &manifest, subset, &arch, INPUT_RATE)?;
    for (name, outcome) in [("original", &report.original), ("codec", &report.codec)] {
        match outcome {
            SubsetOutcome::NotRequested => {}
            SubsetOutcome::NoEntries => println!("{name}: no {name} entries in the manifest"),
            SubsetOutcome::Evaluated(e) => {
                println!("{name}: CER {:.2}% over {} clips", e.cer, e.count);
                print_confusion(&e.confusion);
            }
        }
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(0)
}

fn print_confusion(m: &Confusion) {
    print!("  true\\pred");
    for c in Class::ALL {
        print!("{:>6}", c.name());
    }
    println!();
    for (i, row) in m.0.iter().enumerate().take(NUM_CLASSES) {
        print!("  {:>9}", Class::ALL[i].name());
        for v in row {
            print!("{v:>6}");
        }
        println!();
    }
}

fn print_gradcheck(outcomes: &[crate::verify::CheckOutcome]) -> i32 {
    // worst case per check name, in first-seen order
    let mut names: Vec<&str> = Vec::new();
    for o in outcomes {
        if !names.contains(&o.name.as_str()) {
            names.push(&o.name);
        }
    }
    let mut failed = 0;
    for name in names {
        let runs: Vec<_> = outcomes.iter().filter(|o| o.name == name).collect();
        let worst = runs.iter().map(|o| o.max_rel_error).fold(0.0f64, f64::max);
        let bad = runs.iter().filter(|o| !o.passed).count();
        let skipped: usize = runs.iter().map(|o| o.skipped).sum();
        let checked: usize = runs.iter().map(|o| o.checked).sum();
        println!(
            "{} {name:<28} max rel err {worst:.2e} (tol {:.0e}, {checked} checked, {skipped} skipped, {} seeds)",
            if bad == 0 { "PASS" } else { "FAIL" },
            runs[0].tolerance,
            runs.len()
        );
        failed += bad;
    }
    if failed == 0 {
        println!("all {} checks passed", outcomes.len());
        0
    } else {
        println!("{failed} of {} checks failed", outcomes.len());
        1
    }
}
