//! The `xlsor` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration or data,
//! 3 a check (gradient suite) failed.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::augment::{build_nested_sets, Split};
use crate::bench::run_bench;
use crate::config::RunConfig;
use crate::dataset::{
    load_pairs, read_manifest, write_augmented_dataset, write_phantom_dataset, DatasetKind, Manifest,
};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::mask::Mask;
use crate::metrics::evaluate_dataset;
use crate::segnet::{read_checkpoint, stack_images, train, write_checkpoint, Segmentor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xlsor", version, about = "Criss-cross attention lung segmentation on synthetic chest phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the phantom dataset described by the config's `data` section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the nested augmented set with masks propagated by a trained segmentor.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Phantom dataset the segmentor was trained on; its phantoms are never reused as sources.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentor; writes the checkpoint and `<out>.csv` with the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Phantom dataset; supplies the validation split and, unless --aug-only, training pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Augmented dataset to add to the training pairs; repeatable.
        #[arg(long)]
        aug: Vec<PathBuf>,
        /// Train on the augmented datasets alone.
        #[arg(long)]
        aug_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split and write the metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val, test or test_corrupted.
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Time criss-cross against dense attention.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Augment { config, checkpoint, data, out } => augment(&config, &checkpoint, &data, &out),
        Command::Train { config, data, aug, aug_only, out } => {
            train_cmd(&config, data.as_deref(), &aug, aug_only, &out)
        }
        Command::Eval { checkpoint, data, out, split, threshold } => eval(&checkpoint, &data, &out, split, threshold),
        Command::Bench { sizes, out, repeats, seed } => {
            let report = run_bench(&sizes, repeats, seed)?;
            for r in &report.results {
                println!(
                    "{0}x{0}: cost ratio {1:.3}, time ratio {2:.2} ({3:.4}s vs {4:.4}s)",
                    r.size, r.cost_ratio, r.time_ratio, r.nonlocal.seconds, r.crisscross.seconds
                );
            }
            write_json(&out, &report)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { cases, seed, out } => {
            if cases == 0 {
                return Err(Error::InvalidArgument("--cases must be >= 1".into()));
            }
            let report = run_suite(cases, seed)?;
            for c in &report.checks {
                let verdict = if c.passed { "ok" } else { "FAILED" };
                println!(
                    "{:<22} {:>3} cases  max rel err {:.3e} (< {:.0e})  {verdict}",
                    c.name, c.cases, c.max_rel_error, c.tolerance
                );
            }
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_segmentor(path: &Path) -> Result<Segmentor> {
    let file = File::open(path).map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}

fn require_size(manifest: &Manifest, size: [usize; 2], what: &str) -> Result<()> {
    if [manifest.height, manifest.width] != size {
        return Err(Error::InvalidInput(format!(
            "{what} is {}x{}, expected {}x{}",
            manifest.height, manifest.width, size[0], size[1]
        )));
    }
    Ok(())
}

fn gen_data(config: &Path, out: &Path) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let m = write_phantom_dataset(out, &cfg.data)?;
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {}, test_corrupted {})",
        m.pairs.len(),
        out.display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        m.count(Split::TestCorrupted)
    );
    Ok(EXIT_OK)
}

fn augment(config: &Path, checkpoint: &Path, data: &Path, out: &Path) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.augment_spec()?;
    let net = load_segmentor(checkpoint)?;
    let manifest = read_manifest(data)?;
    require_size(&manifest, net.config().input_size, "the phantom dataset")?;
    let [h, w] = net.config().input_size;
    let pairs = build_nested_sets(spec, Some(&net), (h, w))?;
    let used = manifest.source_seeds();
    if let Some(p) = pairs.iter().find(|p| used.contains(&p.source_seed)) {
        return Err(Error::InvalidConfig(format!(
            "augment source {} reuses phantom seed {} from {}; pick another augment.seed",
            p.source_id,
            p.source_seed,
            data.display()
        )));
    }
    let m = write_augmented_dataset(out, &pairs, spec.seed)?;
    println!("wrote {} augmented pairs ({} rounds) to {}", m.pairs.len(), spec.rounds, out.display());
    Ok(EXIT_OK)
}

fn train_cmd(config: &Path, data: Option<&Path>, aug: &[PathBuf], aug_only: bool, out: &Path) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let data = data.ok_or_else(|| Error::InvalidInput("no training data directory (--data)".into()))?;
    let manifest = read_manifest(data)?;
    if manifest.kind != DatasetKind::Phantoms {
        return Err(Error::InvalidInput(format!("{} is not a phantom dataset", data.display())));
    }
    require_size(&manifest, cfg.model.input_size, "the phantom dataset")?;
    if aug_only && aug.is_empty() {
        return Err(Error::InvalidInput("--aug-only needs at least one --aug directory".into()));
    }
    let mut train_set = if aug_only { Vec::new() } else { load_pairs(data, &manifest, Some(Split::Train))? };
    for dir in aug {
        let m = read_manifest(dir)?;
        require_size(&m, cfg.model.input_size, "an augmented dataset")?;
        train_set.extend(load_pairs(dir, &m, None)?);
    }
    let val_set = load_pairs(data, &manifest, Some(Split::Val))?;
    let outcome = train(&train_set, &val_set, &cfg.model, &cfg.train)?;

    let mut file = BufWriter::new(File::create(out)?);
    write_checkpoint(&mut file, &outcome.segmentor)?;
    file.flush()?;
    let log_path = out.with_extension("csv");
    fs::write(&log_path, outcome.log.to_csv())?;
    let best = outcome.val_history.iter().find(|(it, _)| *it == outcome.best_iter).map(|(_, d)| *d);
    println!(
        "trained on {} pairs for {} iterations; best val dice {} at iteration {}; wrote {} and {}",
        train_set.len(),
        cfg.train.max_iter,
        best.map_or("n/a".to_string(), |d| format!("{d:.4}")),
        outcome.best_iter,
        out.display(),
        log_path.display()
    );
    Ok(EXIT_OK)
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, split: Split, threshold: f64) -> Result<i32> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument("--threshold must lie in (0, 1)".into()));
    }
    let net = load_segmentor(checkpoint)?;
    let manifest = read_manifest(data)?;
    require_size(&manifest, net.config().input_size, "the dataset")?;
    let pairs = load_pairs(data, &manifest, Some(split))?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!("split {} of {} is empty", split.name(), data.display())));
    }
    let preds = net.segment(&stack_images(&pairs)?, threshold)?;
    let gts: Vec<Mask> = pairs.into_iter().map(|p| p.mask).collect();
    let report = evaluate_dataset(&preds, &gts)?;
    fs::write(out, report.to_json()? + "\n")?;
    println!(
        "{} images in {}: dice {:.4}, avd {:.4}",
        gts.len(),
        split.name(),
        report.dice.mean_or_nan(),
        report.avd.mean_or_nan()
    );
    Ok(EXIT_OK)
}
