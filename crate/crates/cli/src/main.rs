//! Command-line front end for the NNL workbench.
//!
//! Workflow: `train-filters` learns a convolutional filter bank with the
//! local rule and writes a `.nnlf` file; `train-classifier` freezes such
//! banks and trains only the affine read-out; `train-e2e` trains the
//! backprop conv baseline end to end; `eval` / `transfer` score saved
//! models; `export-atlas` renders filters; `inspect` prints file metadata.
//!
//! Exit codes: 0 success, 1 user-correctable error (bad flags, bad config,
//! bad files), 2 internal/numerical failure.

mod atlas;
mod config;
mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nnl_core::dataset::{to_float, ShadowSpec, CHANNELS, IMAGE_SIDE};
use nnl_core::eval::{evaluate, transfer, EvalOptions, NnlBlockSpec, TRANSFER_RUNS};
use nnl_core::hebbian::{
    detect_dead_units, load_filter_bank, save_filter_bank, train_filters, FilterBank,
    HebbianConfig, DEAD_UNIT_THRESHOLD,
};
use nnl_core::model::{
    feature_dim, features_for_images, load_model, save_model, Block, BlockArchitecture,
    BlockLayer, ConvLayer, MaxPoolLayer,
};
use nnl_core::numeric::Matrix;
use nnl_core::patches::{PatchSource, PixelGrid};
use nnl_core::train::{init_conv_weights, train_end_to_end, train_top_layer, write_epoch_log, TrainConfig};
use nnl_core::{Error, Result};

use config::{parse_config, BlockKind, BlockSection, RunConfig};
use data::load_dataset;

#[derive(Parser)]
#[command(
    name = "nnl",
    version,
    about = "Local-rule filter learning, conv baselines, and evaluation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a filter bank with the local competitive rule; writes .nnlf
    #[command(name = "train-filters")]
    TrainFilters(TrainFiltersArgs),
    /// Train the affine read-out over frozen filter banks; writes .nnlm
    #[command(name = "train-classifier")]
    TrainClassifier(RunArgs),
    /// Train the conv baseline end to end with backprop; writes .nnlm
    #[command(name = "train-e2e")]
    TrainE2e(RunArgs),
    /// Report a saved model's error on a dataset
    #[command(name = "eval")]
    Eval(EvalArgs),
    /// Re-train the read-out on a new dataset over frozen filters, several seeds
    #[command(name = "transfer")]
    Transfer(TransferArgs),
    /// Render a filter bank as a tiled PNG image
    #[command(name = "export-atlas")]
    ExportAtlas(AtlasArgs),
    /// Print header metadata of a .nnlf or .nnlm file
    #[command(name = "inspect")]
    Inspect(InspectArgs),
}

/// Flags shared by the config-driven commands. Every flag overrides the
/// matching key of the config's [run] section.
#[derive(Args)]
struct RunArgs {
    /// Experiment file: plain-text sections of key = value lines
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker thread count (0 = library default)
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the CSV log path
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override the filter-bank files (comma separated, one per NNL block)
    #[arg(long)]
    filters: Option<String>,
}

#[derive(Args)]
struct TrainFiltersArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Which [block] section's bank to learn (1-based; architectures with
    /// several blocks need one train-filters run per block)
    #[arg(long, default_value_t = 1)]
    block: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved .nnlm model
    #[arg(long)]
    model: PathBuf,
    /// Dataset: synth:std:N:SEED, synth:alt:N:SEED, *.bin, *.rawi, or a comma list
    #[arg(long)]
    data: String,
    /// Darken the leading image columns, e.g. cols=25,factor=0.3
    #[arg(long)]
    shadow: Option<String>,
    /// Multiply every pixel by this factor after float conversion
    #[arg(long)]
    scale: Option<f32>,
    /// Also write the report as CSV to this path
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Accepted for interface uniformity; evaluation is deterministic
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (0 = library default); results do not depend on it
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of read-out retrainings (seeds seed, seed+1, ...)
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct AtlasArgs {
    /// Filter bank (.nnlf) to render
    #[arg(long)]
    filters: PathBuf,
    /// Output image path (PNG)
    #[arg(long)]
    out: PathBuf,
    /// Tiles per row
    #[arg(long, default_value_t = 16)]
    columns: usize,
    /// Accepted for interface uniformity; rendering is deterministic
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for interface uniformity; rendering is single-threaded
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    /// A .nnlf filter bank, a .nnlm model, or an experiment config file
    file: PathBuf,
    /// Accepted for interface uniformity; inspection is read-only
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for interface uniformity; inspection is single-threaded
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::TrainFilters(a) => cmd_train_filters(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::TrainE2e(a) => cmd_train_e2e(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::ExportAtlas(a) => cmd_export_atlas(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Sizes the global worker pool. 0 keeps the library default.
fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool setup: {e}")))
}

/// Reads and parses a config file; sweep-range warnings go to stderr.
fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (cfg, warnings) = parse_config(&text)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

/// Command-line flags win over config keys.
fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.run.threads = t;
    }
    if let Some(o) = &args.out {
        cfg.run.out = Some(o.display().to_string());
    }
    if let Some(l) = &args.log {
        cfg.run.log = Some(l.display().to_string());
    }
    if let Some(f) = &args.filters {
        cfg.run.filters = f
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
}

fn require_out(cfg: &RunConfig) -> Result<String> {
    cfg.run
        .out
        .clone()
        .ok_or_else(|| Error::config("no output path: set 'out' in [run] or pass --out"))
}

fn require_train(cfg: &RunConfig) -> Result<&str> {
    cfg.data
        .train
        .as_deref()
        .ok_or_else(|| Error::config("missing 'train' in [data]"))
}

fn require_test(cfg: &RunConfig) -> Result<&str> {
    cfg.data
        .test
        .as_deref()
        .ok_or_else(|| Error::config("missing 'test' in [data]"))
}

fn load_banks(paths: &[String]) -> Result<Vec<FilterBank>> {
    paths.iter().map(|p| load_filter_bank(p)).collect()
}

fn grid<'a>(f: &'a nnl_core::dataset::FloatImages) -> Result<PixelGrid<'a, f32>> {
    PixelGrid::new(f.raw(), f.len(), IMAGE_SIDE, IMAGE_SIDE)
}

fn train_cfg(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        schedule: cfg.train.lr_schedule(),
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch,
        seed: cfg.run.seed,
    }
}

fn nnl_specs(blocks: &[BlockSection]) -> Vec<NnlBlockSpec> {
    blocks
        .iter()
        .map(|b| NnlBlockSpec {
            power: b.n,
            stride: b.st,
            pool_window: b.wp,
            pool_stride: b.stp,
        })
        .collect()
}

fn cmd_train_filters(args: TrainFiltersArgs) -> Result<()> {
    let index = args.block;
    let args = args.run;
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args);
    set_threads(cfg.run.threads)?;
    if cfg.blocks.is_empty() {
        return Err(Error::config("config needs a [block] section"));
    }
    let block = index
        .checked_sub(1)
        .and_then(|i| cfg.blocks.get(i))
        .ok_or_else(|| {
            Error::config(format!(
                "--block {index} is out of range; the config has {} [block] section(s)",
                cfg.blocks.len()
            ))
        })?;
    if block.kind != BlockKind::Nnl {
        return Err(Error::config(format!(
            "train-filters learns NNL filters; [block] {index} has type = conv",
        )));
    }
    let out = require_out(&cfg)?;
    let ds = load_dataset(require_train(&cfg)?)?;
    let floats = to_float(&ds);
    let grid = grid(&floats)?;
    // Filters are learned from every patch position; the block stride only
    // applies when the bank is later used as a convolution.
    let source = PatchSource::new(grid, block.w, 1)?;
    let hc = HebbianConfig {
        learning_rate: cfg.hebbian.lr,
        epochs: cfg.hebbian.epochs,
        rank_m: block.m as usize,
        delta: block.delta,
        minibatch_size: cfg.hebbian.batch,
        scale_update_by_max: cfg.hebbian.scale_update,
        normalize_patches: cfg.hebbian.normalize_patches,
    };
    let bank = train_filters(&source, block.k, &hc, cfg.run.seed)?;
    save_filter_bank(&bank, &out)?;
    let winners = bank.win_counts.iter().filter(|&&w| w > 0).count();
    let dead = detect_dead_units(&bank, DEAD_UNIT_THRESHOLD).len();
    println!(
        "trained {} filters (window {}) on {} patches for {} epochs -> {}",
        bank.channels(),
        bank.window,
        source.len(),
        bank.epochs_trained,
        out
    );
    match bank.convergence() {
        Some(worst) => println!(
            "final-epoch winners: {winners}/{}; dead units: {dead}; worst | |row|-1 | among winners: {worst:.2e}",
            bank.channels()
        ),
        None => println!("final-epoch winners: 0/{}; dead units: {dead}", bank.channels()),
    }
    Ok(())
}

/// Loads banks and pairs them with the config's NNL blocks.
fn assembled_nnl_blocks(cfg: &RunConfig) -> Result<Vec<Block<f32>>> {
    if cfg.blocks.is_empty() {
        return Err(Error::config("config needs at least one [block] section"));
    }
    if let Some(bad) = cfg.blocks.iter().position(|b| b.kind != BlockKind::Nnl) {
        return Err(Error::config(format!(
            "block {} has type = conv; this command drives NNL blocks only",
            bad + 1
        )));
    }
    if cfg.run.filters.len() != cfg.blocks.len() {
        return Err(Error::config(format!(
            "{} filter bank(s) given for {} NNL block(s); pass one .nnlf per block",
            cfg.run.filters.len(),
            cfg.blocks.len()
        )));
    }
    let banks = load_banks(&cfg.run.filters)?;
    for (i, (bank, block)) in banks.iter().zip(&cfg.blocks).enumerate() {
        if bank.window != block.w || bank.channels() != block.k {
            return Err(Error::config(format!(
                "filter bank '{}' is K={} window={}, but block {} wants K={} w={}",
                cfg.run.filters[i],
                bank.channels(),
                bank.window,
                i + 1,
                block.k,
                block.w
            )));
        }
    }
    nnl_core::eval::nnl_blocks(banks, &nnl_specs(&cfg.blocks))
}

fn cmd_train_classifier(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args);
    set_threads(cfg.run.threads)?;
    let out = require_out(&cfg)?;
    let blocks = assembled_nnl_blocks(&cfg)?;
    let train_ds = load_dataset(require_train(&cfg)?)?;
    let test_ds = load_dataset(require_test(&cfg)?)?;
    if train_ds.class_count() != test_ds.class_count() {
        return Err(Error::config("train/test class counts disagree"));
    }
    let train_f = to_float(&train_ds);
    let test_f = to_float(&test_ds);
    let train_feats = features_for_images(&blocks, grid(&train_f)?)?;
    let test_feats = features_for_images(&blocks, grid(&test_f)?)?;
    println!(
        "feature dimension {} over {} train / {} test images",
        train_feats.cols(),
        train_ds.len(),
        test_ds.len()
    );
    let result = train_top_layer(
        &train_feats,
        train_ds.labels(),
        &test_feats,
        test_ds.labels(),
        train_ds.class_count() as usize,
        &train_cfg(&cfg),
    )?;
    let arch = BlockArchitecture {
        blocks,
        classifier_w: result.w,
        classifier_b: result.b,
    };
    save_model(&arch, &out)?;
    if let Some(log) = &cfg.run.log {
        write_epoch_log(&result.log, log)?;
    }
    if let Some(last) = result.log.last() {
        println!(
            "epoch {}: train error {:.2}%, test error {:.2}% -> {}",
            last.epoch, last.train_error, last.test_error, out
        );
    }
    Ok(())
}

fn cmd_train_e2e(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args);
    set_threads(cfg.run.threads)?;
    let out = require_out(&cfg)?;
    if cfg.blocks.is_empty() {
        return Err(Error::config("config needs at least one [block] section"));
    }
    if let Some(bad) = cfg.blocks.iter().position(|b| b.kind != BlockKind::Conv) {
        return Err(Error::config(format!(
            "block {} has type = nnl; train-e2e drives conv blocks only",
            bad + 1
        )));
    }
    let train_ds = load_dataset(require_train(&cfg)?)?;
    let test_ds = load_dataset(require_test(&cfg)?)?;
    if train_ds.class_count() != test_ds.class_count() {
        return Err(Error::config("train/test class counts disagree"));
    }
    let blocks: Vec<Block<f32>> = cfg
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| Block {
            layer: BlockLayer::Conv(ConvLayer {
                weights: init_conv_weights(
                    b.k,
                    b.w * b.w * CHANNELS,
                    cfg.run.seed.wrapping_add(i as u64),
                ),
                biases: vec![0.0; b.k],
                window: b.w,
                stride: b.st,
            }),
            pool: MaxPoolLayer {
                window: b.wp,
                stride: b.stp,
            },
        })
        .collect();
    let fd = feature_dim(&blocks, IMAGE_SIDE, IMAGE_SIDE)?;
    let classes = train_ds.class_count() as usize;
    let mut arch = BlockArchitecture {
        blocks,
        classifier_w: Matrix::zeros(fd, classes),
        classifier_b: vec![0.0f32; classes],
    };
    let train_f = to_float(&train_ds);
    let test_f = to_float(&test_ds);
    let log = train_end_to_end(
        &mut arch,
        grid(&train_f)?,
        train_ds.labels(),
        grid(&test_f)?,
        test_ds.labels(),
        &train_cfg(&cfg),
    )?;
    save_model(&arch, &out)?;
    if let Some(path) = &cfg.run.log {
        write_epoch_log(&log, path)?;
    }
    if let Some(last) = log.last() {
        println!(
            "epoch {}: train error {:.2}%, test error {:.2}% -> {}",
            last.epoch, last.train_error, last.test_error, out
        );
    }
    Ok(())
}

/// Parses "cols=25,factor=0.3" into a shadow spec.
fn parse_shadow(text: &str) -> Result<ShadowSpec> {
    let mut cols: Option<usize> = None;
    let mut factor: Option<f32> = None;
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--shadow part '{part}' is not key=value")))?;
        match key.trim() {
            "cols" => {
                cols = Some(value.trim().parse().map_err(|_| {
                    Error::config(format!("--shadow cols '{}' is not an integer", value.trim()))
                })?)
            }
            "factor" => {
                factor = Some(value.trim().parse().map_err(|_| {
                    Error::config(format!("--shadow factor '{}' is not a number", value.trim()))
                })?)
            }
            other => {
                return Err(Error::config(format!(
                    "--shadow key '{other}' unknown (expected cols, factor)"
                )))
            }
        }
    }
    let cols = cols.ok_or_else(|| Error::config("--shadow needs cols=N"))?;
    let factor = factor.ok_or_else(|| Error::config("--shadow needs factor=F"))?;
    ShadowSpec::new(cols, factor)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    set_threads(args.threads.unwrap_or(0))?;
    let arch = load_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let opts = EvalOptions {
        shadow: args.shadow.as_deref().map(parse_shadow).transpose()?,
        scale: args.scale,
    };
    let report = evaluate(&arch, &ds, opts)?;
    println!("{report}");
    if let Some(csv) = &args.csv {
        std::fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let mut cfg = load_config(&args.run.config)?;
    apply_overrides(&mut cfg, &args.run);
    set_threads(cfg.run.threads)?;
    if cfg.blocks.is_empty() {
        return Err(Error::config("config needs at least one [block] section"));
    }
    if cfg.blocks.iter().any(|b| b.kind != BlockKind::Nnl) {
        return Err(Error::config("transfer re-uses NNL filter banks; all blocks must be nnl"));
    }
    if cfg.run.filters.len() != cfg.blocks.len() {
        return Err(Error::config(format!(
            "{} filter bank(s) given for {} NNL block(s)",
            cfg.run.filters.len(),
            cfg.blocks.len()
        )));
    }
    let banks = load_banks(&cfg.run.filters)?;
    let train_ds = load_dataset(require_train(&cfg)?)?;
    let test_ds = load_dataset(require_test(&cfg)?)?;
    let n_runs = args.runs.unwrap_or(TRANSFER_RUNS);
    let report = transfer(
        banks,
        &nnl_specs(&cfg.blocks),
        &train_ds,
        &test_ds,
        &train_cfg(&cfg),
        n_runs,
    )?;
    print!("{report}");
    if let Some(path) = &cfg.run.log {
        let mut csv = String::from("run,top1_error_percent\n");
        for (i, run) in report.runs.iter().enumerate() {
            csv.push_str(&format!("{},{:.6}\n", i + 1, run.top1_error));
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path.as_str(), e))?;
    }
    Ok(())
}

fn cmd_export_atlas(args: AtlasArgs) -> Result<()> {
    set_threads(args.threads.unwrap_or(0))?;
    let bank = load_filter_bank(&args.filters)?;
    atlas::export_filter_atlas(&bank, args.columns, &args.out)?;
    println!(
        "wrote atlas of {} filters (window {}) -> {}",
        bank.channels(),
        bank.window,
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&args.file).map_err(|e| Error::io(&args.file, e))?;
    match bytes.get(..4) {
        Some(b"NNLF") => {
            let bank = load_filter_bank(&args.file)?;
            inspect_bank(&bank);
            Ok(())
        }
        Some(b"NNLM") => {
            let arch = load_model(&args.file)?;
            inspect_model(&arch);
            Ok(())
        }
        _ => {
            // Not a binary artifact; maybe an experiment file. Parsing and
            // re-serializing prints it normalized, with defaults filled in.
            let text = String::from_utf8(bytes).map_err(|_| unknown_file(&args.file))?;
            let (cfg, warnings) =
                parse_config(&text).map_err(|e| Error::format(format!(
                    "{}: not a filter bank or model, and not a valid config ({e})",
                    args.file.display()
                )))?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("config (normalized, defaults filled in)");
            print!("{}", config::serialize_config(&cfg));
            Ok(())
        }
    }
}

fn unknown_file(path: &Path) -> Error {
    Error::format(format!(
        "{}: not a filter bank, model, or config file",
        path.display()
    ))
}

fn inspect_bank(bank: &FilterBank) {
    println!("filter bank (.nnlf)");
    println!(
        "  filters: {}   window: {}   patch length: {}",
        bank.channels(),
        bank.window,
        bank.patch_len()
    );
    let total: u64 = bank.win_counts.iter().sum();
    let winners = bank.win_counts.iter().filter(|&&w| w > 0).count();
    println!(
        "  final-epoch wins: {total} patches over {winners}/{} filters",
        bank.channels()
    );
    let dead = detect_dead_units(bank, DEAD_UNIT_THRESHOLD).len();
    match bank.convergence() {
        Some(worst) => println!(
            "  dead filters: {dead}   worst | |row|-1 | among winners: {worst:.3e}"
        ),
        None => println!("  dead filters: {dead}   (no recorded wins)"),
    }
}

fn describe_dataset_shape(arch: &BlockArchitecture<f32>) -> String {
    match feature_dim(&arch.blocks, IMAGE_SIDE, IMAGE_SIDE) {
        Ok(fd) => format!("{fd} features on {IMAGE_SIDE}x{IMAGE_SIDE} input"),
        Err(_) => "feature dim undefined for 32x32 input".to_string(),
    }
}

fn inspect_model(arch: &BlockArchitecture<f32>) {
    println!("model (.nnlm)");
    println!(
        "  blocks: {}   {}   classes: {}",
        arch.blocks.len(),
        describe_dataset_shape(arch),
        arch.classes()
    );
    for (i, block) in arch.blocks.iter().enumerate() {
        let pool = format!(
            "pool {}x{} stride {}",
            block.pool.window, block.pool.window, block.pool.stride
        );
        match &block.layer {
            BlockLayer::Nnl(l) => println!(
                "  block {}: nnl  K={} window={} stride={} power={}  {pool}",
                i + 1,
                l.filters.rows(),
                l.window,
                l.stride,
                l.power
            ),
            BlockLayer::Conv(l) => println!(
                "  block {}: conv K={} window={} stride={}  {pool}",
                i + 1,
                l.weights.rows(),
                l.window,
                l.stride
            ),
        }
    }
    println!(
        "  classifier: {} x {} weights + {} biases",
        arch.classifier_w.rows(),
        arch.classifier_w.cols(),
        arch.classifier_b.len()
    );
}
