//! Command-line front end: `match`, `transfer`, `sr`, `train-toy`,
//! `gradcheck`, `selftest`. Exit codes: 0 success, 1 usage error,
//! 2 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::aggregate::UNetWeights;
use crate::encoder::{bicubic_upsample, EncoderStack, FeaturePyramid};
use crate::error::{Error, Result};
use crate::matcher::match_features;
use crate::pipeline::image_io::{load_png, save_heatmap, save_png};
use crate::pipeline::selftest::{run_gradcheck, run_selftest};
use crate::pipeline::toydata::toy_pair;
use crate::pipeline::train::train_toy;
use crate::pipeline::{Checkpoint, RunConfig, TrainMode};

#[derive(Parser)]
#[command(
    name = "refattn",
    version,
    about = "Reference-based super-resolution with deformable texture transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match LR patches against a reference image and write the top-1
    /// similarity heatmap.
    #[command(name = "match")]
    Match(MatchArgs),
    /// Run deformable texture transfer and dump per-scale internals.
    Transfer(TransferArgs),
    /// Super-resolve an LR image using a reference and a checkpoint.
    Sr(SrArgs),
    /// Train on procedural texture pairs and write a checkpoint + loss log.
    TrainToy(TrainToyArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the oracle/invariant suite and print one line per check.
    Selftest,
}

#[derive(Args)]
struct MatchArgs {
    /// Low-resolution input image (PNG).
    #[arg(long)]
    lr: PathBuf,
    /// Reference image (PNG), dims divisible by 4.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Output heatmap PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    patch: usize,
    /// Encoder seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the full-size encoder widths instead of the tiny ones.
    #[arg(long)]
    full_widths: bool,
    /// Also dump positions/similarities as tensor files at this base path.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory for the exported tensors and heatmaps.
    #[arg(long)]
    out_dir: PathBuf,
    /// Checkpoint to take weights from; seeded weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG (4x the LR size).
    #[arg(long)]
    out: PathBuf,
    /// Optional directory for attention/offset/mask dumps.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Output directory (loss log, checkpoint).
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; toy defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of procedural pairs to generate.
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// numerics | encoder | rda | rfa | losses | unet | all
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Parses and executes; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders its own help/usage text
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Match(args) => cmd_match(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Sr(args) => cmd_sr(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Selftest => cmd_selftest(),
    }
}

fn widths_for(full: bool) -> [usize; 3] {
    if full {
        crate::encoder::DEFAULT_WIDTHS
    } else {
        crate::encoder::TINY_WIDTHS
    }
}

fn cmd_match(args: MatchArgs) -> Result<i32> {
    let lr = load_png(&args.lr)?;
    let reference = load_png(&args.reference)?;
    let encoder = EncoderStack::seeded(args.seed, widths_for(args.full_widths));
    let lr_up = bicubic_upsample(&lr, 4);
    let q = encoder.encode(&lr_up, crate::encoder::Role::Query)?;
    let k = encoder.encode(&reference, crate::encoder::Role::Key)?;
    let map = match_features(&q[2], &k[2], args.k, args.patch)?;
    save_heatmap(&map.similarity_map(), &args.out)?;
    println!("wrote similarity heatmap {}", args.out.display());
    if let Some(base) = args.dump {
        map.save(&base)?;
        println!("wrote correspondence dumps at {}", base.display());
    }
    Ok(0)
}

fn cmd_transfer(args: TransferArgs) -> Result<i32> {
    let lr = load_png(&args.lr)?;
    let reference = load_png(&args.reference)?;
    let (config, weights) = match &args.checkpoint {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            (ckpt.config, ckpt.weights)
        }
        None => {
            let config = RunConfig {
                seed: args.seed,
                ..RunConfig::toy()
            };
            let weights = UNetWeights::seeded(args.seed.wrapping_add(1), config.unet_config())?;
            (config, weights)
        }
    };
    let encoder = EncoderStack::seeded(config.seed, config.widths);
    let lr_up = bicubic_upsample(&lr, config.scale_factor);
    let pyramid = FeaturePyramid::build(&encoder, &lr_up, &reference)?;
    let tape = crate::num::tape::Tape::new();
    let out = crate::aggregate::unet_forward(
        &tape,
        &pyramid,
        &lr_up,
        &weights,
        false,
        &crate::aggregate::ForwardOptions::default(),
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    for l in 0..3 {
        let tag = l + 1;
        save_heatmap(
            &out.maps[l].similarity_map(),
            &args.out_dir.join(format!("similarity.s{tag}.png")),
        )?;
        let offsets = out.down_fields[l].offsets.value();
        let masks = out.down_fields[l].masks.value();
        save_heatmap(
            &per_position_mean(&offsets, true),
            &args.out_dir.join(format!("offsets.s{tag}.png")),
        )?;
        save_heatmap(
            &per_position_mean(&masks, false),
            &args.out_dir.join(format!("masks.s{tag}.png")),
        )?;
        out.down_attended[l]
            .value()
            .save_ndar(&args.out_dir.join(format!("attended.s{tag}.ndar")))?;
        offsets.save_ndar(&args.out_dir.join(format!("offsets.s{tag}.ndar")))?;
        masks.save_ndar(&args.out_dir.join(format!("masks.s{tag}.ndar")))?;
    }
    println!("wrote transfer artifacts to {}", args.out_dir.display());
    Ok(0)
}

/// Collapses `[c,h,w]` fields to a `[h,w]` map: mean magnitude (offsets) or
/// mean value (masks) across the leading axis.
fn per_position_mean(fields: &crate::num::NdArray, magnitude: bool) -> crate::num::NdArray {
    let (c, h, w) = (
        fields.shape()[0],
        fields.shape()[1],
        fields.shape()[2],
    );
    let mut map = vec![0.0; h * w];
    for ch in 0..c {
        for (i, m) in map.iter_mut().enumerate() {
            let v = fields.data()[ch * h * w + i];
            *m += if magnitude { v.abs() } else { v };
        }
    }
    for m in &mut map {
        *m /= c as f64;
    }
    crate::num::NdArray::from_vec(&[h, w], map).expect("finite means")
}

fn cmd_sr(args: SrArgs) -> Result<i32> {
    let lr = load_png(&args.lr)?;
    let reference = load_png(&args.reference)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let result = crate::pipeline::infer::run_sr(
        &lr,
        &reference,
        &checkpoint,
        args.dump_dir.as_deref(),
    )?;
    save_png(&result.image, &args.out)?;
    println!(
        "wrote {} ({}x{})",
        args.out.display(),
        result.image.height(),
        result.image.width()
    );
    Ok(0)
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<i32> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = &args.mode {
        config.mode = match mode.as_str() {
            "rec" => TrainMode::Rec,
            "all" => TrainMode::All,
            other => {
                return Err(Error::Argument(format!(
                    "unknown mode '{other}' (expected rec|all)"
                )))
            }
        };
    }
    config.validate()?;
    if args.pairs == 0 {
        return Err(Error::Argument("need at least one pair".to_string()));
    }
    let pairs = (0..args.pairs)
        .map(|i| toy_pair(config.seed.wrapping_add(i as u64), config.hr_patch, config.scale_factor, 8))
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_toy(&pairs, &config, &args.out)?;
    let first = outcome.reports.first().map(|r| r.rec).unwrap_or(0.0);
    let last = outcome.reports.last().map(|r| r.rec).unwrap_or(0.0);
    println!(
        "trained {} steps on {} pair(s): rec {:.6} -> {:.6}",
        config.steps,
        args.pairs,
        first,
        last
    );
    println!("checkpoint at {}", outcome.checkpoint_dir.display());
    println!("loss log at {}", outcome.log_path.display());
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let lines = run_gradcheck(&args.module, args.seed)?;
    let mut all_ok = true;
    for l in &lines {
        let status = if l.passed() { "ok  " } else { "FAIL" };
        all_ok &= l.passed();
        println!(
            "{status} {name}: max rel err {err:.3e} over {n} elements (tolerance {tol:.0e})",
            name = l.name,
            err = l.report.max_rel_err,
            n = l.report.checked,
            tol = l.tolerance,
        );
    }
    let max = lines
        .iter()
        .map(|l| l.report.max_rel_err)
        .fold(0.0f64, f64::max);
    println!("gradcheck {}: max relative error {max:.3e}", args.module);
    Ok(if all_ok { 0 } else { 2 })
}

fn cmd_selftest() -> Result<i32> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let (passed, total) = run_selftest(&mut lock)?;
    Ok(if passed == total { 0 } else { 2 })
}
