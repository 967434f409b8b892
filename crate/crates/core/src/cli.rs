//! `upw` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::mixed::{write_mixed_to, MixedReader, MixedRecord};
use crate::model::{
    grad_check, local_window_mask, Coverage, ModelConfig, ModelError, Objective, UnifiedModel,
};
use crate::parallel::Execution;
use crate::ppm::{load_ppm, save_ppm};
use crate::tokenizer::{fold_image, unfold_image, FoldingFactor};
use crate::train::{
    image_sequence, pretrain_images, sample_image, Dataset, TrainConfig, TrainError,
    CHECKPOINT_FILE, LOSS_CSV,
};
use crate::vocab::Vocab;
use crate::window::{pad_and_partition, sub_partition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const EXIT_CODES: &str =
    "Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.";

#[derive(Debug, Parser)]
#[command(name = "upw", version, about = "Unified pix-token/word-token pipeline", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fold an image's colors and write the reconstruction.
    #[command(after_help = EXIT_CODES)]
    FoldViz {
        /// Folding factor (2, 4, 8, 16, 32) or `all`; `all` writes one
        /// `<out>_f<F>.ppm` per factor.
        #[arg(long, value_parser = parse_factor_choice)]
        factor: FactorChoice,
        /// Input PPM (P6 or P5).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PPM.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the windowed pix tokens of an image as JSON.
    #[command(after_help = EXIT_CODES)]
    Tokenize {
        #[arg(long, value_parser = parse_factor)]
        factor: FoldingFactor,
        /// Window side length.
        #[arg(long)]
        window: usize,
        /// Sub-window side length.
        #[arg(long)]
        sub: Option<usize>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack text and image files, in command-line order, into a mixed file.
    #[command(after_help = EXIT_CODES)]
    Pack(PackArgs),
    /// Print vocabulary tables, attention masks or mixed-file contents.
    #[command(subcommand)]
    Inspect(Inspect),
    /// Pretrain on a directory of PPM files or a mixed file.
    #[command(after_help = EXIT_CODES)]
    Train {
        /// Flat `key = value` file with model and training keys.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for loss.csv and model.ckpt (overrides out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the worker pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Sample an image from a checkpoint.
    #[command(after_help = EXIT_CODES)]
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sampling temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Check full-model gradients against central finite differences.
    #[command(after_help = EXIT_CODES)]
    Gradcheck {
        /// Model config (`key = value`); defaults to the tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Check at most this many entries per parameter tensor.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// UTF-8 text file; repeatable.
    #[arg(long, action = clap::ArgAction::Append)]
    text: Vec<PathBuf>,
    /// PPM image; repeatable.
    #[arg(long, action = clap::ArgAction::Append)]
    image: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Inspect {
    /// Unified vocabulary id ranges.
    #[command(after_help = EXIT_CODES)]
    Vocab {
        #[arg(long, value_parser = parse_factor)]
        factor: FoldingFactor,
    },
    /// Local attention mask as a 0/1 matrix (rows = queries).
    #[command(after_help = EXIT_CODES)]
    Mask {
        /// Window side length.
        #[arg(long)]
        window: usize,
        /// Sub-window side length.
        #[arg(long)]
        sub: Option<usize>,
        /// Conditioning prefix length.
        #[arg(long, default_value_t = 1)]
        condition: usize,
    },
    /// Record table of a mixed file.
    #[command(after_help = EXIT_CODES)]
    Mixed { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorChoice {
    One(FoldingFactor),
    All,
}

fn parse_factor(s: &str) -> Result<FoldingFactor, String> {
    let v: u32 = s
        .parse()
        .map_err(|_| format!("`{s}` is not a number; valid factors are {{2, 4, 8, 16, 32}}"))?;
    FoldingFactor::new(v).map_err(|e| e.to_string())
}

fn parse_factor_choice(s: &str) -> Result<FactorChoice, String> {
    if s == "all" {
        Ok(FactorChoice::All)
    } else {
        parse_factor(s).map(FactorChoice::One)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn from_model(e: ModelError) -> Failure {
    match e {
        ModelError::NonFinite(_) => Failure::Numerical(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

fn from_train(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } | TrainError::Mismatch { .. } => {
            Failure::Numerical(e.to_string())
        }
        TrainError::Model(m) => from_model(m),
        _ => Failure::Data(e.to_string()),
    }
}

/// Runs the CLI with process stdout/stderr and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let text = e.render().to_string();
            return if e.exit_code() == 0 {
                let _ = write!(out, "{text}");
                EXIT_OK
            } else {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, &matches, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

fn dispatch(cmd: Command, matches: &ArgMatches, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::FoldViz {
            factor,
            input,
            out: path,
        } => fold_viz(factor, &input, &path, out),
        Command::Tokenize {
            factor,
            window,
            sub,
            input,
            out: path,
        } => tokenize(factor, window, sub, &input, &path),
        Command::Pack(args) => {
            let sub = matches.subcommand_matches("pack").expect("pack matches");
            pack(&args, sub, out)
        }
        Command::Inspect(Inspect::Vocab { factor }) => {
            write!(out, "{}", Vocab::new(factor).range_table()).map_err(data)
        }
        Command::Inspect(Inspect::Mask {
            window,
            sub,
            condition,
        }) => {
            if window == 0 {
                return Err(Failure::Usage("--window must be >= 1".into()));
            }
            let mask = local_window_mask(window * window, condition, sub)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            write!(out, "{mask}").map_err(data)
        }
        Command::Inspect(Inspect::Mixed { file }) => inspect_mixed(&file, out),
        Command::Train {
            config,
            data: data_path,
            out: dir,
            sequential,
        } => {
            let mut tc = TrainConfig::load(&config).map_err(from_train)?;
            if let Some(d) = dir {
                tc.out_dir = d;
            }
            let ds = Dataset::load(&data_path).map_err(from_train)?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::best_available()
            };
            let run = pretrain_images(&ds, &tc, exec).map_err(from_train)?;
            let (first, last) = (
                run.curve.points[0],
                run.curve.points[run.curve.points.len() - 1],
            );
            writeln!(
                out,
                "step {} loss {:.6} -> step {} loss {:.6}\nwrote {} and {}",
                first.0,
                first.1,
                last.0,
                last.1,
                tc.out_dir.join(LOSS_CSV).display(),
                tc.out_dir.join(CHECKPOINT_FILE).display()
            )
            .map_err(data)
        }
        Command::Sample {
            ckpt,
            seed,
            out: path,
            temperature,
        } => {
            if !temperature.is_finite() {
                return Err(Failure::Usage("--temperature must be finite".into()));
            }
            let folded = sample_image(&ckpt, temperature, seed).map_err(from_train)?;
            save_ppm(&path, &unfold_image(&folded)).map_err(data)
        }
        Command::Gradcheck {
            config,
            eps,
            stride,
            tolerance,
            seed,
        } => gradcheck(config.as_deref(), eps, stride, tolerance, seed, out),
    }
}

fn suffixed(path: &Path, f: FoldingFactor) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or("out".into(), |s| s.to_string_lossy().into_owned());
    let ext = path
        .extension()
        .map_or("ppm".into(), |e| e.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_f{}.{ext}", f.value()))
}

fn fold_viz(
    choice: FactorChoice,
    input: &Path,
    path: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let img = load_ppm(input).map_err(data)?;
    let targets: Vec<(FoldingFactor, PathBuf)> = match choice {
        FactorChoice::One(f) => vec![(f, path.to_path_buf())],
        FactorChoice::All => FoldingFactor::ALL
            .iter()
            .map(|&f| (f, suffixed(path, f)))
            .collect(),
    };
    for (f, p) in targets {
        let folded = fold_image(&img, f).map_err(data)?;
        save_ppm(&p, &unfold_image(&folded)).map_err(data)?;
        writeln!(out, "f={} -> {}", f.value(), p.display()).map_err(data)?;
    }
    Ok(())
}

fn tokenize(
    factor: FoldingFactor,
    window: usize,
    sub: Option<usize>,
    input: &Path,
    path: &Path,
) -> Result<(), Failure> {
    if window == 0 {
        return Err(Failure::Usage("--window must be >= 1".into()));
    }
    if let Some(s) = sub {
        if s == 0 || !window.is_multiple_of(s) {
            return Err(Failure::Usage(format!(
                "--sub {s} must divide --window {window}"
            )));
        }
    }
    let img = load_ppm(input).map_err(data)?;
    let folded = fold_image(&img, factor).map_err(data)?;
    let grid = pad_and_partition(&folded, window).map_err(data)?;
    let mut doc = json!({
        "width": grid.orig_width,
        "height": grid.orig_height,
        "factor": factor.value(),
        "vocab_size": factor.vocab_size(),
        "pad_id": factor.vocab_size(),
        "window_size": window,
        "windows_x": grid.windows_x,
        "windows_y": grid.windows_y,
        "order": "windows row-major; tokens row-major within each window",
        "windows": grid.windows,
    });
    if let Some(s) = sub {
        let subs = grid
            .windows
            .iter()
            .map(|w| sub_partition(w, window, s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(data)?;
        doc["sub_size"] = json!(s);
        doc["sub_windows"] = json!(subs);
    }
    let mut text = serde_json::to_string_pretty(&doc).map_err(data)?;
    text.push('\n');
    fs::write(path, text).map_err(data)
}

fn pack(args: &PackArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<(), Failure> {
    let mut ordered: Vec<(usize, bool, &PathBuf)> = Vec::new();
    if let Some(idx) = m.indices_of("text") {
        ordered.extend(idx.zip(&args.text).map(|(i, p)| (i, false, p)));
    }
    if let Some(idx) = m.indices_of("image") {
        ordered.extend(idx.zip(&args.image).map(|(i, p)| (i, true, p)));
    }
    ordered.sort_by_key(|e| e.0);
    let mut records = Vec::with_capacity(ordered.len());
    for (_, is_image, p) in ordered {
        records.push(if is_image {
            MixedRecord::Image(load_ppm(p).map_err(|e| data(format!("{}: {e}", p.display())))?)
        } else {
            let bytes = fs::read(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            let s = String::from_utf8(bytes).map_err(|e| {
                data(format!(
                    "{}: invalid UTF-8 at byte {}",
                    p.display(),
                    e.utf8_error().valid_up_to()
                ))
            })?;
            MixedRecord::Text(s)
        });
    }
    let file = fs::File::create(&args.out).map_err(data)?;
    let mut w = std::io::BufWriter::new(file);
    write_mixed_to(&mut w, &records).map_err(data)?;
    w.flush().map_err(data)?;
    writeln!(
        out,
        "packed {} records into {}",
        records.len(),
        args.out.display()
    )
    .map_err(data)
}

fn inspect_mixed(path: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let file = fs::File::open(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let mut reader = MixedReader::new(BufReader::new(file)).map_err(data)?;
    writeln!(out, "declared records: {}", reader.declared_count()).map_err(data)?;
    writeln!(out, "{:<7} {:<6} {:<10} detail", "index", "kind", "offset").map_err(data)?;
    let mut index = 0;
    loop {
        let offset = reader.offset();
        let Some(r) = reader.next() else { break };
        let line = match r.map_err(data)? {
            MixedRecord::Text(s) => {
                let preview: String = s.chars().take(32).flat_map(char::escape_default).collect();
                format!(
                    "{index:<7} {:<6} {offset:<10} {} bytes \"{preview}\"",
                    "text",
                    s.len()
                )
            }
            MixedRecord::Image(img) => format!(
                "{index:<7} {:<6} {offset:<10} {}x{}",
                "image",
                img.width(),
                img.height()
            ),
        };
        writeln!(out, "{line}").map_err(data)?;
        index += 1;
    }
    Ok(())
}

fn gradcheck(
    config: Option<&Path>,
    eps: f64,
    stride: Option<usize>,
    tolerance: f64,
    seed: u64,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Failure::Usage(format!("--eps {eps} outside [1e-6, 1e-3]")));
    }
    let cfg = match config {
        Some(p) => TrainConfig::load(p).map_err(from_train)?.model,
        None => ModelConfig::tiny(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = UnifiedModel::new(cfg, &mut rng).map_err(from_model)?;
    let side = cfg.image_size;
    let pixels: Vec<u8> = (0..side * side * 3).map(|_| rng.gen()).collect();
    let img = crate::tokenizer::RgbImage::new(side, side, pixels).map_err(data)?;
    let seq = image_sequence(&img, &cfg, model.vocab()).map_err(from_train)?;
    let coverage = stride.map_or(Coverage::All, Coverage::Strided);
    let report = grad_check(
        model.params(),
        eps,
        coverage,
        Execution::best_available(),
        |tape| {
            let (loss, n) = model.sequence_loss(tape, &seq, Objective::Image)?;
            tape.scale(loss, 1.0 / n as f64)
        },
    )
    .map_err(from_model)?;
    writeln!(
        out,
        "checked {} entries; max relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
        report.entries_checked, report.max_rel_error, report.worst, report.analytic, report.numeric
    )
    .map_err(data)?;
    if report.max_rel_error >= tolerance {
        return Err(Failure::Numerical(format!(
            "max relative error {:.3e} is not below {tolerance:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}
