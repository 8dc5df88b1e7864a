//! Command-line front end: corpus generation, training, separation,
//! evaluation and plot-data export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error (including
//! I/O), 3 numeric failure.

pub mod inspect;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use consep::datagen::{build_dataset, Dataset, Manifest, Split, INDEX_FILE};
use consep::dsp::{wav_read, wav_write};
use consep::model::{ConSep, ConSepConfig};
use consep::training::{
    checkpoint_exists, evaluate, load_checkpoint, score_item, train_to_dir, Checkpoint,
    EvaluationReport, TrainSettings, BEST_DIR,
};
use consep::{Error, Result};
use sha2::{Digest, Sha256};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "consep",
    version,
    about = "Magnitude-conditioned speech separation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus from a TOML manifest.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Overwrite an existing corpus in --out.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; resumes automatically when --out holds a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop once this many optimization steps have been taken in total.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Separate a mixture into s1.wav .. sK.wav.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Use the references themselves as estimates (metric cross-check).
        #[arg(long)]
        oracle: bool,
    },
    /// Export encoder bases ordered by similarity, with frequency responses.
    InspectBases {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a log-magnitude spectrogram as CSV plus PGM.
    InspectSpectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        /// CSV path; the image is written next to it with a .pgm extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        win: usize,
        #[arg(long, default_value_t = 8)]
        hop: usize,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// A checkpoint directory, or a training output whose `best/` is used.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if checkpoint_exists(path) {
        return Ok(path.to_path_buf());
    }
    let best = path.join(BEST_DIR);
    if checkpoint_exists(&best) {
        return Ok(best);
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint found"),
    })
}

fn load_model(path: &Path) -> Result<(ConSep<f32>, Checkpoint<f32>)> {
    let ckpt = load_checkpoint::<f32>(&resolve_checkpoint(path)?)?;
    let model = ConSep::new(ckpt.config.clone(), ckpt.params.clone())?;
    Ok((model, ckpt))
}

/// Hex SHA-256 of the configuration's canonical JSON form.
pub fn config_hash(cfg: &ConSepConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            manifest,
            out,
            threads,
            force,
        } => {
            let m = Manifest::load(&manifest)?;
            if out.join(INDEX_FILE).exists() && !force {
                return Err(Error::InvalidArgument(format!(
                    "{} already holds a corpus; pass --force to overwrite",
                    out.display()
                )));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let s = pool.install(|| build_dataset(&m, &out))?;
            println!(
                "wrote {} mixtures ({} wav files): train {}, valid {}, test {}",
                s.mixtures, s.wav_files, s.train, s.valid, s.test
            );
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            max_steps,
        } => {
            let cfg = ConSepConfig::load(&config)?;
            let train = Dataset::load(&data, Split::Train)?;
            let valid = Dataset::load(&data, Split::Valid)?;
            let settings = TrainSettings {
                epochs,
                seed,
                max_steps,
                ..TrainSettings::default()
            };
            let s = train_to_dir::<f32>(&cfg, &train, &valid, &settings, &out)?;
            println!(
                "{} at epoch {} step {} ({:?})",
                if s.resumed {
                    "resumed, stopped"
                } else {
                    "stopped"
                },
                s.epochs,
                s.steps,
                s.end
            );
        }
        Command::Separate { ckpt, input, out } => {
            let (model, _) = load_model(&ckpt)?;
            let mixture = wav_read(&input)?;
            let sources = model.separate(&mixture)?;
            std::fs::create_dir_all(&out).map_err(io(&out))?;
            for (k, s) in sources.iter().enumerate() {
                wav_write(out.join(format!("s{}.wav", k + 1)), s)?;
            }
        }
        Command::Evaluate {
            ckpt,
            data,
            report,
            oracle,
        } => {
            let (model, checkpoint) = load_model(&ckpt)?;
            let test = Dataset::load(&data, Split::Test)?;
            if test.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} has no test items",
                    data.display()
                )));
            }
            let items = if oracle {
                test.items()
                    .iter()
                    .map(|item| score_item(&item.references, item))
                    .collect::<Result<Vec<_>>>()?
            } else {
                evaluate(&model, &test)?
            };
            let r = EvaluationReport::new(items, config_hash(&checkpoint.config))?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            std::fs::write(&report, text + "\n").map_err(io(&report))?;
        }
        Command::InspectBases { ckpt, out } => {
            let (model, _) = load_model(&ckpt)?;
            let w = model
                .params()
                .get("encoder.weight")
                .expect("every model has an encoder");
            let taps = w.shape()[2];
            let filters: Vec<Vec<f64>> = w.to_f64_vec().chunks(taps).map(<[f64]>::to_vec).collect();
            let order = inspect::greedy_order(&filters);
            let sorted: Vec<Vec<f64>> = order.iter().map(|&i| filters[i].clone()).collect();
            let responses = sorted
                .iter()
                .map(|f| inspect::frequency_response(f))
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&out).map_err(io(&out))?;
            let order_rows: Vec<Vec<f64>> = order.iter().map(|&i| vec![i as f64]).collect();
            inspect::write_csv(&out.join("order.csv"), &order_rows)?;
            inspect::write_csv(&out.join("bases.csv"), &sorted)?;
            let (lo, hi) = inspect::value_range(&sorted);
            inspect::write_pgm(&out.join("bases.pgm"), &sorted, lo, hi)?;
            inspect::write_csv(&out.join("response.csv"), &responses)?;
            let db: Vec<Vec<f64>> = responses
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|v| (20.0 * v.log10()).max(inspect::DB_FLOOR))
                        .collect()
                })
                .collect();
            let (_, top) = inspect::value_range(&db);
            inspect::write_pgm(&out.join("response.pgm"), &db, top + inspect::DB_FLOOR, top)?;
        }
        Command::InspectSpectrogram {
            input,
            out,
            win,
            hop,
        } => {
            let x = wav_read(&input)?;
            let spec = inspect::log_spectrogram(&x, win, hop)?;
            inspect::write_csv(&out, &spec)?;
            // Image rows run from the highest frequency down.
            let flipped: Vec<Vec<f64>> = spec.iter().rev().cloned().collect();
            let (_, hi) = inspect::value_range(&flipped);
            inspect::write_pgm(&out.with_extension("pgm"), &flipped, inspect::DB_FLOOR, hi)?;
        }
    }
    Ok(())
}
