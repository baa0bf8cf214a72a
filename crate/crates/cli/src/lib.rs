//! Command-line driver: dataset synthesis, training, denoising, evaluation,
//! classical baselines, rendering and timing.

use std::fmt;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stdenoise::baselines::Filter;
use stdenoise::snowsim::{Manifest, Split};
use stdenoise::{Error, ErrorKind};

pub mod commands;
pub mod config;
pub mod render;

use commands::{Model, Source};
use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Bad flags or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps a failure onto the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
    }
    EXIT_DATA
}

/// Keeps freed buffers mapped between training steps; first-touch page
/// faults otherwise dominate the step time.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts glibc allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 512 << 20);
    }
}

#[derive(Parser, Debug)]
#[command(name = "stdenoise", version, about = "LiDAR adverse-weather point removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct FrameSelection {
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Use every n-th frame of the split.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inject snowfall into clear scans and write a labelled dataset with a manifest.
    Simulate {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Clear-weather input in the KITTI layout; toy scenes are generated when absent.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Toy sequences to generate.
        #[arg(long, default_value_t = 10)]
        sequences: usize,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a network on a manifest.
    Train {
        #[arg(long, required_unless_present = "dry_run")]
        manifest: Option<PathBuf>,
        /// Run directory for the config snapshot, metrics and checkpoint.
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// full, no-temporal, conv2d-front or conv2d-no-temporal.
        #[arg(long)]
        ablate: Option<String>,
        /// Report the parameter count and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Remove predicted noise from one scan.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        /// Preceding scan; the scan itself is used when absent.
        #[arg(long)]
        prev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against a manifest and write a CSV report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, group = "source")]
        checkpoint: Option<PathBuf>,
        #[arg(long, group = "source")]
        filter: Option<String>,
        /// Predicted label files in the dataset layout.
        #[arg(long, group = "source")]
        pred: Option<PathBuf>,
        #[command(flatten)]
        frames: FrameSelection,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a classical filter over a split and write its labels and report.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        /// ror, sor, dsor, dror or lior.
        #[arg(long)]
        filter: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        frames: FrameSelection,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a range-image PGM and, with labels, a PPM noise overlay.
    Render {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output path; extensions are replaced by .pgm / .ppm.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80.0)]
        max_range: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time the pipeline stages on toy frames.
    Bench {
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(cfg: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

fn parse_filter(name: &str) -> Result<Filter> {
    Ok(Filter::parse(name)
        .ok_or_else(|| UsageError(format!("unknown filter {name:?} (expected ror, sor, dsor, dror or lior)")))?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            out,
            clean,
            sequences,
            subset,
            seed,
            cfg,
        } => {
            let mut rc = load(&cfg)?;
            if let Some(s) = seed {
                rc.snow.seed = s;
            }
            commands::simulate(&mut rc, &out, clean.as_deref(), sequences, subset.as_deref())?;
        }
        Command::Train {
            manifest,
            out,
            ablate,
            dry_run,
            seed,
            cfg,
        } => {
            let mut rc = load(&cfg)?;
            commands::apply_ablation(&mut rc, ablate.as_deref())?;
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            if dry_run {
                println!("parameters: {}", rc.network.parameter_count());
                return Ok(());
            }
            let (manifest, out) = (manifest.expect("required by clap"), out.expect("required by clap"));
            commands::train(&rc, &manifest, &out)?;
        }
        Command::Denoise {
            checkpoint,
            scan,
            prev,
            out,
            precision,
            cfg,
        } => {
            let rc = load(&cfg)?;
            commands::denoise(&rc, &checkpoint, &scan, prev.as_deref(), &out, precision)?;
        }
        Command::Eval {
            manifest,
            checkpoint,
            filter,
            pred,
            frames,
            out,
            precision,
            cfg,
        } => {
            let rc = load(&cfg)?;
            let m = Manifest::read(&manifest)?;
            let source = match (checkpoint, filter, pred.as_deref()) {
                (Some(c), _, _) => Source::Model(Model::load(&c, &rc.sensor, precision)?),
                (_, Some(f), _) => Source::Filter(parse_filter(&f)?),
                (_, _, Some(dir)) => Source::Labels(dir),
                _ => return Err(UsageError("eval needs --checkpoint, --filter or --pred".into()).into()),
            };
            let entries = commands::select_frames(&m, frames.split.into(), frames.every, frames.max_frames);
            let rows = commands::evaluate(&rc, &m, &entries, &source)?;
            let report = commands::render_report(&rows);
            match out {
                Some(p) => {
                    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                    }
                    fs::write(&p, &report).with_context(|| format!("writing {}", p.display()))?;
                }
                None => print!("{report}"),
            }
        }
        Command::Baseline {
            manifest,
            filter,
            out,
            frames,
            cfg,
        } => {
            let rc = load(&cfg)?;
            let f = parse_filter(&filter)?;
            let m = Manifest::read(&manifest)?;
            let entries = commands::select_frames(&m, frames.split.into(), frames.every, frames.max_frames);
            rc.snapshot(&out)?;
            let rows = commands::baseline(&rc, &m, &entries, f, &out)?;
            let report = commands::render_report(&rows);
            if let Some(last) = report.lines().last() {
                println!("{} {last}", f.name());
            }
        }
        Command::Render {
            scan,
            labels,
            out,
            max_range,
            cfg,
        } => {
            let rc = load(&cfg)?;
            for p in commands::render(&rc, &scan, labels.as_deref(), &out, max_range)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Bench { frames, cfg } => {
            let rc = load(&cfg)?;
            print!("{}", commands::bench(&rc, frames)?);
        }
    }
    Ok(())
}
