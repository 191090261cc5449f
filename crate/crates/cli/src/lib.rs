//! Command-line front end: scene synthesis, gradient checks, training and reporting.
//!
//! Exit codes: 0 success, 1 check or validation failure, 2 I/O error.

pub mod commands;
pub mod config;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_grad_check, cmd_synth, cmd_train, Manifest, ManifestEntry, TrainOptions, TrainSummary};
pub use config::RunConfig;
pub use report::{cmd_report, ReportTables};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("refusing to write into non-empty directory {} (pass --force)", .0.display())]
    Refused(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] bevkd::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Core(bevkd::Error::Io { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bevkd", version, about = "Radar-from-LiDAR BEV distillation on synthetic scenes")]
#[command(after_help = "Any config key can be overridden with --key=value, e.g. --steps=50 --n-scenes=4.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file with flat keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes and a manifest of realized density ratios.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Also write a CSV point dump per scene.
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference check of every registered operation; JSON report on stdout.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Also write the report to this file.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Pre-train the teacher, then distill into the radar student.
    Train {
        #[command(flatten)]
        common: Common,
        /// Load the teacher instead of pre-training it.
        #[arg(long)]
        skip_pretrain: bool,
        /// Teacher checkpoint for --skip-pretrain [default: <out>/teacher.ckpt].
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
    },
    /// Turn a metrics JSON-lines file into CSV tables.
    Report {
        #[command(flatten)]
        common: Common,
        metrics: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::GradCheck { common, .. }
            | Command::Train { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut ov = overrides.to_vec();
    if let Some(out) = &common.out {
        ov.push(("out".into(), out.display().to_string()));
    }
    if let Some(seed) = common.seed {
        ov.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &ov)?;
    if let Some(out) = &common.out {
        // keep the path verbatim rather than round-tripping it through JSON parsing
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
///
/// Machine-readable output goes to `stdout`; progress goes to the log.
pub fn run(args: Vec<String>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (rest, overrides) = config::split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let cfg = resolve(cli.command.common(), &overrides)?;
    let force = cli.command.common().force;
    let out_flag = cli.command.common().out.clone();
    match cli.command {
        Command::Synth { csv, .. } => {
            let m = cmd_synth(&cfg, force, csv)?;
            log::info!(
                "wrote {} scenes to {}, mean density ratio {}",
                m.scenes.len(),
                cfg.out.display(),
                m.mean_density_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
            );
        }
        Command::GradCheck { report, .. } => {
            let rep = cmd_grad_check(&cfg, &bevkd::gradsuite::REGISTERED_OPS, &bevkd::gradsuite::build_case)?;
            let json = serde_json::to_string_pretty(&rep).expect("report serializes");
            writeln!(stdout, "{json}").map_err(|e| CliError::io("<stdout>", e))?;
            if let Some(p) = report {
                std::fs::write(&p, format!("{json}\n")).map_err(|e| CliError::io(&p, e))?;
            }
            if !rep.passed {
                return Err(CliError::Check(format!("gradient mismatch in {}", rep.failures.join(", "))));
            }
        }
        Command::Train {
            skip_pretrain, teacher, ..
        } => {
            let s = cmd_train(
                &cfg,
                &TrainOptions {
                    force,
                    skip_pretrain,
                    teacher,
                },
            )?;
            log::info!(
                "L_AFD {:.4e} -> {:.4e}, ar_cosine {:?} -> {:?}",
                s.initial.l_afd,
                s.final_.l_afd,
                s.initial.ar_cosine,
                s.final_.ar_cosine
            );
        }
        Command::Report { metrics, .. } => {
            let dir = out_flag.unwrap_or_else(|| metrics.parent().map(Path::to_path_buf).unwrap_or_default());
            let t = cmd_report(&metrics, &dir)?;
            log::info!("{} metric rows -> {}", t.rows, dir.display());
        }
    }
    Ok(())
}
