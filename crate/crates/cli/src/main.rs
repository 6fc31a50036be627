//! `h3d-marnet`: generate phantoms, train, evaluate, run ablations and
//! analyse datasets.

mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] h3d_marnet::Error),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("png encoding failed for {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use h3d_marnet::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(_) | CliError::Png { .. } => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "h3d-marnet", version, about = "Metal-artifact suppression and kVCT to MVCT translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reduced widths for CPU runs at 64 x 64.
    #[default]
    Desk,
    /// Widths and learning rate as published.
    Full,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Base configuration.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// `key=value` configuration file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for training and phantom generation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "v1..v5")]
    pub ablation: Option<String>,
    #[arg(long, value_name = "l1..l6")]
    pub loss_variant: Option<String>,
    #[arg(long, value_name = "oracle|learned")]
    pub teacher_mode: Option<String>,
    /// Stop stage-2 gradients at the stage-1 output.
    #[arg(long)]
    pub detach_stages: bool,
    /// In-plane size of phantoms and of the model input.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Test,
    Train,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of patients.
        #[arg(long, short = 'n', default_value_t = 8)]
        n: usize,
    },
    /// Train on a dataset and write the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint; writes reports and image grids.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Grids written per patient (artifact slices first).
        #[arg(long, default_value_t = 1)]
        grids: usize,
    },
    /// Train and evaluate each ablation / loss variant on the same split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "v1,v2,v3,v4,v5")]
        ablations: Vec<String>,
        /// Defaults to the configured loss variant.
        #[arg(long, value_delimiter = ',')]
        loss_variants: Vec<String>,
    },
    /// HU correlation and histogram skewness of a dataset.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the resolved configuration and parameter counts.
    Info {
        #[command(flatten)]
        common: Common,
        /// Describe this checkpoint instead of the configured model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("h3d-marnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
