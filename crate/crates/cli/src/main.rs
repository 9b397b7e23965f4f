mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "alei", version, about = "Low-level expert fusion for synthetic-image detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of real and fake images.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_real: usize,
        #[arg(long, default_value_t = 1000)]
        n_fake: usize,
        /// Comma-separated fake families (up, hf, cb); fakes are split evenly.
        #[arg(long, default_value = "up")]
        families: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value = "none")]
        distort: String,
        /// Corpus amplitudes and filters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stack the extractor planes of every image into a new dataset file.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "image,npr,srm,bayar")]
        kinds: String,
        #[arg(long, default_value_t = 2)]
        npr_factor: usize,
        #[arg(long, default_value_t = 1.0)]
        hpr_sigma: f64,
    },
    /// Train one modality (phase 1) or the fusion modules (phase 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Extractor kind, or `encoder` for the adapter's encoder (phase 1).
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset: images, or planes from `extract`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoints loaded before training; phase 2 takes the phase-1 fragments.
        #[arg(long, value_delimiter = ',')]
        resume: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Report::Text)]
        report: Report,
        /// Evaluate this modality's phase-1 probe instead of the fused model.
        #[arg(long)]
        modality: Option<String>,
        /// Per-sample scores and routing weights as CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train and evaluate the full model and component-ablated variants.
    Ablate {
        /// Components to switch off, one at a time and then together.
        #[arg(long, default_value = "le,cla,liia,dfs")]
        disable: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Report::Text)]
        report: Report,
        /// Also write the CSV table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients against central differences in 64-bit.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        dims: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let res = match cli.command {
        Command::GenData { out, n_real, n_fake, families, seed, size, distort, config } => {
            commands::gen_data(&out, n_real, n_fake, &families, seed, size, &distort, config.as_deref())
        }
        Command::Extract { data, out, kinds, npr_factor, hpr_sigma } => {
            commands::extract(&data, &out, &kinds, npr_factor, hpr_sigma)
        }
        Command::Train { phase, modality, config, data, resume, out, seed } => {
            commands::train(phase, modality.as_deref(), config.as_deref(), &data, &resume, &out, seed)
        }
        Command::Eval { ckpt, data, config, report, modality, dump } => {
            commands::eval(&ckpt, &data, config.as_deref(), report, modality.as_deref(), dump.as_deref())
        }
        Command::Ablate { disable, config, seed, report, out } => {
            commands::ablate(&disable, config.as_deref(), seed, report, out.as_deref())
        }
        Command::Gradcheck { dims } => commands::gradcheck(&dims),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
