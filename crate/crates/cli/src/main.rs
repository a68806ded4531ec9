use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evc_cli::commands;

/// Variable-bit-rate neural image codec with mask-decay model compression.
#[derive(Parser)]
#[command(name = "evc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec from scratch on an image directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image directory (overrides [dataset] dir from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint (.evck).
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Mask-decay a teacher checkpoint into a student, with a from-scratch
    /// baseline for comparison.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Teacher checkpoint (.evck).
        #[arg(long)]
        teacher: PathBuf,
        /// Which half to prune: encoder, decoder, or both.
        #[arg(long, default_value = "both")]
        which: String,
        /// Student encoder scheme (small/medium/large or c1,c2,c3,c4).
        #[arg(long, default_value = "small")]
        student_enc: String,
        /// Student decoder scheme.
        #[arg(long, default_value = "small")]
        student_dec: String,
        /// Output student checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Output for the equal-budget from-scratch baseline.
        #[arg(long)]
        baseline_out: Option<PathBuf>,
        /// Prune report (per-mask survivors).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compress one image (PNG or PPM) to an .evc1 bitstream.
    Compress {
        #[arg(long)]
        model: PathBuf,
        /// Rate index into the checkpoint's trained rate points.
        #[arg(long, default_value_t = 0)]
        rate: usize,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decompress an .evc1 bitstream back to an image.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Compress and decompress a corpus at every rate index; writes the
    /// evaluation report and RD-curve CSVs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Label used in file names and the curve CSV.
        #[arg(long, default_value = "model")]
        label: String,
        /// Optional anchor curve CSV for a BD-Rate summary.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
    /// Bjontegaard delta rate between two RD-curve CSVs (prints percent).
    Bdrate { test: PathBuf, anchor: PathBuf },
    /// Build a scalable-encoder bank under one training regime.
    Rrl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Shared-stack checkpoint; its encoder is the mask-decay teacher.
        #[arg(long)]
        teacher: PathBuf,
        /// separate | end-to-end | one-by-one | ours
        #[arg(long, default_value = "ours")]
        regime: String,
        /// Number of small encoders (0 means the default of 4).
        #[arg(long, default_value_t = 0)]
        bank_size: usize,
        /// Small-encoder scheme.
        #[arg(long, default_value = "small")]
        student_scheme: String,
        /// Output bank (.evcb).
        #[arg(long)]
        out: PathBuf,
        /// Ensemble report CSV over the training corpus.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Relative-improvement table from baseline/ours/teacher curves measured
    /// against an anchor curve.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, default_value = "run")]
        label: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic texture corpus.
    GenCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            data,
            out,
            metrics,
        } => commands::cmd_train(&config, data.as_deref(), &out, metrics.as_deref()),
        Command::Prune {
            config,
            data,
            teacher,
            which,
            student_enc,
            student_dec,
            out,
            baseline_out,
            report,
        } => commands::cmd_prune(
            &config,
            data.as_deref(),
            &teacher,
            &which,
            &student_enc,
            &student_dec,
            &out,
            baseline_out.as_deref(),
            report.as_deref(),
        ),
        Command::Compress {
            model,
            rate,
            input,
            output,
        } => commands::cmd_compress(&model, rate, &input, &output),
        Command::Decompress {
            model,
            input,
            output,
        } => commands::cmd_decompress(&model, &input, &output),
        Command::Eval {
            model,
            data,
            out_dir,
            label,
            anchor,
        } => commands::cmd_eval(&model, &data, &out_dir, &label, anchor.as_deref()).map(|_| ()),
        Command::Bdrate { test, anchor } => commands::cmd_bdrate(&test, &anchor).map(|_| ()),
        Command::Rrl {
            config,
            data,
            teacher,
            regime,
            bank_size,
            student_scheme,
            out,
            report,
        } => commands::cmd_rrl(
            &config,
            data.as_deref(),
            &teacher,
            &regime,
            bank_size,
            &student_scheme,
            &out,
            report.as_deref(),
        ),
        Command::Report {
            baseline,
            ours,
            teacher,
            anchor,
            label,
            out,
        } => commands::cmd_report(&baseline, &ours, &teacher, &anchor, &label, out.as_deref())
            .map(|_| ()),
        Command::GenCorpus {
            out_dir,
            count,
            size,
            seed,
        } => commands::cmd_gen_corpus(&out_dir, count, size, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
