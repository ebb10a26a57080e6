use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand, ValueEnum};
use prunelab::io::corpus::synthetic_corpus;
use prunelab::io::{Corpus, RunConfig};
use prunelab::saliency::Metric;
use prunelab::Result;
use prunelab_cli::{Init, OneshotOptions, ReportSource};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Pruning-aware pretraining of small decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic text corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train without pruning.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long, conflicts_with = "arch_from")]
        init: Option<PathBuf>,
        /// Fresh weights shaped like this checkpoint.
        #[arg(long)]
        arch_from: Option<PathBuf>,
    },
    /// Train while pruning mini-groups until the parameter budget is met.
    PrunePretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "arch_from")]
        init: Option<PathBuf>,
        #[arg(long)]
        arch_from: Option<PathBuf>,
        /// Compensate surviving weights after each prune.
        #[arg(long)]
        second_order: bool,
    },
    /// Print held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0.02)]
        heldout_fraction: f64,
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Print the architecture of a checkpoint or of every state in a run.
    ReportArch {
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write a run's prune trace as CSV.
    ExportTrace {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained checkpoint to a budget without further training.
    OneshotPrune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 8)]
        calib_batches: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        second_order: bool,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "first_order", value_parser = parse_metric)]
        metric: Metric,
    },
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| format!("unknown metric {s:?}"))
}

fn start<'a>(init: &'a Option<PathBuf>, arch_from: &'a Option<PathBuf>) -> Init<'a> {
    match (init, arch_from) {
        (Some(p), _) => Init::Weights(p),
        (None, Some(p)) => Init::Architecture(p),
        (None, None) => Init::Fresh,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::GenCorpus { out, bytes, seed } => {
            std::fs::write(&out, synthetic_corpus(bytes, seed))?;
            println!("wrote {bytes} bytes to {}", out.display());
        }
        Command::Pretrain {
            config,
            corpus,
            out,
            init,
            arch_from,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::load(&corpus, cfg.heldout_fraction)?;
            let s = prunelab_cli::pretrain(&cfg, &corpus, &out, start(&init, &arch_from), &mut stderr)?;
            println!("steps={} tokens={} params={}", s.steps, s.tokens, s.params);
        }
        Command::PrunePretrain {
            config,
            corpus,
            out,
            init,
            arch_from,
            second_order,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::load(&corpus, cfg.heldout_fraction)?;
            let s = prunelab_cli::prune_pretrain(&cfg, &corpus, &out, start(&init, &arch_from), second_order, &mut stderr)?;
            println!(
                "steps={} tokens={} params={} prune_events={}",
                s.steps, s.tokens, s.params, s.prune_events
            );
        }
        Command::Eval {
            ckpt,
            corpus,
            seq_len,
            heldout_fraction,
            max_windows,
        } => {
            let corpus = Corpus::load(&corpus, heldout_fraction)?;
            let ppl = prunelab_cli::eval(&ckpt, &corpus, seq_len, max_windows)?;
            println!("perplexity={ppl:?}");
        }
        Command::ReportArch { ckpt, run, format } => {
            let source = match (&ckpt, &run) {
                (Some(c), _) => ReportSource::Checkpoint(c),
                (None, Some(r)) => ReportSource::Run(r),
                (None, None) => unreachable!("clap requires one of --ckpt and --run"),
            };
            print!("{}", prunelab_cli::report_arch(source, matches!(format, Format::Csv))?);
        }
        Command::ExportTrace { run, out } => {
            let t = prunelab_cli::export_trace(&run, &out)?;
            println!("wrote {} prune events to {}", t.len(), out.display());
        }
        Command::OneshotPrune {
            ckpt,
            target,
            calib_batches,
            corpus,
            out,
            second_order,
            seq_len,
            batch_size,
            seed,
            metric,
        } => {
            let corpus = Corpus::load(&corpus, 0.02)?;
            let opts = OneshotOptions {
                target,
                calib_batches,
                seq_len,
                batch_size,
                seed,
                metric,
                second_order,
            };
            let t = prunelab_cli::oneshot(&ckpt, &corpus, &out, &opts)?;
            println!("prune_events={} params={}", t.len(), t.rows.last().map_or(0, |r| r.params));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: code=USAGE message={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", prunelab_cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
