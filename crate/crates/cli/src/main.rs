//! `neuscrape` — neural web content extraction from the command line.
//!
//! Subcommands: `scrape`, `train`, `eval`, `bench`, `gen`, `quantize`.
//! `NEUSCRAPE_THREADS` overrides `--workers` everywhere.

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "neuscrape", version, about = "Neural web content extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract primary content from HTML files or a JSONL corpus.
    Scrape(commands::ScrapeArgs),
    /// Train a model on a labeled corpus.
    Train(commands::TrainArgs),
    /// Evaluate an extractor against a labeled corpus.
    Eval(commands::EvalArgs),
    /// Measure end-to-end extraction latency.
    Bench(commands::BenchArgs),
    /// Generate a synthetic labeled corpus.
    Gen(commands::GenArgs),
    /// Quantize a trained checkpoint to 8-bit weights.
    Quantize(commands::QuantizeArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scrape(args) => commands::scrape(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Bench(args) => commands::bench(args),
        Command::Gen(args) => commands::gen(args),
        Command::Quantize(args) => commands::quantize(args),
    };
    if let Err(e) = result {
        // single machine-parsable line on stderr
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
