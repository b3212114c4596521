use clap::Parser;
use std::path::PathBuf;

/// Desk-scale steganography laboratory driver.
#[derive(Parser)]
#[command(name = "stegolab", version, about)]
struct Cli {
    /// Pipeline stage: gen-data, train-codec, train-ddpm, train-gan,
    /// select-ddim, select-gan, analyze, payload-sweep, robustness,
    /// steganalyze, report.
    subcommand: String,
    /// Plain-text key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: ./out-<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let stage = match stegolab_cli::Stage::parse(&cli.subcommand) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let out = cli
        .out
        .unwrap_or_else(|| PathBuf::from(format!("out-{}", stage.name())));
    match stegolab_cli::run_experiment(stage, &cli.config, cli.seed, &out) {
        Ok(manifest) => {
            println!(
                "{}: {} outputs -> {}",
                stage.name(),
                manifest.outputs.len(),
                out.display()
            );
        }
        Err(e) => {
            eprintln!("error in {}: {e}", stage.name());
            std::process::exit(stegolab_cli::exit_code_for(&e));
        }
    }
}
