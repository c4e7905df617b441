mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Usage;

/// Compression for machines: data, pretraining, fine-tuning regimes,
/// coding and evaluation.
#[derive(Debug, Parser)]
#[command(name = "machina", version = manifest::BUILD_VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(commands::GenData),
    /// Rate-distortion pretraining of a codec at one quality.
    PretrainCodec(commands::PretrainCodec),
    /// Pretrain the detector on clean images.
    PretrainTask(commands::PretrainTask),
    /// Run one fine-tuning regime from a config file.
    Finetune(commands::Finetune),
    /// Compress a PPM image to a bitstream.
    Encode(commands::Encode),
    /// Decode a bitstream to a PPM image.
    Decode(commands::Decode),
    /// Measure rate, fidelity and detection accuracy.
    Eval(commands::Eval),
    /// Build per-regime rate-accuracy curves from eval points.
    Curves(commands::Curves),
}

fn configure_threads() -> Result<(), Usage> {
    let Ok(v) = std::env::var("MACHINA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("MACHINA_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Usage(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenData(c) => c.run(&argv),
        Command::PretrainCodec(c) => c.run(&argv),
        Command::PretrainTask(c) => c.run(&argv),
        Command::Finetune(c) => c.run(&argv),
        Command::Encode(c) => c.run(&argv),
        Command::Decode(c) => c.run(&argv),
        Command::Eval(c) => c.run(&argv),
        Command::Curves(c) => c.run(&argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 1 } else { 2 })
        }
    }
}
