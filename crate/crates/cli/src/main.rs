mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Bad input from the user: flags, config files or environment.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "gfd", version, about = "Chest X-ray abnormality detection with gaze fixation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with gaze and ellipse annotations.
    Synth(commands::SynthFlags),
    /// Detect fixations in a raw gaze CSV.
    Fixations(commands::FixationFlags),
    /// Render a fixation CSV to a PGM heatmap.
    Heatmap(commands::HeatmapFlags),
    /// Train one detector on a dataset.
    Train(commands::TrainFlags),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(commands::EvalFlags),
    /// Train and evaluate the image-only and fused detectors side by side.
    Compare(commands::CompareFlags),
    /// Finite-difference check of every op and of the full detector loss.
    Gradcheck(commands::GradcheckFlags),
    /// Render saved reports, or the published reference table, as markdown.
    Report(commands::ReportFlags),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<gfd_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(f) => commands::synth(f),
        Command::Fixations(f) => commands::fixations(f),
        Command::Heatmap(f) => commands::heatmap(f),
        Command::Train(f) => commands::train(f),
        Command::Eval(f) => commands::eval(f),
        Command::Compare(f) => commands::compare(f),
        Command::Gradcheck(f) => commands::gradcheck(f),
        Command::Report(f) => commands::report(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
