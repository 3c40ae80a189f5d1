use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graspbench_cli::commands::{
    cmd_annotate, cmd_eval, cmd_generate, cmd_ingest, cmd_report, cmd_score_instructions, cmd_synth, AnnotateArgs,
    EvalArgs, GenerateArgs, IngestArgs, ReportArgs, ScoreArgs, SynthArgs,
};

/// Grasp-reasoning simulator and evaluation harness.
#[derive(Parser)]
#[command(name = "graspbench", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate every scene file in a directory.
    Ingest(IngestArgs),
    /// Sample a stratified scenario manifest.
    Generate(GenerateArgs),
    /// Run episodes and write results JSONL plus a run manifest.
    Eval(EvalArgs),
    /// Aggregate results and check published metric rows.
    Report(ReportArgs),
    /// Draw numbered marks on a scene image.
    Annotate(AnnotateArgs),
    /// Write a procedurally generated toy dataset.
    Synth(SynthArgs),
    /// Score how well each scenario's instructions identify the target.
    ScoreInstructions(ScoreArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, &mut out),
        Command::Generate(a) => cmd_generate(a, &mut out),
        Command::Eval(a) => cmd_eval(a, &mut out),
        Command::Report(a) => cmd_report(a, &mut out),
        Command::Annotate(a) => cmd_annotate(a, &mut out),
        Command::Synth(a) => cmd_synth(a, &mut out),
        Command::ScoreInstructions(a) => cmd_score_instructions(a, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
