//! `zipper`: run programs, attacks, benchmarks and the brute-force analysis
//! from the command line.
//!
//! Exit status: 0 on success, 1 when the experiment itself reports a
//! failure (a security fault in `run`, an undetected attack on Zipper in
//! `attack`), 2 for usage and configuration errors.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use output::Format;
use zipper_core::ProtectionMode;

#[derive(Parser, Debug)]
#[command(name = "zipper", version, about = "Chained-MAC return-address protection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble (if needed) and execute a program.
    Run(RunArgs),
    /// Run attack scenarios against the victim under several modes.
    Attack(AttackArgs),
    /// Cycle overhead of the built-in benchmark suite.
    Bench(BenchArgs),
    /// Brute-force cost and collision-probability analysis.
    Analyze(AnalyzeArgs),
    /// Assemble to a binary image, or print a listing.
    Asm(AsmArgs),
}

#[derive(Args, Debug, Clone, Copy)]
pub struct Widths {
    /// MAC bits.
    #[arg(long = "Nm", alias = "nm", default_value_t = 24)]
    pub nm: u32,
    /// Address bits.
    #[arg(long = "Na", alias = "na", default_value_t = 40)]
    pub na: u32,
    /// Key bits.
    #[arg(long = "Ns", alias = "ns", default_value_t = 64)]
    pub ns: u32,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Report path; relative paths go under $ZIPPER_OUT_DIR when it is set.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Assembly source or binary image.
    pub image: PathBuf,
    #[arg(long, default_value = "zipper")]
    pub mode: ProtectionMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub widths: Widths,
    /// Disable the MAC result cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Include the instruction trace.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value_t = 100_000_000)]
    pub max_cycles: u64,
    /// Memory size in bytes.
    #[arg(long, default_value_t = zipper_core::vm::DEFAULT_MEM_SIZE)]
    pub mem_size: usize,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Scenario file; the built-in library when omitted.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Victim program; the built-in victim when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', default_value = "baseline,shadow-parallel,shadow-compact,zipper")]
    pub modes: Vec<ProtectionMode>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub widths: Widths,
    #[arg(long)]
    pub no_cache: bool,
    /// Include every per-run report in JSON output.
    #[arg(long)]
    pub runs: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub widths: Widths,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub widths: Widths,
    /// Gadgets in the attack.
    #[arg(long = "N", alias = "n", default_value_t = 1)]
    pub n: u64,
    /// Add Monte Carlo estimates (Nm <= 16).
    #[arg(long)]
    pub mc: bool,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AsmArgs {
    pub source: PathBuf,
    /// Print a disassembly listing instead of writing an image.
    #[arg(long)]
    pub disasm: bool,
    /// Image path (default: source with a .zimg extension).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = std::env::args().nth(1).and_then(|n| cmd.find_subcommand_mut(&n).map(|c| c.render_usage()));
                eprintln!("\n{}", sub.unwrap_or_else(|| cmd.render_usage()));
            }
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Attack(a) => commands::attack(a),
        Command::Bench(a) => commands::bench(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Asm(a) => commands::asm(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
