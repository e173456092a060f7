use clap::{Parser, Subcommand};
use lst::harness::{self, CliArgs};
use std::path::PathBuf;

/// Semi-supervised few-shot meta-learning experiments on synthetic
/// cluster benchmarks.
#[derive(Parser)]
#[command(name = "lst", version, about, arg_required_else_help = true)]
struct Cli {
    /// Flat key=value config file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory shared by all subcommands.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the number of test episodes.
    #[arg(long, global = true, value_name = "N")]
    episodes: Option<usize>,

    /// Config override as key=value; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and checkpoint the frozen feature extractor.
    Pretrain,
    /// Meta-train scale-shift, classifier init, and the weighting network.
    MetaTrain,
    /// Evaluate the configured ablation setting on the test split.
    MetaTest,
    /// Evaluate every ablation setting on paired test episodes.
    Ablate,
    /// Sweep the number of re-training steps m.
    SweepRetrain,
    /// Sweep the number of distractor classes in the unlabeled pool.
    SweepDistractors,
    /// Summarize existing evaluation artifacts.
    Report,
}

impl From<&Command> for harness::Subcommand {
    fn from(c: &Command) -> Self {
        match c {
            Command::Pretrain => harness::Subcommand::Pretrain,
            Command::MetaTrain => harness::Subcommand::MetaTrain,
            Command::MetaTest => harness::Subcommand::MetaTest,
            Command::Ablate => harness::Subcommand::Ablate,
            Command::SweepRetrain => harness::Subcommand::SweepRetrain,
            Command::SweepDistractors => harness::Subcommand::SweepDistractors,
            Command::Report => harness::Subcommand::Report,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let args = CliArgs {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        episodes: cli.episodes,
        overrides: cli.overrides,
    };
    if let Err(e) = harness::run((&cli.command).into(), &args) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
