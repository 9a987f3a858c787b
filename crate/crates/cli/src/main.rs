use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use ame_core::experiment::{run, Command, RunConfig};
use clap::{Args, Parser, Subcommand};

static CONFIG_HELP: LazyLock<String> = LazyLock::new(|| {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("default config serializes");
    format!(
        "The config is one strict JSON document; unknown fields are rejected.\n\
         Every field is optional. Fields and their defaults:\n\n{defaults}\n\n\
         Notes:\n  \
         seed replaces data.synthetic.seed, model.seed and oracle.seed.\n  \
         model.n_features and model.task are taken from the data.\n  \
         the default learning rate 0.0001 is slow on small data; 0.003 trains \
         the default synthetic task in under 100 epochs.\n  \
         data may instead be {{\"csv\": {{\"train\", \"val\", \"test\", \"task\", \"standardize\"}}}}.\n  \
         estimators: {{\"name\": \"ame\"}}, {{\"name\": \"saliency\"}}, {{\"name\": \"occlusion\", \"baseline\": 0.0}}.\n  \
         protocols: masking, mge_quality, recall, timing."
    )
});

#[derive(Parser)]
#[command(name = "ame-lab", version, about = "Train, explain and benchmark attentive mixtures of experts")]
#[command(after_help = CONFIG_HELP.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write model.json and training_log.csv
    #[command(after_help = CONFIG_HELP.as_str())]
    Train(Common),
    /// Write importance.csv for the configured estimators
    #[command(after_help = CONFIG_HELP.as_str())]
    Explain(Common),
    /// Run the benchmark protocols and write benchmark.csv
    #[command(after_help = CONFIG_HELP.as_str())]
    Benchmark(Common),
    /// Train one model per (alpha, seed) and write sweep.csv
    #[command(after_help = CONFIG_HELP.as_str())]
    Sweep(Common),
    /// Compute probe-based Granger targets and write oracle.csv
    #[command(after_help = CONFIG_HELP.as_str())]
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Parallel sweep workers
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Explain(a) => (Command::Explain, a),
        Cmd::Benchmark(a) => (Command::Benchmark, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::Oracle(a) => (Command::Oracle, a),
    };
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        cfg.command = command;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(out) = args.out {
            cfg.out_dir = out;
        }
        run(&cfg, args.jobs)
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for path in &outcome.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
