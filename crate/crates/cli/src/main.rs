use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lewisgame::config::KeyValues;
use lewisgame::run::{self, SplitName};

#[derive(Parser, Debug)]
#[command(name = "lewisgame", version, about = "Referential signaling games on cell features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic class-conditional feature table.
    GenData(GenDataArgs),
    /// Train sender and receiver from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint and export the emergent vocabulary.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output CSV; the spec echo goes to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
    /// Key-value file with `synth.*` keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Distance between class mean blocks.
    #[arg(long)]
    delta: Option<f64>,
    /// Per-feature noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma-separated per-class counts.
    #[arg(long)]
    counts: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file (or a previous run's manifest).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    episode_seed: Option<u64>,
    #[arg(long)]
    gumbel_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut kv = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| lewisgame::Error::Io { path: path.clone(), source: e })?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    if let Some(seed) = args.seed {
        kv.insert("synth.seed", seed);
    }
    if let Some(delta) = args.delta {
        kv.insert("synth.delta", delta);
    }
    if let Some(sigma) = args.sigma {
        kv.insert("synth.sigma", sigma);
    }
    if let Some(counts) = &args.counts {
        kv.insert("synth.counts", counts);
    }
    let spec = run::synthetic_spec_from_kv(&kv)?;
    let dataset = run::gen_data(&spec, &args.out)?;
    eprintln!("wrote {} rows to {}", dataset.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut config = run::read_config(&args.config)?;
    let tc = &mut config.train;
    tc.init_seed = args.init_seed.unwrap_or(tc.init_seed);
    tc.episode_seed = args.episode_seed.unwrap_or(tc.episode_seed);
    tc.gumbel_seed = args.gumbel_seed.unwrap_or(tc.gumbel_seed);
    config.data.split_seed = args.split_seed.unwrap_or(config.data.split_seed);
    let summary = run::train_run(&config, &args.data, &args.out, args.resume.as_deref())?;
    eprintln!(
        "{} epochs, best val accuracy {:.4} at epoch {}{}",
        summary.epochs,
        summary.best_val_accuracy,
        summary.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        if summary.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let report = run::eval_run(
        &args.checkpoint,
        &args.data,
        args.split,
        args.episodes,
        args.seed,
        &args.out,
    )
    .with_context(|| format!("evaluating {}", args.checkpoint.display()))?;
    print!("{}", report.to_text());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<lewisgame::Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
