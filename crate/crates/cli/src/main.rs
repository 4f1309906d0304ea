//! `signforge` — command-line front end for the toolkit.
//!
//! Every failure exits nonzero after printing a single line to stderr of the
//! form `error: <category>: <message>`, so scripts can branch on the
//! category without parsing prose.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use signforge_core::checkpoint::Checkpoint;
use signforge_core::config::{RunConfig, Task};
use signforge_core::data::{read_pose3, synth_toy_corpus, ToyCorpusConfig};
use signforge_core::metrics::dtw_align;
use signforge_core::pipeline::{
    evaluate_split, produce_split, train, translate_split, PipelineError, ProduceRun,
    ProduceSetup,
};
use signforge_core::progressive::ProduceMode;

#[derive(Parser)]
#[command(
    name = "signforge",
    version,
    about = "Sequence-to-sequence toolkit for continuous sign pose production"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy corpus (train/dev/test splits plus rig).
    SynthData(SynthDataArgs),
    /// Train the model a run config's task names; writes best.ckpt and
    /// train.log into the run directory.
    Train(TrainArgs),
    /// Greedily translate a split with a symbolic-output checkpoint
    /// (text→gloss or pose→text).
    Translate(TranslateArgs),
    /// Produce pose sequences for a split, directly (a g2p or t2p
    /// checkpoint) or through the stacked gloss pipe (t2g + g2p).
    Produce(ProduceArgs),
    /// Back-translation evaluation of a production directory against a
    /// reference split.
    Evaluate(EvaluateArgs),
    /// Align two pose files with dynamic time warping and print the costs.
    Dtw(DtwArgs),
    /// Print a checkpoint's task, header, vocabularies, and tensor shapes.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Directory the corpus is written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    /// Number of training samples (dev/test sizes follow).
    #[arg(long, default_value_t = 500)]
    num_samples: usize,
    #[arg(long, default_value_t = 2)]
    min_tokens: usize,
    #[arg(long, default_value_t = 5)]
    max_tokens: usize,
    #[arg(long, default_value_t = 5)]
    min_frames_per_token: usize,
    #[arg(long, default_value_t = 9)]
    max_frames_per_token: usize,
    #[arg(long, default_value_t = 4)]
    joints: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Make the gloss equal to the text instead of its reverse.
    #[arg(long, default_value_t = false)]
    identity_gloss: bool,
    /// Crossfade width (frames) between adjacent motion primitives.
    #[arg(long, default_value_t = 2)]
    crossfade: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (flat key=value file).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for best.ckpt and train.log.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's task.
    #[arg(long)]
    task: Option<Task>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Feed predicted counters back in; stop at the threshold.
    Free,
    /// Pace production with the reference counter schedule.
    CounterDriven,
}

impl From<ModeArg> for ProduceMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Free => ProduceMode::FreeRunning,
            ModeArg::CounterDriven => ProduceMode::CounterDriven,
        }
    }
}

#[derive(Args)]
struct ProduceArgs {
    /// Direct production checkpoint (g2p reads the gloss side, t2p the text side).
    #[arg(long, conflicts_with_all = ["t2g", "g2p"])]
    checkpoint: Option<PathBuf>,
    /// Text→gloss checkpoint (t2g2p configuration, with --g2p).
    #[arg(long, requires = "g2p")]
    t2g: Option<PathBuf>,
    /// Gloss→pose checkpoint (t2g2p configuration, with --t2g).
    #[arg(long, requires = "t2g")]
    g2p: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Free)]
    mode: ModeArg,
    /// Directory the .pose3 productions are written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.98)]
    stop_threshold: f32,
    #[arg(long, default_value_t = 512)]
    max_frames: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of produced .pose3 files.
    #[arg(long)]
    productions: PathBuf,
    /// Reference corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    /// Pose→text back-translation checkpoint.
    #[arg(long)]
    p2t: PathBuf,
}

#[derive(Args)]
struct DtwArgs {
    /// First pose file.
    a: PathBuf,
    /// Second pose file.
    b: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message: String = err
                .to_string()
                .chars()
                .map(|c| if c == '\n' { ' ' } else { c })
                .collect();
            eprintln!("error: {}: {}", category(&err), message);
            ExitCode::FAILURE
        }
    }
}

fn category(err: &PipelineError) -> &'static str {
    match err {
        PipelineError::Config(_) => "config",
        PipelineError::Data(_) => "data",
        PipelineError::Checkpoint(_) => "checkpoint",
        PipelineError::Tensor(_) => "model",
        PipelineError::Metrics(_) => "metrics",
        PipelineError::Vocabulary(_) => "vocab",
        PipelineError::Io { .. } => "io",
        PipelineError::Invalid(_) => "run",
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::SynthData(args) => synth_data(args),
        Command::Train(args) => train_command(args),
        Command::Translate(args) => translate_command(args),
        Command::Produce(args) => produce_command(args),
        Command::Evaluate(args) => evaluate_command(args),
        Command::Dtw(args) => dtw_command(args),
        Command::InspectCheckpoint(args) => inspect_command(args),
    }
}

fn synth_data(args: SynthDataArgs) -> Result<(), PipelineError> {
    let cfg = ToyCorpusConfig {
        vocab_size: args.vocab_size,
        num_samples: args.num_samples,
        min_tokens: args.min_tokens,
        max_tokens: args.max_tokens,
        min_frames_per_token: args.min_frames_per_token,
        max_frames_per_token: args.max_frames_per_token,
        joints: args.joints,
        seed: args.seed,
        identity_gloss: args.identity_gloss,
        crossfade: args.crossfade,
    };
    synth_toy_corpus(&cfg, &args.out)?;
    let (train_n, dev_n, test_n) = cfg.split_sizes();
    println!(
        "wrote corpus to {} (train={train_n} dev={dev_n} test={test_n} joints={})",
        args.out.display(),
        cfg.joints
    );
    Ok(())
}

fn train_command(args: TrainArgs) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(task) = args.task {
        cfg.task = task;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let outcome = train(&cfg, &args.out, |line| println!("{line}"))?;
    println!(
        "best checkpoint: {} (epoch {}, {}={:.6})",
        outcome.checkpoint_path.display(),
        outcome.best_epoch,
        outcome.metric_name,
        outcome.best_metric
    );
    Ok(())
}

fn translate_command(args: TranslateArgs) -> Result<(), PipelineError> {
    for (id, tokens) in translate_split(&args.checkpoint, &args.data, &args.split)? {
        println!("{id}\t{}", tokens.join(" "));
    }
    Ok(())
}

fn produce_command(args: ProduceArgs) -> Result<(), PipelineError> {
    let setup = match (args.checkpoint, args.t2g, args.g2p) {
        (Some(checkpoint), None, None) => ProduceSetup::Direct { checkpoint },
        (None, Some(t2g), Some(g2p)) => ProduceSetup::T2g2p { t2g, g2p },
        _ => {
            return Err(PipelineError::Invalid(
                "production needs either --checkpoint (g2p or t2p) or --t2g with --g2p (t2g2p)"
                    .into(),
            ))
        }
    };
    let run = ProduceRun {
        mode: args.mode.into(),
        stop_threshold: args.stop_threshold,
        max_frames: args.max_frames,
    };
    let productions = produce_split(&setup, &args.data, &args.split, &run, &args.out)?;
    println!(
        "produced {} pose sequences into {}",
        productions.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate_command(args: EvaluateArgs) -> Result<(), PipelineError> {
    let report = evaluate_split(&args.productions, &args.data, &args.split, &args.p2t)?;
    println!("{report}");
    Ok(())
}

fn dtw_command(args: DtwArgs) -> Result<(), PipelineError> {
    let a = read_pose3(&args.a)?;
    let b = read_pose3(&args.b)?;
    let alignment = dtw_align(&a, &b)?;
    println!(
        "total_cost={:.6} normalized_cost={:.6} path_len={}",
        alignment.total_cost,
        alignment.normalized_cost,
        alignment.path.len()
    );
    Ok(())
}

fn inspect_command(args: InspectArgs) -> Result<(), PipelineError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    // Surface an unknown task as an error rather than printing it as fact.
    Task::from_str(&ckpt.task)
        .map_err(|_| PipelineError::Invalid(format!("checkpoint holds unknown task \"{}\"", ckpt.task)))?;
    println!("task={}", ckpt.task);
    for (key, value) in &ckpt.header {
        println!("header {key}={value}");
    }
    for (name, tokens) in &ckpt.vocabs {
        println!("vocab {name} tokens={}", tokens.len());
    }
    for tensor in &ckpt.tensors {
        let dims: Vec<String> = tensor.dims.iter().map(usize::to_string).collect();
        println!("tensor {} [{}]", tensor.name, dims.join(","));
    }
    Ok(())
}
