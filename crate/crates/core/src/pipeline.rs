//! Run orchestration: training loops for all four task roles, sequence
//! production in the direct and stacked configurations, back-translation
//! evaluation, and the checkpoint glue binding models to files.
//!
//! Training is deterministic end to end: for a fixed `(config, corpus)` the
//! log emitted by [`train`] is byte-identical across runs. Nothing
//! time-dependent or path-dependent is ever logged, batch order is fixed by
//! the stable length-sorted grouping, and all random draws come from a
//! single seeded generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::ModelConfig;
use crate::augment::{counter_noise, gaussian_noise, JointStats, NoiseSource, StatsAccumulator};
use crate::checkpoint::{
    records_from_parameters, restore_parameters, Checkpoint, CheckpointError, TensorRecord,
};
use crate::config::{ConfigError, RunConfig, Task};
use crate::data::{batchify, load_split, read_pose3, write_pose3, DataError, ParallelSample};
use crate::metrics::{bleu, dtw_align, rouge_l_corpus, EvalReport, MetricsError};
use crate::pose2text::{
    build_pose2text_batch, Pose2TextBatch, Pose2TextConfig, Pose2TextTransformer,
};
use crate::progressive::{
    aligned_mse, build_pose_batch, PoseBatch, PoseSequence, ProduceMode, ProduceOptions,
    ProgressiveConfig, ProgressiveTransformer,
};
use crate::symbolic::{
    build_symbolic_batch, SymbolicBatch, SymbolicConfig, SymbolicSequence, SymbolicTransformer,
    Vocabulary, VocabularyError,
};
use crate::tensor::{clip_grad_norm, Adam, AdamParams, Tensor, TensorError};

/// File name of the best-dev checkpoint inside a run directory.
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
/// File name of the training log inside a run directory.
pub const TRAIN_LOG_FILE: &str = "train.log";

/// Errors surfaced by the orchestration layer. Every variant renders as a
/// single line.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("vocabulary error: {0}")]
    Vocabulary(#[from] VocabularyError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: String) -> PipelineError {
    PipelineError::Invalid(msg)
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

fn header_value<'a>(ckpt: &'a Checkpoint, key: &str) -> Result<&'a str, PipelineError> {
    ckpt.header_value(key)
        .ok_or_else(|| invalid(format!("checkpoint header is missing key \"{key}\"")))
}

fn header_parse<T: FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T, PipelineError> {
    let raw = header_value(ckpt, key)?;
    raw.parse().map_err(|_| {
        invalid(format!(
            "checkpoint header key \"{key}\" holds unparsable value \"{raw}\""
        ))
    })
}

fn checkpoint_vocab(ckpt: &Checkpoint, name: &str) -> Result<Vocabulary, PipelineError> {
    let tokens = ckpt
        .vocab(name)
        .ok_or_else(|| invalid(format!("checkpoint is missing vocabulary \"{name}\"")))?;
    Ok(Vocabulary::from_tokens(tokens.to_vec())?)
}

fn model_config_from_header(ckpt: &Checkpoint) -> Result<ModelConfig, PipelineError> {
    Ok(ModelConfig {
        num_layers: header_parse(ckpt, "model.layers")?,
        num_heads: header_parse(ckpt, "model.heads")?,
        d_model: header_parse(ckpt, "model.d_model")?,
        d_ff: header_parse(ckpt, "model.d_ff")?,
        max_seq_len: header_parse(ckpt, "model.max_seq_len")?,
    })
}

fn model_config_header(model: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("model.layers".into(), model.num_layers.to_string()),
        ("model.heads".into(), model.num_heads.to_string()),
        ("model.d_model".into(), model.d_model.to_string()),
        ("model.d_ff".into(), model.d_ff.to_string()),
        ("model.max_seq_len".into(), model.max_seq_len.to_string()),
    ]
}

/// Assembles a checkpoint from a live training state: model configuration
/// and task-specific extras in the header, vocabulary snapshots, parameter
/// tensors, optimizer moments (`optim.m1.*` / `optim.m2.*`), and the
/// generator position so the exact randomness state is on record.
#[allow(clippy::too_many_arguments)]
fn checkpoint_from_training(
    task: Task,
    model: &ModelConfig,
    extra_header: &[(String, String)],
    vocabs: Vec<(String, Vec<String>)>,
    optimizer: &Adam<f32>,
    epoch: usize,
    seed: u64,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let mut header = model_config_header(model);
    header.extend(extra_header.iter().cloned());
    header.push(("train.epoch".into(), epoch.to_string()));
    header.push((
        "optim.step_count".into(),
        optimizer.state().step_count.to_string(),
    ));
    header.push(("rng.seed".into(), seed.to_string()));
    header.push(("rng.word_pos".into(), rng.get_word_pos().to_string()));

    let params = optimizer.params();
    let mut tensors = records_from_parameters(params);
    let state = optimizer.state();
    for (i, (name, p)) in params.iter().enumerate() {
        tensors.push(TensorRecord {
            name: format!("optim.m1.{name}"),
            dims: p.shape().to_vec(),
            values: state.first_moment[i].clone(),
        });
        tensors.push(TensorRecord {
            name: format!("optim.m2.{name}"),
            dims: p.shape().to_vec(),
            values: state.second_moment[i].clone(),
        });
    }

    Checkpoint {
        task: task.to_string(),
        header,
        vocabs,
        tensors,
    }
}

/// A model reconstructed from a checkpoint, paired with the vocabularies it
/// was trained with.
#[derive(Debug)]
pub enum TrainedModel {
    Symbolic {
        model: SymbolicTransformer<f32>,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    },
    Progressive {
        model: ProgressiveTransformer<f32>,
        src_vocab: Vocabulary,
        /// Whether the decoder was trained with joint content erased
        /// (counter-only decoding); production must match that convention.
        just_counter: bool,
    },
    Pose2Text {
        model: Pose2TextTransformer<f32>,
        tgt_vocab: Vocabulary,
    },
}

/// Rebuilds the model a checkpoint describes and restores its parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainedModel, PipelineError> {
    let task = Task::from_str(&ckpt.task)
        .map_err(|_| invalid(format!("checkpoint holds unknown task \"{}\"", ckpt.task)))?;
    let model_cfg = model_config_from_header(ckpt)?;
    // Parameter values come from the checkpoint; the init draws below are
    // placeholders overwritten by `restore_parameters`.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match task {
        Task::T2g => {
            let src_vocab = checkpoint_vocab(ckpt, "src")?;
            let tgt_vocab = checkpoint_vocab(ckpt, "tgt")?;
            let model = SymbolicTransformer::new(
                SymbolicConfig {
                    model: model_cfg,
                    src_vocab: src_vocab.len(),
                    tgt_vocab: tgt_vocab.len(),
                },
                &mut rng,
            )?;
            restore_parameters(ckpt, &model.parameters())?;
            Ok(TrainedModel::Symbolic {
                model,
                src_vocab,
                tgt_vocab,
            })
        }
        Task::G2p | Task::T2p => {
            let src_vocab = checkpoint_vocab(ckpt, "src")?;
            let model = ProgressiveTransformer::new(
                ProgressiveConfig {
                    model: model_cfg,
                    src_vocab: src_vocab.len(),
                    joints: header_parse(ckpt, "model.joints")?,
                    d_counter: header_parse(ckpt, "model.d_counter")?,
                    horizon: header_parse(ckpt, "model.horizon")?,
                },
                &mut rng,
            )?;
            restore_parameters(ckpt, &model.parameters())?;
            Ok(TrainedModel::Progressive {
                model,
                src_vocab,
                just_counter: header_parse(ckpt, "model.just_counter")?,
            })
        }
        Task::P2t => {
            let tgt_vocab = checkpoint_vocab(ckpt, "tgt")?;
            let model = Pose2TextTransformer::new(
                Pose2TextConfig {
                    model: model_cfg,
                    joints: header_parse(ckpt, "model.joints")?,
                    d_counter: header_parse(ckpt, "model.d_counter")?,
                    tgt_vocab: tgt_vocab.len(),
                },
                &mut rng,
            )?;
            restore_parameters(ckpt, &model.parameters())?;
            Ok(TrainedModel::Pose2Text { model, tgt_vocab })
        }
    }
}

/// Loads a checkpoint file and rebuilds the model it describes.
pub fn load_trained_model(path: &Path) -> Result<TrainedModel, PipelineError> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

fn load_for_task(path: &Path, want: Task, role: &str) -> Result<TrainedModel, PipelineError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.task != want.to_string() {
        return Err(invalid(format!(
            "checkpoint at {} holds a \"{}\" model, but {role} needs \"{want}\"",
            path.display(),
            ckpt.task
        )));
    }
    model_from_checkpoint(&ckpt)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Summary of a completed training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Which dev metric drove checkpoint selection (`dev_accuracy`,
    /// `dev_bleu4`, or `dev_mse`).
    pub metric_name: &'static str,
    pub epochs_run: usize,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

struct LoopResult {
    best_epoch: usize,
    best_metric: f64,
    metric_name: &'static str,
    epochs_run: usize,
}

/// Collects log lines, forwarding each to the caller as it is produced.
struct TrainLogger<'a> {
    log: String,
    on_line: &'a mut dyn FnMut(&str),
}

impl TrainLogger<'_> {
    fn line(&mut self, text: String) {
        (self.on_line)(&text);
        self.log.push_str(&text);
        self.log.push('\n');
    }
}

/// Tracks the best dev metric seen so far; only strict improvement counts,
/// so ties keep the earliest epoch and selection is reproducible.
struct BestTracker {
    higher_is_better: bool,
    best: Option<(usize, f64)>,
    evals_since_best: usize,
}

impl BestTracker {
    fn new(higher_is_better: bool) -> Self {
        BestTracker {
            higher_is_better,
            best: None,
            evals_since_best: 0,
        }
    }

    fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, best)) => {
                if self.higher_is_better {
                    metric > best
                } else {
                    metric < best
                }
            }
        };
        if improved {
            self.best = Some((epoch, metric));
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        improved
    }

    fn should_stop(&self, patience: usize) -> bool {
        self.evals_since_best >= patience
    }

    fn best(&self) -> (usize, f64) {
        self.best.expect("observe() runs before best()")
    }
}

/// Trains the model the config's task names and writes `best.ckpt` and
/// `train.log` into `out_dir`. Each log line is also handed to `on_line` as
/// it is produced. Checkpoint selection uses the dev split: token accuracy
/// for the symbolic-output tasks, back-translation BLEU-4 for continuous
/// tasks when `eval.backtranslation_checkpoint` is set, and free-running
/// dev pose error otherwise.
pub fn train(
    cfg: &RunConfig,
    out_dir: &Path,
    mut on_line: impl FnMut(&str),
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let train_samples = load_split(&cfg.data_dir, "train")?;
    let dev_samples = load_split(&cfg.data_dir, "dev")?;
    for (split, samples) in [("train", &train_samples), ("dev", &dev_samples)] {
        if samples.is_empty() {
            return Err(invalid(format!(
                "corpus split \"{split}\" in {} is empty",
                cfg.data_dir.display()
            )));
        }
    }

    let checkpoint_path = out_dir.join(BEST_CHECKPOINT_FILE);
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut logger = TrainLogger {
        log: String::new(),
        on_line: &mut on_line,
    };
    logger.line(format!("task={} seed={}", cfg.task, cfg.seed));

    let result = match cfg.task {
        Task::T2g => train_symbolic(cfg, &train_samples, &dev_samples, &checkpoint_path, &mut logger)?,
        Task::G2p | Task::T2p => {
            train_progressive(cfg, &train_samples, &dev_samples, &checkpoint_path, &mut logger)?
        }
        Task::P2t => {
            train_pose2text(cfg, &train_samples, &dev_samples, &checkpoint_path, &mut logger)?
        }
    };
    logger.line(format!(
        "done epochs={} best_epoch={} best_{}={:.6}",
        result.epochs_run, result.best_epoch, result.metric_name, result.best_metric
    ));

    fs::write(&log_path, &logger.log).map_err(io_at(&log_path))?;
    Ok(TrainOutcome {
        best_epoch: result.best_epoch,
        best_metric: result.best_metric,
        metric_name: result.metric_name,
        epochs_run: result.epochs_run,
        checkpoint_path,
        log_path,
    })
}

fn gloss_tokens<'a>(
    sample: &'a ParallelSample,
    split: &str,
    task: Task,
) -> Result<&'a [String], PipelineError> {
    sample.gloss.as_deref().ok_or_else(|| {
        invalid(format!(
            "task {task} needs a gloss side, but sample \"{}\" in split \"{split}\" has none",
            sample.id
        ))
    })
}

fn check_symbolic_len(
    len: usize,
    max_seq_len: usize,
    what: &str,
    split: &str,
    id: &str,
) -> Result<(), PipelineError> {
    if len + 1 > max_seq_len {
        return Err(invalid(format!(
            "{what} of sample \"{id}\" in split \"{split}\" has {len} tokens; \
             model.max_seq_len {max_seq_len} allows at most {}",
            max_seq_len - 1
        )));
    }
    Ok(())
}

fn check_frame_len(
    frames: usize,
    max_seq_len: usize,
    split: &str,
    id: &str,
) -> Result<(), PipelineError> {
    if frames > max_seq_len {
        return Err(invalid(format!(
            "pose of sample \"{id}\" in split \"{split}\" has {frames} frames; \
             model.max_seq_len is {max_seq_len}"
        )));
    }
    Ok(())
}

fn scalar_value(loss: &Tensor<f32>) -> f64 {
    loss.values()[0] as f64
}

fn step_on(
    loss: &Tensor<f32>,
    batch_size: usize,
    optimizer: &mut Adam<f32>,
    grad_clip: f64,
) -> Result<(), TensorError> {
    let scaled = loss.scale(1.0 / batch_size as f32);
    scaled.backward()?;
    if grad_clip > 0.0 {
        clip_grad_norm(optimizer.params(), grad_clip)?;
    }
    optimizer.step()
}

fn symbolic_batches(
    pairs: &[(SymbolicSequence, SymbolicSequence)],
    batch_size: usize,
) -> Result<Vec<SymbolicBatch>, PipelineError> {
    let lengths: Vec<usize> = pairs.iter().map(|(src, _)| src.len()).collect();
    batchify(&lengths, batch_size)?
        .iter()
        .map(|group| {
            let refs: Vec<(&SymbolicSequence, &SymbolicSequence)> =
                group.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
            Ok(build_symbolic_batch(&refs)?)
        })
        .collect()
}

/// Token accuracy over a batched dataset, weighted so every target token
/// counts once regardless of batch boundaries.
fn batched_accuracy<E, F>(batches: &[(F, usize)], accuracy: E) -> Result<f64, TensorError>
where
    E: Fn(&F) -> Result<f64, TensorError>,
{
    let mut correct = 0.0f64;
    let mut total = 0usize;
    for (batch, tokens) in batches {
        correct += accuracy(batch)? * *tokens as f64;
        total += tokens;
    }
    Ok(correct / total as f64)
}

fn train_symbolic(
    cfg: &RunConfig,
    train_samples: &[ParallelSample],
    dev_samples: &[ParallelSample],
    checkpoint_path: &Path,
    logger: &mut TrainLogger<'_>,
) -> Result<LoopResult, PipelineError> {
    let src_vocab = Vocabulary::from_corpus(train_samples.iter().map(|s| s.text.as_slice()));
    let mut train_gloss = Vec::with_capacity(train_samples.len());
    for sample in train_samples {
        train_gloss.push(gloss_tokens(sample, "train", cfg.task)?);
    }
    let tgt_vocab = Vocabulary::from_corpus(train_gloss.iter().copied());

    let encode = |samples: &[ParallelSample],
                  split: &str|
     -> Result<Vec<(SymbolicSequence, SymbolicSequence)>, PipelineError> {
        let mut pairs = Vec::with_capacity(samples.len());
        for sample in samples {
            let gloss = gloss_tokens(sample, split, cfg.task)?;
            check_symbolic_len(sample.text.len(), cfg.model.max_seq_len, "text", split, &sample.id)?;
            check_symbolic_len(gloss.len(), cfg.model.max_seq_len, "gloss", split, &sample.id)?;
            pairs.push((src_vocab.encode(&sample.text), tgt_vocab.encode(gloss)));
        }
        Ok(pairs)
    };
    let train_pairs = encode(train_samples, "train")?;
    let dev_pairs = encode(dev_samples, "dev")?;

    let batches = symbolic_batches(&train_pairs, cfg.batch_size)?;
    let dev_batches: Vec<(SymbolicBatch, usize)> = symbolic_batches(&dev_pairs, cfg.batch_size)?
        .into_iter()
        .map(|b| {
            let tokens = b.tgt_lens.iter().sum();
            (b, tokens)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SymbolicTransformer::new(
        SymbolicConfig {
            model: cfg.model.clone(),
            src_vocab: src_vocab.len(),
            tgt_vocab: tgt_vocab.len(),
        },
        &mut rng,
    )?;
    let mut optimizer = Adam::new(
        model.parameters(),
        AdamParams::with_learning_rate(cfg.learning_rate),
    )?;

    let vocab_snapshots = || {
        vec![
            ("src".to_string(), src_vocab.tokens().to_vec()),
            ("tgt".to_string(), tgt_vocab.tokens().to_vec()),
        ]
    };

    let mut tracker = BestTracker::new(true);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut total = 0.0f64;
        for batch in &batches {
            optimizer.zero_grad();
            let loss = model.loss(batch)?;
            total += scalar_value(&loss);
            step_on(&loss, batch.size, &mut optimizer, cfg.grad_clip)?;
        }
        let train_loss = total / train_pairs.len() as f64;
        let mut line = format!("epoch={epoch} train_loss={train_loss:.6}");

        let do_eval = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        if do_eval {
            let acc = batched_accuracy(&dev_batches, |b| model.accuracy(b))?;
            line.push_str(&format!(" dev_accuracy={acc:.6}"));
            if tracker.observe(epoch, acc) {
                line.push_str(" best=1");
                checkpoint_from_training(
                    cfg.task,
                    &cfg.model,
                    &[],
                    vocab_snapshots(),
                    &optimizer,
                    epoch,
                    cfg.seed,
                    &rng,
                )
                .save(checkpoint_path)?;
            }
        }
        logger.line(line);
        if do_eval && tracker.should_stop(cfg.patience) {
            break;
        }
    }

    let (best_epoch, best_metric) = tracker.best();
    Ok(LoopResult {
        best_epoch,
        best_metric,
        metric_name: "dev_accuracy",
        epochs_run,
    })
}

fn train_pose2text(
    cfg: &RunConfig,
    train_samples: &[ParallelSample],
    dev_samples: &[ParallelSample],
    checkpoint_path: &Path,
    logger: &mut TrainLogger<'_>,
) -> Result<LoopResult, PipelineError> {
    let tgt_vocab = Vocabulary::from_corpus(train_samples.iter().map(|s| s.text.as_slice()));
    let joints = train_samples[0].pose.joints();

    let encode = |samples: &[ParallelSample],
                  split: &str|
     -> Result<Vec<SymbolicSequence>, PipelineError> {
        let mut targets = Vec::with_capacity(samples.len());
        for sample in samples {
            check_symbolic_len(sample.text.len(), cfg.model.max_seq_len, "text", split, &sample.id)?;
            check_frame_len(sample.pose.frames(), cfg.model.max_seq_len, split, &sample.id)?;
            if sample.pose.joints() != joints {
                return Err(invalid(format!(
                    "sample \"{}\" in split \"{split}\" has J={} but the corpus trains with J={joints}",
                    sample.id,
                    sample.pose.joints()
                )));
            }
            targets.push(tgt_vocab.encode(&sample.text));
        }
        Ok(targets)
    };
    let train_targets = encode(train_samples, "train")?;
    let dev_targets = encode(dev_samples, "dev")?;

    let build = |samples: &[ParallelSample],
                 targets: &[SymbolicSequence]|
     -> Result<Vec<Pose2TextBatch>, PipelineError> {
        let lengths: Vec<usize> = samples.iter().map(|s| s.pose.frames()).collect();
        batchify(&lengths, cfg.batch_size)?
            .iter()
            .map(|group| {
                let refs: Vec<(&PoseSequence, &SymbolicSequence)> = group
                    .iter()
                    .map(|&i| (&samples[i].pose, &targets[i]))
                    .collect();
                Ok(build_pose2text_batch(&refs)?)
            })
            .collect()
    };
    let batches = build(train_samples, &train_targets)?;
    let dev_batches: Vec<(Pose2TextBatch, usize)> = build(dev_samples, &dev_targets)?
        .into_iter()
        .map(|b| {
            let tokens = b.tgt_lens.iter().sum();
            (b, tokens)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Pose2TextTransformer::new(
        Pose2TextConfig {
            model: cfg.model.clone(),
            joints,
            d_counter: cfg.d_counter,
            tgt_vocab: tgt_vocab.len(),
        },
        &mut rng,
    )?;
    let mut optimizer = Adam::new(
        model.parameters(),
        AdamParams::with_learning_rate(cfg.learning_rate),
    )?;

    let extra_header = [
        ("model.joints".to_string(), joints.to_string()),
        ("model.d_counter".to_string(), cfg.d_counter.to_string()),
    ];
    let mut tracker = BestTracker::new(true);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut total = 0.0f64;
        for batch in &batches {
            optimizer.zero_grad();
            let loss = model.loss(batch)?;
            total += scalar_value(&loss);
            step_on(&loss, batch.size, &mut optimizer, cfg.grad_clip)?;
        }
        let train_loss = total / train_samples.len() as f64;
        let mut line = format!("epoch={epoch} train_loss={train_loss:.6}");

        let do_eval = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        if do_eval {
            let acc = batched_accuracy(&dev_batches, |b| model.accuracy(b))?;
            line.push_str(&format!(" dev_accuracy={acc:.6}"));
            if tracker.observe(epoch, acc) {
                line.push_str(" best=1");
                checkpoint_from_training(
                    cfg.task,
                    &cfg.model,
                    &extra_header,
                    vec![("tgt".to_string(), tgt_vocab.tokens().to_vec())],
                    &optimizer,
                    epoch,
                    cfg.seed,
                    &rng,
                )
                .save(checkpoint_path)?;
            }
        }
        logger.line(line);
        if do_eval && tracker.should_stop(cfg.patience) {
            break;
        }
    }

    let (best_epoch, best_metric) = tracker.best();
    Ok(LoopResult {
        best_epoch,
        best_metric,
        metric_name: "dev_accuracy",
        epochs_run,
    })
}

fn train_progressive(
    cfg: &RunConfig,
    train_samples: &[ParallelSample],
    dev_samples: &[ParallelSample],
    checkpoint_path: &Path,
    logger: &mut TrainLogger<'_>,
) -> Result<LoopResult, PipelineError> {
    // Source side: gloss for g2p, text for t2p. The t2p arm must stay
    // gloss-blind even when the corpus carries a gloss file.
    let source_tokens = |sample: &ParallelSample, split: &str| match cfg.task {
        Task::G2p => gloss_tokens(sample, split, cfg.task).map(<[String]>::to_vec),
        _ => Ok(sample.text.clone()),
    };
    let mut train_src_tokens = Vec::with_capacity(train_samples.len());
    for sample in train_samples {
        train_src_tokens.push(source_tokens(sample, "train")?);
    }
    let src_vocab = Vocabulary::from_corpus(train_src_tokens.iter().map(|t| t.as_slice()));
    let joints = train_samples[0].pose.joints();
    let channels = 3 * joints;

    let encode = |samples: &[ParallelSample],
                  split: &str|
     -> Result<Vec<SymbolicSequence>, PipelineError> {
        let mut sources = Vec::with_capacity(samples.len());
        for sample in samples {
            let tokens = source_tokens(sample, split)?;
            check_symbolic_len(tokens.len(), cfg.model.max_seq_len, "source", split, &sample.id)?;
            check_frame_len(sample.pose.frames(), cfg.model.max_seq_len, split, &sample.id)?;
            if sample.pose.joints() != joints {
                return Err(invalid(format!(
                    "sample \"{}\" in split \"{split}\" has J={} but the corpus trains with J={joints}",
                    sample.id,
                    sample.pose.joints()
                )));
            }
            sources.push(src_vocab.encode(&tokens));
        }
        Ok(sources)
    };
    let train_sources = encode(train_samples, "train")?;
    let dev_sources = encode(dev_samples, "dev")?;

    let horizon = cfg.augment.future_horizon;
    let just_counter = cfg.augment.just_counter;
    let lengths: Vec<usize> = train_samples.iter().map(|s| s.pose.frames()).collect();
    let clean_batches: Vec<PoseBatch> = batchify(&lengths, cfg.batch_size)?
        .iter()
        .map(|group| {
            let refs: Vec<(&SymbolicSequence, &PoseSequence)> = group
                .iter()
                .map(|&i| (&train_sources[i], &train_samples[i].pose))
                .collect();
            Ok(build_pose_batch(&refs, horizon)?)
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ProgressiveTransformer::new(
        ProgressiveConfig {
            model: cfg.model.clone(),
            src_vocab: src_vocab.len(),
            joints,
            d_counter: cfg.d_counter,
            horizon,
        },
        &mut rng,
    )?;
    let mut optimizer = Adam::new(
        model.parameters(),
        AdamParams::with_learning_rate(cfg.learning_rate),
    )?;

    // Optional back-translation model for dev BLEU-4 selection.
    let backtranslator = match &cfg.backtrans_checkpoint {
        Some(path) => match load_for_task(path, Task::P2t, "back-translation evaluation")? {
            TrainedModel::Pose2Text { model, tgt_vocab } => {
                if model.config().joints != joints {
                    return Err(invalid(format!(
                        "back-translation model expects J={} but the corpus has J={joints}",
                        model.config().joints
                    )));
                }
                Some((model, tgt_vocab))
            }
            _ => unreachable!("load_for_task checked the task"),
        },
        None => None,
    };
    let metric_name = if backtranslator.is_some() {
        "dev_bleu4"
    } else {
        "dev_mse"
    };
    let dev_texts: Vec<Vec<String>> = dev_samples.iter().map(|s| s.text.clone()).collect();

    let extra_header = [
        ("model.joints".to_string(), joints.to_string()),
        ("model.d_counter".to_string(), cfg.d_counter.to_string()),
        ("model.horizon".to_string(), horizon.to_string()),
        ("model.just_counter".to_string(), just_counter.to_string()),
    ];
    let mut tracker = BestTracker::new(backtranslator.is_some());
    let mut epochs_run = 0;
    let mut stats = JointStats::silent(channels, 0);
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        // Mean deviation the sampler draws with this epoch (last epoch's
        // statistics; silent before the first epoch completes).
        let noise_sigma = if cfg.augment.noise_factor > 0.0 {
            stats.std.iter().map(|&s| cfg.augment.noise_factor * s as f64).sum::<f64>()
                / channels as f64
        } else {
            0.0
        };

        let mut accumulator = StatsAccumulator::new(channels);
        let mut residual = vec![0.0f32; channels];
        let mut total = 0.0f64;
        for clean in &clean_batches {
            let mut batch = clean.clone();
            gaussian_noise(
                &mut batch.dec_pose,
                channels,
                &stats,
                cfg.augment.noise_factor,
                &mut rng,
            )?;
            counter_noise(&mut batch.dec_counter, cfg.augment.counter_noise, &mut rng)?;

            optimizer.zero_grad();
            let (loss, outputs) = model.loss_with_outputs(&batch, just_counter)?;
            total += scalar_value(&loss);

            // Next-epoch noise statistics come from this epoch's
            // teacher-forced passes: prediction residuals, or the raw target
            // positions when the positional source is selected. Only real
            // frames and the next-frame joint block count.
            let out_values = outputs.values();
            for b in 0..batch.size {
                for i in 0..batch.frame_lens[b] {
                    let base = (b * batch.frames + i) * batch.out_width;
                    match cfg.augment.noise_source {
                        NoiseSource::Residual => {
                            for c in 0..channels {
                                residual[c] = out_values[base + c] - batch.targets[base + c];
                            }
                            accumulator.add_frame(&residual)?;
                        }
                        NoiseSource::Positional => {
                            accumulator.add_frame(&batch.targets[base..base + channels])?;
                        }
                    }
                }
            }

            step_on(&loss, batch.size, &mut optimizer, cfg.grad_clip)?;
        }
        stats = accumulator.finish(epoch)?;
        let train_loss = total / train_samples.len() as f64;
        let mut line =
            format!("epoch={epoch} train_loss={train_loss:.6} noise_sigma={noise_sigma:.6}");

        let do_eval = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        if do_eval {
            let metric = match &backtranslator {
                Some((p2t, p2t_vocab)) => {
                    let mut candidates = Vec::with_capacity(dev_samples.len());
                    for (source, sample) in dev_sources.iter().zip(dev_samples) {
                        let produced = model.produce(
                            source,
                            &ProduceOptions {
                                mode: ProduceMode::CounterDriven,
                                max_frames: cfg.max_frames,
                                stop_threshold: cfg.stop_threshold,
                                gt_counters: Some(sample.pose.counters()),
                                just_counter,
                            },
                        )?;
                        candidates.push(back_translate(p2t, p2t_vocab, &produced)?);
                    }
                    bleu(&candidates, &dev_texts, 4)?[3]
                }
                None => {
                    let mut total_mse = 0.0f64;
                    for (source, sample) in dev_sources.iter().zip(dev_samples) {
                        let produced = model.produce(
                            source,
                            &ProduceOptions {
                                mode: ProduceMode::FreeRunning,
                                max_frames: cfg.max_frames,
                                stop_threshold: cfg.stop_threshold,
                                gt_counters: None,
                                just_counter,
                            },
                        )?;
                        total_mse += aligned_mse(&produced, &sample.pose)?;
                    }
                    total_mse / dev_samples.len() as f64
                }
            };
            line.push_str(&format!(" {metric_name}={metric:.6}"));
            if tracker.observe(epoch, metric) {
                line.push_str(" best=1");
                checkpoint_from_training(
                    cfg.task,
                    &cfg.model,
                    &extra_header,
                    vec![("src".to_string(), src_vocab.tokens().to_vec())],
                    &optimizer,
                    epoch,
                    cfg.seed,
                    &rng,
                )
                .save(checkpoint_path)?;
            }
        }
        logger.line(line);
        if do_eval && tracker.should_stop(cfg.patience) {
            break;
        }
    }

    let (best_epoch, best_metric) = tracker.best();
    Ok(LoopResult {
        best_epoch,
        best_metric,
        metric_name,
        epochs_run,
    })
}

fn back_translate(
    p2t: &Pose2TextTransformer<f32>,
    vocab: &Vocabulary,
    pose: &PoseSequence,
) -> Result<Vec<String>, PipelineError> {
    let max_len = p2t.config().model.max_seq_len - 1;
    let indices = p2t.translate_greedy(pose, max_len)?;
    Ok(vocab.decode(&indices)?)
}

// ---------------------------------------------------------------------------
// Production
// ---------------------------------------------------------------------------

/// Which checkpoints drive production: the direct text→pose model, or the
/// stacked text→gloss→pose pipe.
#[derive(Debug, Clone)]
pub enum ProduceSetup {
    /// One progressive checkpoint: a t2p model reads the text side of the
    /// corpus, a g2p model the gloss side.
    Direct { checkpoint: PathBuf },
    T2g2p { t2g: PathBuf, g2p: PathBuf },
}

/// Runtime knobs for production.
#[derive(Debug, Clone, Copy)]
pub struct ProduceRun {
    pub mode: ProduceMode,
    pub stop_threshold: f32,
    pub max_frames: usize,
}

impl Default for ProduceRun {
    fn default() -> Self {
        ProduceRun {
            mode: ProduceMode::FreeRunning,
            stop_threshold: 0.98,
            max_frames: 512,
        }
    }
}

/// Produces one pose sequence per sample of `split`, writing
/// `<out_dir>/<id>.pose3` files, and returns the productions in corpus
/// order. Counter-driven mode paces each production with the reference
/// pose's counter schedule.
pub fn produce_split(
    setup: &ProduceSetup,
    data_dir: &Path,
    split: &str,
    run: &ProduceRun,
    out_dir: &Path,
) -> Result<Vec<(String, PoseSequence)>, PipelineError> {
    let samples = load_split(data_dir, split)?;
    if samples.is_empty() {
        return Err(invalid(format!(
            "corpus split \"{split}\" in {} is empty",
            data_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;

    enum Stage {
        Direct { from_gloss: bool },
        Piped {
            t2g: Box<SymbolicTransformer<f32>>,
            t2g_src: Vocabulary,
            t2g_tgt: Vocabulary,
        },
    }

    let (stage, progressive, prog_vocab, just_counter) = match setup {
        ProduceSetup::Direct { checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            if ckpt.task != Task::G2p.to_string() && ckpt.task != Task::T2p.to_string() {
                return Err(invalid(format!(
                    "checkpoint at {} holds a \"{}\" model, but direct production needs \
                     \"g2p\" or \"t2p\"",
                    checkpoint.display(),
                    ckpt.task
                )));
            }
            let from_gloss = ckpt.task == Task::G2p.to_string();
            match model_from_checkpoint(&ckpt)? {
                TrainedModel::Progressive {
                    model,
                    src_vocab,
                    just_counter,
                } => (Stage::Direct { from_gloss }, model, src_vocab, just_counter),
                _ => unreachable!("g2p and t2p checkpoints rebuild progressive models"),
            }
        }
        ProduceSetup::T2g2p { t2g, g2p } => {
            let (t2g, t2g_src, t2g_tgt) =
                match load_for_task(t2g, Task::T2g, "the symbolic stage of t2g2p production")? {
                    TrainedModel::Symbolic {
                        model,
                        src_vocab,
                        tgt_vocab,
                    } => (Box::new(model), src_vocab, tgt_vocab),
                    _ => unreachable!("load_for_task checked the task"),
                };
            match load_for_task(g2p, Task::G2p, "the continuous stage of t2g2p production")? {
                TrainedModel::Progressive {
                    model,
                    src_vocab,
                    just_counter,
                } => (
                    Stage::Piped {
                        t2g,
                        t2g_src,
                        t2g_tgt,
                    },
                    model,
                    src_vocab,
                    just_counter,
                ),
                _ => unreachable!("load_for_task checked the task"),
            }
        }
    };

    let mut productions = Vec::with_capacity(samples.len());
    for sample in &samples {
        let source = match &stage {
            Stage::Direct { from_gloss: false } => prog_vocab.encode(&sample.text),
            Stage::Direct { from_gloss: true } => {
                let gloss = sample.gloss.as_ref().ok_or_else(|| {
                    invalid(format!(
                        "g2p production needs a gloss side, but sample \"{}\" has none",
                        sample.id
                    ))
                })?;
                prog_vocab.encode(gloss)
            }
            Stage::Piped {
                t2g,
                t2g_src,
                t2g_tgt,
            } => {
                let max_len = t2g.config().model.max_seq_len - 1;
                let gloss_indices = t2g.translate(&t2g_src.encode(&sample.text), max_len)?;
                let gloss = t2g_tgt.decode(&gloss_indices)?;
                if gloss.is_empty() {
                    return Err(invalid(format!(
                        "the text→gloss stage produced an empty gloss for sample \"{}\"",
                        sample.id
                    )));
                }
                prog_vocab.encode(&gloss)
            }
        };
        let produced = progressive.produce(
            &source,
            &ProduceOptions {
                mode: run.mode,
                max_frames: run.max_frames,
                stop_threshold: run.stop_threshold,
                gt_counters: match run.mode {
                    ProduceMode::CounterDriven => Some(sample.pose.counters()),
                    ProduceMode::FreeRunning => None,
                },
                just_counter,
            },
        )?;
        write_pose3(&out_dir.join(format!("{}.pose3", sample.id)), &produced)?;
        productions.push((sample.id.clone(), produced));
    }
    Ok(productions)
}

/// Greedy translation of every sample in `split` with a symbolic-output
/// checkpoint (text→gloss or pose→text), returned as `(id, tokens)` pairs.
pub fn translate_split(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
) -> Result<Vec<(String, Vec<String>)>, PipelineError> {
    let samples = load_split(data_dir, split)?;
    match load_trained_model(checkpoint)? {
        TrainedModel::Symbolic {
            model,
            src_vocab,
            tgt_vocab,
        } => {
            let max_len = model.config().model.max_seq_len - 1;
            samples
                .iter()
                .map(|sample| {
                    let out = model.translate(&src_vocab.encode(&sample.text), max_len)?;
                    Ok((sample.id.clone(), tgt_vocab.decode(&out)?))
                })
                .collect()
        }
        TrainedModel::Pose2Text { model, tgt_vocab } => samples
            .iter()
            .map(|sample| {
                Ok((
                    sample.id.clone(),
                    back_translate(&model, &tgt_vocab, &sample.pose)?,
                ))
            })
            .collect(),
        TrainedModel::Progressive { .. } => Err(invalid(
            "translation needs a symbolic-output checkpoint (t2g or p2t), \
             not a continuous production model"
                .into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Back-translation evaluation of a production directory against a
/// reference split: BLEU-1..4 and ROUGE-L of the back-translated text plus
/// the mean normalized DTW cost against the reference poses.
pub fn evaluate_split(
    production_dir: &Path,
    data_dir: &Path,
    split: &str,
    p2t_checkpoint: &Path,
) -> Result<EvalReport, PipelineError> {
    let samples = load_split(data_dir, split)?;
    if samples.is_empty() {
        return Err(invalid(format!(
            "corpus split \"{split}\" in {} is empty",
            data_dir.display()
        )));
    }

    let mut any_production = false;
    for entry in fs::read_dir(production_dir).map_err(io_at(production_dir))? {
        let entry = entry.map_err(io_at(production_dir))?;
        if entry.path().extension().is_some_and(|e| e == "pose3") {
            any_production = true;
            break;
        }
    }
    if !any_production {
        return Err(invalid(format!(
            "production directory {} holds no .pose3 files",
            production_dir.display()
        )));
    }

    let (p2t, p2t_vocab) = match load_for_task(p2t_checkpoint, Task::P2t, "evaluation")? {
        TrainedModel::Pose2Text { model, tgt_vocab } => (model, tgt_vocab),
        _ => unreachable!("load_for_task checked the task"),
    };
    let expected_joints = p2t.config().joints;

    let mut candidates = Vec::with_capacity(samples.len());
    let mut references = Vec::with_capacity(samples.len());
    let mut dtw_total = 0.0f64;
    for sample in &samples {
        let path = production_dir.join(format!("{}.pose3", sample.id));
        if !path.is_file() {
            return Err(invalid(format!(
                "no production for sample \"{}\" (expected {})",
                sample.id,
                path.display()
            )));
        }
        let produced = read_pose3(&path)?;
        if produced.joints() != expected_joints {
            return Err(invalid(format!(
                "production for sample \"{}\" has J={} but the back-translation model expects J={expected_joints}",
                sample.id,
                produced.joints()
            )));
        }
        candidates.push(back_translate(&p2t, &p2t_vocab, &produced)?);
        references.push(sample.text.clone());
        dtw_total += dtw_align(&produced, &sample.pose)?.normalized_cost;
    }

    let bleu_scores = bleu(&candidates, &references, 4)?;
    Ok(EvalReport {
        bleu: [
            bleu_scores[0],
            bleu_scores[1],
            bleu_scores[2],
            bleu_scores[3],
        ],
        rouge_l: rouge_l_corpus(&candidates, &references)?,
        dtw_mean: Some(dtw_total / samples.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_toy_corpus, ToyCorpusConfig};

    fn tiny_corpus(dir: &Path, identity_gloss: bool) {
        let cfg = ToyCorpusConfig {
            vocab_size: 8,
            num_samples: 12,
            min_tokens: 2,
            max_tokens: 3,
            min_frames_per_token: 4,
            max_frames_per_token: 6,
            joints: 3,
            seed: 7,
            identity_gloss,
            crossfade: 2,
        };
        synth_toy_corpus(&cfg, dir).unwrap();
    }

    fn tiny_run_config(task: Task, data_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new(task);
        cfg.data_dir = data_dir.to_path_buf();
        cfg.model = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 64,
        };
        cfg.d_counter = 4;
        cfg.batch_size = 4;
        cfg.max_epochs = 2;
        cfg.eval_every = 1;
        cfg.augment.future_horizon = 2;
        cfg.max_frames = 64;
        cfg
    }

    #[test]
    fn two_seeded_runs_log_identically_and_agree_on_the_best_epoch() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::G2p, data.path());

        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let a = train(&cfg, out_a.path(), |_| {}).unwrap();
        let b = train(&cfg, out_b.path(), |_| {}).unwrap();

        let log_a = fs::read(&a.log_path).unwrap();
        let log_b = fs::read(&b.log_path).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b);
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.best_metric, b.best_metric);
        assert_eq!(a.metric_name, "dev_mse");
    }

    #[test]
    fn zero_learning_rate_trains_to_the_initialization() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let mut cfg = tiny_run_config(Task::T2g, data.path());
        cfg.learning_rate = 0.0;
        cfg.max_epochs = 1;

        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();

        // The checkpointed parameters must equal a freshly initialized
        // model's: with lr = 0 an epoch of Adam is the identity on values.
        let trained = match load_trained_model(&outcome.checkpoint_path).unwrap() {
            TrainedModel::Symbolic { model, .. } => model,
            _ => panic!("t2g must load as a symbolic model"),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = SymbolicTransformer::<f32>::new(trained.config().clone(), &mut rng).unwrap();
        for ((name_a, a), (name_b, b)) in
            trained.parameters().iter().zip(fresh.parameters().iter())
        {
            assert_eq!(name_a, name_b);
            assert_eq!(a.values(), b.values(), "{name_a} drifted");
        }
    }

    #[test]
    fn trained_checkpoint_reproduces_greedy_translations_exactly() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::T2g, data.path());
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();

        let first = translate_split(&outcome.checkpoint_path, data.path(), "dev").unwrap();
        let second = translate_split(&outcome.checkpoint_path, data.path(), "dev").unwrap();
        assert_eq!(first, second);
        assert_eq!(first.len(), 2);
    }

    #[test]
    fn p2t_training_selects_on_dev_accuracy_and_reloads() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::P2t, data.path());
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();
        assert_eq!(outcome.metric_name, "dev_accuracy");
        assert!(matches!(
            load_trained_model(&outcome.checkpoint_path).unwrap(),
            TrainedModel::Pose2Text { .. }
        ));
    }

    #[test]
    fn production_writes_pose_files_and_counter_driven_matches_reference_length() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::T2p, data.path());
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();

        let prod_dir = tempfile::tempdir().unwrap();
        let setup = ProduceSetup::Direct {
            checkpoint: outcome.checkpoint_path.clone(),
        };
        let run = ProduceRun {
            mode: ProduceMode::CounterDriven,
            ..ProduceRun::default()
        };
        let productions = produce_split(&setup, data.path(), "dev", &run, prod_dir.path()).unwrap();

        let references = load_split(data.path(), "dev").unwrap();
        assert_eq!(productions.len(), references.len());
        for ((id, produced), reference) in productions.iter().zip(&references) {
            assert_eq!(id, &reference.id);
            assert_eq!(produced.joints(), reference.pose.joints());
            assert_eq!(produced.frames(), reference.pose.frames());
            let reread = read_pose3(&prod_dir.path().join(format!("{id}.pose3"))).unwrap();
            assert_eq!(reread.data(), produced.data());
        }
    }

    #[test]
    fn produce_rejects_a_checkpoint_for_the_wrong_task() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::T2g, data.path());
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();

        let prod_dir = tempfile::tempdir().unwrap();
        let setup = ProduceSetup::Direct {
            checkpoint: outcome.checkpoint_path,
        };
        let err = produce_split(
            &setup,
            data.path(),
            "dev",
            &ProduceRun::default(),
            prod_dir.path(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t2g") && msg.contains("g2p"), "{msg}");
    }

    #[test]
    fn evaluation_demands_productions_for_every_sample() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::P2t, data.path());
        let out = tempfile::tempdir().unwrap();
        let p2t = train(&cfg, out.path(), |_| {}).unwrap();

        // Empty production directory: refused outright.
        let empty = tempfile::tempdir().unwrap();
        let err = evaluate_split(empty.path(), data.path(), "dev", &p2t.checkpoint_path)
            .unwrap_err();
        assert!(err.to_string().contains("no .pose3 files"), "{err}");

        // One production present, the other missing: named in the error.
        let partial = tempfile::tempdir().unwrap();
        let dev = load_split(data.path(), "dev").unwrap();
        write_pose3(
            &partial.path().join(format!("{}.pose3", dev[0].id)),
            &dev[0].pose,
        )
        .unwrap();
        let err = evaluate_split(partial.path(), data.path(), "dev", &p2t.checkpoint_path)
            .unwrap_err();
        assert!(err.to_string().contains(&dev[1].id), "{err}");
    }

    #[test]
    fn evaluation_scores_ground_truth_copies_against_the_reference() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let cfg = tiny_run_config(Task::P2t, data.path());
        let out = tempfile::tempdir().unwrap();
        let p2t = train(&cfg, out.path(), |_| {}).unwrap();

        let prod = tempfile::tempdir().unwrap();
        let dev = load_split(data.path(), "dev").unwrap();
        for sample in &dev {
            write_pose3(&prod.path().join(format!("{}.pose3", sample.id)), &sample.pose).unwrap();
        }
        let report = evaluate_split(prod.path(), data.path(), "dev", &p2t.checkpoint_path).unwrap();
        // Ground-truth poses align with themselves at zero DTW cost; BLEU
        // depends on the (barely trained) back-translator and only needs to
        // be well-formed here.
        assert_eq!(report.dtw_mean, Some(0.0));
        for score in report.bleu {
            assert!((0.0..=100.0).contains(&score));
        }
        assert!((0.0..=1.0).contains(&report.rouge_l));
    }

    #[test]
    fn gloss_free_corpus_is_rejected_for_gloss_tasks_at_startup() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        fs::remove_file(data.path().join("train.gloss")).unwrap();
        fs::remove_file(data.path().join("dev.gloss")).unwrap();

        let cfg = tiny_run_config(Task::G2p, data.path());
        let out = tempfile::tempdir().unwrap();
        let err = train(&cfg, out.path(), |_| {}).unwrap_err();
        assert!(err.to_string().contains("gloss"), "{err}");

        // t2p never touches gloss, so the same corpus trains fine.
        let cfg = tiny_run_config(Task::T2p, data.path());
        let out = tempfile::tempdir().unwrap();
        train(&cfg, out.path(), |_| {}).unwrap();
    }

    #[test]
    fn best_tracker_honors_direction_and_patience() {
        let mut up = BestTracker::new(true);
        assert!(up.observe(1, 0.5));
        assert!(!up.observe(2, 0.5), "ties are not improvements");
        assert!(up.observe(3, 0.7));
        assert!(!up.observe(4, 0.6));
        assert!(!up.should_stop(2));
        assert!(!up.observe(5, 0.6));
        assert!(up.should_stop(2));
        assert_eq!(up.best(), (3, 0.7));

        let mut down = BestTracker::new(false);
        assert!(down.observe(1, 1.0));
        assert!(down.observe(2, 0.2));
        assert!(!down.observe(3, 0.4));
        assert_eq!(down.best(), (2, 0.2));
    }

    #[test]
    fn progressive_checkpoint_headers_rebuild_the_exact_model() {
        let data = tempfile::tempdir().unwrap();
        tiny_corpus(data.path(), false);
        let mut cfg = tiny_run_config(Task::G2p, data.path());
        cfg.augment.just_counter = true;
        cfg.max_epochs = 1;
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path(), |_| {}).unwrap();

        match load_trained_model(&outcome.checkpoint_path).unwrap() {
            TrainedModel::Progressive {
                model,
                just_counter,
                ..
            } => {
                assert!(just_counter);
                assert_eq!(model.config().horizon, cfg.augment.future_horizon);
                assert_eq!(model.config().joints, 3);
                assert_eq!(model.config().d_counter, cfg.d_counter);
            }
            _ => panic!("g2p must load as a progressive model"),
        }
    }
}
