//! `qa` subcommands. Each command is a plain function so tests can drive it
//! without spawning a process; `main` only parses arguments and maps errors
//! to exit codes.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{build_batches, dataset_stats, load_glove, load_squad, DatasetStats, EmbeddingTable};
use crate::error::{QaError, Result};
use crate::eval::{evaluate, EvalReport, Predictions};
use crate::gradcheck::{model_check, op_suite, CheckResult};
use crate::graph::OpTag;
use crate::infer::{predict_examples, to_predictions};
use crate::model::{ModelConfig, ENCODER_LAYERS};
use crate::span::{DecodeOptions, DEFAULT_MAX_ANSWER_LEN};
use crate::train::{AdamConfig, TrainLogRecord, TrainOptions, Trainer};

/// Exit status for a missing or unreadable input file.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for an output that cannot be written.
pub const EXIT_OUTPUT: i32 = 3;
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "qa", version, about = "Train and evaluate an extractive question answering model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer and context length statistics of a SQuAD file.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and write checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint on a SQuAD file.
    Eval(DecodeArgs),
    /// Write `{qid: answer}` predictions for a SQuAD file.
    Predict {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and of a tiny full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break one op's backward rule to confirm the check catches it.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub glove: PathBuf,
    /// Final checkpoint. The best-dev checkpoint goes to `<out>.best`.
    #[arg(long)]
    pub out: PathBuf,
    /// Total iteration budget, counting iterations before a resume.
    #[arg(long, default_value_t = 50_000)]
    pub iters: u64,
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 150)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 100)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 300)]
    pub context_cap: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    pub max_answer_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Log file; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint. Model shape flags are taken from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    /// Arguments with every default, for the given files.
    pub fn new(data: PathBuf, glove: PathBuf, out: PathBuf) -> Self {
        Self {
            data,
            dev: None,
            glove,
            out,
            iters: 50_000,
            batch_size: 40,
            hidden: 150,
            dropout: 0.2,
            embed_dim: 100,
            context_cap: 300,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            seed: 0,
            eval_every: 500,
            lr: 1e-3,
            log: None,
            resume: None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_size: self.hidden,
            dropout_rate: self.dropout,
            embedding_dim: self.embed_dim,
            encoder_layers: ENCODER_LAYERS,
            context_cap: self.context_cap,
            seed: self.seed,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| with_suffix(&self.out, ".log.jsonl"))
    }

    pub fn best_path(&self) -> PathBuf {
        with_suffix(&self.out, ".best")
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding file; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    pub max_answer_len: usize,
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> QaError + '_ {
    move |source| QaError::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &QaError) -> i32 {
    match err {
        QaError::Read { .. } => EXIT_INPUT,
        QaError::Write { .. } => EXIT_OUTPUT,
        _ => EXIT_FAILURE,
    }
}

/// Runs one parsed command, printing to `out`. Returns the exit status for
/// commands that can fail without an error (gradcheck).
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let io = |e| QaError::Write {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    match cli.command {
        Command::Stats { data } => {
            let stats = cmd_stats(&data)?;
            write!(out, "{stats}").map_err(io)?;
        }
        Command::Train(args) => {
            cmd_train(&args, out)?;
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args)?;
            write!(out, "{report}").map_err(io)?;
        }
        Command::Predict { decode, out: path } => {
            let predictions = cmd_predict(&decode, &path)?;
            writeln!(out, "wrote {} predictions to {}", predictions.len(), path.display()).map_err(io)?;
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = match inject_fault {
                None => None,
                Some(name) => Some(
                    OpTag::from_name(&name).ok_or_else(|| QaError::Input(format!("unknown op {name:?}")))?,
                ),
            };
            let results = cmd_gradcheck(seed, fault)?;
            for r in &results {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                writeln!(
                    out,
                    "{:<22} max rel error {:.3e} (tolerance {:.0e}) {verdict}",
                    r.name, r.max_rel_error, r.tolerance
                )
                .map_err(io)?;
            }
            if !results.iter().all(CheckResult::passed) {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}

pub fn cmd_stats(data: &Path) -> Result<DatasetStats> {
    let squad = load_squad(data)?;
    dataset_stats(&squad.examples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_dev_f1: Option<f64>,
    pub dropped: usize,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let options = TrainOptions {
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        batch_size: args.batch_size,
        eval_every: args.eval_every,
        max_answer_len: args.max_answer_len,
    };
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Trainer::resume(ckpt.config, options, ckpt.params, ckpt.state)?
        }
        None => {
            let config = args.model_config();
            config.validate()?;
            Trainer::new(config, options)?
        }
    };
    let config = trainer.config.clone();
    let table = load_glove(&args.glove, config.embedding_dim)?;
    let train = load_squad(&args.data)?;
    let dev = args.dev.as_deref().map(load_squad).transpose()?;
    let batches = build_batches(&train.examples, &table, args.batch_size, config.context_cap, Some(config.seed))?;

    let stdout_err = |e| QaError::Write {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(
        out,
        "training on {} examples in {} batches ({} dropped: unaligned or beyond the context cap)",
        train.examples.len() - batches.dropped,
        batches.batches.len(),
        batches.dropped
    )
    .map_err(stdout_err)?;

    let log_path = args.log_path();
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(write_err(&log_path))?;
    let mut log = BufWriter::new(log_file);

    let glove_path = args.glove.to_string_lossy().into_owned();
    let snapshot = |t: &Trainer| Checkpoint {
        config: t.config.clone(),
        glove_path: Some(glove_path.clone()),
        params: t.params.clone(),
        state: t.state(),
    };
    let best_path = args.best_path();
    let mut first_loss = None;
    let mut last_loss = None;
    trainer.run(
        args.iters,
        &batches.batches,
        &table,
        dev.as_ref().map(|d| d.examples.as_slice()),
        |record: &TrainLogRecord| {
            first_loss.get_or_insert(record.loss);
            last_loss = Some(record.loss);
            let line = serde_json::to_string(record).map_err(|e| QaError::Input(e.to_string()))?;
            writeln!(log, "{line}").map_err(write_err(&log_path))?;
            if let (Some(f1), Some(em)) = (record.dev_f1, record.dev_em) {
                log.flush().map_err(write_err(&log_path))?;
                writeln!(
                    out,
                    "iteration {}: loss {:.4}, dev F1 {f1:.2}, dev EM {em:.2}",
                    record.iteration, record.loss
                )
                .map_err(stdout_err)?;
            }
            Ok(())
        },
        |t: &Trainer| snapshot(t).save(&best_path),
    )?;
    log.flush().map_err(write_err(&log_path))?;
    snapshot(&trainer).save(&args.out)?;
    writeln!(
        out,
        "finished at iteration {}; checkpoint written to {}",
        trainer.iteration,
        args.out.display()
    )
    .map_err(stdout_err)?;
    Ok(TrainSummary {
        iterations: trainer.iteration,
        first_loss,
        last_loss,
        best_dev_f1: trainer.best_dev_f1,
        dropped: batches.dropped,
    })
}

struct Loaded {
    ckpt: Checkpoint,
    table: EmbeddingTable,
    examples: Vec<crate::data::QAExample>,
}

fn load_for_decoding(args: &DecodeArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let glove = match (&args.glove, &ckpt.glove_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(QaError::Config("no embedding file given or recorded in the checkpoint".into())),
    };
    let table = load_glove(&glove, ckpt.config.embedding_dim)?;
    let examples = load_squad(&args.data)?.examples;
    Ok(Loaded { ckpt, table, examples })
}

fn decode_predictions(args: &DecodeArgs, loaded: &Loaded) -> Result<Predictions> {
    let decode = DecodeOptions {
        max_len: args.max_answer_len,
        ..DecodeOptions::default()
    };
    let spans = predict_examples(
        &loaded.ckpt.params,
        &loaded.examples,
        &loaded.table,
        &loaded.ckpt.config,
        args.batch_size,
        decode,
    )?;
    to_predictions(&spans)
}

pub fn cmd_eval(args: &DecodeArgs) -> Result<EvalReport> {
    let loaded = load_for_decoding(args)?;
    let predictions = decode_predictions(args, &loaded)?;
    Ok(evaluate(&predictions, &loaded.examples))
}

/// Writes pretty-printed predictions with sorted keys to `path`.
pub fn cmd_predict(args: &DecodeArgs, path: &Path) -> Result<Predictions> {
    let loaded = load_for_decoding(args)?;
    let predictions = decode_predictions(args, &loaded)?;
    let file = File::create(path).map_err(write_err(path))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &predictions).map_err(|e| QaError::Write {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    writeln!(writer).map_err(write_err(path))?;
    writer.flush().map_err(write_err(path))?;
    Ok(predictions)
}

pub fn cmd_gradcheck(seed: u64, fault: Option<OpTag>) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed, fault)?;
    results.push(model_check(seed, fault)?);
    Ok(results)
}
