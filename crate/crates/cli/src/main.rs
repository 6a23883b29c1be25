//! `pewave` — compare periodic positional encodings on desk-scale
//! translation and synthetic sequence tasks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pewave_core::analysis;
use pewave_core::checkpoint;
use pewave_core::data::{
    self, make_folds, synth_task, ParallelCorpus, SynthTask, Vocab,
};
use pewave_core::kernels::PeriodicKind;
use pewave_core::metrics;
use pewave_core::model::{ModelConfig, ModelState};
use pewave_core::pe::{build_table, PeConfig};
use pewave_core::train::{
    aggregate_csv, prepare_split, run_cv, train_run, CvSpec, TrainConfig,
};
use pewave_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "pewave", version, about = "Periodic positional-encoding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a positional-encoding table as CSV (pos,dim0,...,dim{d-1}).
    DumpPe(DumpPeArgs),
    /// Train one model and write its run CSV plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a TSV corpus: loss and BLEU-4.
    Eval(EvalArgs),
    /// Cross-validate encodings; per-fold CSVs plus an aggregate CSV.
    Cv(CvArgs),
    /// Quantitative probes of the encoding functions.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Greedy-decode a source sentence with a trained checkpoint.
    Translate(TranslateArgs),
}

#[derive(Args)]
struct DumpPeArgs {
    /// Encoding kernel: sin, tri, sqw or saw.
    #[arg(long)]
    encoding: String,
    /// Embedding width (even).
    #[arg(long, value_name = "N")]
    d_model: usize,
    /// Number of positions.
    #[arg(long, value_name = "L")]
    len: usize,
    /// Frequency base.
    #[arg(long, default_value_t = 10000.0)]
    base: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskKind {
    Copy,
    Reverse,
    Corpus,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    PaperBase,
}

#[derive(Args)]
struct TrainArgs {
    /// Encoding kernel: sin, tri, sqw or saw.
    #[arg(long)]
    encoding: String,
    /// Data source.
    #[arg(long, value_enum)]
    task: TaskKind,
    /// TSV corpus (source<TAB>target), required when --task corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model/optimizer preset.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// JSON file with config overrides (flag > file > preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Run seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch size in sentence pairs.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic-task training pairs.
    #[arg(long, default_value_t = 2000)]
    train_pairs: usize,
    /// Synthetic-task validation pairs.
    #[arg(long, default_value_t = 200)]
    val_pairs: usize,
    /// Synthetic-task vocabulary size.
    #[arg(long, default_value_t = 50)]
    synth_vocab: usize,
    /// Synthetic-task minimum sequence length.
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    /// Synthetic-task maximum sequence length.
    #[arg(long, default_value_t = 16)]
    len_max: usize,
    /// Vocabulary frequency cutoff.
    #[arg(long, default_value_t = 2)]
    min_freq: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSV corpus to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Output CSV path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    /// Comma-separated encodings, e.g. sin,tri,sqw,saw.
    #[arg(long, value_delimiter = ',')]
    encodings: Vec<String>,
    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Data source.
    #[arg(long, value_enum)]
    task: TaskKind,
    /// TSV corpus, required when --task corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model/optimizer preset.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// JSON file with config overrides (flag > file > preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs per fold.
    #[arg(long)]
    epochs: Option<usize>,
    /// Base seed; fold f trains with seed+f.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch size in sentence pairs.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic-task corpus size.
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    /// Synthetic-task vocabulary size.
    #[arg(long, default_value_t = 50)]
    synth_vocab: usize,
    /// Synthetic-task minimum sequence length.
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    /// Synthetic-task maximum sequence length.
    #[arg(long, default_value_t = 16)]
    len_max: usize,
    /// Vocabulary frequency cutoff.
    #[arg(long, default_value_t = 2)]
    min_freq: u64,
    /// Worker threads for fold runs (results identical at any setting).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "cv-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Value histogram of a PE table with a max/min bin occupancy ratio.
    Histogram(HistogramArgs),
    /// Rotary logit deviation under common position shifts.
    Shift(ShiftArgs),
    /// Central-difference slope samples of the kernel.
    Slope(SlopeArgs),
}

#[derive(Args)]
struct HistogramArgs {
    /// Encoding kernel: sin, tri, sqw or saw.
    #[arg(long)]
    encoding: String,
    #[arg(long, default_value_t = 2)]
    d_model: usize,
    #[arg(long, default_value_t = 10000)]
    len: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    /// Encoding kernel: sin, tri, sqw or saw.
    #[arg(long)]
    encoding: String,
    /// Per-head width (even).
    #[arg(long, default_value_t = 16)]
    d_k: usize,
    /// Base positions m, n range over 0..positions.
    #[arg(long, default_value_t = 4)]
    positions: usize,
    /// Shifts 0..=max-shift are profiled.
    #[arg(long, default_value_t = 16)]
    max_shift: usize,
    /// Random query/key draws.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SlopeArgs {
    /// Encoding kernel: sin, tri, sqw or saw.
    #[arg(long)]
    encoding: String,
    /// Equally spaced sample angles over one period.
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentence.
    #[arg(long)]
    text: String,
    /// Generation cap in tokens.
    #[arg(long, default_value_t = 64)]
    max_steps: usize,
}

/// Optional overrides loaded from `--config` (JSON). Precedence:
/// CLI flag > this file > preset default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOverrides {
    d_model: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    dropout_p: Option<f64>,
    max_len: Option<usize>,
    embed_scaling: Option<bool>,
    #[serde(rename = "rope.enabled")]
    rope_enabled: Option<bool>,
    #[serde(rename = "rope.base")]
    rope_base: Option<f64>,
    lr_init: Option<f64>,
    weight_decay: Option<f64>,
    clip_norm: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    plateau_factor: Option<f64>,
    plateau_patience: Option<usize>,
    plateau_min_delta: Option<f64>,
    plateau_min_lr: Option<f64>,
}

/// Fully resolved run configuration, echoed into every output directory.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    task: &'a str,
    min_freq: u64,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) => 1,
        Some(CoreError::Numeric { .. }) | Some(CoreError::Contract(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::DumpPe(args) => dump_pe(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Cv(args) => cv(args),
        Command::Analyze(cmd) => analyze(cmd),
        Command::Translate(args) => translate(args),
    }
}

fn parse_encoding(name: &str) -> anyhow::Result<PeriodicKind> {
    PeriodicKind::from_str(name)
        .map_err(|e| match e {
            CoreError::Config(m) => CoreError::config(format!("--encoding: {m}")),
            other => other,
        })
        .map_err(Into::into)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn dump_pe(args: DumpPeArgs) -> anyhow::Result<()> {
    let kind = parse_encoding(&args.encoding)?;
    let config = PeConfig::new(kind, args.d_model, args.len).with_base(args.base);
    let table = build_table::<f64>(config)?;
    let mut csv = String::from("pos");
    for d in 0..args.d_model {
        csv.push_str(&format!(",dim{d}"));
    }
    csv.push('\n');
    for pos in 0..args.len {
        csv.push_str(&pos.to_string());
        for &v in table.row(pos) {
            csv.push_str(&format!(",{:.16e}", v));
        }
        csv.push('\n');
    }
    write_file(&args.out, &csv)?;
    println!(
        "wrote {} ({} positions × {} dims, {})",
        args.out.display(),
        args.len,
        args.d_model,
        kind
    );
    Ok(())
}

struct PresetConfigs {
    model: ModelConfig,
    train: TrainConfig,
}

fn resolve_preset(preset: Preset, encoding: PeriodicKind) -> PresetConfigs {
    // vocabulary sizes are filled in after the corpus is known
    match preset {
        Preset::Desk => PresetConfigs {
            model: ModelConfig::desk(encoding, 4, 4),
            train: TrainConfig::desk(),
        },
        Preset::PaperBase => PresetConfigs {
            model: ModelConfig::paper_base(encoding, 4, 4),
            train: TrainConfig::paper_base(),
        },
    }
}

fn apply_overrides(
    cfgs: &mut PresetConfigs,
    file: Option<&PathBuf>,
    epochs: Option<usize>,
    seed: u64,
    batch_size: Option<usize>,
    lr: Option<f64>,
) -> anyhow::Result<()> {
    if let Some(path) = file {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CoreError::data(format!("--config: cannot read {}: {e}", path.display())))?;
        let o: FileOverrides = serde_json::from_str(&raw)
            .map_err(|e| CoreError::config(format!("--config: {e}")))?;
        let m = &mut cfgs.model;
        if let Some(v) = o.d_model {
            m.d_model = v;
        }
        if let Some(v) = o.n_layers {
            m.n_layers = v;
        }
        if let Some(v) = o.n_heads {
            m.n_heads = v;
        }
        if let Some(v) = o.d_ff {
            m.d_ff = v;
        }
        if let Some(v) = o.dropout_p {
            m.dropout_p = v;
        }
        if let Some(v) = o.max_len {
            m.max_len = v;
        }
        if let Some(v) = o.embed_scaling {
            m.embed_scaling = v;
        }
        if let Some(v) = o.rope_enabled {
            m.rope_enabled = v;
        }
        if let Some(v) = o.rope_base {
            m.pe_base = v;
        }
        let t = &mut cfgs.train;
        if let Some(v) = o.lr_init {
            t.lr_init = v;
        }
        if let Some(v) = o.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = o.clip_norm {
            t.clip_norm = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.plateau_factor {
            t.plateau.factor = v;
        }
        if let Some(v) = o.plateau_patience {
            t.plateau.patience = v;
        }
        if let Some(v) = o.plateau_min_delta {
            t.plateau.min_delta = v;
        }
        if let Some(v) = o.plateau_min_lr {
            t.plateau.min_lr = v;
        }
    }
    if let Some(v) = epochs {
        cfgs.train.epochs = v;
    }
    cfgs.train.seed = seed;
    if let Some(v) = batch_size {
        cfgs.train.batch_size = v;
    }
    if let Some(v) = lr {
        cfgs.train.lr_init = v;
    }
    Ok(())
}

enum TaskData {
    Synth(SynthTask),
    Corpus(ParallelCorpus),
}

fn load_task(
    task: TaskKind,
    corpus: Option<&PathBuf>,
    max_tokens: usize,
) -> anyhow::Result<TaskData> {
    match task {
        TaskKind::Copy => Ok(TaskData::Synth(SynthTask::Copy)),
        TaskKind::Reverse => Ok(TaskData::Synth(SynthTask::Reverse)),
        TaskKind::Corpus => {
            let path = corpus.ok_or_else(|| {
                CoreError::config("--corpus is required when --task corpus")
            })?;
            let mut corpus = ParallelCorpus::from_tsv(path)?;
            let dropped = corpus.filter_max_tokens(max_tokens);
            if dropped > 0 {
                eprintln!("note: dropped {dropped} pairs longer than {max_tokens} tokens");
            }
            Ok(TaskData::Corpus(corpus))
        }
    }
}

fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Copy => "copy",
        TaskKind::Reverse => "reverse",
        TaskKind::Corpus => "corpus",
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let encoding = parse_encoding(&args.encoding)?;
    let mut cfgs = resolve_preset(args.preset, encoding);
    apply_overrides(
        &mut cfgs,
        args.config.as_ref(),
        args.epochs,
        args.seed,
        args.batch_size,
        args.lr,
    )?;

    // assemble the corpus and a train/val split
    let max_tokens = cfgs.model.max_len.saturating_sub(2);
    let (corpus, train_idx, val_idx) =
        match load_task(args.task, args.corpus.as_ref(), max_tokens)? {
            TaskData::Synth(kind) => {
                let n = args.train_pairs + args.val_pairs;
                let corpus =
                    synth_task(kind, args.synth_vocab, (args.len_min, args.len_max), n, args.seed)?;
                let train_idx: Vec<usize> = (0..args.train_pairs).collect();
                let val_idx: Vec<usize> = (args.train_pairs..n).collect();
                (corpus, train_idx, val_idx)
            }
            TaskData::Corpus(corpus) => {
                // hold out fold 0 of a fixed 10-fold plan as validation
                let plan = make_folds(corpus.len(), 10, args.seed)?;
                (corpus.clone(), plan.train_indices(0), plan.fold(0).to_vec())
            }
        };

    let src_vocab = Vocab::build(
        train_idx.iter().map(|&i| corpus.pairs[i].0.as_slice()),
        args.min_freq,
    )?;
    let tgt_vocab = Vocab::build(
        train_idx.iter().map(|&i| corpus.pairs[i].1.as_slice()),
        args.min_freq,
    )?;
    cfgs.model.src_vocab_size = src_vocab.len();
    cfgs.model.tgt_vocab_size = tgt_vocab.len();
    cfgs.model.validate()?;
    cfgs.train.validate()?;

    let split = prepare_split(&corpus, &train_idx, &val_idx, &src_vocab, &tgt_vocab);
    let mut state = ModelState::<f64>::init(cfgs.model, cfgs.train.seed)?;

    std::fs::create_dir_all(&args.out)?;
    let resolved = ResolvedConfig {
        model: &cfgs.model,
        train: &cfgs.train,
        task: task_name(args.task),
        min_freq: args.min_freq,
    };
    write_file(
        &args.out.join("config.json"),
        &serde_json::to_string_pretty(&resolved)?,
    )?;
    write_file(&args.out.join("src_vocab.tsv"), &src_vocab.dump())?;
    write_file(&args.out.join("tgt_vocab.tsv"), &tgt_vocab.dump())?;

    println!(
        "training {encoding} on {} ({} train / {} val pairs, {} epochs)",
        task_name(args.task),
        train_idx.len(),
        val_idx.len(),
        cfgs.train.epochs
    );
    let report = train_run(&mut state, &split, &tgt_vocab, &cfgs.train, 0)?;
    for row in &report.rows {
        println!(
            "epoch {:>4}  train {:.4}  val {:.4}  bleu {:.2}  acc {:.4}  lr {:e}",
            row.epoch, row.train_loss, row.val_loss, row.val_bleu, row.val_acc, row.lr
        );
    }
    let run_csv = args.out.join(format!("run_{encoding}.csv"));
    write_file(&run_csv, &report.to_csv())?;
    let ckpt = args.out.join("checkpoint.json");
    checkpoint::save(&ckpt, &state, &src_vocab, &tgt_vocab)?;
    println!(
        "final val loss {:.4}, final BLEU {:.2}, best BLEU {:.2}",
        report.final_row().val_loss,
        report.final_row().val_bleu,
        report.best_val_bleu
    );
    println!("wrote {} and {}", run_csv.display(), ckpt.display());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (state, src_vocab, tgt_vocab) = checkpoint::load::<f64>(&args.checkpoint)?;
    let mut corpus = ParallelCorpus::from_tsv(&args.corpus)?;
    let dropped = corpus.filter_max_tokens(state.config.max_len.saturating_sub(2));
    if dropped > 0 {
        eprintln!("note: dropped {dropped} over-long pairs");
    }
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let split = prepare_split(&corpus, &idx, &idx, &src_vocab, &tgt_vocab);
    let report = evaluate_corpus(&state, &split, &tgt_vocab, args.batch_size)?;
    println!(
        "loss {:.6}  bleu4 {:.4}  precisions {:.4}/{:.4}/{:.4}/{:.4}  bp {:.4}  hyp_len {}  ref_len {}",
        report.loss,
        report.bleu.bleu4,
        report.bleu.precisions[0],
        report.bleu.precisions[1],
        report.bleu.precisions[2],
        report.bleu.precisions[3],
        report.bleu.brevity_penalty,
        report.bleu.hyp_len,
        report.bleu.ref_len
    );
    let csv = format!(
        "loss,bleu4,p1,p2,p3,p4,brevity_penalty,hyp_len,ref_len\n{},{},{},{},{},{},{},{},{}\n",
        report.loss,
        report.bleu.bleu4,
        report.bleu.precisions[0],
        report.bleu.precisions[1],
        report.bleu.precisions[2],
        report.bleu.precisions[3],
        report.bleu.brevity_penalty,
        report.bleu.hyp_len,
        report.bleu.ref_len
    );
    write_file(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

struct EvalReport {
    loss: f64,
    bleu: metrics::BleuReport,
}

fn evaluate_corpus(
    state: &ModelState<f64>,
    split: &pewave_core::train::DataSplit,
    tgt_vocab: &Vocab,
    batch_size: usize,
) -> anyhow::Result<EvalReport> {
    use pewave_core::model::{decoder_input, decoder_targets, Mode};
    use pewave_core::tape::Tape;

    let batches = data::make_batches(&split.val, batch_size, 0, state.config.max_len)?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        let (dec_in, dec_pad) = decoder_input(&batch.tgt, &batch.tgt_pad_mask);
        let targets = decoder_targets(&batch.tgt);
        let mut tape = Tape::new();
        let (logits, _) = state.forward(
            &mut tape,
            &batch.src,
            &batch.src_pad_mask,
            &dec_in,
            &dec_pad,
            Mode::Eval,
            None,
        )?;
        let count = targets.iter().filter(|&&t| t != data::PAD).count();
        nll += metrics::cross_entropy(tape.value(logits), &targets, data::PAD)? * count as f64;
        tokens += count;
    }
    let cap = split
        .val
        .iter()
        .map(|(_, t)| t.len())
        .max()
        .unwrap_or(8)
        .saturating_add(6)
        .min(state.config.max_len);
    let mut hyps = Vec::with_capacity(split.val.len());
    let srcs: Vec<Vec<usize>> = split.val.iter().map(|(s, _)| s.clone()).collect();
    for chunk in srcs.chunks(256) {
        for decoded in state.greedy_decode_batch(chunk, cap)? {
            hyps.push(tgt_vocab.decode(&decoded));
        }
    }
    let bleu = metrics::bleu4(&hyps, &split.val_refs)?;
    Ok(EvalReport {
        loss: nll / tokens.max(1) as f64,
        bleu,
    })
}

fn cv(args: CvArgs) -> anyhow::Result<()> {
    if args.encodings.is_empty() {
        return Err(CoreError::config("--encodings must name at least one kernel").into());
    }
    let mut encodings = Vec::new();
    for name in &args.encodings {
        encodings.push(parse_encoding(name)?);
    }
    let mut cfgs = resolve_preset(args.preset, encodings[0]);
    apply_overrides(
        &mut cfgs,
        args.config.as_ref(),
        args.epochs,
        args.seed,
        args.batch_size,
        args.lr,
    )?;
    let max_tokens = cfgs.model.max_len.saturating_sub(2);
    let corpus = match load_task(args.task, args.corpus.as_ref(), max_tokens)? {
        TaskData::Synth(kind) => synth_task(
            kind,
            args.synth_vocab,
            (args.len_min, args.len_max),
            args.pairs,
            args.seed,
        )?,
        TaskData::Corpus(corpus) => corpus,
    };
    cfgs.train.validate()?;

    let spec = CvSpec {
        corpus: &corpus,
        encodings: encodings.clone(),
        n_folds: args.folds,
        base_model: cfgs.model,
        train: cfgs.train,
        min_freq: args.min_freq,
        jobs: args.jobs,
    };
    println!(
        "cross-validating {} encodings × {} folds on {} ({} pairs, {} epochs)",
        encodings.len(),
        args.folds,
        task_name(args.task),
        corpus.len(),
        cfgs.train.epochs
    );
    let report = run_cv(&spec)?;

    std::fs::create_dir_all(&args.out)?;
    let resolved = ResolvedConfig {
        model: &cfgs.model,
        train: &cfgs.train,
        task: task_name(args.task),
        min_freq: args.min_freq,
    };
    write_file(
        &args.out.join("config.json"),
        &serde_json::to_string_pretty(&resolved)?,
    )?;
    let plan = make_folds(corpus.len(), args.folds, cfgs.train.seed)?;
    write_file(&args.out.join("folds.csv"), &plan.dump_csv())?;

    for outcome in &report.outcomes {
        match &outcome.result {
            Ok(run) => {
                let path = args
                    .out
                    .join(format!("run_{}_fold{}.csv", outcome.encoding, outcome.fold));
                write_file(&path, &run.to_csv())?;
            }
            Err(msg) => {
                eprintln!(
                    "warning: {} fold {} failed: {msg}",
                    outcome.encoding, outcome.fold
                );
            }
        }
    }
    write_file(&args.out.join("aggregate.csv"), &aggregate_csv(&report.summaries))?;
    for s in &report.summaries {
        let flag = if s.failed_folds > 0 {
            format!("  [partial: {} failed folds]", s.failed_folds)
        } else {
            String::new()
        };
        println!(
            "{}: train {:.4}±{:.4}  val {:.4}±{:.4}  bleu {:.2}±{:.2}  best {:.2}±{:.2}{flag}",
            s.encoding,
            s.final_train_loss.mean,
            s.final_train_loss.std,
            s.final_val_loss.mean,
            s.final_val_loss.std,
            s.final_bleu.mean,
            s.final_bleu.std,
            s.best_bleu.mean,
            s.best_bleu.std,
        );
    }
    println!("wrote per-fold CSVs and aggregate.csv under {}", args.out.display());
    Ok(())
}

fn analyze(cmd: AnalyzeCommand) -> anyhow::Result<()> {
    match cmd {
        AnalyzeCommand::Histogram(args) => {
            let kind = parse_encoding(&args.encoding)?;
            let hist = analysis::output_histogram(kind, args.d_model, args.len, args.bins)?;
            write_file(&args.out, &hist.to_csv())?;
            println!(
                "{kind}: {} occupied bins of {}, uniformity ratio {}",
                hist.occupied_bins(),
                args.bins,
                hist.uniformity_ratio
            );
            println!("wrote {}", args.out.display());
        }
        AnalyzeCommand::Shift(args) => {
            let kind = parse_encoding(&args.encoding)?;
            let stats = analysis::shift_invariance_profile(
                kind,
                args.d_k,
                args.positions,
                args.max_shift,
                args.trials,
                args.seed,
            )?;
            write_file(&args.out, &analysis::shift_profile_csv(&stats))?;
            let worst = stats.iter().map(|s| s.max_deviation).fold(0.0, f64::max);
            println!("{kind}: worst |e(m,n) − e(m+s,n+s)| over shifts = {worst:e}");
            println!("wrote {}", args.out.display());
        }
        AnalyzeCommand::Slope(args) => {
            let kind = parse_encoding(&args.encoding)?;
            let profile = analysis::slope_profile(kind, args.grid_points)?;
            write_file(&args.out, &profile.to_csv())?;
            println!(
                "{kind}: {} slope samples, {} skipped near breakpoints",
                profile.entries.len(),
                profile.skipped
            );
            println!("wrote {}", args.out.display());
        }
    }
    Ok(())
}

fn translate(args: TranslateArgs) -> anyhow::Result<()> {
    let (state, src_vocab, tgt_vocab) = checkpoint::load::<f64>(&args.checkpoint)?;
    let tokens = data::tokenize(&args.text);
    let encoded = src_vocab.encode_sequence(&tokens);
    let decoded = state.greedy_decode(&encoded, args.max_steps)?;
    println!("{}", data::detokenize(&tgt_vocab.decode(&decoded)));
    Ok(())
}
