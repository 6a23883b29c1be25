//! Adam optimization with plateau LR decay and global-norm gradient
//! clipping; the epoch loop; k-fold cross-validation orchestration; and the
//! CSV report formats.
//!
//! Determinism contract: given (seed, config, corpus), repeated runs produce
//! byte-identical run CSVs. Every random choice is drawn from a ChaCha
//! stream derived from the run seed, and fold workers get independent
//! streams (`seed + fold_id`), so `--jobs` cannot change results.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_pairs, make_batches, Batch, ParallelCorpus, Vocab, PAD};
use crate::error::{Error, Result};
use crate::kernels::PeriodicKind;
use crate::metrics::{bleu4, cross_entropy, token_accuracy};
use crate::model::{decoder_input, decoder_targets, Mode, ModelConfig, ModelState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Plateau learning-rate decay knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Multiplier applied on decay.
    pub factor: f64,
    /// Consecutive non-improving epochs before a decay fires.
    pub patience: usize,
    /// Improvement below this margin does not reset the counter.
    pub min_delta: f64,
    /// Floor for the learning rate.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 10,
            min_delta: 1e-4,
            min_lr: 1e-9,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config(format!(
                "plateau factor must be in (0, 1), got {}",
                self.factor
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        Ok(())
    }
}

/// Validation-loss plateau tracker.
#[derive(Debug, Clone, Default)]
pub struct PlateauState {
    best: Option<f64>,
    stale: usize,
}

impl PlateauState {
    /// Feed one epoch's validation loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn observe(&mut self, val_loss: f64, lr: f64, cfg: &PlateauConfig) -> f64 {
        match self.best {
            None => {
                self.best = Some(val_loss);
                lr
            }
            Some(best) if val_loss < best - cfg.min_delta => {
                self.best = Some(val_loss);
                self.stale = 0;
                lr
            }
            Some(_) => {
                self.stale += 1;
                if self.stale >= cfg.patience {
                    self.stale = 0;
                    (lr * cfg.factor).max(cfg.min_lr)
                } else {
                    lr
                }
            }
        }
    }
}

/// Optimization hyperparameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau: PlateauConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-5,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            epochs: 30,
            batch_size: 64,
            plateau: PlateauConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: the reference optimizer settings except for a
    /// learning rate sized to converge within tens of epochs on tiny tasks.
    pub fn desk() -> Self {
        TrainConfig {
            lr_init: 2e-3,
            ..TrainConfig::default()
        }
    }

    /// Full-scale settings: lr 1e-5, weight decay 5e-4, batch 512,
    /// 1000 epochs.
    pub fn paper_base() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 512,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::config("lr_init must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        self.plateau.validate()
    }
}

/// One Adam update on a single parameter tensor (classic Adam with the L2
/// term added to the gradient). `t` is the 1-based step count.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grad.is_all_finite() {
        return Err(Error::numeric("adam_step", "non-finite gradient; step aborted"));
    }
    if grad.shape() != param.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    let b1 = T::from_f64_lossy(ADAM_BETA1);
    let b2 = T::from_f64_lossy(ADAM_BETA2);
    let eps = T::from_f64_lossy(ADAM_EPS);
    let lr_t = T::from_f64_lossy(lr);
    let wd = T::from_f64_lossy(weight_decay);
    let bc1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t as i32));
    let bc2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t as i32));
    let one = T::one();
    for (((w, &g0), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        let g = g0 + wd * *w;
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Global-norm clipping across every gradient tensor jointly. Returns the
/// pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64_lossy();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// Adam moment buffers, aligned with the model's parameter visit order.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(state: &ModelState<T>) -> Self {
        let mut m = Vec::new();
        state.visit_params(&mut |_, p| m.push(Tensor::zeros(p.shape().to_vec())));
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    /// Clip the gradient set, then apply one Adam step to every parameter.
    pub fn apply(
        &mut self,
        state: &mut ModelState<T>,
        mut grads: Vec<Tensor<T>>,
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<()> {
        for g in &grads {
            if !g.is_all_finite() {
                return Err(Error::numeric("adam_step", "non-finite gradient; step aborted"));
            }
        }
        clip_gradients(&mut grads, cfg.clip_norm);
        self.t += 1;
        let t = self.t;
        let mut idx = 0;
        let mut failure = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        state.visit_params_mut(&mut |_, param| {
            if failure.is_some() {
                return;
            }
            if let Err(e) = adam_step(
                param,
                &grads[idx],
                &mut ms[idx],
                &mut vs[idx],
                t,
                lr,
                cfg.weight_decay,
            ) {
                failure = Some(e);
            }
            idx += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Per-epoch metric row. `val_acc` is tracked for reporting but is not part
/// of the run CSV columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bleu: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Full per-epoch history of one (encoding, fold) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub encoding: PeriodicKind,
    pub fold_id: usize,
    pub rows: Vec<EpochRow>,
    pub best_val_bleu: f64,
}

impl RunReport {
    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("a run has at least one epoch")
    }

    /// `epoch,train_loss,val_loss,val_bleu,lr` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_bleu,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_bleu, r.lr
            ));
        }
        out
    }
}

/// Encoded train/val views plus the string references BLEU scores against.
pub struct DataSplit {
    pub train: Vec<(Vec<usize>, Vec<usize>)>,
    pub val: Vec<(Vec<usize>, Vec<usize>)>,
    pub val_refs: Vec<Vec<String>>,
}

/// Encode a train/val index split against fixed vocabularies.
pub fn prepare_split(
    corpus: &ParallelCorpus,
    train_idx: &[usize],
    val_idx: &[usize],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> DataSplit {
    DataSplit {
        train: encode_pairs(corpus, train_idx, src_vocab, tgt_vocab),
        val: encode_pairs(corpus, val_idx, src_vocab, tgt_vocab),
        val_refs: val_idx
            .iter()
            .map(|&i| corpus.pairs[i].1.clone())
            .collect(),
    }
}

fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
}

fn batch_loss<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tape<T>, crate::tape::Var, Vec<crate::tape::Var>, Vec<usize>)> {
    let (dec_in, dec_pad) = decoder_input(&batch.tgt, &batch.tgt_pad_mask);
    let targets = decoder_targets(&batch.tgt);
    let mut tape = Tape::new();
    let (logits, params) = state.forward(
        &mut tape,
        &batch.src,
        &batch.src_pad_mask,
        &dec_in,
        &dec_pad,
        mode,
        rng,
    )?;
    let loss = tape.cross_entropy_with_ignore(logits, &targets, PAD)?;
    Ok((tape, loss, params.vars, targets))
}

/// Validation pass: token-weighted loss, token accuracy, and greedy BLEU.
/// `decode_cap` bounds greedy generation length.
fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    val_batches: &[Batch],
    val_srcs: &[Vec<usize>],
    val_refs: &[Vec<String>],
    tgt_vocab: &Vocab,
    decode_cap: usize,
) -> Result<(f64, f64, f64)> {
    let mut nll = 0.0f64;
    let mut hits = 0.0f64;
    let mut tokens = 0usize;
    for batch in val_batches {
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
        let lv = tape.value(logits);
        let count = targets.iter().filter(|&&t| t != PAD).count();
        nll += cross_entropy(lv, &targets, PAD)? * count as f64;
        hits += token_accuracy(lv, &targets, PAD)? * count as f64;
        tokens += count;
    }
    let val_loss = nll / tokens as f64;
    let val_acc = hits / tokens as f64;

    // greedy decoding in bounded chunks
    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(val_srcs.len());
    for chunk in val_srcs.chunks(256) {
        for decoded in state.greedy_decode_batch(chunk, decode_cap)? {
            hyps.push(tgt_vocab.decode(&decoded));
        }
    }
    let bleu = bleu4(&hyps, val_refs)?.bleu4;
    Ok((val_loss, val_acc, bleu))
}

/// Train `state` in place on a prepared split, logging one row per epoch.
pub fn train_run<T: Scalar>(
    state: &mut ModelState<T>,
    split: &DataSplit,
    tgt_vocab: &Vocab,
    cfg: &TrainConfig,
    fold_id: usize,
) -> Result<RunReport> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::data("training and validation splits must be non-empty"));
    }
    let max_len = state.config.max_len;
    let val_batches = make_batches(&split.val, cfg.batch_size, epoch_seed(cfg.seed, 0), max_len)?;
    let val_srcs: Vec<Vec<usize>> = split.val.iter().map(|(s, _)| s.clone()).collect();
    // generation budget: longest validation target plus a small margin
    let decode_cap = split
        .val
        .iter()
        .map(|(_, t)| t.len())
        .max()
        .unwrap_or(8)
        .saturating_add(6)
        .min(max_len);

    let mut adam = AdamState::new(state);
    let mut plateau = PlateauState::default();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD80_57E0);
    let mut lr = cfg.lr_init;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best_val_bleu = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&split.train, cfg.batch_size, epoch_seed(cfg.seed, epoch), max_len)?;
        let mut nll = 0.0f64;
        let mut tokens = 0usize;
        for batch in &batches {
            let (mut tape, loss, param_vars, targets) =
                batch_loss(state, batch, Mode::Train, Some(&mut dropout_rng))?;
            let count = targets.iter().filter(|&&t| t != PAD).count();
            nll += tape.value(loss).data()[0].to_f64_lossy() * count as f64;
            tokens += count;
            tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = param_vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
                })
                .collect();
            adam.apply(state, grads, cfg, lr)?;
        }
        let train_loss = nll / tokens as f64;
        let (val_loss, val_acc, val_bleu) = evaluate(
            state,
            &val_batches,
            &val_srcs,
            &split.val_refs,
            tgt_vocab,
            decode_cap,
        )?;
        best_val_bleu = best_val_bleu.max(val_bleu);
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_bleu,
            val_acc,
            lr,
        });
        lr = plateau.observe(val_loss, lr, &cfg.plateau);
    }
    Ok(RunReport {
        encoding: state.config.encoding,
        fold_id,
        rows,
        best_val_bleu,
    })
}

/// Mean ± standard deviation pair (population standard deviation, so a
/// single fold reports 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Cross-fold aggregate for one encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSummary {
    pub encoding: PeriodicKind,
    pub final_train_loss: MeanStd,
    pub final_val_loss: MeanStd,
    pub final_bleu: MeanStd,
    pub best_bleu: MeanStd,
    /// Folds that aborted; a nonzero value marks the aggregate as partial.
    pub failed_folds: usize,
}

/// Aggregate successful fold reports into one summary row.
pub fn summarize_folds(
    encoding: PeriodicKind,
    reports: &[&RunReport],
    failed_folds: usize,
) -> Result<EncodingSummary> {
    if reports.is_empty() {
        return Err(Error::data(format!(
            "encoding {encoding}: every fold failed; nothing to aggregate"
        )));
    }
    let finals: Vec<&EpochRow> = reports.iter().map(|r| r.final_row()).collect();
    Ok(EncodingSummary {
        encoding,
        final_train_loss: mean_std(&finals.iter().map(|r| r.train_loss).collect::<Vec<_>>()),
        final_val_loss: mean_std(&finals.iter().map(|r| r.val_loss).collect::<Vec<_>>()),
        final_bleu: mean_std(&finals.iter().map(|r| r.val_bleu).collect::<Vec<_>>()),
        best_bleu: mean_std(&reports.iter().map(|r| r.best_val_bleu).collect::<Vec<_>>()),
        failed_folds,
    })
}

/// Render the aggregate CSV across encodings.
pub fn aggregate_csv(summaries: &[EncodingSummary]) -> String {
    let mut out = String::from(
        "encoding,final_train_loss_mean,final_train_loss_std,final_val_loss_mean,final_val_loss_std,final_bleu_mean,final_bleu_std,best_bleu_mean,best_bleu_std\n",
    );
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.encoding,
            s.final_train_loss.mean,
            s.final_train_loss.std,
            s.final_val_loss.mean,
            s.final_val_loss.std,
            s.final_bleu.mean,
            s.final_bleu.std,
            s.best_bleu.mean,
            s.best_bleu.std,
        ));
    }
    out
}

/// One fold's outcome inside a cross-validation run.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub encoding: PeriodicKind,
    pub fold: usize,
    pub result: std::result::Result<RunReport, String>,
}

/// Cross-validation results: every fold outcome plus per-encoding summaries.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub outcomes: Vec<FoldOutcome>,
    pub summaries: Vec<EncodingSummary>,
}

/// Everything a cross-validation run needs.
pub struct CvSpec<'a> {
    pub corpus: &'a ParallelCorpus,
    pub encodings: Vec<PeriodicKind>,
    pub n_folds: usize,
    /// Template model configuration; encoding and vocabulary sizes are
    /// filled in per run.
    pub base_model: ModelConfig,
    pub train: TrainConfig,
    /// Vocabulary frequency cutoff.
    pub min_freq: u64,
    /// Worker threads (1 keeps everything on the caller's thread).
    pub jobs: usize,
}

/// Run `encodings × folds` training runs. Vocabularies are built once from
/// the full corpus; each fold trains a fresh model seeded `seed + fold_id`
/// and validates on the held-out fold. A fold that aborts is recorded as
/// failed and the sweep continues.
pub fn run_cv(spec: &CvSpec) -> Result<CvReport> {
    spec.train.validate()?;
    if spec.encodings.is_empty() {
        return Err(Error::config("cv needs at least one encoding"));
    }
    let src_vocab = Vocab::build(spec.corpus.source_sequences(), spec.min_freq)?;
    let tgt_vocab = Vocab::build(spec.corpus.target_sequences(), spec.min_freq)?;
    let plan = crate::data::make_folds(spec.corpus.len(), spec.n_folds, spec.train.seed)?;

    struct Task {
        encoding: PeriodicKind,
        fold: usize,
    }
    let tasks: Vec<Task> = spec
        .encodings
        .iter()
        .flat_map(|&encoding| (0..spec.n_folds).map(move |fold| Task { encoding, fold }))
        .collect();

    let run_task = |task: &Task| -> std::result::Result<RunReport, String> {
        let mut model_cfg = spec.base_model;
        model_cfg.encoding = task.encoding;
        model_cfg.src_vocab_size = src_vocab.len();
        model_cfg.tgt_vocab_size = tgt_vocab.len();
        let split = prepare_split(
            spec.corpus,
            &plan.train_indices(task.fold),
            plan.fold(task.fold),
            &src_vocab,
            &tgt_vocab,
        );
        let mut train_cfg = spec.train;
        train_cfg.seed = spec.train.seed + task.fold as u64;
        let mut state = ModelState::<f64>::init(model_cfg, train_cfg.seed)
            .map_err(|e| e.to_string())?;
        train_run(&mut state, &split, &tgt_vocab, &train_cfg, task.fold)
            .map_err(|e| e.to_string())
    };

    let jobs = spec.jobs.max(1);
    let results: Vec<std::result::Result<RunReport, String>> = if jobs == 1 {
        tasks.iter().map(run_task).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<std::result::Result<RunReport, String>>>> =
            tasks.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let outcome = run_task(&tasks[i]);
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("task completed"))
            .collect()
    };

    let outcomes: Vec<FoldOutcome> = tasks
        .iter()
        .zip(results)
        .map(|(t, result)| FoldOutcome {
            encoding: t.encoding,
            fold: t.fold,
            result,
        })
        .collect();

    let mut summaries = Vec::new();
    for &encoding in &spec.encodings {
        let ok: Vec<&RunReport> = outcomes
            .iter()
            .filter(|o| o.encoding == encoding)
            .filter_map(|o| o.result.as_ref().ok())
            .collect();
        let failed = spec.n_folds - ok.len();
        summaries.push(summarize_folds(encoding, &ok, failed)?);
    }
    Ok(CvReport {
        outcomes,
        summaries,
    })
}
