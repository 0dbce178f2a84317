//! The continual-learning loop: per-task optimization of cross-entropy plus
//! the λ₁-weighted orthogonality loss, the freezing protocol between tasks,
//! the baseline strategies, evaluation, and checkpoint persistence.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::RunReport;
use crate::error::{Error, Result};
use crate::model::{BindMode, ModelConfig, ModelWeights};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::tasks::{format_instruction, AnswerVocab, TaskSpec, Tokenizer};
use crate::tensor::tape::Tape;

/// How parameters are allocated and trained across the task sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// New adapter per task, past adapters frozen, orthogonality penalty on.
    Olora,
    /// New adapter per task, past adapters frozen, no penalty (λ₁ = 0).
    IncLora,
    /// One fixed adapter trained across every task.
    SeqLora,
    /// Full fine-tuning of all base weights, no adapters.
    SeqFt,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Olora => "olora",
            Strategy::IncLora => "inclora",
            Strategy::SeqLora => "seqlora",
            Strategy::SeqFt => "seqft",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "olora" => Ok(Strategy::Olora),
            "inclora" | "inc_lora" => Ok(Strategy::IncLora),
            "seqlora" | "seq_lora" => Ok(Strategy::SeqLora),
            "seqft" | "seq_ft" => Ok(Strategy::SeqFt),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected olora, inclora, seqlora, or seqft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Orthogonality-loss weight.
    pub lambda1: f64,
    /// Optional per-task override of `lambda1`; entries beyond the list
    /// fall back to the global value.
    pub lambda1_schedule: Option<Vec<f64>>,
    pub lr: f64,
    /// Heavy-ball momentum coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.5,
            lambda1_schedule: None,
            lr: 1e-3,
            momentum: 0.0,
            epochs: 1,
            batch_size: 8,
            rank: 4,
            seed: 0,
            strategy: Strategy::Olora,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda1 must be non-negative, got {}",
                self.lambda1
            )));
        }
        if let Some(sched) = &self.lambda1_schedule {
            if sched.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::Config("lambda1 schedule entries must be non-negative".into()));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Effective λ₁ for a task. The incremental and baseline strategies run
    /// with the penalty off.
    pub fn lambda_for(&self, task_idx: usize) -> f64 {
        match self.strategy {
            Strategy::Olora => self
                .lambda1_schedule
                .as_ref()
                .and_then(|s| s.get(task_idx).copied())
                .unwrap_or(self.lambda1),
            Strategy::IncLora | Strategy::SeqLora | Strategy::SeqFt => 0.0,
        }
    }
}

/// Host transformer dimensions (the data decides vocab and head size).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for HostShape {
    fn default() -> Self {
        HostShape {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
        }
    }
}

// ── data-access instrumentation ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    /// Task currently being trained when the access happened.
    pub during_task: usize,
    /// Task the accessed example belongs to.
    pub source_task: usize,
    pub split: Split,
    pub example: usize,
}

/// Every example handed to training or evaluation, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub records: Vec<AccessRecord>,
}

impl AccessTrace {
    /// Train-split accesses to a task other than the one being trained.
    pub fn replay_violations(&self) -> Vec<AccessRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train && r.source_task != r.during_task)
            .copied()
            .collect()
    }

    /// (during × source) train-access counts, for the report.
    pub fn train_counts(&self, n_tasks: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; n_tasks]; n_tasks];
        for r in &self.records {
            if r.split == Split::Train {
                counts[r.during_task][r.source_task] += 1;
            }
        }
        counts
    }
}

// ── training logs ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task_id: usize,
    pub epoch: usize,
    pub nll: f64,
    pub orth_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub task_id: usize,
    pub epoch: usize,
    pub size: usize,
    pub nll: f64,
    pub orth_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskTrainLog {
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchRecord>,
}

// ── encoding ────────────────────────────────────────────────────────────

/// Prompt tokens plus global answer index for one example.
fn encode_example(
    tokenizer: &Tokenizer,
    vocab: &AnswerVocab,
    max_seq_len: usize,
    ex: &crate::tasks::InstructionExample,
) -> Result<(Vec<usize>, usize)> {
    let prompt = format_instruction(ex)?;
    let tokens = tokenizer.encode(&prompt, max_seq_len);
    let target = vocab.index_of(&ex.answer).ok_or_else(|| {
        Error::Data(format!("answer `{}` missing from global answer vocab", ex.answer))
    })?;
    Ok((tokens, target))
}

pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ── train_task ──────────────────────────────────────────────────────────

/// Mini-batch gradient descent on cross-entropy + λ₁·orth for one task.
/// Only leaves the bind mode marks trainable move; for adapter strategies
/// that is exactly the current task's A/B pairs.
pub fn train_task<S: Scalar>(
    weights: &mut ModelWeights<S>,
    tokenizer: &Tokenizer,
    task: &TaskSpec,
    task_idx: usize,
    cfg: &TrainConfig,
) -> Result<TaskTrainLog> {
    let mut trace = AccessTrace::default();
    train_task_traced(weights, tokenizer, task, task_idx, cfg, &mut trace)
}

fn train_task_traced<S: Scalar>(
    weights: &mut ModelWeights<S>,
    tokenizer: &Tokenizer,
    task: &TaskSpec,
    task_idx: usize,
    cfg: &TrainConfig,
    trace: &mut AccessTrace,
) -> Result<TaskTrainLog> {
    cfg.validate()?;
    let mode = match cfg.strategy {
        Strategy::SeqFt => BindMode::Full,
        _ => BindMode::Adapters,
    };
    if mode == BindMode::Adapters && weights.trainable_adapter_count() == 0 {
        return Err(Error::state(
            "no trainable adapter; call begin_task before train_task",
        ));
    }
    if task.examples_train.is_empty() {
        return Err(Error::Data(format!("task `{}` has no training examples", task.name)));
    }

    let lambda = cfg.lambda_for(task_idx);
    let lambda_s = S::from_f64(lambda);
    let lr = S::from_f64(cfg.lr);

    let encoded: Vec<(Vec<usize>, usize)> = task
        .examples_train
        .iter()
        .map(|ex| encode_example(tokenizer, &task.answer_vocab, weights.config.max_seq_len, ex))
        .collect::<Result<_>>()?;

    let mut log = TaskTrainLog::default();
    let n = encoded.len();
    // heavy-ball velocity per trainable leaf, in bind order (stable across
    // batches: the trainable set is fixed for the whole task)
    let mut velocity: Vec<Vec<S>> = Vec::new();
    let beta = S::from_f64(cfg.momentum);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_seed = derive_seed(cfg.seed, shuffle_stream(task_idx, epoch));
        order.shuffle(&mut rng_from(shuffle_seed));

        let mut nll_sum = 0.0;
        let mut orth_sum = 0.0;
        let mut total_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<S>::new();
            let bound = weights.bind(&mut tape, mode);
            let mut logit_rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                trace.records.push(AccessRecord {
                    during_task: task_idx,
                    source_task: task_idx,
                    split: Split::Train,
                    example: idx,
                });
                let (tokens, target) = &encoded[idx];
                let out = bound.forward_example(&mut tape, tokens)?;
                logit_rows.push(out.logits);
                targets.push(*target);
            }
            let batch_logits = tape.concat_rows(&logit_rows)?;
            let nll = tape.cross_entropy(batch_logits, &targets)?;
            let orth = bound.total_orth_loss(&mut tape)?;
            let weighted = tape.scale(orth, lambda_s);
            let total = tape.add(nll, weighted)?;

            let nll_v = tape.scalar_value(nll).as_f64();
            let orth_v = tape.scalar_value(orth).as_f64();
            let total_v = tape.scalar_value(total).as_f64();
            if !total_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at task {} epoch {} (nll {nll_v}, orth {orth_v}); aborting",
                    task_idx, epoch
                )));
            }

            tape.backward(total)?;
            if velocity.is_empty() {
                velocity = bound
                    .trainable
                    .iter()
                    .map(|&(path, _)| vec![S::zero(); weights.param(path).numel()])
                    .collect();
            }
            for (slot, &(path, id)) in bound.trainable.iter().enumerate() {
                if let Some(grad) = tape.grad(id) {
                    let vel = &mut velocity[slot];
                    let param = weights.param_mut(path);
                    for ((w, v), &g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = beta * *v + g;
                        *w = *w - lr * *v;
                    }
                }
            }

            let b = chunk.len() as f64;
            nll_sum += nll_v * b;
            orth_sum += orth_v * b;
            total_sum += total_v * b;
            log.batches.push(BatchRecord {
                task_id: task_idx,
                epoch,
                size: chunk.len(),
                nll: nll_v,
                orth_loss: orth_v,
                lambda,
                total: total_v,
            });
        }
        log.epochs.push(EpochLog {
            task_id: task_idx,
            epoch,
            nll: nll_sum / n as f64,
            orth_loss: orth_sum / n as f64,
            total: total_sum / n as f64,
        });
    }
    Ok(log)
}

// Shuffle stream tag; keeps the per-(task, epoch) orders independent.
fn shuffle_stream(task: usize, epoch: usize) -> u64 {
    0x5_0000_0000u64 | ((task as u64) << 16) | epoch as u64
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Exact-match accuracy: argmax over the global answer head (ties to the
/// lowest index), no task identity anywhere.
pub fn evaluate_task<S: Scalar>(
    weights: &ModelWeights<S>,
    tokenizer: &Tokenizer,
    task: &TaskSpec,
) -> Result<f64> {
    let mut trace = AccessTrace::default();
    evaluate_task_traced(weights, tokenizer, task, 0, 0, &mut trace)
}

fn evaluate_task_traced<S: Scalar>(
    weights: &ModelWeights<S>,
    tokenizer: &Tokenizer,
    task: &TaskSpec,
    source_task: usize,
    during_task: usize,
    trace: &mut AccessTrace,
) -> Result<f64> {
    if task.examples_test.is_empty() {
        return Err(Error::Data(format!("task `{}` has no test examples", task.name)));
    }
    let mut correct = 0usize;
    for (i, ex) in task.examples_test.iter().enumerate() {
        trace.records.push(AccessRecord {
            during_task,
            source_task,
            split: Split::Test,
            example: i,
        });
        let (tokens, target) =
            encode_example(tokenizer, &task.answer_vocab, weights.config.max_seq_len, ex)?;
        let logits = weights.forward(&tokens)?;
        if argmax(logits.data()) == target {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.examples_test.len() as f64)
}

// ── continual_train ─────────────────────────────────────────────────────

/// Everything a continual run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome<S: Scalar> {
    pub report: RunReport,
    pub weights: ModelWeights<S>,
    pub tokenizer: Tokenizer,
    pub answer_vocab: AnswerVocab,
    /// Weights snapshot after each task finished training.
    pub task_snapshots: Vec<ModelWeights<S>>,
    pub trace: AccessTrace,
    pub train_log: Vec<EpochLog>,
}

/// Train the task sequence in order. Per task: adapters are allocated per
/// strategy, only the current task's training split is ever handed to the
/// optimizer, accuracy is measured on every seen task's test split, and the
/// current adapter is frozen before the next task begins.
pub fn continual_train<S: Scalar>(
    tasks: &[TaskSpec],
    host: HostShape,
    cfg: &TrainConfig,
) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Argument("continual_train needs at least one task".into()));
    }
    let answer_vocab = tasks[0].answer_vocab.clone();
    for t in tasks {
        if t.answer_vocab != answer_vocab {
            return Err(Error::Config(format!(
                "task `{}` carries a different answer vocab; the global map must be shared",
                t.name
            )));
        }
    }
    let tokenizer = Tokenizer::build(tasks)?;
    let model_cfg = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: host.d_model,
        n_layers: host.n_layers,
        n_heads: host.n_heads,
        max_seq_len: host.max_seq_len,
        n_outputs: answer_vocab.len(),
    };
    let mut weights: ModelWeights<S> = ModelWeights::new(model_cfg, derive_seed(cfg.seed, 0xBA5E))?;

    let mut trace = AccessTrace::default();
    let mut train_log: Vec<EpochLog> = Vec::new();
    let mut acc_rows: Vec<Vec<f64>> = Vec::new();
    let mut per_task_orth: Vec<f64> = Vec::new();
    let mut snapshots: Vec<ModelWeights<S>> = Vec::new();

    for (t, task) in tasks.iter().enumerate() {
        match cfg.strategy {
            Strategy::Olora | Strategy::IncLora => {
                weights.begin_task(t, cfg.rank, derive_seed(cfg.seed, 0xAD00 + t as u64))?;
            }
            Strategy::SeqLora => {
                weights.begin_task_shared(cfg.rank, derive_seed(cfg.seed, 0xAD00))?;
            }
            Strategy::SeqFt => {}
        }

        let digest_before = weights.base_and_frozen_digest();
        let log = train_task_traced(&mut weights, &tokenizer, task, t, cfg, &mut trace)?;
        if cfg.strategy != Strategy::SeqFt {
            let digest_after = weights.base_and_frozen_digest();
            if digest_before != digest_after {
                return Err(Error::state(format!(
                    "frozen-weight digest changed during task {t}: training touched protected parameters"
                )));
            }
        }
        train_log.extend(log.epochs.iter().copied());

        // orthogonality of the just-trained adapter against all past ones
        let orth_now = match cfg.strategy {
            Strategy::Olora | Strategy::IncLora | Strategy::SeqLora => weights
                .stacks()
                .map(|s| s.total_orth_loss_value().map(|v| v.as_f64()))
                .sum::<Result<f64>>()?,
            Strategy::SeqFt => 0.0,
        };
        per_task_orth.push(orth_now);

        if cfg.strategy != Strategy::SeqLora {
            weights.freeze_all_adapters();
        }

        let mut row = Vec::with_capacity(t + 1);
        for (i, seen) in tasks.iter().take(t + 1).enumerate() {
            row.push(evaluate_task_traced(&weights, &tokenizer, seen, i, t, &mut trace)?);
        }
        acc_rows.push(row);
        snapshots.push(weights.clone());
    }
    weights.freeze_all_adapters();

    let aa = crate::analysis::average_accuracy(&acc_rows, tasks.len())?;
    let report = RunReport::assemble(tasks, host, cfg, acc_rows, aa, per_task_orth, &train_log, &trace);
    Ok(RunOutcome {
        report,
        weights,
        tokenizer,
        answer_vocab,
        task_snapshots: snapshots,
        trace,
        train_log,
    })
}

/// Merged model with empty stacks: identical predictions, base-sized
/// parameter count. Requires every adapter frozen.
pub fn merge_and_export<S: Scalar>(weights: &ModelWeights<S>) -> Result<ModelWeights<S>> {
    if weights.trainable_adapter_count() > 0 {
        return Err(Error::state(
            "cannot merge while a task is mid-training; freeze adapters first",
        ));
    }
    weights.merged()
}
