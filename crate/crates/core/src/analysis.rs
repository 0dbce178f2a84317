//! Forgetting metrics and diagnostics: the accuracy matrix and its average,
//! per-example loss drift on past tasks, per-layer hidden-state drift, and
//! the rank sweep. Everything here is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::scalar::Scalar;
use crate::tasks::{format_instruction, InstructionExample, TaskSpec, Tokenizer};
use crate::tensor::kernels;
use crate::trainer::{self, AccessTrace, EpochLog, HostShape, TrainConfig};

/// Accuracy bookkeeping for one continual run. `acc[j][i]` is the test
/// accuracy on task i after training task j (rows grow by one entry per
/// task, so the matrix is lower-triangular).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub lambda1: f64,
    pub lambda1_schedule: Option<Vec<f64>>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    pub host: HostShape,
    pub task_names: Vec<String>,
    pub acc: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    /// Percent with one decimal, the convention accuracy tables use.
    pub average_accuracy_percent: String,
    /// Total orthogonality loss across stacks measured at each task's end.
    pub per_task_orth_loss: Vec<f64>,
    pub train_log: Vec<EpochLog>,
    /// `train_access[during][source]`: training examples drawn from task
    /// `source` while task `during` was being trained. Off-diagonal entries
    /// would be replay.
    pub train_access: Vec<Vec<usize>>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        tasks: &[TaskSpec],
        host: HostShape,
        cfg: &TrainConfig,
        acc: Vec<Vec<f64>>,
        aa: f64,
        per_task_orth_loss: Vec<f64>,
        train_log: &[EpochLog],
        trace: &AccessTrace,
    ) -> RunReport {
        RunReport {
            strategy: cfg.strategy.to_string(),
            lambda1: cfg.lambda1,
            lambda1_schedule: cfg.lambda1_schedule.clone(),
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            rank: cfg.rank,
            seed: cfg.seed,
            host,
            task_names: tasks.iter().map(|t| t.name.clone()).collect(),
            acc,
            average_accuracy: aa,
            average_accuracy_percent: format_percent(aa),
            per_task_orth_loss,
            train_log: train_log.to_vec(),
            train_access: trace.train_counts(tasks.len()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Lower-triangular accuracy matrix as CSV; blank cells above the
    /// diagonal, average accuracy on a trailing row.
    pub fn acc_csv(&self) -> String {
        let t = self.task_names.len();
        let mut out = String::from("after_task");
        for name in &self.task_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (j, row) in self.acc.iter().enumerate() {
            out.push_str(&self.task_names[j]);
            for i in 0..t {
                out.push(',');
                if let Some(v) = row.get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("average_accuracy,{}\n", self.average_accuracy));
        out
    }
}

/// Accuracy-table convention: percent with one decimal (0.758 → "75.8").
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// One CSV row per (task, epoch): task_id, epoch, nll, orth_loss, total.
pub fn train_log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("task_id,epoch,nll,orth_loss,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task_id, r.epoch, r.nll, r.orth_loss, r.total
        ));
    }
    out
}

/// Mean of the final accuracy column: (1/T) Σᵢ a_{i,T}. `acc` is in the
/// rows-after-task layout of [`RunReport::acc`].
pub fn average_accuracy(acc: &[Vec<f64>], t: usize) -> Result<f64> {
    if t == 0 || acc.len() < t {
        return Err(Error::Data(format!(
            "accuracy matrix has {} rows, need {t}",
            acc.len()
        )));
    }
    let last = &acc[t - 1];
    if last.len() != t {
        return Err(Error::Data(format!(
            "final accuracy row has {} entries, need {t}",
            last.len()
        )));
    }
    // Divide before summing: keeps hand-computable decimal means (e.g.
    // mean(0.85, 0.65, 0.60) = 0.70) exact at f64.
    Ok(last.iter().map(|a| a / t as f64).sum())
}

// ── loss drift (past-task loss change) ──────────────────────────────────

pub const DRIFT_BIN_WIDTH: f64 = 0.1;
pub const DRIFT_RANGE: (f64, f64) = (-2.0, 2.0);

/// Histogram over [−2, 2] with 0.1-wide bins plus one overflow bin at each
/// end (42 counts total).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftHistogram {
    pub counts: Vec<usize>,
}

impl DriftHistogram {
    pub fn n_bins() -> usize {
        let span = DRIFT_RANGE.1 - DRIFT_RANGE.0;
        (span / DRIFT_BIN_WIDTH).round() as usize + 2
    }

    pub fn from_deltas(deltas: &[f64]) -> DriftHistogram {
        let interior = Self::n_bins() - 2;
        let mut counts = vec![0usize; Self::n_bins()];
        for &d in deltas {
            let idx = if d < DRIFT_RANGE.0 {
                0
            } else if d >= DRIFT_RANGE.1 {
                Self::n_bins() - 1
            } else {
                1 + (((d - DRIFT_RANGE.0) / DRIFT_BIN_WIDTH) as usize).min(interior - 1)
            };
            counts[idx] += 1;
        }
        DriftHistogram { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDrift {
    /// loss_after − loss_before per example, in example order.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub histogram: DriftHistogram,
}

fn example_nll<S: Scalar>(
    weights: &ModelWeights<S>,
    tokenizer: &Tokenizer,
    ex: &InstructionExample,
    vocab: &crate::tasks::AnswerVocab,
) -> Result<f64> {
    let prompt = format_instruction(ex)?;
    let tokens = tokenizer.encode(&prompt, weights.config.max_seq_len);
    let target = vocab
        .index_of(&ex.answer)
        .ok_or_else(|| Error::Data(format!("answer `{}` not in answer vocab", ex.answer)))?;
    let logits = weights.forward(&tokens)?;
    let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    Ok(kernels::log_sum_exp(&row) - row[target])
}

/// Per-example change in prediction loss between two snapshots of the same
/// architecture, over past-task examples.
pub fn loss_drift<S: Scalar>(
    model_before: &ModelWeights<S>,
    model_after: &ModelWeights<S>,
    tokenizer: &Tokenizer,
    vocab: &crate::tasks::AnswerVocab,
    past_examples: &[InstructionExample],
) -> Result<LossDrift> {
    if model_before.config != model_after.config {
        return Err(Error::Config(
            "loss_drift needs models sharing tokenizer and head (config mismatch)".into(),
        ));
    }
    let mut deltas = Vec::with_capacity(past_examples.len());
    for ex in past_examples {
        let before = example_nll(model_before, tokenizer, ex, vocab)?;
        let after = example_nll(model_after, tokenizer, ex, vocab)?;
        deltas.push(after - before);
    }
    let mean_delta = if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().sum::<f64>() / deltas.len() as f64
    };
    let histogram = DriftHistogram::from_deltas(&deltas);
    Ok(LossDrift {
        deltas,
        mean_delta,
        histogram,
    })
}

// ── hidden-state drift ──────────────────────────────────────────────────

/// Per layer ℓ: mean over examples of ‖h_after − h_before‖₂ / ‖h_before‖₂
/// on the post-block hidden states.
pub fn hidden_state_drift<S: Scalar>(
    model_before: &ModelWeights<S>,
    model_after: &ModelWeights<S>,
    tokenizer: &Tokenizer,
    past_examples: &[InstructionExample],
) -> Result<Vec<f64>> {
    if model_before.config != model_after.config {
        return Err(Error::Config(
            "hidden_state_drift needs identical architectures (config mismatch)".into(),
        ));
    }
    let n_layers = model_before.config.n_layers;
    let mut sums = vec![0.0f64; n_layers];
    for ex in past_examples {
        let prompt = format_instruction(ex)?;
        let tokens = tokenizer.encode(&prompt, model_before.config.max_seq_len);
        let (before, _) = model_before.capture_hidden_states(&tokens)?;
        let (after, _) = model_after.capture_hidden_states(&tokens)?;
        for l in 0..n_layers {
            let b = before[l].data();
            let a = after[l].data();
            let mut diff_sq = 0.0f64;
            let mut base_sq = 0.0f64;
            for (x, y) in b.iter().zip(a) {
                let (x, y) = (x.as_f64(), y.as_f64());
                diff_sq += (y - x) * (y - x);
                base_sq += x * x;
            }
            if base_sq > 0.0 {
                sums[l] += diff_sq.sqrt() / base_sq.sqrt();
            }
        }
    }
    let n = past_examples.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

pub fn drift_csv(loss: &LossDrift, hidden: &[f64]) -> String {
    let mut out = String::from("metric,index,value\n");
    out.push_str(&format!("mean_loss_delta,,{}\n", loss.mean_delta));
    for (i, c) in loss.histogram.counts.iter().enumerate() {
        out.push_str(&format!("loss_delta_bin,{i},{c}\n"));
    }
    for (l, d) in hidden.iter().enumerate() {
        out.push_str(&format!("hidden_drift_layer,{l},{d}\n"));
    }
    out
}

// ── rank sweep ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub rank: usize,
    /// Average accuracy per order (one continual run per seed).
    pub aa_per_order: Vec<f64>,
    pub mean_aa: f64,
    /// Population std across orders; absent with a single order.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepTable {
    pub ranks: Vec<usize>,
    pub order_seeds: Vec<u64>,
    pub rows: Vec<RankSweepRow>,
}

/// The grid the rank study uses.
pub const DEFAULT_RANK_GRID: [usize; 4] = [2, 4, 8, 16];

/// One continual run per (rank, order seed); tabulates average accuracy and
/// its spread across orders.
pub fn rank_sweep<S: Scalar>(
    suite: &[TaskSpec],
    host: HostShape,
    cfg_base: &TrainConfig,
    ranks: &[usize],
    order_seeds: &[u64],
) -> Result<RankSweepTable> {
    if ranks.is_empty() {
        return Err(Error::Argument("rank sweep needs a non-empty rank list".into()));
    }
    if order_seeds.is_empty() {
        return Err(Error::Argument("rank sweep needs at least one order seed".into()));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut aa_per_order = Vec::with_capacity(order_seeds.len());
        for &seed in order_seeds {
            let cfg = TrainConfig {
                rank,
                seed,
                ..cfg_base.clone()
            };
            let outcome = trainer::continual_train::<S>(suite, host, &cfg)?;
            aa_per_order.push(outcome.report.average_accuracy);
        }
        let mean_aa = aa_per_order.iter().sum::<f64>() / aa_per_order.len() as f64;
        let std = if aa_per_order.len() > 1 {
            let var = aa_per_order
                .iter()
                .map(|a| (a - mean_aa) * (a - mean_aa))
                .sum::<f64>()
                / aa_per_order.len() as f64;
            Some(var.sqrt())
        } else {
            None
        };
        rows.push(RankSweepRow {
            rank,
            aa_per_order,
            mean_aa,
            std,
        });
    }
    Ok(RankSweepTable {
        ranks: ranks.to_vec(),
        order_seeds: order_seeds.to_vec(),
        rows,
    })
}

pub fn sweep_csv(table: &RankSweepTable) -> String {
    let mut out = String::from("rank");
    for (i, _) in table.order_seeds.iter().enumerate() {
        out.push_str(&format!(",order{i}"));
    }
    out.push_str(",mean,std\n");
    for row in &table.rows {
        out.push_str(&row.rank.to_string());
        for aa in &row.aa_per_order {
            out.push_str(&format!(",{aa}"));
        }
        out.push_str(&format!(",{}", row.mean_aa));
        match row.std {
            Some(s) => out.push_str(&format!(",{s}\n")),
            None => out.push_str(",\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_accuracy_constant_case() {
        let acc = vec![vec![0.8], vec![0.8, 0.8], vec![0.8, 0.8, 0.8]];
        assert_eq!(average_accuracy(&acc, 3).unwrap(), 0.8);
    }

    #[test]
    fn average_accuracy_hand_case() {
        let acc = vec![vec![0.9], vec![0.9, 0.7], vec![0.85, 0.65, 0.60]];
        let aa = average_accuracy(&acc, 3).unwrap();
        assert_eq!(aa, 0.70);
    }

    #[test]
    fn average_accuracy_missing_entries_is_data_error() {
        let acc = vec![vec![0.9], vec![0.9, 0.7]];
        assert!(matches!(average_accuracy(&acc, 3).unwrap_err(), Error::Data(_)));
        let bad_row = vec![vec![0.9], vec![0.9]];
        assert!(matches!(average_accuracy(&bad_row, 2).unwrap_err(), Error::Data(_)));
    }

    #[test]
    fn average_accuracy_is_permutation_invariant() {
        let base = vec![0.85, 0.65, 0.60];
        let perm = vec![0.60, 0.85, 0.65];
        let a = vec![vec![0.0], vec![0.0, 0.0], base];
        let b = vec![vec![0.0], vec![0.0, 0.0], perm];
        assert_eq!(
            average_accuracy(&a, 3).unwrap(),
            average_accuracy(&b, 3).unwrap()
        );
    }

    #[test]
    fn percent_formatting_mirrors_accuracy_tables() {
        assert_eq!(format_percent(0.758), "75.8");
        assert_eq!(format_percent(0.70), "70.0");
    }

    #[test]
    fn histogram_bins_sum_to_count_and_catch_overflow() {
        let deltas = vec![-5.0, -1.95, 0.0, 0.05, 1.99, 7.0];
        let h = DriftHistogram::from_deltas(&deltas);
        assert_eq!(h.total(), deltas.len());
        assert_eq!(h.counts[0], 1, "left overflow");
        assert_eq!(*h.counts.last().unwrap(), 1, "right overflow");
        assert_eq!(h.counts.len(), DriftHistogram::n_bins());
        assert_eq!(DriftHistogram::n_bins(), 42);
    }
}
