//! Synthetic interference suite for desk-scale forgetting experiments.
//!
//! Task t asks whether its marker token appears in the text. All tasks share
//! the filler vocabulary, and every task's marker also shows up in other
//! tasks' texts as an uncorrelated distractor, so sequential training on one
//! task reshapes representations the others depend on. Label sets are
//! disjoint across tasks, and each task is linearly separable from
//! bag-of-words counts (a probe oracle checks this in the tests).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tasks::{AnswerVocab, InstructionExample, TaskSpec};

const FILLERS: [&str; 24] = [
    "the", "a", "one", "some", "item", "note", "list", "entry", "from", "with", "about", "into",
    "over", "under", "report", "record", "value", "field", "line", "page", "case", "form", "part",
    "set",
];

fn marker(task: usize) -> String {
    format!("key{task}")
}

fn positive_label(task: usize) -> String {
    format!("present{task}")
}

fn negative_label(task: usize) -> String {
    format!("absent{task}")
}

fn gen_text(task: usize, n_tasks: usize, positive: bool, rng: &mut ChaCha8Rng) -> String {
    let len = 8 + rng.random_range(0..5);
    let mut words: Vec<String> = (0..len)
        .map(|_| FILLERS[rng.random_range(0..FILLERS.len())].to_string())
        .collect();
    if positive {
        let copies = 1 + rng.random_range(0..2);
        for _ in 0..copies {
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, marker(task));
        }
    }
    // uncorrelated distractors: other tasks' markers, label-independent
    for other in 0..n_tasks {
        if other == task {
            continue;
        }
        if rng.random_range(0..2) == 0 {
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, marker(other));
        }
    }
    words.join(" ")
}

fn gen_split(
    task: usize,
    n_tasks: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
    exclude: &std::collections::HashSet<String>,
) -> Vec<InstructionExample> {
    let definition = format!("decide whether the token {} appears in the text", marker(task));
    let options = vec![positive_label(task), negative_label(task)];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let mut text = gen_text(task, n_tasks, positive, rng);
        while exclude.contains(&text) {
            text = gen_text(task, n_tasks, positive, rng);
        }
        out.push(InstructionExample {
            task_definition: definition.clone(),
            options: options.clone(),
            text,
            answer: if positive {
                positive_label(task)
            } else {
                negative_label(task)
            },
        });
    }
    out
}

/// Generate `n_tasks` marker-detection tasks with `n_per_task` train
/// examples each (test split is a quarter, at least 20). Deterministic in
/// (n_tasks, n_per_task, seed).
pub fn gen_synthetic_suite(n_tasks: usize, n_per_task: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n_tasks < 2 {
        return Err(Error::Argument(format!(
            "synthetic suite needs at least 2 tasks, got {n_tasks}"
        )));
    }
    let n_test = (n_per_task / 4).max(20);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut rng = rng_from(derive_seed(seed, 0x5u64 << 32 | t as u64));
        let train = gen_split(t, n_tasks, n_per_task, &mut rng, &Default::default());
        let train_texts = train.iter().map(|e| e.text.clone()).collect();
        let test = gen_split(t, n_tasks, n_test, &mut rng, &train_texts);
        tasks.push(TaskSpec {
            name: format!("task{t}"),
            examples_train: train,
            examples_test: test,
            answer_vocab: AnswerVocab::default(),
        });
    }
    let vocab = AnswerVocab::union_of(&tasks)?;
    for t in &mut tasks {
        t.answer_vocab = vocab.clone();
        t.validate()?;
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn label_sets_are_pairwise_disjoint() {
        let tasks = gen_synthetic_suite(4, 40, 3).unwrap();
        let mut seen: HashSet<String> = HashSet::new();
        for t in &tasks {
            let opts = &t.examples_train[0].options;
            for o in opts {
                assert!(seen.insert(o.clone()), "label {o} reused across tasks");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_suite() {
        let a = gen_synthetic_suite(3, 30, 11).unwrap();
        let b = gen_synthetic_suite(3, 30, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_suite(3, 30, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_single_task() {
        assert!(matches!(
            gen_synthetic_suite(1, 10, 0).unwrap_err(),
            Error::Argument(_)
        ));
    }

    /// Least-squares probe on bag-of-words counts: an implementation-free
    /// check that task 1 is learnable.
    #[test]
    fn linear_probe_solves_task_one() {
        let tasks = gen_synthetic_suite(3, 200, 5).unwrap();
        let task = &tasks[0];

        // vocabulary over the task's texts
        let mut vocab: HashMap<String, usize> = HashMap::new();
        for ex in task.examples_train.iter().chain(&task.examples_test) {
            for w in ex.text.split_whitespace() {
                let next = vocab.len();
                vocab.entry(w.to_string()).or_insert(next);
            }
        }
        let dim = vocab.len() + 1; // + bias
        let featurize = |ex: &InstructionExample| {
            let mut f = vec![0.0f64; dim];
            f[dim - 1] = 1.0;
            for w in ex.text.split_whitespace() {
                if let Some(&i) = vocab.get(w) {
                    f[i] += 1.0;
                }
            }
            f
        };
        let label = |ex: &InstructionExample| {
            if ex.answer.starts_with("present") {
                1.0f64
            } else {
                0.0
            }
        };

        // ridge-regularized normal equations, solved by Gauss-Seidel sweeps
        let n = task.examples_train.len();
        let mut xtx = vec![0.0f64; dim * dim];
        let mut xty = vec![0.0f64; dim];
        for ex in &task.examples_train {
            let f = featurize(ex);
            let y = label(ex);
            for i in 0..dim {
                if f[i] == 0.0 {
                    continue;
                }
                xty[i] += f[i] * y;
                for j in 0..dim {
                    xtx[i * dim + j] += f[i] * f[j];
                }
            }
        }
        for i in 0..dim {
            xtx[i * dim + i] += 1e-3 * n as f64;
        }
        let mut w = vec![0.0f64; dim];
        for _ in 0..500 {
            for i in 0..dim {
                let mut s = xty[i];
                for j in 0..dim {
                    if j != i {
                        s -= xtx[i * dim + j] * w[j];
                    }
                }
                w[i] = s / xtx[i * dim + i];
            }
        }

        let mut correct = 0;
        for ex in &task.examples_test {
            let f = featurize(ex);
            let score: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
            let pred = if score > 0.5 { 1.0 } else { 0.0 };
            if pred == label(ex) {
                correct += 1;
            }
        }
        let acc = correct as f64 / task.examples_test.len() as f64;
        assert!(acc >= 0.95, "probe accuracy {acc} below 0.95");
    }
}
