//! Instruction-schema data pipeline: example records, the uniform prompt
//! template, whitespace tokenization, task-file ingestion, and the
//! synthetic interference suite (see `synthetic`).

mod synthetic;

pub use synthetic::gen_synthetic_suite;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One supervised record in the uniform instruction schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionExample {
    pub task_definition: String,
    pub options: Vec<String>,
    pub text: String,
    pub answer: String,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::Validation {
                field: "options",
                msg: "options must be non-empty".into(),
            });
        }
        let mut seen = HashSet::new();
        for o in &self.options {
            if !seen.insert(o) {
                return Err(Error::Validation {
                    field: "options",
                    msg: format!("duplicate option `{o}`"),
                });
            }
        }
        if !self.options.contains(&self.answer) {
            return Err(Error::Validation {
                field: "answer",
                msg: format!("answer `{}` not among options", self.answer),
            });
        }
        Ok(())
    }
}

/// Render the prompt side of an example:
/// `Definition: …\nOptions: a | b\nText: …\nAnswer:`
/// The answer itself is the supervision target and is excluded.
pub fn format_instruction(ex: &InstructionExample) -> Result<String> {
    ex.validate()?;
    Ok(format!(
        "Definition: {}\nOptions: {}\nText: {}\nAnswer:",
        ex.task_definition,
        ex.options.join(" | "),
        ex.text
    ))
}

/// Global answer → output-index map, frozen before the first task trains.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Validation {
                    field: "answer_vocab",
                    msg: format!("duplicate answer `{a}`"),
                });
            }
        }
        Ok(AnswerVocab { answers, index })
    }

    /// Union of all tasks' options in first-seen order.
    pub fn union_of(tasks: &[TaskSpec]) -> Result<Self> {
        let mut answers = Vec::new();
        let mut seen = HashSet::new();
        for t in tasks {
            for ex in t.examples_train.iter().chain(&t.examples_test) {
                for o in &ex.options {
                    if seen.insert(o.clone()) {
                        answers.push(o.clone());
                    }
                }
            }
        }
        Self::from_answers(answers)
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
    }
}

/// One task: named train/test splits plus the shared global answer map.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub examples_train: Vec<InstructionExample>,
    pub examples_test: Vec<InstructionExample>,
    pub answer_vocab: AnswerVocab,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        for ex in self.examples_train.iter().chain(&self.examples_test) {
            ex.validate()?;
            if self.answer_vocab.index_of(&ex.answer).is_none() {
                return Err(Error::Validation {
                    field: "answer",
                    msg: format!("answer `{}` missing from global answer vocab", ex.answer),
                });
            }
        }
        let train_texts: HashSet<&str> = self
            .examples_train
            .iter()
            .map(|e| e.text.as_str())
            .collect();
        if self
            .examples_test
            .iter()
            .any(|e| train_texts.contains(e.text.as_str()))
        {
            return Err(Error::Validation {
                field: "examples_test",
                msg: format!("task `{}` has overlapping train/test texts", self.name),
            });
        }
        Ok(())
    }
}

fn read_examples(path: &Path) -> Result<Vec<InstructionExample>> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read task file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{} in {}", e, path.display()),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Test-split file sitting next to a train file: `foo.jsonl` → `foo.test.jsonl`.
pub fn test_path_for(train: &Path) -> PathBuf {
    let stem = train
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    train.with_file_name(format!("{stem}.test.jsonl"))
}

/// Load a task sequence: the sequence file lists one train-file path per
/// line (relative paths resolve against the sequence file's directory, test
/// split in the sibling `<name>.test.jsonl`), in training order. The global
/// answer vocabulary is the union over the whole sequence.
pub fn load_tasks(sequence_path: &Path) -> Result<Vec<TaskSpec>> {
    let content = fs::read_to_string(sequence_path).map_err(|e| {
        Error::Data(format!(
            "cannot read sequence file {}: {e}",
            sequence_path.display()
        ))
    })?;
    let base = sequence_path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::new();
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let train_path = base.join(line);
        let test_path = test_path_for(&train_path);
        let name = train_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| line.to_string());
        let examples_train = read_examples(&train_path)?;
        let examples_test = read_examples(&test_path)?;
        tasks.push(TaskSpec {
            name,
            examples_train,
            examples_test,
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

fn write_examples(path: &Path, examples: &[InstructionExample]) -> Result<()> {
    let mut body = String::new();
    for ex in examples {
        body.push_str(&serde_json::to_string(ex).map_err(|e| Error::Format(e.to_string()))?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Write a suite to `dir`: per task `<name>.jsonl` + `<name>.test.jsonl`,
/// plus a `sequence.txt` listing the train files in training order.
/// Returns the sequence-file path.
pub fn save_tasks(dir: &Path, tasks: &[TaskSpec]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut seq = String::new();
    for t in tasks {
        let train_file = format!("{}.jsonl", t.name);
        write_examples(&dir.join(&train_file), &t.examples_train)?;
        write_examples(&dir.join(format!("{}.test.jsonl", t.name)), &t.examples_test)?;
        seq.push_str(&train_file);
        seq.push('\n');
    }
    let seq_path = dir.join("sequence.txt");
    fs::write(&seq_path, seq)?;
    Ok(seq_path)
}

/// Whitespace tokenizer over a fixed lowercase vocabulary. Index 0 is the
/// unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    unk: usize,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Tokenizer {
    /// Build from every formatted train prompt plus every option string, in
    /// task order, first-seen token order.
    pub fn build(tasks: &[TaskSpec]) -> Result<Self> {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_string(), 0usize);
        let mut add = |word: &str| {
            let w = word.to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        };
        for t in tasks {
            for ex in &t.examples_train {
                for word in format_instruction(ex)?.split_whitespace() {
                    add(word);
                }
                for o in &ex.options {
                    add(o);
                }
            }
        }
        Ok(Tokenizer {
            tokens,
            index,
            unk: 0,
        })
    }

    /// Rebuild from a stored token list (index = position, unknown at 0).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Format(format!(
                "tokenizer vocabulary must start with `{UNK_TOKEN}`"
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Tokenizer {
            tokens,
            index,
            unk: 0,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_index(&self) -> usize {
        self.unk
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(t, i)| (i.clone(), t))
            .collect();
    }

    /// Lowercased whitespace split; out-of-vocabulary words map to the
    /// unknown index. When the result exceeds `max_len`, the trailing window
    /// is kept so the `Answer:` cue survives.
    pub fn encode(&self, s: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = s
            .split_whitespace()
            .map(|w| {
                self.index
                    .get(&w.to_lowercase())
                    .copied()
                    .unwrap_or(self.unk)
            })
            .collect();
        if ids.len() > max_len {
            ids.drain(..ids.len() - max_len);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| UNK_TOKEN.to_string())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_example() -> InstructionExample {
        InstructionExample {
            task_definition: "classify sentiment".into(),
            options: vec!["pos".into(), "neg".into()],
            text: "great".into(),
            answer: "pos".into(),
        }
    }

    #[test]
    fn format_matches_template_exactly() {
        let s = format_instruction(&sample_example()).unwrap();
        assert_eq!(
            s,
            "Definition: classify sentiment\nOptions: pos | neg\nText: great\nAnswer:"
        );
    }

    #[test]
    fn single_option_has_no_separator() {
        let ex = InstructionExample {
            task_definition: "d".into(),
            options: vec!["only".into()],
            text: "t".into(),
            answer: "only".into(),
        };
        let s = format_instruction(&ex).unwrap();
        assert!(s.contains("Options: only\n"));
        assert!(!s.contains('|'));
    }

    #[test]
    fn answer_outside_options_is_validation_error() {
        let ex = InstructionExample {
            task_definition: "d".into(),
            options: vec!["yes".into(), "no".into()],
            text: "t".into(),
            answer: "maybe".into(),
        };
        let err = format_instruction(&ex).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "answer", .. }));
    }

    #[test]
    fn empty_sequence_file_loads_empty_list() {
        let dir = std::env::temp_dir().join("olora_empty_seq_test");
        fs::create_dir_all(&dir).unwrap();
        let seq = dir.join("sequence.txt");
        fs::write(&seq, "").unwrap();
        let tasks = load_tasks(&seq).unwrap();
        assert!(tasks.is_empty());
    }

    #[test]
    fn missing_answer_field_is_parse_error_with_line() {
        let dir = std::env::temp_dir().join("olora_parse_err_test");
        fs::create_dir_all(&dir).unwrap();
        let task = dir.join("bad.jsonl");
        fs::write(
            &task,
            "{\"task_definition\":\"d\",\"options\":[\"a\"],\"text\":\"t\",\"answer\":\"a\"}\n{\"task_definition\":\"d\",\"options\":[\"a\"],\"text\":\"t2\"}\n",
        )
        .unwrap();
        let err = read_examples(&task).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("answer"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tokenizer_lowercases_and_truncates_tail() {
        let ex = sample_example();
        let task = TaskSpec {
            name: "t".into(),
            examples_train: vec![ex],
            examples_test: vec![],
            answer_vocab: AnswerVocab::default(),
        };
        let tok = Tokenizer::build(&[task]).unwrap();

        let ids = tok.encode("A a", 10);
        // "a" is OOV here, so both forms map to the same (unk) index
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);

        let pos = tok.encode("pos", 10);
        let pos_upper = tok.encode("POS", 10);
        assert_eq!(pos, pos_upper);
        assert_ne!(pos[0], tok.unk_index());

        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let enc = tok.encode(&long.join(" "), 64);
        assert_eq!(enc.len(), 64);

        // trailing window: encode a string with "pos" at the end and verify
        // the last id survives truncation
        let mut words = vec!["x".to_string(); 100];
        words.push("pos".into());
        let enc = tok.encode(&words.join(" "), 64);
        assert_eq!(*enc.last().unwrap(), pos[0]);
    }

    #[test]
    fn tokenizer_empty_string_gives_empty_sequence() {
        let tok = Tokenizer {
            tokens: vec![UNK_TOKEN.into()],
            index: HashMap::from([(UNK_TOKEN.to_string(), 0)]),
            unk: 0,
        };
        assert!(tok.encode("", 8).is_empty());
    }

    #[test]
    fn decode_recovers_in_vocabulary_tokens() {
        let ex = sample_example();
        let task = TaskSpec {
            name: "t".into(),
            examples_train: vec![ex],
            examples_test: vec![],
            answer_vocab: AnswerVocab::default(),
        };
        let tok = Tokenizer::build(&[task]).unwrap();
        let ids = tok.encode("pos neg great", 16);
        assert_eq!(tok.decode(&ids), vec!["pos", "neg", "great"]);
    }
}
