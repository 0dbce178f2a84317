//! Binary checkpoint format.
//!
//! Layout: magic `OLRA`, version u32, then length-prefixed sections
//! (tag u32, length u64, payload). All integers and floats little-endian;
//! floats are 32-bit. The section payloads follow fixed traversal orders,
//! so identical state always produces identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{AdapterStack, LoraAdapter};
use crate::model::{ModelConfig, ModelWeights};
use crate::tasks::{AnswerVocab, Tokenizer};
use crate::tensor::Tensor;
use crate::trainer::EpochLog;

pub const MAGIC: [u8; 4] = *b"OLRA";
pub const VERSION: u32 = 1;

const SEC_CONFIG: u32 = 1;
const SEC_TOKENIZER: u32 = 2;
const SEC_ANSWERS: u32 = 3;
const SEC_BASE: u32 = 4;
const SEC_ADAPTERS: u32 = 5;
const SEC_TRAIN_LOG: u32 = 6;

/// Everything needed to reproduce forward outputs bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights<f32>,
    pub tokenizer: Tokenizer,
    pub answer_vocab: AnswerVocab,
    pub train_log: Vec<EpochLog>,
}

// ── writer ──────────────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
}

fn section(out: &mut Vec<u8>, tag: u32, body: Vec<u8>) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let cfg = &ckpt.weights.config;
    let mut w = Writer { buf: Vec::new() };
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.max_seq_len,
        cfg.n_outputs,
    ] {
        w.u32(v as u32);
    }
    section(&mut out, SEC_CONFIG, w.buf);

    let mut w = Writer { buf: Vec::new() };
    w.u32(ckpt.tokenizer.vocab_size() as u32);
    for t in ckpt.tokenizer.tokens() {
        w.str(t);
    }
    section(&mut out, SEC_TOKENIZER, w.buf);

    let mut w = Writer { buf: Vec::new() };
    w.u32(ckpt.answer_vocab.len() as u32);
    for a in ckpt.answer_vocab.answers() {
        w.str(a);
    }
    section(&mut out, SEC_ANSWERS, w.buf);

    let mut w = Writer { buf: Vec::new() };
    for path in ckpt.weights.base_param_paths() {
        w.tensor(ckpt.weights.param(path));
    }
    section(&mut out, SEC_BASE, w.buf);

    let mut w = Writer { buf: Vec::new() };
    let stacks: Vec<&AdapterStack<f32>> = ckpt.weights.stacks().collect();
    w.u32(stacks.len() as u32);
    for stack in stacks {
        w.u32(stack.len() as u32);
        for ad in stack.adapters() {
            w.u32(ad.task_id as u32);
            w.u8(ad.frozen as u8);
            w.u32(ad.d() as u32);
            w.u32(ad.rank() as u32);
            w.u32(ad.k() as u32);
            for &v in ad.a.data() {
                w.f32(v);
            }
            for &v in ad.b.data() {
                w.f32(v);
            }
        }
    }
    section(&mut out, SEC_ADAPTERS, w.buf);

    let mut w = Writer { buf: Vec::new() };
    w.u32(ckpt.train_log.len() as u32);
    for row in &ckpt.train_log {
        w.u32(row.task_id as u32);
        w.u32(row.epoch as u32);
        w.f32(row.nll as f32);
        w.f32(row.orth_loss as f32);
        w.f32(row.total as f32);
    }
    section(&mut out, SEC_TRAIN_LOG, w.buf);

    out
}

// ── reader ──────────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::Format(format!("invalid utf-8 in checkpoint string: {e}")))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f32()?);
        }
        Tensor::from_vec(shape, data)
            .map_err(|e| Error::Format(format!("bad tensor in checkpoint: {e}")))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic bytes {:02x?}, not an OLRA checkpoint",
            magic
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }

    let mut config: Option<ModelConfig> = None;
    let mut tokenizer: Option<Tokenizer> = None;
    let mut answer_vocab: Option<AnswerVocab> = None;
    let mut base: Option<Vec<Tensor<f32>>> = None;
    let mut adapters: Option<Vec<Vec<LoraAdapter<f32>>>> = None;
    let mut train_log: Vec<EpochLog> = Vec::new();

    while !r.done() {
        let tag = r.u32()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        let mut s = Reader { buf: body, pos: 0 };
        match tag {
            SEC_CONFIG => {
                let mut v = [0usize; 6];
                for slot in &mut v {
                    *slot = s.u32()? as usize;
                }
                config = Some(ModelConfig {
                    vocab_size: v[0],
                    d_model: v[1],
                    n_layers: v[2],
                    n_heads: v[3],
                    max_seq_len: v[4],
                    n_outputs: v[5],
                });
            }
            SEC_TOKENIZER => {
                let n = s.u32()? as usize;
                let mut tokens = Vec::with_capacity(n);
                for _ in 0..n {
                    tokens.push(s.str()?);
                }
                tokenizer = Some(Tokenizer::from_tokens(tokens)?);
            }
            SEC_ANSWERS => {
                let n = s.u32()? as usize;
                let mut answers = Vec::with_capacity(n);
                for _ in 0..n {
                    answers.push(s.str()?);
                }
                answer_vocab = Some(
                    AnswerVocab::from_answers(answers)
                        .map_err(|e| Error::Format(format!("answer section: {e}")))?,
                );
            }
            SEC_BASE => {
                let mut tensors = Vec::new();
                while !s.done() {
                    tensors.push(s.tensor()?);
                }
                base = Some(tensors);
            }
            SEC_ADAPTERS => {
                let n_stacks = s.u32()? as usize;
                let mut stacks = Vec::with_capacity(n_stacks);
                for _ in 0..n_stacks {
                    let n_ad = s.u32()? as usize;
                    let mut ads = Vec::with_capacity(n_ad);
                    for _ in 0..n_ad {
                        let task_id = s.u32()? as usize;
                        let frozen = s.u8()? != 0;
                        let d = s.u32()? as usize;
                        let rank = s.u32()? as usize;
                        let k = s.u32()? as usize;
                        let mut a_data = Vec::with_capacity(d * rank);
                        for _ in 0..d * rank {
                            a_data.push(s.f32()?);
                        }
                        let mut b_data = Vec::with_capacity(rank * k);
                        for _ in 0..rank * k {
                            b_data.push(s.f32()?);
                        }
                        let mut a = Tensor::from_vec(vec![d, rank], a_data)
                            .map_err(|e| Error::Format(e.to_string()))?;
                        let mut b = Tensor::from_vec(vec![rank, k], b_data)
                            .map_err(|e| Error::Format(e.to_string()))?;
                        if !frozen {
                            a = a.with_grad();
                            b = b.with_grad();
                        }
                        ads.push(LoraAdapter {
                            a,
                            b,
                            task_id,
                            frozen,
                        });
                    }
                    stacks.push(ads);
                }
                adapters = Some(stacks);
            }
            SEC_TRAIN_LOG => {
                let n = s.u32()? as usize;
                for _ in 0..n {
                    train_log.push(EpochLog {
                        task_id: s.u32()? as usize,
                        epoch: s.u32()? as usize,
                        nll: s.f32()? as f64,
                        orth_loss: s.f32()? as f64,
                        total: s.f32()? as f64,
                    });
                }
            }
            other => {
                return Err(Error::Format(format!("unknown checkpoint section tag {other}")));
            }
        }
        if !s.done() {
            return Err(Error::Format(format!(
                "section {tag} has {} trailing bytes",
                s.buf.len() - s.pos
            )));
        }
    }

    let config = config.ok_or_else(|| Error::Format("missing config section".into()))?;
    let tokenizer = tokenizer.ok_or_else(|| Error::Format("missing tokenizer section".into()))?;
    let answer_vocab =
        answer_vocab.ok_or_else(|| Error::Format("missing answer section".into()))?;
    let base = base.ok_or_else(|| Error::Format("missing base-weight section".into()))?;
    let adapters = adapters.ok_or_else(|| Error::Format("missing adapter section".into()))?;

    // Rebuild the model, then overwrite every base tensor in path order.
    let mut weights: ModelWeights<f32> = ModelWeights::new(config, 0)
        .map_err(|e| Error::Format(format!("config in checkpoint is invalid: {e}")))?;
    let paths = weights.base_param_paths();
    if paths.len() != base.len() {
        return Err(Error::Format(format!(
            "base-weight section holds {} tensors, model needs {}",
            base.len(),
            paths.len()
        )));
    }
    for (path, tensor) in paths.into_iter().zip(base) {
        let slot = weights.param_mut(path);
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "base tensor shape {:?} does not match model slot {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    let n_stacks = weights.layers.len() * 2;
    if adapters.len() != n_stacks {
        return Err(Error::Format(format!(
            "adapter section holds {} stacks, model needs {n_stacks}",
            adapters.len()
        )));
    }
    for (stack, ads) in weights.stacks_mut().zip(adapters) {
        let mut rebuilt = AdapterStack::new();
        for ad in ads {
            rebuilt
                .push(ad)
                .map_err(|e| Error::Format(format!("invalid adapter stack: {e}")))?;
        }
        *stack = rebuilt;
    }

    Ok(Checkpoint {
        weights,
        tokenizer,
        answer_vocab,
        train_log,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
