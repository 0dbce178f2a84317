//! Tiny decoder-only transformer classifier hosting the adapter stacks.
//!
//! Adapters are injected at exactly two points per layer: the attention
//! query and value projections. Everything else (embeddings, W_k, W_o, the
//! MLP, layer norms, the output head) is base weight and never receives
//! gradients once continual training begins, except under the full
//! fine-tuning baseline.
//!
//! Activations follow the column-per-token convention of the tape ops:
//! hidden state is `[d_model × seq]`, a projection is `W · x`, and the
//! classifier reads the final position's column.

use crate::error::{Error, Result};
use crate::lora::{self, AdapterStack, BoundStack, LoraAdapter};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub n_outputs: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("n_outputs", self.n_outputs),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Which leaves a bound forward pass marks trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Evaluation: nothing trains.
    Frozen,
    /// Adapter strategies: only non-frozen adapters train.
    Adapters,
    /// Full fine-tuning baseline: all base weights train (plus any
    /// non-frozen adapter, though the baseline runs without adapters).
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Query,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    WQ,
    WK,
    WV,
    WO,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ab {
    A,
    B,
}

/// Stable address of one parameter tensor inside [`ModelWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamPath {
    TokEmb,
    PosEmb,
    Layer { layer: usize, which: LayerParam },
    Adapter { layer: usize, proj: Proj, index: usize, which: Ab },
    LnFGain,
    LnFBias,
    HeadW,
    HeadB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S: Scalar> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub q_stack: AdapterStack<S>,
    pub v_stack: AdapterStack<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<S: Scalar> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub ln_f_gain: Tensor<S>,
    pub ln_f_bias: Tensor<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

const BASE_INIT_STD: f64 = 0.02;

impl<S: Scalar> ModelWeights<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let randn = |shape: Vec<usize>, tag: u64| {
            Tensor::<S>::randn(shape, BASE_INIT_STD, derive_seed(seed, tag))
        };
        let ones = |n: usize| {
            Tensor::from_vec(vec![n], vec![S::one(); n]).expect("positive length")
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let tag = |slot: u64| (l as u64) << 8 | slot;
            layers.push(LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(vec![d])?,
                w_q: randn(vec![d, d], tag(1))?,
                w_k: randn(vec![d, d], tag(2))?,
                w_v: randn(vec![d, d], tag(3))?,
                w_o: randn(vec![d, d], tag(4))?,
                q_stack: AdapterStack::new(),
                v_stack: AdapterStack::new(),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(vec![d])?,
                w1: randn(vec![config.d_ff(), d], tag(5))?,
                b1: Tensor::zeros(vec![config.d_ff()])?,
                w2: randn(vec![d, config.d_ff()], tag(6))?,
                b2: Tensor::zeros(vec![d])?,
            });
        }
        Ok(ModelWeights {
            config,
            tok_emb: randn(vec![config.vocab_size, d], 0xE0)?,
            pos_emb: randn(vec![config.max_seq_len, d], 0xE1)?,
            layers,
            ln_f_gain: ones(d),
            ln_f_bias: Tensor::zeros(vec![d])?,
            head_w: randn(vec![config.n_outputs, d], 0xE2)?,
            head_b: Tensor::zeros(vec![config.n_outputs])?,
        })
    }

    pub fn param(&self, path: ParamPath) -> &Tensor<S> {
        match path {
            ParamPath::TokEmb => &self.tok_emb,
            ParamPath::PosEmb => &self.pos_emb,
            ParamPath::LnFGain => &self.ln_f_gain,
            ParamPath::LnFBias => &self.ln_f_bias,
            ParamPath::HeadW => &self.head_w,
            ParamPath::HeadB => &self.head_b,
            ParamPath::Layer { layer, which } => {
                let l = &self.layers[layer];
                match which {
                    LayerParam::Ln1Gain => &l.ln1_gain,
                    LayerParam::Ln1Bias => &l.ln1_bias,
                    LayerParam::WQ => &l.w_q,
                    LayerParam::WK => &l.w_k,
                    LayerParam::WV => &l.w_v,
                    LayerParam::WO => &l.w_o,
                    LayerParam::Ln2Gain => &l.ln2_gain,
                    LayerParam::Ln2Bias => &l.ln2_bias,
                    LayerParam::W1 => &l.w1,
                    LayerParam::B1 => &l.b1,
                    LayerParam::W2 => &l.w2,
                    LayerParam::B2 => &l.b2,
                }
            }
            ParamPath::Adapter { layer, proj, index, which } => {
                let stack = match proj {
                    Proj::Query => &self.layers[layer].q_stack,
                    Proj::Value => &self.layers[layer].v_stack,
                };
                let ad = &stack.adapters()[index];
                match which {
                    Ab::A => &ad.a,
                    Ab::B => &ad.b,
                }
            }
        }
    }

    pub fn param_mut(&mut self, path: ParamPath) -> &mut Tensor<S> {
        match path {
            ParamPath::TokEmb => &mut self.tok_emb,
            ParamPath::PosEmb => &mut self.pos_emb,
            ParamPath::LnFGain => &mut self.ln_f_gain,
            ParamPath::LnFBias => &mut self.ln_f_bias,
            ParamPath::HeadW => &mut self.head_w,
            ParamPath::HeadB => &mut self.head_b,
            ParamPath::Layer { layer, which } => {
                let l = &mut self.layers[layer];
                match which {
                    LayerParam::Ln1Gain => &mut l.ln1_gain,
                    LayerParam::Ln1Bias => &mut l.ln1_bias,
                    LayerParam::WQ => &mut l.w_q,
                    LayerParam::WK => &mut l.w_k,
                    LayerParam::WV => &mut l.w_v,
                    LayerParam::WO => &mut l.w_o,
                    LayerParam::Ln2Gain => &mut l.ln2_gain,
                    LayerParam::Ln2Bias => &mut l.ln2_bias,
                    LayerParam::W1 => &mut l.w1,
                    LayerParam::B1 => &mut l.b1,
                    LayerParam::W2 => &mut l.w2,
                    LayerParam::B2 => &mut l.b2,
                }
            }
            ParamPath::Adapter { layer, proj, index, which } => {
                let stack = match proj {
                    Proj::Query => &mut self.layers[layer].q_stack,
                    Proj::Value => &mut self.layers[layer].v_stack,
                };
                let ad = &mut stack.adapters_mut()[index];
                match which {
                    Ab::A => &mut ad.a,
                    Ab::B => &mut ad.b,
                }
            }
        }
    }

    /// Base parameter paths in a fixed order (adapters excluded).
    pub fn base_param_paths(&self) -> Vec<ParamPath> {
        let mut paths = vec![ParamPath::TokEmb, ParamPath::PosEmb];
        for layer in 0..self.layers.len() {
            use LayerParam::*;
            for which in [
                Ln1Gain, Ln1Bias, WQ, WK, WV, WO, Ln2Gain, Ln2Bias, W1, B1, W2, B2,
            ] {
                paths.push(ParamPath::Layer { layer, which });
            }
        }
        paths.extend([
            ParamPath::LnFGain,
            ParamPath::LnFBias,
            ParamPath::HeadW,
            ParamPath::HeadB,
        ]);
        paths
    }

    pub fn base_parameter_count(&self) -> usize {
        self.base_param_paths()
            .iter()
            .map(|&p| self.param(p).numel())
            .sum()
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [&l.q_stack, &l.v_stack])
            .flat_map(|s| s.adapters())
            .map(|a| a.a.numel() + a.b.numel())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.base_parameter_count() + self.adapter_parameter_count()
    }

    pub fn stacks(&self) -> impl Iterator<Item = &AdapterStack<S>> {
        self.layers.iter().flat_map(|l| [&l.q_stack, &l.v_stack])
    }

    pub fn stacks_mut(&mut self) -> impl Iterator<Item = &mut AdapterStack<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q_stack, &mut l.v_stack])
    }

    pub fn trainable_adapter_count(&self) -> usize {
        self.stacks().filter(|s| s.trainable_index().is_some()).count()
    }

    /// Freeze past adapters and push a fresh pair onto every query/value
    /// stack. Fails if any stack still holds a non-frozen adapter.
    pub fn begin_task(&mut self, task_id: usize, r: usize, seed: u64) -> Result<()> {
        if self.trainable_adapter_count() > 0 {
            return Err(Error::state(
                "begin_task called while a task is mid-training; previous adapters are not frozen",
            ));
        }
        let d = self.config.d_model;
        for (idx, stack) in self.stacks_mut().enumerate() {
            stack.freeze_all();
            let adapter: LoraAdapter<S> =
                lora::init_adapter(d, d, r, task_id, derive_seed(seed, idx as u64))?;
            stack.push(adapter)?;
        }
        Ok(())
    }

    /// Single-adapter variant: the first task initializes one adapter per
    /// stack and later tasks keep training that same pair.
    pub fn begin_task_shared(&mut self, r: usize, seed: u64) -> Result<()> {
        let d = self.config.d_model;
        for (idx, stack) in self.stacks_mut().enumerate() {
            if stack.is_empty() {
                let adapter: LoraAdapter<S> =
                    lora::init_adapter(d, d, r, 0, derive_seed(seed, idx as u64))?;
                stack.push(adapter)?;
            } else if stack.trainable_index().is_none() {
                return Err(Error::state(
                    "shared adapter was frozen; cannot resume training it",
                ));
            }
        }
        Ok(())
    }

    pub fn freeze_all_adapters(&mut self) {
        for stack in self.stacks_mut() {
            stack.freeze_all();
        }
    }

    /// Fold every stack into its base weight and drop the adapters.
    /// Requires all adapters frozen.
    pub fn merged(&self) -> Result<ModelWeights<S>> {
        let mut out = self.clone();
        for l in 0..out.layers.len() {
            let merged_q = self.layers[l].q_stack.merge_into_base(&self.layers[l].w_q)?;
            let merged_v = self.layers[l].v_stack.merge_into_base(&self.layers[l].w_v)?;
            out.layers[l].w_q = merged_q;
            out.layers[l].w_v = merged_v;
            out.layers[l].q_stack = AdapterStack::new();
            out.layers[l].v_stack = AdapterStack::new();
        }
        Ok(out)
    }

    /// FNV-1a over the f32 little-endian bytes of all base weights and all
    /// frozen adapters. Trainable adapters are excluded, so the digest must
    /// survive any training step unchanged.
    pub fn base_and_frozen_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |t: &Tensor<S>| {
            for &v in t.data() {
                for b in v.as_f32().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for path in self.base_param_paths() {
            eat(self.param(path));
        }
        for stack in self.stacks() {
            for ad in stack.adapters().iter().filter(|a| a.frozen) {
                eat(&ad.a);
                eat(&ad.b);
            }
        }
        h
    }

    // ── forward paths ────────────────────────────────────────────────

    /// Register every weight on the tape. `mode` decides trainability.
    pub fn bind(&self, tape: &mut Tape<S>, mode: BindMode) -> BoundModel {
        let base = matches!(mode, BindMode::Full);
        let adapters_on = !matches!(mode, BindMode::Frozen);
        let mut trainable: Vec<(ParamPath, TensorId)> = Vec::new();
        let reg = |tape: &mut Tape<S>,
                       trainable: &mut Vec<(ParamPath, TensorId)>,
                       t: &Tensor<S>,
                       path: ParamPath,
                       train: bool| {
            let mut leaf = t.clone();
            leaf.set_requires_grad(train);
            let id = tape.leaf(&leaf);
            if train {
                trainable.push((path, id));
            }
            id
        };

        let tok_emb = reg(tape, &mut trainable, &self.tok_emb, ParamPath::TokEmb, base);
        let pos_emb = reg(tape, &mut trainable, &self.pos_emb, ParamPath::PosEmb, base);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let lp = |which| ParamPath::Layer { layer: li, which };
            let ln1_gain = reg(tape, &mut trainable, &l.ln1_gain, lp(LayerParam::Ln1Gain), base);
            let ln1_bias = reg(tape, &mut trainable, &l.ln1_bias, lp(LayerParam::Ln1Bias), base);
            let w_q = reg(tape, &mut trainable, &l.w_q, lp(LayerParam::WQ), base);
            let w_k = reg(tape, &mut trainable, &l.w_k, lp(LayerParam::WK), base);
            let w_v = reg(tape, &mut trainable, &l.w_v, lp(LayerParam::WV), base);
            let w_o = reg(tape, &mut trainable, &l.w_o, lp(LayerParam::WO), base);

            let bind_stack = |tape: &mut Tape<S>,
                                  trainable: &mut Vec<(ParamPath, TensorId)>,
                                  stack: &AdapterStack<S>,
                                  w: TensorId,
                                  proj: Proj| {
                let mut bound = Vec::new();
                for (index, ad) in stack.adapters().iter().enumerate() {
                    let train = adapters_on && !ad.frozen;
                    let a = reg(
                        tape,
                        trainable,
                        &ad.a,
                        ParamPath::Adapter { layer: li, proj, index, which: Ab::A },
                        train,
                    );
                    let b = reg(
                        tape,
                        trainable,
                        &ad.b,
                        ParamPath::Adapter { layer: li, proj, index, which: Ab::B },
                        train,
                    );
                    bound.push(lora::BoundAdapter { a, b, frozen: ad.frozen });
                }
                BoundStack { base_w: w, adapters: bound }
            };
            let q = bind_stack(tape, &mut trainable, &l.q_stack, w_q, Proj::Query);
            let v = bind_stack(tape, &mut trainable, &l.v_stack, w_v, Proj::Value);

            let ln2_gain = reg(tape, &mut trainable, &l.ln2_gain, lp(LayerParam::Ln2Gain), base);
            let ln2_bias = reg(tape, &mut trainable, &l.ln2_bias, lp(LayerParam::Ln2Bias), base);
            let w1 = reg(tape, &mut trainable, &l.w1, lp(LayerParam::W1), base);
            let b1 = reg(tape, &mut trainable, &l.b1, lp(LayerParam::B1), base);
            let w2 = reg(tape, &mut trainable, &l.w2, lp(LayerParam::W2), base);
            let b2 = reg(tape, &mut trainable, &l.b2, lp(LayerParam::B2), base);
            layers.push(BoundLayer {
                ln1_gain,
                ln1_bias,
                q,
                w_k,
                v,
                w_o,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let ln_f_gain = reg(tape, &mut trainable, &self.ln_f_gain, ParamPath::LnFGain, base);
        let ln_f_bias = reg(tape, &mut trainable, &self.ln_f_bias, ParamPath::LnFBias, base);
        let head_w = reg(tape, &mut trainable, &self.head_w, ParamPath::HeadW, base);
        let head_b = reg(tape, &mut trainable, &self.head_b, ParamPath::HeadB, base);

        BoundModel {
            config: self.config,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain,
            ln_f_bias,
            head_w,
            head_b,
            trainable,
        }
    }

    /// Classification logits for one token sequence, shape `[n_outputs]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, BindMode::Frozen);
        let out = bound.forward_example(&mut tape, tokens)?;
        Tensor::from_vec(vec![self.config.n_outputs], tape.value(out.logits).to_vec())
    }

    /// Logits plus every layer's post-block hidden states, `[seq × d_model]`
    /// each. Shares the forward code path, so the logits are bitwise equal
    /// to [`ModelWeights::forward`].
    pub fn capture_hidden_states(
        &self,
        tokens: &[usize],
    ) -> Result<(Vec<Tensor<S>>, Tensor<S>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, BindMode::Frozen);
        let out = bound.forward_example(&mut tape, tokens)?;
        let mut states = Vec::with_capacity(out.layer_states.len());
        for id in &out.layer_states {
            // stored [d × seq] on the tape; reported [seq × d]
            states.push(tape.tensor(*id).transpose()?);
        }
        let logits = Tensor::from_vec(
            vec![self.config.n_outputs],
            tape.value(out.logits).to_vec(),
        )?;
        Ok((states, logits))
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub q: BoundStack,
    pub w_k: TensorId,
    pub v: BoundStack,
    pub w_o: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// One model registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub tok_emb: TensorId,
    pub pos_emb: TensorId,
    pub layers: Vec<BoundLayer>,
    pub ln_f_gain: TensorId,
    pub ln_f_bias: TensorId,
    pub head_w: TensorId,
    pub head_b: TensorId,
    /// (path, leaf) pairs for every grad-requiring leaf, in bind order.
    pub trainable: Vec<(ParamPath, TensorId)>,
}

pub struct ForwardOut {
    /// `[1 × n_outputs]` logits row.
    pub logits: TensorId,
    /// Post-block hidden state per layer, `[d_model × seq]`.
    pub layer_states: Vec<TensorId>,
}

impl BoundModel {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Argument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::Index {
                    index: t,
                    len: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// One causal forward pass. Token/position embeddings, pre-norm blocks
    /// with multi-head attention (query/value through the adapter stacks)
    /// and a GELU MLP, final norm, and the classifier over the last column.
    pub fn forward_example<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        tokens: &[usize],
    ) -> Result<ForwardOut> {
        self.check_tokens(tokens)?;
        let len = tokens.len();
        let n_heads = self.config.n_heads;
        let d_head = self.config.d_head();

        let tok = tape.embed(self.tok_emb, tokens)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embed(self.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;

        // additive causal mask: 0 at or before the query position, a large
        // negative (finite) value strictly after it
        let neg = S::from_f64(ATTN_MASK_NEG);
        let mut mask = vec![S::zero(); len * len];
        for i in 0..len {
            for j in (i + 1)..len {
                mask[i * len + j] = neg;
            }
        }
        let mask = tape.constant(vec![len, len], mask)?;
        let inv_sqrt_dh = S::from_f64(1.0 / (d_head as f64).sqrt());

        let mut layer_states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = tape.layer_norm_cols(x, layer.ln1_gain, layer.ln1_bias)?;
            let q = lora::stack_forward(tape, &layer.q, h)?;
            let k = tape.matmul(layer.w_k, h)?;
            let v = lora::stack_forward(tape, &layer.v, h)?;

            let mut head_outs = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let (r0, r1) = (hd * d_head, (hd + 1) * d_head);
                let qh = tape.slice_rows(q, r0, r1)?;
                let kh = tape.slice_rows(k, r0, r1)?;
                let vh = tape.slice_rows(v, r0, r1)?;
                let qh_t = tape.transpose(qh)?;
                let scores = tape.matmul(qh_t, kh)?; // [len × len], row = query
                let scaled = tape.scale(scores, inv_sqrt_dh);
                let masked = tape.add(scaled, mask)?;
                let attn = tape.softmax_rows(masked)?;
                let attn_t = tape.transpose(attn)?;
                head_outs.push(tape.matmul(vh, attn_t)?); // [d_head × len]
            }
            let concat = tape.concat_rows(&head_outs)?;
            let proj = tape.matmul(layer.w_o, concat)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm_cols(x, layer.ln2_gain, layer.ln2_bias)?;
            let m = tape.matmul(layer.w1, h2)?;
            let m = tape.bias_add(m, layer.b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(layer.w2, m)?;
            let m = tape.bias_add(m, layer.b2)?;
            x = tape.add(x, m)?;
            layer_states.push(x);
        }

        let xf = tape.layer_norm_cols(x, self.ln_f_gain, self.ln_f_bias)?;
        let last = tape.slice_cols(xf, len - 1, len)?; // [d × 1]
        let logits_col = tape.matmul(self.head_w, last)?;
        let logits_col = tape.bias_add(logits_col, self.head_b)?;
        let logits = tape.transpose(logits_col)?; // [1 × n_outputs]
        Ok(ForwardOut {
            logits,
            layer_states,
        })
    }

    /// Σ over all query/value stacks of the orthogonality loss against
    /// frozen past adapters. Zero constant when no stack has a past.
    pub fn total_orth_loss<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<TensorId> {
        let mut total: Option<TensorId> = None;
        for layer in &self.layers {
            for stack in [&layer.q, &layer.v] {
                if stack.adapters.is_empty() {
                    continue;
                }
                let p = lora::total_orth_loss(tape, stack)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, p)?,
                    None => p,
                });
            }
        }
        match total {
            Some(id) => Ok(id),
            None => tape.constant(vec![1], vec![S::zero()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 12,
            n_outputs: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));
        let mut cfg2 = tiny_config();
        cfg2.n_layers = 0;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn forward_output_shape_is_n_outputs() {
        let m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 1).unwrap();
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[5]);
        let logits_one = m.forward(&[0]).unwrap();
        assert_eq!(logits_one.shape(), &[5]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 1).unwrap();
        assert!(matches!(m.forward(&[]).unwrap_err(), Error::Argument(_)));
        assert!(matches!(
            m.forward(&[11]).unwrap_err(),
            Error::Index { index: 11, len: 11 }
        ));
        let too_long = vec![0usize; 13];
        assert!(matches!(m.forward(&too_long).unwrap_err(), Error::Argument(_)));
    }

    #[test]
    fn fresh_adapters_leave_logits_bitwise_unchanged() {
        let base: ModelWeights<f32> = ModelWeights::new(tiny_config(), 2).unwrap();
        let mut adapted = base.clone();
        adapted.begin_task(0, 2, 7).unwrap();
        let tokens = [3usize, 1, 4, 1, 5];
        let a = base.forward(&tokens).unwrap();
        let b = adapted.forward(&tokens).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 3).unwrap();
        let m2: ModelWeights<f32> = ModelWeights::new(tiny_config(), 3).unwrap();
        let tokens = [2usize, 7, 1];
        assert_eq!(m.forward(&tokens).unwrap().data(), m2.forward(&tokens).unwrap().data());
        assert_eq!(m.forward(&tokens).unwrap().data(), m.forward(&tokens).unwrap().data());
    }

    #[test]
    fn capture_matches_forward_and_layer_count() {
        let m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 4).unwrap();
        let tokens = [1usize, 2, 3, 4];
        let (states, logits) = m.capture_hidden_states(&tokens).unwrap();
        assert_eq!(states.len(), m.config.n_layers);
        for s in &states {
            assert_eq!(s.shape(), &[tokens.len(), m.config.d_model]);
        }
        assert_eq!(logits.data(), m.forward(&tokens).unwrap().data());
    }

    #[test]
    fn begin_task_opens_one_adapter_per_stack() {
        let mut m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 5).unwrap();
        m.begin_task(0, 2, 11).unwrap();
        assert_eq!(m.trainable_adapter_count(), 2 * m.config.n_layers);

        // mid-training second call is a state error
        assert!(matches!(m.begin_task(1, 2, 12).unwrap_err(), Error::State(_)));

        // after freezing, the next task opens fresh adapters and leaves the
        // old ones byte-identical
        m.freeze_all_adapters();
        let old: Vec<Vec<f32>> = m
            .stacks()
            .map(|s| s.adapters()[0].a.data().to_vec())
            .collect();
        m.begin_task(1, 3, 13).unwrap();
        assert_eq!(m.trainable_adapter_count(), 2 * m.config.n_layers);
        for (stack, before) in m.stacks().zip(old) {
            assert_eq!(stack.adapters()[0].a.data(), &before[..]);
            assert!(stack.adapters()[0].frozen);
            assert_eq!(stack.len(), 2);
        }
    }

    #[test]
    fn adapters_exist_only_on_query_and_value() {
        let mut m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 6).unwrap();
        m.begin_task(0, 2, 1).unwrap();
        // exactly 2 stacks per layer, and they hang off w_q / w_v
        assert_eq!(m.stacks().count(), 2 * m.config.n_layers);
        for l in &m.layers {
            assert_eq!(l.q_stack.len(), 1);
            assert_eq!(l.v_stack.len(), 1);
        }
    }

    #[test]
    fn layer_zero_states_unchanged_when_layer_zero_update_is_zero() {
        let base: ModelWeights<f32> = ModelWeights::new(tiny_config(), 8).unwrap();
        let mut trained = base.clone();
        trained.begin_task(0, 2, 3).unwrap();
        // fake a training outcome: nonzero B everywhere
        for stack in trained.stacks_mut() {
            for ad in stack.adapters_mut() {
                let r = ad.rank();
                let k = ad.k();
                ad.b = Tensor::randn(vec![r, k], 0.3, 99).unwrap().with_grad();
            }
        }
        // now zero out layer 0's update only
        let layer0 = &mut trained.layers[0];
        for stack in [&mut layer0.q_stack, &mut layer0.v_stack] {
            for ad in stack.adapters_mut() {
                let r = ad.rank();
                let k = ad.k();
                ad.b = Tensor::zeros(vec![r, k]).unwrap().with_grad();
            }
        }
        let tokens = [1usize, 2, 3];
        let (base_states, _) = base.capture_hidden_states(&tokens).unwrap();
        let (trained_states, _) = trained.capture_hidden_states(&tokens).unwrap();
        assert_eq!(base_states[0].data(), trained_states[0].data());
        assert_ne!(base_states[1].data(), trained_states[1].data());
    }

    #[test]
    fn merged_model_has_base_parameter_count() {
        let mut m: ModelWeights<f32> = ModelWeights::new(tiny_config(), 9).unwrap();
        m.begin_task(0, 2, 1).unwrap();
        m.freeze_all_adapters();
        m.begin_task(1, 2, 2).unwrap();
        m.freeze_all_adapters();
        assert!(m.adapter_parameter_count() > 0);
        let merged = m.merged().unwrap();
        assert_eq!(merged.parameter_count(), m.base_parameter_count());
        assert_eq!(merged.adapter_parameter_count(), 0);
    }
}
