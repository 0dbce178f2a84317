//! Low-rank adapter pairs, the orthogonality penalty between task
//! subspaces, stacking across tasks, and merging back into dense weights.
//!
//! One adapter is the pair (A: d×r, B: r×k); its update to a base weight
//! W[d×k] is the product AB. A stack holds the adapters of all tasks seen so
//! far at one injection point; at most the newest is trainable. The current
//! task's subspace (the column span of Aₜ) is pushed orthogonal to every
//! past Aᵢ by penalizing ‖AᵢᵀAₜ‖²_F.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Std of the Gaussian init for A. B starts at zero so the model is
/// unchanged when a task begins.
pub const INIT_STD: f64 = 0.02;

/// The update is applied as plain AB — no α/r scaling term.
pub const LORA_SCALE: f64 = 1.0;

/// One task's adapter pair at one injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S: Scalar> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub task_id: usize,
    pub frozen: bool,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn d(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.a.set_requires_grad(false);
        self.b.set_requires_grad(false);
    }
}

/// A ~ Gaussian(0, INIT_STD²), B = 0, trainable. Deterministic per seed.
pub fn init_adapter<S: Scalar>(
    d: usize,
    k: usize,
    r: usize,
    task_id: usize,
    seed: u64,
) -> Result<LoraAdapter<S>> {
    if r == 0 || r > d.min(k) {
        return Err(Error::Rank { r, d, k });
    }
    let mut rng = rng::rng_from(seed);
    let a = Tensor::from_vec(vec![d, r], rng::gaussian(d * r, INIT_STD, &mut rng))?.with_grad();
    let b = Tensor::zeros(vec![r, k])?.with_grad();
    Ok(LoraAdapter {
        a,
        b,
        task_id,
        frozen: false,
    })
}

/// Ordered adapters for one injection point across tasks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterStack<S: Scalar> {
    adapters: Vec<LoraAdapter<S>>,
}

impl<S: Scalar> AdapterStack<S> {
    pub fn new() -> Self {
        AdapterStack {
            adapters: Vec::new(),
        }
    }

    pub fn adapters(&self) -> &[LoraAdapter<S>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<S>] {
        &mut self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Append an adapter, enforcing the stack invariants: shared (d, k),
    /// strictly increasing task ids, at most one non-frozen adapter.
    pub fn push(&mut self, adapter: LoraAdapter<S>) -> Result<()> {
        if let Some(last) = self.adapters.last() {
            if last.d() != adapter.d() || last.k() != adapter.k() {
                return Err(Error::shape(
                    "adapter_stack",
                    &[last.d(), last.k()],
                    &[adapter.d(), adapter.k()],
                ));
            }
            if adapter.task_id <= last.task_id {
                return Err(Error::state(format!(
                    "task ids must be strictly increasing: {} after {}",
                    adapter.task_id, last.task_id
                )));
            }
        }
        if !adapter.frozen && self.trainable_index().is_some() {
            return Err(Error::state(
                "stack already holds a non-frozen adapter; freeze it before pushing another",
            ));
        }
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for a in &mut self.adapters {
            a.freeze();
        }
    }

    pub fn trainable_index(&self) -> Option<usize> {
        self.adapters.iter().position(|a| !a.frozen)
    }

    fn sole_trainable(&self) -> Result<usize> {
        let open: Vec<usize> = self
            .adapters
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.frozen)
            .map(|(i, _)| i)
            .collect();
        match open.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::state("stack has no non-frozen adapter")),
            _ => Err(Error::state("stack has multiple non-frozen adapters")),
        }
    }

    /// W·x + Σ Aᵢ(Bᵢ x) without gradient recording.
    pub fn forward(&self, base_w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut out = base_w.matmul(x)?;
        for ad in &self.adapters {
            let bx = ad.b.matmul(x)?;
            let abx = ad.a.matmul(&bx)?;
            out = out.add(&abx)?;
        }
        Ok(out)
    }

    /// Dense W + Σ AᵢBᵢ. Requires every adapter frozen.
    pub fn merge_into_base(&self, base_w: &Tensor<S>) -> Result<Tensor<S>> {
        if self.trainable_index().is_some() {
            return Err(Error::state(
                "cannot merge while a non-frozen adapter is present",
            ));
        }
        let mut out = base_w.clone();
        for ad in &self.adapters {
            let ab = ad.a.matmul(&ad.b)?;
            if ab.shape() != out.shape() {
                return Err(Error::shape("merge_into_base", out.shape(), ab.shape()));
            }
            out = out.add(&ab)?;
        }
        Ok(out)
    }

    /// Σ over frozen adapters of ‖AᵢᵀAₜ‖²_F, without gradient recording.
    /// Requires exactly one non-frozen adapter; zero on the first task.
    pub fn total_orth_loss_value(&self) -> Result<S> {
        let t = self.sole_trainable()?;
        let mut total = S::zero();
        for (i, ad) in self.adapters.iter().enumerate() {
            if i == t {
                continue;
            }
            let p = orth_penalty(&ad.a, &self.adapters[t].a)?;
            total += p.data()[0];
        }
        Ok(total)
    }
}

/// ‖XᵀY‖²_F as a scalar tensor, no gradient recording.
pub fn orth_penalty<S: Scalar>(a_i: &Tensor<S>, a_t: &Tensor<S>) -> Result<Tensor<S>> {
    if a_i.shape().len() != 2 || a_t.shape().len() != 2 || a_i.shape()[0] != a_t.shape()[0] {
        return Err(Error::shape("orth_penalty", a_i.shape(), a_t.shape()));
    }
    let gram = a_i.transpose()?.matmul(a_t)?;
    let v: S = gram.data().iter().map(|&x| x * x).sum();
    Ok(Tensor::scalar(v))
}

// ── tape-bound forms, used inside a differentiable forward pass ────────

/// One adapter registered on a tape: A and B as leaves (trainable iff the
/// adapter is not frozen).
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub a: TensorId,
    pub b: TensorId,
    pub frozen: bool,
}

/// A stack registered on a tape together with its base weight.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub base_w: TensorId,
    pub adapters: Vec<BoundAdapter>,
}

impl<S: Scalar> AdapterStack<S> {
    /// Register the stack's adapters on a tape. The base weight must already
    /// be a leaf (trainability of base vs adapters is the caller's policy).
    pub fn bind(&self, tape: &mut Tape<S>, base_w: TensorId) -> BoundStack {
        let adapters = self
            .adapters
            .iter()
            .map(|ad| BoundAdapter {
                a: tape.leaf(&ad.a),
                b: tape.leaf(&ad.b),
                frozen: ad.frozen,
            })
            .collect();
        BoundStack {
            base_w,
            adapters,
        }
    }
}

/// W·x + Σ Aᵢ(Bᵢ x) on the tape. Gradients flow into whichever leaves were
/// registered as trainable — for a stack bound mid-training, only the
/// current task's adapter.
pub fn stack_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundStack,
    x: TensorId,
) -> Result<TensorId> {
    let mut out = tape.matmul(bound.base_w, x)?;
    for ad in &bound.adapters {
        let bx = tape.matmul(ad.b, x)?;
        let abx = tape.matmul(ad.a, bx)?;
        out = tape.add(out, abx)?;
    }
    Ok(out)
}

/// ‖AᵢᵀAₜ‖²_F on the tape.
pub fn orth_penalty_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    a_i: TensorId,
    a_t: TensorId,
) -> Result<TensorId> {
    if tape.shape(a_i).first() != tape.shape(a_t).first() {
        return Err(Error::shape("orth_penalty", tape.shape(a_i), tape.shape(a_t)));
    }
    let a_i_t = tape.transpose(a_i)?;
    let gram = tape.matmul(a_i_t, a_t)?;
    Ok(tape.frobenius_sq(gram))
}

/// Σᵢ ‖AᵢᵀAₜ‖²_F over the frozen adapters of one bound stack, as a scalar
/// node. Returns a zero constant for a first-task stack (no frozen past).
pub fn total_orth_loss<S: Scalar>(tape: &mut Tape<S>, bound: &BoundStack) -> Result<TensorId> {
    let open: Vec<usize> = bound
        .adapters
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.frozen)
        .map(|(i, _)| i)
        .collect();
    let current = match open.as_slice() {
        [i] => *i,
        [] => return Err(Error::state("stack has no non-frozen adapter")),
        _ => return Err(Error::state("stack has multiple non-frozen adapters")),
    };
    let a_t = bound.adapters[current].a;
    let mut total: Option<TensorId> = None;
    for (i, ad) in bound.adapters.iter().enumerate() {
        if i == current {
            continue;
        }
        let p = orth_penalty_on_tape(tape, ad.a, a_t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    match total {
        Some(id) => Ok(id),
        None => tape.constant(vec![1], vec![S::zero()]),
    }
}
