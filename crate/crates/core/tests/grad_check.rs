//! Central-difference verification of every differentiable tape op, at f64
//! with step 1e-3 and 1e-3 relative tolerance, over ≥20 random instances
//! each. The numeric side only ever evaluates forward values, so it cannot
//! inherit a bug from the backward rules it checks.

use olora_core::gradcheck::{assert_gradient_close, central_difference, max_relative_error};
use olora_core::tensor::tape::{Tape, TensorId};
use olora_core::{Tensor, Tensor64};

const TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor64 {
    Tensor::randn(shape, 1.0, seed).unwrap()
}

/// Check ∂scalar-output/∂leaf for a graph builder, on one leaf.
fn check_unary<F>(name: &str, leaf: Tensor64, build: F)
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    let leaf = leaf.with_grad();
    let mut tape = Tape::new();
    let x = tape.leaf(&leaf);
    let loss = build(&mut tape, x);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).expect("leaf requires grad").to_vec();
    assert_gradient_close(
        name,
        &leaf,
        &analytic,
        |probe| {
            let mut tape = Tape::new();
            let x = tape.leaf(probe);
            let loss = build(&mut tape, x);
            tape.scalar_value(loss)
        },
        TOL,
    );
}

/// Check both leaves of a binary graph.
fn check_binary<F>(name: &str, a: Tensor64, b: Tensor64, build: F)
where
    F: Fn(&mut Tape<f64>, TensorId, TensorId) -> TensorId,
{
    let a = a.with_grad();
    let b = b.with_grad();
    let mut tape = Tape::new();
    let ia = tape.leaf(&a);
    let ib = tape.leaf(&b);
    let loss = build(&mut tape, ia, ib);
    tape.backward(loss).unwrap();
    let ga = tape.grad(ia).unwrap().to_vec();
    let gb = tape.grad(ib).unwrap().to_vec();
    assert_gradient_close(
        &format!("{name}/lhs"),
        &a,
        &ga,
        |probe| {
            let mut tape = Tape::new();
            let ia = tape.leaf(probe);
            let ib = tape.leaf(&b);
            let loss = build(&mut tape, ia, ib);
            tape.scalar_value(loss)
        },
        TOL,
    );
    assert_gradient_close(
        &format!("{name}/rhs"),
        &b,
        &gb,
        |probe| {
            let mut tape = Tape::new();
            let ia = tape.leaf(&a);
            let ib = tape.leaf(probe);
            let loss = build(&mut tape, ia, ib);
            tape.scalar_value(loss)
        },
        TOL,
    );
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        check_binary(
            "matmul",
            randn(vec![3, 4], seed * 2 + 1),
            randn(vec![4, 2], seed * 2 + 2),
            |tape, a, b| {
                let c = tape.matmul(a, b).unwrap();
                tape.frobenius_sq(c)
            },
        );
    }
}

#[test]
fn matmul_chain_matches_finite_differences() {
    // random 3×3 chain: frob((A·B)·C-ish) exercised through two products
    for seed in 0..INSTANCES {
        check_binary(
            "matmul_chain",
            randn(vec![3, 3], seed * 3 + 100),
            randn(vec![3, 3], seed * 3 + 101),
            |tape, a, b| {
                let ab = tape.matmul(a, b).unwrap();
                let abb = tape.matmul(ab, b).unwrap();
                tape.frobenius_sq(abb)
            },
        );
    }
}

#[test]
fn add_and_mul_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        check_binary(
            "add",
            randn(vec![2, 5], seed + 200),
            randn(vec![2, 5], seed + 300),
            |tape, a, b| {
                let c = tape.add(a, b).unwrap();
                tape.frobenius_sq(c)
            },
        );
        check_binary(
            "mul",
            randn(vec![2, 5], seed + 400),
            randn(vec![2, 5], seed + 500),
            |tape, a, b| {
                let c = tape.mul(a, b).unwrap();
                tape.frobenius_sq(c)
            },
        );
    }
}

#[test]
fn transpose_and_scale_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let w = randn(vec![5, 3], seed + 2600);
        check_unary("transpose", randn(vec![3, 5], seed + 600), move |tape, x| {
            let t = tape.transpose(x).unwrap();
            let wid = tape.leaf(&w);
            let weighted = tape.mul(t, wid).unwrap();
            let s = tape.scale(weighted, 0.7);
            tape.frobenius_sq(s)
        });
    }
}

#[test]
fn bias_add_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        check_binary(
            "bias_add",
            randn(vec![4, 3], seed + 700),
            randn(vec![4], seed + 800),
            |tape, x, b| {
                let c = tape.bias_add(x, b).unwrap();
                tape.frobenius_sq(c)
            },
        );
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        // weight rows so the gradient is not identically zero by symmetry
        let w = randn(vec![2, 4], seed + 1900);
        check_unary("softmax_rows", randn(vec![2, 4], seed + 900), move |tape, x| {
            let p = tape.softmax_rows(x).unwrap();
            let wid = tape.leaf(&w);
            let weighted = tape.mul(p, wid).unwrap();
            tape.frobenius_sq(weighted)
        });
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let targets = vec![(seed % 3) as usize, ((seed + 1) % 3) as usize];
        check_unary("cross_entropy", randn(vec![2, 3], seed + 1000), move |tape, x| {
            tape.cross_entropy(x, &targets).unwrap()
        });
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let x = randn(vec![4, 3], seed + 1100);
        let gain = randn(vec![4], seed + 1200);
        let bias = randn(vec![4], seed + 1300);
        // input gradient
        {
            let g = gain.clone();
            let b = bias.clone();
            check_unary("layer_norm/x", x.clone(), move |tape, xi| {
                let gi = tape.leaf(&g);
                let bi = tape.leaf(&b);
                let y = tape.layer_norm_cols(xi, gi, bi).unwrap();
                tape.frobenius_sq(y)
            });
        }
        // gain and bias gradients
        {
            let xv = x.clone();
            check_binary("layer_norm/params", gain, bias, move |tape, gi, bi| {
                let xi = tape.leaf(&xv);
                let y = tape.layer_norm_cols(xi, gi, bi).unwrap();
                tape.frobenius_sq(y)
            });
        }
    }
}

#[test]
fn gelu_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        check_unary("gelu", randn(vec![3, 3], seed + 1400), |tape, x| {
            let y = tape.gelu(x);
            tape.frobenius_sq(y)
        });
    }
}

#[test]
fn embedding_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let indices = vec![0usize, 2, 1, 2];
        check_unary("embed", randn(vec![4, 3], seed + 1500), move |tape, table| {
            let e = tape.embed(table, &indices).unwrap();
            tape.frobenius_sq(e)
        });
    }
}

#[test]
fn slice_and_concat_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        check_unary("slice_rows", randn(vec![6, 3], seed + 1600), |tape, x| {
            let top = tape.slice_rows(x, 0, 2).unwrap();
            let bottom = tape.slice_rows(x, 4, 6).unwrap();
            let cat = tape.concat_rows(&[bottom, top]).unwrap();
            tape.frobenius_sq(cat)
        });
        check_unary("slice_cols", randn(vec![3, 6], seed + 1700), |tape, x| {
            let mid = tape.slice_cols(x, 1, 4).unwrap();
            tape.frobenius_sq(mid)
        });
    }
}

#[test]
fn orth_penalty_gradient_flows_into_current_only() {
    use olora_core::lora;
    for seed in 0..INSTANCES {
        let past = randn(vec![5, 2], seed + 1800);
        let current = randn(vec![5, 3], seed + 1810).with_grad();
        let mut tape = Tape::new();
        let past_id = tape.leaf(&past); // constant
        let cur_id = tape.leaf(&current);
        let p = lora::orth_penalty_on_tape(&mut tape, past_id, cur_id).unwrap();
        tape.backward(p).unwrap();
        assert!(tape.grad(past_id).is_none(), "frozen side must get no gradient");
        let analytic = tape.grad(cur_id).unwrap().to_vec();

        let numeric = central_difference(
            &current,
            |probe| {
                let mut tape = Tape::new();
                let past_id = tape.leaf(&past);
                let cur_id = tape.leaf(probe);
                let p = lora::orth_penalty_on_tape(&mut tape, past_id, cur_id).unwrap();
                tape.scalar_value(p)
            },
            1e-3,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err <= TOL, "orth_penalty rel err {err}");
    }
}
