//! Finite-difference verification of every tape primitive, plus optimizer
//! step-size and determinism checks.
//!
//! Each check builds a scalar function of one input array through the
//! primitive under test, compares the reverse-mode gradient against central
//! differences with step 1e-5, and requires relative error below 1e-6
//! (these are smooth small graphs; the looser 1e-4 budget belongs to the
//! full-model check in the trainer suite).

use odcast::autodiff::{Array, NodeId, ParameterStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`, perturbing one coordinate at
/// a time.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + FD_STEP;
        let up = f(&xp);
        xp[i] = orig - FD_STEP;
        let down = f(&xp);
        xp[i] = orig;
        g[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for i in 0..analytic.len() {
        let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-8);
        let rel = (analytic[i] - numeric[i]).abs() / denom;
        assert!(
            rel < REL_TOL,
            "{what}[{i}]: analytic {} vs numeric {} (rel {rel})",
            analytic[i],
            numeric[i]
        );
    }
}

/// Check one primitive: `build` wires input node → scalar loss on a fresh
/// tape; the input is perturbed entrywise for the numeric side.
fn check_unary_graph(
    shape: &[usize],
    x0: &[f64],
    build: &dyn Fn(&mut Tape, NodeId) -> NodeId,
    what: &str,
) {
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let inp = tape.leaf(Array::new(shape.to_vec(), x.to_vec()).unwrap());
        let out = build(&mut tape, inp);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let inp = tape.leaf(Array::new(shape.to_vec(), x0.to_vec()).unwrap());
    let out = build(&mut tape, inp);
    tape.backward(out).unwrap();
    let analytic = tape.grad(inp).unwrap().data().to_vec();
    let numeric = fd_grad(&eval, x0);
    assert_close(&analytic, &numeric, what);
}

fn rng_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn elementwise_binary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2usize, 3];
    let a0 = rng_vec(&mut rng, 6, 0.5, 2.0);
    let b0 = rng_vec(&mut rng, 6, 0.5, 2.0);
    type BinOp = fn(&mut Tape, NodeId, NodeId) -> NodeId;
    let cases: Vec<(&str, BinOp)> = vec![
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("div", |t, a, b| t.div(a, b).unwrap()),
        ("pow", |t, a, b| t.pow(a, b).unwrap()),
    ];
    for (name, op) in cases {
        // Gradient w.r.t. the left operand.
        check_unary_graph(
            &shape,
            &a0,
            &|t, inp| {
                let b = t.leaf(Array::new(shape.to_vec(), b0.clone()).unwrap());
                let o = op(t, inp, b);
                t.reduce_sum(o)
            },
            &format!("{name}.lhs"),
        );
        // Gradient w.r.t. the right operand.
        check_unary_graph(
            &shape,
            &b0,
            &|t, inp| {
                let a = t.leaf(Array::new(shape.to_vec(), a0.clone()).unwrap());
                let o = op(t, a, inp);
                t.reduce_sum(o)
            },
            &format!("{name}.rhs"),
        );
    }
}

#[test]
fn pow_reference_gradients() {
    // d(a^b)/da = b·a^(b−1) = 12 and d(a^b)/db = a^b·ln a = 8 ln 2 at (2, 3).
    let mut tape = Tape::new();
    let a = tape.leaf(Array::scalar(2.0));
    let b = tape.leaf(Array::scalar(3.0));
    let z = tape.pow(a, b).unwrap();
    tape.backward(z).unwrap();
    let ga = tape.grad(a).unwrap().item();
    let gb = tape.grad(b).unwrap().item();
    assert!((ga - 12.0).abs() < 1e-9, "{ga}");
    assert!((gb - 8.0 * 2.0f64.ln()).abs() < 1e-9, "{gb}");
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [3usize, 2];
    // Positive inputs keep log/lgamma in-domain; offsets away from 0 keep
    // relu off its kink (FD is meaningless at non-differentiable points).
    let x0 = rng_vec(&mut rng, 6, 0.4, 2.5);
    type UnOp = fn(&mut Tape, NodeId) -> NodeId;
    let cases: Vec<(&str, UnOp)> = vec![
        ("log", |t, a| t.log(a)),
        ("exp", |t, a| t.exp(a)),
        ("relu", |t, a| t.relu(a)),
        ("sigmoid", |t, a| t.sigmoid(a)),
        ("lgamma", |t, a| t.lgamma(a)),
    ];
    for (name, op) in cases {
        check_unary_graph(
            &shape,
            &x0,
            &|t, inp| {
                let o = op(t, inp);
                // Weight entries unequally so reductions can't hide errors.
                let w = t.leaf(
                    Array::new(shape.to_vec(), vec![1.0, -0.5, 2.0, 0.25, -1.5, 0.75]).unwrap(),
                );
                let wo = t.mul(o, w).unwrap();
                t.reduce_sum(wo)
            },
            name,
        );
    }
}

#[test]
fn relu_negative_side_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::new(vec![1, 2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x);
    let s = tape.reduce_sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = rng_vec(&mut rng, 6, -1.0, 1.0); // 2×3
    let b0 = rng_vec(&mut rng, 12, -1.0, 1.0); // 3×4
    check_unary_graph(
        &[2, 3],
        &a0,
        &|t, inp| {
            let b = t.leaf(Array::new(vec![3, 4], b0.clone()).unwrap());
            let o = t.matmul(inp, b).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.reduce_sum(sq)
        },
        "matmul.lhs",
    );
    check_unary_graph(
        &[3, 4],
        &b0,
        &|t, inp| {
            let a = t.leaf(Array::new(vec![2, 3], a0.clone()).unwrap());
            let o = t.matmul(a, inp).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.reduce_sum(sq)
        },
        "matmul.rhs",
    );
}

#[test]
fn reduce_and_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = rng_vec(&mut rng, 8, -2.0, 2.0);
    check_unary_graph(
        &[2, 4],
        &x0,
        &|t, inp| {
            let r = t.reshape(inp, &[4, 2]).unwrap();
            let sq = t.mul(r, r).unwrap();
            t.reduce_mean(sq)
        },
        "reshape+reduce_mean",
    );
}

#[test]
fn broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b0 = rng_vec(&mut rng, 3, -1.0, 1.0); // [1, 3] bias
    check_unary_graph(
        &[1, 3],
        &b0,
        &|t, inp| {
            let x = t.leaf(Array::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap());
            let b = t.broadcast(inp, &[4, 3]).unwrap();
            let s = t.add(x, b).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.reduce_sum(sq)
        },
        "broadcast",
    );
}

#[test]
fn slice_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = rng_vec(&mut rng, 12, -1.5, 1.5); // [3, 4]
    check_unary_graph(
        &[3, 4],
        &x0,
        &|t, inp| {
            let sl = t.slice(inp, 1, 1, 2).unwrap(); // columns 1..3
            let sq = t.mul(sl, sl).unwrap();
            t.reduce_sum(sq)
        },
        "slice",
    );
    check_unary_graph(
        &[3, 4],
        &x0,
        &|t, inp| {
            let other = t.leaf(Array::full(&[3, 2], 0.7));
            let cat = t.concat(&[inp, other], 1).unwrap();
            let sq = t.mul(cat, cat).unwrap();
            t.reduce_sum(sq)
        },
        "concat",
    );
}

#[test]
fn causal_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Input [v=2, t=5, c_in=3], weight [c_out=2, c_in=3, k=2], dilation 2.
    let x0 = rng_vec(&mut rng, 30, -1.0, 1.0);
    let w0 = rng_vec(&mut rng, 12, -1.0, 1.0);
    check_unary_graph(
        &[2, 5, 3],
        &x0,
        &|t, inp| {
            let w = t.leaf(Array::new(vec![2, 3, 2], w0.clone()).unwrap());
            let o = t.causal_conv1d(inp, w, 2).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.reduce_sum(sq)
        },
        "causal_conv1d.input",
    );
    check_unary_graph(
        &[2, 3, 2],
        &w0,
        &|t, inp| {
            let x = t.leaf(Array::new(vec![2, 5, 3], x0.clone()).unwrap());
            let o = t.causal_conv1d(x, inp, 2).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.reduce_sum(sq)
        },
        "causal_conv1d.weight",
    );
}

#[test]
fn dropout_gradient_is_the_realized_mask() {
    // With a fixed seed the mask is deterministic, so FD and reverse mode
    // see the same realized function.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = rng_vec(&mut rng, 40, 0.5, 1.5);
    check_unary_graph(
        &[4, 10],
        &x0,
        &|t, inp| {
            let d = t.dropout(inp, 0.5, 99, true).unwrap();
            let sq = t.mul(d, d).unwrap();
            t.reduce_sum(sq)
        },
        "dropout",
    );
}

#[test]
fn fanout_accumulates_gradients() {
    // y = x·x + x at x = 3: dy/dx = 2x + 1 = 7.
    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 7.0);
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    // With fresh moments the bias-corrected first update is exactly
    // lr · g/|g| per coordinate (up to eps), regardless of gradient scale.
    let mut store = ParameterStore::new();
    store.add("w", Array::new(vec![1, 2], vec![5.0, -3.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let ids = store.attach(&mut tape);
    let scale = tape.leaf(Array::new(vec![1, 2], vec![100.0, 0.01]).unwrap());
    let prod = tape.mul(ids[0], scale).unwrap();
    let loss = tape.reduce_sum(prod);
    tape.backward(loss).unwrap();
    store.collect_grads(&tape, &ids).unwrap();
    store.adam_step(0.05, 0.9, 0.999, 1e-8, 0.0).unwrap();
    let w = store.get("w").unwrap().data();
    // Both gradients are positive (100 and 0.01), so both coordinates move
    // down by exactly lr.
    assert!((w[0] - (5.0 - 0.05)).abs() < 1e-6, "{}", w[0]);
    assert!((w[1] - (-3.0 - 0.05)).abs() < 1e-6, "{}", w[1]);
}

#[test]
fn identical_seeds_reproduce_dropout_masks() {
    let x = Array::full(&[8, 8], 1.0);
    let run = |seed: u64| -> Vec<f64> {
        let mut tape = Tape::new();
        let inp = tape.leaf(x.clone());
        let d = tape.dropout(inp, 0.3, seed, true).unwrap();
        tape.value(d).data().to_vec()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}
