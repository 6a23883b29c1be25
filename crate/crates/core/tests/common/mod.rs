//! Shared helpers for integration tests: the central finite-difference
//! gradient oracle and the per-op scenario runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pewave_core::kernels::PeriodicKind;
use pewave_core::tape::{Tape, Var};
use pewave_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape, data).unwrap()
}

/// Away-from-zero samples for kinked ops: |x| in [0.1, 1].
pub fn uniform_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            sign * (0.1 + 0.9 * rng.random::<f64>())
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Compare analytic gradients of `f` against central differences on every
/// element of every input. Returns the worst relative error.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false).unwrap())
            .collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic[i].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel <= FD_TOL,
                "{name}: input {i} element {e}: analytic {a} vs fd {fd} (rel {rel:.3e})"
            );
        }
    }
    worst
}

/// Weighted sum of all elements, so each output element gets a distinct
/// upstream gradient.
pub fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Every differentiable op, by scenario name.
pub const OP_SCENARIOS: &[&str] = &[
    "matmul_2d",
    "matmul_batched",
    "bmm",
    "transpose",
    "add",
    "add_bias",
    "mul",
    "scale",
    "relu",
    "softmax",
    "softmax_masked",
    "layer_norm",
    "embedding_lookup",
    "split_heads",
    "merge_heads",
    "rope",
    "cross_entropy",
    "sum",
    "dropout",
];

/// Run one finite-difference check of the named op at the given seed;
/// returns the worst relative error observed.
pub fn check_op(name: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "matmul_2d" => {
            let a = uniform(&mut rng, vec![3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, vec![4, 2], -1.0, 1.0);
            let w = uniform(&mut rng, vec![3, 2], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "matmul_batched" => {
            let a = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, vec![4, 2], -1.0, 1.0);
            let w = uniform(&mut rng, vec![2, 3, 2], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "bmm" => {
            let a = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, vec![2, 4, 2], -1.0, 1.0);
            let w = uniform(&mut rng, vec![2, 3, 2], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.bmm(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "transpose" => {
            let a = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
            let w = uniform(&mut rng, vec![2, 4, 3], -1.0, 1.0);
            gradcheck(name, &[a], |tape, vars| {
                let y = tape.transpose_last(vars[0]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "add" => {
            let a = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let b = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.add(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "add_bias" => {
            let a = uniform(&mut rng, vec![4, 3], -1.0, 1.0);
            let b = uniform(&mut rng, vec![3], -1.0, 1.0);
            let w = uniform(&mut rng, vec![4, 3], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.add_bias(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "mul" => {
            let a = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let b = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            gradcheck(name, &[a, b], |tape, vars| {
                let y = tape.mul(vars[0], vars[1]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "scale" => {
            let a = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            gradcheck(name, &[a], |tape, vars| {
                let y = tape.scale(vars[0], -1.7).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "relu" => {
            let a = uniform_off_kink(&mut rng, vec![4, 4]);
            let w = uniform(&mut rng, vec![4, 4], -1.0, 1.0);
            gradcheck(name, &[a], |tape, vars| {
                let y = tape.relu(vars[0]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "softmax" => {
            let a = uniform(&mut rng, vec![3, 5], -2.0, 2.0);
            let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            gradcheck(name, &[a], |tape, vars| {
                let y = tape.softmax_rows(vars[0], None).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "softmax_masked" => {
            let a = uniform(&mut rng, vec![3, 5], -2.0, 2.0);
            let w = uniform(&mut rng, vec![3, 5], -1.0, 1.0);
            let mut mask = Tensor::zeros(vec![3, 5]);
            mask.data_mut()[4] = -1e30;
            mask.data_mut()[7] = -1e30;
            gradcheck(name, &[a], |tape, vars| {
                let y = tape.softmax_rows(vars[0], Some(&mask)).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "layer_norm" => {
            let x = uniform(&mut rng, vec![4, 6], -2.0, 2.0);
            let gamma = uniform(&mut rng, vec![6], 0.5, 1.5);
            let beta = uniform(&mut rng, vec![6], -0.5, 0.5);
            let w = uniform(&mut rng, vec![4, 6], -1.0, 1.0);
            gradcheck(name, &[x, gamma, beta], |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "embedding_lookup" => {
            let table = uniform(&mut rng, vec![6, 4], -1.0, 1.0);
            let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
            let w = uniform(&mut rng, vec![5, 4], -1.0, 1.0);
            gradcheck(name, &[table], |tape, vars| {
                let y = tape.embedding_lookup(vars[0], &ids, &[5]).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "split_heads" => {
            let x = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
            let w = uniform(&mut rng, vec![4, 3, 2], -1.0, 1.0);
            gradcheck(name, &[x], |tape, vars| {
                let y = tape.split_heads(vars[0], 2).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "merge_heads" => {
            let x = uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
            let w = uniform(&mut rng, vec![1, 3, 8], -1.0, 1.0);
            gradcheck(name, &[x], |tape, vars| {
                let y = tape.merge_heads(vars[0], 2).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "rope" => {
            let kind = PeriodicKind::ALL[(seed % 4) as usize];
            let x = uniform(&mut rng, vec![2, 4, 6], -1.0, 1.0);
            let w = uniform(&mut rng, vec![2, 4, 6], -1.0, 1.0);
            gradcheck(name, &[x], |tape, vars| {
                let y = tape.rope_apply(vars[0], kind, 100.0).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        "cross_entropy" => {
            let logits = uniform(&mut rng, vec![5, 4], -2.0, 2.0);
            let ignore = 0usize;
            let targets: Vec<usize> = (0..5)
                .map(|i| if i == 2 { ignore } else { rng.random_range(1..4) })
                .collect();
            gradcheck(name, &[logits], |tape, vars| {
                tape.cross_entropy_with_ignore(vars[0], &targets, ignore)
                    .unwrap()
            })
        }
        "sum" => {
            let x = uniform(&mut rng, vec![8], -2.0, 2.0);
            gradcheck(name, &[x], |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]).unwrap();
                tape.sum(sq).unwrap()
            })
        }
        "dropout" => {
            let x = uniform(&mut rng, vec![4, 4], -1.0, 1.0);
            let w = uniform(&mut rng, vec![4, 4], -1.0, 1.0);
            // a fixed rng seed inside the closure keeps the mask identical
            // across the analytic run and every finite-difference re-run
            gradcheck(name, &[x], |tape, vars| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(42 + seed);
                let y = tape.dropout(vars[0], 0.3, &mut mask_rng).unwrap();
                weighted_loss(tape, y, &w)
            })
        }
        other => panic!("unknown op scenario '{other}'"),
    }
}
