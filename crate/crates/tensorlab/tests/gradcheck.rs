//! Central-difference checks (h = 1e-5, double precision) for every
//! differentiable primitive on randomized small shapes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlab::{Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Contracts the op output with a fixed random tensor so every output entry
/// contributes to the scalar loss.
fn loss_of(build: &Build, inputs: &[Tensor<f64>], probe_seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(format!("in{i}"), Arc::new(t.clone())))
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = rand_tensor(&mut rng, g.shape(out));
    let p = g.constant(probe);
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v, t.shape()))
        .collect();
    (g.value(loss).item(), gs)
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let (_, analytic) = loss_of(build, &inputs, 99);
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[idx] += H;
            let mut minus = inputs.clone();
            minus[which].data_mut()[idx] -= H;
            let numeric = (loss_of(build, &plus, 99).0 - loss_of(build, &minus, 99).0) / (2.0 * H);
            let a = analytic[which].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
            assert!(
                rel <= TOL,
                "{name}: input {which}[{idx}] analytic {a} numeric {numeric} rel {rel}"
            );
        }
    }
    println!("{name}: worst relative error {worst:.2e}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..3);
        let n = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let m = rng.random_range(1..5);
        let heads = 2;
        let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);

        check("linear", &|g, v| g.linear(v[0], v[1]), vec![r(&[b, n, k]), r(&[k, m])]);
        check("affine", &|g, v| g.affine(v[0], v[1], v[2]), vec![r(&[n, k]), r(&[k, m]), r(&[m])]);
        check(
            "batch_matmul",
            &|g, v| g.batch_matmul(v[0], v[1], false),
            vec![r(&[b, n, k]), r(&[b, k, m])],
        );
        check(
            "batch_matmul_t",
            &|g, v| g.batch_matmul(v[0], v[1], true),
            vec![r(&[b, n, k]), r(&[b, m, k])],
        );
        check("add", &|g, v| g.add(v[0], v[1]), vec![r(&[n, k]), r(&[n, k])]);
        check("sub", &|g, v| g.sub(v[0], v[1]), vec![r(&[n, k]), r(&[n, k])]);
        check("mul", &|g, v| g.mul(v[0], v[1]), vec![r(&[n, k]), r(&[n, k])]);
        check("add_suffix", &|g, v| g.add_suffix(v[0], v[1]), vec![r(&[b, n, k]), r(&[n, k])]);
        check("mul_suffix", &|g, v| g.mul_suffix(v[0], v[1]), vec![r(&[b, n, k]), r(&[k])]);
        check("scale", &|g, v| g.scale(v[0], -1.7), vec![r(&[n, k])]);
        check("add_scalar", &|g, v| g.add_scalar(v[0], 0.3), vec![r(&[n, k])]);
        check("gelu", &|g, v| g.gelu(v[0]), vec![r(&[b, n, k])]);
        check("silu", &|g, v| g.silu(v[0]), vec![r(&[b, n, k])]);
        check("square", &|g, v| g.square(v[0]), vec![r(&[n, k])]);
        for axis in 0..3 {
            check("softmax", &move |g, v| g.softmax(v[0], axis), vec![r(&[b, n + 1, k])]);
            check(
                "normalize",
                &move |g, v| g.normalize(v[0], axis, 1e-5),
                vec![r(&[b + 1, n + 1, k + 1])],
            );
        }
        check(
            "layer_norm",
            &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
            vec![r(&[b, n, k + 1]), r(&[k + 1]), r(&[k + 1])],
        );
        check("reshape", &move |g, v| g.reshape(v[0], &[n * k]), vec![r(&[n, k])]);
        check("split_heads", &move |g, v| g.split_heads(v[0], heads), vec![r(&[b, n, 2 * k])]);
        check("merge_heads", &move |g, v| g.merge_heads(v[0], heads), vec![r(&[2 * b, n, k])]);
        check("repeat_tokens", &move |g, v| g.repeat_tokens(v[0], n), vec![r(&[b, k])]);
        check("concat", &|g, v| g.concat(v[0], v[1]), vec![r(&[b, n, k]), r(&[b, n, m])]);
        check("sum", &|g, v| g.sum(v[0]), vec![r(&[n, k])]);
        check("mean", &|g, v| g.mean(v[0]), vec![r(&[n, k])]);
        check("mse", &|g, v| g.mse(v[0], v[1]), vec![r(&[n, k]), r(&[n, k])]);
    }
}

#[test]
fn composite_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    // A miniature attention block: projections, per-head softmax, gelu MLP.
    let chain = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let q = g.linear(v[0], v[1])?;
        let k = g.linear(v[0], v[2])?;
        let qh = g.split_heads(q, 2)?;
        let kh = g.split_heads(k, 2)?;
        let logits = g.batch_matmul(qh, kh, true)?;
        let logits = g.scale(logits, 0.5)?;
        let att = g.softmax(logits, 2)?;
        let mixed = g.batch_matmul(att, kh, false)?;
        let merged = g.merge_heads(mixed, 2)?;
        let normed = g.normalize(merged, 2, 1e-6)?;
        let h = g.gelu(normed)?;
        let s = g.silu(h)?;
        g.add(s, v[0])
    };
    check("attention_chain", &chain, vec![r(&[2, 3, 4]), r(&[4, 4]), r(&[4, 4])]);
}
