use std::sync::Arc;

use proptest::prelude::*;
use tensorlab::{Graph, Tensor};

fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

proptest! {
    #[test]
    fn matmul_equals_triple_loop_exactly(
        (m, k, n, a, b) in (1usize..=8, 0usize..=8, 1usize..=8).prop_flat_map(|(m, k, n)| (
            Just(m), Just(k), Just(n),
            proptest::collection::vec(-10.0f64..10.0, m * k),
            proptest::collection::vec(-10.0f64..10.0, k * n),
        ))
    ) {
        let ta = Tensor::new(&[m, k], a.clone()).unwrap();
        let tb = Tensor::new(&[k, n], b.clone()).unwrap();
        let got = ta.matmul(&tb).unwrap().into_data();
        prop_assert_eq!(got, naive_matmul(m, k, n, &a, &b));
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let single = Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).unwrap();
        let t = Tensor::new(&[v.len()], v).unwrap().softmax(0).unwrap();
        prop_assert!((t.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(t.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let single = single.softmax(0).unwrap();
        prop_assert!((single.sum() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn identity_matmul_returns_operand() {
    let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.3, -7.0], vec![2.5, 1e-9]]).unwrap();
    assert_eq!(i2.matmul(&b).unwrap(), b);
}

#[test]
fn softmax_examples() {
    let uniform = Tensor::<f64>::zeros(&[4]).softmax(0).unwrap();
    assert_eq!(uniform.data(), &[0.25; 4]);

    let big = Tensor::new(&[2], vec![1000.0f64, 0.0]).unwrap().softmax(0).unwrap();
    assert!((big.data()[0] - 1.0).abs() <= 1e-12 && big.data()[1].abs() <= 1e-12);
    assert!(big.is_finite());

    let logs = Tensor::new(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    let p = logs.softmax(0).unwrap();
    for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

fn run_layer_norm(v: Vec<f64>, scale: f64, shift: f64) -> Vec<f64> {
    let n = v.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[n], v).unwrap());
    let s = g.constant(Tensor::full(&[n], scale));
    let b = g.constant(Tensor::full(&[n], shift));
    let y = g.layer_norm(x, s, b, 1e-6).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(run_layer_norm(vec![3.0; 5], 1.0, 0.0).iter().all(|&v| v == 0.0));
    let pair = run_layer_norm(vec![1.0, -1.0], 1.0, 0.0);
    assert!((pair[0] - 1.0).abs() < 1e-6 && (pair[1] + 1.0).abs() < 1e-6);
    assert!(run_layer_norm(vec![4.0, -2.0, 9.0], 0.0, 2.5).iter().all(|&v| v == 2.5));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 1.0, 30.0]).unwrap());
    let y = g.gelu(x).unwrap();
    let out = g.value(y).data();
    assert_eq!(out[0], 0.0);
    // Φ(1) = 0.841344746068543 from high-precision erf.
    assert!((out[1] - 0.841_344_746_068_543).abs() < 1e-12);
    assert!((out[2] - 30.0).abs() < 1e-12);
}

#[test]
fn forward_ops_stay_finite_on_finite_inputs() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[2, 3, 8], |i| (i as f32 - 20.0) * 40.0));
    let w = g.param("w", Arc::new(Tensor::from_fn(&[8, 8], |i| (i as f32).sin())));
    let y = g.linear(x, w).unwrap();
    let y = g.softmax(y, 2).unwrap();
    let c = g.constant(Tensor::full(&[2, 3, 8], 5.0));
    let y = g.add(y, c).unwrap();
    let y = g.normalize(y, 2, 1e-5).unwrap();
    let y = g.gelu(y).unwrap();
    assert!(g.value(y).is_finite());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let w = g.param("w", Arc::new(Tensor::from_fn(&[6, 6], |i| (i as f32 * 0.3).cos())));
        let x = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.7).sin()));
        let y = g.linear(x, w).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let l = g.sum(y).unwrap();
        let l2 = g.square(l).unwrap();
        g.backward(l2).unwrap().get(w).unwrap().clone()
    };
    assert_eq!(run(), run());
}
