//! Central finite-difference checks for every differentiable op.

use gradtape::{AttentionShape, Graph, Tensor, Var};
use proptest::prelude::*;

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.next()).collect())
    }
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var, rng: &mut Lcg) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = rng.tensor(&shape);
    let value: f64 = g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    g.custom_scalar(value, vec![(out, w)])
}

/// Builds the graph from `inputs` with `build`, then compares the analytic
/// gradient of every input with central differences.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = Lcg(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights_seed = rng.0;
    let loss = project(&mut g, out, &mut rng);
    let mut grads = g.backward(loss);
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let mut rng = Lcg(weights_seed);
        let loss = project(&mut g, out, &mut rng);
        g.value(loss).data()[0]
    };
    let h = 1e-5;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).expect("input gradient");
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                err < 1e-6 || (a - numeric).abs() < 1e-8,
                "input {i} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn linear_with_bias() {
    let mut r = Lcg(1);
    check(vec![r.tensor(&[5, 3]), r.tensor(&[3, 4]), r.tensor(&[4])], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn matmul_and_elementwise() {
    let mut r = Lcg(2);
    check(vec![r.tensor(&[3, 4]), r.tensor(&[4, 2]), r.tensor(&[3, 2])], |g, v| {
        let m = g.matmul(v[0], v[1]);
        let a = g.add(m, v[2]);
        let s = g.sub(a, v[2]);
        let p = g.mul(s, v[2]);
        let c = g.scale(p, 0.7);
        g.mul_const(c, vec![1.0, 0.0, 2.0, 1.0, 0.5, 3.0])
    });
}

#[test]
fn gelu() {
    let mut r = Lcg(3);
    check(vec![r.tensor(&[4, 5]).map(|x| 3.0 * x)], |g, v| g.gelu(v[0]));
}

#[test]
fn layer_norm() {
    let mut r = Lcg(4);
    check(vec![r.tensor(&[4, 6]), r.tensor(&[6]), r.tensor(&[6])], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn attention_with_padding() {
    let mut r = Lcg(5);
    let shape = AttentionShape {
        batch: 2,
        seq: 4,
        heads: 2,
    };
    let valid = vec![true, true, true, false, false, true, true, true];
    check(
        vec![r.tensor(&[8, 6]), r.tensor(&[8, 6]), r.tensor(&[8, 6])],
        move |g, v| g.attention(v[0], v[1], v[2], shape, &valid),
    );
}

#[test]
fn gather_pool_normalize() {
    let mut r = Lcg(6);
    let valid = vec![true, false, true, true, true, true];
    check(vec![r.tensor(&[3, 4]), r.tensor(&[6, 4])], move |g, v| {
        let e = g.gather_rows(v[0], vec![Some(0), None, Some(2), Some(1), Some(1), None]);
        let s = g.add(e, v[1]);
        let p = g.masked_mean_rows(s, 2, 3, &valid);
        g.l2_normalize_rows(p)
    });
}

#[test]
fn attention_single_valid_key_is_point_mass() {
    let mut r = Lcg(7);
    let mut g = Graph::new();
    let q = g.constant(r.tensor(&[3, 4]));
    let k = g.constant(r.tensor(&[3, 4]));
    let v = g.constant(r.tensor(&[3, 4]));
    let shape = AttentionShape {
        batch: 1,
        seq: 3,
        heads: 2,
    };
    let out = g.attention(q, k, v, shape, &[false, true, false]);
    let (probs, _) = g.attention_probs(out).unwrap();
    for head in probs.chunks(9) {
        for row in head.chunks(3) {
            assert_eq!(row, &[0.0, 1.0, 0.0]);
        }
    }
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, pad in 0usize..5) {
        let mut r = Lcg(seed);
        let seq = 6;
        let mut g = Graph::<f32>::new();
        let q = g.constant(r.tensor(&[seq, 8]).map(|x| 4.0 * x).cast());
        let k = g.constant(r.tensor(&[seq, 8]).map(|x| 4.0 * x).cast());
        let v = g.constant(r.tensor(&[seq, 8]).cast());
        let valid: Vec<bool> = (0..seq).map(|t| t < seq - pad).collect();
        let shape = AttentionShape { batch: 1, seq, heads: 2 };
        let out = g.attention(q, k, v, shape, &valid);
        let (probs, _) = g.attention_probs(out).unwrap();
        for row in probs.chunks(seq) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            for (p, ok) in row.iter().zip(&valid) {
                prop_assert!(*p >= 0.0);
                if !ok { prop_assert_eq!(*p, 0.0); }
            }
        }
    }
}
