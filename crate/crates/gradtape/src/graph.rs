use crate::gemm::{gemm, View, ViewMut};
use crate::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch layout for the fused multi-head attention op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op<S> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<S>),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<S>,
    },
    GatherRows {
        table: Var,
        index: Vec<Option<usize>>,
    },
    MaskedMeanRows {
        x: Var,
        batch: usize,
        seq: usize,
        valid: Vec<bool>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    /// Scalar whose local gradients with respect to its inputs were computed
    /// by the caller.
    Custom {
        inputs: Vec<(Var, Tensor<S>)>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is differentiated but is not a parameter (used by gradient
    /// checks that probe inputs).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.param(value)
    }

    /// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fan_in) = self.value(x).dims2();
        let (w_in, fan_out) = self.value(w).dims2();
        assert_eq!(fan_in, w_in, "linear: input width {fan_in} vs weight rows {w_in}");
        let mut out = vec![S::zero(); n * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), fan_out, "linear: bias width");
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            S::one(),
            View::dense(self.value(x).data(), n, fan_in),
            View::dense(self.value(w).data(), fan_in, fan_out),
            beta,
            ViewMut::dense(&mut out, n, fan_out),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(&[n, fan_out], out), Op::Linear { x, w, b }, &parents)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            View::dense(self.value(a).data(), m, k),
            View::dense(self.value(b).data(), k, n),
            S::zero(),
            ViewMut::dense(&mut out, m, n),
        );
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "element-wise shapes differ");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Element-wise product with an untracked factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<S>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), factor.len(), "mul_const length");
        let data = ta.data().iter().zip(&factor).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data);
        self.push(out, Op::MulConst(a, factor), &[a])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (S::of(GELU_C), S::of(GELU_A));
        let half = S::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.value(x).dims2();
        let eps = S::of(eps);
        let inv_d = S::one() / S::of(d as f64);
        let mut xhat = vec![S::zero(); n * d];
        let mut rstd = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            assert_eq!(g.len(), d, "layer_norm gamma width");
            assert_eq!(b.len(), d, "layer_norm beta width");
            for r in 0..n {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
        }
        self.push(
            Tensor::new(&[n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Fused scaled dot-product multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`. Keys where
    /// `key_valid` is false receive zero probability. A query whose sequence
    /// has no valid key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_valid: &[bool],
    ) -> Var {
        let AttentionShape { batch, seq, heads } = shape;
        let (rows, width) = self.value(q).dims2();
        assert_eq!(rows, batch * seq, "attention rows");
        assert_eq!(self.value(k).dims2(), (rows, width), "attention key shape");
        assert_eq!(self.value(v).dims2(), (rows, width), "attention value shape");
        assert_eq!(key_valid.len(), rows, "attention key mask length");
        assert_eq!(width % heads, 0, "width divisible by heads");
        let dh = width / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); rows * width];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            let valid = &key_valid[b * seq..(b + 1) * seq];
            let any_valid = valid.iter().any(|&x| x);
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                let p = &mut probs[base..base + seq * seq];
                if !any_valid {
                    continue;
                }
                gemm(
                    scale,
                    View::block(qd, width, b * seq, seq, h * dh, dh),
                    View::block(kd, width, b * seq, seq, h * dh, dh).t(),
                    S::zero(),
                    ViewMut::dense(p, seq, seq),
                );
                for row in p.chunks_mut(seq) {
                    softmax_masked(row, valid);
                }
                gemm(
                    S::one(),
                    View::dense(p, seq, seq),
                    View::block(vd, width, b * seq, seq, h * dh, dh),
                    S::zero(),
                    ViewMut::block(&mut out, width, b * seq, seq, h * dh, dh),
                );
            }
        }
        self.push(
            Tensor::new(&[rows, width], out),
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities `[batch, heads, seq, seq]` recorded by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[S], AttentionShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, *shape)),
            _ => None,
        }
    }

    /// Row `i` of the output is `table[index[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, table: Var, index: Vec<Option<usize>>) -> Var {
        let (r, d) = self.value(table).dims2();
        let t = self.value(table).data();
        let mut out = vec![S::zero(); index.len() * d];
        for (i, idx) in index.iter().enumerate() {
            if let Some(j) = *idx {
                assert!(j < r, "gather index {j} out of {r} rows");
                out[i * d..(i + 1) * d].copy_from_slice(&t[j * d..(j + 1) * d]);
            }
        }
        let n = index.len();
        self.push(
            Tensor::new(&[n, d], out),
            Op::GatherRows { table, index },
            &[table],
        )
    }

    /// Mean over the valid rows of each length-`seq` block of `x`.
    pub fn masked_mean_rows(&mut self, x: Var, batch: usize, seq: usize, valid: &[bool]) -> Var {
        let (n, d) = self.value(x).dims2();
        assert_eq!(n, batch * seq, "masked_mean_rows rows");
        assert_eq!(valid.len(), n, "masked_mean_rows mask length");
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); batch * d];
        for b in 0..batch {
            let count = valid[b * seq..(b + 1) * seq].iter().filter(|&&v| v).count();
            if count == 0 {
                continue;
            }
            let inv = S::one() / S::of(count as f64);
            let acc = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                if valid[b * seq + t] {
                    let row = &xs[(b * seq + t) * d..(b * seq + t + 1) * d];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        self.push(
            Tensor::new(&[batch, d], out),
            Op::MaskedMeanRows {
                x,
                batch,
                seq,
                valid: valid.to_vec(),
            },
            &[x],
        )
    }

    /// Divides each row by its Euclidean norm (rows with norm below `1e-12`
    /// are divided by `1e-12`).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let xs = self.value(x).data();
        let floor = S::of(1e-12);
        let mut norms = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor);
            norms[r] = norm;
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        self.push(
            Tensor::new(&[n, d], out),
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Scalar node with externally computed value and local gradients
    /// `d value / d input` for each input.
    pub fn custom_scalar(&mut self, value: S, inputs: Vec<(Var, Tensor<S>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "custom_scalar gradient shape"
            );
        }
        let parents: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        self.push(Tensor::scalar(value), Op::Custom { inputs }, &parents)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![S::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fan_in) = self.value(*x).dims2();
                let (_, fan_out) = self.value(*w).dims2();
                let g = gy.data();
                if self.wants(*x) {
                    let mut dx = vec![S::zero(); n * fan_in];
                    gemm(
                        S::one(),
                        View::dense(g, n, fan_out),
                        View::dense(self.value(*w).data(), fan_in, fan_out).t(),
                        S::zero(),
                        ViewMut::dense(&mut dx, n, fan_in),
                    );
                    self.accumulate(grads, *x, Tensor::new(&[n, fan_in], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![S::zero(); fan_in * fan_out];
                    gemm(
                        S::one(),
                        View::dense(self.value(*x).data(), n, fan_in).t(),
                        View::dense(g, n, fan_out),
                        S::zero(),
                        ViewMut::dense(&mut dw, fan_in, fan_out),
                    );
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(&shape, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![S::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(&shape, db));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let g = gy.data();
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        S::one(),
                        View::dense(g, m, n),
                        View::dense(self.value(*b).data(), k, n).t(),
                        S::zero(),
                        ViewMut::dense(&mut da, m, k),
                    );
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::new(&shape, da));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(
                        S::one(),
                        View::dense(self.value(*a).data(), m, k).t(),
                        View::dense(g, m, n),
                        S::zero(),
                        ViewMut::dense(&mut db, k, n),
                    );
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(&shape, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), d));
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), d));
                }
            }
            Op::MulConst(a, factor) => {
                let d = gy.data().iter().zip(factor).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape(), d));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gy.map(|g| g * c));
            }
            Op::Gelu(a) => {
                let (c, k) = (S::of(GELU_C), S::of(GELU_A));
                let half = S::of(0.5);
                let three = S::of(3.0);
                let x = self.value(*a);
                let d = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = c * (S::one() + three * k * x * x);
                        g * (half * (S::one() + t) + half * x * (S::one() - t * t) * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = self.value(*x).dims2();
                let g = gy.data();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![S::zero(); d];
                    let mut db = vec![S::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(&gs, dg));
                    self.accumulate(grads, *beta, Tensor::new(&bs, db));
                }
                if self.wants(*x) {
                    let inv_d = S::one() / S::of(d as f64);
                    let mut dx = vec![S::zero(); n * d];
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..n {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gam[j];
                            dxhat[j] = v;
                            mean_dxhat += v;
                            mean_dxhat_xhat += v * xhat[r * d + j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] =
                                rstd[r] * (dxhat[j] - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, d], dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let AttentionShape { batch, seq, heads } = *shape;
                let (rows, width) = self.value(*q).dims2();
                let dh = width / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let g = gy.data();
                let mut dq = vec![S::zero(); rows * width];
                let mut dk = vec![S::zero(); rows * width];
                let mut dv = vec![S::zero(); rows * width];
                let mut dp = vec![S::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq * seq;
                        let p = &probs[base..base + seq * seq];
                        // dV = P^T dO
                        gemm(
                            S::one(),
                            View::dense(p, seq, seq).t(),
                            View::block(g, width, b * seq, seq, h * dh, dh),
                            S::zero(),
                            ViewMut::block(&mut dv, width, b * seq, seq, h * dh, dh),
                        );
                        // dP = dO V^T
                        gemm(
                            S::one(),
                            View::block(g, width, b * seq, seq, h * dh, dh),
                            View::block(vd, width, b * seq, seq, h * dh, dh).t(),
                            S::zero(),
                            ViewMut::dense(&mut dp, seq, seq),
                        );
                        // dS = P * (dP - rowsum(dP * P)), then scaled
                        for (prow, dprow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                            let dot: S = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in dprow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        gemm(
                            S::one(),
                            View::dense(&dp, seq, seq),
                            View::block(kd, width, b * seq, seq, h * dh, dh),
                            S::zero(),
                            ViewMut::block(&mut dq, width, b * seq, seq, h * dh, dh),
                        );
                        gemm(
                            S::one(),
                            View::dense(&dp, seq, seq).t(),
                            View::block(qd, width, b * seq, seq, h * dh, dh),
                            S::zero(),
                            ViewMut::block(&mut dk, width, b * seq, seq, h * dh, dh),
                        );
                    }
                }
                self.accumulate(grads, *q, Tensor::new(&[rows, width], dq));
                self.accumulate(grads, *k, Tensor::new(&[rows, width], dk));
                self.accumulate(grads, *v, Tensor::new(&[rows, width], dv));
            }
            Op::GatherRows { table, index } => {
                let shape = self.value(*table).shape().to_vec();
                let (_, d) = self.value(*table).dims2();
                let mut dt = Tensor::zeros(&shape);
                let g = gy.data();
                let td = dt.data_mut();
                for (i, idx) in index.iter().enumerate() {
                    if let Some(j) = *idx {
                        for c in 0..d {
                            td[j * d + c] += g[i * d + c];
                        }
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MaskedMeanRows {
                x,
                batch,
                seq,
                valid,
            } => {
                let (n, d) = self.value(*x).dims2();
                let g = gy.data();
                let mut dx = vec![S::zero(); n * d];
                for b in 0..*batch {
                    let count = valid[b * seq..(b + 1) * seq].iter().filter(|&&v| v).count();
                    if count == 0 {
                        continue;
                    }
                    let inv = S::one() / S::of(count as f64);
                    for t in 0..*seq {
                        if valid[b * seq + t] {
                            let r = b * seq + t;
                            for c in 0..d {
                                dx[r * d + c] = g[b * d + c] * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, d], dx));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, d) = self.value(*x).dims2();
                let y = node.value.data();
                let g = gy.data();
                let mut dx = vec![S::zero(); n * d];
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, d], dx));
            }
            Op::Custom { inputs } => {
                let up = gy.data()[0];
                for (v, local) in inputs {
                    if self.wants(*v) {
                        self.accumulate(grads, *v, local.map(|x| x * up));
                    }
                }
            }
        }
    }
}

fn softmax_masked<S: Scalar>(row: &mut [S], valid: &[bool]) {
    let mut max = S::neg_infinity();
    for (&x, &ok) in row.iter().zip(valid) {
        if ok && x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for (x, &ok) in row.iter_mut().zip(valid) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = S::zero();
        }
    }
    let inv = S::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
