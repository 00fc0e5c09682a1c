//! Layers built on the tape: linear, layer norm, pre-norm transformer
//! blocks and a small MLP.

use gradtape::{AttentionShape, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Training-time state threaded through a forward pass.
pub struct Ctx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
        }
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout<S: Scalar>(&mut self, g: &mut Graph<S>, x: Var) -> Var {
        let rate = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, mask)
    }
}

pub fn xavier_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| S::of(rng.random_range(-a..a)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data)
}

pub fn normal_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::of(dist.sample(rng))).collect())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerDims {
    pub hidden: usize,
    pub ff: usize,
    pub heads: usize,
    pub layers: usize,
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl Block {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = dims.hidden;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), h),
            query: Linear::new(store, &format!("{name}.query"), h, h, rng),
            key: Linear::new(store, &format!("{name}.key"), h, h, rng),
            value: Linear::new(store, &format!("{name}.value"), h, h, rng),
            out: Linear::new(store, &format!("{name}.attn_out"), h, h, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), h),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), h, dims.ff, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), dims.ff, h, rng),
            heads: dims.heads,
        }
    }

    /// Returns the block output and the attention node (for its probabilities).
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        key_valid: &[bool],
        ctx: &mut Ctx<'_>,
    ) -> (Var, Var) {
        let normed = self.ln_attn.forward(g, p, x);
        let q = self.query.forward(g, p, normed);
        let k = self.key.forward(g, p, normed);
        let v = self.value.forward(g, p, normed);
        let shape = AttentionShape {
            batch,
            seq,
            heads: self.heads,
        };
        let attn = g.attention(q, k, v, shape, key_valid);
        let projected = self.out.forward(g, p, attn);
        let projected = ctx.dropout(g, projected);
        let x = g.add(x, projected);

        let normed = self.ln_ff.forward(g, p, x);
        let hidden = self.ff_in.forward(g, p, normed);
        let hidden = g.gelu(hidden);
        let hidden = self.ff_out.forward(g, p, hidden);
        let hidden = ctx.dropout(g, hidden);
        (g.add(x, hidden), attn)
    }
}

/// Stack of pre-norm blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Transformer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..dims.layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), dims, rng))
            .collect();
        Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dims.hidden),
        }
    }

    /// Returns the normalized output and one attention node per block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        mut x: Var,
        batch: usize,
        seq: usize,
        key_valid: &[bool],
        ctx: &mut Ctx<'_>,
    ) -> (Var, Vec<Var>) {
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, attn) = block.forward(g, p, x, batch, seq, key_valid, ctx);
            x = next;
            attention.push(attn);
        }
        (self.final_norm.forward(g, p, x), attention)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// `Linear -> GELU -> ... -> Linear` with GELU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.gelu(x);
            }
            x = layer.forward(g, p, x);
        }
        x
    }
}

/// Fixed sinusoidal position table `[seq, dim]`.
pub fn sinusoidal_positions(seq: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; seq * dim];
    for t in 0..seq {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let pe = sinusoidal_positions(4, 6);
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[6] - 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[1000], 1.0));
        let mut ctx = Ctx::eval();
        assert_eq!(ctx.dropout(&mut g, x), x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ctx = Ctx::train(0.5, &mut rng);
        let y = ctx.dropout(&mut g, x);
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
    }
}
