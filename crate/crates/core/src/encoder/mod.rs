//! Stage-1 motion encoder: composed input encodings, a pre-norm transformer
//! and the masked-value reconstruction head.

mod loss;
mod train;

pub use loss::{masked_mse_with_grad, pretrain_loss};
pub use train::{
    nucleus_region_mse, prepare, pretrain_split, EpochRecord, PretrainConfig, PretrainState,
    Prepared, Pretrainer,
};

use gradtape::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{normal_init, sinusoidal_positions, Ctx, LayerNorm, Linear, Transformer, TransformerDims};
use crate::seed;
use crate::signal::{ImuWindow, NucleusMask, Sample, SignificantAxis, CHANNELS, WINDOW_LEN};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub attn_heads: usize,
    pub encoder_layers: usize,
    pub seq_len: usize,
    pub in_channels: usize,
    pub dropout: f64,
    /// Nucleus and significant-axis encodings; off for the ablation.
    #[serde(default = "yes")]
    pub input_encodings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 72,
            ff_dim: 144,
            attn_heads: 4,
            encoder_layers: 2,
            seq_len: WINDOW_LEN,
            in_channels: CHANNELS,
            dropout: 0.1,
            input_encodings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_heads == 0 || !self.hidden_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.attn_heads
            )));
        }
        if self.in_channels != CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "in_channels must be {CHANNELS}"
            )));
        }
        if self.encoder_layers == 0 || self.seq_len == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    pub fn dims(&self) -> TransformerDims {
        TransformerDims {
            hidden: self.hidden_dim,
            ff: self.ff_dim,
            heads: self.attn_heads,
            layers: self.encoder_layers,
        }
    }
}

/// Windows plus their nucleus masks and significant axes, flattened for one
/// forward pass.
#[derive(Debug, Clone, Default)]
pub struct EncoderBatch {
    pub batch: usize,
    pub seq: usize,
    pub values: Vec<f32>,
    pub pad: Vec<bool>,
    pub nucleus: Vec<bool>,
    pub axis: Vec<usize>,
}

impl EncoderBatch {
    pub fn new(seq: usize) -> Self {
        Self {
            seq,
            ..Self::default()
        }
    }

    pub fn single(w: &ImuWindow, n: &NucleusMask, a: &SignificantAxis) -> Result<Self> {
        let mut b = Self::new(w.len());
        b.push(w, n, a)?;
        Ok(b)
    }

    pub fn push(&mut self, w: &ImuWindow, n: &NucleusMask, a: &SignificantAxis) -> Result<()> {
        if w.len() != self.seq || n.in_nucleus.len() != self.seq {
            return Err(Error::InvalidInput(format!(
                "window of {} steps and nucleus of {} for sequence length {}",
                w.len(),
                n.in_nucleus.len(),
                self.seq
            )));
        }
        if a.axis_index > 2 {
            return Err(Error::InvalidInput(format!("axis index {}", a.axis_index)));
        }
        self.values
            .extend(w.samples().iter().flat_map(|s| s.iter().copied()));
        self.pad.extend_from_slice(w.pad_mask());
        self.nucleus.extend_from_slice(&n.in_nucleus);
        self.axis.push(a.axis_index);
        self.batch += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.pad.iter().map(|&p| !p).collect()
    }
}

/// Input projection, learnable nucleus/axis tables and the transformer.
/// Registered under `encoder.*`.
#[derive(Debug, Clone)]
pub struct MotionEncoder {
    pub config: EncoderConfig,
    input_proj: Linear,
    /// Row 0: outside the nucleus, row 1: inside.
    nucleus_table: ParamId,
    axis_table: ParamId,
    transformer: Transformer,
}

impl MotionEncoder {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &EncoderConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let h = config.hidden_dim;
        let input_proj = Linear::new(store, "encoder.input_proj", config.in_channels, h, rng);
        let nucleus_table = store.add("encoder.nucleus_embed", normal_init(rng, &[2, h], 0.02));
        let axis_table = store.add("encoder.axis_embed", normal_init(rng, &[3, h], 0.02));
        let transformer = Transformer::new(store, "encoder.transformer", &config.dims(), rng);
        Self {
            config: *config,
            input_proj,
            nucleus_table,
            axis_table,
            transformer,
        }
    }

    /// `E_input + E_position + E_nucleus + E_sig_axis` for every row.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, batch: &EncoderBatch) -> Var {
        let (rows, h) = (batch.rows(), self.config.hidden_dim);
        let x = g.constant(Tensor::new(
            &[rows, CHANNELS],
            batch.values.iter().map(|&v| S::of(f64::from(v))).collect(),
        ));
        let e_input = self.input_proj.forward(g, p, x);
        let pe = sinusoidal_positions(batch.seq, h);
        let tiled: Vec<S> = (0..batch.batch)
            .flat_map(|_| pe.iter().map(|&v| S::of(v)))
            .collect();
        let e_position = g.constant(Tensor::new(&[rows, h], tiled));
        let mut e = g.add(e_input, e_position);
        if self.config.input_encodings {
            let nucleus_idx = batch.nucleus.iter().map(|&n| Some(usize::from(n))).collect();
            let e_nucleus = g.gather_rows(p[self.nucleus_table], nucleus_idx);
            e = g.add(e, e_nucleus);
            let axis_idx = (0..rows)
                .map(|r| batch.nucleus[r].then_some(batch.axis[r / batch.seq]))
                .collect();
            let e_axis = g.gather_rows(p[self.axis_table], axis_idx);
            e = g.add(e, e_axis);
        }
        e
    }

    /// Hidden states `[rows, hidden]` and per-layer attention nodes.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        embedding: Var,
        batch: &EncoderBatch,
        ctx: &mut Ctx<'_>,
    ) -> (Var, Vec<Var>) {
        let embedding = ctx.dropout(g, embedding);
        self.transformer
            .forward(g, p, embedding, batch.batch, batch.seq, &batch.key_valid(), ctx)
    }
}

/// `Linear -> LayerNorm -> GELU -> Linear` back to the six channels.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    dense: Linear,
    norm: LayerNorm,
    out: Linear,
}

impl ReconstructionHead {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &EncoderConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let h = config.hidden_dim;
        Self {
            dense: Linear::new(store, "recon.dense", h, h, rng),
            norm: LayerNorm::new(store, "recon.norm", h),
            out: Linear::new(store, "recon.out", h, config.in_channels, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, hidden: Var) -> Var {
        let x = self.dense.forward(g, p, hidden);
        let x = self.norm.forward(g, p, x);
        let x = g.gelu(x);
        self.out.forward(g, p, x)
    }
}

/// One recorded pretraining forward pass.
pub struct EncoderPass<S> {
    pub graph: Graph<S>,
    pub bound: Bound,
    pub embedding: Var,
    pub hidden: Var,
    pub recon: Var,
    pub attention: Vec<Var>,
}

/// Per-layer, per-head `[seq, seq]` attention probabilities of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    data: Vec<f32>,
}

impl AttentionMaps {
    pub fn map(&self, layer: usize, head: usize) -> &[f32] {
        let size = self.seq * self.seq;
        let base = (layer * self.heads + head) * size;
        &self.data[base..base + size]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.map(layer, head)[query * self.seq + key]
    }

    /// Attention on the `columns` keys, averaged over layers, heads and the
    /// `rows` queries.
    pub fn column_mass(&self, rows: &[bool], columns: &[bool]) -> f64 {
        assert!(rows.len() == self.seq && columns.len() == self.seq);
        let mut total = 0.0;
        let mut count = 0usize;
        for l in 0..self.layers {
            for h in 0..self.heads {
                let m = self.map(l, h);
                for q in (0..self.seq).filter(|&q| rows[q]) {
                    let row = &m[q * self.seq..(q + 1) * self.seq];
                    total += row.iter().zip(columns).filter(|(_, &c)| c).map(|(&v, _)| f64::from(v)).sum::<f64>();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Attention maps of window `index` in a recorded batch.
    pub fn from_graph<S: Scalar>(graph: &Graph<S>, attention: &[Var], index: usize) -> Self {
        let mut data = Vec::new();
        let mut heads = 0;
        let mut seq = 0;
        for &a in attention {
            let (probs, shape) = graph.attention_probs(a).expect("attention node");
            heads = shape.heads;
            seq = shape.seq;
            let block = shape.heads * shape.seq * shape.seq;
            data.extend(probs[index * block..(index + 1) * block].iter().map(|v| v.as_f64() as f32));
        }
        Self {
            layers: attention.len(),
            heads,
            seq,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionOutput {
    pub reconstructed: Vec<Sample>,
    pub attention_maps: AttentionMaps,
}

impl ReconstructionOutput {
    /// Squared error averaged over channels at each listed timestep.
    pub fn per_position_mse(&self, target: &ImuWindow, indices: &[usize]) -> Vec<(usize, f64)> {
        indices
            .iter()
            .map(|&t| {
                let se: f64 = (0..CHANNELS)
                    .map(|c| (f64::from(self.reconstructed[t][c]) - f64::from(target.samples()[t][c])).powi(2))
                    .sum();
                (t, se / CHANNELS as f64)
            })
            .collect()
    }
}

/// Encoder plus reconstruction head with its parameters.
#[derive(Debug, Clone)]
pub struct EncoderModel<S> {
    pub config: EncoderConfig,
    pub encoder: MotionEncoder,
    pub head: ReconstructionHead,
    pub params: ParamStore<S>,
}

pub const ENCODER_KIND: &str = "encoder";

impl<S: Scalar> EncoderModel<S> {
    pub fn new(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::stream::INIT]);
        let mut params = ParamStore::new();
        let encoder = MotionEncoder::register(&mut params, &config, &mut rng);
        let head = ReconstructionHead::register(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            encoder,
            head,
            params,
        })
    }

    pub fn forward_with(&self, params: &ParamStore<S>, batch: &EncoderBatch, ctx: &mut Ctx<'_>) -> EncoderPass<S> {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let embedding = self.encoder.embed(&mut graph, &bound, batch);
        let (hidden, attention) = self.encoder.encode(&mut graph, &bound, embedding, batch, ctx);
        let recon = self.head.forward(&mut graph, &bound, hidden);
        EncoderPass {
            graph,
            bound,
            embedding,
            hidden,
            recon,
            attention,
        }
    }

    pub fn forward(&self, batch: &EncoderBatch, ctx: &mut Ctx<'_>) -> EncoderPass<S> {
        self.forward_with(&self.params, batch, ctx)
    }

    fn check_window(&self, w: &ImuWindow, n: &NucleusMask) -> Result<()> {
        if w.len() != self.config.seq_len || n.in_nucleus.len() != self.config.seq_len {
            return Err(Error::InvalidInput(format!(
                "window of {} steps, nucleus of {}, model expects {}",
                w.len(),
                n.in_nucleus.len(),
                self.config.seq_len
            )));
        }
        Ok(())
    }

    /// Composed input embedding `[seq, hidden]` of one (masked) window.
    pub fn embed_inputs(&self, w: &ImuWindow, n: &NucleusMask, a: &SignificantAxis) -> Result<Tensor<S>> {
        self.check_window(w, n)?;
        let batch = EncoderBatch::single(w, n, a)?;
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph);
        let e = self.encoder.embed(&mut graph, &bound, &batch);
        Ok(graph.value(e).clone())
    }

    /// Eval-mode reconstruction of one window with its attention maps.
    pub fn reconstruct_window(
        &self,
        w: &ImuWindow,
        n: &NucleusMask,
        a: &SignificantAxis,
    ) -> Result<ReconstructionOutput> {
        self.check_window(w, n)?;
        let batch = EncoderBatch::single(w, n, a)?;
        let pass = self.forward(&batch, &mut Ctx::eval());
        let recon = pass.graph.value(pass.recon).data();
        let reconstructed = recon
            .chunks(CHANNELS)
            .map(|c| std::array::from_fn(|i| c[i].as_f64() as f32))
            .collect();
        Ok(ReconstructionOutput {
            reconstructed,
            attention_maps: AttentionMaps::from_graph(&pass.graph, &pass.attention, 0),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }
}

impl EncoderModel<f32> {
    pub fn to_container(&self, metadata: serde_json::Value) -> Container {
        let mut c = Container::new(ENCODER_KIND, json!({ "encoder": self.config }), metadata);
        c.push_store("param", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ENCODER_KIND)?;
        let config: EncoderConfig = serde_json::from_value(c.config["encoder"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("encoder config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        c.fill_store("param", &mut model.params)?;
        Ok(model)
    }
}
