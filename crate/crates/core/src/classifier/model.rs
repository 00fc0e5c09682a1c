use gradtape::{Bound, Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::encoder::{EncoderBatch, EncoderConfig, EncoderModel, MotionEncoder};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Mlp, Transformer, TransformerDims};
use crate::seed::{self, stream};
use crate::signal::{analyze, ImuWindow, NucleusConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trunk {
    /// Transformer over the motion embeddings, then mean pooling.
    #[default]
    Transformer,
    /// Mean pooling, then a GELU MLP of width `hidden_dim` (ablation).
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub attn_heads: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
    pub tau: f64,
    pub dropout: f64,
    #[serde(default)]
    pub trunk: Trunk,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            attn_heads: 4,
            layers: 2,
            hidden_dim: 72,
            ff_dim: 144,
            projection_dim: 32,
            num_classes,
            tau: 0.1,
            dropout: 0.1,
            trunk: Trunk::Transformer,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.hidden_dim != encoder.hidden_dim {
            return Err(Error::IncompatibleCheckpoint(format!(
                "classifier hidden_dim {} does not match encoder hidden_dim {}",
                self.hidden_dim, encoder.hidden_dim
            )));
        }
        if self.attn_heads == 0 || !self.hidden_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.attn_heads
            )));
        }
        if self.num_classes < 2 || self.projection_dim == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "need at least 2 classes, one layer and a positive projection dim".into(),
            ));
        }
        if !(self.tau > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "tau {} and dropout {}",
                self.tau, self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TrunkLayers {
    Transformer(Transformer),
    Mlp(Mlp),
}

/// One recorded classifier forward pass.
pub struct ClassifierPass<S> {
    pub graph: Graph<S>,
    pub bound: Bound,
    /// Pooled features `[B × hidden]`.
    pub features: Var,
    pub logits: Var,
    /// L2-normalized projections `[B × projection_dim]`.
    pub projections: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub probabilities: Vec<f64>,
}

/// Pretrained encoder plus the classification trunk and both heads.
/// Encoder parameters keep their `encoder.*` names; the rest live under
/// `classifier.*`.
#[derive(Debug, Clone)]
pub struct GestureClassifier<S> {
    pub encoder_config: EncoderConfig,
    pub config: ClassifierConfig,
    pub nucleus: NucleusConfig,
    encoder: MotionEncoder,
    trunk: TrunkLayers,
    logits: Linear,
    projection: Mlp,
    pub params: ParamStore<S>,
}

pub const CLASSIFIER_KIND: &str = "classifier";

impl<S: Scalar> GestureClassifier<S> {
    /// Fresh heads on top of a copy of `pretrained`'s encoder weights.
    pub fn new(
        pretrained: &EncoderModel<S>,
        config: ClassifierConfig,
        nucleus: NucleusConfig,
        init_seed: u64,
    ) -> Result<Self> {
        let mut model = Self::untrained(pretrained.config, config, nucleus, init_seed)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            if !name.starts_with("encoder.") {
                continue;
            }
            let src = pretrained
                .params
                .find(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("pretrained encoder lacks {name}")))?;
            *model.params.get_mut(id) = pretrained.params.get(src).clone();
        }
        Ok(model)
    }

    fn untrained(
        encoder_config: EncoderConfig,
        config: ClassifierConfig,
        nucleus: NucleusConfig,
        init_seed: u64,
    ) -> Result<Self> {
        encoder_config.validate()?;
        config.validate(&encoder_config)?;
        nucleus.validate()?;
        let mut rng = seed::rng(init_seed, &[stream::INIT]);
        let mut params = ParamStore::new();
        let encoder = MotionEncoder::register(&mut params, &encoder_config, &mut rng);
        let h = config.hidden_dim;
        let trunk = match config.trunk {
            Trunk::Transformer => TrunkLayers::Transformer(Transformer::new(
                &mut params,
                "classifier.transformer",
                &TransformerDims {
                    hidden: h,
                    ff: config.ff_dim,
                    heads: config.attn_heads,
                    layers: config.layers,
                },
                &mut rng,
            )),
            Trunk::Mlp => TrunkLayers::Mlp(Mlp::new(&mut params, "classifier.mlp", &[h, h, h], &mut rng)),
        };
        let logits = Linear::new(&mut params, "classifier.logits", h, config.num_classes, &mut rng);
        let projection = Mlp::new(
            &mut params,
            "classifier.projection",
            &[h, h, config.projection_dim],
            &mut rng,
        );
        Ok(Self {
            encoder_config,
            config,
            nucleus,
            encoder,
            trunk,
            logits,
            projection,
            params,
        })
    }

    /// Encodes `batch` (unmasked windows); encoder parameters become graph
    /// constants when `freeze_encoder` is set.
    pub fn forward_with(
        &self,
        params: &ParamStore<S>,
        batch: &EncoderBatch,
        ctx: &mut Ctx<'_>,
        freeze_encoder: bool,
    ) -> ClassifierPass<S> {
        let mut graph = Graph::new();
        let bound = params.bind_with(&mut graph, |n| freeze_encoder && n.starts_with("encoder."));
        let g = &mut graph;
        let embedding = self.encoder.embed(g, &bound, batch);
        let (motion, _) = self.encoder.encode(g, &bound, embedding, batch, ctx);
        let valid = batch.key_valid();
        let features = match &self.trunk {
            TrunkLayers::Transformer(t) => {
                let (h, _) = t.forward(g, &bound, motion, batch.batch, batch.seq, &valid, ctx);
                g.masked_mean_rows(h, batch.batch, batch.seq, &valid)
            }
            TrunkLayers::Mlp(m) => {
                let pooled = g.masked_mean_rows(motion, batch.batch, batch.seq, &valid);
                m.forward(g, &bound, pooled)
            }
        };
        let logits = self.logits.forward(g, &bound, features);
        let projected = self.projection.forward(g, &bound, features);
        let projections = g.l2_normalize_rows(projected);
        ClassifierPass {
            graph,
            bound,
            features,
            logits,
            projections,
        }
    }

    pub fn batch_of(&self, windows: &[&ImuWindow]) -> Result<EncoderBatch> {
        let mut batch = EncoderBatch::new(self.encoder_config.seq_len);
        for w in windows {
            let (n, a) = analyze(w, &self.nucleus)?;
            batch.push(w, &n, &a)?;
        }
        Ok(batch)
    }

    /// Class and softmax probabilities for each window, in eval mode.
    pub fn predict_batch(&self, windows: &[&ImuWindow]) -> Result<Vec<Prediction>> {
        let batch = self.batch_of(windows)?;
        let pass = self.forward_with(&self.params, &batch, &mut Ctx::eval(), false);
        let k = self.config.num_classes;
        Ok(pass
            .graph
            .value(pass.logits)
            .data()
            .chunks(k)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
                let sum: f64 = exp.iter().sum();
                let probabilities: Vec<f64> = exp.iter().map(|e| e / sum).collect();
                let class_id = probabilities
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &p)| if p > probabilities[best] { i } else { best });
                Prediction {
                    class_id,
                    probabilities,
                }
            })
            .collect())
    }

    pub fn predict(&self, window: &ImuWindow) -> Result<Prediction> {
        Ok(self.predict_batch(&[window])?.remove(0))
    }
}

impl GestureClassifier<f32> {
    pub fn to_container(&self, metadata: serde_json::Value) -> Container {
        let mut c = Container::new(
            CLASSIFIER_KIND,
            json!({
                "encoder": self.encoder_config,
                "classifier": self.config,
                "nucleus": self.nucleus,
            }),
            metadata,
        );
        c.push_store("param", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CLASSIFIER_KIND)?;
        let field = |k: &str| c.config[k].clone();
        let bad = |k: &str, e: serde_json::Error| Error::IncompatibleCheckpoint(format!("{k} config: {e}"));
        let encoder: EncoderConfig = serde_json::from_value(field("encoder")).map_err(|e| bad("encoder", e))?;
        let config: ClassifierConfig =
            serde_json::from_value(field("classifier")).map_err(|e| bad("classifier", e))?;
        let nucleus: NucleusConfig = serde_json::from_value(field("nucleus")).map_err(|e| bad("nucleus", e))?;
        let mut model = Self::untrained(encoder, config, nucleus, 0)?;
        c.fill_store("param", &mut model.params)?;
        Ok(model)
    }
}
