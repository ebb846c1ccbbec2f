use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, NamedGrads, NodeId, Tape};
use crate::params::ParamSet;
use crate::vocab::Vocabulary;

/// How the classifier heads read the recurrent states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Intent reads the last state; slots read per-step states.
    NoAttention,
    /// Intent pools states with learned attention weights; slots read per-step states.
    WeightedAttention,
    /// Two self-attention blocks re-encode the states for both heads.
    ProjectedAttention,
}

impl EncoderVariant {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderVariant::NoAttention => "no-attention",
            EncoderVariant::WeightedAttention => "weighted-attention",
            EncoderVariant::ProjectedAttention => "projected-attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-attention" => Ok(EncoderVariant::NoAttention),
            "weighted-attention" => Ok(EncoderVariant::WeightedAttention),
            "projected-attention" => Ok(EncoderVariant::ProjectedAttention),
            other => Err(Error::Config(format!(
                "unknown encoder variant {other:?} (expected no-attention, weighted-attention, or projected-attention)"
            ))),
        }
    }
}

fn default_pool_dim() -> usize {
    16
}

fn default_init_scale() -> f64 {
    0.1
}

/// Model hyperparameters plus the label inventories the heads classify over.
/// Label names live here so a checkpoint is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub intent_labels: Vec<String>,
    pub slot_labels: Vec<String>,
    pub encoder: EncoderVariant,
    #[serde(default = "default_pool_dim")]
    pub pool_dim: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.layers == 0 || self.pool_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (embed {}, hidden {}, layers {}, pool {})",
                self.embed_dim, self.hidden_dim, self.layers, self.pool_dim
            )));
        }
        if self.intent_labels.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 intent labels, got {}",
                self.intent_labels.len()
            )));
        }
        if self.slot_labels.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 slot labels, got {}",
                self.slot_labels.len()
            )));
        }
        if self.tie_embeddings && self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "tied embeddings need embed_dim == hidden_dim, got {} and {}",
                self.embed_dim, self.hidden_dim
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale {} must be positive", self.init_scale)));
        }
        Ok(())
    }

    pub fn intent_count(&self) -> usize {
        self.intent_labels.len()
    }

    pub fn slot_count(&self) -> usize {
        self.slot_labels.len()
    }

    pub fn intent_id(&self, label: &str) -> Result<usize> {
        self.intent_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Label(format!("unknown intent label {label:?}")))
    }

    pub fn slot_id(&self, label: &str) -> Result<usize> {
        self.slot_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Label(format!("unknown slot label {label:?}")))
    }
}

/// The trained object: vocabulary, config, and every named parameter.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 * scale - scale).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Parameter names for one head's encoder plus classifier, in creation order.
fn head_param_shapes(
    head: &str,
    cfg: &ModelConfig,
    class_count: usize,
) -> Vec<(String, usize, usize, InitKind)> {
    let h = cfg.hidden_dim;
    let mut out = Vec::new();
    match cfg.encoder {
        EncoderVariant::NoAttention => {}
        EncoderVariant::WeightedAttention => {
            if head == "intent" {
                out.push((format!("{head}.pool.score_w"), cfg.pool_dim, h, InitKind::Uniform));
                out.push((format!("{head}.pool.score_v"), cfg.pool_dim, 1, InitKind::Uniform));
            }
        }
        EncoderVariant::ProjectedAttention => {
            for b in 0..2 {
                for proj in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{head}.block{b}.{proj}"), h, h, InitKind::Uniform));
                }
                out.push((format!("{head}.block{b}.ln_gain"), h, 1, InitKind::One));
                out.push((format!("{head}.block{b}.ln_bias"), h, 1, InitKind::Zero));
            }
            if head == "intent" {
                out.push((format!("{head}.pool.score_w"), cfg.pool_dim, h, InitKind::Uniform));
                out.push((format!("{head}.pool.score_v"), cfg.pool_dim, 1, InitKind::Uniform));
            }
        }
    }
    out.push((format!("{head}.classifier.weight"), class_count, h, InitKind::Uniform));
    out.push((format!("{head}.classifier.bias"), class_count, 1, InitKind::Zero));
    out
}

#[derive(Clone, Copy)]
enum InitKind {
    Uniform,
    Zero,
    One,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64, kind: InitKind) -> Matrix {
    match kind {
        InitKind::Uniform => uniform(rng, rows, cols, scale),
        InitKind::Zero => Matrix::zeros(rows, cols),
        InitKind::One => {
            let mut m = Matrix::zeros(rows, cols);
            m.fill(1.0);
            m
        }
    }
}

impl Model {
    /// Fresh model with seeded uniform initialization. Biases start at zero,
    /// layer-norm gains at one.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let v = vocab.len();
        let (e, h, s) = (config.embed_dim, config.hidden_dim, config.init_scale);

        params.insert("backbone.embedding", uniform(&mut rng, v, e, s))?;
        for k in 0..config.layers {
            let in_dim = if k == 0 { e } else { h };
            params.insert(&format!("backbone.lstm{k}.w_input"), uniform(&mut rng, 4 * h, in_dim, s))?;
            params.insert(&format!("backbone.lstm{k}.w_hidden"), uniform(&mut rng, 4 * h, h, s))?;
            params.insert(&format!("backbone.lstm{k}.bias"), Matrix::zeros(4 * h, 1))?;
        }
        if !config.tie_embeddings {
            params.insert("backbone.output.weight", uniform(&mut rng, v, h, s))?;
        }
        params.insert("backbone.output.bias", Matrix::zeros(v, 1))?;

        for (name, rows, cols, kind) in head_param_shapes("intent", &config, config.intent_count())
            .into_iter()
            .chain(head_param_shapes("slot", &config, config.slot_count()))
        {
            params.insert(&name, init_matrix(&mut rng, rows, cols, s, kind))?;
        }

        Ok(Model { config, vocab, params })
    }

    /// Rebuild from already-trained parameters (checkpoint load).
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let fresh = Model::new(config.clone(), vocab.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, m) in fresh.params.iter() {
            let loaded = params.get(name).map_err(|_| {
                Error::Checkpoint(format!("missing parameter {name:?} for this config"))
            })?;
            if loaded.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} is {:?}, config needs {:?}",
                    loaded.shape(),
                    m.shape()
                )));
            }
        }
        Ok(Model { config, vocab, params })
    }

    /// Re-initialize only the head parameters, keeping the backbone.
    /// Used when attaching fresh classifiers to a pretrained model.
    pub fn reinit_heads(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = self.config.init_scale;
        for (name, rows, cols, kind) in
            head_param_shapes("intent", &self.config, self.config.intent_count())
                .into_iter()
                .chain(head_param_shapes("slot", &self.config, self.config.slot_count()))
        {
            self.params.set(&name, init_matrix(&mut rng, rows, cols, scale, kind))?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Name of the output projection parameter, honoring embedding tying.
    pub fn output_weight_name(&self) -> &'static str {
        if self.config.tie_embeddings {
            "backbone.embedding"
        } else {
            "backbone.output.weight"
        }
    }

    /// Gradient vector aligned with `params().flatten()`, with zeros for
    /// parameters the backward pass never touched.
    pub fn flat_grads(&self, grads: &NamedGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.total_len());
        for (name, m) in self.params.iter() {
            match grads.get(name) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(m.len())),
            }
        }
        out
    }
}

/// Builds a tape over one model, registering each parameter as a tape node
/// the first time it is used so shared parameters get one node (and therefore
/// accumulated gradients) no matter how many heads touch them.
pub struct GraphBuilder<'m> {
    pub tape: Tape,
    model: &'m Model,
    node_ids: HashMap<String, NodeId>,
}

impl<'m> GraphBuilder<'m> {
    pub fn new(model: &'m Model) -> Self {
        GraphBuilder { tape: Tape::new(), model, node_ids: HashMap::new() }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.node_ids.get(name) {
            return Ok(id);
        }
        let value = self.model.params().get(name)?.clone();
        let id = self.tape.param(name, value);
        self.node_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.tape.value(id)
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.tape.scalar_value(id)
    }

    pub fn backward(&self, loss: NodeId) -> Result<NamedGrads> {
        self.tape.backward(loss)
    }
}
