//! A minimal decoder-only multimodal transformer.
//!
//! The input sequence is always laid out as `[visual | text]`. Visual tokens
//! arrive as precomputed embeddings in the model space, text tokens as ids.
//! Blocks are pre-norm (norm → attention → residual, norm → FFN → residual)
//! with learned absolute position embeddings added once at the input.
//!
//! Exit layers count blocks: exiting at `l` means blocks `1..=l` saw the joint
//! sequence and blocks `l+1..=L` only the text tokens. `l = 0` removes the
//! visual tokens before the first block and `l = L` is a no-op.

mod backprop;
mod engine;
mod forward;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

pub use backprop::{answer_loss_and_grad, TrainingForward};
pub use engine::{generate, BoundaryHook, GenerateOptions, Generation, NoIntervention};
pub use forward::{ForwardState, KvCache, LayerKv, LayerRecord, LayerTrace, Prefill, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_visual: usize,
    pub max_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 32,
            num_visual: 16,
            max_text: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::schema(field, msg));
        if self.num_layers < 2 {
            return bad("num_layers", "must be at least 2");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("num_heads", "hidden_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size", "must be at least 2");
        }
        if self.num_visual == 0 {
            return bad("num_visual", "must be at least 1");
        }
        if self.max_text == 0 {
            return bad("max_text", "must be at least 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn max_positions(&self) -> usize {
        self.num_visual + self.max_text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.hidden_dim;
        Self {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            w_up: Matrix::zeros(d, c.ffn_dim),
            w_down: Matrix::zeros(c.ffn_dim, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 10] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// All trainable parameters. Tensor order (see [`Weights::tensors`]) is the
/// checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub lm_head: Matrix,
}

impl Weights {
    /// Same shapes as `config`, all projections zero and norm gains one.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            token_embed: Matrix::zeros(config.vocab_size, d),
            pos_embed: Matrix::zeros(config.max_positions(), d),
            layers: (0..config.num_layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            lm_head: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Random initialization: embeddings `N(0, 0.5²)`, projections scaled by
    /// `1/sqrt(fan_in)`, residual outputs further by `1/sqrt(2L)`.
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let mut w = Self::zeros(config);
        let residual = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        for (name, m) in w.tensors_mut() {
            let short = name.rsplit('.').next().unwrap_or(&name).to_string();
            let std = match short.as_str() {
                "token_embed" | "pos_embed" => 0.5,
                "ln1_gain" | "ln2_gain" | "final_gain" | "ln1_bias" | "ln2_bias" | "final_bias" => {
                    continue
                }
                "wo" | "w_down" => residual / (m.rows() as f64).sqrt(),
                _ => 1.0 / (m.rows() as f64).sqrt(),
            };
            for v in m.data_mut() {
                *v = std * rng.normal();
            }
        }
        w
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("token_embed".to_string(), &mut self.token_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Weights::zeros(config);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::schema("tensors", "layer count does not match config"));
        }
        for ((name, a), (_, b)) in ours.iter().zip(theirs.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::schema(
                    name.clone(),
                    format!("shape {:?}, expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, &mut SeededRng::new(seed));
        Ok(Self { config, weights })
    }
}

/// One multimodal prompt: visual embeddings (`n_v × d`, or empty) and text ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub visual: Matrix,
    pub text: Vec<usize>,
}

impl Inputs {
    pub fn new(visual: Matrix, text: Vec<usize>) -> Self {
        Self { visual, text }
    }

    pub fn text_only(text: Vec<usize>, hidden_dim: usize) -> Self {
        Self {
            visual: Matrix::zeros(0, hidden_dim),
            text,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::invalid("prompt needs at least one text token"));
        }
        let n_v = self.visual.rows();
        if n_v != 0 && n_v != config.num_visual {
            return Err(Error::shape(format!(
                "expected {} visual rows, got {n_v}",
                config.num_visual
            )));
        }
        if n_v != 0 && self.visual.cols() != config.hidden_dim {
            return Err(Error::shape(format!(
                "visual width {} does not match hidden_dim {}",
                self.visual.cols(),
                config.hidden_dim
            )));
        }
        if n_v + self.text.len() > config.max_positions() {
            return Err(Error::invalid(format!(
                "{} tokens exceed the {} available positions",
                n_v + self.text.len(),
                config.max_positions()
            )));
        }
        if let Some(&id) = self.text.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::invalid(format!("token id {id} outside vocabulary")));
        }
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
