use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm_into, layer_norm_rows, softmax_in_place, Matrix};

use super::{Inputs, LayerWeights, Model, ModelConfig};

/// What one block saw and produced during prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// Heads-averaged attention, rows are queries and columns keys, over the
    /// tokens live in this block.
    pub attention: Matrix,
    /// Block output for the same live tokens.
    pub hidden: Matrix,
    /// How many of the live tokens (the leading rows) are visual.
    pub n_visual: usize,
    /// Sequence position of each live token.
    pub positions: Vec<usize>,
}

impl LayerRecord {
    pub fn new(attention: Matrix, hidden: Matrix, n_visual: usize) -> Self {
        let positions = (0..attention.rows()).collect();
        Self {
            attention,
            hidden,
            n_visual,
            positions,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.attention.rows()
    }
}

/// Per-block records; `layers[j]` belongs to block `j + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub layers: Vec<LayerRecord>,
}

impl LayerTrace {
    /// Block `k` (1-based).
    pub fn block(&self, k: usize) -> Option<&LayerRecord> {
        k.checked_sub(1).and_then(|i| self.layers.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
    pub n_visual: usize,
}

/// Keys and values of every live token, per block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub next_position: usize,
    pub exited_at: Option<usize>,
    num_layers: usize,
    hidden_dim: usize,
}

impl KvCache {
    fn new(config: &ModelConfig, next_position: usize) -> Self {
        Self {
            layers: Vec::with_capacity(config.num_layers),
            next_position,
            exited_at: None,
            num_layers: config.num_layers,
            hidden_dim: config.hidden_dim,
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.num_layers != config.num_layers
            || self.hidden_dim != config.hidden_dim
            || self.layers.len() != config.num_layers
        {
            return Err(Error::invalid("cache was not produced by this model"));
        }
        Ok(())
    }
}

/// Hidden states split by modality at some block boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub visual: Matrix,
    pub text: Matrix,
    /// Blocks applied so far.
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    /// Logits at the last text position.
    pub logits: Vec<f64>,
    pub trace: LayerTrace,
    pub cache: KvCache,
}

/// A prefill in progress, advanced one block at a time so that callers can
/// inspect the sequence and remove visual tokens between blocks.
#[derive(Debug, Clone)]
pub struct ForwardState<'m> {
    model: &'m Model,
    hidden: Matrix,
    positions: Vec<usize>,
    n_visual: usize,
    layers_done: usize,
    cache: KvCache,
    trace: LayerTrace,
    keep_trace: bool,
    last_record: Option<LayerRecord>,
    live_counts: Vec<usize>,
}

impl<'m> ForwardState<'m> {
    pub fn new(model: &'m Model, inputs: &Inputs, keep_trace: bool) -> Result<Self> {
        let c = &model.config;
        inputs.validate(c)?;
        let n_v = inputs.visual.rows();
        let n = n_v + inputs.text.len();
        let w = &model.weights;
        let mut hidden = Matrix::zeros(n, c.hidden_dim);
        for i in 0..n_v {
            let row = hidden.row_mut(i);
            for ((h, v), p) in row.iter_mut().zip(inputs.visual.row(i)).zip(w.pos_embed.row(i)) {
                *h = v + p;
            }
        }
        for (j, &id) in inputs.text.iter().enumerate() {
            let pos = n_v + j;
            let row = hidden.row_mut(pos);
            for ((h, t), p) in row.iter_mut().zip(w.token_embed.row(id)).zip(w.pos_embed.row(pos)) {
                *h = t + p;
            }
        }
        Ok(Self {
            model,
            hidden,
            positions: (0..n).collect(),
            n_visual: n_v,
            layers_done: 0,
            cache: KvCache::new(c, n),
            trace: LayerTrace::default(),
            keep_trace,
            last_record: None,
            live_counts: Vec::with_capacity(c.num_layers),
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Blocks applied so far.
    pub fn layers_done(&self) -> usize {
        self.layers_done
    }

    pub fn is_done(&self) -> bool {
        self.layers_done == self.model.config.num_layers
    }

    pub fn exited_at(&self) -> Option<usize> {
        self.cache.exited_at
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_text(&self) -> usize {
        self.hidden.rows() - self.n_visual
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn text_row(&self, i: usize) -> &[f64] {
        self.hidden.row(self.n_visual + i)
    }

    pub fn visual_row(&self, i: usize) -> &[f64] {
        self.hidden.row(i)
    }

    pub fn sequence(&self) -> TokenSequence {
        TokenSequence {
            visual: self.hidden.slice_rows(0, self.n_visual),
            text: self.hidden.slice_rows(self.n_visual, self.hidden.rows()),
            layer: self.layers_done,
        }
    }

    /// Record of the most recent block, if any block has run.
    pub fn last_record(&self) -> Option<&LayerRecord> {
        self.last_record.as_ref()
    }

    /// Live token count seen by each block run so far.
    pub fn live_counts(&self) -> &[usize] {
        &self.live_counts
    }

    /// Runs the next block over the live tokens.
    pub fn step(&mut self) -> Result<()> {
        let c = &self.model.config;
        if self.layers_done >= c.num_layers {
            return Err(Error::invalid("all blocks already applied"));
        }
        let lw = &self.model.weights.layers[self.layers_done];
        let (out, kv, attention) = block_forward(c, lw, &self.hidden, &self.positions, None)?;
        self.live_counts.push(self.hidden.rows());
        self.hidden = out;
        self.cache.layers.push(LayerKv {
            keys: kv.0,
            values: kv.1,
            positions: self.positions.clone(),
            n_visual: self.n_visual,
        });
        let record = LayerRecord {
            attention,
            hidden: self.hidden.clone(),
            n_visual: self.n_visual,
            positions: self.positions.clone(),
        };
        if self.keep_trace {
            self.trace.layers.push(record.clone());
        }
        self.last_record = Some(record);
        self.layers_done += 1;
        Ok(())
    }

    /// Removes every visual token from the live set. Later blocks see only the
    /// text tokens. Allowed at most once.
    pub fn execute_exit(&mut self) -> Result<()> {
        if let Some(l) = self.cache.exited_at {
            return Err(Error::AlreadyExited(l));
        }
        self.drop_visual(&[]);
        self.cache.exited_at = Some(self.layers_done);
        Ok(())
    }

    /// Keeps only the listed visual tokens (indices into the live visual
    /// rows, ascending) for all later blocks.
    pub fn retain_visual(&mut self, keep: &[usize]) -> Result<()> {
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&i| i >= self.n_visual) {
            return Err(Error::invalid("visual keep-list must be ascending live indices"));
        }
        self.drop_visual(keep);
        Ok(())
    }

    fn drop_visual(&mut self, keep: &[usize]) {
        let rows: Vec<usize> = keep
            .iter()
            .copied()
            .chain(self.n_visual..self.hidden.rows())
            .collect();
        self.hidden = self.hidden.select_rows(&rows);
        self.positions = rows.iter().map(|&r| self.positions[r]).collect();
        self.n_visual = keep.len();
    }

    /// Runs any remaining blocks and returns the last-position logits.
    pub fn finish(mut self) -> Result<Prefill> {
        while !self.is_done() {
            self.step()?;
        }
        let logits = final_logits(self.model, self.hidden.row(self.hidden.rows() - 1))?;
        Ok(Prefill {
            logits,
            trace: self.trace,
            cache: self.cache,
        })
    }
}

pub(crate) fn final_logits(model: &Model, row: &[f64]) -> Result<Vec<f64>> {
    let w = &model.weights;
    let mut normed = vec![0.0; row.len()];
    layer_norm_into(row, w.final_gain.data(), w.final_bias.data(), &mut normed);
    Ok(Matrix::row_vector(&normed).matmul(&w.lm_head)?.into_data())
}

/// Causal multi-head attention of `q` over `keys`/`values`. A query attends to
/// every key whose position does not exceed its own. Returns the concatenated
/// head outputs and the heads-averaged attention weights.
pub(crate) fn attend(
    config: &ModelConfig,
    q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    query_pos: &[usize],
    key_pos: &[usize],
) -> Result<(Matrix, Matrix)> {
    let heads = config.num_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), config.hidden_dim);
    let mut avg = Matrix::zeros(q.rows(), keys.rows());
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh);
        let kh = keys.slice_cols(h * dh, (h + 1) * dh);
        let vh = values.slice_cols(h * dh, (h + 1) * dh);
        let mut scores = qh.matmul_transb(&kh)?;
        for (i, &qp) in query_pos.iter().enumerate() {
            let row = scores.row_mut(i);
            for (s, &kp) in row.iter_mut().zip(key_pos) {
                *s = if kp <= qp { *s * scale } else { f64::NEG_INFINITY };
            }
            softmax_in_place(row);
        }
        out.set_cols(h * dh, &scores.matmul(&vh)?);
        for (a, p) in avg.data_mut().iter_mut().zip(scores.data()) {
            *a += p;
        }
    }
    avg.scale(1.0 / heads as f64);
    Ok((out, avg))
}

type KvPair = (Matrix, Matrix);

/// One pre-norm block. With `cache = None` the keys are the rows of `x`
/// themselves (prefill); otherwise the new keys are appended to the cached
/// ones and the queries attend over the union (decode).
pub(crate) fn block_forward(
    config: &ModelConfig,
    lw: &LayerWeights,
    x: &Matrix,
    positions: &[usize],
    cache: Option<&LayerKv>,
) -> Result<(Matrix, KvPair, Matrix)> {
    let h1 = layer_norm_rows(x, &lw.ln1_gain, &lw.ln1_bias);
    let q = h1.matmul(&lw.wq)?;
    let k = h1.matmul(&lw.wk)?;
    let v = h1.matmul(&lw.wv)?;
    let (keys, values, key_pos) = match cache {
        None => (k, v, positions.to_vec()),
        Some(kv) => {
            let mut pos = kv.positions.clone();
            pos.extend_from_slice(positions);
            (Matrix::vstack(&kv.keys, &k)?, Matrix::vstack(&kv.values, &v)?, pos)
        }
    };
    let (mixed, attention) = attend(config, &q, &keys, &values, positions, &key_pos)?;
    let mut out = x.clone();
    out.add_assign(&mixed.matmul(&lw.wo)?)?;
    let h2 = layer_norm_rows(&out, &lw.ln2_gain, &lw.ln2_bias);
    let up = h2.matmul(&lw.w_up)?.map(gelu);
    out.add_assign(&up.matmul(&lw.w_down)?)?;
    Ok((out, (keys, values), attention))
}

impl Model {
    pub fn begin<'m>(&'m self, inputs: &Inputs, keep_trace: bool) -> Result<ForwardState<'m>> {
        ForwardState::new(self, inputs, keep_trace)
    }

    /// Full causal forward over `[visual | text]` with a trace of every block.
    pub fn prefill(&self, inputs: &Inputs) -> Result<Prefill> {
        self.begin(inputs, true)?.finish()
    }

    /// Prefill with all visual tokens removed after `exit_layer` blocks.
    /// `exit_layer == L` is the plain forward.
    pub fn prefill_with_exit(&self, inputs: &Inputs, exit_layer: usize) -> Result<Prefill> {
        if exit_layer > self.config.num_layers {
            return Err(Error::invalid(format!("exit layer {exit_layer} beyond depth")));
        }
        let mut state = self.begin(inputs, true)?;
        for _ in 0..exit_layer {
            state.step()?;
        }
        if exit_layer < self.config.num_layers {
            state.execute_exit()?;
        }
        state.finish()
    }

    /// Appends one text token and returns the logits at its position.
    pub fn decode_step(&self, cache: &mut KvCache, token: usize) -> Result<Vec<f64>> {
        Ok(self.decode_step_traced(cache, token)?.0)
    }

    /// [`Model::decode_step`] that also returns the new token's attention row
    /// at every block.
    pub fn decode_step_traced(
        &self,
        cache: &mut KvCache,
        token: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = &self.config;
        cache.check(c)?;
        if token >= c.vocab_size {
            return Err(Error::invalid(format!("token id {token} outside vocabulary")));
        }
        let pos = cache.next_position;
        if pos >= c.max_positions() {
            return Err(Error::invalid("sequence exceeds the position table"));
        }
        let w = &self.weights;
        let mut x = Matrix::zeros(1, c.hidden_dim);
        for ((h, t), p) in x
            .row_mut(0)
            .iter_mut()
            .zip(w.token_embed.row(token))
            .zip(w.pos_embed.row(pos))
        {
            *h = t + p;
        }
        let mut rows = Vec::with_capacity(c.num_layers);
        for (lw, kv) in w.layers.iter().zip(cache.layers.iter_mut()) {
            let (out, (keys, values), attention) = block_forward(c, lw, &x, &[pos], Some(kv))?;
            kv.keys = keys;
            kv.values = values;
            kv.positions.push(pos);
            rows.push(attention.into_data());
            x = out;
        }
        cache.next_position += 1;
        Ok((final_logits(self, x.row(0))?, rows))
    }
}
