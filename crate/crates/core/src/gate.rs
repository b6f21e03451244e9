//! Token-status gates that decide when the visual tokens leave the prefill.
//!
//! After block `k` a small per-layer network reads a status vector built from
//! the sequence (by default the mean of the text tokens before the last one
//! and the last text token) and predicts `p = softmax(gelu(f·W₁)·W₂)`. The
//! first gated layer with `p₁ > p₀` removes every visual token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{FlopsConvention, FlopsReport};
use crate::model::{generate, BoundaryHook, ForwardState, GenerateOptions, Generation, Inputs, LayerRecord, Model, ModelConfig};
use crate::rng::SeededRng;
use crate::tensor::{gelu, softmax, Matrix};

/// Attention features are resampled to this length unless configured.
pub const DEFAULT_ATTN_FEATURE_DIM: usize = 576;
/// Gate hidden width used at 7B scale.
pub const FULL_SCALE_GATE_HIDDEN: usize = 2048;
pub const DEFAULT_GATE_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusPart {
    MeanVisual,
    LastVisual,
    MeanText,
    LastText,
    VisualSelfAttn,
    CrossAttn,
    TextSelfAttn,
}

impl StatusPart {
    pub const ALL: [StatusPart; 7] = [
        StatusPart::MeanVisual,
        StatusPart::LastVisual,
        StatusPart::MeanText,
        StatusPart::LastText,
        StatusPart::VisualSelfAttn,
        StatusPart::CrossAttn,
        StatusPart::TextSelfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatusPart::MeanVisual => "mean_visual",
            StatusPart::LastVisual => "last_visual",
            StatusPart::MeanText => "mean_text",
            StatusPart::LastText => "last_text",
            StatusPart::VisualSelfAttn => "visual_self_attn",
            StatusPart::CrossAttn => "cross_attn",
            StatusPart::TextSelfAttn => "text_self_attn",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            StatusPart::VisualSelfAttn | StatusPart::CrossAttn | StatusPart::TextSelfAttn
        )
    }

    pub fn reads_visual(self) -> bool {
        !matches!(self, StatusPart::MeanText | StatusPart::LastText | StatusPart::TextSelfAttn)
    }
}

impl FromStr for StatusPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StatusPart::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::schema("selector", format!("unknown status part '{s}'")))
    }
}

/// Ordered, duplicate-free set of status parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusSelector {
    parts: Vec<StatusPart>,
    attn_feature_dim: usize,
}

impl StatusSelector {
    pub fn new(parts: Vec<StatusPart>, attn_feature_dim: usize) -> Result<Self> {
        let s = Self { parts, attn_feature_dim };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::schema("selector", "at least one status part required"));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].contains(p) {
                return Err(Error::schema("selector", format!("'{}' listed twice", p.name())));
            }
        }
        if self.attn_feature_dim == 0 {
            return Err(Error::schema("attn_feature_dim", "must be positive"));
        }
        Ok(())
    }

    /// Parses a comma-separated list such as `mean_text,last_text`.
    pub fn parse(list: &str, attn_feature_dim: usize) -> Result<Self> {
        let parts = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
        Self::new(parts, attn_feature_dim)
    }

    pub fn parts(&self) -> &[StatusPart] {
        &self.parts
    }

    pub fn attn_feature_dim(&self) -> usize {
        self.attn_feature_dim
    }

    pub fn feature_dim(&self, hidden_dim: usize) -> usize {
        self.parts
            .iter()
            .map(|p| if p.is_attention() { self.attn_feature_dim } else { hidden_dim })
            .sum()
    }

    pub fn reads_visual(&self) -> bool {
        self.parts.iter().any(|p| p.reads_visual())
    }

    /// Every non-empty subset of `parts`, singles first, keeping the order
    /// of `parts` inside each subset.
    pub fn subsets(parts: &[StatusPart], attn_feature_dim: usize) -> Result<Vec<Self>> {
        if parts.is_empty() || parts.len() > 16 {
            return Err(Error::invalid("subsets need between 1 and 16 parts"));
        }
        let mut masks: Vec<u32> = (1..1u32 << parts.len()).collect();
        masks.sort_by_key(|m| (m.count_ones(), std::cmp::Reverse(m.reverse_bits())));
        masks
            .into_iter()
            .map(|m| {
                let chosen = parts.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, p)| *p).collect();
                Self::new(chosen, attn_feature_dim)
            })
            .collect()
    }
}

impl Default for StatusSelector {
    fn default() -> Self {
        Self {
            parts: vec![StatusPart::MeanText, StatusPart::LastText],
            attn_feature_dim: DEFAULT_ATTN_FEATURE_DIM,
        }
    }
}

impl fmt::Display for StatusSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.parts.iter().map(|p| p.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// Piecewise-linear resample of `src` onto `m` evenly spaced points whose
/// ends coincide with the ends of `src`.
pub fn interpolate_linear(src: &[f64], m: usize) -> Vec<f64> {
    match (src.len(), m) {
        (_, 0) => Vec::new(),
        (0, _) => vec![0.0; m],
        (1, _) => vec![src[0]; m],
        (_, 1) => vec![src[0]],
        (n, m) => (0..m)
            .map(|i| {
                let x = i as f64 * (n - 1) as f64 / (m - 1) as f64;
                let lo = (x.floor() as usize).min(n - 2);
                let frac = x - lo as f64;
                src[lo] * (1.0 - frac) + src[lo + 1] * frac
            })
            .collect(),
    }
}

fn mean_rows(h: &Matrix, rows: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; h.cols()];
    let k = rows.len() as f64;
    for r in rows {
        for (o, x) in out.iter_mut().zip(h.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= k);
    out
}

/// Mean weight each key in `keys` receives from the causal-valid queries in
/// `queries`.
fn received_attention(rec: &LayerRecord, queries: std::ops::Range<usize>, keys: std::ops::Range<usize>) -> Vec<f64> {
    keys.map(|j| {
        let (mut sum, mut n) = (0.0, 0usize);
        for i in queries.clone() {
            if rec.positions[j] <= rec.positions[i] {
                sum += rec.attention.get(i, j);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    })
    .collect()
}

/// Status vector of a sequence whose first `n_visual` rows of `hidden` are
/// visual. `record` is the attention of the block that produced `hidden` and
/// is needed only by attention parts.
///
/// With a single text token the mean-text part is that token; likewise for
/// a single visual token.
pub fn token_status(
    selector: &StatusSelector,
    hidden: &Matrix,
    n_visual: usize,
    record: Option<&LayerRecord>,
) -> Result<Vec<f64>> {
    let n = hidden.rows();
    if n_visual >= n {
        return Err(Error::invalid("token status needs at least one text token"));
    }
    let d = hidden.cols();
    let mut out = Vec::with_capacity(selector.feature_dim(d));
    for &part in selector.parts() {
        if part.reads_visual() && n_visual == 0 {
            return Err(Error::invalid(format!("'{}' needs visual tokens", part.name())));
        }
        match part {
            StatusPart::MeanText => {
                let end = if n - n_visual >= 2 { n - 1 } else { n };
                out.extend(mean_rows(hidden, n_visual..end));
            }
            StatusPart::LastText => out.extend_from_slice(hidden.row(n - 1)),
            StatusPart::MeanVisual => {
                let end = if n_visual >= 2 { n_visual - 1 } else { n_visual };
                out.extend(mean_rows(hidden, 0..end));
            }
            StatusPart::LastVisual => out.extend_from_slice(hidden.row(n_visual - 1)),
            StatusPart::VisualSelfAttn | StatusPart::CrossAttn | StatusPart::TextSelfAttn => {
                let rec = record.ok_or_else(|| Error::invalid("attention status needs a block record"))?;
                if rec.n_tokens() != n || rec.n_visual != n_visual {
                    return Err(Error::shape("attention record does not match the sequence"));
                }
                let v = match part {
                    StatusPart::VisualSelfAttn => received_attention(rec, 0..n_visual, 0..n_visual),
                    StatusPart::CrossAttn => received_attention(rec, n_visual..n, 0..n_visual),
                    _ => received_attention(rec, n_visual..n, n_visual..n),
                };
                out.extend(interpolate_linear(&v, selector.attn_feature_dim()));
            }
        }
    }
    Ok(out)
}

/// Status vector of an in-progress prefill after its latest block.
pub fn state_status(selector: &StatusSelector, state: &ForwardState<'_>) -> Result<Vec<f64>> {
    token_status(selector, state.hidden(), state.n_visual(), state.last_record())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub selector: StatusSelector,
    pub hidden: usize,
    pub bias: bool,
    /// First and last gated boundary, inclusive.
    pub first_layer: usize,
    pub last_layer: usize,
    /// Fires only when `p₁` also exceeds this.
    pub threshold: f64,
}

impl GateConfig {
    /// Gates at every boundary `1..=L-1`.
    pub fn for_model(config: &ModelConfig, selector: StatusSelector) -> Self {
        Self {
            selector,
            hidden: DEFAULT_GATE_HIDDEN,
            bias: false,
            first_layer: 1,
            last_layer: config.num_layers.saturating_sub(1),
            threshold: 0.5,
        }
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.selector.validate()?;
        if self.hidden == 0 {
            return Err(Error::schema("hidden", "must be positive"));
        }
        if self.first_layer > self.last_layer || self.last_layer >= model.num_layers {
            return Err(Error::schema(
                "layer_range",
                format!("[{}, {}] not inside [0, {}]", self.first_layer, self.last_layer, model.num_layers - 1),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::schema("threshold", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameters of the gate attached to one boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGate {
    pub layer: usize,
    pub w1: Matrix,
    pub w2: Matrix,
    pub b1: Option<Matrix>,
    pub b2: Option<Matrix>,
}

impl LayerGate {
    pub fn zeros(layer: usize, f: usize, h: usize, bias: bool) -> Self {
        Self {
            layer,
            w1: Matrix::zeros(f, h),
            w2: Matrix::zeros(h, 2),
            b1: bias.then(|| Matrix::zeros(1, h)),
            b2: bias.then(|| Matrix::zeros(1, 2)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len()
            + self.w2.data().len()
            + self.b1.as_ref().map_or(0, |b| b.data().len())
            + self.b2.as_ref().map_or(0, |b| b.data().len())
    }
}

/// Intermediate values of one gate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub logits: [f64; 2],
    pub p: [f64; 2],
}

pub fn gate_forward_cached(gate: &LayerGate, feature: &[f64]) -> Result<GateActivations> {
    let (f, h) = (gate.input_dim(), gate.hidden_dim());
    if feature.len() != f {
        return Err(Error::shape(format!("gate expects {f} features, got {}", feature.len())));
    }
    let mut pre = gate.b1.as_ref().map_or_else(|| vec![0.0; h], |b| b.data().to_vec());
    for (i, &x) in feature.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (p, w) in pre.iter_mut().zip(gate.w1.row(i)) {
            *p += x * w;
        }
    }
    let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
    let mut logits = gate.b2.as_ref().map_or([0.0; 2], |b| [b.data()[0], b.data()[1]]);
    for (j, &a) in act.iter().enumerate() {
        logits[0] += a * gate.w2.get(j, 0);
        logits[1] += a * gate.w2.get(j, 1);
    }
    let p = softmax(&logits);
    Ok(GateActivations {
        pre,
        act,
        logits,
        p: [p[0], p[1]],
    })
}

/// `p = softmax(gelu(f·W₁)·W₂)`, with the optional biases added.
pub fn gate_forward(gate: &LayerGate, feature: &[f64]) -> Result<[f64; 2]> {
    Ok(gate_forward_cached(gate, feature)?.p)
}

/// One gate per gated boundary, sharing no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub config: GateConfig,
    pub input_dim: usize,
    pub gates: Vec<LayerGate>,
}

impl GateWeights {
    /// Random gates: `W₁ ~ N(0, 1/f)`, `W₂ ~ N(0, 1/h)`, zero biases.
    pub fn init(model: &ModelConfig, config: GateConfig, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let f = config.selector.feature_dim(model.hidden_dim);
        let h = config.hidden;
        let mut root = SeededRng::new(seed);
        let gates = config
            .layers()
            .map(|layer| {
                let mut rng = root.fork(layer as u64);
                let mut g = LayerGate::zeros(layer, f, h, config.bias);
                let (s1, s2) = (1.0 / (f as f64).sqrt(), 1.0 / (h as f64).sqrt());
                g.w1.data_mut().iter_mut().for_each(|w| *w = s1 * rng.normal());
                g.w2.data_mut().iter_mut().for_each(|w| *w = s2 * rng.normal());
                g
            })
            .collect();
        Ok(Self {
            config,
            input_dim: f,
            gates,
        })
    }

    /// Biased gates that certainly fire at `fire_at` and certainly stay shut
    /// everywhere else.
    pub fn forced(model: &ModelConfig, mut config: GateConfig, fire_at: Option<usize>) -> Result<Self> {
        config.bias = true;
        config.validate(model)?;
        let f = config.selector.feature_dim(model.hidden_dim);
        let gates = config
            .layers()
            .map(|layer| {
                let mut g = LayerGate::zeros(layer, f, config.hidden, true);
                let fire = fire_at == Some(layer);
                let b = if fire { [-50.0, 50.0] } else { [50.0, -50.0] };
                g.b2 = Some(Matrix::row_vector(&b));
                g
            })
            .collect();
        Ok(Self {
            config,
            input_dim: f,
            gates,
        })
    }

    pub fn gate(&self, layer: usize) -> Option<&LayerGate> {
        layer
            .checked_sub(self.config.first_layer)
            .and_then(|i| self.gates.get(i))
            .filter(|g| g.layer == layer)
    }

    pub fn gate_mut(&mut self, layer: usize) -> Option<&mut LayerGate> {
        let first = self.config.first_layer;
        layer.checked_sub(first).and_then(move |i| self.gates.get_mut(i))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.config.validate(model)?;
        if self.input_dim != self.config.selector.feature_dim(model.hidden_dim) {
            return Err(Error::schema("input_dim", "does not match the selector"));
        }
        let expect: Vec<usize> = self.config.layers().collect();
        let got: Vec<usize> = self.gates.iter().map(|g| g.layer).collect();
        if expect != got {
            return Err(Error::schema("gates", "one gate per gated layer required"));
        }
        for g in &self.gates {
            let h = self.config.hidden;
            let ok = g.w1.shape() == (self.input_dim, h)
                && g.w2.shape() == (h, 2)
                && g.b1.as_ref().map_or(!self.config.bias, |b| self.config.bias && b.shape() == (1, h))
                && g.b2.as_ref().map_or(!self.config.bias, |b| self.config.bias && b.shape() == (1, 2));
            if !ok {
                return Err(Error::schema(format!("gates.{}", g.layer), "tensor shape mismatch"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub layer: usize,
    pub p: [f64; 2],
    pub fired: bool,
}

/// Exit rule: the exit class must win and clear `threshold`.
pub fn decide(p: [f64; 2], threshold: f64) -> bool {
    p[1] > p[0] && p[1] > threshold
}

/// Evaluates the gates during prefill and removes the visual tokens at the
/// first boundary whose gate fires.
#[derive(Debug, Clone)]
pub struct GateHook<'g> {
    pub gates: &'g GateWeights,
    pub decisions: Vec<ExitDecision>,
}

impl<'g> GateHook<'g> {
    pub fn new(gates: &'g GateWeights) -> Self {
        Self {
            gates,
            decisions: Vec::new(),
        }
    }
}

impl BoundaryHook for GateHook<'_> {
    fn at_boundary(&mut self, layer: usize, state: &mut ForwardState<'_>) -> Result<()> {
        let Some(gate) = self.gates.gate(layer) else {
            return Ok(());
        };
        let feature = state_status(&self.gates.config.selector, state)?;
        let p = gate_forward(gate, &feature)?;
        let fired = decide(p, self.gates.config.threshold);
        self.decisions.push(ExitDecision { layer, p, fired });
        if fired {
            state.execute_exit()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DyvteOutput {
    pub generation: Generation,
    pub decisions: Vec<ExitDecision>,
    pub flops: FlopsReport,
}

impl DyvteOutput {
    pub fn exit_layer(&self) -> Option<usize> {
        self.generation.exit_layer
    }
}

pub fn flops_of(model: &Model, inputs: &Inputs, generation: &Generation) -> FlopsReport {
    FlopsReport::from_live_counts(
        &model.config,
        inputs.visual.rows() + inputs.text.len(),
        &generation.live_counts,
        generation.exit_layer,
        FlopsConvention::default(),
    )
}

/// Greedy generation with gated visual-token exit during prefill.
pub fn run_with_dyvte(
    model: &Model,
    gates: &GateWeights,
    inputs: &Inputs,
    opts: GenerateOptions,
) -> Result<DyvteOutput> {
    gates.validate(&model.config)?;
    let mut hook = GateHook::new(gates);
    let generation = generate(model, inputs, &mut hook, opts)?;
    Ok(DyvteOutput {
        flops: flops_of(model, inputs, &generation),
        decisions: hook.decisions,
        generation,
    })
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("divergence inputs must be probability vectors"));
    }
    Ok(())
}

/// `KL(P ‖ P')` in bits averaged over answer positions.
pub fn prediction_divergence(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.is_empty() || p.len() != q.len() {
        return Err(Error::invalid("divergence needs the same non-zero number of positions"));
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        if a.len() != b.len() {
            return Err(Error::shape("divergence vocabularies differ"));
        }
        check_distribution(a)?;
        check_distribution(b)?;
        for (&x, &y) in a.iter().zip(b) {
            if x > 0.0 {
                total += x * (x / y).log2();
            }
        }
    }
    Ok(total / p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::manual_exit;
    use crate::model::{argmax, NoIntervention};
    use crate::synth::forced_mask_model;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> Model {
        let c = ModelConfig {
            num_layers: 5,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 9,
            num_visual: 6,
            max_text: 5,
        };
        Model::random(c, seed).unwrap()
    }

    fn inputs(seed: u64, t: usize) -> Inputs {
        let mut rng = SeededRng::new(seed);
        let vis = (0..48).map(|_| rng.normal()).collect();
        let text = (0..t).map(|_| rng.below(9)).collect();
        Inputs::new(Matrix::from_vec(6, 8, vis).unwrap(), text)
    }

    #[test]
    fn selector_parsing_round_trips() {
        let s = StatusSelector::parse("mean_text, last_text,cross_attn", 10).unwrap();
        assert_eq!(s.to_string(), "mean_text,last_text,cross_attn");
        assert_eq!(s.feature_dim(8), 26);
        assert!(StatusSelector::parse("mean_text,mean_text", 4).is_err());
        assert!(StatusSelector::parse("", 4).is_err());
        assert!(StatusSelector::parse("middle_text", 4).is_err());
        assert_eq!(StatusSelector::default().feature_dim(64), 128);
    }

    #[test]
    fn subsets_in_table_order() {
        use StatusPart::*;
        let s = StatusSelector::subsets(&[VisualSelfAttn, CrossAttn, TextSelfAttn], 8).unwrap();
        let names: Vec<String> = s.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            names,
            [
                "visual_self_attn",
                "cross_attn",
                "text_self_attn",
                "visual_self_attn,cross_attn",
                "visual_self_attn,text_self_attn",
                "cross_attn,text_self_attn",
                "visual_self_attn,cross_attn,text_self_attn",
            ]
        );
        assert_eq!(StatusSelector::subsets(&StatusPart::ALL[..4], 8).unwrap().len(), 15);
        assert!(StatusSelector::subsets(&[], 8).is_err());
    }

    #[test]
    fn constant_text_states_give_constant_features() {
        let v = [0.5, -1.0, 2.0];
        let mut h = Matrix::zeros(5, 3);
        for r in 2..5 {
            h.row_mut(r).copy_from_slice(&v);
        }
        let f = token_status(&StatusSelector::default(), &h, 2, None).unwrap();
        assert_eq!(f, [v, v].concat());
    }

    #[test]
    fn default_selector_hand_concat() {
        let h = Matrix::from_rows(&[
            vec![9.0, 9.0, 9.0, 9.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![3.0, 2.0, 1.0, 0.0],
            vec![-1.0, 0.5, 0.0, 2.0],
        ])
        .unwrap();
        let f = token_status(&StatusSelector::default(), &h, 1, None).unwrap();
        assert_eq!(f, vec![2.0, 2.0, 2.0, 2.0, -1.0, 0.5, 0.0, 2.0]);
        let single = Matrix::from_rows(&[vec![9.0, 9.0], vec![1.0, 3.0]]).unwrap();
        let f = token_status(&StatusSelector::default(), &single, 1, None).unwrap();
        assert_eq!(f, vec![1.0, 3.0, 1.0, 3.0]);
    }

    #[test]
    fn interpolation_matches_resample() {
        let src: Vec<f64> = (0..10).map(|i| ((i * i) % 7) as f64).collect();
        let out = interpolate_linear(&src, 5);
        // targets at 0, 2.25, 4.5, 6.75, 9
        let lerp = |x: f64| {
            let i = x.floor() as usize;
            if i + 1 >= src.len() {
                src[i]
            } else {
                src[i] + (src[i + 1] - src[i]) * (x - i as f64)
            }
        };
        for (k, x) in [0.0, 2.25, 4.5, 6.75, 9.0].into_iter().enumerate() {
            assert!((out[k] - lerp(x)).abs() < 1e-12);
        }
        assert_eq!(interpolate_linear(&src, 10), src);
        assert_eq!(interpolate_linear(&[2.0], 3), vec![2.0; 3]);
    }

    #[test]
    fn text_selector_ignores_visual_states() {
        let m = small_model(1);
        let mut state = m.begin(&inputs(2, 4), true).unwrap();
        state.step().unwrap();
        let sel = StatusSelector::default();
        let a = token_status(&sel, state.hidden(), state.n_visual(), None).unwrap();
        let mut h = state.hidden().clone();
        for r in 0..state.n_visual() {
            h.row_mut(r).iter_mut().for_each(|x| *x = *x * 3.0 + 1.0);
        }
        let b = token_status(&sel, &h, state.n_visual(), None).unwrap();
        assert_eq!(a, b);
        assert!(!sel.reads_visual());
        let vis = StatusSelector::parse("mean_visual", 4).unwrap();
        let c = token_status(&vis, state.hidden(), state.n_visual(), None).unwrap();
        let d = token_status(&vis, &h, state.n_visual(), None).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn attention_features_have_fixed_length() {
        let m = small_model(3);
        let mut state = m.begin(&inputs(4, 3), false).unwrap();
        state.step().unwrap();
        let sel = StatusSelector::parse("visual_self_attn,cross_attn,text_self_attn", 7).unwrap();
        let f = state_status(&sel, &state).unwrap();
        assert_eq!(f.len(), 21);
        assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn zero_output_weights_give_even_odds() {
        let mut rng = SeededRng::new(5);
        let mut g = LayerGate::zeros(1, 4, 3, false);
        g.w1.data_mut().iter_mut().for_each(|w| *w = rng.normal());
        assert_eq!(gate_forward(&g, &[1.0, -2.0, 0.5, 3.0]).unwrap(), [0.5, 0.5]);
        assert!(gate_forward(&g, &[1.0]).is_err());
    }

    #[test]
    fn gate_matches_scalar_path() {
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let (f, h) = (1 + rng.below(5), 1 + rng.below(4));
            let mut g = LayerGate::zeros(2, f, h, false);
            g.w1.data_mut().iter_mut().for_each(|w| *w = rng.normal());
            g.w2.data_mut().iter_mut().for_each(|w| *w = rng.normal());
            let x: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let mut z = [0.0f64; 2];
            for j in 0..h {
                let mut s = 0.0;
                for (i, xi) in x.iter().enumerate() {
                    s += xi * g.w1.get(i, j);
                }
                let a = 0.5 * s * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (s + 0.044715 * s * s * s)).tanh());
                z[0] += a * g.w2.get(j, 0);
                z[1] += a * g.w2.get(j, 1);
            }
            let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
            let p = gate_forward(&g, &x).unwrap();
            assert!((p[1] - p1).abs() < 1e-12 && (p[0] - (1.0 - p1)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gate_output_is_a_distribution(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let mut g = LayerGate::zeros(1, 3, 4, true);
            for m in [&mut g.w1, &mut g.w2] {
                m.data_mut().iter_mut().for_each(|w| *w = scale * rng.normal());
            }
            let x = [rng.normal(), rng.normal(), rng.normal()];
            let p = gate_forward(&g, &x).unwrap();
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            if decide(p, 0.5) { prop_assert!(p[1] > p[0]); }
        }

        #[test]
        fn decision_depends_only_on_logit_order(a in -30.0f64..30.0, b in -30.0f64..30.0, s in 0.01f64..10.0) {
            let p = softmax(&[a, b]);
            let q = softmax(&[s * a + 1.0, s * b + 1.0]);
            prop_assert_eq!(decide([p[0], p[1]], 0.5), decide([q[0], q[1]], 0.5));
        }
    }

    fn opts() -> GenerateOptions {
        GenerateOptions { max_new_tokens: 3, ..GenerateOptions::default() }
    }

    #[test]
    fn never_firing_gates_reproduce_baseline() {
        let m = small_model(7);
        let x = inputs(8, 3);
        let cfg = GateConfig::for_model(&m.config, StatusSelector::default());
        let gates = GateWeights::forced(&m.config, cfg, None).unwrap();
        let out = run_with_dyvte(&m, &gates, &x, opts()).unwrap();
        let base = generate(&m, &x, &mut NoIntervention, opts()).unwrap();
        assert_eq!(out.generation.logits, base.logits);
        assert_eq!(out.exit_layer(), None);
        assert_eq!(out.decisions.len(), 4);
        assert_eq!(out.flops.reduction_pct, 0.0);
    }

    #[test]
    fn forced_gate_equals_manual_exit() {
        let m = small_model(9);
        let x = inputs(10, 4);
        for k in 1..5 {
            let cfg = GateConfig::for_model(&m.config, StatusSelector::default());
            let gates = GateWeights::forced(&m.config, cfg, Some(k)).unwrap();
            let out = run_with_dyvte(&m, &gates, &x, opts()).unwrap();
            let manual = manual_exit(&m, &x, k, opts()).unwrap();
            assert_eq!(out.generation.logits, manual.logits);
            assert_eq!(out.generation.tokens, manual.tokens);
            assert_eq!(out.exit_layer(), Some(k));
            assert_eq!(out.decisions.len(), k);
            assert!(out.flops.reduction_pct > 0.0);
        }
    }

    #[test]
    fn firing_at_forced_mask_onset_keeps_the_answer() {
        let c = ModelConfig {
            num_layers: 6,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 9,
            num_visual: 6,
            max_text: 5,
        };
        let m = forced_mask_model(c, 3, 11).unwrap();
        let mut rng = SeededRng::new(12);
        let vis = Matrix::from_vec(6, 16, (0..96).map(|_| rng.normal()).collect()).unwrap();
        let x = Inputs::new(vis, vec![1, 4, 2]);
        let cfg = GateConfig::for_model(&c, StatusSelector::default());
        let gates = GateWeights::forced(&c, cfg, Some(3)).unwrap();
        let out = run_with_dyvte(&m, &gates, &x, GenerateOptions::default()).unwrap();
        let base = m.prefill(&x).unwrap().logits;
        assert_eq!(out.generation.tokens[0], argmax(&base));
        let diff = out.generation.logits[0].iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn gate_weights_are_per_layer() {
        let m = small_model(1);
        let mut cfg = GateConfig::for_model(&m.config, StatusSelector::default());
        cfg.hidden = 4;
        let g = GateWeights::init(&m.config, cfg.clone(), 3).unwrap();
        assert_eq!(g.gates.len(), 4);
        assert_ne!(g.gates[0].w1, g.gates[1].w1);
        assert_eq!(g, GateWeights::init(&m.config, cfg.clone(), 3).unwrap());
        assert!(g.gate(0).is_none() && g.gate(4).is_some() && g.gate(5).is_none());
        g.validate(&m.config).unwrap();
        cfg.last_layer = 5;
        assert!(GateWeights::init(&m.config, cfg, 3).is_err());
    }

    #[test]
    fn divergence_cases() {
        let p = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(prediction_divergence(&p, &p).unwrap(), 0.0);
        let d = prediction_divergence(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert!(prediction_divergence(&[vec![0.7, 0.7]], &[vec![0.5, 0.5]]).is_err());
        let mut rng = SeededRng::new(13);
        let a: Vec<Vec<f64>> = (0..3).map(|_| softmax(&[rng.normal(), rng.normal(), rng.normal(), rng.normal()])).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| softmax(&[rng.normal(), rng.normal(), rng.normal(), rng.normal()])).collect();
        let mut direct = 0.0;
        for (x, y) in a.iter().zip(&b) {
            for i in 0..4 {
                direct += x[i] * (x[i].ln() - y[i].ln()) / std::f64::consts::LN_2;
            }
        }
        assert!((prediction_divergence(&a, &b).unwrap() - direct / 3.0).abs() < 1e-9);
    }
}
