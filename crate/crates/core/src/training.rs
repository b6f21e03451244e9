//! Weak exit labels and supervised training of the gates.
//!
//! A label asks whether removing the visual tokens after `l` blocks leaves
//! the greedy answer unchanged without making the model noticeably less
//! sure of it: `y = (A'_l == A) ∧ ρ'_l < α·ρ`, where `ρ` is the mean negative
//! log-likelihood (nats) of the emitted tokens. Gates are then fitted to
//! these labels with a two-class cross-entropy while the model stays frozen.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::baselines::{evaluate, manual_exit, EvalReport, Method};
use crate::error::{Error, Result};
use crate::gate::{gate_forward_cached, state_status, GateConfig, GateWeights, LayerGate, StatusSelector};
use crate::model::{generate, GenerateOptions, Generation, Inputs, Model, NoIntervention};
use crate::rng::SeededRng;
use crate::synth::SynthTask;
use crate::tensor::{gelu_grad, log_sum_exp, Matrix};

/// Uncertainty scale used by the reference training recipe.
pub const DEFAULT_ALPHA: f64 = 1.03;
/// Gate learning rate at 7B scale.
pub const FULL_SCALE_LR: f64 = 4e-5;
/// Fraction of the instruction data used for gate training at 7B scale.
pub const FULL_SCALE_SAMPLE_FRACTION: f64 = 0.01;
pub const DESK_LR: f64 = 1e-3;
/// Probabilities are clamped here before the logarithm in the loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood (nats) of `tokens` under `logits`.
pub fn answer_uncertainty(logits: &[Vec<f64>], tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() || logits.len() != tokens.len() {
        return Err(Error::invalid("uncertainty needs one logit row per answer token"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(tokens) {
        if t >= row.len() {
            return Err(Error::invalid(format!("token {t} outside vocabulary")));
        }
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / tokens.len() as f64)
}

/// Greedy answer of an unmodified model and its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRun {
    pub tokens: Vec<usize>,
    pub rho: f64,
}

impl AnswerRun {
    pub fn from_generation(g: &Generation) -> Result<Self> {
        Ok(Self {
            rho: answer_uncertainty(&g.logits, &g.tokens)?,
            tokens: g.tokens.clone(),
        })
    }
}

pub fn baseline_answer(model: &Model, inputs: &Inputs, opts: GenerateOptions) -> Result<AnswerRun> {
    AnswerRun::from_generation(&generate(model, inputs, &mut NoIntervention, opts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub sample_id: usize,
    pub layer: usize,
    pub y: bool,
    pub rho_base: f64,
    pub rho_exit: f64,
    pub tau: f64,
    pub answers_equal: bool,
}

/// Label of exit at `layer` against an already computed baseline.
pub fn label_against(
    model: &Model,
    inputs: &Inputs,
    base: &AnswerRun,
    sample_id: usize,
    layer: usize,
    alpha: f64,
    opts: GenerateOptions,
) -> Result<WeakLabel> {
    if alpha <= 0.0 {
        return Err(Error::invalid("alpha must be positive"));
    }
    let exited = AnswerRun::from_generation(&manual_exit(model, inputs, layer, opts)?)?;
    let tau = alpha * base.rho;
    let answers_equal = exited.tokens == base.tokens;
    Ok(WeakLabel {
        sample_id,
        layer,
        y: answers_equal && exited.rho < tau,
        rho_base: base.rho,
        rho_exit: exited.rho,
        tau,
        answers_equal,
    })
}

pub fn generate_label(
    model: &Model,
    inputs: &Inputs,
    sample_id: usize,
    layer: usize,
    alpha: f64,
    opts: GenerateOptions,
) -> Result<WeakLabel> {
    let base = baseline_answer(model, inputs, opts)?;
    label_against(model, inputs, &base, sample_id, layer, alpha, opts)
}

/// Uniform draw from `first..=last`.
pub fn sample_exit_layer(rng: &mut SeededRng, first: usize, last: usize) -> Result<usize> {
    if first > last {
        return Err(Error::invalid("empty exit-layer range"));
    }
    Ok(rng.range_inclusive(first, last))
}

/// `−log p_y` with `p_y` clamped at [`PROB_CLAMP`].
pub fn gate_loss(p: [f64; 2], y: bool) -> f64 {
    -p[usize::from(y)].max(PROB_CLAMP).ln()
}

/// Gradient of [`gate_loss`] with respect to every gate parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrad {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b1: Option<Matrix>,
    pub b2: Option<Matrix>,
}

/// Loss and analytic gradient for one feature vector. The gradient is zero
/// when the target probability sits below the clamp.
pub fn gate_grad(gate: &LayerGate, feature: &[f64], y: bool) -> Result<(f64, GateGrad)> {
    let a = gate_forward_cached(gate, feature)?;
    let (f, h) = (gate.input_dim(), gate.hidden_dim());
    let loss = gate_loss(a.p, y);
    let mut grad = GateGrad {
        w1: Matrix::zeros(f, h),
        w2: Matrix::zeros(h, 2),
        b1: gate.b1.as_ref().map(|_| Matrix::zeros(1, h)),
        b2: gate.b2.as_ref().map(|_| Matrix::zeros(1, 2)),
    };
    let t = usize::from(y);
    if a.p[t] < PROB_CLAMP {
        return Ok((loss, grad));
    }
    let g = [a.p[0] - f64::from(u8::from(t == 0)), a.p[1] - f64::from(u8::from(t == 1))];
    let mut dpre = vec![0.0; h];
    for (j, dp) in dpre.iter_mut().enumerate() {
        grad.w2.set(j, 0, a.act[j] * g[0]);
        grad.w2.set(j, 1, a.act[j] * g[1]);
        let dact = gate.w2.get(j, 0) * g[0] + gate.w2.get(j, 1) * g[1];
        *dp = dact * gelu_grad(a.pre[j]);
    }
    for (i, &x) in feature.iter().enumerate() {
        for (d, &dp) in grad.w1.row_mut(i).iter_mut().zip(&dpre) {
            *d = x * dp;
        }
    }
    if let Some(b) = grad.b1.as_mut() {
        b.data_mut().copy_from_slice(&dpre);
    }
    if let Some(b) = grad.b2.as_mut() {
        b.data_mut().copy_from_slice(&g);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub sample_fraction: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lr: DESK_LR,
            epochs: 1,
            sample_fraction: 1.0,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::schema("alpha", "must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::schema("lr", "must be finite and non-negative"));
        }
        if self.sample_fraction.is_nan() || self.sample_fraction <= 0.0 || self.sample_fraction > 1.0 {
            return Err(Error::schema("sample_fraction", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::schema("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Cached gate inputs of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub sample_id: usize,
    pub inputs: Inputs,
    pub baseline: AnswerRun,
    /// Status vector at every gated boundary of the unmodified prefill.
    pub features: BTreeMap<usize, Vec<f64>>,
    /// Labels computed so far, by layer.
    pub labels: BTreeMap<usize, WeakLabel>,
}

impl TrainSample {
    /// Runs the frozen model once to cache the status vectors at `layers`.
    pub fn prepare(
        model: &Model,
        selector: &StatusSelector,
        layers: std::ops::RangeInclusive<usize>,
        sample_id: usize,
        inputs: Inputs,
        opts: GenerateOptions,
    ) -> Result<Self> {
        let mut state = model.begin(&inputs, false)?;
        let mut features = BTreeMap::new();
        for layer in 0..model.config.num_layers {
            if layers.contains(&layer) {
                features.insert(layer, state_status(selector, &state)?);
            }
            state.step()?;
        }
        Ok(Self {
            sample_id,
            baseline: baseline_answer(model, &inputs, opts)?,
            inputs,
            features,
            labels: BTreeMap::new(),
        })
    }

    pub fn label(&mut self, model: &Model, layer: usize, alpha: f64, opts: GenerateOptions) -> Result<WeakLabel> {
        if let Some(l) = self.labels.get(&layer) {
            if (l.tau - alpha * l.rho_base).abs() <= f64::EPSILON * l.tau.abs() {
                return Ok(*l);
            }
        }
        let l = label_against(model, &self.inputs, &self.baseline, self.sample_id, layer, alpha, opts)?;
        self.labels.insert(layer, l);
        Ok(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub sample_id: usize,
    pub layer: usize,
    pub y: bool,
    pub loss: f64,
}

fn sgd_update(param: &mut Matrix, grad: &Matrix, vel: &mut Matrix, lr: f64, momentum: f64) {
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

#[derive(Debug, Clone)]
struct Velocity {
    w1: Matrix,
    w2: Matrix,
    b1: Option<Matrix>,
    b2: Option<Matrix>,
}

/// Fits `gates` to weak labels with per-sample SGD. Each visit of a sample
/// draws one gated layer uniformly and updates only that layer's gate.
/// Missing labels are obtained from `labeler` and cached on the sample.
pub fn train_gates_with(
    gates: &mut GateWeights,
    samples: &mut [TrainSample],
    cfg: &TrainConfig,
    labeler: &mut dyn FnMut(&mut TrainSample, usize) -> Result<WeakLabel>,
) -> Result<Vec<TrainLogEntry>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let (first, last) = (gates.config.first_layer, gates.config.last_layer);
    let mut root = SeededRng::new(cfg.seed);
    let mut subset_rng = root.fork(1);
    let mut order_rng = root.fork(2);
    let mut layer_rng = root.fork(3);
    let mut subset: Vec<usize> = (0..samples.len()).collect();
    subset_rng.shuffle(&mut subset);
    subset.truncate(((cfg.sample_fraction * samples.len() as f64).ceil() as usize).max(1));
    let mut vel: Vec<Velocity> = gates
        .gates
        .iter()
        .map(|g| Velocity {
            w1: Matrix::zeros(g.w1.rows(), g.w1.cols()),
            w2: Matrix::zeros(g.w2.rows(), g.w2.cols()),
            b1: g.b1.as_ref().map(|b| Matrix::zeros(1, b.cols())),
            b2: g.b2.as_ref().map(|b| Matrix::zeros(1, b.cols())),
        })
        .collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order = subset.clone();
        order_rng.shuffle(&mut order);
        for &i in &order {
            let layer = sample_exit_layer(&mut layer_rng, first, last)?;
            let label = labeler(&mut samples[i], layer)?;
            let sample = &samples[i];
            let feature = sample
                .features
                .get(&layer)
                .ok_or_else(|| Error::invalid(format!("sample {} has no features at layer {layer}", sample.sample_id)))?;
            let gate = gates.gate_mut(layer).expect("layer drawn from the gated range");
            let (loss, grad) = gate_grad(gate, feature, label.y)?;
            let v = &mut vel[layer - first];
            sgd_update(&mut gate.w1, &grad.w1, &mut v.w1, cfg.lr, cfg.momentum);
            sgd_update(&mut gate.w2, &grad.w2, &mut v.w2, cfg.lr, cfg.momentum);
            if let (Some(b), Some(g), Some(vb)) = (gate.b1.as_mut(), grad.b1.as_ref(), v.b1.as_mut()) {
                sgd_update(b, g, vb, cfg.lr, cfg.momentum);
            }
            if let (Some(b), Some(g), Some(vb)) = (gate.b2.as_mut(), grad.b2.as_ref(), v.b2.as_mut()) {
                sgd_update(b, g, vb, cfg.lr, cfg.momentum);
            }
            log.push(TrainLogEntry {
                step,
                sample_id: sample.sample_id,
                layer,
                y: label.y,
                loss,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// [`train_gates_with`] labelling against `model` with single-token greedy
/// answers.
pub fn train_gates(
    model: &Model,
    gates: &mut GateWeights,
    samples: &mut [TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<TrainLogEntry>> {
    gates.validate(&model.config)?;
    let alpha = cfg.alpha;
    train_gates_with(gates, samples, cfg, &mut |s, layer| {
        s.label(model, layer, alpha, GenerateOptions::default())
    })
}

/// Fraction of cached labels the gates reproduce.
pub fn gate_label_accuracy(gates: &GateWeights, samples: &[TrainSample]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in samples {
        for (layer, label) in &s.labels {
            let (Some(g), Some(f)) = (gates.gate(*layer), s.features.get(layer)) else {
                continue;
            };
            let p = gate_forward_cached(g, f)?.p;
            hit += usize::from(crate::gate::decide(p, gates.config.threshold) == label.y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// One selector's gates after training, evaluated on held-out samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selector: String,
    pub seed: u64,
    pub label_accuracy: f64,
    pub report: EvalReport,
}

/// Trains and evaluates gates for every selector and seed with the same
/// recipe. Labels do not depend on the selector and are computed once.
/// The seed drives both the gate initialisation and the training order.
pub fn selector_ablation(
    model: &Model,
    codebook: &Matrix,
    train: &[SynthTask],
    test: &[SynthTask],
    selectors: &[StatusSelector],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let opts = GenerateOptions::default();
    let mut cache: HashMap<(usize, usize), WeakLabel> = HashMap::new();
    let mut rows = Vec::new();
    for selector in selectors {
        let gate_cfg = GateConfig::for_model(&model.config, selector.clone());
        let mut samples = train
            .iter()
            .map(|s| TrainSample::prepare(model, selector, gate_cfg.layers(), s.id, s.inputs(codebook), opts))
            .collect::<Result<Vec<_>>>()?;
        for &seed in seeds {
            let mut gates = GateWeights::init(&model.config, gate_cfg.clone(), seed)?;
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            train_gates_with(&mut gates, &mut samples, &run_cfg, &mut |s, layer| {
                if let Some(l) = cache.get(&(s.sample_id, layer)) {
                    s.labels.insert(layer, *l);
                    return Ok(*l);
                }
                let l = s.label(model, layer, cfg.alpha, opts)?;
                cache.insert((s.sample_id, layer), l);
                Ok(l)
            })?;
            rows.push(AblationRow {
                selector: selector.to_string(),
                seed,
                label_accuracy: gate_label_accuracy(&gates, &samples)?,
                report: evaluate(model, codebook, test, Method::Dyvte(&gates))?,
            });
            samples.iter_mut().for_each(|s| s.labels.clear());
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::forced_mask_model;
    use crate::tensor::softmax;

    #[test]
    fn uncertainty_closed_forms() {
        assert!(answer_uncertainty(&[vec![0.0; 4]], &[2]).unwrap() - 4f64.ln() < 1e-15);
        let sure = vec![vec![0.0, 800.0, 0.0]];
        assert_eq!(answer_uncertainty(&sure, &[1]).unwrap(), 0.0);
        assert!(answer_uncertainty(&[], &[]).is_err());
        let mut rng = SeededRng::new(1);
        let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let tokens = [0, 3, 4];
        let direct: f64 = logits
            .iter()
            .zip(tokens)
            .map(|(l, t)| -softmax(l)[t].ln())
            .sum::<f64>()
            / 3.0;
        assert!((answer_uncertainty(&logits, &tokens).unwrap() - direct).abs() < 1e-12);
    }

    fn base(rho: f64) -> AnswerRun {
        AnswerRun { tokens: vec![3], rho }
    }

    fn test_model() -> Model {
        let c = ModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 8,
            num_visual: 6,
            max_text: 4,
        };
        forced_mask_model(c, 2, 3).unwrap()
    }

    fn test_inputs(seed: u64) -> Inputs {
        let mut rng = SeededRng::new(seed);
        Inputs::new(Matrix::from_vec(6, 16, (0..96).map(|_| rng.normal()).collect()).unwrap(), vec![1, 5])
    }

    #[test]
    fn exit_at_depth_labels_one_unless_certain() {
        let m = test_model();
        let x = test_inputs(2);
        let l = generate_label(&m, &x, 0, 4, DEFAULT_ALPHA, GenerateOptions::default()).unwrap();
        assert!(l.answers_equal && l.rho_exit == l.rho_base);
        assert_eq!(l.y, l.rho_base > 0.0);
        assert_eq!(l.tau, 1.03 * l.rho_base);
    }

    #[test]
    fn labels_are_one_from_the_forced_onset() {
        let m = test_model();
        for seed in 0..10 {
            let x = test_inputs(seed);
            for layer in 2..=4 {
                let l = generate_label(&m, &x, seed as usize, layer, DEFAULT_ALPHA, GenerateOptions::default()).unwrap();
                assert!(l.y, "seed {seed} layer {layer}");
                assert!((l.rho_exit - l.rho_base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_rule_cases() {
        // Answer kept but uncertainty 5% higher.
        let b = base(1.0);
        let exited = AnswerRun { tokens: vec![3], rho: 1.05 };
        let tau = DEFAULT_ALPHA * b.rho;
        assert!(!(exited.tokens == b.tokens && exited.rho < tau));
        let exited = AnswerRun { tokens: vec![3], rho: 1.02 };
        assert!(exited.tokens == b.tokens && exited.rho < tau);
    }

    /// The answer is written into one visual token; the text alone cannot
    /// recover it, so an exit before any block flips the answer.
    #[test]
    fn flipped_answer_gives_zero() {
        let c = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 1,
            ffn_dim: 8,
            vocab_size: 4,
            num_visual: 2,
            max_text: 2,
        };
        let mut m = Model::random(c, 4).unwrap();
        let w = &mut m.weights;
        w.pos_embed.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.token_embed = Matrix::zeros(4, 8);
        w.token_embed.set(0, 7, 1.0);
        for lw in w.layers.iter_mut() {
            lw.wq = Matrix::zeros(8, 8);
            lw.wk = Matrix::zeros(8, 8);
            lw.wv = Matrix::identity(8);
            lw.wo = Matrix::identity(8);
            lw.w_up = Matrix::zeros(8, 8);
        }
        w.lm_head = Matrix::zeros(8, 4);
        w.lm_head.set(0, 1, 3.0);
        w.lm_head.set(7, 2, 1.0);
        let mut vis = Matrix::zeros(2, 8);
        vis.set(0, 0, 4.0);
        let x = Inputs::new(vis, vec![0]);
        let base = baseline_answer(&m, &x, GenerateOptions::default()).unwrap();
        assert_eq!(base.tokens, vec![1]);
        let l = generate_label(&m, &x, 0, 0, DEFAULT_ALPHA, GenerateOptions::default()).unwrap();
        assert!(!l.answers_equal && !l.y);
    }

    #[test]
    fn layer_sampling() {
        let mut rng = SeededRng::new(3);
        assert!((0..100).all(|_| sample_exit_layer(&mut rng, 3, 3).unwrap() == 3));
        assert!(sample_exit_layer(&mut rng, 4, 3).is_err());
        let n = 100_000;
        let mut counts = [0f64; 8];
        for _ in 0..n {
            counts[sample_exit_layer(&mut rng, 1, 8).unwrap() - 1] += 1.0;
        }
        let e = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 7 degrees of freedom, 0.999 quantile.
        assert!(chi2 < 24.32, "chi2 {chi2}");
        let sd = (e * (1.0 - 1.0 / 8.0)).sqrt();
        assert!(counts.iter().all(|c| (c - e).abs() < 3.0 * sd + 1.0));
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        for _ in 0..50 {
            assert_eq!(sample_exit_layer(&mut a, 1, 8).unwrap(), sample_exit_layer(&mut b, 1, 8).unwrap());
        }
    }

    #[test]
    fn loss_cases() {
        assert!((gate_loss([0.5, 0.5], true) - 2f64.ln()).abs() < 1e-15);
        assert!((gate_loss([0.5, 0.5], false) - 2f64.ln()).abs() < 1e-15);
        assert!(gate_loss([1e-9, 1.0 - 1e-9], true) < 1e-8);
        assert!(gate_loss([1.0, 0.0], true).is_finite());
        assert_eq!(gate_loss([1.0, 0.0], true), -PROB_CLAMP.ln());
    }

    fn random_gate(rng: &mut SeededRng, f: usize, h: usize, bias: bool) -> LayerGate {
        let mut g = LayerGate::zeros(1, f, h, bias);
        for m in [Some(&mut g.w1), Some(&mut g.w2), g.b1.as_mut(), g.b2.as_mut()].into_iter().flatten() {
            m.data_mut().iter_mut().for_each(|w| *w = rng.normal());
        }
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(11);
        for probe in 0..30 {
            let (f, h) = (1 + rng.below(4), 1 + rng.below(4));
            let bias = probe % 2 == 1;
            let gate = random_gate(&mut rng, f, h, bias);
            let x: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let y = rng.below(2) == 1;
            let (_, grad) = gate_grad(&gate, &x, y).unwrap();
            // Same loss in log-sum-exp form, which keeps precision when p_y is near 1.
            let loss_at = |g: &LayerGate| {
                let z = gate_forward_cached(g, &x).unwrap().logits;
                log_sum_exp(&z) - z[usize::from(y)]
            };
            let check = |name: &str, get: &dyn Fn(&mut LayerGate) -> &mut Matrix, analytic: &Matrix| {
                for k in 0..analytic.data().len() {
                    let mut plus = gate.clone();
                    get(&mut plus).data_mut()[k] += 1e-6;
                    let mut minus = gate.clone();
                    get(&mut minus).data_mut()[k] -= 1e-6;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / 2e-6;
                    let a = analytic.data()[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                    assert!(rel < 1e-4, "{name}[{k}] analytic {a} fd {fd}");
                }
            };
            check("w1", &|g| &mut g.w1, &grad.w1);
            check("w2", &|g| &mut g.w2, &grad.w2);
            if bias {
                check("b1", &|g| g.b1.as_mut().unwrap(), grad.b1.as_ref().unwrap());
                check("b2", &|g| g.b2.as_mut().unwrap(), grad.b2.as_ref().unwrap());
            }
        }
    }

    fn separable_samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let mut features = BTreeMap::new();
                let mut labels = BTreeMap::new();
                for layer in 1..=2 {
                    let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                    let y = x[0] + 0.5 * x[1] - 0.25 * x[3] > 0.0;
                    features.insert(layer, x);
                    labels.insert(
                        layer,
                        WeakLabel { sample_id: i, layer, y, rho_base: 1.0, rho_exit: 1.0, tau: 1.03, answers_equal: true },
                    );
                }
                TrainSample {
                    sample_id: i,
                    inputs: Inputs::text_only(vec![0], 2),
                    baseline: base(1.0),
                    features,
                    labels,
                }
            })
            .collect()
    }

    fn toy_gates(seed: u64) -> (ModelConfig, GateWeights) {
        let c = ModelConfig { num_layers: 3, hidden_dim: 2, num_heads: 1, ffn_dim: 2, vocab_size: 2, num_visual: 1, max_text: 1 };
        let mut cfg = GateConfig::for_model(&c, StatusSelector::default());
        cfg.hidden = 8;
        (c, GateWeights::init(&c, cfg, seed).unwrap())
    }

    fn cached(s: &mut TrainSample, layer: usize) -> Result<WeakLabel> {
        Ok(s.labels[&layer])
    }

    #[test]
    fn separable_labels_are_learned() {
        let (_, mut gates) = toy_gates(1);
        let mut train = separable_samples(2000, 2);
        let cfg = TrainConfig { lr: 0.05, epochs: 10, seed: 3, ..TrainConfig::default() };
        train_gates_with(&mut gates, &mut train, &cfg, &mut cached).unwrap();
        let held = separable_samples(500, 4);
        let acc = gate_label_accuracy(&gates, &held).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (_, mut gates) = toy_gates(5);
        let before = gates.clone();
        let mut train = separable_samples(50, 6);
        let cfg = TrainConfig { lr: 0.0, momentum: 0.5, ..TrainConfig::default() };
        let log = train_gates_with(&mut gates, &mut train, &cfg, &mut cached).unwrap();
        assert_eq!(log.len(), 50);
        assert_eq!(gates, before);
    }

    #[test]
    fn training_is_deterministic_and_samples_layers() {
        let run = || {
            let (_, mut gates) = toy_gates(7);
            let mut train = separable_samples(200, 8);
            let cfg = TrainConfig { lr: 0.01, sample_fraction: 0.5, seed: 9, ..TrainConfig::default() };
            let log = train_gates_with(&mut gates, &mut train, &cfg, &mut cached).unwrap();
            (gates, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 100);
        assert!(la.iter().any(|e| e.layer == 1) && la.iter().any(|e| e.layer == 2));
    }

    #[test]
    fn untouched_layers_keep_their_weights() {
        let (_, mut gates) = toy_gates(7);
        let before = gates.clone();
        let mut train = separable_samples(1, 8);
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let log = train_gates_with(&mut gates, &mut train, &cfg, &mut cached).unwrap();
        let trained = log[0].layer;
        for (g, b) in gates.gates.iter().zip(&before.gates) {
            assert_eq!(g == b, g.layer != trained);
        }
    }

    #[test]
    fn model_is_frozen_during_training() {
        let m = test_model();
        let before = m.clone();
        let cfg = GateConfig::for_model(&m.config, StatusSelector::default());
        let mut gates = GateWeights::init(&m.config, cfg.clone(), 1).unwrap();
        let mut samples: Vec<TrainSample> = (0..6)
            .map(|i| {
                TrainSample::prepare(&m, &cfg.selector, cfg.layers(), i, test_inputs(i as u64), GenerateOptions::default())
                    .unwrap()
            })
            .collect();
        let log = train_gates(&m, &mut gates, &mut samples, &TrainConfig::default()).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(m, before);
        assert!(samples.iter().all(|s| s.labels.len() == 1));
    }
}
