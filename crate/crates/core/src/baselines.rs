//! Fixed-layer exit, attention-rank visual-token pruning and their
//! combination with the gates, plus the evaluation driver shared by all of
//! them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{FlopsReport, FlopsSummary};
use crate::gate::{flops_of, ExitDecision, GateHook, GateWeights};
use crate::model::{generate, BoundaryHook, ForwardState, GenerateOptions, Generation, Inputs, Model, NoIntervention};
use crate::synth::{SynthTask, TaskKind};
use crate::tensor::Matrix;

/// Removes every visual token at one boundary.
#[derive(Debug, Clone, Copy)]
pub struct FixedExit {
    pub layer: usize,
}

impl BoundaryHook for FixedExit {
    fn at_boundary(&mut self, layer: usize, state: &mut ForwardState<'_>) -> Result<()> {
        if layer == self.layer {
            state.execute_exit()?;
        }
        Ok(())
    }
}

/// Generation with all visual tokens removed after `l` blocks; `l = L` is
/// the unmodified model.
pub fn manual_exit(model: &Model, inputs: &Inputs, l: usize, opts: GenerateOptions) -> Result<Generation> {
    if l > model.config.num_layers {
        return Err(Error::invalid(format!("exit layer {l} beyond depth {}", model.config.num_layers)));
    }
    generate(model, inputs, &mut FixedExit { layer: l }, opts)
}

/// Number of visual tokens kept out of `n_v` at ratio `r`.
pub fn kept_count(n_v: usize, r: f64) -> usize {
    ((r * n_v as f64).ceil() as usize).min(n_v)
}

/// Mean attention each visual token receives at the latest block from the
/// queries at later positions.
pub fn visual_scores(state: &ForwardState<'_>) -> Result<Vec<f64>> {
    let rec = state
        .last_record()
        .ok_or_else(|| Error::invalid("attention ranking needs at least one block"))?;
    let n_v = state.n_visual();
    if rec.n_visual != n_v || rec.n_tokens() != state.hidden().rows() {
        return Err(Error::invalid("attention record is stale"));
    }
    Ok((0..n_v)
        .map(|j| {
            let later: Vec<usize> = (0..rec.n_tokens()).filter(|&i| rec.positions[i] > rec.positions[j]).collect();
            if later.is_empty() {
                0.0
            } else {
                later.iter().map(|&i| rec.attention.get(i, j)).sum::<f64>() / later.len() as f64
            }
        })
        .collect())
}

/// Indices of the `keep` highest scores, ascending; ties favour the lower index.
pub fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// FastV-style pruning: after block `layer`, keep the `⌈r·n_v⌉` visual tokens
/// that receive the most attention.
#[derive(Debug, Clone, Copy)]
pub struct AttnRankPrune {
    pub layer: usize,
    pub keep_ratio: f64,
}

impl AttnRankPrune {
    pub fn new(layer: usize, keep_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_ratio) {
            return Err(Error::invalid("keep ratio must lie in [0, 1]"));
        }
        Ok(Self { layer, keep_ratio })
    }
}

impl BoundaryHook for AttnRankPrune {
    fn at_boundary(&mut self, layer: usize, state: &mut ForwardState<'_>) -> Result<()> {
        if layer != self.layer {
            return Ok(());
        }
        let n_v = state.n_visual();
        let keep = kept_count(n_v, self.keep_ratio);
        if keep == n_v {
            return Ok(());
        }
        if keep == 0 {
            return state.execute_exit();
        }
        let scores = visual_scores(state)?;
        state.retain_visual(&top_indices(&scores, keep))
    }
}

pub fn attn_rank_prune(
    model: &Model,
    inputs: &Inputs,
    layer: usize,
    keep_ratio: f64,
    opts: GenerateOptions,
) -> Result<Generation> {
    let mut hook = AttnRankPrune::new(layer, keep_ratio)?;
    generate(model, inputs, &mut hook, opts)
}

/// Gates and pruning together. At the pruning boundary the gate is consulted
/// first; if it does not fire, pruning applies and the gates keep watching
/// the reduced sequence.
pub struct Combined<'g> {
    pub prune: AttnRankPrune,
    pub gate: GateHook<'g>,
}

impl BoundaryHook for Combined<'_> {
    fn at_boundary(&mut self, layer: usize, state: &mut ForwardState<'_>) -> Result<()> {
        self.gate.at_boundary(layer, state)?;
        if state.exited_at().is_none() {
            self.prune.at_boundary(layer, state)?;
        }
        Ok(())
    }
}

/// How the visual tokens are treated during prefill.
#[derive(Debug, Clone, Copy)]
pub enum Method<'g> {
    Baseline,
    ManualExit(usize),
    Prune { layer: usize, keep_ratio: f64 },
    Dyvte(&'g GateWeights),
    Combined { gates: &'g GateWeights, layer: usize, keep_ratio: f64 },
}

impl Method<'_> {
    pub fn label(&self) -> String {
        match self {
            Method::Baseline => "baseline".into(),
            Method::ManualExit(l) => format!("exit@{l}"),
            Method::Prune { layer, keep_ratio } => format!("prune@{layer}:r={keep_ratio}"),
            Method::Dyvte(_) => "dyvte".into(),
            Method::Combined { layer, keep_ratio, .. } => format!("dyvte+prune@{layer}:r={keep_ratio}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub generation: Generation,
    pub decisions: Vec<ExitDecision>,
    pub flops: FlopsReport,
}

pub fn run_method(model: &Model, inputs: &Inputs, method: Method<'_>, opts: GenerateOptions) -> Result<MethodOutput> {
    let mut decisions = Vec::new();
    let generation = match method {
        Method::Baseline => generate(model, inputs, &mut NoIntervention, opts)?,
        Method::ManualExit(l) => manual_exit(model, inputs, l, opts)?,
        Method::Prune { layer, keep_ratio } => attn_rank_prune(model, inputs, layer, keep_ratio, opts)?,
        Method::Dyvte(gates) => {
            gates.validate(&model.config)?;
            let mut hook = GateHook::new(gates);
            let g = generate(model, inputs, &mut hook, opts)?;
            decisions = hook.decisions;
            g
        }
        Method::Combined { gates, layer, keep_ratio } => {
            gates.validate(&model.config)?;
            let mut hook = Combined {
                prune: AttnRankPrune::new(layer, keep_ratio)?,
                gate: GateHook::new(gates),
            };
            let g = generate(model, inputs, &mut hook, opts)?;
            decisions = hook.gate.decisions;
            g
        }
    };
    Ok(MethodOutput {
        flops: flops_of(model, inputs, &generation),
        generation,
        decisions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: usize,
    pub task: TaskKind,
    pub answer: usize,
    pub predicted: usize,
    pub exit_layer: Option<usize>,
    pub flops: u64,
    pub baseline_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub flops: FlopsSummary,
    /// Exit layer counts keyed by layer, with `"none"` for no exit.
    pub exit_histogram: BTreeMap<String, usize>,
    pub mean_exit_layer: Option<f64>,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    pub fn from_samples(method: String, samples: Vec<SampleResult>, depth: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let correct = samples.iter().filter(|s| s.predicted == s.answer).count();
        let mut exit_histogram = BTreeMap::new();
        for s in &samples {
            let key = s.exit_layer.map_or_else(|| "none".to_string(), |l| format!("{l:02}"));
            *exit_histogram.entry(key).or_insert(0) += 1;
        }
        let mean_exit_layer =
            (!samples.is_empty()).then(|| samples.iter().map(|s| s.exit_layer.unwrap_or(depth) as f64).sum::<f64>() / n);
        let reports: Vec<FlopsReport> = samples
            .iter()
            .map(|s| FlopsReport {
                schema_version: crate::SCHEMA_VERSION,
                per_layer: Vec::new(),
                total_baseline: s.baseline_flops,
                total_with_exit: s.flops,
                reduction_pct: 0.0,
                exit_layer: s.exit_layer,
            })
            .collect();
        Self {
            method,
            accuracy: correct as f64 / n,
            flops: FlopsSummary::from_reports(&reports),
            exit_histogram,
            mean_exit_layer,
            samples,
        }
    }

    /// Report restricted to one task family.
    pub fn for_task(&self, task: TaskKind, depth: usize) -> Self {
        let s = self.samples.iter().filter(|s| s.task == task).cloned().collect();
        Self::from_samples(self.method.clone(), s, depth)
    }
}

/// Single-token greedy evaluation of `method` on `samples`. Samples that never
/// exit count as exiting at the full depth in the mean exit layer.
pub fn evaluate(model: &Model, codebook: &Matrix, samples: &[SynthTask], method: Method<'_>) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let out = run_method(model, &s.inputs(codebook), method, GenerateOptions::default())?;
        results.push(SampleResult {
            id: s.id,
            task: s.task,
            answer: s.answer,
            predicted: out.generation.tokens[0],
            exit_layer: out.generation.exit_layer,
            flops: out.flops.total_with_exit,
            baseline_flops: out.flops.total_baseline,
        });
    }
    Ok(EvalReport::from_samples(method.label(), results, model.config.num_layers))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_or_ratio: f64,
    pub accuracy: f64,
    /// Mean prefill operations per sample.
    pub flops: f64,
    pub reduction_pct: f64,
}

/// Accuracy and cost of fixed-layer exit at every listed layer.
pub fn exit_sweep(model: &Model, codebook: &Matrix, samples: &[SynthTask], layers: &[usize]) -> Result<Vec<SweepRow>> {
    layers
        .iter()
        .map(|&l| {
            let r = evaluate(model, codebook, samples, Method::ManualExit(l))?;
            Ok(SweepRow {
                layer_or_ratio: l as f64,
                accuracy: r.accuracy,
                flops: r.flops.mean_with_exit,
                reduction_pct: r.flops.reduction_pct,
            })
        })
        .collect()
}

/// Accuracy and cost of pruning at `layer` for every listed keep ratio.
pub fn prune_sweep(
    model: &Model,
    codebook: &Matrix,
    samples: &[SynthTask],
    layer: usize,
    ratios: &[f64],
) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&keep_ratio| {
            let r = evaluate(model, codebook, samples, Method::Prune { layer, keep_ratio })?;
            Ok(SweepRow {
                layer_or_ratio: keep_ratio,
                accuracy: r.accuracy,
                flops: r.flops.mean_with_exit,
                reduction_pct: r.flops.reduction_pct,
            })
        })
        .collect()
}
