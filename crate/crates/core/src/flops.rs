//! Analytic prefill cost with and without visual-token exit.
//!
//! Convention: a multiply-add counts as 2 operations and only the block
//! matrix products are counted.
//!
//! | term                        | ops per block     |
//! |-----------------------------|-------------------|
//! | Q, K, V, O projections      | `8·n·d²`          |
//! | scores and value mixing     | `4·n²·d` (dense)  |
//! | feed-forward                | `4·n·d·d_ff`      |
//!
//! Norms, softmax and GELU are excluded unless
//! [`FlopsConvention::include_nonlinear`] is set, and the embedding and output
//! head are outside the block sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundaryHook, Inputs, Model, ModelConfig};
use crate::tensor::count_ops;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsConvention {
    /// Adds `2·5·n·d` for the two norms, `3·h·n²` for the softmax and
    /// `8·n·d_ff` for the GELU.
    pub include_nonlinear: bool,
}

/// Cost of one block over `n` live tokens.
pub fn layer_flops(config: &ModelConfig, n: usize) -> u64 {
    layer_flops_with(config, n, FlopsConvention::default())
}

pub fn layer_flops_with(config: &ModelConfig, n: usize, conv: FlopsConvention) -> u64 {
    let (n, d, ff) = (n as u64, config.hidden_dim as u64, config.ffn_dim as u64);
    let mut ops = 8 * n * d * d + 4 * n * n * d + 4 * n * d * ff;
    if conv.include_nonlinear {
        ops += 10 * n * d + 3 * config.num_heads as u64 * n * n + 8 * n * ff;
    }
    ops
}

/// Cost of one decode step whose token attends over `context` cached keys
/// (itself included) in a block.
pub fn decode_layer_flops(config: &ModelConfig, context: usize) -> u64 {
    let (c, d, ff) = (context as u64, config.hidden_dim as u64, config.ffn_dim as u64);
    8 * d * d + 4 * c * d + 4 * d * ff
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schema_version: u32,
    /// Cost of every block in the run being reported.
    pub per_layer: Vec<u64>,
    pub total_baseline: u64,
    pub total_with_exit: u64,
    pub reduction_pct: f64,
    pub exit_layer: Option<usize>,
}

impl FlopsReport {
    /// Report for a prefill whose blocks saw `live` tokens each, against a
    /// baseline in which every block sees `full` tokens.
    pub fn from_live_counts(
        config: &ModelConfig,
        full: usize,
        live: &[usize],
        exit_layer: Option<usize>,
        conv: FlopsConvention,
    ) -> Self {
        let per_layer: Vec<u64> = live.iter().map(|&n| layer_flops_with(config, n, conv)).collect();
        let total_baseline = config.num_layers as u64 * layer_flops_with(config, full, conv);
        let total_with_exit = per_layer.iter().sum();
        Self {
            schema_version: crate::SCHEMA_VERSION,
            reduction_pct: reduction_pct(total_baseline, total_with_exit),
            per_layer,
            total_baseline,
            total_with_exit,
            exit_layer,
        }
    }
}

pub fn reduction_pct(baseline: u64, with_exit: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        100.0 * (1.0 - with_exit as f64 / baseline as f64)
    }
}

/// Prefill cost when the visual tokens exit after `exit_layer` blocks
/// (`None` or `L` for no exit) with `t` text tokens.
pub fn total_flops(config: &ModelConfig, exit_layer: Option<usize>, t: usize) -> Result<FlopsReport> {
    total_flops_with(config, exit_layer, t, FlopsConvention::default())
}

pub fn total_flops_with(
    config: &ModelConfig,
    exit_layer: Option<usize>,
    t: usize,
    conv: FlopsConvention,
) -> Result<FlopsReport> {
    config.validate()?;
    if t == 0 {
        return Err(Error::invalid("at least one text token required"));
    }
    let full = config.num_visual + t;
    let exit = exit_layer.unwrap_or(config.num_layers);
    if exit > config.num_layers {
        return Err(Error::invalid(format!("exit layer {exit} beyond depth")));
    }
    let live: Vec<usize> = (1..=config.num_layers)
        .map(|k| if k <= exit { full } else { t })
        .collect();
    let exit_layer = exit_layer.filter(|&l| l < config.num_layers);
    Ok(FlopsReport::from_live_counts(config, full, &live, exit_layer, conv))
}

/// Operations actually executed by each prefill block, measured by counting
/// the kernel calls while `hook` intervenes at the block boundaries.
pub fn instrumented_prefill_flops(
    model: &Model,
    inputs: &Inputs,
    hook: &mut dyn BoundaryHook,
) -> Result<Vec<u64>> {
    let mut state = model.begin(inputs, false)?;
    let mut per_block = Vec::with_capacity(model.config.num_layers);
    for layer in 0..model.config.num_layers {
        if state.exited_at().is_none() {
            hook.at_boundary(layer, &mut state)?;
        }
        let (res, ops) = count_ops(|| state.step());
        res?;
        per_block.push(ops);
    }
    Ok(per_block)
}

/// Sums of many per-sample reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub samples: usize,
    pub mean_baseline: f64,
    pub mean_with_exit: f64,
    pub reduction_pct: f64,
}

impl FlopsSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a FlopsReport>) -> Self {
        let (mut n, mut base, mut with) = (0usize, 0u128, 0u128);
        for r in reports {
            n += 1;
            base += r.total_baseline as u128;
            with += r.total_with_exit as u128;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            samples: n,
            mean_baseline: base as f64 / n as f64,
            mean_with_exit: with as f64 / n as f64,
            reduction_pct: if base == 0 { 0.0 } else { 100.0 * (1.0 - with as f64 / base as f64) },
        }
    }
}
