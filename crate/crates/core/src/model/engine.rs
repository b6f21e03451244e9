//! Greedy generation with a hook at every block boundary of the prefill.

use crate::error::{Error, Result};

use super::forward::{ForwardState, LayerTrace};
use super::{argmax, Inputs, Model};

/// Intervenes between prefill blocks, for example by removing visual tokens.
///
/// `at_boundary` is called with `layer = 0, 1, …, L-1` (the number of blocks
/// applied so far) for as long as the visual tokens have not exited.
pub trait BoundaryHook {
    fn at_boundary(&mut self, layer: usize, state: &mut ForwardState<'_>) -> Result<()>;
}

/// Leaves the prefill untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoIntervention;

impl BoundaryHook for NoIntervention {
    fn at_boundary(&mut self, _: usize, _: &mut ForwardState<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub eos: Option<usize>,
    pub keep_trace: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 1,
            eos: None,
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Greedily emitted token ids.
    pub tokens: Vec<usize>,
    /// Logits that produced each emitted token.
    pub logits: Vec<Vec<f64>>,
    /// Boundary at which all visual tokens were removed, if they were.
    pub exit_layer: Option<usize>,
    /// Live token count of every prefill block.
    pub live_counts: Vec<usize>,
    /// Prefill trace when requested.
    pub trace: Option<LayerTrace>,
}

pub fn generate(
    model: &Model,
    inputs: &Inputs,
    hook: &mut dyn BoundaryHook,
    opts: GenerateOptions,
) -> Result<Generation> {
    if opts.max_new_tokens == 0 {
        return Err(Error::invalid("max_new_tokens must be positive"));
    }
    let mut state = model.begin(inputs, opts.keep_trace)?;
    for layer in 0..model.config.num_layers {
        if state.exited_at().is_none() {
            hook.at_boundary(layer, &mut state)?;
        }
        state.step()?;
    }
    let live_counts = state.live_counts().to_vec();
    let prefill = state.finish()?;
    let mut cache = prefill.cache;
    let exit_layer = cache.exited_at;
    let mut logits = vec![prefill.logits];
    let mut tokens = vec![argmax(&logits[0])];
    while tokens.len() < opts.max_new_tokens
        && Some(*tokens.last().unwrap()) != opts.eos
        && cache.next_position < model.config.max_positions()
    {
        let next = model.decode_step(&mut cache, *tokens.last().unwrap())?;
        tokens.push(argmax(&next));
        logits.push(next);
    }
    Ok(Generation {
        tokens,
        logits,
        exit_layer,
        live_counts,
        trace: opts.keep_trace.then_some(prefill.trace),
    })
}
