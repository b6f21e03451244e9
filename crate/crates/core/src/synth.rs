//! Synthetic grid tasks and the desk-scale model they train.
//!
//! An image is a `g × g` grid of symbols; each cell becomes one visual token
//! whose embedding is a fixed random vector for its symbol (the stand-in for
//! a projected vision encoder). Two question types need different amounts of
//! fusion:
//!
//! * **lookup**: "which symbol is in cell c?"
//! * **two-hop**: read the symbol `s` in cell `c`, then answer with the
//!   symbol in pointer cell `g² − S + s`. Two-hop questions only ask about
//!   cells below `g² − S`, so the pointer never leads back to the queried
//!   cell and the question alone says nothing about the answer.
//!
//! The prompt is `[BOS, task, cell]` and the answer is a single symbol token.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Inputs, Model, ModelConfig, Weights};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

pub const BOS: usize = 0;
pub const LOOKUP_TOKEN: usize = 1;
pub const TWO_HOP_TOKEN: usize = 2;
const FIRST_CELL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lookup,
    TwoHop,
}

impl TaskKind {
    pub fn fusion_depth_hint(self) -> usize {
        match self {
            TaskKind::Lookup => 1,
            TaskKind::TwoHop => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lookup => "lookup",
            TaskKind::TwoHop => "two_hop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub grid_size: usize,
    pub num_symbols: usize,
    /// Probability that a sample is a lookup question; the rest are two-hop.
    pub lookup_fraction: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Seed of the symbol embedding table.
    pub embedding_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            grid_size: 4,
            num_symbols: 8,
            lookup_fraction: 0.5,
            train: 4000,
            val: 500,
            test: 1000,
            embedding_seed: 17,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::schema("grid_size", "must be at least 2"));
        }
        if self.num_symbols < 2 {
            return Err(Error::schema("num_symbols", "must be at least 2"));
        }
        if self.num_symbols >= self.num_cells() {
            return Err(Error::schema(
                "num_symbols",
                "two-hop pointers need num_symbols < grid_size^2",
            ));
        }
        if !(0.0..=1.0).contains(&self.lookup_fraction) {
            return Err(Error::schema("lookup_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Cells a question of kind `task` may ask about.
    pub fn num_question_cells(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Lookup => self.num_cells(),
            TaskKind::TwoHop => self.num_cells() - self.num_symbols,
        }
    }

    pub fn cell_token(&self, cell: usize) -> usize {
        FIRST_CELL + cell
    }

    pub fn symbol_token(&self, symbol: usize) -> usize {
        FIRST_CELL + self.num_cells() + symbol
    }

    pub fn token_symbol(&self, token: usize) -> Option<usize> {
        let first = self.symbol_token(0);
        (first..first + self.num_symbols)
            .contains(&token)
            .then(|| token - first)
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CELL + self.num_cells() + self.num_symbols
    }

    /// Model shape matching this data: vocabulary, visual count and prompt
    /// room filled in, the rest taken from `base`.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            num_visual: self.num_cells(),
            max_text: base.max_text.max(4),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTask {
    pub id: usize,
    pub task: TaskKind,
    /// Symbol id of every cell, row-major.
    pub grid: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: usize,
    pub fusion_depth_hint: usize,
}

impl SynthTask {
    /// Builds the sample for `grid` and queried `cell`, deriving the answer.
    pub fn new(spec: &DataSpec, id: usize, task: TaskKind, grid: Vec<usize>, cell: usize) -> Self {
        let answer = solve(task, &grid, cell, spec.num_symbols);
        Self {
            id,
            task,
            question: vec![
                BOS,
                match task {
                    TaskKind::Lookup => LOOKUP_TOKEN,
                    TaskKind::TwoHop => TWO_HOP_TOKEN,
                },
                spec.cell_token(cell),
            ],
            answer: spec.symbol_token(answer),
            grid,
            fusion_depth_hint: task.fusion_depth_hint(),
        }
    }

    pub fn queried_cell(&self, spec: &DataSpec) -> usize {
        self.question[2] - spec.cell_token(0)
    }

    pub fn inputs(&self, codebook: &Matrix) -> Inputs {
        Inputs::new(codebook.select_rows(&self.grid), self.question.clone())
    }

    pub fn validate(&self, spec: &DataSpec) -> Result<()> {
        if self.grid.len() != spec.num_cells() {
            return Err(Error::schema("grid", format!("expected {} cells", spec.num_cells())));
        }
        if self.grid.iter().any(|&s| s >= spec.num_symbols) {
            return Err(Error::schema("grid", "symbol id out of range"));
        }
        if self.question.len() != 3 || self.question[2] < FIRST_CELL {
            return Err(Error::schema("question", "expected [BOS, task, cell]"));
        }
        let cell = self.queried_cell(spec);
        if cell >= spec.num_cells() {
            return Err(Error::schema("question", "cell out of range"));
        }
        if self.task == TaskKind::TwoHop && cell >= spec.num_question_cells(TaskKind::TwoHop) {
            return Err(Error::schema("question", "two-hop cell inside the pointer region"));
        }
        if spec.symbol_token(solve(self.task, &self.grid, cell, spec.num_symbols)) != self.answer {
            return Err(Error::schema("answer", "does not match grid and question"));
        }
        Ok(())
    }
}

/// Cell read by the second hop of a two-hop question.
pub fn second_cell(grid: &[usize], cell: usize, num_symbols: usize) -> usize {
    grid.len() - num_symbols + grid[cell]
}

/// Ground-truth answer symbol.
pub fn solve(task: TaskKind, grid: &[usize], cell: usize, num_symbols: usize) -> usize {
    match task {
        TaskKind::Lookup => grid[cell],
        TaskKind::TwoHop => grid[second_cell(grid, cell, num_symbols)],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DataSpec,
    pub seed: u64,
    pub train: Vec<SynthTask>,
    pub val: Vec<SynthTask>,
    pub test: Vec<SynthTask>,
}

/// Draws i.i.d. samples into disjoint train/val/test splits.
pub fn generate_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut seen = HashSet::new();
    let mut next_id = 0;
    let mut draw = |count: usize| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let task = if rng.next_f64() < spec.lookup_fraction {
                TaskKind::Lookup
            } else {
                TaskKind::TwoHop
            };
            let grid: Vec<usize> = (0..spec.num_cells()).map(|_| rng.below(spec.num_symbols)).collect();
            let cell = rng.below(spec.num_question_cells(task));
            if !seen.insert((task, grid.clone(), cell)) {
                continue;
            }
            out.push(SynthTask::new(spec, next_id, task, grid, cell));
            next_id += 1;
        }
        out
    };
    let train = draw(spec.train);
    let val = draw(spec.val);
    let test = draw(spec.test);
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        val,
        test,
    })
}

/// Fixed symbol embeddings, `num_symbols × dim`, entries `N(0, 0.5²)`.
pub fn symbol_codebook(num_symbols: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let data = (0..num_symbols * dim).map(|_| 0.5 * rng.normal()).collect();
    Matrix::from_vec(num_symbols, dim, data).expect("finite by construction")
}

/// Greedy accuracy of `model` on `samples`.
pub fn accuracy(model: &Model, codebook: &Matrix, samples: &[SynthTask]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        let logits = model.prefill(&s.inputs(codebook))?.logits;
        correct += usize::from(argmax(&logits) == s.answer);
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Stop once validation accuracy reaches this.
    pub target_accuracy: f64,
    /// Below this at the end of the budget the run is reported as failed.
    pub min_accuracy: f64,
    /// Validation samples used by the periodic check.
    pub eval_samples: usize,
    /// Probability that a training example is run with its visual tokens
    /// removed after a random number of blocks, drawn from
    /// `exit_augment_min..L`.
    pub exit_augment: f64,
    pub exit_augment_min: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_every: 100,
            target_accuracy: 0.95,
            min_accuracy: 0.80,
            eval_samples: 500,
            exit_augment: 0.0,
            exit_augment_min: 1,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainReport {
    pub model: Model,
    pub codebook: Matrix,
    pub steps: usize,
    pub val_accuracy: f64,
    pub reached_target: bool,
    /// `(step, mean batch loss)` at every evaluation.
    pub history: Vec<(usize, f64, f64)>,
}

impl ToyTrainReport {
    /// `Err` when the budget ran out below `min_accuracy`.
    pub fn check(&self, cfg: &ToyTrainConfig) -> Result<()> {
        if self.val_accuracy < cfg.min_accuracy {
            return Err(Error::invalid(format!(
                "training budget exhausted at {:.1}% validation accuracy",
                100.0 * self.val_accuracy
            )));
        }
        Ok(())
    }
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    fn new(config: &ModelConfig) -> Self {
        let mut m = Weights::zeros(config);
        for (_, t) in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn update(&mut self, weights: &mut Weights, grads: &Weights, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let params = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                let mi = B1 * m.data()[i] + (1.0 - B1) * gi;
                let vi = B2 * v.data()[i] + (1.0 - B2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
            }
        }
    }
}

fn zero_grads(config: &ModelConfig) -> Weights {
    let mut g = Weights::zeros(config);
    for (_, t) in g.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    g
}

/// Next-token training of the answer with Adam until the validation target
/// or the step budget is reached. Deterministic given the seeds.
pub fn train_toy_model(
    base: ModelConfig,
    data: &Dataset,
    cfg: &ToyTrainConfig,
) -> Result<ToyTrainReport> {
    let config = data.spec.model_config(base);
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    if cfg.exit_augment > 0.0 && cfg.exit_augment_min >= config.num_layers {
        return Err(Error::schema("exit_augment_min", "must be below the model depth"));
    }
    let codebook = symbol_codebook(data.spec.num_symbols, config.hidden_dim, data.spec.embedding_seed);
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = Model {
        config,
        weights: Weights::init(&config, &mut rng.fork(1)),
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&config);
    let eval_set = &data.val[..cfg.eval_samples.min(data.val.len())];
    let mut history = Vec::new();
    let mut val_accuracy = accuracy(&model, &codebook, eval_set)?;
    let mut steps = 0;
    let mut running = 0.0;
    while steps < cfg.max_steps && val_accuracy < cfg.target_accuracy {
        let mut grads = zero_grads(&config);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let sample = &data.train[order[cursor]];
            cursor += 1;
            let exit = (cfg.exit_augment > 0.0 && rng.next_f64() < cfg.exit_augment)
                .then(|| rng.range_inclusive(cfg.exit_augment_min, config.num_layers - 1));
            batch_loss += crate::model::answer_loss_and_grad(
                &model,
                &sample.inputs(&codebook),
                sample.answer,
                exit,
                &mut grads,
            )?;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut sq = 0.0;
        for (_, g) in grads.tensors_mut() {
            g.scale(inv);
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            for (_, g) in grads.tensors_mut() {
                g.scale(cfg.grad_clip / norm);
            }
        }
        let warm = ((steps + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        adam.update(&mut model.weights, &grads, cfg.lr * warm);
        steps += 1;
        running += batch_loss * inv;
        if steps % cfg.eval_every == 0 || steps == cfg.max_steps {
            val_accuracy = accuracy(&model, &codebook, eval_set)?;
            let span = if steps % cfg.eval_every == 0 { cfg.eval_every } else { steps % cfg.eval_every };
            history.push((steps, running / span as f64, val_accuracy));
            running = 0.0;
        }
    }
    if eval_set.len() < data.val.len() {
        val_accuracy = accuracy(&model, &codebook, &data.val)?;
    }
    Ok(ToyTrainReport {
        model,
        codebook,
        steps,
        reached_target: val_accuracy >= cfg.target_accuracy,
        val_accuracy,
        history,
    })
}

/// Scale of the modality flag written into the position table.
const FLAG: f64 = 100.0;
/// Coupling of the flag coordinate in the query and key projections.
const FLAG_COUPLING: f64 = 16.0;

/// A random model in which, for every block after the first `onset`, text
/// queries put exactly zero attention on visual keys.
///
/// Hidden coordinate 0 carries a large modality flag (`+FLAG` on visual
/// positions, `-FLAG` on text positions). In the late blocks the first
/// coordinate of every head's query and key reads only that flag, so a text
/// query scores visual keys thousands of units below text keys and their
/// softmax weight underflows to exactly zero.
pub fn forced_mask_model(config: ModelConfig, onset: usize, seed: u64) -> Result<Model> {
    config.validate()?;
    if onset > config.num_layers {
        return Err(Error::invalid("onset beyond model depth"));
    }
    let mut model = Model::random(config, seed)?;
    let w = &mut model.weights;
    for p in 0..config.max_positions() {
        let row = w.pos_embed.row_mut(p);
        row.iter_mut().for_each(|v| *v *= 0.1);
        row[0] = if p < config.num_visual { FLAG } else { -FLAG };
    }
    for r in 0..config.vocab_size {
        w.token_embed.set(r, 0, 0.0);
    }
    let dh = config.head_dim();
    for lw in w.layers.iter_mut().skip(onset) {
        for h in 0..config.num_heads {
            let col = h * dh;
            for r in 0..config.hidden_dim {
                let v = if r == 0 { FLAG_COUPLING } else { 0.0 };
                lw.wq.set(r, col, v);
                lw.wk.set(r, col, v);
            }
        }
        // Keep the flag coordinate out of the residual updates.
        for r in 0..config.hidden_dim {
            lw.wo.set(r, 0, 0.0);
        }
        for r in 0..config.ffn_dim {
            lw.w_down.set(r, 0, 0.0);
        }
    }
    Ok(model)
}
