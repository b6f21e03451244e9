//! `vtexit` command line: data generation, toy training, analysis, gate
//! training and evaluation. Every subcommand writes versioned CSV or JSON.
//!
//! Exit codes: 0 success, 2 contract violation, 3 I/O failure.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vtexit::attn_stats::{entropy_profile, mean_entropy, segment_stages, StageThresholds, StatsAccumulator};
use vtexit::baselines::{evaluate, exit_sweep, EvalReport, FixedExit, Method};
use vtexit::flops::FlopsSummary;
use vtexit::gate::{GateConfig, GateWeights, StatusSelector, DEFAULT_ATTN_FEATURE_DIM, DEFAULT_GATE_HIDDEN};
use vtexit::io::{
    load_dataset, load_gates, read_json, read_labels_csv, save_dataset, save_gates, weights_digest, write_compare_csv,
    write_entropy_csv, write_json, write_labels_csv, write_stats_csv, write_sweep_csv, write_train_log, ModelCheckpoint,
};
use vtexit::model::{generate, GenerateOptions, NoIntervention};
use vtexit::synth::{accuracy, generate_dataset, train_toy_model, DataSpec, Dataset, SynthTask, TaskKind, ToyTrainConfig};
use vtexit::training::{train_gates, train_gates_with, TrainConfig, TrainSample, WeakLabel, DEFAULT_ALPHA};
use vtexit::{Error, Matrix, Model, ModelConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "vtexit", version, about = "Dynamic visual-token exit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grid dataset.
    GenData {
        /// JSON data spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy multimodal model on a generated dataset.
    TrainModel {
        /// JSON with `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention block statistics and attention entropies per layer.
    Stats {
        #[command(flatten)]
        src: Source,
        /// Output paths: stats CSV then entropy CSV.
        #[arg(long, num_args = 2, value_names = ["STATS", "ENTROPY"])]
        out: Vec<PathBuf>,
        /// Also profile runs whose visual tokens exit after this many blocks.
        #[arg(long)]
        exit_layer: Option<usize>,
    },
    /// Accuracy and cost of fixed-layer exit.
    Sweep {
        #[command(flatten)]
        src: Source,
        /// Comma-separated exit layers; every layer 0..=L when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weak exit labels for every gated layer of every sample.
    Label {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-layer gates.
    TrainGate {
        #[command(flatten)]
        src: Source,
        /// Precomputed labels; computed on the fly when omitted.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "mean_text,last_text")]
        selector: String,
        #[arg(long, default_value_t = DEFAULT_ATTN_FEATURE_DIM)]
        attn_dim: usize,
        #[arg(long, default_value_t = DEFAULT_GATE_HIDDEN)]
        hidden: usize,
        #[arg(long)]
        bias: bool,
        #[arg(long, default_value_t = TrainConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        sample_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
        /// Ignored when `--labels` is given; the file's alpha is used.
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gated inference: accuracy, exit histogram and cost.
    Eval {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        gates: GateSource,
        /// Directory receiving eval.json, exit_hist.json and flops.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline, pruning, gates and gates with pruning side by side.
    Compare {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        gates: GateSource,
        #[arg(long)]
        prune_layer: usize,
        #[arg(long)]
        keep_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset split; `train` for label and train-gate, `test` otherwise.
    #[arg(long)]
    split: Option<String>,
    /// Use only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GateSource {
    #[arg(long, required_unless_present_any = ["force_exit", "no_fire"])]
    gates: Option<PathBuf>,
    /// Replace the gates by ones that fire exactly at this layer.
    #[arg(long, conflicts_with_all = ["gates", "no_fire"])]
    force_exit: Option<usize>,
    /// Replace the gates by ones that never fire.
    #[arg(long, conflicts_with = "gates")]
    no_fire: bool,
}

/// Contents of the `train-model --config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainModelConfig {
    schema_version: Option<u32>,
    model: Option<ModelConfig>,
    train: ToyTrainConfig,
}

struct Loaded {
    model: Model,
    codebook: Matrix,
    samples: Vec<SynthTask>,
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [SynthTask]> {
    Ok(match name {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => bail!(Error::Schema { field: "split".into(), message: format!("unknown split '{other}'") }),
    })
}

fn load(src: &Source, default_split: &str) -> Result<Loaded> {
    let ck = ModelCheckpoint::load(&src.ckpt).with_context(|| format!("loading {}", src.ckpt.display()))?;
    let data = load_dataset(&src.data).with_context(|| format!("loading {}", src.data.display()))?;
    let codebook = ck.codebook.ok_or_else(|| Error::Schema {
        field: "codebook".into(),
        message: "checkpoint carries no symbol table".into(),
    })?;
    if let Some(spec) = &ck.data_spec {
        if spec.grid_size != data.spec.grid_size || spec.num_symbols != data.spec.num_symbols {
            bail!(Error::Schema {
                field: "data_spec".into(),
                message: "dataset grid or symbol count differs from the checkpoint's".into(),
            });
        }
    }
    let mut samples = split(&data, src.split.as_deref().unwrap_or(default_split))?.to_vec();
    if let Some(n) = src.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        bail!(Error::Schema { field: "split".into(), message: "no samples selected".into() });
    }
    for s in &samples {
        s.inputs(&codebook).validate(&ck.model.config)?;
    }
    Ok(Loaded { model: ck.model, codebook, samples })
}

fn resolve_gates(g: &GateSource, model: &Model) -> Result<GateWeights> {
    let c = &model.config;
    let forced_cfg = || {
        let mut cfg = GateConfig::for_model(c, StatusSelector::default());
        cfg.first_layer = 0;
        cfg
    };
    if let Some(l) = g.force_exit {
        if l > c.num_layers {
            bail!(Error::Schema { field: "force_exit".into(), message: format!("layer {l} beyond depth {}", c.num_layers) });
        }
        return Ok(GateWeights::forced(c, forced_cfg(), (l < c.num_layers).then_some(l))?);
    }
    if g.no_fire {
        return Ok(GateWeights::forced(c, forced_cfg(), None)?);
    }
    let path = g.gates.as_ref().expect("clap requires a gate source");
    let gates = load_gates(path).with_context(|| format!("loading {}", path.display()))?;
    gates.validate(c)?;
    Ok(gates)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn gen_data(spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec: DataSpec = match spec {
        Some(p) => read_json(p)?,
        None => DataSpec::default(),
    };
    let data = generate_dataset(&spec, seed)?;
    save_dataset(out, &data)?;
    println!("{} train / {} val / {} test samples in {}", data.train.len(), data.val.len(), data.test.len(), out.display());
    Ok(())
}

fn train_model(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg: TrainModelConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainModelConfig::default(),
    };
    if let Some(v) = cfg.schema_version.filter(|&v| v != SCHEMA_VERSION) {
        bail!(Error::Schema { field: "schema_version".into(), message: format!("expected {SCHEMA_VERSION}, found {v}") });
    }
    let data = load_dataset(data_dir)?;
    let report = train_toy_model(cfg.model.unwrap_or_default(), &data, &cfg.train)?;
    report.check(&cfg.train)?;
    let val = accuracy(&report.model, &report.codebook, &data.val)?;
    let notes = serde_json::json!({
        "train": cfg.train,
        "steps": report.steps,
        "val_accuracy": val,
        "data_seed": data.seed,
    });
    ensure_parent(out)?;
    let ck = ModelCheckpoint { model: report.model, codebook: Some(report.codebook), data_spec: Some(data.spec), notes };
    ck.save(out)?;
    println!("{} steps, val accuracy {val:.4}, weights sha256 {}", report.steps, weights_digest(&ck.model));
    Ok(())
}

fn stats(src: &Source, out: &[PathBuf], exit_layer: Option<usize>) -> Result<()> {
    let l = load(src, "test")?;
    let depth = l.model.config.num_layers;
    if let Some(e) = exit_layer.filter(|&e| e > depth) {
        bail!(Error::Schema { field: "exit_layer".into(), message: format!("{e} beyond depth {depth}") });
    }
    let traced = GenerateOptions { keep_trace: true, ..GenerateOptions::default() };
    let mut acc = StatsAccumulator::new();
    let (mut plain, mut exited) = (Vec::new(), Vec::new());
    for s in &l.samples {
        let inputs = s.inputs(&l.codebook);
        let g = generate(&l.model, &inputs, &mut NoIntervention, traced)?;
        let trace = g.trace.expect("trace requested");
        acc.add_trace(&trace)?;
        plain.push(entropy_profile(&trace)?);
        if let Some(layer) = exit_layer {
            let g = generate(&l.model, &inputs, &mut FixedExit { layer }, traced)?;
            exited.push(entropy_profile(&g.trace.expect("trace requested"))?);
        }
    }
    let block_stats = acc.finish();
    let mut rows: Vec<_> = mean_entropy(&plain).into_iter().map(|p| (p, false)).collect();
    if let Some(e) = exit_layer {
        rows.extend(mean_entropy(&exited).into_iter().filter(|p| p.layer >= e).map(|p| (p, true)));
    }
    for p in out {
        ensure_parent(p)?;
    }
    write_stats_csv(&out[0], &block_stats)?;
    write_entropy_csv(&out[1], &rows)?;
    let seg = segment_stages(&block_stats, StageThresholds::default())?;
    println!(
        "{} samples; stage boundaries after layers {} and {}{}",
        l.samples.len(),
        seg.boundary_1,
        seg.boundary_2,
        if seg.degenerate { " (no rebound)" } else { "" }
    );
    Ok(())
}

fn sweep(src: &Source, layers: &[usize], out: &Path) -> Result<()> {
    let l = load(src, "test")?;
    let depth = l.model.config.num_layers;
    let layers: Vec<usize> = if layers.is_empty() { (0..=depth).collect() } else { layers.to_vec() };
    if let Some(bad) = layers.iter().find(|&&x| x > depth) {
        bail!(Error::Schema { field: "layers".into(), message: format!("{bad} beyond depth {depth}") });
    }
    let rows = exit_sweep(&l.model, &l.codebook, &l.samples, &layers)?;
    ensure_parent(out)?;
    write_sweep_csv(out, "exit", &rows)?;
    for r in &rows {
        println!("exit {:>2}: accuracy {:.4}, reduction {:.1}%", r.layer_or_ratio, r.accuracy, r.reduction_pct);
    }
    Ok(())
}

fn label(src: &Source, alpha: f64, out: &Path) -> Result<()> {
    let l = load(src, "train")?;
    let cfg = GateConfig::for_model(&l.model.config, StatusSelector::default());
    let opts = GenerateOptions::default();
    let mut labels = Vec::new();
    for s in &l.samples {
        let mut sample = TrainSample::prepare(&l.model, &cfg.selector, cfg.layers(), s.id, s.inputs(&l.codebook), opts)?;
        for layer in cfg.layers() {
            labels.push(sample.label(&l.model, layer, alpha, opts)?);
        }
    }
    ensure_parent(out)?;
    write_labels_csv(out, alpha, &labels)?;
    let ones = labels.iter().filter(|x| x.y).count();
    println!("{} labels, {ones} positive, alpha={alpha}", labels.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_gate(
    src: &Source,
    labels: Option<&Path>,
    selector: &str,
    attn_dim: usize,
    hidden: usize,
    bias: bool,
    mut cfg: TrainConfig,
    log: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let l = load(src, "train")?;
    let selector = StatusSelector::parse(selector, attn_dim)?;
    let mut gate_cfg = GateConfig::for_model(&l.model.config, selector.clone());
    gate_cfg.hidden = hidden;
    gate_cfg.bias = bias;
    let mut gates = GateWeights::init(&l.model.config, gate_cfg.clone(), cfg.seed)?;
    let opts = GenerateOptions::default();
    let mut samples = l
        .samples
        .iter()
        .map(|s| TrainSample::prepare(&l.model, &selector, gate_cfg.layers(), s.id, s.inputs(&l.codebook), opts))
        .collect::<vtexit::Result<Vec<_>>>()?;
    let entries = match labels {
        Some(path) => {
            let (alpha, rows) = read_labels_csv(path).with_context(|| format!("loading {}", path.display()))?;
            cfg.alpha = alpha;
            let table: HashMap<(usize, usize), WeakLabel> = rows.into_iter().map(|r| ((r.sample_id, r.layer), r)).collect();
            train_gates_with(&mut gates, &mut samples, &cfg, &mut |s, layer| {
                table.get(&(s.sample_id, layer)).copied().ok_or_else(|| Error::Schema {
                    field: "labels".into(),
                    message: format!("no label for sample {} at layer {layer}", s.sample_id),
                })
            })?
        }
        None => train_gates(&l.model, &mut gates, &mut samples, &cfg)?,
    };
    ensure_parent(out)?;
    save_gates(out, &gates)?;
    if let Some(p) = log {
        ensure_parent(p)?;
        write_train_log(p, &entries)?;
    }
    let mean_loss = entries.iter().map(|e| e.loss).sum::<f64>() / entries.len().max(1) as f64;
    println!("{} steps, mean loss {mean_loss:.4}, selector {selector}", entries.len());
    Ok(())
}

#[derive(Serialize)]
struct TaskSummary {
    samples: usize,
    accuracy: f64,
    mean_exit_layer: Option<f64>,
    reduction_pct: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    schema_version: u32,
    method: String,
    samples: usize,
    accuracy: f64,
    mean_exit_layer: Option<f64>,
    flops: FlopsSummary,
    tasks: BTreeMap<String, TaskSummary>,
}

#[derive(Serialize)]
struct ExitHistogram {
    schema_version: u32,
    depth: usize,
    counts: BTreeMap<String, usize>,
    tasks: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Serialize)]
struct FlopsFile {
    schema_version: u32,
    total: FlopsSummary,
    tasks: BTreeMap<String, FlopsSummary>,
}

fn per_task(report: &EvalReport, depth: usize) -> Vec<(String, EvalReport)> {
    [TaskKind::Lookup, TaskKind::TwoHop]
        .into_iter()
        .map(|t| (t.name().to_string(), report.for_task(t, depth)))
        .filter(|(_, r)| !r.samples.is_empty())
        .collect()
}

fn eval(src: &Source, gs: &GateSource, out: &Path) -> Result<()> {
    let l = load(src, "test")?;
    let gates = resolve_gates(gs, &l.model)?;
    let depth = l.model.config.num_layers;
    let mut report = evaluate(&l.model, &l.codebook, &l.samples, Method::Dyvte(&gates))?;
    if let Some(e) = gs.force_exit {
        report.method = format!("exit@{e}");
    } else if gs.no_fire {
        report.method = "baseline".into();
    }
    let tasks = per_task(&report, depth);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let summary = EvalSummary {
        schema_version: SCHEMA_VERSION,
        method: report.method.clone(),
        samples: report.samples.len(),
        accuracy: report.accuracy,
        mean_exit_layer: report.mean_exit_layer,
        flops: report.flops.clone(),
        tasks: tasks
            .iter()
            .map(|(k, r)| {
                let s = TaskSummary {
                    samples: r.samples.len(),
                    accuracy: r.accuracy,
                    mean_exit_layer: r.mean_exit_layer,
                    reduction_pct: r.flops.reduction_pct,
                };
                (k.clone(), s)
            })
            .collect(),
    };
    write_json(&out.join("eval.json"), &summary)?;
    let hist = ExitHistogram {
        schema_version: SCHEMA_VERSION,
        depth,
        counts: report.exit_histogram.clone(),
        tasks: tasks.iter().map(|(k, r)| (k.clone(), r.exit_histogram.clone())).collect(),
    };
    write_json(&out.join("exit_hist.json"), &hist)?;
    let flops = FlopsFile {
        schema_version: SCHEMA_VERSION,
        total: report.flops.clone(),
        tasks: tasks.iter().map(|(k, r)| (k.clone(), r.flops.clone())).collect(),
    };
    write_json(&out.join("flops.json"), &flops)?;
    println!(
        "{}: accuracy {:.4}, mean exit {:.2}, prefill reduction {:.1}%",
        report.method,
        report.accuracy,
        report.mean_exit_layer.unwrap_or(depth as f64),
        report.flops.reduction_pct
    );
    for (k, r) in &tasks {
        println!(
            "  {k}: accuracy {:.4}, mean exit {:.2}, reduction {:.1}%",
            r.accuracy,
            r.mean_exit_layer.unwrap_or(depth as f64),
            r.flops.reduction_pct
        );
    }
    Ok(())
}

fn compare(src: &Source, gs: &GateSource, prune_layer: usize, keep_ratio: f64, out: &Path) -> Result<()> {
    let l = load(src, "test")?;
    let gates = resolve_gates(gs, &l.model)?;
    let methods = [
        Method::Baseline,
        Method::Prune { layer: prune_layer, keep_ratio },
        Method::Dyvte(&gates),
        Method::Combined { gates: &gates, layer: prune_layer, keep_ratio },
    ];
    let reports = methods
        .into_iter()
        .map(|m| evaluate(&l.model, &l.codebook, &l.samples, m))
        .collect::<vtexit::Result<Vec<_>>>()?;
    ensure_parent(out)?;
    write_compare_csv(out, &reports)?;
    for r in &reports {
        println!("{:<28} accuracy {:.4}, reduction {:.1}%", r.method, r.accuracy, r.flops.reduction_pct);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec.as_deref(), seed, &out),
        Command::TrainModel { config, data, out } => train_model(config.as_deref(), &data, &out),
        Command::Stats { src, out, exit_layer } => stats(&src, &out, exit_layer),
        Command::Sweep { src, layers, out } => sweep(&src, &layers, &out),
        Command::Label { src, alpha, out } => label(&src, alpha, &out),
        Command::TrainGate {
            src,
            labels,
            selector,
            attn_dim,
            hidden,
            bias,
            lr,
            epochs,
            sample_fraction,
            momentum,
            alpha,
            seed,
            log,
            out,
        } => {
            let cfg = TrainConfig { alpha, lr, epochs, sample_fraction, momentum, seed };
            train_gate(&src, labels.as_deref(), &selector, attn_dim, hidden, bias, cfg, log.as_deref(), &out)
        }
        Command::Eval { src, gates, out } => eval(&src, &gates, &out),
        Command::Compare { src, gates, prune_layer, keep_ratio, out } => compare(&src, &gates, prune_layer, keep_ratio, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_io() { 3 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
