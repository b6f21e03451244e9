//! Acceptance run: one PASS/FAIL line per property, non-zero exit if any fails.
//!
//! Run with `cargo test -p vtexit --test acceptance`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use vtexit::baselines::{attn_rank_prune, evaluate, manual_exit, run_method, EvalReport, FixedExit, Method};
use vtexit::flops::{instrumented_prefill_flops, layer_flops, total_flops};
use vtexit::gate::{run_with_dyvte, GateConfig, GateWeights, LayerGate, StatusPart, StatusSelector, DEFAULT_ATTN_FEATURE_DIM};
use vtexit::io::weights_digest;
use vtexit::model::reference;
use vtexit::model::{generate, GenerateOptions, Generation, NoIntervention};
use vtexit::synth::{accuracy, forced_mask_model, generate_dataset, train_toy_model, DataSpec, Dataset, TaskKind, ToyTrainConfig};
use vtexit::training::{gate_grad, generate_label, selector_ablation, train_gates, TrainConfig, TrainSample, DEFAULT_ALPHA};
use vtexit::{Inputs, Matrix, Model, ModelConfig, SeededRng};

const DATA_SEED: u64 = 7;
const TOY_TRAIN_SEED: u64 = 1234;
const GATE_SEED: u64 = 3;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
/// SHA-256 of the toy weights produced by the pinned seeds on x86-64.
const TOY_WEIGHTS_SHA256: &str = "10e6b52d187696250dec5660e3b3ca6f69e82ef66f7d395a6a792ff2e927908b";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

type Field = fn(&mut LayerGate) -> &mut Matrix;
type Check = fn() -> Outcome;

fn random_config(rng: &mut SeededRng, max_layers: usize, max_dim: usize) -> ModelConfig {
    let heads = [1, 2, 4][rng.below(3)];
    let head_dim = [2, 4, 8][rng.below(3)];
    let hidden_dim = (heads * head_dim).min(max_dim);
    ModelConfig {
        num_layers: 2 + rng.below(max_layers - 1),
        hidden_dim,
        num_heads: if hidden_dim % heads == 0 { heads } else { 1 },
        ffn_dim: hidden_dim * (1 + rng.below(4)),
        vocab_size: 5 + rng.below(16),
        num_visual: 1 + rng.below(10),
        max_text: 6,
    }
}

fn random_inputs(rng: &mut SeededRng, c: &ModelConfig, with_visual: bool) -> Inputs {
    let n_v = if with_visual { c.num_visual } else { 0 };
    let visual = Matrix::from_vec(n_v, c.hidden_dim, (0..n_v * c.hidden_dim).map(|_| rng.normal()).collect()).unwrap();
    let t = 1 + rng.below(c.max_text);
    Inputs::new(visual, (0..t).map(|_| rng.below(c.vocab_size)).collect())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn exit_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    for probe in 0..50 {
        let c = random_config(&mut rng, 6, 32);
        let model = Model::random(c, 1000 + probe).unwrap();
        let inputs = random_inputs(&mut rng, &c, probe % 10 != 9);
        let l = rng.below(c.num_layers + 1);
        let mut state = model.begin(&inputs, false).unwrap();
        for k in 0..c.num_layers {
            if k == l {
                state.execute_exit().unwrap();
            }
            state.step().unwrap();
        }
        let text_rows: Vec<Vec<f64>> = (0..state.n_text()).map(|i| state.text_row(i).to_vec()).collect();
        let logits = model.prefill_with_exit(&inputs, l).unwrap().logits;
        let want_hidden = reference::hidden_states(&model, &inputs, Some(l));
        let want_text = &want_hidden[inputs.visual.rows()..];
        let want_logits = reference::forward_logits(&model, &inputs, Some(l));
        worst = worst.max(max_diff(&logits, &want_logits));
        for (a, b) in text_rows.iter().zip(want_text) {
            worst = worst.max(max_diff(a, b));
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-9 && within(t, 60), format!("50 probes, max |Δ| {worst:.2e} (tol 1e-9), {:.1}s", t.as_secs_f64()))
}

fn forced_mask() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let (mut worst, mut labels, mut ones): (f64, usize, usize) = (0.0, 0, 0);
    for m in 0..20 {
        let mut c = random_config(&mut rng, 6, 32);
        c.hidden_dim = c.hidden_dim.max(8);
        c.num_heads = 2;
        c.ffn_dim = 2 * c.hidden_dim;
        let onset = rng.below(c.num_layers + 1);
        let model = forced_mask_model(c, onset, 300 + m).unwrap();
        for _ in 0..3 {
            let inputs = random_inputs(&mut rng, &c, true);
            let base = model.prefill(&inputs).unwrap().logits;
            for l in onset..=c.num_layers {
                let exited = model.prefill_with_exit(&inputs, l).unwrap().logits;
                worst = worst.max(max_diff(&base, &exited));
                let label = generate_label(&model, &inputs, 0, l, DEFAULT_ALPHA, GenerateOptions::default()).unwrap();
                labels += 1;
                ones += usize::from(label.y);
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && ones == labels && within(t, 60),
        format!("max |Δ| {worst:.2e} (tol 1e-9), y=1 on {ones}/{labels} labels at or after onset, {:.1}s", t.as_secs_f64()),
    )
}

/// Two-class cross-entropy of the gate written out directly from its weights.
fn oracle_gate_loss(g: &LayerGate, x: &[f64], y: bool) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let h = g.w1.cols();
    let mut act = vec![0.0; h];
    for (j, a) in act.iter_mut().enumerate() {
        let mut s = g.b1.as_ref().map_or(0.0, |b| b.data()[j]);
        for (i, xi) in x.iter().enumerate() {
            s += xi * g.w1.data()[i * h + j];
        }
        *a = 0.5 * s * (1.0 + (c * (s + 0.044715 * s * s * s)).tanh());
    }
    let mut z = [0.0; 2];
    for (k, zk) in z.iter_mut().enumerate() {
        *zk = g.b2.as_ref().map_or(0.0, |b| b.data()[k]);
        for (j, a) in act.iter().enumerate() {
            *zk += a * g.w2.data()[j * 2 + k];
        }
    }
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[usize::from(y)]
}

fn gate_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(303);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for probe in 0..100 {
        let (f, h) = (1 + rng.below(12), 1 + rng.below(12));
        let bias = probe % 2 == 1;
        let mut gate = LayerGate::zeros(1, f, h, bias);
        for m in [Some(&mut gate.w1), Some(&mut gate.w2), gate.b1.as_mut(), gate.b2.as_mut()].into_iter().flatten() {
            m.data_mut().iter_mut().for_each(|w| *w = rng.normal() / (f as f64).sqrt());
        }
        let x: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
        let y = rng.below(2) == 1;
        let (_, grad) = gate_grad(&gate, &x, y).unwrap();
        let pairs: Vec<(&Matrix, Field)> = {
            let mut v: Vec<(&Matrix, Field)> =
                vec![(&grad.w1, |g| &mut g.w1), (&grad.w2, |g| &mut g.w2)];
            if bias {
                v.push((grad.b1.as_ref().unwrap(), |g| g.b1.as_mut().unwrap()));
                v.push((grad.b2.as_ref().unwrap(), |g| g.b2.as_mut().unwrap()));
            }
            v
        };
        for (analytic, get) in pairs {
            for k in 0..analytic.data().len() {
                let mut plus = gate.clone();
                get(&mut plus).data_mut()[k] += 1e-6;
                let mut minus = gate.clone();
                get(&mut minus).data_mut()[k] -= 1e-6;
                let fd = (oracle_gate_loss(&plus, &x, y) - oracle_gate_loss(&minus, &x, y)) / 2e-6;
                let a = analytic.data()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-5));
                entries += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && within(t, 60),
        format!("100 probes, {entries} entries, max relative error {worst:.2e} (tol 1e-4), {:.1}s", t.as_secs_f64()),
    )
}

fn flops_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut runs = 0;
    let mut rng = SeededRng::new(404);
    for layers in 2..=4 {
        for (heads, d) in [(1, 2), (1, 4), (2, 8), (4, 16), (2, 24), (4, 32)] {
            for n_v in [0, 1, 7, 16, 40] {
                for t in [1, 3, 8] {
                    if n_v + t > 48 {
                        continue;
                    }
                    let c = ModelConfig {
                        num_layers: layers,
                        hidden_dim: d,
                        num_heads: heads,
                        ffn_dim: d * (1 + rng.below(4)),
                        vocab_size: 9,
                        num_visual: n_v.max(1),
                        max_text: 8,
                    };
                    let model = Model::random(c, runs as u64).unwrap();
                    let mut inputs = random_inputs(&mut rng, &c, n_v > 0);
                    inputs.text = (0..t).map(|i| i % 9).collect();
                    for l in 0..=layers {
                        let counted = instrumented_prefill_flops(&model, &inputs, &mut FixedExit { layer: l }).unwrap();
                        let exit_l = if n_v == 0 { c.num_layers } else { l };
                        let want: Vec<u64> =
                            (1..=layers).map(|k| layer_flops(&c, if k <= exit_l { n_v + t } else { t })).collect();
                        // The analytic report needs a visual block; text-only runs check the per-layer formula alone.
                        let analytic_ok = n_v == 0 || total_flops(&c, Some(l), t).unwrap().per_layer == want;
                        runs += 1;
                        if counted != want || !analytic_ok {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let mut monotone_fail = 0;
    for _ in 0..1000 {
        let heads = 1 + rng.below(64);
        let c = ModelConfig {
            num_layers: 2 + rng.below(79),
            hidden_dim: heads * (1 + rng.below(128)),
            num_heads: heads,
            ffn_dim: 1 + rng.below(20000),
            vocab_size: 2,
            num_visual: 1 + rng.below(3000),
            max_text: 512,
        };
        let t = 1 + rng.below(512);
        let mut prev = None;
        for l in 0..=c.num_layers {
            let r = total_flops(&c, Some(l), t).unwrap();
            let ok = r.total_with_exit <= r.total_baseline && prev.is_none_or(|p| r.total_with_exit > p);
            if !ok {
                monotone_fail += 1;
                break;
            }
            prev = Some(r.total_with_exit);
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && monotone_fail == 0 && within(t, 120),
        format!(
            "{runs} instrumented runs, {mismatches} mismatches; 1000 random configs, {monotone_fail} non-monotone; {:.1}s",
            t.as_secs_f64()
        ),
    )
}

struct Toy {
    data: Dataset,
    model: Model,
    codebook: Matrix,
    val_accuracy: f64,
    train_time: Duration,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let start = Instant::now();
        let data = generate_dataset(&DataSpec::default(), DATA_SEED).unwrap();
        let base = ModelConfig { hidden_dim: 32, ffn_dim: 128, ..ModelConfig::default() };
        let cfg = ToyTrainConfig {
            max_steps: 4000,
            lr: 3e-3,
            target_accuracy: 0.99,
            eval_samples: 200,
            seed: TOY_TRAIN_SEED,
            ..ToyTrainConfig::default()
        };
        let report = train_toy_model(base, &data, &cfg).unwrap();
        let val_accuracy = accuracy(&report.model, &report.codebook, &data.val).unwrap();
        Toy { data, model: report.model, codebook: report.codebook, val_accuracy, train_time: start.elapsed() }
    })
}

struct TrainedGates {
    gates: GateWeights,
    train_time: Duration,
}

/// Default-selector gates fitted to the toy model with the desk recipe.
fn trained_gates() -> &'static TrainedGates {
    static GATES: OnceLock<TrainedGates> = OnceLock::new();
    GATES.get_or_init(|| {
        let start = Instant::now();
        let toy = toy();
        let (model, cb) = (&toy.model, &toy.codebook);
        let selector = StatusSelector::default();
        let gate_cfg = GateConfig::for_model(&model.config, selector.clone());
        let mut gates = GateWeights::init(&model.config, gate_cfg.clone(), GATE_SEED).unwrap();
        let mut samples: Vec<TrainSample> = toy
            .data
            .train
            .iter()
            .map(|s| TrainSample::prepare(model, &selector, gate_cfg.layers(), s.id, s.inputs(cb), GenerateOptions::default()).unwrap())
            .collect();
        let cfg = TrainConfig { alpha: DEFAULT_ALPHA, seed: GATE_SEED, ..TrainConfig::default() };
        train_gates(model, &mut gates, &mut samples, &cfg).unwrap();
        TrainedGates { gates, train_time: start.elapsed() }
    })
}

fn end_to_end() -> Outcome {
    let toy = toy();
    let trained = trained_gates();
    let start = Instant::now();
    let (model, cb, gates) = (&toy.model, &toy.codebook, &trained.gates);
    let base = evaluate(model, cb, &toy.data.test, Method::Baseline).unwrap();
    let dyvte = evaluate(model, cb, &toy.data.test, Method::Dyvte(gates)).unwrap();
    let depth = model.config.num_layers;
    let (bl, dl) = (base.for_task(TaskKind::Lookup, depth), dyvte.for_task(TaskKind::Lookup, depth));
    let dt = dyvte.for_task(TaskKind::TwoHop, depth);
    let drop = 100.0 * (bl.accuracy - dl.accuracy);
    let exit_lookup = dl.mean_exit_layer.unwrap();
    let exit_two_hop = dt.mean_exit_layer.unwrap();
    let t = start.elapsed() + toy.train_time + trained.train_time;
    let pass = toy.val_accuracy >= 0.95
        && drop <= 1.0
        && dl.flops.reduction_pct >= 30.0
        && exit_two_hop > exit_lookup
        && within(t, 600);
    outcome(
        pass,
        format!(
            "val acc {:.3} (≥0.95); lookup drop {drop:.2} pt (≤1.0), reduction {:.1}% (≥30); mean exit lookup {exit_lookup:.2} < two-hop {exit_two_hop:.2}; {:.1}s",
            toy.val_accuracy,
            dl.flops.reduction_pct,
            t.as_secs_f64()
        ),
    )
}

fn family_mean(rows: &[(String, f64, f64)], names: &[String], pick: impl Fn(&(String, f64, f64)) -> f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| names.contains(&r.0)).map(pick).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let toy = toy();
    let (model, cb) = (&toy.model, &toy.codebook);
    use StatusPart::*;
    let dim = DEFAULT_ATTN_FEATURE_DIM;
    let text = StatusSelector::subsets(&[MeanText, LastText], dim).unwrap();
    let visual = StatusSelector::subsets(&[MeanVisual, LastVisual], dim).unwrap();
    let attention = StatusSelector::subsets(&[VisualSelfAttn, CrossAttn, TextSelfAttn], dim).unwrap();
    let all: Vec<StatusSelector> = text.iter().chain(&visual).chain(&attention).cloned().collect();
    let base = evaluate(model, cb, &toy.data.test, Method::Baseline).unwrap().accuracy;
    let rows = selector_ablation(model, cb, &toy.data.train, &toy.data.test, &all, &TrainConfig::default(), &ABLATION_SEEDS).unwrap();
    // (selector, accuracy, mean exit layer) averaged over seeds.
    let per_selector: Vec<(String, f64, f64)> = all
        .iter()
        .map(|s| {
            let name = s.to_string();
            let runs: Vec<&EvalReport> = rows.iter().filter(|r| r.selector == name).map(|r| &r.report).collect();
            let n = runs.len() as f64;
            let acc = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let exit = runs.iter().map(|r| r.mean_exit_layer.unwrap()).sum::<f64>() / n;
            println!("    {name:<45} acc {acc:.3}  mean exit {exit:.2}");
            (name, acc, exit)
        })
        .collect();
    let names = |v: &[StatusSelector]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (tn, vn, an) = (names(&text), names(&visual), names(&attention));
    let exit_text = family_mean(&per_selector, &tn, |r| r.2);
    let exit_visual = family_mean(&per_selector, &vn, |r| r.2);
    let exit_attn = family_mean(&per_selector, &an, |r| r.2);
    let drop_attn = 100.0 * (base - family_mean(&per_selector, &an, |r| r.1));
    let drop_text = 100.0 * (base - family_mean(&per_selector, &tn, |r| r.1));
    let t = start.elapsed();
    let text_earlier = exit_text < exit_visual;
    let attn_degenerate = exit_attn < exit_text && drop_attn >= 5.0;
    outcome(
        text_earlier && attn_degenerate && within(t, 900),
        format!(
            "mean exit text {exit_text:.2} vs visual {exit_visual:.2} ({}); attention-only exit {exit_attn:.2}, drop {drop_attn:.1} pt vs text drop {drop_text:.1} pt ({}); {:.1}s",
            if text_earlier { "earlier" } else { "not earlier" },
            if attn_degenerate { "degenerate early" } else { "not an early large-loss exit" },
            t.as_secs_f64()
        ),
    )
}

fn same_generation(a: &Generation, b: &Generation) -> bool {
    a.tokens == b.tokens && a.logits == b.logits && a.exit_layer == b.exit_layer && a.live_counts == b.live_counts
}

fn baseline_consistency() -> Outcome {
    trained_gates();
    let start = Instant::now();
    let mut rng = SeededRng::new(707);
    let opts = GenerateOptions { max_new_tokens: 3, ..GenerateOptions::default() };
    let (mut exit_bad, mut prune_bad, mut random_combined_bad, mut checks) = (0, 0, 0, 0);
    for m in 0..20 {
        let mut c = random_config(&mut rng, 6, 32);
        c.num_layers = c.num_layers.max(2);
        let model = Model::random(c, 700 + m).unwrap();
        let mut gate_cfg = GateConfig::for_model(&c, StatusSelector::default());
        gate_cfg.first_layer = 0;
        let random_gates = GateWeights::init(&c, GateConfig::for_model(&c, StatusSelector::default()), m).unwrap();
        for _ in 0..3 {
            let inputs = random_inputs(&mut rng, &c, true);
            let baseline = generate(&model, &inputs, &mut NoIntervention, opts).unwrap();
            for l in 0..=c.num_layers {
                let manual = manual_exit(&model, &inputs, l, opts).unwrap();
                let fire_at = (l < c.num_layers).then_some(l);
                let forced = GateWeights::forced(&c, gate_cfg.clone(), fire_at).unwrap();
                let gated = run_with_dyvte(&model, &forced, &inputs, opts).unwrap();
                exit_bad += usize::from(!same_generation(&manual, &gated.generation));
                checks += 1;
            }
            for k in 0..c.num_layers {
                let pruned = attn_rank_prune(&model, &inputs, k, 1.0, opts).unwrap();
                prune_bad += usize::from(!same_generation(&pruned, &baseline));
                if k == 0 {
                    // Ranking needs the attention of at least one block.
                    continue;
                }
                let r = [0.25, 0.5, 0.75][rng.below(3)];
                let dy = run_method(&model, &inputs, Method::Dyvte(&random_gates), opts).unwrap();
                let both =
                    run_method(&model, &inputs, Method::Combined { gates: &random_gates, layer: k, keep_ratio: r }, opts).unwrap();
                random_combined_bad += usize::from(both.flops.total_with_exit > dy.flops.total_with_exit);
            }
        }
    }
    // Combined against gate-only cost for the trained gates on every toy test
    // sample and pruning layer.
    let toy = toy();
    let gates = &trained_gates().gates;
    let (model, cb) = (&toy.model, &toy.codebook);
    let (mut combined_bad, mut pairs, mut sum_dy, mut sum_both) = (0, 0, 0u128, 0u128);
    for (i, s) in toy.data.test.iter().enumerate() {
        let inputs = s.inputs(cb);
        let dy = run_method(model, &inputs, Method::Dyvte(gates), GenerateOptions::default()).unwrap();
        for k in 1..model.config.num_layers {
            let r = [0.25, 0.5, 0.75][(i + k) % 3];
            let both = run_method(model, &inputs, Method::Combined { gates, layer: k, keep_ratio: r }, GenerateOptions::default())
                .unwrap();
            combined_bad += usize::from(both.flops.total_with_exit > dy.flops.total_with_exit);
            sum_dy += dy.flops.total_with_exit as u128;
            sum_both += both.flops.total_with_exit as u128;
            pairs += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        exit_bad == 0 && prune_bad == 0 && combined_bad == 0 && within(t, 120),
        format!(
            "manual vs forced-gate mismatches {exit_bad}/{checks}; prune r=1 mismatches {prune_bad}; \
             trained-gate combined above gate-only on {combined_bad}/{pairs} samples, \
             mean cost ratio {:.3} (random-gate stress: {random_combined_bad}); {:.1}s",
            sum_both as f64 / sum_dy as f64,
            t.as_secs_f64()
        ),
    )
}

fn band_check() -> Outcome {
    let c = ModelConfig {
        num_layers: 32,
        hidden_dim: 4096,
        num_heads: 32,
        ffn_dim: 11008,
        vocab_size: 32000,
        num_visual: 576,
        max_text: 64,
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for l in 16..=20 {
        let r = total_flops(&c, Some(l), 64).unwrap().reduction_pct;
        let ok = (35.0..=60.0).contains(&r);
        pass &= ok;
        parts.push(format!("l={l}: {r:.2}%{}", if ok { "" } else { " (outside)" }));
    }
    outcome(pass, format!("band 35–60%: {}", parts.join(", ")))
}

fn toy_digest() -> Outcome {
    let digest = weights_digest(&toy().model);
    outcome(digest == TOY_WEIGHTS_SHA256, format!("weights sha256 {digest}"))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, Check); 9] = [
        ("exit equivalence", exit_equivalence),
        ("forced-mask construction", forced_mask),
        ("gate gradient check", gate_gradient_check),
        ("flops oracle", flops_oracle),
        ("end-to-end dyvte", end_to_end),
        ("selector ablation ordering", ablation),
        ("baseline consistency", baseline_consistency),
        ("reduction band check", band_check),
        ("toy weights digest", toy_digest),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        if !args.is_empty() && !args.iter().any(|a| name.contains(a.as_str())) {
            continue;
        }
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
