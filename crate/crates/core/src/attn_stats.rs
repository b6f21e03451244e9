//! Block statistics of prefill attention.
//!
//! With the `[visual | text]` layout every attention map splits into three
//! blocks: visual self-attention (visual queries, visual keys), cross
//! attention (text queries, visual keys) and text self-attention. Only
//! causal-valid cells, where the key position does not exceed the query
//! position, are counted. Layers are numbered from 0, so `layer = j` is the
//! `(j+1)`-th block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerRecord, LayerTrace};

/// Count, mean and variance of a set of attention weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    /// Population variance.
    pub var: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, o: &Running) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        self.mean += delta * o.n as f64 / n as f64;
        self.m2 += o.m2 + delta * delta * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    fn moments(&self) -> Option<Moments> {
        (self.n > 0).then(|| Moments {
            count: self.n,
            mean: self.mean,
            var: (self.m2 / self.n as f64).max(0.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlockStats {
    pub layer: usize,
    /// Absent when the layer saw no visual tokens.
    pub vis_self: Option<Moments>,
    pub cross: Option<Moments>,
    pub text_self: Option<Moments>,
}

impl AttentionBlockStats {
    pub fn cross_mean(&self) -> Option<f64> {
        self.cross.map(|m| m.mean)
    }
}

#[derive(Debug, Clone, Default)]
struct LayerAcc {
    vis_self: Running,
    cross: Running,
    text_self: Running,
}

/// Pools block statistics over many prefill traces.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    layers: Vec<LayerAcc>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_trace(&mut self, trace: &LayerTrace) -> Result<()> {
        if self.layers.len() < trace.layers.len() {
            self.layers.resize_with(trace.layers.len(), LayerAcc::default);
        }
        for (acc, rec) in self.layers.iter_mut().zip(&trace.layers) {
            let mut local = LayerAcc::default();
            for_each_cell(rec, |block, w| match block {
                Block::VisualSelf => local.vis_self.push(w),
                Block::Cross => local.cross.push(w),
                Block::TextSelf => local.text_self.push(w),
            })?;
            acc.vis_self.merge(&local.vis_self);
            acc.cross.merge(&local.cross);
            acc.text_self.merge(&local.text_self);
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<AttentionBlockStats> {
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, a)| AttentionBlockStats {
                layer,
                vis_self: a.vis_self.moments(),
                cross: a.cross.moments(),
                text_self: a.text_self.moments(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    VisualSelf,
    Cross,
    TextSelf,
}

fn check_record(rec: &LayerRecord) -> Result<()> {
    let n = rec.attention.rows();
    if rec.attention.cols() != n || rec.positions.len() != n || rec.n_visual > n {
        return Err(Error::shape("attention record is not square over its live tokens"));
    }
    Ok(())
}

fn for_each_cell(rec: &LayerRecord, mut f: impl FnMut(Block, f64)) -> Result<()> {
    check_record(rec)?;
    let n_v = rec.n_visual;
    for i in 0..rec.n_tokens() {
        let row = rec.attention.row(i);
        for (j, &w) in row.iter().enumerate() {
            if rec.positions[j] > rec.positions[i] {
                continue;
            }
            let block = match (i < n_v, j < n_v) {
                (true, true) => Block::VisualSelf,
                (false, true) => Block::Cross,
                (false, false) => Block::TextSelf,
                (true, false) => continue,
            };
            f(block, w);
        }
    }
    Ok(())
}

/// Mean and variance of each attention block, per layer of one trace.
pub fn block_stats(trace: &LayerTrace) -> Result<Vec<AttentionBlockStats>> {
    let mut acc = StatsAccumulator::new();
    acc.add_trace(trace)?;
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub layer: usize,
    /// Mean over text queries of the entropy of the text-to-visual weights
    /// renormalised over visual keys. Absent without visual tokens.
    pub cross_entropy_bits: Option<f64>,
    /// Same for the text-to-text weights over attendable text keys.
    pub text_self_entropy_bits: f64,
}

/// Mass below which a sub-distribution is treated as empty.
pub const EMPTY_MASS: f64 = 1e-12;

/// Shannon entropy in bits of `w` after renormalisation; zero when the total
/// mass is below [`EMPTY_MASS`].
pub fn renormalized_entropy_bits(w: &[f64]) -> f64 {
    let mass: f64 = w.iter().sum();
    if mass < EMPTY_MASS {
        return 0.0;
    }
    let h: f64 = w
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / mass;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn entropy_profile(trace: &LayerTrace) -> Result<Vec<EntropyProfile>> {
    let mut out = Vec::with_capacity(trace.layers.len());
    for (layer, rec) in trace.layers.iter().enumerate() {
        check_record(rec)?;
        let n_v = rec.n_visual;
        let n = rec.n_tokens();
        let mut cross = 0.0;
        let mut text = 0.0;
        for i in n_v..n {
            let row = rec.attention.row(i);
            let text_keys: Vec<f64> = (n_v..n)
                .filter(|&j| rec.positions[j] <= rec.positions[i])
                .map(|j| row[j])
                .collect();
            cross += renormalized_entropy_bits(&row[..n_v]);
            text += renormalized_entropy_bits(&text_keys);
        }
        let t = (n - n_v).max(1) as f64;
        out.push(EntropyProfile {
            layer,
            cross_entropy_bits: (n_v > 0).then_some(cross / t),
            text_self_entropy_bits: text / t,
        });
    }
    Ok(out)
}

/// Per-layer mean of several profiles. A layer's cross entropy is averaged
/// over the profiles in which it is present.
pub fn mean_entropy(profiles: &[Vec<EntropyProfile>]) -> Vec<EntropyProfile> {
    let depth = profiles.iter().map(Vec::len).max().unwrap_or(0);
    (0..depth)
        .map(|layer| {
            let (mut c, mut nc, mut t, mut nt) = (0.0, 0usize, 0.0, 0usize);
            for p in profiles.iter().filter_map(|p| p.get(layer)) {
                if let Some(x) = p.cross_entropy_bits {
                    c += x;
                    nc += 1;
                }
                t += p.text_self_entropy_bits;
                nt += 1;
            }
            EntropyProfile {
                layer,
                cross_entropy_bits: (nc > 0).then(|| c / nc as f64),
                text_self_entropy_bits: if nt > 0 { t / nt as f64 } else { 0.0 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageThresholds {
    /// Stage 1 ends where cross attention drops below this fraction of its
    /// running maximum.
    pub theta1: f64,
    /// Stage 2 ends where cross attention rises above this multiple of its
    /// minimum since the first boundary.
    pub theta2: f64,
}

impl Default for StageThresholds {
    fn default() -> Self {
        Self { theta1: 0.5, theta2: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSegmentation {
    pub boundary_1: usize,
    pub boundary_2: usize,
    /// Set when either boundary was not detected and a default was used.
    pub degenerate: bool,
}

/// Splits a per-layer cross-attention profile into three stages.
pub fn segment_profile(cross_mean: &[f64], th: StageThresholds) -> Result<StageSegmentation> {
    let l = cross_mean.len();
    if l < 4 {
        return Err(Error::invalid(format!("stage segmentation needs at least 4 layers, got {l}")));
    }
    if cross_mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("cross-attention profile must be finite"));
    }
    let mut running_max = f64::NEG_INFINITY;
    let mut b1 = None;
    for (i, &x) in cross_mean.iter().enumerate() {
        running_max = running_max.max(x);
        if i > 0 && x < th.theta1 * running_max {
            b1 = Some(i);
            break;
        }
    }
    let Some(b1) = b1 else {
        return Ok(StageSegmentation {
            boundary_1: 1,
            boundary_2: l - 1,
            degenerate: true,
        });
    };
    let b1 = b1.min(l - 2);
    let mut stage_min = f64::INFINITY;
    for i in b1 + 1..l {
        stage_min = stage_min.min(cross_mean[i - 1]);
        if cross_mean[i] > th.theta2 * stage_min {
            return Ok(StageSegmentation {
                boundary_1: b1,
                boundary_2: i,
                degenerate: false,
            });
        }
    }
    Ok(StageSegmentation {
        boundary_1: b1,
        boundary_2: l - 1,
        degenerate: true,
    })
}

pub fn segment_stages(stats: &[AttentionBlockStats], th: StageThresholds) -> Result<StageSegmentation> {
    let profile: Option<Vec<f64>> = stats.iter().map(AttentionBlockStats::cross_mean).collect();
    let profile = profile.ok_or_else(|| Error::invalid("cross attention absent in some layer"))?;
    segment_profile(&profile, th)
}
