//! Straight-line reference forward passes used to cross-check the staged
//! engine. Written with plain nested loops over `Vec<Vec<f64>>` and without
//! calling into [`crate::tensor`] so that a kernel bug cannot hide in both.

use super::{Inputs, Model};

fn norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mut mean = 0.0;
    for x in v {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for x in v {
        var += (x - mean) * (x - mean);
    }
    var /= n;
    let denom = (var + 1e-5).sqrt();
    (0..v.len()).map(|i| (v[i] - mean) / denom * gain[i] + bias[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn vec_mat(v: &[f64], m: &crate::tensor::Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, x) in v.iter().enumerate() {
            *o += x * m.data()[i * m.cols() + j];
        }
    }
    out
}

/// Last-position logits of the joint forward.
///
/// With `exit_after = Some(l)`, every block after the first `l` masks visual
/// keys out of the text queries' scores before the softmax and leaves the
/// visual rows untouched, which is the semantic target of removing the
/// visual tokens at `l`.
pub fn forward_logits(model: &Model, inputs: &Inputs, exit_after: Option<usize>) -> Vec<f64> {
    let last = hidden_states(model, inputs, exit_after).pop().expect("non-empty prompt");
    let w = &model.weights;
    let normed = norm(&last, w.final_gain.data(), w.final_bias.data());
    vec_mat(&normed, &w.lm_head)
}

/// Final hidden state of every position (before the output norm).
pub fn hidden_states(model: &Model, inputs: &Inputs, exit_after: Option<usize>) -> Vec<Vec<f64>> {
    let c = &model.config;
    let w = &model.weights;
    let d = c.hidden_dim;
    let n_v = inputs.visual.rows();
    let n = n_v + inputs.text.len();
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = if i < n_v {
            inputs.visual.row(i).to_vec()
        } else {
            w.token_embed.row(inputs.text[i - n_v]).to_vec()
        };
        x.push((0..d).map(|j| base[j] + w.pos_embed.get(i, j)).collect());
    }
    let heads = c.num_heads;
    let dh = d / heads;
    for (layer_idx, lw) in w.layers.iter().enumerate() {
        let masked = exit_after.is_some_and(|l| layer_idx >= l);
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| norm(r, lw.ln1_gain.data(), lw.ln1_bias.data()))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &lw.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &lw.wv)).collect();
        let mut next = x.clone();
        for i in 0..n {
            if masked && i < n_v {
                continue;
            }
            let mut mixed = vec![0.0; d];
            for hd in 0..heads {
                let lo = hd * dh;
                let mut scores = Vec::new();
                let mut keys = Vec::new();
                for (j, kj) in k.iter().enumerate().take(i + 1) {
                    if masked && j < n_v {
                        continue;
                    }
                    let mut s = 0.0;
                    for t in lo..lo + dh {
                        s += q[i][t] * kj[t];
                    }
                    scores.push(s / (dh as f64).sqrt());
                    keys.push(j);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (e, &j) in exps.iter().zip(&keys) {
                    for t in lo..lo + dh {
                        mixed[t] += e / total * v[j][t];
                    }
                }
            }
            let attn = vec_mat(&mixed, &lw.wo);
            let mut y: Vec<f64> = (0..d).map(|t| x[i][t] + attn[t]).collect();
            let h2 = norm(&y, lw.ln2_gain.data(), lw.ln2_bias.data());
            let up: Vec<f64> = vec_mat(&h2, &lw.w_up).into_iter().map(gelu).collect();
            let down = vec_mat(&up, &lw.w_down);
            for t in 0..d {
                y[t] += down[t];
            }
            next[i] = y;
        }
        x = next;
    }
    x
}
