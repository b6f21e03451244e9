//! Reverse-mode gradients of the next-token loss at the last text position.
//! Used only to train the desk-scale model; inference goes through
//! [`super::ForwardState`].

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, log_sum_exp, softmax, Matrix, LAYER_NORM_EPS};

use super::{Inputs, LayerWeights, Model, Weights};

struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn norm_forward(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for (c, &v) in row.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat.set(r, c, xh);
            out.set(r, c, xh * gain.data()[c] + bias.data()[c]);
        }
    }
    (out, NormCache { xhat, inv_std })
}

fn norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            let g = dyr[c] * gain.data()[c];
            mean_dxhat += g;
            mean_dxhat_xhat += g * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            let g = dyr[c] * gain.data()[c];
            out[c] = inv * (g - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

struct BlockCache {
    norm1: NormCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    mixed: Matrix,
    norm2: NormCache,
    h2: Matrix,
    up_pre: Matrix,
    up_act: Matrix,
}

/// Activations of one training forward, kept for the backward pass.
pub struct TrainingForward {
    n_visual: usize,
    text: Vec<usize>,
    exit_after: Option<usize>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_normed: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TrainingForward {
    /// Forward over `[visual | text]`; with `exit_after = Some(l)` the visual
    /// rows are dropped after `l` blocks.
    pub fn run(model: &Model, inputs: &Inputs, exit_after: Option<usize>) -> Result<Self> {
        let c = &model.config;
        let w = &model.weights;
        inputs.validate(c)?;
        let n_v = inputs.visual.rows();
        let n = n_v + inputs.text.len();
        let d = c.hidden_dim;
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let src = if i < n_v {
                inputs.visual.row(i)
            } else {
                w.token_embed.row(inputs.text[i - n_v])
            };
            for ((o, s), p) in x.row_mut(i).iter_mut().zip(src).zip(w.pos_embed.row(i)) {
                *o = s + p;
            }
        }
        let mut positions: Vec<usize> = (0..n).collect();
        let mut blocks = Vec::with_capacity(c.num_layers);
        let heads = c.num_heads;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (j, lw) in w.layers.iter().enumerate() {
            if exit_after == Some(j) && n_v > 0 {
                x = x.slice_rows(n_v, n);
                positions = (n_v..n).collect();
            }
            let rows = x.rows();
            let (h1, norm1) = norm_forward(&x, &lw.ln1_gain, &lw.ln1_bias);
            let q = h1.matmul(&lw.wq)?;
            let k = h1.matmul(&lw.wk)?;
            let v = h1.matmul(&lw.wv)?;
            let mut mixed = Matrix::zeros(rows, d);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = q.slice_cols(h * dh, (h + 1) * dh);
                let kh = k.slice_cols(h * dh, (h + 1) * dh);
                let vh = v.slice_cols(h * dh, (h + 1) * dh);
                let mut s = qh.matmul_transb(&kh)?;
                for i in 0..rows {
                    let row = s.row_mut(i);
                    for (jj, val) in row.iter_mut().enumerate() {
                        *val = if positions[jj] <= positions[i] {
                            *val * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    crate::tensor::softmax_in_place(row);
                }
                mixed.set_cols(h * dh, &s.matmul(&vh)?);
                probs.push(s);
            }
            x.add_assign(&mixed.matmul(&lw.wo)?)?;
            let (h2, norm2) = norm_forward(&x, &lw.ln2_gain, &lw.ln2_bias);
            let up_pre = h2.matmul(&lw.w_up)?;
            let up_act = up_pre.map(gelu);
            x.add_assign(&up_act.matmul(&lw.w_down)?)?;
            blocks.push(BlockCache {
                norm1,
                h1,
                q,
                k,
                v,
                probs,
                mixed,
                norm2,
                h2,
                up_pre,
                up_act,
            });
        }
        let last = x.slice_rows(x.rows() - 1, x.rows());
        let (normed, final_norm) = norm_forward(&last, &w.final_gain, &w.final_bias);
        let logits = normed.matmul(&w.lm_head)?.into_data();
        Ok(Self {
            n_visual: n_v,
            text: inputs.text.clone(),
            exit_after,
            blocks,
            final_norm,
            final_normed: normed.into_data(),
            logits,
        })
    }

    /// Cross-entropy of `target` at the last position.
    pub fn loss(&self, target: usize) -> f64 {
        log_sum_exp(&self.logits) - self.logits[target]
    }

    /// Accumulates `d loss(target) / d weights` into `grads`.
    pub fn backward(&self, model: &Model, target: usize, grads: &mut Weights) -> Result<()> {
        let c = &model.config;
        let w = &model.weights;
        let d = c.hidden_dim;
        let mut dlogits = softmax(&self.logits);
        dlogits[target] -= 1.0;
        let dlogits = Matrix::row_vector(&dlogits);
        let normed = Matrix::row_vector(&self.final_normed);
        grads.lm_head.add_assign(&normed.matmul_transa(&dlogits)?)?;
        let dnormed = dlogits.matmul_transb(&w.lm_head)?;
        let dlast = norm_backward(
            &dnormed,
            &self.final_norm,
            &w.final_gain,
            &mut grads.final_gain,
            &mut grads.final_bias,
        );
        let n_total = self.n_visual + self.text.len();
        let final_rows = self.blocks.last().map_or(n_total, |b| b.h1.rows());
        let mut dx = Matrix::zeros(final_rows, d);
        dx.row_mut(final_rows - 1).copy_from_slice(dlast.row(0));
        for (j, (cache, lw)) in self.blocks.iter().zip(&w.layers).enumerate().rev() {
            dx = block_backward(c.num_heads, cache, lw, &mut grads.layers[j], dx)?;
            if self.exit_after == Some(j) && self.n_visual > 0 {
                let mut full = Matrix::zeros(n_total, d);
                for r in 0..dx.rows() {
                    full.row_mut(self.n_visual + r).copy_from_slice(dx.row(r));
                }
                dx = full;
            }
        }
        for i in 0..n_total {
            let g = dx.row(i);
            for (p, gv) in grads.pos_embed.row_mut(i).iter_mut().zip(g) {
                *p += gv;
            }
            if i >= self.n_visual {
                let id = self.text[i - self.n_visual];
                for (t, gv) in grads.token_embed.row_mut(id).iter_mut().zip(g) {
                    *t += gv;
                }
            }
        }
        Ok(())
    }
}

fn block_backward(
    heads: usize,
    cache: &BlockCache,
    lw: &LayerWeights,
    g: &mut LayerWeights,
    dout: Matrix,
) -> Result<Matrix> {
    let d = cache.q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN branch.
    g.w_down.add_assign(&cache.up_act.matmul_transa(&dout)?)?;
    let dact = dout.matmul_transb(&lw.w_down)?;
    let mut dup = dact;
    for (du, &pre) in dup.data_mut().iter_mut().zip(cache.up_pre.data()) {
        *du *= gelu_grad(pre);
    }
    g.w_up.add_assign(&cache.h2.matmul_transa(&dup)?)?;
    let dh2 = dup.matmul_transb(&lw.w_up)?;
    let mut dmid = norm_backward(&dh2, &cache.norm2, &lw.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    dmid.add_assign(&dout)?;

    // Attention branch.
    g.wo.add_assign(&cache.mixed.matmul_transa(&dmid)?)?;
    let dmixed = dmid.matmul_transb(&lw.wo)?;
    let rows = cache.q.rows();
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let p = &cache.probs[h];
        let d_oh = dmixed.slice_cols(lo, hi);
        let qh = cache.q.slice_cols(lo, hi);
        let kh = cache.k.slice_cols(lo, hi);
        let vh = cache.v.slice_cols(lo, hi);
        let dp = d_oh.matmul_transb(&vh)?;
        dv.set_cols(lo, &p.matmul_transa(&d_oh)?);
        let mut ds = Matrix::zeros(rows, rows);
        for i in 0..rows {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (jj, o) in ds.row_mut(i).iter_mut().enumerate() {
                *o = pr[jj] * (dpr[jj] - inner) * scale;
            }
        }
        dq.set_cols(lo, &ds.matmul(&kh)?);
        dk.set_cols(lo, &ds.matmul_transa(&qh)?);
    }
    g.wq.add_assign(&cache.h1.matmul_transa(&dq)?)?;
    g.wk.add_assign(&cache.h1.matmul_transa(&dk)?)?;
    g.wv.add_assign(&cache.h1.matmul_transa(&dv)?)?;
    let mut dh1 = dq.matmul_transb(&lw.wq)?;
    dh1.add_assign(&dk.matmul_transb(&lw.wk)?)?;
    dh1.add_assign(&dv.matmul_transb(&lw.wv)?)?;
    let mut dx = norm_backward(&dh1, &cache.norm1, &lw.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dx.add_assign(&dmid)?;
    Ok(dx)
}

/// Loss and gradient of predicting `target` after the prompt.
pub fn answer_loss_and_grad(
    model: &Model,
    inputs: &Inputs,
    target: usize,
    exit_after: Option<usize>,
    grads: &mut Weights,
) -> Result<f64> {
    if target >= model.config.vocab_size {
        return Err(Error::invalid(format!("target {target} outside vocabulary")));
    }
    let fwd = TrainingForward::run(model, inputs, exit_after)?;
    fwd.backward(model, target, grads)?;
    Ok(fwd.loss(target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeededRng;

    fn tiny() -> (Model, Inputs) {
        let config = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: 9,
            num_visual: 3,
            max_text: 4,
        };
        let mut model = Model::random(config, 5).unwrap();
        let mut rng = SeededRng::new(6);
        // Non-trivial norm parameters so their gradients are exercised.
        for (name, m) in model.weights.tensors_mut() {
            if name.contains("gain") || name.contains("bias") {
                for v in m.data_mut() {
                    *v += 0.3 * rng.normal();
                }
            }
        }
        let visual = Matrix::from_vec(3, 8, (0..24).map(|_| rng.normal()).collect()).unwrap();
        (model, Inputs::new(visual, vec![2, 7, 4]))
    }

    #[test]
    fn logits_match_inference_path() {
        let (model, inputs) = tiny();
        let fwd = TrainingForward::run(&model, &inputs, None).unwrap();
        let inf = model.prefill(&inputs).unwrap().logits;
        for (a, b) in fwd.logits.iter().zip(&inf) {
            assert!((a - b).abs() < 1e-12);
        }
        let fwd = TrainingForward::run(&model, &inputs, Some(1)).unwrap();
        let inf = model.prefill_with_exit(&inputs, 1).unwrap().logits;
        for (a, b) in fwd.logits.iter().zip(&inf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn check_fd(exit_after: Option<usize>) {
        let (model, inputs) = tiny();
        let target = 3;
        let mut grads = Weights::zeros(&model.config);
        for (_, m) in grads.tensors_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        answer_loss_and_grad(&model, &inputs, target, exit_after, &mut grads).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.data().to_vec()))
            .collect();
        let h = 1e-6;
        let mut rng = SeededRng::new(8);
        for (ti, (name, g)) in analytic.iter().enumerate() {
            for _ in 0..4 {
                let idx = rng.below(g.len());
                let mut plus = model.clone();
                plus.weights.tensors_mut()[ti].1.data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.weights.tensors_mut()[ti].1.data_mut()[idx] -= h;
                let lp = TrainingForward::run(&plus, &inputs, exit_after).unwrap().loss(target);
                let lm = TrainingForward::run(&minus, &inputs, exit_after).unwrap().loss(target);
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{idx}]: analytic {} vs fd {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_fd(None);
    }

    #[test]
    fn gradients_with_exit_match_finite_differences() {
        check_fd(Some(1));
        check_fd(Some(0));
    }
}
