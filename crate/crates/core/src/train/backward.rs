//! Hand-derived backward passes for every layer of the toy transformer.

use crate::attention::{AttentionCache, AttentionLayerWeights};
use crate::dit::{gelu_grad, patchify, sigmoid, DitWeights, ForwardCache};
use crate::error::Result;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, row_stats, Tensor, LAYERNORM_EPS};

/// `y = x W + b`: accumulates `dW`, `db` and returns `dx`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
) -> Result<Tensor> {
    matmul_at_acc(x, dy, dw)?;
    if let Some(db) = db {
        for (g, s) in db.data_mut().iter_mut().zip(dy.sum_rows()) {
            *g += s;
        }
    }
    matmul_bt(dy, w)
}

/// Backward of per-row layer normalization; accumulates gain/bias grads.
pub fn layernorm_backward(
    x: &Tensor,
    gain: &Tensor,
    dy: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let d = x.cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..x.rows() {
        let row = x.row(i);
        let (mean, inv_std) = row_stats(row, LAYERNORM_EPS);
        let dyr = dy.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = dyr[j] * gain.data()[j];
            dgain.data_mut()[j] += dyr[j] * xhat[j];
            dbias.data_mut()[j] += dyr[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Backward of unperturbed multi-head self-attention over input `x`.
pub(crate) fn attention_backward(
    x: &Tensor,
    w: &AttentionLayerWeights,
    cache: &AttentionCache,
    dy: &Tensor,
    grads: &mut AttentionLayerWeights,
) -> Result<Tensor> {
    let concat = cache.concat.as_ref().expect("attention cache holds concat");
    let d_concat = linear_backward(concat, &w.wo, dy, &mut grads.wo, None)?;
    let dh = w.head_dim();
    let scale = (dh as f64).sqrt();
    let mut dx = Tensor::zeros(x.shape());
    for h in 0..w.head_count() {
        let (q, k, v, a) = (&cache.q[h], &cache.k[h], &cache.v[h], &cache.a[h]);
        let d_o = d_concat.col_slice(h * dh, dh);
        let d_a = matmul_bt(&d_o, v)?;
        let mut d_v = Tensor::zeros(v.shape());
        matmul_at_acc(a, &d_o, &mut d_v)?;

        // softmax backward, then the 1/sqrt(d̄) scaling
        let mut d_s = d_a;
        for i in 0..a.rows() {
            let ar = a.row(i);
            let dot: f64 = d_s.row(i).iter().zip(ar).map(|(g, p)| g * p).sum();
            for (g, p) in d_s.row_mut(i).iter_mut().zip(ar) {
                *g = p * (*g - dot) / scale;
            }
        }
        let d_q = matmul(&d_s, k)?;
        let mut d_k = Tensor::zeros(k.shape());
        matmul_at_acc(&d_s, q, &mut d_k)?;

        dx.add_assign(&linear_backward(x, &w.wq[h], &d_q, &mut grads.wq[h], None)?);
        dx.add_assign(&linear_backward(x, &w.wk[h], &d_k, &mut grads.wk[h], None)?);
        dx.add_assign(&linear_backward(x, &w.wv[h], &d_v, &mut grads.wv[h], None)?);
    }
    Ok(dx)
}

/// Accumulates into `grads` the gradient of `<d_out, forward(...)>` given the
/// cache recorded by an unperturbed forward pass.
pub(crate) fn dit_backward(
    w: &DitWeights,
    cache: &ForwardCache,
    d_out: &Tensor,
    grads: &mut DitWeights,
) -> Result<()> {
    let c = &w.config;
    let d = c.model_dim;
    let n_img = c.image_tokens();

    // output projection on image tokens
    let d_tok = patchify(d_out, c.patch)?;
    let img_hf = cache.hf.row_slice(1, n_img);
    let d_img_hf = linear_backward(&img_hf, &w.out_w, &d_tok, &mut grads.out_w, Some(&mut grads.out_b))?;
    let mut d_hf = Tensor::zeros(&[n_img + 1, d]);
    d_hf.data_mut()[d..].copy_from_slice(d_img_hf.data());
    let mut dx = layernorm_backward(&cache.x_final, &w.lnf_g, &d_hf, &mut grads.lnf_g, &mut grads.lnf_b);

    for (l, b) in w.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[l];
        let gb = &mut grads.blocks[l];

        // MLP residual
        let d_act = linear_backward(&bc.m_act, &b.mlp_w2, &dx, &mut gb.mlp_w2, Some(&mut gb.mlp_b2))?;
        let mut d_pre = d_act;
        for ((g, &x), &th) in d_pre
            .data_mut()
            .iter_mut()
            .zip(bc.m_pre.data())
            .zip(bc.m_tanh.data())
        {
            *g *= gelu_grad(x, th);
        }
        let d_h2 = linear_backward(&bc.h2, &b.mlp_w1, &d_pre, &mut gb.mlp_w1, Some(&mut gb.mlp_b1))?;
        dx.add_assign(&layernorm_backward(&bc.x_mid, &b.ln2_g, &d_h2, &mut gb.ln2_g, &mut gb.ln2_b));

        // attention residual
        let d_h1 = attention_backward(&bc.h1, &b.attn, &bc.attn, &dx, &mut gb.attn)?;
        dx.add_assign(&layernorm_backward(&bc.x_in, &b.ln1_g, &d_h1, &mut gb.ln1_g, &mut gb.ln1_b));
    }

    // embeddings
    let d_temb = dx.sum_rows();
    for (g, v) in grads.class_emb.row_mut(cache.class_row).iter_mut().zip(dx.row(0)) {
        *g += v;
    }
    let d_img = dx.row_slice(1, n_img);
    grads.pos.add_assign(&d_img);
    linear_backward(&cache.patches, &w.patch_w, &d_img, &mut grads.patch_w, Some(&mut grads.patch_b))?;

    // time MLP
    let act = Tensor::new(&[1, d], cache.time_act.clone())?;
    let d_temb = Tensor::new(&[1, d], d_temb)?;
    let d_act = linear_backward(&act, &w.time_w2, &d_temb, &mut grads.time_w2, Some(&mut grads.time_b2))?;
    let d_pre: Vec<f64> = d_act
        .data()
        .iter()
        .zip(&cache.time_pre)
        .map(|(g, &x)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect();
    let feat = Tensor::new(&[1, d], cache.time_feat.clone())?;
    linear_backward(
        &feat,
        &w.time_w1,
        &Tensor::new(&[1, d], d_pre)?,
        &mut grads.time_w1,
        Some(&mut grads.time_b1),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], rng.normals(r * c)).unwrap()
    }

    #[test]
    fn linear_backward_matches_closed_form() {
        // y = x W + b, L = <G, y>: dL/dx = G Wᵀ, dL/dW = xᵀ G, dL/db = colsum G
        let mut rng = Rng::new(10);
        let x = random(&mut rng, 5, 3);
        let w = random(&mut rng, 3, 4);
        let g = random(&mut rng, 5, 4);
        let mut dw = Tensor::zeros(&[3, 4]);
        let mut db = Tensor::zeros(&[4]);
        let dx = linear_backward(&x, &w, &g, &mut dw, Some(&mut db)).unwrap();

        let wt = w.transpose();
        for i in 0..5 {
            for p in 0..3 {
                let expect: f64 = (0..4).map(|j| g.get(i, j) * wt.get(j, p)).sum();
                assert!((dx.get(i, p) - expect).abs() < 1e-10);
            }
        }
        for p in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..5).map(|i| x.get(i, p) * g.get(i, j)).sum();
                assert!((dw.get(p, j) - expect).abs() < 1e-10);
            }
        }
        for j in 0..4 {
            let expect: f64 = (0..5).map(|i| g.get(i, j)).sum();
            assert!((db.data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_difference() {
        let mut rng = Rng::new(11);
        let x = random(&mut rng, 3, 6);
        let gain = Tensor::new(&[6], rng.normals(6)).unwrap();
        let bias = Tensor::new(&[6], rng.normals(6)).unwrap();
        let g = random(&mut rng, 3, 6);
        let loss = |x: &Tensor| {
            let y = crate::tensor::layernorm(x, &gain, &bias, LAYERNORM_EPS).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dg = Tensor::zeros(&[6]);
        let mut db = Tensor::zeros(&[6]);
        let dx = layernorm_backward(&x, &gain, &g, &mut dg, &mut db);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-7, "{idx}: {num} vs {}", dx.data()[idx]);
        }
    }
}
