use super::forward::{image_projection, Cache, LayerCache};
use super::kernels::{
    gelu_grad, layer_norm_backward, linear_backward_input, linear_backward_params, log_softmax,
};
use super::{ModelParams, ModelState, ProjMode};

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

struct AttnGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dk_img: Vec<f64>,
    dv_img: Vec<f64>,
}

fn attention_backward(lc: &LayerCache, datt: &[f64], t: usize, e: usize, heads: usize) -> AttnGrads {
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let block = lc.row_off[t];
    let n_img = lc.image.as_ref().map_or(0, |img| img.k.len());
    let mut g = AttnGrads {
        dq: vec![0.0; t * e],
        dk: vec![0.0; t * e],
        dv: vec![0.0; t * e],
        dk_img: vec![0.0; n_img],
        dv_img: vec![0.0; n_img],
    };
    let mut dp = Vec::new();
    for h in 0..heads {
        let hs = h * d;
        for i in 0..t {
            let base = h * block + lc.row_off[i];
            let len = lc.row_off[i + 1] - lc.row_off[i];
            let first_img = lc.image.as_ref().map_or(0, |img| img.offsets[i]);
            let p = &lc.probs[base..base + len];
            let keep = lc.keep.as_ref().map(|m| &m[base..base + len]);
            let dai = &datt[i * e + hs..i * e + hs + d];
            dp.clear();
            for slot in 0..len {
                let w = keep.map_or(p[slot], |m| p[slot] * m[slot]);
                let (val, dval) = if slot <= i {
                    let r = slot * e + hs;
                    (&lc.v[r..r + d], &mut g.dv[r..r + d])
                } else {
                    let img = lc.image.as_ref().expect("image slots imply an image cache");
                    let r = (first_img + slot - i - 1) * e + hs;
                    (&img.v[r..r + d], &mut g.dv_img[r..r + d])
                };
                axpy(dval, w, dai);
                let dw = dot(dai, val);
                dp.push(keep.map_or(dw, |m| dw * m[slot]));
            }
            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qi = &lc.q[i * e + hs..i * e + hs + d];
            for slot in 0..len {
                let ds = p[slot] * (dp[slot] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (key, dkey) = if slot <= i {
                    let r = slot * e + hs;
                    (&lc.k[r..r + d], &mut g.dk[r..r + d])
                } else {
                    let img = lc.image.as_ref().expect("image slots imply an image cache");
                    let r = (first_img + slot - i - 1) * e + hs;
                    (&img.k[r..r + d], &mut g.dk_img[r..r + d])
                };
                axpy(dkey, ds, qi);
                axpy(&mut g.dq[i * e + hs..i * e + hs + d], ds, key);
            }
        }
    }
    g
}

/// Mean next-token NLL over positions `0..T-1` and its gradient.
pub(super) fn run(model: &ModelState, cache: &Cache) -> (f64, ModelParams) {
    let cfg = &model.config;
    let p = &model.params;
    let (t, e, f, vocab) = (cache.tokens.len(), cfg.d_model, cfg.ffn_dim(), cfg.vocab);
    let n = t - 1;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dlogits = vec![0.0; t * vocab];
    for i in 0..n {
        let ls = log_softmax(&cache.logits[i * vocab..(i + 1) * vocab]);
        let target = cache.tokens[i + 1] as usize;
        total += ls[target];
        let row = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (d, l) in row.iter_mut().zip(&ls) {
            *d = l.exp() * inv_n;
        }
        row[target] -= inv_n;
    }
    let loss = -total / n as f64;

    let mut grads = ModelParams::zeros(cfg);
    linear_backward_params(&cache.xf, &dlogits, e, vocab, &mut grads.head_w, &mut grads.head_b);
    let mut dxf = vec![0.0; t * e];
    linear_backward_input(&dlogits, &p.head_w, e, vocab, &mut dxf);
    let mut dx = vec![0.0; t * e];
    layer_norm_backward(
        &dxf,
        &cache.lnf,
        &p.lnf_gain,
        e,
        &mut dx,
        &mut grads.lnf_gain,
        &mut grads.lnf_shift,
    );

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let ModelParams { layers, fusion, .. } = &mut grads;
        let g = &mut layers[l];

        // Feed-forward block: x_out = x_mid + W2·gelu(W1·LN2(x_mid)).
        linear_backward_params(&lc.hact, &dx, f, e, &mut g.w2, &mut g.b2);
        let mut dh = vec![0.0; t * f];
        linear_backward_input(&dx, &lp.w2, f, e, &mut dh);
        for (d, &h) in dh.iter_mut().zip(&lc.hpre) {
            *d *= gelu_grad(h);
        }
        linear_backward_params(&lc.b, &dh, e, f, &mut g.w1, &mut g.b1);
        let mut db = vec![0.0; t * e];
        linear_backward_input(&dh, &lp.w1, e, f, &mut db);
        let mut dx_mid = dx;
        layer_norm_backward(
            &db,
            &lc.ln2,
            &lp.ln2_gain,
            e,
            &mut dx_mid,
            &mut g.ln2_gain,
            &mut g.ln2_shift,
        );

        // Attention block: x_mid = x_in + Wo·attn(LN1(x_in)).
        linear_backward_params(&lc.att, &dx_mid, e, e, &mut g.wo, &mut g.bo);
        let mut datt = vec![0.0; t * e];
        linear_backward_input(&dx_mid, &lp.wo, e, e, &mut datt);
        let ag = attention_backward(lc, &datt, t, e, cfg.n_heads);
        let mut da = vec![0.0; t * e];
        linear_backward_params(&lc.a, &ag.dq, e, e, &mut g.wq, &mut g.bq);
        linear_backward_params(&lc.a, &ag.dk, e, e, &mut g.wk, &mut g.bk);
        linear_backward_params(&lc.a, &ag.dv, e, e, &mut g.wv, &mut g.bv);
        linear_backward_input(&ag.dq, &lp.wq, e, e, &mut da);
        linear_backward_input(&ag.dk, &lp.wk, e, e, &mut da);
        linear_backward_input(&ag.dv, &lp.wv, e, e, &mut da);

        if let Some(img) = &lc.image {
            let s = img.zn.len() / e;
            {
                let (dwk, dbk, dwv, dbv) = match cfg.proj_mode {
                    ProjMode::SharedWeightsImageBias => {
                        (&mut g.wk, &mut fusion.bk_img, &mut g.wv, &mut fusion.bv_img)
                    }
                    ProjMode::ImageSpecificWeightsAndBias => (
                        &mut fusion.wk_img,
                        &mut fusion.bk_img,
                        &mut fusion.wv_img,
                        &mut fusion.bv_img,
                    ),
                    ProjMode::SharedAll => (&mut g.wk, &mut g.bk, &mut g.wv, &mut g.bv),
                };
                linear_backward_params(&img.zn, &ag.dk_img, e, e, dwk, dbk);
                linear_backward_params(&img.zn, &ag.dv_img, e, e, dwv, dbv);
            }
            let [wk, _, wv, _] = image_projection(model, l);
            let mut dzn = vec![0.0; s * e];
            linear_backward_input(&ag.dk_img, wk, e, e, &mut dzn);
            linear_backward_input(&ag.dv_img, wv, e, e, &mut dzn);
            // Image embeddings are inputs, so their own gradient is dropped.
            let mut dz = vec![0.0; s * e];
            layer_norm_backward(
                &dzn,
                &img.ln,
                &p.fusion.ln_img_gain,
                e,
                &mut dz,
                &mut fusion.ln_img_gain,
                &mut fusion.ln_img_shift,
            );
        }

        let mut dx_in = dx_mid;
        layer_norm_backward(
            &da,
            &lc.ln1,
            &lp.ln1_gain,
            e,
            &mut dx_in,
            &mut g.ln1_gain,
            &mut g.ln1_shift,
        );
        dx = dx_in;
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[i * e..(i + 1) * e];
        axpy(&mut grads.tok_emb[tok as usize * e..(tok as usize + 1) * e], 1.0, row);
        axpy(&mut grads.pos_emb[i * e..(i + 1) * e], 1.0, row);
    }
    (loss, grads)
}
