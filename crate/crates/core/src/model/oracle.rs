//! Naive loop-based forward used to cross-check the tape implementation.

use super::{names, Model, NORM_EPS, ROPE_BASE};

fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(g).map(|(a, b)| a * r * b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rotate(v: &mut [f64], pos: usize, d_head: usize) {
    for h in 0..v.len() / d_head {
        for i in 0..d_head / 2 {
            let theta = pos as f64 * ROPE_BASE.powf(-(2.0 * i as f64) / d_head as f64);
            let p = h * d_head + 2 * i;
            let (a, b) = (v[p], v[p + 1]);
            v[p] = a * theta.cos() - b * theta.sin();
            v[p + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn glu(m: &Model, x: &[f64], w: [String; 3], width: usize) -> Vec<f64> {
    let d = m.config.d_model;
    let a = vecmat(x, m.param(&w[0]).unwrap().data(), width);
    let b = vecmat(x, m.param(&w[1]).unwrap().data(), width);
    let h: Vec<f64> = a.iter().zip(&b).map(|(p, q)| gelu(*p) * q).collect();
    vecmat(&h, m.param(&w[2]).unwrap().data(), d)
}

/// Logits for a single sequence, one token at a time.
pub fn forward_sequence(m: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let d = c.d_model;
    let dh = c.d_head;
    let embed = m.param(names::EMBED).unwrap().data();
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| embed[t as usize * d..][..d].to_vec()).collect();
    for l in 0..c.n_layer {
        let g = m.param(&names::attn_norm(l)).unwrap().data();
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, g)).collect();
        let qs: Vec<Vec<f64>> = hs
            .iter()
            .enumerate()
            .map(|(p, h)| {
                let mut q = vecmat(h, m.param(&names::wq(l)).unwrap().data(), c.n_head_q * dh);
                rotate(&mut q, p, dh);
                q
            })
            .collect();
        let ks: Vec<Vec<f64>> = hs
            .iter()
            .enumerate()
            .map(|(p, h)| {
                let mut k = vecmat(h, m.param(&names::wk(l)).unwrap().data(), c.n_head_kv * dh);
                rotate(&mut k, p, dh);
                k
            })
            .collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, m.param(&names::wv(l)).unwrap().data(), c.n_head_kv * dh)).collect();
        for i in 0..xs.len() {
            let mut o = vec![0.0; c.n_head_q * dh];
            for h in 0..c.n_head_q {
                let g = h / c.group_size();
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|t| qs[i][h * dh + t] * ks[j][g * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    for t in 0..dh {
                        o[h * dh + t] += pj * vs[j][g * dh + t];
                    }
                }
            }
            let a = vecmat(&o, m.param(&names::wo(l)).unwrap().data(), d);
            xs[i].iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        }
        let g = m.param(&names::ffn_norm(l)).unwrap().data();
        for x in xs.iter_mut() {
            let h = rms(x, g);
            let y = if c.is_moe() {
                let logits = vecmat(&h, m.param(&names::router(l)).unwrap().data(), c.n_expert);
                let mut order: Vec<usize> = (0..c.n_expert).collect();
                order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
                let sel = &order[..c.top_k];
                let gates = softmax(&sel.iter().map(|&e| logits[e]).collect::<Vec<_>>());
                let mut y = vec![0.0; d];
                for (&e, gate) in sel.iter().zip(&gates) {
                    let ye = glu(m, &h, [1, 2, 3].map(|w| names::expert(l, e, w)), c.d_expert);
                    y.iter_mut().zip(&ye).for_each(|(a, b)| *a += gate * b);
                }
                y
            } else {
                glu(m, &h, [1, 2, 3].map(|w| names::ffn(l, w)), c.d_ffn)
            };
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
    }
    let g = m.param(names::FINAL_NORM).unwrap().data();
    xs.iter()
        .map(|x| vecmat(&rms(x, g), m.param(names::UNEMBED).unwrap().data(), c.vocab_size))
        .collect()
}
