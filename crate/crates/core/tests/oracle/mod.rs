//! Dense reference forward pass: recomputes every position from scratch in
//! f64, with no cache, no batching and no shared code with the runtime.

#![allow(dead_code)]

use prunekv_core::kvcache::TokenRole;
use prunekv_core::model::DecoderWeights;
use prunekv_core::numerics::Matrix;

const EPS: f64 = 1e-5;

fn row_times(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * *wij as f64;
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * *g as f64).collect()
}

fn rotate(x: &mut [f64], pos: usize, dk: usize, base: f64) {
    for head in x.chunks_mut(dk) {
        for i in 0..dk / 2 {
            let theta = pos as f64 * base.powf(-(2.0 * i as f64) / dk as f64);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * theta.cos() - b * theta.sin();
            head[2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Logits at every position of `tokens`.
///
/// `visible(layer, query_pos, key_pos)` masks keys beyond causality; pass
/// `|_, _, _| true` for an unpruned model.
pub fn dense_logits(
    w: &DecoderWeights,
    tokens: &[usize],
    visible: &dyn Fn(usize, usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let (d, dk, heads) = (cfg.hidden_dim, cfg.head_dim, cfg.num_heads);
    let n = tokens.len();
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.embed.row(t).iter().map(|&v| v as f64).collect())
        .collect();

    for (l, lw) in w.layers.iter().enumerate() {
        let x: Vec<Vec<f64>> = h.iter().map(|r| rms(r, &lw.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &lw.wq)).collect();
        let mut k: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| row_times(r, &lw.wv)).collect();
        for p in 0..n {
            rotate(&mut q[p], p, dk, cfg.rope_base as f64);
            rotate(&mut k[p], p, dk, cfg.rope_base as f64);
        }

        let mut next = h.clone();
        for p in 0..n {
            let keys: Vec<usize> = (0..=p).filter(|&j| visible(l, p, j)).collect();
            let mut mixed = vec![0.0; d];
            for hd in 0..heads {
                let s = hd * dk..(hd + 1) * dk;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        q[p][s.clone()]
                            .iter()
                            .zip(&k[j][s.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&j, ej) in keys.iter().zip(&e) {
                    for c in s.clone() {
                        mixed[c] += ej / z * v[j][c];
                    }
                }
            }
            let attn = row_times(&mixed, &lw.wo);
            for (a, b) in next[p].iter_mut().zip(&attn) {
                *a += b;
            }
            let y = rms(&next[p], &lw.mlp_norm);
            let up: Vec<f64> = row_times(&y, &lw.w_up)
                .into_iter()
                .map(|u| u / (1.0 + (-u).exp()))
                .collect();
            let down = row_times(&up, &lw.w_down);
            for (a, b) in next[p].iter_mut().zip(&down) {
                *a += b;
            }
        }
        h = next;
    }
    h.iter()
        .map(|r| row_times(&rms(r, &w.final_norm), &w.unembed))
        .collect()
}

/// First index of the largest value.
pub fn argmax64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Visibility rule for a run that pruned visual tokens.
///
/// `prunes` lists `(step, per-layer surviving visual ordinals)`. A prune at
/// step `s` hides tokens from every query at position `prompt_len + s - 1`
/// or later.
pub fn pruned_visibility(
    prompt: &[(usize, TokenRole)],
    prunes: Vec<(usize, Vec<Vec<usize>>)>,
) -> impl Fn(usize, usize, usize) -> bool {
    let prompt_len = prompt.len();
    let mut ordinal = vec![None; prompt_len];
    let mut next = 0;
    for (p, &(_, role)) in prompt.iter().enumerate() {
        if role == TokenRole::Visual {
            ordinal[p] = Some(next);
            next += 1;
        }
    }
    move |layer, q, j| {
        let Some(o) = ordinal.get(j).copied().flatten() else {
            return true;
        };
        prunes
            .iter()
            .filter(|(step, _)| q + 1 >= prompt_len + step)
            .all(|(_, kept)| kept[layer].contains(&o))
    }
}
