//! Decoder-only multi-head-attention transformer.
//!
//! Pre-norm blocks with RMS normalization, rotary positions on queries and
//! keys, and a SiLU MLP of width `4d`. A decoding step projects only the
//! newest token and attends over the segmented KV cache; the last-token
//! attention row of every layer is averaged over heads and partitioned by
//! token role into an [`AttentionSnapshot`].

mod format;

pub use format::{read_weights, write_weights, WEIGHT_MAGIC, WEIGHT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{require, Result};
use crate::kvcache::{SegmentedKVCache, TokenRole};
use crate::numerics::{dot, matmul, rope_apply, softmax_f64, vec_mat, Matrix, RngState};
use crate::policy::{apply_intervention, AttentionIntervention};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
}

impl DecoderConfig {
    /// Builds a config with `hidden_dim = num_heads * head_dim`.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            vocab_size,
            max_seq_len,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require!(
            self.num_layers >= 1
                && self.num_heads >= 1
                && self.head_dim >= 1
                && self.vocab_size >= 1
                && self.max_seq_len >= 1,
            "all decoder dimensions must be >= 1: {self:?}"
        );
        require!(
            self.hidden_dim == self.num_heads * self.head_dim,
            "hidden_dim {} != num_heads {} * head_dim {}",
            self.hidden_dim,
            self.num_heads,
            self.head_dim
        );
        require!(
            self.head_dim.is_multiple_of(2),
            "head_dim must be even for rotary embeddings, got {}",
            self.head_dim
        );
        require!(
            self.rope_base.is_finite() && self.rope_base > 1.0,
            "rope_base must be finite and > 1, got {}",
            self.rope_base
        );
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    /// `vocab x d`
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `d x vocab`
    pub unembed: Matrix,
}

/// Deterministic random initialization.
///
/// Scale rule: every projection `W` with fan-in `f` is drawn from
/// `N(0, 1/f)`, so after RMS normalization queries and keys have unit-scale
/// entries and pre-softmax attention scores `q·k/sqrt(d_k)` have O(1)
/// spread. Token embeddings are `N(0, 1)` plus one shared offset vector
/// (also `N(0, 1)`), which gives every key a query-independent component
/// and keeps attention preferences correlated across decoding steps, as in
/// trained models. Norm gains start at 1.
pub fn init_weights(config: &DecoderConfig, seed: u64) -> Result<DecoderWeights> {
    config.validate()?;
    let d = config.hidden_dim;
    let m = config.mlp_dim();
    let v = config.vocab_size;
    let mut rng = RngState::new(seed);

    let offset: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
    let mut embed = Matrix::random_normal(v, d, 1.0, &mut rng);
    let data: Vec<f32> = embed
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + offset[i % d])
        .collect();
    embed = Matrix::from_vec(v, d, data)?;

    let proj_std = (1.0 / d as f64).sqrt() as f32;
    let down_std = (1.0 / m as f64).sqrt() as f32;
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::random_normal(d, d, proj_std, &mut rng),
            wk: Matrix::random_normal(d, d, proj_std, &mut rng),
            wv: Matrix::random_normal(d, d, proj_std, &mut rng),
            wo: Matrix::random_normal(d, d, proj_std, &mut rng),
            mlp_norm: vec![1.0; d],
            w_up: Matrix::random_normal(d, m, proj_std, &mut rng),
            w_down: Matrix::random_normal(m, d, down_std, &mut rng),
        })
        .collect();
    let unembed = Matrix::random_normal(d, v, proj_std, &mut rng);

    Ok(DecoderWeights {
        config: *config,
        embed,
        layers,
        final_norm: vec![1.0; d],
        unembed,
    })
}

impl DecoderWeights {
    /// Checks every matrix shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.hidden_dim;
        let m = c.mlp_dim();
        let shape = |mat: &Matrix, r: usize, k: usize, what: &str| -> Result<()> {
            require!(
                mat.rows() == r && mat.cols() == k,
                "{what} has shape {}x{}, expected {r}x{k}",
                mat.rows(),
                mat.cols()
            );
            require!(mat.is_finite(), "{what} contains non-finite entries");
            Ok(())
        };
        shape(&self.embed, c.vocab_size, d, "embed")?;
        shape(&self.unembed, d, c.vocab_size, "unembed")?;
        require!(
            self.layers.len() == c.num_layers,
            "{} layers present, config says {}",
            self.layers.len(),
            c.num_layers
        );
        require!(self.final_norm.len() == d, "final_norm width mismatch");
        for (i, l) in self.layers.iter().enumerate() {
            require!(
                l.attn_norm.len() == d && l.mlp_norm.len() == d,
                "layer {i} norm width mismatch"
            );
            for (mat, name) in [(&l.wq, "wq"), (&l.wk, "wk"), (&l.wv, "wv"), (&l.wo, "wo")] {
                shape(mat, d, d, &format!("layer {i} {name}"))?;
            }
            shape(&l.w_up, d, m, &format!("layer {i} w_up"))?;
            shape(&l.w_down, m, d, &format!("layer {i} w_down"))?;
        }
        Ok(())
    }

    pub fn new_cache(&self) -> SegmentedKVCache {
        SegmentedKVCache::new(self.config.num_layers, self.config.hidden_dim)
    }
}

/// One layer's head-averaged last-token attention, split by token role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
    pub generated: Vec<f64>,
}

impl LayerAttention {
    /// Mean attention over visual tokens; `None` when there are none.
    pub fn avg_visual(&self) -> Option<f64> {
        if self.visual.is_empty() {
            None
        } else {
            Some(self.visual.iter().sum::<f64>() / self.visual.len() as f64)
        }
    }

    pub fn total(&self) -> f64 {
        self.text
            .iter()
            .chain(&self.visual)
            .chain(&self.generated)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub step: usize,
    pub layers: Vec<LayerAttention>,
}

impl AttentionSnapshot {
    pub fn avg_visual(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(LayerAttention::avg_visual).collect()
    }

    pub fn visual(&self, layer: usize) -> &[f64] {
        &self.layers[layer].visual
    }
}

/// Per-layer, per-head post-softmax attention rows of the newest token.
pub type HeadRows = Vec<Vec<Vec<f64>>>;

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v as f64 * inv * g as f64) as f32)
        .collect()
}

fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

fn mlp(layer: &LayerWeights, h: &[f32]) -> Result<Vec<f32>> {
    let x = rms_norm(h, &layer.mlp_norm);
    let up: Vec<f32> = vec_mat(&x, &layer.w_up)?.into_iter().map(silu).collect();
    vec_mat(&up, &layer.w_down)
}

fn add_into(h: &mut [f32], delta: &[f32]) {
    for (a, b) in h.iter_mut().zip(delta) {
        *a += b;
    }
}

/// Attention of one query over the first `upto` rows of a layer's cache.
///
/// Returns the mixed value vector (width `d`) and the per-head rows.
fn attend(
    config: &DecoderConfig,
    cache: &SegmentedKVCache,
    layer: usize,
    q: &[f32],
    upto: usize,
    intervention: Option<&AttentionIntervention>,
) -> Result<(Vec<f32>, Vec<Vec<f64>>)> {
    let dk = config.head_dim;
    let scale = 1.0 / (dk as f64).sqrt();
    let keys = cache.keys(layer);
    let values = cache.values(layer);
    let roles = &cache.roles(layer)[..upto];

    let mut mixed = vec![0.0f32; config.hidden_dim];
    let mut rows = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let span = h * dk..(h + 1) * dk;
        let qh = &q[span.clone()];
        let scores: Vec<f64> = (0..upto)
            .map(|j| dot(qh, &keys.row(j)[span.clone()]) * scale)
            .collect();
        let mut probs = softmax_f64(&scores)?;
        if let Some(iv) = intervention {
            apply_intervention(&mut probs, roles, iv)?;
        }
        let mut acc = vec![0.0f64; dk];
        for (j, &p) in probs.iter().enumerate() {
            for (a, &vv) in acc.iter_mut().zip(&values.row(j)[span.clone()]) {
                *a += p * vv as f64;
            }
        }
        for (o, a) in mixed[span].iter_mut().zip(acc) {
            *o = a as f32;
        }
        rows.push(probs);
    }
    Ok((mixed, rows))
}

/// Head average in fixed head order, split by role.
fn summarize(rows: &[Vec<f64>], roles: &[TokenRole]) -> LayerAttention {
    let heads = rows.len() as f64;
    let mut out = LayerAttention {
        text: Vec::new(),
        visual: Vec::new(),
        generated: Vec::new(),
    };
    for (j, role) in roles.iter().enumerate() {
        let avg = rows.iter().map(|r| r[j]).sum::<f64>() / heads;
        match role {
            TokenRole::PromptText => out.text.push(avg),
            TokenRole::Visual => out.visual.push(avg),
            TokenRole::Generated => out.generated.push(avg),
        }
    }
    out
}

fn check_cache(config: &DecoderConfig, cache: &SegmentedKVCache) -> Result<()> {
    require!(
        cache.num_layers() == config.num_layers && cache.width() == config.hidden_dim,
        "cache has {} layers of width {}, model expects {} of width {}",
        cache.num_layers(),
        cache.width(),
        config.num_layers,
        config.hidden_dim
    );
    Ok(())
}

fn logits_from(weights: &DecoderWeights, h: &[f32]) -> Result<Vec<f32>> {
    let x = rms_norm(h, &weights.final_norm);
    vec_mat(&x, &weights.unembed)
}

fn embedding(weights: &DecoderWeights, token: usize) -> Result<Vec<f32>> {
    require!(
        token < weights.config.vocab_size,
        "token {token} outside vocab of {}",
        weights.config.vocab_size
    );
    Ok(weights.embed.row(token).to_vec())
}

/// Full output of a single-token step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub snapshot: AttentionSnapshot,
    pub head_rows: HeadRows,
}

/// Processes one token against the cache, appending its keys and values.
pub fn forward_token(
    weights: &DecoderWeights,
    cache: &mut SegmentedKVCache,
    token: usize,
    role: TokenRole,
    position: usize,
    step: usize,
    intervention: Option<&AttentionIntervention>,
) -> Result<StepOutput> {
    let config = &weights.config;
    check_cache(config, cache)?;
    require!(
        position < config.max_seq_len,
        "position {position} exceeds max_seq_len {}",
        config.max_seq_len
    );
    let intervention = intervention.filter(|iv| iv.applies_at(step));
    let mut h = embedding(weights, token)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut head_rows = Vec::with_capacity(config.num_layers);
    for (li, lw) in weights.layers.iter().enumerate() {
        let x = rms_norm(&h, &lw.attn_norm);
        let q = rope_apply(
            &vec_mat(&x, &lw.wq)?,
            position,
            config.head_dim,
            config.rope_base,
        )?;
        let k = rope_apply(
            &vec_mat(&x, &lw.wk)?,
            position,
            config.head_dim,
            config.rope_base,
        )?;
        let v = vec_mat(&x, &lw.wv)?;
        cache.append(li, &k, &v, role, position)?;

        let upto = cache.len(li);
        let (mixed, rows) = attend(config, cache, li, &q, upto, intervention)?;
        layers.push(summarize(&rows, cache.roles(li)));
        head_rows.push(rows);

        add_into(&mut h, &vec_mat(&mixed, &lw.wo)?);
        let delta = mlp(lw, &h)?;
        add_into(&mut h, &delta);
    }
    Ok(StepOutput {
        logits: logits_from(weights, &h)?,
        snapshot: AttentionSnapshot { step, layers },
        head_rows,
    })
}

/// One decoding step for a generated token.
pub fn forward_step(
    weights: &DecoderWeights,
    cache: &mut SegmentedKVCache,
    token: usize,
    position: usize,
    step: usize,
    intervention: Option<&AttentionIntervention>,
) -> Result<(Vec<f32>, AttentionSnapshot)> {
    let out = forward_token(
        weights,
        cache,
        token,
        TokenRole::Generated,
        position,
        step,
        intervention,
    )?;
    Ok((out.logits, out.snapshot))
}

/// Batched causal pass over the prompt, filling an empty cache.
///
/// Returns the last prompt token's logits and its snapshot, which is
/// decoding step 1. An intervention, if given, only touches that last row.
pub fn prefill(
    weights: &DecoderWeights,
    cache: &mut SegmentedKVCache,
    tokens: &[(usize, TokenRole)],
    intervention: Option<&AttentionIntervention>,
) -> Result<(Vec<f32>, AttentionSnapshot)> {
    let config = &weights.config;
    check_cache(config, cache)?;
    require!(cache.is_empty(), "prefill needs an empty cache");
    require!(!tokens.is_empty(), "prefill needs at least one token");
    require!(
        tokens.len() <= config.max_seq_len,
        "prompt of {} tokens exceeds max_seq_len {}",
        tokens.len(),
        config.max_seq_len
    );
    let n = tokens.len();
    let d = config.hidden_dim;
    let intervention = intervention.filter(|iv| iv.applies_at(1));

    let mut hidden = Vec::with_capacity(n);
    for &(t, _) in tokens {
        hidden.push(embedding(weights, t)?);
    }
    let mut layers = Vec::with_capacity(config.num_layers);
    for (li, lw) in weights.layers.iter().enumerate() {
        let normed: Vec<Vec<f32>> = hidden.iter().map(|h| rms_norm(h, &lw.attn_norm)).collect();
        let x = Matrix::from_rows(&normed)?;
        let q = matmul(&x, &lw.wq)?;
        let k = matmul(&x, &lw.wk)?;
        let v = matmul(&x, &lw.wv)?;

        let mut queries = Vec::with_capacity(n);
        for (pos, &(_, role)) in tokens.iter().enumerate() {
            let kr = rope_apply(k.row(pos), pos, config.head_dim, config.rope_base)?;
            cache.append(li, &kr, v.row(pos), role, pos)?;
            queries.push(rope_apply(
                q.row(pos),
                pos,
                config.head_dim,
                config.rope_base,
            )?);
        }

        let mut mixed_rows = Vec::with_capacity(n);
        for (pos, qr) in queries.iter().enumerate() {
            let last = pos + 1 == n;
            let iv = if last { intervention } else { None };
            let (mixed, rows) = attend(config, cache, li, qr, pos + 1, iv)?;
            if last {
                layers.push(summarize(&rows, cache.roles(li)));
            }
            mixed_rows.push(mixed);
        }
        let attn_out = matmul(&Matrix::from_rows(&mixed_rows)?, &lw.wo)?;
        for (pos, h) in hidden.iter_mut().enumerate() {
            add_into(h, attn_out.row(pos));
            let delta = mlp(lw, h)?;
            add_into(h, &delta);
        }
        debug_assert_eq!(hidden[0].len(), d);
    }
    let logits = logits_from(weights, &hidden[n - 1])?;
    Ok((logits, AttentionSnapshot { step: 1, layers }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, heads: usize, dk: usize) -> DecoderWeights {
        init_weights(&DecoderConfig::new(layers, heads, dk, 32, 64), 7).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = DecoderConfig::new(2, 2, 8, 32, 64);
        assert_eq!(
            init_weights(&cfg, 1).unwrap(),
            init_weights(&cfg, 1).unwrap()
        );
        assert_ne!(
            init_weights(&cfg, 1).unwrap(),
            init_weights(&cfg, 2).unwrap()
        );
        init_weights(&cfg, 1).unwrap().validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecoderConfig::new(2, 2, 8, 32, 64);
        cfg.hidden_dim = 15;
        assert!(cfg.validate().is_err());
        assert!(DecoderConfig::new(0, 2, 8, 32, 64).validate().is_err());
        assert!(DecoderConfig::new(1, 2, 7, 32, 64).validate().is_err());
    }

    #[test]
    fn logits_are_finite_and_softmax_non_degenerate() {
        let w = init_weights(&DecoderConfig::new(2, 4, 8, 64, 64), 3).unwrap();
        let mut cache = w.new_cache();
        let prompt: Vec<(usize, TokenRole)> = (0..12)
            .map(|i| {
                (
                    (i * 7 + 3) % 64,
                    if i < 4 {
                        TokenRole::PromptText
                    } else {
                        TokenRole::Visual
                    },
                )
            })
            .collect();
        let (logits, _) = prefill(&w, &mut cache, &prompt, None).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        let probs = crate::numerics::softmax_row(&logits).unwrap();
        let max = probs.iter().cloned().fold(0.0f32, f32::max);
        assert!(max < 0.99, "softmax collapsed to a point mass: {max}");
    }

    #[test]
    fn singleton_cache_attends_fully_to_itself() {
        let w = tiny(1, 1, 8);
        let mut cache = w.new_cache();
        let (_, snap) = forward_step(&w, &mut cache, 5, 0, 1, None).unwrap();
        assert_eq!(snap.layers[0].generated, vec![1.0]);
    }

    #[test]
    fn snapshot_rows_sum_to_one() {
        let w = tiny(3, 2, 8);
        let mut cache = w.new_cache();
        let prompt = [
            (1, TokenRole::PromptText),
            (2, TokenRole::Visual),
            (3, TokenRole::Visual),
        ];
        let (_, snap) = prefill(&w, &mut cache, &prompt, None).unwrap();
        for l in &snap.layers {
            assert!((l.total() - 1.0).abs() < 1e-5);
            assert_eq!((l.text.len(), l.visual.len(), l.generated.len()), (1, 2, 0));
        }
        for pos in 3..10 {
            let (_, snap) = forward_step(&w, &mut cache, pos, pos, pos - 1, None).unwrap();
            for l in &snap.layers {
                assert!((l.total() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn head_average_matches_per_head_rows() {
        let w = tiny(2, 2, 8);
        let mut cache = w.new_cache();
        for (pos, role) in [TokenRole::PromptText, TokenRole::Visual, TokenRole::Visual]
            .into_iter()
            .enumerate()
        {
            forward_token(&w, &mut cache, pos + 1, role, pos, 1, None).unwrap();
        }
        let out = forward_token(&w, &mut cache, 9, TokenRole::Generated, 3, 2, None).unwrap();
        for (layer, rows) in out.head_rows.iter().enumerate() {
            let avg: Vec<f64> = (0..4).map(|j| (rows[0][j] + rows[1][j]) / 2.0).collect();
            let snap = &out.snapshot.layers[layer];
            assert_eq!(snap.text, vec![avg[0]]);
            assert_eq!(snap.visual, vec![avg[1], avg[2]]);
            assert_eq!(snap.generated, vec![avg[3]]);
            let mean = (avg[1] + avg[2]) / 2.0;
            assert_eq!(snap.avg_visual(), Some(mean));
        }
    }

    #[test]
    fn prefill_errors_and_role_bookkeeping() {
        let w = tiny(1, 1, 8);
        let mut cache = w.new_cache();
        let too_long: Vec<(usize, TokenRole)> =
            (0..65).map(|i| (i % 32, TokenRole::PromptText)).collect();
        assert!(prefill(&w, &mut cache, &too_long, None).is_err());

        let prompt = [
            (1, TokenRole::PromptText),
            (20, TokenRole::Visual),
            (2, TokenRole::PromptText),
        ];
        let (_, snap) = prefill(&w, &mut cache, &prompt, None).unwrap();
        assert_eq!(
            cache.roles(0),
            &[
                TokenRole::PromptText,
                TokenRole::Visual,
                TokenRole::PromptText
            ]
        );
        assert!(snap.avg_visual()[0].is_some());
        assert!(prefill(&w, &mut cache, &prompt, None).is_err());
    }

    #[test]
    fn empty_visual_segment_leaves_avg_undefined() {
        let w = tiny(2, 1, 8);
        let mut cache = w.new_cache();
        let (_, snap) = prefill(
            &w,
            &mut cache,
            &[(1, TokenRole::PromptText), (2, TokenRole::PromptText)],
            None,
        )
        .unwrap();
        assert!(snap.layers.iter().all(|l| l.visual.is_empty()));
        assert_eq!(snap.avg_visual(), vec![None, None]);
    }

    #[test]
    fn position_and_layer_mismatch_rejected() {
        let w = tiny(2, 1, 8);
        let mut cache = w.new_cache();
        assert!(forward_step(&w, &mut cache, 1, 64, 1, None).is_err());
        let mut wrong = SegmentedKVCache::new(3, 8);
        assert!(forward_step(&w, &mut wrong, 1, 0, 1, None).is_err());
    }
}
