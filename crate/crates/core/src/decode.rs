//! Decoding loops: greedy, nucleus and beam search.
//!
//! Step numbering: the last prompt token (processed inside prefill) is step
//! 1; the forward pass of the first generated token is step 2, and so on.
//! At each step the loop runs the forward pass, lets the policy look at the
//! snapshot, selects the next token from the logits, and only then applies
//! any prune, so the attention recorded for step `m` always reflects the
//! cache produced by step `m - 1`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{require, Result};
use crate::kvcache::{SegmentedKVCache, TokenRole};
use crate::metrics::{flops_for_prefill, flops_for_step, FlopsLedger};
use crate::model::{forward_step, prefill, AttentionSnapshot, DecoderConfig, DecoderWeights};
use crate::numerics::{argmax, sample_top_p, softmax_row, RngState};
use crate::policy::{AttentionIntervention, Policy, PolicyConfig, PruneDecision};
use crate::telemetry::{Telemetry, Trace, TraceHeader};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Nucleus { p: f64, seed: u64 },
    Beam { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest {
    pub prompt: Vec<(usize, TokenRole)>,
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    /// `None` removes the policy layer entirely.
    pub policy: Option<PolicyConfig>,
    pub stop_tokens: Vec<usize>,
    pub intervention: Option<AttentionIntervention>,
}

impl DecodeRequest {
    pub fn greedy(prompt: Vec<(usize, TokenRole)>, max_new_tokens: usize) -> Self {
        Self {
            prompt,
            max_new_tokens,
            strategy: Strategy::Greedy,
            policy: None,
            stop_tokens: Vec::new(),
            intervention: None,
        }
    }

    pub fn with_policy(mut self, policy: PolicyConfig) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn visual_count(&self) -> usize {
        self.prompt
            .iter()
            .filter(|(_, r)| *r == TokenRole::Visual)
            .count()
    }

    /// Checks the request against a model configuration.
    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        require!(self.max_new_tokens >= 1, "max_new_tokens must be >= 1");
        require!(!self.prompt.is_empty(), "prompt is empty");
        require!(
            self.prompt.iter().all(|&(_, r)| r != TokenRole::Generated),
            "prompt tokens cannot carry the generated role"
        );
        require!(
            self.prompt.len() + self.max_new_tokens - 1 <= cfg.max_seq_len,
            "prompt {} + {} new tokens exceeds max_seq_len {}",
            self.prompt.len(),
            self.max_new_tokens,
            cfg.max_seq_len
        );
        match self.strategy {
            Strategy::Greedy => {}
            Strategy::Nucleus { p, .. } => {
                require!(p > 0.0 && p <= 1.0, "top-p must lie in (0, 1], got {p}")
            }
            Strategy::Beam { width } => require!(width >= 1, "beam width must be >= 1"),
        }
        if let Some(policy) = &self.policy {
            policy.validate(self.visual_count())?;
        }
        if let Some(iv) = &self.intervention {
            iv.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub trace: Trace,
    pub flops: FlopsLedger,
    pub cache: SegmentedKVCache,
    /// Cumulative log-probability of `tokens` (beam search and forced runs).
    pub log_prob: Option<f64>,
}

/// Mutable per-stream decoding state; beams each own one.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub cache: SegmentedKVCache,
    pub policy: Option<Policy>,
    pub trace: Trace,
    pub flops: FlopsLedger,
    pub tokens: Vec<usize>,
    pub logits: Vec<f32>,
    pub step: usize,
}

fn header_for(
    request: &DecodeRequest,
    weights: &DecoderWeights,
    policy: Option<&Policy>,
) -> TraceHeader {
    TraceHeader::new(
        weights.config.num_layers,
        request.visual_count(),
        policy.map_or("absent", Policy::name),
    )
}

fn no_policy_decision(snapshot: &AttentionSnapshot) -> PruneDecision {
    PruneDecision::skip(0, snapshot.layers.first().map(|l| l.visual.len()))
}

/// Prefill and step-1 bookkeeping shared by every strategy.
fn start_stream(
    request: &DecodeRequest,
    weights: &DecoderWeights,
    telemetry: &mut Telemetry,
) -> Result<StreamState> {
    request.validate(&weights.config)?;
    let config = &weights.config;
    let mut policy = request
        .policy
        .as_ref()
        .map(|p| p.build(request.visual_count()))
        .transpose()?;
    let mut cache = weights.new_cache();

    let started = Instant::now();
    let (logits, snapshot) = prefill(
        weights,
        &mut cache,
        &request.prompt,
        request.intervention.as_ref(),
    )?;
    let decision = match policy.as_mut() {
        Some(p) => p.observe(&snapshot)?,
        None => no_policy_decision(&snapshot),
    };
    let elapsed = started.elapsed().as_secs_f64();

    let mut flops = FlopsLedger::default();
    let entry = flops_for_prefill(config, request.prompt.len())?;
    telemetry.record_step(&snapshot, &decision, None, entry.attention(), elapsed)?;
    flops.push(entry);
    Ok(StreamState {
        cache,
        policy,
        trace: telemetry.trace().clone(),
        flops,
        tokens: Vec::new(),
        logits,
        step: 1,
    })
}

/// Runs step `state.step + 1` for `token`, which must already be pushed
/// onto `state.tokens`. Returns the policy decision, already applied.
fn advance(
    state: &mut StreamState,
    request: &DecodeRequest,
    weights: &DecoderWeights,
    telemetry: &mut Telemetry,
    token: usize,
) -> Result<PruneDecision> {
    let step = state.step + 1;
    let position = request.prompt.len() + state.tokens.len() - 1;
    let started = Instant::now();
    let (logits, snapshot) = forward_step(
        weights,
        &mut state.cache,
        token,
        position,
        step,
        request.intervention.as_ref(),
    )?;
    let widths = state.cache.lengths();
    let decision = match state.policy.as_mut() {
        Some(p) => p.observe(&snapshot)?,
        None => no_policy_decision(&snapshot),
    };
    let receipt = if decision.trigger {
        let generated_before = state.cache.count(0, TokenRole::Generated);
        let receipt = state.cache.prune_all(step, &decision.keep)?;
        for layer in 0..state.cache.num_layers() {
            require!(
                state.cache.count(layer, TokenRole::Generated) == generated_before,
                "prune at step {step} removed generated tokens in layer {layer}"
            );
        }
        Some(receipt)
    } else {
        None
    };
    let elapsed = started.elapsed().as_secs_f64();

    let entry = flops_for_step(&weights.config, step, &widths)?;
    telemetry.record_step(
        &snapshot,
        &decision,
        receipt.as_ref(),
        entry.attention(),
        elapsed,
    )?;
    state.flops.push(entry);
    state.logits = logits;
    state.step = step;
    Ok(decision)
}

fn select(strategy: &Strategy, logits: &[f32], rng: &mut Option<RngState>) -> Result<usize> {
    match (strategy, rng) {
        (Strategy::Nucleus { p, .. }, Some(rng)) => sample_top_p(&softmax_row(logits)?, *p, rng),
        _ => Ok(argmax(logits)),
    }
}

/// Decodes `request`, streaming trace lines to `sink` if one is given.
pub fn decode_with_sink(
    request: &DecodeRequest,
    weights: &DecoderWeights,
    sink: Option<Box<dyn std::io::Write + Send>>,
) -> Result<DecodeOutput> {
    if let Strategy::Beam { width } = request.strategy {
        let out = beam_search(request, weights, width)?;
        if let Some(mut sink) = sink {
            out.trace.write_jsonl(&mut sink)?;
        }
        return Ok(out);
    }
    let preview = request
        .policy
        .as_ref()
        .map(|p| p.build(request.visual_count()))
        .transpose()?;
    let mut telemetry = Telemetry::new(header_for(request, weights, preview.as_ref()));
    if let Some(sink) = sink {
        telemetry = telemetry.with_sink(sink)?;
    }

    let mut state = start_stream(request, weights, &mut telemetry)?;
    let mut rng = match request.strategy {
        Strategy::Nucleus { seed, .. } => Some(RngState::new(seed)),
        _ => None,
    };
    loop {
        let token = select(&request.strategy, &state.logits, &mut rng)?;
        state.tokens.push(token);
        if state.tokens.len() >= request.max_new_tokens || request.stop_tokens.contains(&token) {
            break;
        }
        advance(&mut state, request, weights, &mut telemetry, token)?;
    }
    Ok(DecodeOutput {
        tokens: state.tokens,
        trace: telemetry.into_trace(),
        flops: state.flops,
        cache: state.cache,
        log_prob: None,
    })
}

pub fn decode(request: &DecodeRequest, weights: &DecoderWeights) -> Result<DecodeOutput> {
    decode_with_sink(request, weights, None)
}

/// Runs the stream over a given continuation instead of choosing tokens.
///
/// The policy still observes and prunes exactly as in a normal run, so the
/// returned cache is what any decoder reaching `tokens` must hold. The
/// final token is fed forward unless it would have ended generation (budget
/// reached or a stop token). `log_prob` scores `tokens`.
pub fn decode_forced(
    request: &DecodeRequest,
    weights: &DecoderWeights,
    tokens: &[usize],
) -> Result<DecodeOutput> {
    require!(!tokens.is_empty(), "forced continuation is empty");
    require!(
        tokens.len() <= request.max_new_tokens,
        "forced continuation of {} tokens exceeds max_new_tokens {}",
        tokens.len(),
        request.max_new_tokens
    );
    let policy = request
        .policy
        .as_ref()
        .map(|p| p.build(request.visual_count()))
        .transpose()?;
    let mut telemetry = Telemetry::new(header_for(request, weights, policy.as_ref()));
    let mut state = start_stream(request, weights, &mut telemetry)?;
    let mut log_prob = 0.0;
    for (i, &token) in tokens.iter().enumerate() {
        require!(
            token < weights.config.vocab_size,
            "forced token {token} outside vocab of {}",
            weights.config.vocab_size
        );
        log_prob += log_softmax(&state.logits)[token];
        state.tokens.push(token);
        let ends = tokens.len() >= request.max_new_tokens || request.stop_tokens.contains(&token);
        if i + 1 < tokens.len() || !ends {
            advance(&mut state, request, weights, &mut telemetry, token)?;
        }
    }
    Ok(DecodeOutput {
        tokens: state.tokens,
        trace: telemetry.into_trace(),
        flops: state.flops,
        cache: state.cache,
        log_prob: Some(log_prob),
    })
}

// ── Beam search ─────────────────────────────────────────────────────────────

/// One hypothesis of a beam search. Every beam owns deep copies of its
/// cache, policy state and trace.
#[derive(Debug, Clone)]
pub struct BeamState {
    pub stream: StreamState,
    pub log_prob: f64,
    pub finished: bool,
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Expands every live beam over the whole vocabulary and keeps the `width`
/// best continuations by cumulative log-probability. Ties go to the lower
/// parent index, then the lower token id. Finished beams compete with
/// their unchanged score.
pub fn beam_search_step(
    beams: Vec<BeamState>,
    width: usize,
    request: &DecodeRequest,
    weights: &DecoderWeights,
) -> Result<Vec<BeamState>> {
    require!(width >= 1, "beam width must be >= 1");
    let mut live_steps = beams.iter().filter(|b| !b.finished).map(|b| b.stream.step);
    if let Some(step) = live_steps.next() {
        require!(
            live_steps.all(|s| s == step),
            "live beams are not aligned on the same step"
        );
    }

    let mut candidates: Vec<(f64, usize, Option<usize>)> = Vec::new();
    for (b, beam) in beams.iter().enumerate() {
        if beam.finished {
            candidates.push((beam.log_prob, b, None));
            continue;
        }
        for (tok, lp) in log_softmax(&beam.stream.logits).into_iter().enumerate() {
            candidates.push((beam.log_prob + lp, b, Some(tok)));
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    candidates.truncate(width);

    let mut next = Vec::with_capacity(candidates.len());
    for (score, parent, token) in candidates {
        let mut child = beams[parent].clone();
        child.log_prob = score;
        if let Some(token) = token {
            child.stream.tokens.push(token);
            if child.stream.tokens.len() >= request.max_new_tokens
                || request.stop_tokens.contains(&token)
            {
                child.finished = true;
            } else {
                let trace = std::mem::replace(
                    &mut child.stream.trace,
                    Trace::new(TraceHeader::new(0, 0, "")),
                );
                let mut telemetry = Telemetry::from_trace(trace);
                advance(&mut child.stream, request, weights, &mut telemetry, token)?;
                child.stream.trace = telemetry.into_trace();
            }
        }
        next.push(child);
    }
    Ok(next)
}

/// Initial single-beam state after prefill.
pub fn beam_start(request: &DecodeRequest, weights: &DecoderWeights) -> Result<BeamState> {
    let policy = request
        .policy
        .as_ref()
        .map(|p| p.build(request.visual_count()))
        .transpose()?;
    let mut telemetry = Telemetry::new(header_for(request, weights, policy.as_ref()));
    let stream = start_stream(request, weights, &mut telemetry)?;
    Ok(BeamState {
        stream,
        log_prob: 0.0,
        finished: false,
    })
}

pub fn beam_search(
    request: &DecodeRequest,
    weights: &DecoderWeights,
    width: usize,
) -> Result<DecodeOutput> {
    let mut beams = vec![beam_start(request, weights)?];
    while beams.iter().any(|b| !b.finished) {
        beams = beam_search_step(beams, width, request, weights)?;
    }
    let best = beams
        .into_iter()
        .reduce(|best, b| if b.log_prob > best.log_prob { b } else { best })
        .expect("beam search keeps at least one beam");
    Ok(DecodeOutput {
        tokens: best.stream.tokens,
        trace: best.stream.trace,
        flops: best.stream.flops,
        cache: best.stream.cache,
        log_prob: Some(best.log_prob),
    })
}
