//! The five subcommands, as library functions returning their reports.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prunekv_core::decode::{decode_with_sink, DecodeOutput, DecodeRequest};
use prunekv_core::metrics::{
    chair_score, latency_stats, measure_latency, AnnotationSet, Caption, ChairReport, FlopsLedger,
    LatencyStats, LATENCY_WARMUP,
};
use prunekv_core::model::{
    init_weights, read_weights, write_weights, DecoderConfig, DecoderWeights,
};
use prunekv_core::policy::{PolicyConfig, PolicyKind, PruneState};
use prunekv_core::telemetry::{Trace, TraceEvent};

use crate::config::RunConfig;
use crate::error::{CliError, CoreContext, Result};

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::io(path, e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Loads or generates the weights named by `cfg`, validating the config
/// against the model before returning.
pub fn load_model(cfg: &RunConfig) -> Result<DecoderWeights> {
    match &cfg.model.path {
        Some(path) => {
            let weights =
                read_weights(open(path)?).context(|| format!("reading {}", path.display()))?;
            cfg.validate_against(&weights.config)?;
            Ok(weights)
        }
        None => {
            cfg.validate()?;
            init_weights(&cfg.model.decoder_config(), cfg.model.seed)
                .context(|| "generating weights".into())
        }
    }
}

// ── genmodel ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenModelReport {
    pub path: PathBuf,
    pub seed: u64,
    pub config: DecoderConfig,
    pub bytes: u64,
}

pub fn cmd_genmodel(cfg: &RunConfig, out_path: &Path) -> Result<GenModelReport> {
    if let Some(d) = cfg.model.hidden_dim {
        let expect = cfg.model.num_heads * cfg.model.head_dim;
        if d != expect {
            return Err(CliError::config(format!(
                "hidden_dim {d} != num_heads * head_dim = {expect}"
            )));
        }
    }
    let config = cfg.model.decoder_config();
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let weights = init_weights(&config, cfg.model.seed).context(|| "generating weights".into())?;
    let mut out = create(out_path)?;
    write_weights(&mut out, &weights).context(|| format!("writing {}", out_path.display()))?;
    out.flush().map_err(|e| CliError::io(out_path, e))?;
    let bytes = fs::metadata(out_path)
        .map_err(|e| CliError::io(out_path, e))?
        .len();
    Ok(GenModelReport {
        path: out_path.to_path_buf(),
        seed: cfg.model.seed,
        config,
        bytes,
    })
}

// ── run ─────────────────────────────────────────────────────────────────────

/// Generated tokens as written to `tokens.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub tokens: Vec<usize>,
    pub log_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub tokens: Vec<usize>,
    pub prune_steps: Vec<usize>,
    pub remaining_visual: usize,
    pub total_flops: u64,
    pub attention_flops: u64,
    pub out_dir: PathBuf,
}

pub const TOKENS_FILE: &str = "tokens.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CSV_FILE: &str = "attention.csv";
pub const FLOPS_FILE: &str = "flops.json";
pub const CACHE_FILE: &str = "cache.jsonl";

/// Decodes per `cfg`, streaming the trace to disk as it goes.
pub fn execute(
    cfg: &RunConfig,
    weights: &DecoderWeights,
    trace_path: Option<&Path>,
) -> Result<DecodeOutput> {
    let request = cfg.request(weights.config.vocab_size);
    let sink: Option<Box<dyn Write + Send>> = match trace_path {
        Some(p) => Some(Box::new(create(p)?)),
        None => None,
    };
    decode_with_sink(&request, weights, sink).context(|| "decoding".into())
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    let weights = load_model(cfg)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;

    let out = execute(cfg, &weights, Some(&dir.join(TRACE_FILE)))?;
    write_json(
        &dir.join(TOKENS_FILE),
        &TokenFile {
            tokens: out.tokens.clone(),
            log_prob: out.log_prob,
        },
    )?;
    let csv = dir.join(CSV_FILE);
    out.trace
        .write_csv(create(&csv)?)
        .context(|| format!("writing {}", csv.display()))?;
    write_json(&dir.join(FLOPS_FILE), &out.flops)?;
    let dump = dir.join(CACHE_FILE);
    out.cache
        .dump_jsonl(create(&dump)?)
        .context(|| format!("writing {}", dump.display()))?;

    Ok(RunSummary {
        policy: out.trace.header.policy.clone(),
        prune_steps: out.trace.prune_events().map(|e| e.step).collect(),
        remaining_visual: out.trace.events.last().map_or(0, |e| e.remaining_visual),
        total_flops: out.flops.total(),
        attention_flops: out.flops.total_attention(),
        tokens: out.tokens,
        out_dir: dir.clone(),
    })
}

// ── replay ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub step: usize,
    pub recorded_trigger: bool,
    pub replayed_trigger: bool,
    pub recorded_votes: Option<usize>,
    /// Layers that voted in the replay.
    pub replayed_votes: Option<Vec<usize>>,
    /// Per-layer vote thresholds `sqrt(r) * history`.
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub field: String,
    pub recorded: String,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub policy: String,
    pub steps: usize,
    pub recorded_triggers: Vec<usize>,
    pub replayed_triggers: Vec<usize>,
    /// First step where the replay disagrees with the trace.
    pub divergence: Option<Divergence>,
    pub per_step: Vec<ReplayStep>,
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    Trace::read_jsonl(open(path)?).context(|| format!("reading trace {}", path.display()))
}

fn format_error(msg: String) -> CliError {
    CliError::Core {
        context: "replaying trace".into(),
        source: prunekv_core::Error::Format(msg),
    }
}

fn event_avgs(e: &TraceEvent) -> Result<Vec<f64>> {
    e.avg_visual
        .iter()
        .map(|v| v.ok_or_else(|| format_error(format!("step {} lacks a visual average", e.step))))
        .collect()
}

/// Re-runs the trigger logic of `policy` over a recorded trace without
/// touching the model.
pub fn replay_trace(trace: &Trace, policy: &PolicyConfig) -> Result<ReplayReport> {
    let name = policy.policy.name().to_string();
    if trace.header.policy != name {
        return Err(CliError::config(format!(
            "trace was recorded with policy `{}`, config says `{name}`",
            trace.header.policy
        )));
    }
    for (i, e) in trace.events.iter().enumerate() {
        if e.step != i + 1 {
            return Err(format_error(format!(
                "trace event {i} has step {}, expected {}",
                e.step,
                i + 1
            )));
        }
    }

    let mut state = match policy.policy {
        PolicyKind::Adaptive => Some(
            PruneState::new(policy.r, policy.t, trace.header.visual_initial)
                .map(|s| {
                    s.with_refresh(policy.history_refresh)
                        .with_shared_indices(policy.shared_indices)
                })
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
        _ => None,
    };
    let sqrt_r = policy.r.sqrt();

    let mut per_step = Vec::with_capacity(trace.events.len());
    let mut divergence: Option<Divergence> = None;
    for e in &trace.events {
        let m = e.step;
        let (trigger, votes, thresholds, remaining) = match (policy.policy, state.as_mut()) {
            (PolicyKind::Adaptive, Some(st)) => {
                let avgs = event_avgs(e)?;
                if m == 1 {
                    st.initialize(&avgs).context(|| "replay step 1".into())?;
                    (false, None, None, Some(st.remaining()))
                } else {
                    let out = st
                        .control(&avgs, m)
                        .context(|| format!("replay step {m}"))?;
                    let thresholds = out
                        .baseline
                        .map(|b| b.iter().map(|h| sqrt_r * h).collect::<Vec<f64>>());
                    (out.trigger, out.votes, thresholds, Some(st.remaining()))
                }
            }
            (PolicyKind::None, _) => (false, None, None, None),
            _ => (m == 2, None, None, None),
        };

        let mut check = |field: &str, recorded: String, replayed: String| {
            if divergence.is_none() && recorded != replayed {
                divergence = Some(Divergence {
                    step: m,
                    field: field.into(),
                    recorded,
                    replayed,
                });
            }
        };
        check(
            "prune_triggered",
            e.prune_triggered.to_string(),
            trigger.to_string(),
        );
        check(
            "vote_count",
            format!("{:?}", e.vote_count),
            format!("{:?}", votes.as_ref().map(Vec::len)),
        );
        if let Some(n) = remaining {
            check(
                "remaining_visual",
                e.remaining_visual.to_string(),
                n.to_string(),
            );
        }
        per_step.push(ReplayStep {
            step: m,
            recorded_trigger: e.prune_triggered,
            replayed_trigger: trigger,
            recorded_votes: e.vote_count,
            replayed_votes: votes,
            thresholds,
        });
    }

    Ok(ReplayReport {
        policy: name,
        steps: trace.events.len(),
        recorded_triggers: trace.prune_events().map(|e| e.step).collect(),
        replayed_triggers: per_step
            .iter()
            .filter(|s| s.replayed_trigger)
            .map(|s| s.step)
            .collect(),
        divergence,
        per_step,
    })
}

pub fn cmd_replay(trace_path: &Path, cfg: &RunConfig) -> Result<ReplayReport> {
    let trace = read_trace(trace_path)?;
    replay_trace(&trace, &cfg.policy.policy_config())
}

// ── eval-chair ──────────────────────────────────────────────────────────────

/// Captions come as a JSON array or as JSON lines of `{"id", "text"}`.
pub fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |e: serde_json::Error| CliError::Core {
        context: format!("parsing {}", path.display()),
        source: e.into(),
    };
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(parse_err)
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(parse_err))
            .collect()
    }
}

pub fn cmd_eval_chair(captions_path: &Path, annotations_path: &Path) -> Result<ChairReport> {
    let captions = read_captions(captions_path)?;
    let annotations: AnnotationSet =
        serde_json::from_reader(open(annotations_path)?).map_err(|e| CliError::Core {
            context: format!("parsing {}", annotations_path.display()),
            source: e.into(),
        })?;
    chair_score(&captions, &annotations).context(|| "scoring captions".into())
}

// ── bench ───────────────────────────────────────────────────────────────────

pub const MIN_REPETITIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub policy: String,
    pub tokens: usize,
    /// Pooled steady-state per-token latency over all repetitions.
    pub latency: LatencyStats,
    pub per_repetition_mean_s: Vec<f64>,
    pub total_flops: u64,
    pub attention_flops: u64,
    pub decode_attention_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub warmup_steps: usize,
    pub entries: Vec<BenchEntry>,
    /// Attention FLOPs of the last entry over the first (baseline) entry.
    pub attention_flops_ratio: Option<f64>,
    /// Mean latency of the last entry over the first.
    pub latency_ratio: Option<f64>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).context(|| "serializing bench report".into())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Core {
            context: "parsing bench report".into(),
            source: e.into(),
        })
    }
}

/// Times the configured policy against no pruning on the same workload.
///
/// Runs alternate between policies so slow drift in machine load hits both
/// equally; one untimed run per policy goes first.
pub fn bench_policies(
    cfg: &RunConfig,
    weights: &DecoderWeights,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(CliError::config(format!(
            "bench needs >= {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let configured = cfg.policy.policy_config();
    let mut policies = vec![PolicyConfig::default()];
    if configured.policy != PolicyKind::None {
        policies.push(configured);
    }
    let requests: Vec<DecodeRequest> = policies
        .iter()
        .map(|p| DecodeRequest {
            policy: Some(p.clone()),
            ..cfg.request(weights.config.vocab_size)
        })
        .collect();

    let run =
        |req: &DecodeRequest| decode_with_sink(req, weights, None).context(|| "bench run".into());
    for req in &requests {
        run(req)?;
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); requests.len()];
    let mut rep_means: Vec<Vec<f64>> = vec![Vec::new(); requests.len()];
    let mut ledgers: Vec<Option<(FlopsLedger, String, usize)>> = vec![None; requests.len()];
    for _ in 0..repetitions {
        for (i, req) in requests.iter().enumerate() {
            let out = run(req)?;
            let stats = measure_latency(&out.trace).context(|| "measuring latency".into())?;
            rep_means[i].push(stats.mean_s);
            samples[i].extend(
                out.trace
                    .events
                    .iter()
                    .filter(|e| e.step > 1)
                    .skip(LATENCY_WARMUP)
                    .map(|e| e.wall_time_s),
            );
            ledgers[i].get_or_insert((out.flops, out.trace.header.policy, out.tokens.len()));
        }
    }

    let mut entries = Vec::with_capacity(requests.len());
    for ((s, means), ledger) in samples.iter().zip(rep_means).zip(ledgers) {
        let (flops, policy, tokens) = ledger.expect("every policy ran at least once");
        entries.push(BenchEntry {
            policy,
            tokens,
            latency: latency_stats(s).context(|| "latency statistics".into())?,
            per_repetition_mean_s: means,
            total_flops: flops.total(),
            attention_flops: flops.total_attention(),
            decode_attention_flops: flops.decode_attention(),
        });
    }
    let (attention_flops_ratio, latency_ratio) = match (entries.first(), entries.last()) {
        (Some(a), Some(b)) if entries.len() > 1 => (
            Some(b.attention_flops as f64 / a.attention_flops as f64),
            Some(b.latency.mean_s / a.latency.mean_s),
        ),
        _ => (None, None),
    };
    Ok(BenchReport {
        repetitions,
        warmup_steps: LATENCY_WARMUP,
        entries,
        attention_flops_ratio,
        latency_ratio,
    })
}

pub const BENCH_FILE: &str = "bench.json";

/// Benchmarks, writes `bench.json` into the output directory, and checks
/// that the file parses back to the same report.
pub fn cmd_bench(cfg: &RunConfig, repetitions: usize) -> Result<BenchReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(CliError::config(format!(
            "bench needs >= {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let weights = load_model(cfg)?;
    let report = bench_policies(cfg, &weights, repetitions)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(BENCH_FILE);
    let text = report.to_json()?;
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    let back = BenchReport::from_json(&text)?;
    if back != report {
        return Err(format_error("bench report does not round-trip".into()));
    }
    Ok(report)
}
