//! Per-step attention telemetry and trace serialization.
//!
//! A trace is a JSONL stream: one header line naming the schema version and
//! the run's pruning parameters, then one line per decoding step. The
//! [`Telemetry`] recorder keeps the events in memory and, if a sink is
//! attached, writes and flushes each line as soon as the step completes.
//!
//! Event fields (schema version 1):
//!
//! | field | meaning |
//! |---|---|
//! | `step` | decoding step `m`; the last prefill token is step 1 |
//! | `avg_visual` | per-layer mean visual attention, `null` if no visual tokens |
//! | `visual_counts` | per-layer visual tokens attended at this step |
//! | `visual_attention` | optional per-layer head-averaged visual attention vectors |
//! | `vote_count` | size of the layer-vote set, when a vote was taken |
//! | `prune_triggered` | whether the policy pruned after this step |
//! | `prune_cnt` | prunes performed so far, including this step |
//! | `remaining_visual` | visual tokens per layer after this step's decision |
//! | `retained` | per-layer surviving visual ordinals when pruned |
//! | `attention_flops` | attention FLOPs of this step |
//! | `cumulative_attention_flops` | running total including this step |
//! | `wall_time_s` | wall time of forward, policy and prune |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{require, Error, Result};
use crate::kvcache::PruneReceipt;
use crate::model::AttentionSnapshot;
use crate::policy::PruneDecision;

pub const TRACE_SCHEMA: &str = "prunekv-trace";
pub const TRACE_VERSION: u32 = 1;

/// Historical per-layer average visual attention (the vote baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHistory {
    pub values: Vec<f64>,
    pub refreshed_at: usize,
}

impl AttentionHistory {
    pub fn new(values: Vec<f64>, step: usize) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            require!(
                (0.0..=1.0).contains(v),
                "history value {v} for layer {i} outside [0, 1]"
            );
        }
        Ok(Self {
            values,
            refreshed_at: step,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.values.len()
    }
}

/// Replaces the history wholesale with `values` observed at `step`.
pub fn refresh_history(
    history: &AttentionHistory,
    values: &[f64],
    step: usize,
) -> Result<AttentionHistory> {
    require!(
        values.len() == history.values.len(),
        "refresh with {} layers, history has {}",
        values.len(),
        history.values.len()
    );
    AttentionHistory::new(values.to_vec(), step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub num_layers: usize,
    pub visual_initial: usize,
    pub policy: String,
}

impl TraceHeader {
    pub fn new(num_layers: usize, visual_initial: usize, policy: impl Into<String>) -> Self {
        Self {
            schema: TRACE_SCHEMA.to_string(),
            version: TRACE_VERSION,
            num_layers,
            visual_initial,
            policy: policy.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub avg_visual: Vec<Option<f64>>,
    pub visual_counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_attention: Option<Vec<Vec<f64>>>,
    pub vote_count: Option<usize>,
    pub prune_triggered: bool,
    pub prune_cnt: usize,
    pub remaining_visual: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<Vec<Vec<usize>>>,
    pub attention_flops: u64,
    pub cumulative_attention_flops: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Event(TraceEvent),
}

/// An in-memory trace: header plus step events.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
        }
    }

    pub fn prune_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.prune_triggered)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        write_line(&mut out, &TraceLine::Header(self.header.clone()))?;
        for e in &self.events {
            write_line(&mut out, &TraceLine::Event(e.clone()))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a JSONL trace, rejecting unknown schemas or versions.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = match lines.next() {
            Some(line) => match serde_json::from_str::<TraceLine>(&line?)? {
                TraceLine::Header(h) => h,
                TraceLine::Event(_) => {
                    return Err(Error::Format("trace does not start with a header".into()))
                }
            },
            None => return Err(Error::Format("empty trace".into())),
        };
        if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
            return Err(Error::Format(format!(
                "unsupported trace schema {} v{} (expected {TRACE_SCHEMA} v{TRACE_VERSION})",
                header.schema, header.version
            )));
        }
        let mut events: Vec<TraceEvent> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TraceLine>(&line)? {
                TraceLine::Event(e) => events.push(e),
                TraceLine::Header(_) => {
                    return Err(Error::Format("second header inside trace".into()))
                }
            }
        }
        Ok(Self { header, events })
    }

    /// One CSV row per (step, layer).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "step,layer,avg_visual,visual_count,prune_triggered,remaining_visual"
        )?;
        for e in &self.events {
            for (layer, (avg, count)) in e.avg_visual.iter().zip(&e.visual_counts).enumerate() {
                let avg = avg.map(|v| format!("{v:e}")).unwrap_or_default();
                writeln!(
                    out,
                    "{},{layer},{avg},{count},{},{}",
                    e.step, e.prune_triggered, e.remaining_visual
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn write_line<W: Write>(out: &mut W, line: &TraceLine) -> Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Per-step recorder with an optional line-flushed JSONL sink.
pub struct Telemetry {
    trace: Trace,
    keep_vectors: bool,
    sink: Option<Box<dyn Write + Send>>,
}

impl Telemetry {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            trace: Trace::new(header),
            keep_vectors: true,
            sink: None,
        }
    }

    /// Continues recording onto an existing trace.
    pub fn from_trace(trace: Trace) -> Self {
        Self {
            trace,
            keep_vectors: true,
            sink: None,
        }
    }

    /// Whether events carry full visual attention vectors (default on).
    pub fn with_vectors(mut self, keep: bool) -> Self {
        self.keep_vectors = keep;
        self
    }

    /// Attaches a sink; the header is written immediately.
    pub fn with_sink(mut self, mut sink: Box<dyn Write + Send>) -> Result<Self> {
        write_line(&mut sink, &TraceLine::Header(self.trace.header.clone()))?;
        sink.flush()?;
        self.sink = Some(sink);
        Ok(self)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn last_step(&self) -> Option<usize> {
        self.trace.events.last().map(|e| e.step)
    }

    pub fn record_step(
        &mut self,
        snapshot: &AttentionSnapshot,
        decision: &PruneDecision,
        receipt: Option<&PruneReceipt>,
        attention_flops: u64,
        wall_time_s: f64,
    ) -> Result<&TraceEvent> {
        if let Some(last) = self.last_step() {
            require!(
                snapshot.step > last,
                "trace step {} recorded after step {last}",
                snapshot.step
            );
        }
        let cumulative = self
            .trace
            .events
            .last()
            .map_or(0, |e| e.cumulative_attention_flops)
            + attention_flops;
        let visual_counts: Vec<usize> = snapshot.layers.iter().map(|l| l.visual.len()).collect();
        let event = TraceEvent {
            step: snapshot.step,
            avg_visual: snapshot.avg_visual(),
            remaining_visual: decision
                .remaining
                .unwrap_or_else(|| visual_counts.first().copied().unwrap_or(0)),
            visual_counts,
            visual_attention: self
                .keep_vectors
                .then(|| snapshot.layers.iter().map(|l| l.visual.clone()).collect()),
            vote_count: decision.vote_count,
            prune_triggered: decision.trigger,
            prune_cnt: decision.prune_cnt,
            retained: receipt.map(|r| r.layers.iter().map(|l| l.retained.clone()).collect()),
            attention_flops,
            cumulative_attention_flops: cumulative,
            wall_time_s,
        };
        if let Some(sink) = self.sink.as_mut() {
            write_line(sink, &TraceLine::Event(event.clone()))?;
            sink.flush()?;
        }
        self.trace.events.push(event);
        Ok(self.trace.events.last().expect("just pushed"))
    }
}

/// Event tagged with the index of the trace it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedEvent {
    pub source: usize,
    pub event: TraceEvent,
}

/// Interleaves several traces by step, ties in source order.
pub fn merge_traces(traces: &[Trace]) -> Vec<MergedEvent> {
    let mut out: Vec<MergedEvent> = traces
        .iter()
        .enumerate()
        .flat_map(|(source, t)| {
            t.events.iter().map(move |e| MergedEvent {
                source,
                event: e.clone(),
            })
        })
        .collect();
    out.sort_by_key(|m| (m.event.step, m.source));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerAttention;

    fn snap(step: usize, visual: Vec<f64>) -> AttentionSnapshot {
        let rest = 1.0 - visual.iter().sum::<f64>();
        AttentionSnapshot {
            step,
            layers: vec![LayerAttention {
                text: vec![rest],
                visual,
                generated: vec![],
            }],
        }
    }

    fn quiet() -> PruneDecision {
        PruneDecision::skip(0, Some(3))
    }

    #[test]
    fn first_event_and_ordering() {
        let mut t = Telemetry::new(TraceHeader::new(1, 3, "none"));
        let e = t
            .record_step(&snap(1, vec![0.1, 0.2, 0.1]), &quiet(), None, 10, 0.0)
            .unwrap();
        assert_eq!(e.step, 1);
        assert!(!e.prune_triggered);
        assert!((e.avg_visual[0].unwrap() - 0.4 / 3.0).abs() < 1e-15);
        assert!(t
            .record_step(&snap(1, vec![0.1, 0.1, 0.1]), &quiet(), None, 10, 0.0)
            .is_err());
        let e = t
            .record_step(&snap(2, vec![0.1, 0.1, 0.1]), &quiet(), None, 12, 0.0)
            .unwrap();
        assert_eq!(e.cumulative_attention_flops, 22);
    }

    #[test]
    fn jsonl_round_trip_and_sink() {
        let buf = std::sync::Arc::new(std::sync::Mutex::new(Vec::<u8>::new()));
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().write(b)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut t = Telemetry::new(TraceHeader::new(1, 3, "adaptive"))
            .with_sink(Box::new(Shared(buf.clone())))
            .unwrap();
        t.record_step(&snap(1, vec![0.1, 0.2, 0.3]), &quiet(), None, 5, 0.25)
            .unwrap();
        let receipt = PruneReceipt {
            step: 2,
            layers: vec![crate::kvcache::LayerPrune {
                retained: vec![2],
                removed: 2,
            }],
        };
        let d = PruneDecision {
            trigger: true,
            keep: vec![vec![2]],
            vote_count: Some(0),
            prune_cnt: 1,
            remaining: Some(1),
        };
        t.record_step(&snap(2, vec![0.05, 0.1, 0.7]), &d, Some(&receipt), 5, 1e-7)
            .unwrap();

        let streamed = buf.lock().unwrap().clone();
        let parsed = Trace::read_jsonl(streamed.as_slice()).unwrap();
        assert_eq!(&parsed, t.trace());

        let mut again = Vec::new();
        t.trace().write_jsonl(&mut again).unwrap();
        assert_eq!(again, streamed);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut buf = Vec::new();
        let mut tr = Trace::new(TraceHeader::new(1, 3, "none"));
        tr.header.version = 99;
        tr.write_jsonl(&mut buf).unwrap();
        assert!(matches!(
            Trace::read_jsonl(buf.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(Trace::read_jsonl(&b""[..]).is_err());
    }

    #[test]
    fn refresh_cases() {
        let h = AttentionHistory::new(vec![0.05, 0.02], 1).unwrap();
        let same = refresh_history(&h, &[0.05, 0.02], 1).unwrap();
        assert_eq!(same, h);
        let later = refresh_history(&h, &[0.031, 0.017], 7).unwrap();
        assert_eq!(later.values, vec![0.031, 0.017]);
        assert_eq!(later.refreshed_at, 7);
        assert!(refresh_history(&h, &[0.1], 3).is_err());
    }

    #[test]
    fn csv_has_row_per_step_and_layer() {
        let mut t = Telemetry::new(TraceHeader::new(1, 3, "none"));
        t.record_step(&snap(1, vec![0.1, 0.2, 0.1]), &quiet(), None, 1, 0.0)
            .unwrap();
        t.record_step(&snap(2, vec![0.1, 0.2, 0.1]), &quiet(), None, 1, 0.0)
            .unwrap();
        let mut buf = Vec::new();
        t.trace().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn merge_orders_by_step_then_source() {
        let mut a = Telemetry::new(TraceHeader::new(1, 3, "none"));
        let mut b = Telemetry::new(TraceHeader::new(1, 3, "none"));
        for m in 1..=3 {
            a.record_step(&snap(m, vec![0.1; 3]), &quiet(), None, 1, 0.0)
                .unwrap();
        }
        b.record_step(&snap(2, vec![0.1; 3]), &quiet(), None, 1, 0.0)
            .unwrap();
        let merged = merge_traces(&[a.into_trace(), b.into_trace()]);
        let order: Vec<(usize, usize)> = merged.iter().map(|m| (m.event.step, m.source)).collect();
        assert_eq!(order, vec![(1, 0), (2, 0), (2, 1), (3, 0)]);
    }
}
