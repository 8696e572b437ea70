//! CHAIR hallucination scoring, FLOPs accounting and latency statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, require, Result};
use crate::model::DecoderConfig;
use crate::telemetry::Trace;

// ── CHAIR ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Num(u64),
    Str(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Num(n) => write!(f, "{n}"),
            ImageId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub id: ImageId,
    pub objects: Vec<String>,
}

/// Annotation file: ground-truth objects per image plus a synonym map from
/// surface word to canonical object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotation>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub id: ImageId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: ImageId,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub hallucinated_mentions: usize,
    pub total_mentions: usize,
    pub hallucinated_captions: usize,
    pub total_captions: usize,
    pub per_image: Vec<ImageScore>,
}

/// Surface-word lookup built from an [`AnnotationSet`].
///
/// Canonical labels match themselves. Surface forms are single words;
/// matching is case-insensitive on alphanumeric word boundaries, which makes
/// scores independent of word order and casing.
struct Vocabulary {
    lookup: HashMap<String, String>,
}

impl Vocabulary {
    fn new(ann: &AnnotationSet) -> Result<Self> {
        let mut lookup = HashMap::new();
        let check_word = |w: &str| -> Result<()> {
            require!(
                !w.is_empty() && w.chars().all(char::is_alphanumeric),
                "object vocabulary entry {w:?} must be a single alphanumeric word"
            );
            Ok(())
        };
        for (surface, canonical) in &ann.synonyms {
            require!(
                canonical == &canonical.to_lowercase(),
                "canonical label {canonical:?} must be lowercase"
            );
            check_word(surface)?;
            check_word(canonical)?;
            let key = surface.to_lowercase();
            if let Some(prev) = lookup.insert(key.clone(), canonical.clone()) {
                require!(
                    &prev == canonical,
                    "surface form {key:?} maps to both {prev:?} and {canonical:?}"
                );
            }
        }
        let canonicals: BTreeSet<String> = ann.synonyms.values().cloned().collect();
        for c in canonicals {
            lookup.entry(c.clone()).or_insert(c);
        }
        for img in &ann.images {
            for obj in &img.objects {
                let key = obj.to_lowercase();
                check_word(&key)?;
                lookup.entry(key.clone()).or_insert(key);
            }
        }
        Ok(Self { lookup })
    }

    fn canonical(&self, word: &str) -> Option<&String> {
        self.lookup.get(&word.to_lowercase())
    }

    fn mentions(&self, text: &str) -> BTreeSet<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .filter_map(|w| self.canonical(w).cloned())
            .collect()
    }
}

/// CHAIR_S and CHAIR_I over a caption corpus.
///
/// Mentions are deduplicated per caption. CHAIR_I is the corpus ratio of
/// hallucinated to mentioned objects (0 when nothing is mentioned); CHAIR_S
/// is the fraction of captions with at least one hallucinated object.
pub fn chair_score(captions: &[Caption], annotations: &AnnotationSet) -> Result<ChairReport> {
    let vocab = Vocabulary::new(annotations)?;
    let mut truth: HashMap<&ImageId, BTreeSet<String>> = HashMap::new();
    for img in &annotations.images {
        let objs = img
            .objects
            .iter()
            .map(|o| {
                vocab
                    .canonical(o)
                    .cloned()
                    .unwrap_or_else(|| o.to_lowercase())
            })
            .collect();
        require!(
            truth.insert(&img.id, objs).is_none(),
            "duplicate annotation for image {}",
            img.id
        );
    }

    let mut per_image = Vec::with_capacity(captions.len());
    let (mut hall_mentions, mut total_mentions, mut hall_captions) = (0, 0, 0);
    for cap in captions {
        let Some(gt) = truth.get(&cap.id) else {
            contract!("caption for image {} has no annotation", cap.id);
        };
        let mentioned = vocab.mentions(&cap.text);
        let hallucinated: Vec<String> = mentioned
            .iter()
            .filter(|o| !gt.contains(*o))
            .cloned()
            .collect();
        total_mentions += mentioned.len();
        hall_mentions += hallucinated.len();
        if !hallucinated.is_empty() {
            hall_captions += 1;
        }
        per_image.push(ImageScore {
            id: cap.id.clone(),
            mentioned: mentioned.into_iter().collect(),
            hallucinated,
        });
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(ChairReport {
        chair_s: ratio(hall_captions, captions.len()),
        chair_i: ratio(hall_mentions, total_mentions),
        hallucinated_mentions: hall_mentions,
        total_mentions,
        hallucinated_captions: hall_captions,
        total_captions: captions.len(),
        per_image,
    })
}

// ── FLOPs ───────────────────────────────────────────────────────────────────

/// Exact FLOP counts of one decoding step (one multiply-add = 2 FLOPs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub step: usize,
    /// `q · Kᵀ`: `2 · heads · d_k · width` per layer.
    pub attention_score: u64,
    /// `A · V`: `2 · heads · d_k · width` per layer.
    pub attention_value: u64,
    /// Q, K, V and output projections: `8 · d²` per layer per token.
    pub projection: u64,
    /// Up and down MLP projections: `2 · 2 · d · 4d = 16 · d²` per layer per token.
    pub mlp: u64,
    /// Unembedding of the final hidden state: `2 · d · vocab`.
    pub unembed: u64,
    pub total: u64,
    pub cache_widths: Vec<usize>,
}

impl FlopsEntry {
    pub fn attention(&self) -> u64 {
        self.attention_score + self.attention_value
    }
}

/// FLOPs of one single-token step attending over `cache_widths` per layer.
pub fn flops_for_step(
    config: &DecoderConfig,
    step: usize,
    cache_widths: &[usize],
) -> Result<FlopsEntry> {
    require!(
        cache_widths.len() == config.num_layers,
        "{} cache widths for {} layers",
        cache_widths.len(),
        config.num_layers
    );
    require!(
        cache_widths.iter().all(|&w| w >= 1),
        "cache widths must be >= 1"
    );
    let per_width = 2 * (config.num_heads * config.head_dim) as u64;
    let width_sum: u64 = cache_widths.iter().map(|&w| w as u64).sum();
    let d = config.hidden_dim as u64;
    let layers = config.num_layers as u64;
    let attention_score = per_width * width_sum;
    let attention_value = per_width * width_sum;
    let projection = 8 * d * d * layers;
    let mlp = 16 * d * d * layers;
    let unembed = 2 * d * config.vocab_size as u64;
    Ok(FlopsEntry {
        step,
        attention_score,
        attention_value,
        projection,
        mlp,
        unembed,
        total: attention_score + attention_value + projection + mlp + unembed,
        cache_widths: cache_widths.to_vec(),
    })
}

/// FLOPs of a causal prefill over `prompt_len` tokens; row `i` attends over
/// `i + 1` keys. The prompt is unembedded only at its last row.
pub fn flops_for_prefill(config: &DecoderConfig, prompt_len: usize) -> Result<FlopsEntry> {
    require!(prompt_len >= 1, "prefill over an empty prompt");
    let mut acc = flops_for_step(config, 1, &vec![1; config.num_layers])?;
    for i in 1..prompt_len {
        let row = flops_for_step(config, 1, &vec![i + 1; config.num_layers])?;
        acc.attention_score += row.attention_score;
        acc.attention_value += row.attention_value;
        acc.projection += row.projection;
        acc.mlp += row.mlp;
    }
    acc.total = acc.attention_score + acc.attention_value + acc.projection + acc.mlp + acc.unembed;
    acc.cache_widths = vec![prompt_len; config.num_layers];
    Ok(acc)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub entries: Vec<FlopsEntry>,
}

impl FlopsLedger {
    pub fn push(&mut self, entry: FlopsEntry) {
        self.entries.push(entry);
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.total).sum()
    }

    pub fn total_attention(&self) -> u64 {
        self.entries.iter().map(FlopsEntry::attention).sum()
    }

    /// Attention FLOPs of the decode steps only (prefill excluded).
    pub fn decode_attention(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.step > 1)
            .map(FlopsEntry::attention)
            .sum()
    }
}

// ── Latency ─────────────────────────────────────────────────────────────────

/// Decode steps dropped from the front of a run before timing.
pub const LATENCY_WARMUP: usize = 3;
/// Minimum number of timed steady-state tokens.
pub const LATENCY_MIN_TOKENS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
}

/// Summary statistics of raw per-token samples (seconds).
pub fn latency_stats(samples: &[f64]) -> Result<LatencyStats> {
    require!(!samples.is_empty(), "no latency samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    // nearest-rank percentile
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(LatencyStats {
        count: n,
        mean_s: sorted.iter().sum::<f64>() / n as f64,
        median_s: median,
        p95_s: sorted[rank - 1],
    })
}

/// Per-token forward latency of a decoding trace, excluding the prefill
/// step and the first [`LATENCY_WARMUP`] decode steps.
pub fn measure_latency(trace: &Trace) -> Result<LatencyStats> {
    let decode: Vec<f64> = trace
        .events
        .iter()
        .filter(|e| e.step > 1)
        .map(|e| e.wall_time_s)
        .collect();
    require!(
        decode.len() > LATENCY_WARMUP,
        "run of {} decode steps is shorter than the {LATENCY_WARMUP}-step warmup window",
        decode.len()
    );
    let steady = &decode[LATENCY_WARMUP..];
    require!(
        steady.len() >= LATENCY_MIN_TOKENS,
        "latency needs >= {LATENCY_MIN_TOKENS} steady-state tokens, got {}",
        steady.len()
    );
    latency_stats(steady)
}
