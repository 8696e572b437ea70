//! Run configuration: a TOML file plus `section.key=value` overrides.
//!
//! ```toml
//! [model]
//! seed = 7            # synthetic weights; or `path = "model.pkvw"`
//! num_layers = 4
//! num_heads = 4
//! head_dim = 16
//! vocab_size = 256
//! max_seq_len = 512
//!
//! [prompt]
//! text_tokens = 16
//! visual_tokens = 64
//! seed = 1
//!
//! [decode]
//! max_new_tokens = 64
//! strategy = "greedy"  # greedy | nucleus | beam
//!
//! [policy]
//! preset = "llava7b-like"   # implies policy = "adaptive", r = 0.4, t = 3
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Overrides are applied to the parsed table before it is interpreted, so a
//! flag always wins over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prunekv_core::decode::{DecodeRequest, Strategy};
use prunekv_core::kvcache::TokenRole;
use prunekv_core::model::DecoderConfig;
use prunekv_core::numerics::RngState;
use prunekv_core::policy::{
    AttentionIntervention, HistoryRefresh, InterventionMode, PolicyConfig, PolicyKind, Preset,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Weight file to load; synthetic weights from `seed` when absent.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Must equal `num_heads * head_dim` when given.
    pub hidden_dim: Option<usize>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            path: None,
            seed: 0,
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            hidden_dim: None,
            vocab_size: 256,
            max_seq_len: 512,
            rope_base: 10_000.0,
        }
    }
}

impl ModelSection {
    pub fn decoder_config(&self) -> DecoderConfig {
        let mut cfg = DecoderConfig::new(
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.vocab_size,
            self.max_seq_len,
        );
        cfg.rope_base = self.rope_base;
        if let Some(d) = self.hidden_dim {
            cfg.hidden_dim = d;
        }
        cfg
    }
}

/// Synthetic prompt: text tokens first, then the visual segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub text_tokens: usize,
    pub visual_tokens: usize,
    pub seed: u64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            text_tokens: 16,
            visual_tokens: 64,
            seed: 0,
        }
    }
}

/// Draws a reproducible prompt. Text ids come from the lower half of the
/// vocabulary, visual ids from the upper half.
pub fn synth_prompt(
    text: usize,
    visual: usize,
    vocab_size: usize,
    seed: u64,
) -> Vec<(usize, TokenRole)> {
    let mut rng = RngState::new(seed);
    let half = vocab_size / 2;
    let mut prompt: Vec<(usize, TokenRole)> = (0..text)
        .map(|_| (rng.below(half), TokenRole::PromptText))
        .collect();
    prompt.extend((0..visual).map(|_| (half + rng.below(vocab_size - half), TokenRole::Visual)));
    prompt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Greedy,
    Nucleus,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_new_tokens: usize,
    pub strategy: StrategyKind,
    pub top_p: f64,
    pub sample_seed: u64,
    pub beam_width: usize,
    pub stop_tokens: Vec<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            strategy: StrategyKind::Greedy,
            top_p: 0.9,
            sample_seed: 0,
            beam_width: 2,
            stop_tokens: Vec::new(),
        }
    }
}

impl DecodeSection {
    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::Greedy => Strategy::Greedy,
            StrategyKind::Nucleus => Strategy::Nucleus {
                p: self.top_p,
                seed: self.sample_seed,
            },
            StrategyKind::Beam => Strategy::Beam {
                width: self.beam_width,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct InterventionSection {
    /// Defaults to `amplify_visual` once the table is present.
    pub mode: InterventionMode,
    pub factor: f64,
    pub renormalize: bool,
    pub step: Option<usize>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            mode: InterventionMode::AmplifyVisual,
            factor: 2.0,
            renormalize: true,
            step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct PolicySection {
    /// Defaults to `adaptive` when a preset is named, `none` otherwise.
    pub policy: Option<PolicyKind>,
    pub preset: Option<Preset>,
    pub r: Option<f64>,
    pub t: Option<usize>,
    pub k: Option<usize>,
    pub seed: u64,
    pub history_refresh: HistoryRefresh,
    pub shared_indices: bool,
    pub intervention: Option<InterventionSection>,
}

impl PolicySection {
    /// Resolves presets and defaults; explicit `r`/`t` beat the preset.
    pub fn policy_config(&self) -> PolicyConfig {
        let base = PolicyConfig::default();
        let (r, t) = self.preset.map_or((base.r, base.t), Preset::r_t);
        let kind = self.policy.unwrap_or(if self.preset.is_some() {
            PolicyKind::Adaptive
        } else {
            PolicyKind::None
        });
        PolicyConfig {
            policy: kind,
            r: self.r.unwrap_or(r),
            t: self.t.unwrap_or(t),
            k: self.k.unwrap_or(base.k),
            seed: self.seed,
            history_refresh: self.history_refresh,
            shared_indices: self.shared_indices,
        }
    }

    pub fn intervention(&self) -> Option<AttentionIntervention> {
        self.intervention.as_ref().map(|iv| AttentionIntervention {
            mode: iv.mode,
            factor: iv.factor,
            renormalize: iv.renormalize,
            step: iv.step,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub prompt: PromptSection,
    pub decode: DecodeSection,
    pub policy: PolicySection,
    pub output: OutputSection,
}

/// Applies one `a.b.c=value` override to a TOML table. The value is read as
/// a TOML literal when it parses as one, and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            CliError::config(format!("override `{key}`: `{part}` is not a table"))
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn prompt_tokens(&self, vocab_size: usize) -> Vec<(usize, TokenRole)> {
        synth_prompt(
            self.prompt.text_tokens,
            self.prompt.visual_tokens,
            vocab_size,
            self.prompt.seed,
        )
    }

    pub fn request(&self, vocab_size: usize) -> DecodeRequest {
        let kind = self.policy.policy_config();
        DecodeRequest {
            prompt: self.prompt_tokens(vocab_size),
            max_new_tokens: self.decode.max_new_tokens,
            strategy: self.decode.strategy(),
            policy: Some(kind),
            stop_tokens: self.decode.stop_tokens.clone(),
            intervention: self.policy.intervention(),
        }
    }

    /// Checks everything that does not need the weights themselves.
    /// With a weight file, pass the file's config as `model`.
    pub fn validate_against(&self, model: &DecoderConfig) -> Result<()> {
        model.validate().map_err(invalid)?;
        require_cfg(model.vocab_size >= 2, "vocab_size must be >= 2")?;
        require_cfg(
            self.prompt.text_tokens + self.prompt.visual_tokens >= 1,
            "prompt needs at least one token",
        )?;
        for &s in &self.decode.stop_tokens {
            require_cfg(
                s < model.vocab_size,
                &format!("stop token {s} outside vocab of {}", model.vocab_size),
            )?;
        }
        let policy = self.policy.policy_config();
        if policy.policy == PolicyKind::Adaptive {
            require_cfg(policy.t >= 1, "adaptive policy needs a prune budget t >= 1")?;
        }
        self.request(model.vocab_size)
            .validate(model)
            .map_err(invalid)
    }

    /// Validates a synthetic-model config before any weights exist.
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.model.hidden_dim {
            let expect = self.model.num_heads * self.model.head_dim;
            require_cfg(
                d == expect,
                &format!("hidden_dim {d} != num_heads * head_dim = {expect}"),
            )?;
        }
        self.validate_against(&self.model.decoder_config())
    }
}

fn invalid(e: prunekv_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn require_cfg(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.policy.policy_config().policy, PolicyKind::None);
    }

    #[test]
    fn preset_implies_adaptive_and_overrides_win() {
        let text = "[policy]\npreset = \"qwenvl-like\"\n";
        let cfg = RunConfig::from_toml_str(text, &[]).unwrap();
        let p = cfg.policy.policy_config();
        assert_eq!((p.policy, p.r, p.t), (PolicyKind::Adaptive, 0.9, 4));
        let cfg = RunConfig::from_toml_str(text, &["policy.t=2".into()]).unwrap();
        assert_eq!(cfg.policy.policy_config().t, 2);
        let cfg =
            RunConfig::from_toml_str(text, &["policy.history-refresh=post-prune-step".into()])
                .unwrap();
        assert_eq!(cfg.policy.history_refresh, HistoryRefresh::PostPruneStep);
    }

    #[test]
    fn bad_values_rejected() {
        let bad = [
            "policy.policy=adaptive policy.t=0",
            "policy.policy=adaptive policy.r=1.0",
            "policy.policy=fixed_topk policy.k=64",
            "policy.policy=bottom_k policy.k=0",
            "model.hidden_dim=60",
            "decode.max_new_tokens=1000",
            "decode.strategy=nucleus decode.top_p=0.0",
            "decode.stop_tokens=[999]",
            "policy.intervention.factor=-1.0",
        ];
        for case in bad {
            let overrides: Vec<String> = case.split(' ').map(String::from).collect();
            let cfg = RunConfig::from_toml_str("", &overrides).unwrap();
            assert!(
                matches!(cfg.validate(), Err(CliError::Config(_))),
                "accepted {case}"
            );
        }
        assert!(RunConfig::from_toml_str("[model]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn prompt_ranges_and_determinism() {
        let p = synth_prompt(5, 7, 64, 3);
        assert_eq!(p, synth_prompt(5, 7, 64, 3));
        assert!(p[..5]
            .iter()
            .all(|&(t, r)| t < 32 && r == TokenRole::PromptText));
        assert!(p[5..]
            .iter()
            .all(|&(t, r)| (32..64).contains(&t) && r == TokenRole::Visual));
    }

    #[test]
    fn string_overrides_fall_back_to_strings() {
        let cfg = RunConfig::from_toml_str("", &["output.dir=/tmp/x y".into()]).unwrap();
        assert_eq!(cfg.output.dir, PathBuf::from("/tmp/x y"));
    }
}
