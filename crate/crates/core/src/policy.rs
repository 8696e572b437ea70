//! Visual-token pruning policies.
//!
//! Every policy observes one [`AttentionSnapshot`] per decoding step and
//! answers with a [`PruneDecision`]. Policies never touch logits, so they
//! compose with any token-selection strategy.
//!
//! * [`Policy::None`] never prunes.
//! * [`Policy::FixedTopK`], [`Policy::RandomKeep`] and [`Policy::BottomK`]
//!   record the step-1 visual attention and prune exactly once, at step 2,
//!   keeping `k` tokens.
//! * [`Policy::Adaptive`] runs the layer-vote controller in [`PruneState`]:
//!   layer `i` votes when its current mean visual attention drops below
//!   `sqrt(r)` times its historical mean; a prune fires when at least half
//!   of the layers vote (or unconditionally at step 2), keeping the top
//!   `max(1, floor(r*n))` visual tokens, at most `t` times per run.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{contract, require, Result};
use crate::kvcache::{retained_count, TokenRole};
use crate::model::AttentionSnapshot;
use crate::numerics::RngState;
use crate::telemetry::{refresh_history, AttentionHistory};

// ── Selection ───────────────────────────────────────────────────────────────

fn check_k(len: usize, k: usize) -> Result<()> {
    require!(k > 0, "selection size k must be positive");
    require!(k <= len, "selection size {k} exceeds {len} candidates");
    Ok(())
}

/// Indices of the `k` largest values in ascending index order; ties favour
/// the lower index.
pub fn topk_select(values: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(values.len(), k)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Indices of the `k` smallest values in ascending index order; ties favour
/// the lower index.
pub fn bottomk_select(values: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(values.len(), k)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// `k` distinct indices out of `0..n`, uniformly at random, ascending.
pub fn random_select(n: usize, k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    check_k(n, k)?;
    let mut keep = sample(rng.inner_mut(), n, k).into_vec();
    keep.sort_unstable();
    Ok(keep)
}

// ── Layer vote ──────────────────────────────────────────────────────────────

/// Layers whose current mean visual attention is strictly below
/// `sqrt(r)` times their historical mean.
pub fn layer_vote(
    current: &[Option<f64>],
    history: &AttentionHistory,
    r: f64,
) -> Result<Vec<usize>> {
    require!(
        current.len() == history.num_layers(),
        "vote over {} layers but history has {}",
        current.len(),
        history.num_layers()
    );
    let threshold = r.sqrt();
    let mut votes = Vec::new();
    for (i, (cur, &hist)) in current.iter().zip(&history.values).enumerate() {
        let Some(cur) = cur else {
            contract!("layer {i} has no visual tokens; mean visual attention undefined");
        };
        if *cur < threshold * hist {
            votes.push(i);
        }
    }
    Ok(votes)
}

fn defined_avgs(snapshot: &AttentionSnapshot) -> Result<Vec<f64>> {
    snapshot
        .avg_visual()
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(v) => Ok(v),
            None => contract!("layer {i} has no visual tokens at step {}", snapshot.step),
        })
        .collect()
}

// ── Decisions ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub trigger: bool,
    /// Per-layer keep lists into the current visual segment; empty unless
    /// `trigger`.
    pub keep: Vec<Vec<usize>>,
    /// Size of the vote set, when a vote was taken this step.
    pub vote_count: Option<usize>,
    /// Prunes performed so far, including this one.
    pub prune_cnt: usize,
    /// Visual tokens per layer once this decision is applied.
    pub remaining: Option<usize>,
}

impl PruneDecision {
    pub fn skip(prune_cnt: usize, remaining: Option<usize>) -> Self {
        Self {
            trigger: false,
            keep: Vec::new(),
            vote_count: None,
            prune_cnt,
            remaining,
        }
    }
}

/// When the vote baseline is refreshed after a prune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryRefresh {
    /// Baseline becomes the averages of the step before the triggering step.
    #[default]
    PrevStep,
    /// Baseline becomes the averages of the first step after the prune.
    PostPruneStep,
}

/// Outcome of one adaptive control step, before any indices are chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub trigger: bool,
    pub votes: Option<Vec<usize>>,
    /// History values the vote compared against.
    pub baseline: Option<Vec<f64>>,
    /// Keep count for this prune (the schedule value before the update).
    pub keep_count: Option<usize>,
}

/// Runtime state of the adaptive controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    r: f64,
    t: usize,
    prune_cnt: usize,
    n: usize,
    history: Option<AttentionHistory>,
    prev_avgs: Option<Vec<f64>>,
    refresh: HistoryRefresh,
    pending_refresh: bool,
    shared_indices: bool,
}

impl PruneState {
    pub fn new(r: f64, t: usize, visual_initial: usize) -> Result<Self> {
        require!(
            r > 0.0 && r < 1.0,
            "keep ratio r must lie in (0, 1), got {r}"
        );
        require!(t >= 1, "prune budget t must be >= 1");
        require!(
            visual_initial >= 1,
            "adaptive pruning needs at least one visual token"
        );
        Ok(Self {
            r,
            t,
            prune_cnt: 0,
            n: visual_initial,
            history: None,
            prev_avgs: None,
            refresh: HistoryRefresh::PrevStep,
            pending_refresh: false,
            shared_indices: false,
        })
    }

    pub fn with_refresh(mut self, refresh: HistoryRefresh) -> Self {
        self.refresh = refresh;
        self
    }

    /// Use one index set for all layers, chosen from the layer-averaged
    /// visual attention.
    pub fn with_shared_indices(mut self, shared: bool) -> Self {
        self.shared_indices = shared;
        self
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn prune_cnt(&self) -> usize {
        self.prune_cnt
    }

    pub fn remaining(&self) -> usize {
        self.n
    }

    pub fn history(&self) -> Option<&AttentionHistory> {
        self.history.as_ref()
    }

    /// Step 1: the baseline starts at the step-1 averages.
    pub fn initialize(&mut self, avgs: &[f64]) -> Result<()> {
        self.history = Some(AttentionHistory::new(avgs.to_vec(), 1)?);
        self.prev_avgs = Some(avgs.to_vec());
        Ok(())
    }

    /// Trigger logic on per-layer averages alone.
    ///
    /// Trace replay drives this directly; [`PruneState::adaptive_step`]
    /// adds index selection on top.
    pub fn control(&mut self, avgs: &[f64], m: usize) -> Result<ControlOutcome> {
        require!(m >= 2, "adaptive control starts at step 2, got {m}");
        let Some(history) = self.history.as_ref() else {
            contract!("adaptive control used before step-1 initialization");
        };
        require!(
            avgs.len() == history.num_layers(),
            "{} layer averages for {} layers",
            avgs.len(),
            history.num_layers()
        );
        if self.pending_refresh {
            self.history = Some(refresh_history(history, avgs, m)?);
            self.pending_refresh = false;
        }
        let prev = self.prev_avgs.replace(avgs.to_vec()).unwrap_or_default();

        if self.prune_cnt == self.t {
            return Ok(ControlOutcome {
                trigger: false,
                votes: None,
                baseline: None,
                keep_count: None,
            });
        }
        let history = self.history.as_ref().expect("initialized above");
        let current: Vec<Option<f64>> = avgs.iter().copied().map(Some).collect();
        let votes = layer_vote(&current, history, self.r)?;
        let num_layers = avgs.len();
        let trigger = 2 * votes.len() >= num_layers || m == 2;
        let baseline = Some(history.values.clone());
        if !trigger {
            return Ok(ControlOutcome {
                trigger,
                votes: Some(votes),
                baseline,
                keep_count: None,
            });
        }

        let keep_count = retained_count(self.n, self.r)?;
        match self.refresh {
            HistoryRefresh::PrevStep => {
                self.history = Some(refresh_history(history, &prev, m - 1)?);
            }
            HistoryRefresh::PostPruneStep => self.pending_refresh = true,
        }
        self.prune_cnt += 1;
        self.n = keep_count;
        Ok(ControlOutcome {
            trigger,
            votes: Some(votes),
            baseline,
            keep_count: Some(keep_count),
        })
    }

    /// One decoding step `m >= 2` of the adaptive policy.
    pub fn adaptive_step(
        &mut self,
        snapshot: &AttentionSnapshot,
        m: usize,
    ) -> Result<PruneDecision> {
        let avgs = defined_avgs(snapshot)?;
        for (i, l) in snapshot.layers.iter().enumerate() {
            require!(
                l.visual.len() == self.n,
                "layer {i} has {} visual tokens, schedule expects {}",
                l.visual.len(),
                self.n
            );
        }
        let outcome = self.control(&avgs, m)?;
        let vote_count = outcome.votes.as_ref().map(Vec::len);
        let Some(k) = outcome.keep_count else {
            let mut d = PruneDecision::skip(self.prune_cnt, Some(self.n));
            d.vote_count = vote_count;
            return Ok(d);
        };
        let keep = if self.shared_indices {
            let shared = topk_select(&layer_mean(snapshot), k)?;
            vec![shared; snapshot.layers.len()]
        } else {
            snapshot
                .layers
                .iter()
                .map(|l| topk_select(&l.visual, k))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(PruneDecision {
            trigger: true,
            keep,
            vote_count,
            prune_cnt: self.prune_cnt,
            remaining: Some(self.n),
        })
    }
}

/// Elementwise mean of the per-layer visual attention vectors.
fn layer_mean(snapshot: &AttentionSnapshot) -> Vec<f64> {
    let n = snapshot.layers.first().map_or(0, |l| l.visual.len());
    let layers = snapshot.layers.len() as f64;
    (0..n)
        .map(|j| snapshot.layers.iter().map(|l| l.visual[j]).sum::<f64>() / layers)
        .collect()
}

// ── One-shot policies ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneShotKind {
    TopK,
    RandomKeep,
    BottomK,
}

/// Records step-1 visual attention and prunes once at step 2.
#[derive(Debug, Clone)]
pub struct OneShot {
    kind: OneShotKind,
    k: usize,
    visual_initial: usize,
    recorded: Option<Vec<Vec<f64>>>,
    fired: bool,
    rng: RngState,
}

impl OneShot {
    pub fn new(kind: OneShotKind, k: usize, visual_initial: usize, seed: u64) -> Result<Self> {
        require!(
            k > 0 && k < visual_initial,
            "one-shot keep count must satisfy 0 < k < N_v ({visual_initial}), got {k}"
        );
        Ok(Self {
            kind,
            k,
            visual_initial,
            recorded: None,
            fired: false,
            rng: RngState::new(seed),
        })
    }

    pub fn kind(&self) -> OneShotKind {
        self.kind
    }

    pub fn record(&mut self, snapshot: &AttentionSnapshot) -> Result<()> {
        for (i, l) in snapshot.layers.iter().enumerate() {
            require!(
                l.visual.len() == self.visual_initial,
                "layer {i} has {} visual tokens, expected {}",
                l.visual.len(),
                self.visual_initial
            );
        }
        self.recorded = Some(snapshot.layers.iter().map(|l| l.visual.clone()).collect());
        Ok(())
    }

    pub fn step(&mut self, m: usize) -> Result<PruneDecision> {
        require!(m >= 2, "one-shot policies act from step 2, got {m}");
        if self.fired || m != 2 {
            let remaining = if self.fired {
                self.k
            } else {
                self.visual_initial
            };
            return Ok(PruneDecision::skip(
                usize::from(self.fired),
                Some(remaining),
            ));
        }
        let Some(recorded) = self.recorded.as_ref() else {
            contract!("one-shot policy reached step 2 without step-1 attention");
        };
        let keep = recorded
            .iter()
            .map(|visual| match self.kind {
                OneShotKind::TopK => topk_select(visual, self.k),
                OneShotKind::BottomK => bottomk_select(visual, self.k),
                OneShotKind::RandomKeep => random_select(visual.len(), self.k, &mut self.rng),
            })
            .collect::<Result<Vec<_>>>()?;
        self.fired = true;
        Ok(PruneDecision {
            trigger: true,
            keep,
            vote_count: None,
            prune_cnt: 1,
            remaining: Some(self.k),
        })
    }
}

/// Fixed top-k one-shot decision at step `m`, given step-1 attention.
pub fn fixed_topk_step(policy: &mut OneShot, m: usize) -> Result<PruneDecision> {
    policy.step(m)
}

// ── Policy enum ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Policy {
    None,
    FixedTopK(OneShot),
    RandomKeep(OneShot),
    BottomK(OneShot),
    Adaptive(PruneState),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::FixedTopK(_) => "fixed_topk",
            Policy::RandomKeep(_) => "random_keep",
            Policy::BottomK(_) => "bottom_k",
            Policy::Adaptive(_) => "adaptive",
        }
    }

    /// Consumes the snapshot of step `snapshot.step`.
    pub fn observe(&mut self, snapshot: &AttentionSnapshot) -> Result<PruneDecision> {
        let m = snapshot.step;
        require!(m >= 1, "decoding steps start at 1");
        let visual = snapshot.layers.first().map_or(0, |l| l.visual.len());
        match self {
            Policy::None => Ok(PruneDecision::skip(0, Some(visual))),
            Policy::Adaptive(state) => {
                if m == 1 {
                    state.initialize(&defined_avgs(snapshot)?)?;
                    Ok(PruneDecision::skip(0, Some(state.remaining())))
                } else {
                    state.adaptive_step(snapshot, m)
                }
            }
            Policy::FixedTopK(p) | Policy::RandomKeep(p) | Policy::BottomK(p) => {
                if m == 1 {
                    p.record(snapshot)?;
                    Ok(PruneDecision::skip(0, Some(visual)))
                } else {
                    p.step(m)
                }
            }
        }
    }
}

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    None,
    FixedTopk,
    Adaptive,
    RandomKeep,
    BottomK,
}

impl PolicyKind {
    /// Name used in trace headers.
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::FixedTopk => "fixed_topk",
            PolicyKind::Adaptive => "adaptive",
            PolicyKind::RandomKeep => "random_keep",
            PolicyKind::BottomK => "bottom_k",
        }
    }
}

/// Named `(r, t)` settings for the adaptive policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "llava7b-like")]
    Llava7bLike,
    #[serde(rename = "instructblip-like")]
    InstructblipLike,
    #[serde(rename = "qwenvl-like")]
    QwenvlLike,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::Llava7bLike,
        Preset::InstructblipLike,
        Preset::QwenvlLike,
    ];

    pub fn r_t(self) -> (f64, usize) {
        match self {
            Preset::Llava7bLike => (0.4, 3),
            Preset::InstructblipLike => (0.7, 2),
            Preset::QwenvlLike => (0.9, 4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Llava7bLike => "llava7b-like",
            Preset::InstructblipLike => "instructblip-like",
            Preset::QwenvlLike => "qwenvl-like",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Policy block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub r: f64,
    pub t: usize,
    pub k: usize,
    pub seed: u64,
    pub history_refresh: HistoryRefresh,
    pub shared_indices: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let (r, t) = Preset::Llava7bLike.r_t();
        Self {
            policy: PolicyKind::None,
            r,
            t,
            k: 32,
            seed: 0,
            history_refresh: HistoryRefresh::PrevStep,
            shared_indices: false,
        }
    }
}

impl PolicyConfig {
    pub fn adaptive(r: f64, t: usize) -> Self {
        Self {
            policy: PolicyKind::Adaptive,
            r,
            t,
            ..Self::default()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        let (r, t) = preset.r_t();
        Self::adaptive(r, t)
    }

    pub fn one_shot(policy: PolicyKind, k: usize, seed: u64) -> Self {
        Self {
            policy,
            k,
            seed,
            ..Self::default()
        }
    }

    /// Checks the block against a prompt with `visual_initial` visual tokens.
    pub fn validate(&self, visual_initial: usize) -> Result<()> {
        match self.policy {
            PolicyKind::None => {}
            PolicyKind::Adaptive => {
                require!(
                    self.r > 0.0 && self.r < 1.0,
                    "r must lie in (0, 1), got {}",
                    self.r
                );
                require!(self.t >= 1, "adaptive policy needs t >= 1");
                require!(visual_initial >= 1, "adaptive policy needs visual tokens");
            }
            PolicyKind::FixedTopk | PolicyKind::RandomKeep | PolicyKind::BottomK => {
                require!(
                    self.k > 0 && self.k < visual_initial,
                    "k must satisfy 0 < k < N_v ({visual_initial}), got {}",
                    self.k
                );
            }
        }
        Ok(())
    }

    pub fn build(&self, visual_initial: usize) -> Result<Policy> {
        self.validate(visual_initial)?;
        Ok(match self.policy {
            PolicyKind::None => Policy::None,
            PolicyKind::Adaptive => Policy::Adaptive(
                PruneState::new(self.r, self.t, visual_initial)?
                    .with_refresh(self.history_refresh)
                    .with_shared_indices(self.shared_indices),
            ),
            PolicyKind::FixedTopk => Policy::FixedTopK(OneShot::new(
                OneShotKind::TopK,
                self.k,
                visual_initial,
                self.seed,
            )?),
            PolicyKind::RandomKeep => Policy::RandomKeep(OneShot::new(
                OneShotKind::RandomKeep,
                self.k,
                visual_initial,
                self.seed,
            )?),
            PolicyKind::BottomK => Policy::BottomK(OneShot::new(
                OneShotKind::BottomK,
                self.k,
                visual_initial,
                self.seed,
            )?),
        })
    }
}

// ── Attention intervention ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    #[default]
    None,
    AmplifyVisual,
}

/// Scales visual-token attention of the newest token's post-softmax rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionIntervention {
    pub mode: InterventionMode,
    pub factor: f64,
    /// Renormalize the row to sum 1 after scaling.
    pub renormalize: bool,
    /// Only intervene at this decoding step; every step when absent.
    pub step: Option<usize>,
}

impl Default for AttentionIntervention {
    fn default() -> Self {
        Self {
            mode: InterventionMode::None,
            factor: 1.0,
            renormalize: true,
            step: None,
        }
    }
}

impl AttentionIntervention {
    pub fn amplify(factor: f64) -> Self {
        Self {
            mode: InterventionMode::AmplifyVisual,
            factor,
            ..Self::default()
        }
    }

    pub fn at_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub fn validate(&self) -> Result<()> {
        require!(
            self.factor.is_finite() && self.factor > 0.0,
            "intervention factor must be finite and positive, got {}",
            self.factor
        );
        Ok(())
    }

    pub fn applies_at(&self, step: usize) -> bool {
        self.mode != InterventionMode::None && self.step.is_none_or(|s| s == step)
    }
}

/// Applies `intervention` to one post-softmax attention row in place.
pub fn apply_intervention(
    row: &mut [f64],
    roles: &[TokenRole],
    intervention: &AttentionIntervention,
) -> Result<()> {
    intervention.validate()?;
    require!(
        row.len() == roles.len(),
        "attention row of {} entries for {} role tags",
        row.len(),
        roles.len()
    );
    // unit scaling leaves the row untouched, renormalization included
    if intervention.mode == InterventionMode::None || intervention.factor == 1.0 {
        return Ok(());
    }
    for (p, role) in row.iter_mut().zip(roles) {
        if *role == TokenRole::Visual {
            *p *= intervention.factor;
        }
    }
    if intervention.renormalize {
        let sum: f64 = row.iter().sum();
        require!(sum > 0.0, "attention row has zero mass after scaling");
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(())
}
