//! Segmented key/value cache.
//!
//! Each layer stores one key row and one value row per cached token
//! (heads concatenated, width `d`), plus the token's role tag and its
//! original sequence position. Visual rows additionally remember their
//! ordinal in the original visual segment, so that after any number of
//! prunes the survivors can be traced back to the prompt.
//!
//! Pruning physically removes rows. Keys were rotated at append time, so
//! survivors keep their original positional phase and nothing needs to be
//! re-rotated.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{require, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    PromptText,
    Visual,
    Generated,
}

/// Number of visual tokens kept by one prune: `max(1, floor(r * n))`.
///
/// A 1e-9 slack absorbs binary representation error of decimal ratios
/// (`0.7 * 30` must floor to 21, not 20).
pub fn retained_count(n: usize, r: f64) -> Result<usize> {
    require!(n >= 1, "retained_count needs n >= 1");
    require!(r > 0.0 && r < 1.0, "keep ratio must lie in (0, 1), got {r}");
    let k = (r * n as f64 + 1e-9).floor() as usize;
    Ok(k.clamp(1, n))
}

/// The visual-count schedule `n_0, n_1, ..., n_steps` under repeated pruning.
pub fn retained_schedule(n0: usize, r: f64, steps: usize) -> Result<Vec<usize>> {
    let mut out = vec![n0];
    let mut n = n0;
    for _ in 0..steps {
        n = retained_count(n, r)?;
        out.push(n);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    keys: Matrix,
    values: Matrix,
    roles: Vec<TokenRole>,
    positions: Vec<usize>,
    /// Original visual ordinal of each visual row, in row order.
    visual_ids: Vec<usize>,
    visual_appended: usize,
}

impl LayerCache {
    fn new(width: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, width),
            values: Matrix::zeros(0, width),
            roles: Vec::new(),
            positions: Vec::new(),
            visual_ids: Vec::new(),
            visual_appended: 0,
        }
    }
}

/// One layer's share of a prune.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrune {
    /// Surviving visual tokens as indices into the original visual ordering.
    pub retained: Vec<usize>,
    pub removed: usize,
}

/// Audit record of one prune across all layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReceipt {
    pub step: usize,
    pub layers: Vec<LayerPrune>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKVCache {
    width: usize,
    layers: Vec<LayerCache>,
}

impl SegmentedKVCache {
    pub fn new(num_layers: usize, width: usize) -> Self {
        Self {
            width,
            layers: (0..num_layers).map(|_| LayerCache::new(width)).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerCache> {
        require!(
            layer < self.layers.len(),
            "layer {layer} out of range ({} layers)",
            self.layers.len()
        );
        Ok(&mut self.layers[layer])
    }

    pub fn append(
        &mut self,
        layer: usize,
        key_row: &[f32],
        value_row: &[f32],
        role: TokenRole,
        original_position: usize,
    ) -> Result<()> {
        let width = self.width;
        require!(
            key_row.len() == width && value_row.len() == width,
            "cache row width mismatch: key {} value {} expected {width}",
            key_row.len(),
            value_row.len()
        );
        let lc = self.layer_mut(layer)?;
        lc.keys.push_row(key_row)?;
        lc.values.push_row(value_row)?;
        lc.roles.push(role);
        lc.positions.push(original_position);
        if role == TokenRole::Visual {
            lc.visual_ids.push(lc.visual_appended);
            lc.visual_appended += 1;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.roles.is_empty())
    }

    /// Number of cached tokens in `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, |l| l.roles.len())
    }

    /// Cached-token count of every layer (the attention width).
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.roles.len()).collect()
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.layers[layer].values
    }

    pub fn roles(&self, layer: usize) -> &[TokenRole] {
        &self.layers[layer].roles
    }

    pub fn positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer].positions
    }

    /// Row indices of `layer` carrying `role`, in cache order.
    pub fn segment(&self, layer: usize, role: TokenRole) -> Vec<usize> {
        self.layers[layer]
            .roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, layer: usize, role: TokenRole) -> usize {
        self.layers[layer]
            .roles
            .iter()
            .filter(|&&r| r == role)
            .count()
    }

    pub fn visual_count(&self, layer: usize) -> usize {
        self.layers[layer].visual_ids.len()
    }

    /// Visual tokens written during prefill (`N_v`).
    pub fn visual_initial(&self) -> usize {
        self.layers.first().map_or(0, |l| l.visual_appended)
    }

    /// Surviving visual tokens of `layer` as original visual ordinals.
    pub fn retained_visual(&self, layer: usize) -> &[usize] {
        &self.layers[layer].visual_ids
    }

    /// Drops every visual row of `layer` not listed in `keep_indices`.
    ///
    /// `keep_indices` index the *current* visual segment and must be
    /// strictly increasing.
    pub fn prune_visual(&mut self, layer: usize, keep_indices: &[usize]) -> Result<LayerPrune> {
        let lc = self.layer_mut(layer)?;
        let n = lc.visual_ids.len();
        for (i, &k) in keep_indices.iter().enumerate() {
            require!(
                k < n,
                "keep index {k} out of range for {n} visual tokens in layer {layer}"
            );
            if i > 0 {
                let prev = keep_indices[i - 1];
                require!(prev != k, "duplicate keep index {k} in layer {layer}");
                require!(
                    prev < k,
                    "keep indices must be strictly increasing ({prev} before {k})"
                );
            }
        }

        let mut keep_mask = vec![false; n];
        for &k in keep_indices {
            keep_mask[k] = true;
        }
        // Row-level mask: non-visual rows always survive.
        let mut row_keep = Vec::with_capacity(lc.roles.len());
        let mut visual_ordinal = 0;
        for &role in &lc.roles {
            if role == TokenRole::Visual {
                row_keep.push(keep_mask[visual_ordinal]);
                visual_ordinal += 1;
            } else {
                row_keep.push(true);
            }
        }

        lc.keys.retain_rows(|i| row_keep[i]);
        lc.values.retain_rows(|i| row_keep[i]);
        let mut idx = 0;
        lc.roles.retain(|_| {
            idx += 1;
            row_keep[idx - 1]
        });
        idx = 0;
        lc.positions.retain(|_| {
            idx += 1;
            row_keep[idx - 1]
        });
        idx = 0;
        lc.visual_ids.retain(|_| {
            idx += 1;
            keep_mask[idx - 1]
        });

        Ok(LayerPrune {
            retained: lc.visual_ids.clone(),
            removed: n - keep_indices.len(),
        })
    }

    /// Applies one keep list per layer and returns the combined receipt.
    pub fn prune_all(&mut self, step: usize, keep: &[Vec<usize>]) -> Result<PruneReceipt> {
        require!(
            keep.len() == self.layers.len(),
            "got {} keep lists for {} layers",
            keep.len(),
            self.layers.len()
        );
        let layers = keep
            .iter()
            .enumerate()
            .map(|(layer, k)| self.prune_visual(layer, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(PruneReceipt { step, layers })
    }

    /// Raw little-endian bytes of every layer's keys and values, for
    /// byte-identity comparisons.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for lc in &self.layers {
            for v in lc.keys.data().iter().chain(lc.values.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for (&r, &p) in lc.roles.iter().zip(&lc.positions) {
                out.push(r as u8);
                out.extend_from_slice(&(p as u64).to_le_bytes());
            }
        }
        out
    }

    /// Debug dump, one JSON line per layer.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (layer, lc) in self.layers.iter().enumerate() {
            let mut runs: Vec<RoleRun> = Vec::new();
            for &role in &lc.roles {
                match runs.last_mut() {
                    Some(run) if run.role == role => run.count += 1,
                    _ => runs.push(RoleRun { role, count: 1 }),
                }
            }
            let line = CacheDumpLine {
                layer,
                role_runs: runs,
                original_positions: lc.positions.clone(),
                retained_visual: lc.visual_ids.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRun {
    pub role: TokenRole,
    pub count: usize,
}

/// One line of [`SegmentedKVCache::dump_jsonl`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDumpLine {
    pub layer: usize,
    pub role_runs: Vec<RoleRun>,
    pub original_positions: Vec<usize>,
    pub retained_visual: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f32, w: usize) -> Vec<f32> {
        vec![v; w]
    }

    /// 2 text, 5 visual, 1 generated; key rows carry their position.
    fn sample_cache() -> SegmentedKVCache {
        let mut c = SegmentedKVCache::new(2, 3);
        let roles = [
            TokenRole::PromptText,
            TokenRole::PromptText,
            TokenRole::Visual,
            TokenRole::Visual,
            TokenRole::Visual,
            TokenRole::Visual,
            TokenRole::Visual,
            TokenRole::Generated,
        ];
        for layer in 0..2 {
            for (pos, &role) in roles.iter().enumerate() {
                c.append(
                    layer,
                    &row(pos as f32, 3),
                    &row(-(pos as f32), 3),
                    role,
                    pos,
                )
                .unwrap();
            }
        }
        c
    }

    #[test]
    fn retained_count_cases() {
        assert_eq!(retained_count(100, 0.4).unwrap(), 40);
        assert_eq!(retained_count(3, 0.4).unwrap(), 1);
        assert_eq!(retained_count(1, 0.4).unwrap(), 1);
        assert_eq!(retained_count(30, 0.7).unwrap(), 21);
        assert!(retained_count(10, 0.0).is_err());
        assert!(retained_count(10, 1.0).is_err());
        assert!(retained_count(0, 0.5).is_err());
        assert_eq!(retained_schedule(64, 0.4, 3).unwrap(), vec![64, 25, 10, 4]);
    }

    #[test]
    fn append_bookkeeping() {
        let mut c = SegmentedKVCache::new(1, 2);
        c.append(0, &[1.0, 2.0], &[3.0, 4.0], TokenRole::Visual, 0)
            .unwrap();
        assert_eq!(c.len(0), 1);
        assert_eq!(c.roles(0), &[TokenRole::Visual]);
        for p in 1..5 {
            c.append(0, &[0.0; 2], &[0.0; 2], TokenRole::Generated, p * 10)
                .unwrap();
        }
        assert_eq!(c.positions(0), &[0, 10, 20, 30, 40]);
        assert!(c
            .append(0, &[0.0; 3], &[0.0; 2], TokenRole::Generated, 9)
            .is_err());
        assert!(c
            .append(4, &[0.0; 2], &[0.0; 2], TokenRole::Generated, 9)
            .is_err());
    }

    #[test]
    fn segments_partition_interleaved_roles() {
        let mut c = SegmentedKVCache::new(1, 1);
        let roles = [
            TokenRole::PromptText,
            TokenRole::Visual,
            TokenRole::PromptText,
            TokenRole::Visual,
            TokenRole::Generated,
            TokenRole::PromptText,
        ];
        for (i, &r) in roles.iter().enumerate() {
            c.append(0, &[i as f32], &[0.0], r, i).unwrap();
        }
        let mut all: Vec<usize> = [
            TokenRole::PromptText,
            TokenRole::Visual,
            TokenRole::Generated,
        ]
        .iter()
        .flat_map(|&r| c.segment(0, r))
        .collect();
        all.sort();
        assert_eq!(all, (0..roles.len()).collect::<Vec<_>>());
        assert_eq!(c.segment(0, TokenRole::Visual), vec![1, 3]);
    }

    #[test]
    fn identity_prune_is_bit_identical() {
        let mut c = sample_cache();
        let before = c.clone();
        c.prune_visual(0, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(c, before);
        assert_eq!(c.content_bytes(), before.content_bytes());
    }

    #[test]
    fn direct_selection_keeps_order_and_positions() {
        let mut c = sample_cache();
        let receipt = c.prune_visual(0, &[1, 3]).unwrap();
        assert_eq!(receipt.retained, vec![1, 3]);
        assert_eq!(receipt.removed, 3);
        // visual v1 sits at position 3, v3 at position 5
        assert_eq!(c.positions(0), &[0, 1, 3, 5, 7]);
        let vis = c.segment(0, TokenRole::Visual);
        assert_eq!(c.keys(0).row(vis[0]), &[3.0; 3]);
        assert_eq!(c.keys(0).row(vis[1]), &[5.0; 3]);
        assert_eq!(c.values(0).row(vis[1]), &[-5.0; 3]);
        // layer 1 untouched
        assert_eq!(c.visual_count(1), 5);
    }

    #[test]
    fn sequential_prunes_compose() {
        let mut c = sample_cache();
        c.prune_visual(0, &[0, 1, 2]).unwrap();
        let r = c.prune_visual(0, &[1]).unwrap();
        assert_eq!(r.retained, vec![1]);
        let vis = c.segment(0, TokenRole::Visual);
        assert_eq!(c.keys(0).row(vis[0]), &[3.0; 3]);
    }

    #[test]
    fn prune_errors() {
        let mut c = sample_cache();
        assert!(c.prune_visual(0, &[5]).is_err());
        assert!(c.prune_visual(0, &[1, 1]).is_err());
        assert!(c.prune_visual(0, &[2, 1]).is_err());
        assert!(c.prune_visual(9, &[0]).is_err());
        // failed prunes leave the cache alone
        assert_eq!(c, sample_cache());
    }

    #[test]
    fn text_and_generated_segments_survive_prunes() {
        let mut c = sample_cache();
        let text_before: Vec<Vec<f32>> = c
            .segment(0, TokenRole::PromptText)
            .iter()
            .chain(&c.segment(0, TokenRole::Generated))
            .map(|&i| c.keys(0).row(i).to_vec())
            .collect();
        c.prune_visual(0, &[4]).unwrap();
        let text_after: Vec<Vec<f32>> = c
            .segment(0, TokenRole::PromptText)
            .iter()
            .chain(&c.segment(0, TokenRole::Generated))
            .map(|&i| c.keys(0).row(i).to_vec())
            .collect();
        assert_eq!(text_before, text_after);
    }

    #[test]
    fn dump_has_one_line_per_layer() {
        let mut c = sample_cache();
        c.prune_visual(1, &[0, 4]).unwrap();
        let mut buf = Vec::new();
        c.dump_jsonl(&mut buf).unwrap();
        let lines: Vec<CacheDumpLine> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].retained_visual, vec![0, 4]);
        assert_eq!(
            lines[1].role_runs,
            vec![
                RoleRun {
                    role: TokenRole::PromptText,
                    count: 2
                },
                RoleRun {
                    role: TokenRole::Visual,
                    count: 2
                },
                RoleRun {
                    role: TokenRole::Generated,
                    count: 1
                },
            ]
        );
    }
}
