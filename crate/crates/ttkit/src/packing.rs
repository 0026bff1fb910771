//! Tree-to-batch compilation.
//!
//! [`dfs_flatten`] serializes a trajectory tree into one flattened sequence in
//! which every shared prefix appears exactly once. Three side tables make a
//! single forward/backward over that sequence equivalent to training on every
//! root-to-leaf path independently:
//!
//! * a segment table describing the tree structure in flat coordinates, from
//!   which the path-restricted attention mask is rebuilt in O(T) storage;
//! * per-token position ids that restore each token's position within its own
//!   path rather than its offset in the flattened sequence;
//! * per-token loss weights making the flattened gradient exactly the sum
//!   (or per-path mean) of per-path gradients, by linearity of
//!   differentiation.
//!
//! The dense mask ([`build_attention_mask`]) exists for oracle checks; real
//! consumers rebuild it from the segment table.

use crate::trajectory::{
    tree_stats, validate_tree, Origin, Role, TokenEvent, TrajectoryTree, TurnSpan, Violation,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// How the per-path baseline normalizes its loss; decides the loss weights.
///
/// `PathSum` reproduces a baseline that sums token losses over each path;
/// `PathMean` reproduces one that averages token losses within each path and
/// then over the `P` paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormalizationMode {
    #[default]
    PathSum,
    PathMean,
}

/// One tree node in flat coordinates. Segments tile `[0, T)` in DFS order,
/// so a parent's interval always precedes its children's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub segment_id: u64,
    pub parent_segment_id: Option<u64>,
    pub flat_start: usize,
    pub flat_end: usize,
    /// Position id of the segment's first token within its path.
    pub path_position_start: u64,
}

/// One turn of one trajectory, in segment-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedTurn {
    pub turn_index: u64,
    pub segment_id: u64,
    pub local_start: usize,
    pub local_end: usize,
    pub role: Role,
}

/// One trajectory of the batch: its path-end segment plus its turn table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub end_segment_id: u64,
    pub turns: Vec<PackedTurn>,
}

/// DFS-flattened training batch. Immutable after construction; identical
/// input trees produce byte-identical batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub mode: NormalizationMode,
    pub token_ids: Vec<u32>,
    pub origins: Vec<Origin>,
    pub position_ids: Vec<u32>,
    pub loss_weights: Vec<f64>,
    pub rollout_logprobs: Vec<Option<f64>>,
    pub segments: Vec<SegmentEntry>,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Debug, Error)]
pub enum PackError {
    #[error("invalid tree: {0:?}")]
    InvalidTree(Vec<Violation>),
    #[error("path of call {call_id} has no generated tokens (required by PathMean)")]
    PathWithNoGeneratedTokens { call_id: String },
    #[error("corrupt segment table: {0}")]
    CorruptSegmentTable(String),
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn segment(&self, id: u64) -> Option<&SegmentEntry> {
        self.segments.get(id as usize)
    }

    /// Segment owning flat index `i`.
    pub fn segment_of(&self, i: usize) -> &SegmentEntry {
        // Segments tile [0, T) in order; binary search by flat_start.
        let mut lo = 0usize;
        let mut hi = self.segments.len();
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.segments[mid].flat_start <= i {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Skip empty segments sharing the same flat_start.
        let mut s = lo;
        while self.segments[s].flat_end <= i {
            s += 1;
        }
        &self.segments[s]
    }

    /// Whether segment `a` is an ancestor of (or equal to) segment `b`.
    pub fn is_ancestor_or_self(&self, a: u64, b: u64) -> bool {
        let mut cur = Some(b);
        while let Some(id) = cur {
            if id == a {
                return true;
            }
            cur = self.segments[id as usize].parent_segment_id;
        }
        false
    }

    /// Whether flat token `i` may attend to flat token `j` under the
    /// path-restricted causal mask.
    pub fn attends(&self, i: usize, j: usize) -> bool {
        let si = self.segment_of(i).segment_id;
        let sj = self.segment_of(j).segment_id;
        if si == sj {
            j <= i
        } else {
            self.is_ancestor_or_self(sj, si)
        }
    }

    /// Flat view of the turn table as (span, turn index, trajectory index).
    pub fn turn_table(&self) -> Vec<(TurnSpan, u64, usize)> {
        let mut out = Vec::new();
        for (t, traj) in self.trajectories.iter().enumerate() {
            for turn in &traj.turns {
                out.push((
                    TurnSpan::new(turn.local_start, turn.local_end, turn.role),
                    turn.turn_index,
                    t,
                ));
            }
        }
        out
    }
}

/// Dense boolean attention mask, row-major: `mask[i][j]` is true when token
/// `i` may attend to token `j`. Oracle-sized batches only; O(T^2) memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask {
    pub t: usize,
    bits: Vec<bool>,
}

impl DenseMask {
    /// Build from row-major bits; `bits.len()` must be `t * t`.
    pub fn new(t: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), t * t, "mask must be square");
        Self { t, bits }
    }

    /// Plain causal mask over a single linear sequence.
    pub fn causal(t: usize) -> Self {
        let mut bits = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                bits[i * t + j] = true;
            }
        }
        Self { t, bits }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.t + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.t..(i + 1) * self.t]
    }

    pub fn attended_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }
}

/// Compile a tree into a flattened batch. Children are visited in ascending
/// node id order, which makes the output deterministic.
pub fn dfs_flatten(
    tree: &TrajectoryTree,
    mode: NormalizationMode,
) -> Result<PackedBatch, PackError> {
    let violations = validate_tree(tree);
    if !violations.is_empty() {
        return Err(PackError::InvalidTree(violations));
    }
    let weights = compute_loss_weights(tree, mode)?;

    let mut order = Vec::with_capacity(tree.node_count());
    let mut roots = tree.roots.clone();
    roots.sort_unstable();
    let mut stack: Vec<u64> = roots.into_iter().rev().collect();
    while let Some(id) = stack.pop() {
        order.push(id);
        let mut kids = tree.node(id).children().to_vec();
        kids.sort_unstable();
        for k in kids.into_iter().rev() {
            stack.push(k);
        }
    }

    let t_total = tree.total_tokens() as usize;
    let mut token_ids = Vec::with_capacity(t_total);
    let mut origins = Vec::with_capacity(t_total);
    let mut position_ids = Vec::with_capacity(t_total);
    let mut loss_weights = Vec::with_capacity(t_total);
    let mut rollout_logprobs = Vec::with_capacity(t_total);
    let mut segments = Vec::with_capacity(order.len());
    let mut seg_of_node: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pos_start_of: BTreeMap<u64, u64> = BTreeMap::new();

    for (seg_id, &node_id) in order.iter().enumerate() {
        let node = tree.node(node_id);
        let parent_seg = node.parent.map(|p| seg_of_node[&p]);
        let path_position_start = match node.parent {
            Some(p) => pos_start_of[&p] + tree.node(p).len() as u64,
            None => 0,
        };
        seg_of_node.insert(node_id, seg_id as u64);
        pos_start_of.insert(node_id, path_position_start);

        let flat_start = token_ids.len();
        for (k, tok) in node.tokens.iter().enumerate() {
            token_ids.push(tok.token_id);
            origins.push(tok.origin);
            position_ids.push((path_position_start + k as u64) as u32);
            loss_weights
                .push(weights[&node_id] * if tok.origin == Origin::Generated { 1.0 } else { 0.0 });
            rollout_logprobs.push(tok.rollout_logprob);
        }
        segments.push(SegmentEntry {
            segment_id: seg_id as u64,
            parent_segment_id: parent_seg,
            flat_start,
            flat_end: token_ids.len(),
            path_position_start,
        });
    }

    // Per-trajectory turn table: map each call turn (in call coordinates)
    // into the single segment containing it.
    let mut trajectories = Vec::with_capacity(tree.leaf_paths.len());
    for lp in &tree.leaf_paths {
        let path = tree.path_to(lp.node);
        let mut turns = Vec::with_capacity(lp.turns.len());
        for (turn_index, turn) in lp.turns.iter().enumerate() {
            let mut offset = 0usize;
            for &node_id in &path {
                let len = tree.node(node_id).len();
                if turn.start >= offset && turn.end <= offset + len {
                    turns.push(PackedTurn {
                        turn_index: turn_index as u64,
                        segment_id: seg_of_node[&node_id],
                        local_start: turn.start - offset,
                        local_end: turn.end - offset,
                        role: turn.role,
                    });
                    break;
                }
                offset += len;
            }
        }
        trajectories.push(TrajectoryEntry { end_segment_id: seg_of_node[&lp.node], turns });
    }

    Ok(PackedBatch {
        mode,
        token_ids,
        origins,
        position_ids,
        loss_weights,
        rollout_logprobs,
        segments,
        trajectories,
    })
}

/// Per-node loss weight (applies to the node's generated tokens; prompt
/// tokens always carry weight zero).
///
/// `PathSum`: the number of trajectory paths whose end node lies in the
/// node's subtree — each shared token is counted once per path using it.
/// `PathMean`: `sum over those paths p of 1 / (P * gen_len(p))`.
pub fn compute_loss_weights(
    tree: &TrajectoryTree,
    mode: NormalizationMode,
) -> Result<BTreeMap<u64, f64>, PackError> {
    // Per-path generated length, walking root to end node.
    let path_count = tree.leaf_paths.len();
    let mut per_path_coeff: Vec<(u64, f64)> = Vec::with_capacity(path_count);
    for lp in &tree.leaf_paths {
        let gen_len: usize = tree
            .path_to(lp.node)
            .iter()
            .map(|&id| {
                tree.node(id).tokens.iter().filter(|t| t.origin == Origin::Generated).count()
            })
            .sum();
        let coeff = match mode {
            NormalizationMode::PathSum => 1.0,
            NormalizationMode::PathMean => {
                if gen_len == 0 {
                    return Err(PackError::PathWithNoGeneratedTokens {
                        call_id: lp.call_id.clone(),
                    });
                }
                1.0 / (path_count as f64 * gen_len as f64)
            }
        };
        per_path_coeff.push((lp.node, coeff));
    }

    // Accumulate each path's coefficient on every node along its path.
    let mut weights: BTreeMap<u64, f64> = tree.nodes().iter().map(|n| (n.id, 0.0)).collect();
    for (end, coeff) in per_path_coeff {
        for id in tree.path_to(end) {
            *weights.get_mut(&id).unwrap() += coeff;
        }
    }
    Ok(weights)
}

/// Materialize the full T-by-T mask: token `i` attends to token `j` iff `j`'s
/// segment is an ancestor-or-self of `i`'s and, within one segment, `j <= i`.
pub fn build_attention_mask(batch: &PackedBatch) -> DenseMask {
    let t = batch.len();
    let mut bits = vec![false; t * t];
    // Precompute the ancestor chain per segment.
    let mut ancestors: Vec<Vec<u64>> = Vec::with_capacity(batch.segments.len());
    for seg in &batch.segments {
        let mut chain = vec![seg.segment_id];
        let mut cur = seg.parent_segment_id;
        while let Some(p) = cur {
            chain.push(p);
            cur = batch.segments[p as usize].parent_segment_id;
        }
        ancestors.push(chain);
    }
    for seg in &batch.segments {
        for i in seg.flat_start..seg.flat_end {
            for &aid in &ancestors[seg.segment_id as usize] {
                let a = &batch.segments[aid as usize];
                if aid == seg.segment_id {
                    for j in a.flat_start..=i {
                        bits[i * t + j] = true;
                    }
                } else {
                    for j in a.flat_start..a.flat_end {
                        bits[i * t + j] = true;
                    }
                }
            }
        }
    }
    DenseMask { t, bits }
}

/// One reconstructed root-to-end path.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedPath {
    pub tokens: Vec<TokenEvent>,
    pub turns: Vec<TurnSpan>,
}

/// Invert the flattening: rebuild every trajectory's original linear token
/// sequence and turn spans from the batch alone.
pub fn unpack_paths(batch: &PackedBatch) -> Result<Vec<UnpackedPath>, PackError> {
    let t = batch.len();
    // Structural checks on the segment table.
    let mut expected_start = 0usize;
    for (i, seg) in batch.segments.iter().enumerate() {
        if seg.segment_id != i as u64 {
            return Err(PackError::CorruptSegmentTable(format!(
                "segment {} stored under index {i}",
                seg.segment_id
            )));
        }
        if seg.flat_start != expected_start || seg.flat_end < seg.flat_start || seg.flat_end > t {
            return Err(PackError::CorruptSegmentTable(format!(
                "segment {i} interval [{},{}) does not tile the sequence",
                seg.flat_start, seg.flat_end
            )));
        }
        expected_start = seg.flat_end;
        if let Some(p) = seg.parent_segment_id {
            if p >= i as u64 {
                return Err(PackError::CorruptSegmentTable(format!(
                    "segment {i} parent {p} does not precede it (DFS order)"
                )));
            }
        }
    }
    if expected_start != t {
        return Err(PackError::CorruptSegmentTable(format!(
            "segments cover {expected_start} of {t} tokens"
        )));
    }

    let mut out = Vec::with_capacity(batch.trajectories.len());
    for traj in &batch.trajectories {
        let end = traj.end_segment_id;
        if end as usize >= batch.segments.len() {
            return Err(PackError::CorruptSegmentTable(format!(
                "trajectory end segment {end} missing"
            )));
        }
        // Walk end -> root, then reverse.
        let mut chain = vec![end];
        let mut cur = batch.segments[end as usize].parent_segment_id;
        let mut guard = 0usize;
        while let Some(p) = cur {
            chain.push(p);
            cur = batch.segments[p as usize].parent_segment_id;
            guard += 1;
            if guard > batch.segments.len() {
                return Err(PackError::CorruptSegmentTable("parent cycle".into()));
            }
        }
        chain.reverse();

        let mut tokens = Vec::new();
        let mut seg_path_offset: BTreeMap<u64, usize> = BTreeMap::new();
        for &sid in &chain {
            let seg = &batch.segments[sid as usize];
            seg_path_offset.insert(sid, tokens.len());
            for i in seg.flat_start..seg.flat_end {
                tokens.push(TokenEvent {
                    token_id: batch.token_ids[i],
                    origin: batch.origins[i],
                    rollout_logprob: batch.rollout_logprobs[i],
                });
            }
        }

        let mut turns: Vec<(u64, TurnSpan)> = Vec::with_capacity(traj.turns.len());
        for turn in &traj.turns {
            let offset = *seg_path_offset.get(&turn.segment_id).ok_or_else(|| {
                PackError::CorruptSegmentTable(format!(
                    "turn references segment {} outside its trajectory path",
                    turn.segment_id
                ))
            })?;
            let seg_len = {
                let seg = &batch.segments[turn.segment_id as usize];
                seg.flat_end - seg.flat_start
            };
            if turn.local_end > seg_len || turn.local_start >= turn.local_end {
                return Err(PackError::CorruptSegmentTable(format!(
                    "turn span [{},{}) exceeds segment {}",
                    turn.local_start, turn.local_end, turn.segment_id
                )));
            }
            turns.push((
                turn.turn_index,
                TurnSpan::new(offset + turn.local_start, offset + turn.local_end, turn.role),
            ));
        }
        turns.sort_by_key(|(idx, _)| *idx);
        out.push(UnpackedPath { tokens, turns: turns.into_iter().map(|(_, s)| s).collect() });
    }
    Ok(out)
}

/// Aggregate compute accounting for a set of trees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub trees: usize,
    pub tree_tokens: u64,
    pub linear_tokens: u64,
    /// First-order proxy: tokens processed by per-path training divided by
    /// tokens processed once over the trees.
    pub token_ratio: f64,
    /// Second-order proxy comparing attention work: per-path squared lengths
    /// against the attended lengths under the tree mask.
    pub quadratic: Option<QuadraticProxy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticProxy {
    pub path_len_sq_sum: u64,
    pub tree_attended_sum: u64,
    pub ratio: f64,
}

/// Token-count (and optionally attention-weighted) redundancy over a batch of
/// trees. On a singleton list the token ratio equals `tree_stats`'s
/// redundancy ratio.
pub fn estimate_speedup(trees: &[TrajectoryTree], quadratic_attention: bool) -> SpeedupReport {
    let mut tree_tokens = 0u64;
    let mut linear_tokens = 0u64;
    let mut path_len_sq_sum = 0u64;
    let mut tree_attended_sum = 0u64;
    for tree in trees {
        let stats = tree_stats(tree);
        tree_tokens += stats.tree_tokens;
        linear_tokens += stats.linear_tokens;
        if quadratic_attention {
            for lp in &tree.leaf_paths {
                path_len_sq_sum += (lp.token_len as u64) * (lp.token_len as u64);
            }
            // Attended length of a token at path position p is p + 1,
            // independent of branching.
            let mut pos_start: BTreeMap<u64, u64> = BTreeMap::new();
            for node in tree.nodes() {
                let mut chain = vec![node.id];
                let mut cur = node.parent;
                while let Some(p) = cur {
                    if pos_start.contains_key(&p) {
                        break;
                    }
                    chain.push(p);
                    cur = tree.node(p).parent;
                }
                for &nid in chain.iter().rev() {
                    if pos_start.contains_key(&nid) {
                        continue;
                    }
                    let start = match tree.node(nid).parent {
                        Some(p) => pos_start[&p] + tree.node(p).len() as u64,
                        None => 0,
                    };
                    pos_start.insert(nid, start);
                }
            }
            for node in tree.nodes() {
                let start = pos_start[&node.id];
                for k in 0..node.len() as u64 {
                    tree_attended_sum += start + k + 1;
                }
            }
        }
    }
    let token_ratio =
        if tree_tokens == 0 { 1.0 } else { linear_tokens as f64 / tree_tokens as f64 };
    let quadratic = quadratic_attention.then(|| QuadraticProxy {
        path_len_sq_sum,
        tree_attended_sum,
        ratio: if tree_attended_sum == 0 {
            1.0
        } else {
            path_len_sq_sum as f64 / tree_attended_sum as f64
        },
    });
    SpeedupReport { trees: trees.len(), tree_tokens, linear_tokens, token_ratio, quadratic }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{build_tree, LinearCall, TokenEvent, TurnSpan};

    fn gen(id: u32, lp: f64) -> TokenEvent {
        TokenEvent::generated(id, lp)
    }

    fn two_leaf_tree() -> TrajectoryTree {
        // [1,2,3,4] and [1,2,5] with single-token turns.
        let mk = |cid: &str, ids: &[u32]| {
            let tokens: Vec<TokenEvent> =
                ids.iter().map(|&i| gen(i, -0.1 * (i as f64 + 1.0))).collect();
            let turns =
                (0..tokens.len()).map(|i| TurnSpan::new(i, i + 1, Role::Assistant)).collect();
            LinearCall::new(cid, 32, tokens, turns).unwrap()
        };
        build_tree(&[mk("a", &[1, 2, 3, 4]), mk("b", &[1, 2, 5])]).unwrap()
    }

    #[test]
    fn single_path_pathsum_weights_and_positions() {
        let tokens: Vec<TokenEvent> = (0..5).map(|i| gen(i, -0.2)).collect();
        let turns = vec![TurnSpan::new(0, 5, Role::Assistant)];
        let call = LinearCall::new("c", 8, tokens, turns).unwrap();
        let tree = build_tree(&[call]).unwrap();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        assert_eq!(batch.len(), 5);
        assert_eq!(batch.position_ids, vec![0, 1, 2, 3, 4]);
        assert!(batch.loss_weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn shared_segment_weight_is_leaf_count() {
        let tree = two_leaf_tree();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        assert_eq!(batch.len(), 5);
        // Flat layout: [1,2] shared, then [3,4], then [5].
        assert_eq!(batch.token_ids, vec![1, 2, 3, 4, 5]);
        assert_eq!(batch.loss_weights, vec![2.0, 2.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch.position_ids, vec![0, 1, 2, 3, 2]);
    }

    #[test]
    fn pathmean_weight_matches_formula() {
        // Two paths with gen lengths 4 and 3; shared tokens get
        // 1/(2*4) + 1/(2*3), leaf tokens 1/(2*len).
        let tree = two_leaf_tree();
        let batch = dfs_flatten(&tree, NormalizationMode::PathMean).unwrap();
        let shared = 1.0 / (2.0 * 4.0) + 1.0 / (2.0 * 3.0);
        assert!((batch.loss_weights[0] - shared).abs() < 1e-15);
        assert!((batch.loss_weights[2] - 1.0 / 8.0).abs() < 1e-15);
        assert!((batch.loss_weights[4] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pathmean_spec_example_value() {
        // Paths with gen_len 4 and 2 sharing a generated token:
        // weight = 1/(2*4) + 1/(2*2) = 0.375.
        let mk = |cid: &str, ids: &[u32]| {
            let tokens: Vec<TokenEvent> = ids.iter().map(|&i| gen(i, -0.5)).collect();
            let turns =
                (0..tokens.len()).map(|i| TurnSpan::new(i, i + 1, Role::Assistant)).collect();
            LinearCall::new(cid, 32, tokens, turns).unwrap()
        };
        let tree = build_tree(&[mk("a", &[9, 1, 2, 3]), mk("b", &[9, 7])]).unwrap();
        let batch = dfs_flatten(&tree, NormalizationMode::PathMean).unwrap();
        assert_eq!(batch.token_ids[0], 9);
        assert!((batch.loss_weights[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn prompt_tokens_never_carry_weight() {
        let mut tokens = vec![TokenEvent::prompt(0), TokenEvent::prompt(1)];
        tokens.push(gen(2, -0.3));
        let call =
            LinearCall::new("c", 8, tokens, vec![TurnSpan::new(2, 3, Role::Assistant)]).unwrap();
        let tree = build_tree(&[call]).unwrap();
        for mode in [NormalizationMode::PathSum, NormalizationMode::PathMean] {
            let batch = dfs_flatten(&tree, mode).unwrap();
            assert_eq!(batch.loss_weights[0], 0.0);
            assert_eq!(batch.loss_weights[1], 0.0);
            assert!(batch.loss_weights[2] > 0.0);
        }
    }

    #[test]
    fn mask_single_segment_is_lower_triangular() {
        let tokens: Vec<TokenEvent> = (0..3).map(|i| gen(i, -0.2)).collect();
        let call =
            LinearCall::new("c", 8, tokens, vec![TurnSpan::new(0, 3, Role::Assistant)]).unwrap();
        let tree = build_tree(&[call]).unwrap();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let mask = build_attention_mask(&batch);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mask.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn mask_isolates_sibling_branches() {
        let tree = two_leaf_tree();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let mask = build_attention_mask(&batch);
        // Token 4 (value 5, second branch) sees shared [1,2] and itself only.
        assert!(mask.get(4, 0) && mask.get(4, 1) && mask.get(4, 4));
        assert!(!mask.get(4, 2) && !mask.get(4, 3));
        // Diagonal always true; branch A never sees branch B.
        for i in 0..batch.len() {
            assert!(mask.get(i, i));
            for j in 0..batch.len() {
                assert_eq!(mask.get(i, j), batch.attends(i, j));
            }
        }
        assert!(!mask.get(2, 4) && !mask.get(3, 4));
    }

    #[test]
    fn unpack_inverts_flatten() {
        let tree = two_leaf_tree();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let paths = unpack_paths(&batch).unwrap();
        assert_eq!(paths.len(), 2);
        let ids: Vec<Vec<u32>> =
            paths.iter().map(|p| p.tokens.iter().map(|t| t.token_id).collect()).collect();
        assert_eq!(ids, vec![vec![1, 2, 3, 4], vec![1, 2, 5]]);
        for p in &paths {
            assert_eq!(p.turns.len(), p.tokens.len()); // single-token turns
        }
    }

    #[test]
    fn tampered_segment_table_detected() {
        let tree = two_leaf_tree();
        let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
        let mut bad = batch.clone();
        // Point the child's parent forward: child before parent in DFS order.
        bad.segments[1].parent_segment_id = Some(2);
        assert!(matches!(unpack_paths(&bad), Err(PackError::CorruptSegmentTable(_))));
        let mut gap = batch;
        gap.segments[1].flat_start += 1;
        assert!(matches!(unpack_paths(&gap), Err(PackError::CorruptSegmentTable(_))));
    }

    #[test]
    fn speedup_singleton_matches_tree_stats() {
        let tree = two_leaf_tree();
        let stats = tree_stats(&tree);
        let report = estimate_speedup(std::slice::from_ref(&tree), true);
        assert_eq!(report.token_ratio, stats.redundancy_ratio);
        assert_eq!(report.tree_tokens, stats.tree_tokens);
        let q = report.quadratic.unwrap();
        // Paths of length 4 and 3: 16 + 9 = 25. Attended sums: shared
        // [1,2] -> 1+2; branch [3,4] -> 3+4; branch [5] -> 3.
        assert_eq!(q.path_len_sq_sum, 25);
        assert_eq!(q.tree_attended_sum, 13);
    }

    #[test]
    fn eight_subagent_workload_ratio() {
        // 2048-token shared prefix, 8 sub-agents, 128-token branches:
        // 8*2176 / (2048 + 8*128) = 5.666...
        let mut calls = Vec::new();
        for b in 0..8u32 {
            let mut tokens: Vec<TokenEvent> =
                (0..2048).map(|i| TokenEvent::prompt(i % 512)).collect();
            for i in 0..128u32 {
                tokens.push(gen(1000 + b * 200 + i % 7, -0.25));
            }
            let turns = vec![TurnSpan::new(2048, 2176, Role::Assistant)];
            calls.push(LinearCall::new(format!("s{b}"), 4096, tokens, turns).unwrap());
        }
        let tree = build_tree(&calls).unwrap();
        let report = estimate_speedup(&[tree], false);
        let expected = (8.0 * 2176.0) / (2048.0 + 8.0 * 128.0);
        assert!((report.token_ratio - expected).abs() < 1e-12);
        assert!((report.token_ratio - 5.70).abs() < 0.04);
    }

    #[test]
    fn invalid_tree_rejected_by_flatten() {
        let mut tree = two_leaf_tree();
        tree.leaf_paths[0].token_len += 1; // reconstruction mismatch
        assert!(matches!(
            dfs_flatten(&tree, NormalizationMode::PathSum),
            Err(PackError::InvalidTree(_))
        ));
    }

    #[test]
    fn flatten_is_deterministic() {
        let t1 = two_leaf_tree();
        let t2 = two_leaf_tree();
        let b1 = dfs_flatten(&t1, NormalizationMode::PathSum).unwrap();
        let b2 = dfs_flatten(&t2, NormalizationMode::PathSum).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(serde_json::to_string(&b1).unwrap(), serde_json::to_string(&b2).unwrap());
    }
}
