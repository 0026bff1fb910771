//! Verification suites behind `ttkit check`.
//!
//! Each suite re-derives a property from first principles and compares it
//! against what the pipeline produced:
//!
//! * `roundtrip` — records -> tree -> batch -> unpack must reproduce every
//!   call's tokens and turns exactly, and the TTK1 encoding must be a
//!   byte-stable involution;
//! * `mask` — the segment-table mask must equal a brute-force oracle that
//!   only knows root-to-leaf token paths (dense for small batches, sampled
//!   rows for large ones), and position ids must count 0,1,2,... along every
//!   unpacked path;
//! * `gradequiv` — flattened-batch gradients with the batch's loss weights
//!   must equal the summed (or path-mean weighted) per-path gradients on a
//!   seeded reference net, over 200 random trees plus every small input
//!   tree;
//! * `objective` — the turn-level objective must collapse to the GSPO and
//!   GRPO references under their reduction views and hit the on-policy fixed
//!   point when train equals rollout.

use crate::objectives::{
    group_advantages, grpo_reference, gspo_reference, turn_level_objective, ObjectiveConfig,
    TrajectoryTokens,
};
use crate::packing::{
    build_attention_mask, dfs_flatten, unpack_paths, DenseMask, NormalizationMode, PackedBatch,
};
use crate::records::ParsedTask;
use crate::refnet::{backward, forward_logprobs, RefNetGrads, RefNetParams};
use crate::rng::Lcg64;
use crate::trajectory::{validate_tree, Origin, TokenEvent, TrajectoryTree};
use serde::Serialize;

/// Result of one suite run.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub suite: String,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Largest relative error observed, where the suite measures one.
    pub max_rel_err: Option<f64>,
}

impl CheckOutcome {
    fn new(suite: &str) -> Self {
        Self { suite: suite.into(), cases: 0, failures: Vec::new(), max_rel_err: None }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn track_err(&mut self, err: f64) {
        let cur = self.max_rel_err.get_or_insert(0.0);
        if err > *cur {
            *cur = err;
        }
    }
}

/// Caps for the synthetic random-tree generator.
#[derive(Debug, Clone, Copy)]
pub struct TreeCaps {
    pub max_nodes: usize,
    pub max_depth: usize,
    pub max_branching: usize,
    pub max_segment_len: usize,
    pub vocab: u32,
}

impl Default for TreeCaps {
    fn default() -> Self {
        Self { max_nodes: 12, max_depth: 6, max_branching: 4, max_segment_len: 4, vocab: 17 }
    }
}

/// Seeded random tree within the caps. Every node carries at least one
/// generated token so both weight modes are defined on every path.
pub fn random_tree(rng: &mut Lcg64, caps: &TreeCaps) -> TrajectoryTree {
    let nodes = 1 + rng.below(caps.max_nodes as u64) as usize;
    let mut parents: Vec<Option<u64>> = vec![None];
    let mut depth = vec![1usize];
    let mut child_count = vec![0usize; nodes];
    for i in 1..nodes {
        // Pick a parent that still has room in depth and fan-out.
        let mut candidates: Vec<u64> = (0..i as u64)
            .filter(|&p| {
                depth[p as usize] < caps.max_depth && child_count[p as usize] < caps.max_branching
            })
            .collect();
        if candidates.is_empty() {
            candidates.push((i - 1) as u64);
        }
        let p = candidates[rng.below(candidates.len() as u64) as usize];
        parents.push(Some(p));
        depth.push(depth[p as usize] + 1);
        child_count[p as usize] += 1;
    }
    let mut spec = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let len = 1 + rng.below(caps.max_segment_len as u64) as usize;
        let mut tokens = Vec::with_capacity(len);
        // First token generated, the rest mixed.
        for k in 0..len {
            let id = rng.below(caps.vocab as u64) as u32;
            if k == 0 || rng.next_f64() < 0.7 {
                tokens.push(TokenEvent::generated(id, -rng.uniform(0.05, 2.5)));
            } else {
                tokens.push(TokenEvent::prompt(id));
            }
        }
        spec.push((parents[i], tokens));
    }
    TrajectoryTree::from_parts(caps.vocab, spec)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// roundtrip
// ---------------------------------------------------------------------------

/// Tree/batch/bytes round-trip over parsed tasks. When `packed` batches are
/// supplied they must byte-match a fresh pack of the same records.
pub fn run_roundtrip(tasks: &[ParsedTask], packed: Option<&[(String, Vec<u8>)]>) -> CheckOutcome {
    let mut out = CheckOutcome::new("roundtrip");
    for task in tasks {
        out.cases += 1;
        let tree = match crate::trajectory::build_tree(&task.group.trajectories) {
            Ok(t) => t,
            Err(e) => {
                out.failures.push(format!("line {}: build_tree: {e}", task.line));
                continue;
            }
        };
        let violations = validate_tree(&tree);
        if !violations.is_empty() {
            out.failures.push(format!("line {}: {} violations", task.line, violations.len()));
            continue;
        }
        for mode in [NormalizationMode::PathSum, NormalizationMode::PathMean] {
            let batch = match dfs_flatten(&tree, mode) {
                Ok(b) => b,
                Err(e) => {
                    out.failures.push(format!("line {}: flatten: {e}", task.line));
                    continue;
                }
            };
            let paths = match unpack_paths(&batch) {
                Ok(p) => p,
                Err(e) => {
                    out.failures.push(format!("line {}: unpack: {e}", task.line));
                    continue;
                }
            };
            if paths.len() != task.group.trajectories.len() {
                out.failures.push(format!(
                    "line {}: {} unpacked paths for {} calls",
                    task.line,
                    paths.len(),
                    task.group.trajectories.len()
                ));
                continue;
            }
            for (path, call) in paths.iter().zip(&task.group.trajectories) {
                if path.tokens != call.tokens {
                    out.failures
                        .push(format!("line {}: call {}: token mismatch", task.line, call.call_id));
                }
                if path.turns != call.turns {
                    out.failures
                        .push(format!("line {}: call {}: turn mismatch", task.line, call.call_id));
                }
            }
            let bytes = crate::batch_file::to_bytes(&batch);
            match crate::batch_file::from_bytes(&bytes) {
                Ok(back) => {
                    if back != batch {
                        out.failures.push(format!("line {}: TTK1 reload differs", task.line));
                    } else if crate::batch_file::to_bytes(&back) != bytes {
                        out.failures.push(format!("line {}: TTK1 re-encode differs", task.line));
                    }
                }
                Err(e) => out.failures.push(format!("line {}: TTK1 decode: {e}", task.line)),
            }
        }
    }
    if let Some(packed) = packed {
        for (name, bytes) in packed {
            out.cases += 1;
            match crate::batch_file::from_bytes(bytes) {
                Ok(batch) => {
                    if &crate::batch_file::to_bytes(&batch) != bytes {
                        out.failures.push(format!("{name}: stored bytes are not canonical"));
                    }
                    if let Err(e) = unpack_paths(&batch) {
                        out.failures.push(format!("{name}: unpack: {e}"));
                    }
                }
                Err(e) => out.failures.push(format!("{name}: decode: {e}")),
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

/// Token paths of a batch in flat indices, one per trajectory.
fn flat_paths(batch: &PackedBatch) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for traj in &batch.trajectories {
        let mut chain = vec![traj.end_segment_id];
        let mut cur = batch.segments[traj.end_segment_id as usize].parent_segment_id;
        while let Some(p) = cur {
            chain.push(p);
            cur = batch.segments[p as usize].parent_segment_id;
        }
        chain.reverse();
        let mut flat = Vec::new();
        for sid in chain {
            let seg = &batch.segments[sid as usize];
            flat.extend(seg.flat_start..seg.flat_end);
        }
        out.push(flat);
    }
    out
}

/// Brute-force row: token i attends to j iff some trajectory path contains
/// both with j at or before i.
fn oracle_row(paths: &[Vec<usize>], t: usize, i: usize) -> Vec<bool> {
    let mut row = vec![false; t];
    for path in paths {
        if let Some(pi) = path.iter().position(|&x| x == i) {
            for &j in &path[..=pi] {
                row[j] = true;
            }
        }
    }
    row
}

const DENSE_MASK_LIMIT: usize = 512;
const SAMPLED_ROWS: usize = 48;

pub fn run_mask(tasks: &[ParsedTask], seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("mask");
    let mut rng = Lcg64::substream(seed, 0x6d61736b);
    for task in tasks {
        out.cases += 1;
        let tree = match crate::trajectory::build_tree(&task.group.trajectories) {
            Ok(t) => t,
            Err(e) => {
                out.failures.push(format!("line {}: build_tree: {e}", task.line));
                continue;
            }
        };
        let batch = match dfs_flatten(&tree, NormalizationMode::PathSum) {
            Ok(b) => b,
            Err(e) => {
                out.failures.push(format!("line {}: flatten: {e}", task.line));
                continue;
            }
        };
        let t = batch.len();
        let paths = flat_paths(&batch);

        if t <= DENSE_MASK_LIMIT {
            let mask = build_attention_mask(&batch);
            for i in 0..t {
                let want = oracle_row(&paths, t, i);
                if mask.row(i) != &want[..] {
                    out.failures.push(format!("line {}: mask row {i} differs", task.line));
                    break;
                }
            }
            // Transitivity: mask[i][j] and mask[j][k] imply mask[i][k].
            for _ in 0..200.min(t * t) {
                let i = rng.below(t as u64) as usize;
                let j = rng.below(t as u64) as usize;
                let k = rng.below(t as u64) as usize;
                if mask.get(i, j) && mask.get(j, k) && !mask.get(i, k) {
                    out.failures
                        .push(format!("line {}: transitivity broken at ({i},{j},{k})", task.line));
                }
            }
        } else {
            for _ in 0..SAMPLED_ROWS {
                let i = rng.below(t as u64) as usize;
                let want = oracle_row(&paths, t, i);
                let got: Vec<bool> = (0..t).map(|j| batch.attends(i, j)).collect();
                if got != want {
                    out.failures.push(format!("line {}: sampled mask row {i} differs", task.line));
                    break;
                }
            }
        }

        // Position ids along every trajectory must count from zero.
        for (p, flat) in paths.iter().enumerate() {
            for (k, &idx) in flat.iter().enumerate() {
                if batch.position_ids[idx] != k as u32 {
                    out.failures.push(format!(
                        "line {}: trajectory {p} position {k} stored as {}",
                        task.line, batch.position_ids[idx]
                    ));
                    break;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// gradequiv
// ---------------------------------------------------------------------------

const GRADEQUIV_REL_TOL: f64 = 1e-10;
const GRADEQUIV_INPUT_TOKEN_LIMIT: usize = 300;
const SYNTHETIC_TREES: usize = 200;

/// Per-path coefficients under a mode: 1 for PathSum, `1/(P*gen_len)` for
/// PathMean.
fn path_coefficients(tree: &TrajectoryTree, mode: NormalizationMode) -> Option<Vec<f64>> {
    let p = tree.leaf_paths.len();
    let mut out = Vec::with_capacity(p);
    for lp in &tree.leaf_paths {
        let gen_len = tree
            .path_tokens(lp.node)
            .iter()
            .filter(|t| t.origin == Origin::Generated)
            .count();
        match mode {
            NormalizationMode::PathSum => out.push(1.0),
            NormalizationMode::PathMean => {
                if gen_len == 0 {
                    return None;
                }
                out.push(1.0 / (p as f64 * gen_len as f64));
            }
        }
    }
    Some(out)
}

/// Summed per-path gradients: each root-to-end path run independently under
/// a causal mask with positions 0..len.
fn per_path_grads(
    params: &RefNetParams,
    tree: &TrajectoryTree,
    coeffs: &[f64],
    remap: u32,
) -> Result<RefNetGrads, String> {
    let mut total: Option<RefNetGrads> = None;
    for (lp, &coeff) in tree.leaf_paths.iter().zip(coeffs) {
        let tokens = tree.path_tokens(lp.node);
        let ids: Vec<u32> = tokens.iter().map(|t| t.token_id % remap).collect();
        let pos: Vec<u32> = (0..tokens.len() as u32).collect();
        let mask = DenseMask::causal(tokens.len());
        let (_, trace) =
            forward_logprobs(params, &ids, &pos, &mask).map_err(|e| e.to_string())?;
        let upstream: Vec<f64> = tokens
            .iter()
            .map(|t| if t.origin == Origin::Generated { coeff } else { 0.0 })
            .collect();
        let grads = backward(params, &trace, &upstream).map_err(|e| e.to_string())?;
        match &mut total {
            Some(acc) => acc.add_assign(&grads),
            None => total = Some(grads),
        }
    }
    total.ok_or_else(|| "tree has no paths".into())
}

/// Flattened-batch gradients under the tree mask with the batch's weights.
fn flattened_grads(
    params: &RefNetParams,
    batch: &PackedBatch,
    remap: u32,
) -> Result<RefNetGrads, String> {
    let ids: Vec<u32> = batch.token_ids.iter().map(|&t| t % remap).collect();
    let mask = build_attention_mask(batch);
    let (_, trace) =
        forward_logprobs(params, &ids, &batch.position_ids, &mask).map_err(|e| e.to_string())?;
    backward(params, &trace, &batch.loss_weights).map_err(|e| e.to_string())
}

fn compare_grads(a: &RefNetGrads, b: &RefNetGrads) -> f64 {
    let mut max = 0.0f64;
    for ((_, x), (_, y)) in a.blocks().iter().zip(b.blocks()) {
        for (u, v) in x.data.iter().zip(&y.data) {
            max = max.max(rel_err(*u, *v));
        }
    }
    max
}

/// Check gradient equivalence on one tree for both weight modes. Returns the
/// max relative error or a message.
pub fn gradequiv_tree(tree: &TrajectoryTree, seed: u64) -> Result<f64, String> {
    let vocab = 17u32;
    let max_path = tree
        .leaf_paths
        .iter()
        .map(|lp| lp.token_len)
        .max()
        .ok_or("no paths")?;
    let params = RefNetParams::seeded(seed, vocab as usize, 6, max_path + 1);
    let mut worst = 0.0f64;
    for mode in [NormalizationMode::PathSum, NormalizationMode::PathMean] {
        let Some(coeffs) = path_coefficients(tree, mode) else {
            continue; // PathMean undefined on this tree
        };
        let batch = dfs_flatten(tree, mode).map_err(|e| e.to_string())?;
        let flat = flattened_grads(&params, &batch, vocab)?;
        let byp = per_path_grads(&params, tree, &coeffs, vocab)?;
        worst = worst.max(compare_grads(&flat, &byp));
    }
    Ok(worst)
}

pub fn run_gradequiv(tasks: &[ParsedTask], seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("gradequiv");
    let mut rng = Lcg64::substream(seed, 0x67726164);
    let caps = TreeCaps::default();
    for n in 0..SYNTHETIC_TREES {
        out.cases += 1;
        let tree = random_tree(&mut rng, &caps);
        match gradequiv_tree(&tree, seed ^ n as u64) {
            Ok(err) => {
                out.track_err(err);
                if err > GRADEQUIV_REL_TOL {
                    out.failures.push(format!("synthetic tree {n}: max rel err {err:.3e}"));
                }
            }
            Err(e) => out.failures.push(format!("synthetic tree {n}: {e}")),
        }
    }
    for task in tasks {
        let total: usize = task.group.trajectories.iter().map(|c| c.tokens.len()).sum();
        if total > GRADEQUIV_INPUT_TOKEN_LIMIT {
            continue; // weight identity still covered via the mask/roundtrip suites
        }
        out.cases += 1;
        let tree = match crate::trajectory::build_tree(&task.group.trajectories) {
            Ok(t) => t,
            Err(e) => {
                out.failures.push(format!("line {}: build_tree: {e}", task.line));
                continue;
            }
        };
        match gradequiv_tree(&tree, seed ^ 0xabcd) {
            Ok(err) => {
                out.track_err(err);
                if err > GRADEQUIV_REL_TOL {
                    out.failures
                        .push(format!("line {}: max rel err {err:.3e}", task.line));
                }
            }
            Err(e) => out.failures.push(format!("line {}: {e}", task.line)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

/// Views of one call for the reduction identities.
pub fn trajectory_tokens_from_call(
    call: &crate::trajectory::LinearCall,
    train: Option<&Vec<Option<f64>>>,
) -> TrajectoryTokens {
    let origins: Vec<Origin> = call.tokens.iter().map(|t| t.origin).collect();
    let rollout: Vec<Option<f64>> = call.tokens.iter().map(|t| t.rollout_logprob).collect();
    let train: Vec<Option<f64>> = match train {
        Some(values) => values.clone(),
        None => rollout.clone(),
    };
    TrajectoryTokens {
        origins,
        rollout_logprobs: rollout,
        train_logprobs: train,
        turns: call.turns.clone(),
        keep: None,
    }
}

fn single_turn_view(traj: &TrajectoryTokens) -> TrajectoryTokens {
    let mut v = traj.clone();
    v.turns = vec![crate::trajectory::TurnSpan::new(
        0,
        v.len(),
        crate::trajectory::Role::Assistant,
    )];
    v
}

fn per_token_view(traj: &TrajectoryTokens) -> TrajectoryTokens {
    let mut v = traj.clone();
    v.turns = (0..v.len())
        .map(|i| crate::trajectory::TurnSpan::new(i, i + 1, crate::trajectory::Role::Assistant))
        .collect();
    v
}

const REDUCTION_TOL: f64 = 1e-12;

pub fn run_objective(tasks: &[ParsedTask], seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("objective");
    let cfg = ObjectiveConfig::default();
    let mut rng = Lcg64::substream(seed, 0x6f626a);
    for task in tasks {
        if task.group.trajectories.len() < 2 {
            continue; // group advantages need G >= 2 under the default mode
        }
        out.cases += 1;
        // Off-policy view: perturb rollout logprobs into a train policy.
        let group: Vec<TrajectoryTokens> = task
            .group
            .trajectories
            .iter()
            .zip(&task.train_logprobs)
            .map(|(call, train)| {
                let mut traj = trajectory_tokens_from_call(call, train.as_ref());
                if train.is_none() {
                    for lp in traj.train_logprobs.iter_mut().flatten() {
                        *lp = (*lp + rng.uniform(-0.05, 0.05)).min(0.0);
                    }
                }
                traj
            })
            .collect();
        let rewards = &task.group.rewards;

        let single: Vec<TrajectoryTokens> = group.iter().map(single_turn_view).collect();
        let per_token: Vec<TrajectoryTokens> = group.iter().map(per_token_view).collect();
        match (
            turn_level_objective(&single, rewards, &cfg),
            gspo_reference(&single, rewards, &cfg),
        ) {
            (Ok(a), Ok(b)) => {
                let err = (a.value - b).abs();
                out.track_err(err);
                if err > REDUCTION_TOL {
                    out.failures
                        .push(format!("line {}: GSPO residual {err:.3e}", task.line));
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                out.failures.push(format!("line {}: GSPO view: {e}", task.line))
            }
        }
        match (
            turn_level_objective(&per_token, rewards, &cfg),
            grpo_reference(&per_token, rewards, &cfg),
        ) {
            (Ok(a), Ok(b)) => {
                let err = (a.value - b).abs();
                out.track_err(err);
                if err > REDUCTION_TOL {
                    out.failures
                        .push(format!("line {}: GRPO residual {err:.3e}", task.line));
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                out.failures.push(format!("line {}: GRPO view: {e}", task.line))
            }
        }

        // On-policy fixed point with the real turn structure.
        let on_policy: Vec<TrajectoryTokens> = task
            .group
            .trajectories
            .iter()
            .map(|call| trajectory_tokens_from_call(call, None))
            .collect();
        match turn_level_objective(&on_policy, rewards, &cfg) {
            Ok(outcome) => {
                let adv = group_advantages(rewards, &cfg).expect("size checked");
                let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
                let err = (outcome.value - mean_adv).abs();
                out.track_err(err);
                if err > 1e-14 {
                    out.failures.push(format!(
                        "line {}: on-policy value {} != mean advantage {mean_adv}",
                        task.line, outcome.value
                    ));
                }
                if outcome.per_trajectory.iter().any(|t| t.clip_active.iter().any(|&c| c)) {
                    out.failures
                        .push(format!("line {}: clip active on-policy", task.line));
                }
            }
            Err(e) => out.failures.push(format!("line {}: on-policy: {e}", task.line)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::parse_records;
    use crate::workload::{generate, WorkloadSpec};

    fn parsed_workload(spec: &WorkloadSpec) -> Vec<ParsedTask> {
        let mut buf = Vec::new();
        for record in generate(spec) {
            crate::records::write_task_line(&mut buf, &record).unwrap();
        }
        parse_records(std::io::Cursor::new(buf), true).unwrap().tasks
    }

    #[test]
    fn suites_pass_on_default_workload() {
        let tasks = parsed_workload(&WorkloadSpec::default());
        let rt = run_roundtrip(&tasks, None);
        assert!(rt.passed(), "{:?}", rt.failures);
        let mask = run_mask(&tasks, 7);
        assert!(mask.passed(), "{:?}", mask.failures);
        let obj = run_objective(&tasks, 7);
        assert!(obj.passed(), "{:?}", obj.failures);
    }

    #[test]
    fn gradequiv_passes_on_synthetic_trees() {
        // Trim the tree count via a tiny task list; the suite still runs its
        // synthetic block. This is the slow check, so keep one call.
        let tasks: Vec<ParsedTask> = Vec::new();
        let out = run_gradequiv(&tasks, 99);
        assert!(out.passed(), "{:?}", out.failures);
        assert!(out.max_rel_err.unwrap() <= GRADEQUIV_REL_TOL);
    }

    #[test]
    fn random_trees_are_valid() {
        let mut rng = Lcg64::new(3);
        let caps = TreeCaps::default();
        for _ in 0..50 {
            let tree = random_tree(&mut rng, &caps);
            assert!(validate_tree(&tree).is_empty());
            assert!(tree.node_count() <= caps.max_nodes);
        }
    }

    #[test]
    fn corrupted_weights_fail_gradequiv() {
        let mut rng = Lcg64::new(11);
        // Need a tree with a loss-bearing token (generated, past position 0).
        let (tree, batch) = loop {
            let tree = random_tree(&mut rng, &TreeCaps::default());
            let batch = dfs_flatten(&tree, NormalizationMode::PathSum).unwrap();
            let has_target = (0..batch.len())
                .any(|i| batch.origins[i] == Origin::Generated && batch.position_ids[i] > 0);
            if has_target {
                break (tree, batch);
            }
        };
        let params = RefNetParams::seeded(1, 17, 6, 64);
        let coeffs = path_coefficients(&tree, NormalizationMode::PathSum).unwrap();
        let byp = per_path_grads(&params, &tree, &coeffs, 17).unwrap();
        let mut bad = batch.clone();
        // Corrupt the weight of a generated token that actually feeds a
        // prediction (path position zero has no predecessor and no loss).
        let idx = (0..bad.len())
            .find(|&i| bad.origins[i] == Origin::Generated && bad.position_ids[i] > 0)
            .expect("generator guarantees generated tokens past position zero");
        bad.loss_weights[idx] += 0.5;
        let flat = flattened_grads(&params, &bad, 17).unwrap();
        assert!(compare_grads(&flat, &byp) > GRADEQUIV_REL_TOL);
    }
}
