//! Synthetic scaffold workloads.
//!
//! Stands in for agent scaffolds that spawn sub-agents and fork contexts:
//! each task is a shared prompt prefix followed by `branch_points_per_task`
//! rounds of fan-out, where every current leaf forks into `branching_factor`
//! generated branches. Rollout log-probabilities come from a seeded
//! categorical policy (a fresh random distribution per generated position,
//! with the emitted token sampled from it), so the objective kernels receive
//! internally consistent inputs. Shared segments are generated once and the
//! emitted calls are path concatenations, which makes shared tokens
//! bit-identical across calls by construction.
//!
//! The redundancy ratio of a workload has a closed form
//! ([`WorkloadSpec::closed_form_ratio`]); generated trees must reproduce it
//! exactly, token for token.

use crate::records::{CallRecord, TaskRecord, TurnRecord};
use crate::rng::Lcg64;
use crate::trajectory::{Role, ScaffoldSpec, TaskSpec};
use serde::{Deserialize, Serialize};

/// Workload shape. Field names are the config-file contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub num_tasks: usize,
    pub branching_factor: usize,
    pub branch_points_per_task: usize,
    pub shared_prefix_len: usize,
    pub branch_len: usize,
    pub turns_per_branch: usize,
    pub vocab_size: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            branching_factor: 2,
            branch_points_per_task: 1,
            shared_prefix_len: 32,
            branch_len: 16,
            turns_per_branch: 2,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_tasks == 0
            || self.branching_factor == 0
            || self.branch_points_per_task == 0
            || self.shared_prefix_len == 0
            || self.branch_len == 0
            || self.turns_per_branch == 0
            || self.vocab_size < 2
        {
            return Err("all workload dimensions must be positive (vocab_size >= 2)".into());
        }
        if self.turns_per_branch > self.branch_len {
            return Err("turns_per_branch cannot exceed branch_len".into());
        }
        Ok(())
    }

    /// Paths per task: `branching_factor ^ branch_points_per_task`.
    pub fn paths_per_task(&self) -> u64 {
        (self.branching_factor as u64).pow(self.branch_points_per_task as u32)
    }

    /// Exact token counts implied by the shape: every path is the prefix
    /// plus one branch per level, every tree stores the prefix once plus
    /// `b^k` branches at level k.
    pub fn closed_form_counts(&self) -> (u64, u64) {
        let b = self.branching_factor as u64;
        let d = self.branch_points_per_task as u32;
        let prefix = self.shared_prefix_len as u64;
        let branch = self.branch_len as u64;
        let paths = self.paths_per_task();
        let linear = paths * (prefix + d as u64 * branch);
        let mut tree = prefix;
        for k in 1..=d {
            tree += b.pow(k) * branch;
        }
        (tree * self.num_tasks as u64, linear * self.num_tasks as u64)
    }

    pub fn closed_form_ratio(&self) -> f64 {
        let (tree, linear) = self.closed_form_counts();
        linear as f64 / tree as f64
    }

    /// The shipped grid used by the round-trip and redundancy checks. The
    /// last entry reaches the high-redundancy regime (ratio 13.09) that
    /// covers the reported 6.2x speedup band; `subagents_8` is the flat
    /// 8-fork pattern at 5.67.
    pub fn grid() -> Vec<(&'static str, WorkloadSpec)> {
        vec![
            (
                "single_path",
                WorkloadSpec {
                    num_tasks: 3,
                    branching_factor: 1,
                    branch_points_per_task: 1,
                    shared_prefix_len: 64,
                    branch_len: 32,
                    turns_per_branch: 2,
                    vocab_size: 64,
                    seed: 101,
                },
            ),
            (
                "two_branch_small",
                WorkloadSpec {
                    num_tasks: 4,
                    branching_factor: 2,
                    branch_points_per_task: 1,
                    shared_prefix_len: 24,
                    branch_len: 12,
                    turns_per_branch: 3,
                    vocab_size: 48,
                    seed: 102,
                },
            ),
            (
                "deep_binary",
                WorkloadSpec {
                    num_tasks: 2,
                    branching_factor: 2,
                    branch_points_per_task: 3,
                    shared_prefix_len: 96,
                    branch_len: 48,
                    turns_per_branch: 2,
                    vocab_size: 64,
                    seed: 103,
                },
            ),
            (
                "subagents_8",
                WorkloadSpec {
                    num_tasks: 1,
                    branching_factor: 8,
                    branch_points_per_task: 1,
                    shared_prefix_len: 2048,
                    branch_len: 128,
                    turns_per_branch: 2,
                    vocab_size: 64,
                    seed: 104,
                },
            ),
            (
                "paper_regime",
                WorkloadSpec {
                    num_tasks: 1,
                    branching_factor: 8,
                    branch_points_per_task: 2,
                    shared_prefix_len: 4096,
                    branch_len: 256,
                    turns_per_branch: 2,
                    vocab_size: 64,
                    seed: 105,
                },
            ),
        ]
    }
}

/// One generated segment of tokens with its turn chunking.
#[derive(Debug, Clone)]
struct GeneratedBranch {
    token_ids: Vec<u32>,
    logprobs: Vec<f64>,
    /// Turn boundaries local to the branch.
    turn_bounds: Vec<(usize, usize)>,
}

/// Sample one generated branch from the seeded categorical policy.
fn sample_branch(spec: &WorkloadSpec, rng: &mut Lcg64) -> GeneratedBranch {
    let v = spec.vocab_size as usize;
    let mut token_ids = Vec::with_capacity(spec.branch_len);
    let mut logprobs = Vec::with_capacity(spec.branch_len);
    let mut logits = vec![0.0f64; v];
    for _ in 0..spec.branch_len {
        for l in logits.iter_mut() {
            *l = rng.next_gaussian();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_denom = denom.ln() + max;
        // Sample from the categorical by inverse CDF.
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut picked = v - 1;
        for (i, &l) in logits.iter().enumerate() {
            acc += (l - log_denom).exp();
            if u < acc {
                picked = i;
                break;
            }
        }
        token_ids.push(picked as u32);
        logprobs.push((logits[picked] - log_denom).min(0.0));
    }
    // Chunk the branch into as-equal-as-possible turns.
    let turns = spec.turns_per_branch;
    let base = spec.branch_len / turns;
    let extra = spec.branch_len % turns;
    let mut turn_bounds = Vec::with_capacity(turns);
    let mut start = 0;
    for t in 0..turns {
        let len = base + usize::from(t < extra);
        turn_bounds.push((start, start + len));
        start += len;
    }
    GeneratedBranch { token_ids, logprobs, turn_bounds }
}

/// Generate every task record of the workload. Task `i` draws from substream
/// `i` of the workload seed, so records are independent of generation order.
pub fn generate(spec: &WorkloadSpec) -> Vec<TaskRecord> {
    (0..spec.num_tasks).map(|i| generate_task(spec, i)).collect()
}

fn generate_task(spec: &WorkloadSpec, task_index: usize) -> TaskRecord {
    let mut rng = Lcg64::substream(spec.seed, task_index as u64);
    let task = TaskSpec {
        env_id: format!("synthetic-env-{task_index}"),
        tools: vec!["bash".into(), "edit".into(), "search".into()],
        scaffold: ScaffoldSpec {
            name: "fork-scaffold".into(),
            system_prompt: "You are a coding agent; fork sub-agents as needed.".into(),
        },
        instruction: format!("synthetic task {task_index} from seed {}", spec.seed),
        verifier_id: "synthetic-verifier".into(),
    };

    // Shared prompt prefix, generated once.
    let prefix: Vec<u32> =
        (0..spec.shared_prefix_len).map(|_| rng.below(spec.vocab_size as u64) as u32).collect();

    // Level-order branch table: levels[k] holds b^(k+1) branches; the branch
    // for a path is indexed by the path's digit string.
    let b = spec.branching_factor;
    let d = spec.branch_points_per_task;
    let mut levels: Vec<Vec<GeneratedBranch>> = Vec::with_capacity(d);
    for k in 0..d {
        let count = b.pow(k as u32 + 1);
        levels.push((0..count).map(|_| sample_branch(spec, &mut rng)).collect());
    }

    let paths = spec.paths_per_task() as usize;
    let mut calls = Vec::with_capacity(paths);
    let mut rewards = Vec::with_capacity(paths);
    for p in 0..paths {
        // Digits of p in base b select the branch at each level.
        let mut digits = Vec::with_capacity(d);
        let mut rem = p;
        for _ in 0..d {
            digits.push(rem % b);
            rem /= b;
        }
        digits.reverse();

        let mut tokens = Vec::new();
        let mut origins = Vec::new();
        let mut logprobs: Vec<Option<f64>> = Vec::new();
        let mut turns = Vec::new();
        for &id in &prefix {
            tokens.push(id);
            origins.push(0);
            logprobs.push(None);
        }
        let mut branch_index = 0usize;
        for (k, &digit) in digits.iter().enumerate() {
            branch_index = branch_index * b + digit;
            let branch = &levels[k][branch_index];
            let offset = tokens.len();
            for (i, &id) in branch.token_ids.iter().enumerate() {
                tokens.push(id);
                origins.push(1);
                logprobs.push(Some(branch.logprobs[i]));
            }
            for &(s, e) in &branch.turn_bounds {
                turns.push(TurnRecord { start: offset + s, end: offset + e, role: Role::Assistant });
            }
        }
        calls.push(CallRecord {
            call_id: format!("task{task_index}-path{p}"),
            tokens,
            origins,
            logprobs,
            turns,
            parent_hint: None,
            train_logprobs: None,
            teacher_logprobs: None,
        });
        // Terminal reward per trajectory from the same substream.
        rewards.push((rng.next_f64() * 2.0 - 1.0 > 0.0) as u8 as f64);
    }

    TaskRecord { task, vocab_size: Some(spec.vocab_size), calls, rewards }
}
