//! Rollout records and prefix-shared trajectory trees.
//!
//! A task's rollouts arrive as linear token sequences ([`LinearCall`]) that
//! overlap heavily: sub-agents fork from a shared context, retries replay the
//! same prompt, and multi-turn loops extend earlier calls verbatim.
//! [`build_tree`] merges those sequences into a radix tree of token segments so
//! that every shared prefix is stored (and later recomputed) exactly once.
//!
//! Merging is purely content-based. Two tokens merge only when their id,
//! origin, and (for generated tokens) rollout log-probability agree
//! bit-exactly — sequences sampled under different policies must never share a
//! node, or downstream importance ratios would be corrupted. A turn is never
//! split across two nodes: when a divergence point would fall inside a turn,
//! the merge is cut back to the turn's start and the remaining tokens are
//! duplicated instead.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

pub type NodeId = u64;

/// Who produced a token: the environment/prompt or the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Prompt,
    Generated,
}

/// One token of a rollout. `rollout_logprob` is present exactly for
/// generated tokens and is the behavior policy's log-probability in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEvent {
    pub token_id: u32,
    pub origin: Origin,
    pub rollout_logprob: Option<f64>,
}

impl TokenEvent {
    pub fn prompt(token_id: u32) -> Self {
        Self { token_id, origin: Origin::Prompt, rollout_logprob: None }
    }

    pub fn generated(token_id: u32, logprob: f64) -> Self {
        Self { token_id, origin: Origin::Generated, rollout_logprob: Some(logprob) }
    }

    /// Merge key: id, origin, and exact logprob bits.
    fn key(&self) -> (u32, Origin, u64) {
        let bits = self.rollout_logprob.map(f64::to_bits).unwrap_or(0);
        (self.token_id, self.origin, bits)
    }

    pub fn merges_with(&self, other: &TokenEvent) -> bool {
        self.key() == other.key()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Assistant,
    Tool,
    User,
}

/// Half-open token range `[start, end)` with its conversational role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpan {
    pub start: usize,
    pub end: usize,
    pub role: Role,
}

impl TurnSpan {
    pub fn new(start: usize, end: usize, role: Role) -> Self {
        Self { start, end, role }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.start <= idx && idx < self.end
    }
}

/// One model invocation: the full context plus generation, with per-token
/// provenance and pre-annotated turn boundaries.
#[derive(Debug, Clone)]
pub struct LinearCall {
    pub call_id: String,
    pub vocab_size: u32,
    pub tokens: Vec<TokenEvent>,
    pub turns: Vec<TurnSpan>,
    /// Advisory scaffold hint; merging never consults it.
    pub parent_hint: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CallError {
    #[error("call {call_id}: token list is empty")]
    EmptyTokens { call_id: String },
    #[error("call {call_id}: token {index} id {token_id} >= vocab_size {vocab_size}")]
    TokenOutOfVocab { call_id: String, index: usize, token_id: u32, vocab_size: u32 },
    #[error("call {call_id}: token {index} logprob presence does not match origin")]
    LogprobPresenceMismatch { call_id: String, index: usize },
    #[error("call {call_id}: token {index} rollout logprob {logprob} is positive or non-finite")]
    InvalidLogprob { call_id: String, index: usize, logprob: f64 },
    #[error("call {call_id}: turn {index} [{start},{end}) is out of order, empty, or out of bounds")]
    MalformedTurn { call_id: String, index: usize, start: usize, end: usize },
    #[error("call {call_id}: generated token {index} is not covered by exactly one assistant turn")]
    UncoveredGenerated { call_id: String, index: usize },
}

impl LinearCall {
    pub fn new(
        call_id: impl Into<String>,
        vocab_size: u32,
        tokens: Vec<TokenEvent>,
        turns: Vec<TurnSpan>,
    ) -> Result<Self, CallError> {
        let call = Self { call_id: call_id.into(), vocab_size, tokens, turns, parent_hint: None };
        call.validate()?;
        Ok(call)
    }

    pub fn with_parent_hint(mut self, hint: impl Into<String>) -> Self {
        self.parent_hint = Some(hint.into());
        self
    }

    pub fn validate(&self) -> Result<(), CallError> {
        let id = || self.call_id.clone();
        if self.tokens.is_empty() {
            return Err(CallError::EmptyTokens { call_id: id() });
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.token_id >= self.vocab_size {
                return Err(CallError::TokenOutOfVocab {
                    call_id: id(),
                    index: i,
                    token_id: tok.token_id,
                    vocab_size: self.vocab_size,
                });
            }
            match (tok.origin, tok.rollout_logprob) {
                (Origin::Generated, Some(lp)) => {
                    if !(lp <= 0.0) || !lp.is_finite() {
                        return Err(CallError::InvalidLogprob { call_id: id(), index: i, logprob: lp });
                    }
                }
                (Origin::Prompt, None) => {}
                _ => return Err(CallError::LogprobPresenceMismatch { call_id: id(), index: i }),
            }
        }
        let mut prev_end = 0usize;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.is_empty() || turn.end > self.tokens.len() || turn.start < prev_end {
                return Err(CallError::MalformedTurn {
                    call_id: id(),
                    index: i,
                    start: turn.start,
                    end: turn.end,
                });
            }
            prev_end = turn.end;
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.origin == Origin::Generated {
                let covered = self
                    .turns
                    .iter()
                    .any(|t| t.contains(i) && t.role == Role::Assistant);
                if !covered {
                    return Err(CallError::UncoveredGenerated { call_id: id(), index: i });
                }
            }
        }
        Ok(())
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.iter().filter(|t| t.origin == Origin::Generated).count()
    }
}

/// The paper-style 5-tuple describing one RL sample: environment, toolset,
/// scaffold (with its system prompt), task instruction, and verifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub env_id: String,
    pub tools: Vec<String>,
    pub scaffold: ScaffoldSpec,
    pub instruction: String,
    pub verifier_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaffoldSpec {
    pub name: String,
    pub system_prompt: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("task spec field {field} is missing or empty")]
pub struct TaskSpecError {
    pub field: &'static str,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskSpecError> {
        if self.env_id.is_empty() {
            return Err(TaskSpecError { field: "env_id" });
        }
        if self.tools.is_empty() || self.tools.iter().any(String::is_empty) {
            return Err(TaskSpecError { field: "tools" });
        }
        if self.scaffold.name.is_empty() {
            return Err(TaskSpecError { field: "scaffold" });
        }
        if self.instruction.is_empty() {
            return Err(TaskSpecError { field: "instruction" });
        }
        if self.verifier_id.is_empty() {
            return Err(TaskSpecError { field: "verifier_id" });
        }
        Ok(())
    }
}

/// A group of G rollouts for one task with their terminal rewards. Each entry
/// is one full rollout serialized as a single call; every leaf path of the
/// merged tree is treated as one trajectory with its own reward slot.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: TaskSpec,
    pub trajectories: Vec<LinearCall>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }
}

/// One token segment of the trajectory tree.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub tokens: Vec<TokenEvent>,
    /// Node-local turn spans contributed by calls traversing this node
    /// (deduplicated union; per-call attribution lives in [`LeafPath`]).
    pub turns: Vec<TurnSpan>,
    children: Vec<NodeId>,
    /// Node-local interior offsets where a split would cut through some
    /// traversing call's turn.
    no_split: BTreeSet<usize>,
}

impl TreeNode {
    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The end of one trajectory's root-to-end path, with the originating call's
/// turn spans (in call coordinates) and a digest of its token content for
/// reconstruction checks.
#[derive(Debug, Clone)]
pub struct LeafPath {
    pub node: NodeId,
    pub call_id: String,
    pub turns: Vec<TurnSpan>,
    pub token_len: usize,
    pub token_digest: [u8; 32],
}

/// Radix-merged forest of token segments for one task's branching rollout.
#[derive(Debug, Clone)]
pub struct TrajectoryTree {
    pub vocab_size: u32,
    nodes: Vec<TreeNode>,
    pub roots: Vec<NodeId>,
    pub leaf_paths: Vec<LeafPath>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("no calls supplied")]
    EmptyInput,
    #[error("call {call_id} declares vocab_size {found}, expected {expected}")]
    InconsistentVocab { call_id: String, expected: u32, found: u32 },
    #[error(transparent)]
    InvalidCall(#[from] CallError),
}

/// A broken tree invariant. Violations are data, not errors: `validate_tree`
/// reports all of them instead of failing on the first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    CycleDetected { node: NodeId },
    MissingParent { node: NodeId, parent: NodeId },
    RootMarkedWithParent { node: NodeId },
    UnlistedRoot { node: NodeId },
    EmptyNodeTokens { node: NodeId },
    PathEndMissing { call_id: String, node: NodeId },
    PathReconstructionMismatch { call_id: String },
    TurnStraddlesNode { call_id: String, turn_index: usize },
    TurnOutOfBounds { call_id: String, turn_index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CycleDetected { node } => write!(f, "node {node}: CycleDetected"),
            Violation::MissingParent { node, parent } => {
                write!(f, "node {node}: MissingParent({parent})")
            }
            Violation::RootMarkedWithParent { node } => {
                write!(f, "node {node}: RootMarkedWithParent")
            }
            Violation::UnlistedRoot { node } => write!(f, "node {node}: UnlistedRoot"),
            Violation::EmptyNodeTokens { node } => write!(f, "node {node}: EmptyNodeTokens"),
            Violation::PathEndMissing { call_id, node } => {
                write!(f, "call {call_id}: PathEndMissing({node})")
            }
            Violation::PathReconstructionMismatch { call_id } => {
                write!(f, "call {call_id}: PathReconstructionMismatch")
            }
            Violation::TurnStraddlesNode { call_id, turn_index } => {
                write!(f, "call {call_id}: TurnStraddlesNode(turn {turn_index})")
            }
            Violation::TurnOutOfBounds { call_id, turn_index } => {
                write!(f, "call {call_id}: TurnOutOfBounds(turn {turn_index})")
            }
        }
    }
}

/// Counters produced by [`tree_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreeStats {
    pub tree_tokens: u64,
    pub linear_tokens: u64,
    pub redundancy_ratio: f64,
}

pub fn token_digest(tokens: &[TokenEvent]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for tok in tokens {
        hasher.update(tok.token_id.to_le_bytes());
        hasher.update([match tok.origin {
            Origin::Prompt => 0u8,
            Origin::Generated => 1u8,
        }]);
        hasher.update(tok.rollout_logprob.map(f64::to_bits).unwrap_or(0).to_le_bytes());
    }
    hasher.finalize().into()
}

impl TrajectoryTree {
    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node ids from the root down to `end`, inclusive.
    pub fn path_to(&self, end: NodeId) -> Vec<NodeId> {
        let mut path = vec![end];
        let mut cur = end;
        while let Some(p) = self.nodes[cur as usize].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Token events along the root-to-`end` path, concatenated.
    pub fn path_tokens(&self, end: NodeId) -> Vec<TokenEvent> {
        self.path_to(end)
            .into_iter()
            .flat_map(|id| self.nodes[id as usize].tokens.iter().copied())
            .collect()
    }

    pub fn total_tokens(&self) -> u64 {
        self.nodes.iter().map(|n| n.len() as u64).sum()
    }

    /// Build a tree directly from parts. Intended for tests and oracles;
    /// `build_tree` is the production path. Leaf paths are installed for
    /// every leaf node with synthetic call ids and self-consistent digests.
    pub fn from_parts(vocab_size: u32, nodes: Vec<(Option<NodeId>, Vec<TokenEvent>)>) -> Self {
        let mut tree_nodes: Vec<TreeNode> = nodes
            .iter()
            .enumerate()
            .map(|(i, (parent, tokens))| TreeNode {
                id: i as NodeId,
                parent: *parent,
                tokens: tokens.clone(),
                turns: Vec::new(),
                children: Vec::new(),
                no_split: BTreeSet::new(),
            })
            .collect();
        let mut roots = Vec::new();
        for i in 0..tree_nodes.len() {
            match tree_nodes[i].parent {
                Some(p) => tree_nodes[p as usize].children.push(i as NodeId),
                None => roots.push(i as NodeId),
            }
        }
        for node in &mut tree_nodes {
            node.children.sort_unstable();
        }
        let mut tree = Self { vocab_size, nodes: tree_nodes, roots, leaf_paths: Vec::new() };
        let leaves: Vec<NodeId> = tree
            .nodes
            .iter()
            .filter(|n| n.children.is_empty())
            .map(|n| n.id)
            .collect();
        for (k, leaf) in leaves.into_iter().enumerate() {
            let tokens = tree.path_tokens(leaf);
            tree.leaf_paths.push(LeafPath {
                node: leaf,
                call_id: format!("path-{k}"),
                turns: Vec::new(),
                token_len: tokens.len(),
                token_digest: token_digest(&tokens),
            });
        }
        tree
    }
}

/// Merge a set of linear calls into a prefix-shared trajectory tree.
///
/// Calls are inserted in order; children keep insertion order, which equals
/// ascending node id, so the result is deterministic. Each call contributes
/// one [`LeafPath`] entry (identical calls share their end node).
pub fn build_tree(calls: &[LinearCall]) -> Result<TrajectoryTree, TreeError> {
    if calls.is_empty() {
        return Err(TreeError::EmptyInput);
    }
    let vocab_size = calls[0].vocab_size;
    for call in calls {
        call.validate()?;
        if call.vocab_size != vocab_size {
            return Err(TreeError::InconsistentVocab {
                call_id: call.call_id.clone(),
                expected: vocab_size,
                found: call.vocab_size,
            });
        }
    }

    let mut builder = Builder { nodes: Vec::new(), top: Vec::new(), ends: Vec::new() };
    for call in calls {
        builder.insert(call);
    }
    let ends = std::mem::take(&mut builder.ends);

    // A single top-level node is the root; divergence at offset zero gets a
    // synthetic empty root so the structure stays one tree per task.
    let roots = if builder.top.len() == 1 {
        vec![builder.top[0]]
    } else {
        let root_id = builder.nodes.len() as NodeId;
        let top = std::mem::take(&mut builder.top);
        for &child in &top {
            builder.nodes[child as usize].parent = Some(root_id);
        }
        builder.nodes.push(TreeNode {
            id: root_id,
            parent: None,
            tokens: Vec::new(),
            turns: Vec::new(),
            children: top,
            no_split: BTreeSet::new(),
        });
        vec![root_id]
    };

    let mut tree = TrajectoryTree { vocab_size, nodes: builder.nodes, roots, leaf_paths: Vec::new() };
    for (call, end) in calls.iter().zip(ends) {
        tree.leaf_paths.push(LeafPath {
            node: end,
            call_id: call.call_id.clone(),
            turns: call.turns.clone(),
            token_len: call.tokens.len(),
            token_digest: token_digest(&call.tokens),
        });
    }
    install_node_turns(&mut tree);
    Ok(tree)
}

struct Builder {
    nodes: Vec<TreeNode>,
    /// Top-level nodes (children of the virtual root).
    top: Vec<NodeId>,
    /// Path-end node of each inserted call, kept current across splits.
    ends: Vec<NodeId>,
}

impl Builder {
    fn insert(&mut self, call: &LinearCall) {
        let mut pos = 0usize; // consumed tokens of `call`
        let mut at: Option<NodeId> = None; // node whose children we scan next

        loop {
            let siblings: &[NodeId] = match at {
                Some(id) => &self.nodes[id as usize].children,
                None => &self.top,
            };

            // Pick the child with the longest post-cut shared prefix;
            // ties keep the lowest node id.
            let mut best: Option<(NodeId, usize)> = None;
            for &child in siblings {
                let m = self.effective_merge_len(child, call, pos);
                if m > 0 && best.map_or(true, |(_, bm)| m > bm) {
                    best = Some((child, m));
                }
            }

            match best {
                None => {
                    // No sharing possible: the rest of the call becomes one new node.
                    let id = self.new_node(at, call, pos);
                    self.ends.push(id);
                    return;
                }
                Some((child, m)) => {
                    if m < self.nodes[child as usize].len() {
                        self.split(child, m);
                    }
                    self.mark_no_split(child, call, pos);
                    pos += m;
                    at = Some(child);
                    if pos == call.tokens.len() {
                        self.ends.push(child);
                        return;
                    }
                }
            }
        }
    }

    /// Longest shared prefix between `call[pos..]` and `child`'s tokens,
    /// shortened so that no turn of the incoming call and no recorded turn of
    /// prior calls straddles the resulting cut.
    fn effective_merge_len(&self, child: NodeId, call: &LinearCall, pos: usize) -> usize {
        let node = &self.nodes[child as usize];
        let raw_cap = node.len().min(call.tokens.len() - pos);
        let mut raw = 0;
        while raw < raw_cap && node.tokens[raw].merges_with(&call.tokens[pos + raw]) {
            raw += 1;
        }
        let mut m = raw;
        loop {
            if m == 0 {
                return 0;
            }
            // Splitting the node strictly inside a prior call's turn is
            // forbidden.
            if m < node.len() && node.no_split.contains(&m) {
                m -= 1;
                continue;
            }
            // The cut position in call coordinates must not fall strictly
            // inside one of the call's own turns, unless the call ends here
            // and the node needs no split (no new boundary is created).
            let cut = pos + m;
            let call_ends_here = cut == call.tokens.len() && m == node.len();
            if !call_ends_here {
                if let Some(turn) = call.turns.iter().find(|t| t.start < cut && cut < t.end) {
                    m = turn.start.saturating_sub(pos);
                    continue;
                }
            }
            return m;
        }
    }

    /// Record, on `child` (which the call fully traverses at offset `pos`),
    /// the interior offsets that fall strictly inside one of `call`'s turns,
    /// so later inserts cannot split there.
    fn mark_no_split(&mut self, child: NodeId, call: &LinearCall, pos: usize) {
        let len = self.nodes[child as usize].len();
        let mut offsets = Vec::new();
        for turn in &call.turns {
            for k in 1..len {
                if turn.start < pos + k && pos + k < turn.end {
                    offsets.push(k);
                }
            }
        }
        self.nodes[child as usize].no_split.extend(offsets);
    }

    fn new_node(&mut self, parent: Option<NodeId>, call: &LinearCall, pos: usize) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let tokens: Vec<TokenEvent> = call.tokens[pos..].to_vec();
        let len = tokens.len();
        let mut no_split = BTreeSet::new();
        for turn in &call.turns {
            for k in 1..len {
                if turn.start < pos + k && pos + k < turn.end {
                    no_split.insert(k);
                }
            }
        }
        self.nodes.push(TreeNode {
            id,
            parent,
            tokens,
            turns: Vec::new(),
            children: Vec::new(),
            no_split,
        });
        match parent {
            Some(p) => self.nodes[p as usize].children.push(id),
            None => self.top.push(id),
        }
        id
    }

    /// Split `node` at local offset `m`: the node keeps `[0, m)` and a new
    /// child takes `[m, len)` along with the original children.
    fn split(&mut self, node: NodeId, m: usize) {
        let tail_id = self.nodes.len() as NodeId;
        let n = &mut self.nodes[node as usize];
        debug_assert!(m > 0 && m < n.len());
        debug_assert!(!n.no_split.contains(&m));
        let tail_tokens = n.tokens.split_off(m);
        let tail_children = std::mem::take(&mut n.children);
        let no_split = std::mem::take(&mut n.no_split);
        let (head_ns, tail_ns): (BTreeSet<usize>, BTreeSet<usize>) =
            no_split.into_iter().partition(|&k| k < m);
        n.no_split = head_ns;
        n.children = vec![tail_id];
        let tail = TreeNode {
            id: tail_id,
            parent: Some(node),
            tokens: tail_tokens,
            turns: Vec::new(),
            children: tail_children,
            no_split: tail_ns.into_iter().map(|k| k - m).collect(),
        };
        for &c in &tail.children {
            self.nodes[c as usize].parent = Some(tail_id);
        }
        self.nodes.push(tail);
        // Calls that ended at this node ended at its last token, which now
        // lives in the tail.
        for end in &mut self.ends {
            if *end == node {
                *end = tail_id;
            }
        }
    }
}

/// Fill every node's local turn list from the per-call spans in `leaf_paths`.
fn install_node_turns(tree: &mut TrajectoryTree) {
    let mut per_node: Vec<BTreeSet<(usize, usize, Role)>> =
        vec![BTreeSet::new(); tree.nodes.len()];
    for lp in &tree.leaf_paths {
        let path = tree.path_to(lp.node);
        let mut offset = 0usize;
        for node_id in path {
            let len = tree.nodes[node_id as usize].len();
            for turn in &lp.turns {
                if turn.start >= offset && turn.end <= offset + len && !turn.is_empty() {
                    per_node[node_id as usize].insert((
                        turn.start - offset,
                        turn.end - offset,
                        turn.role,
                    ));
                }
            }
            offset += len;
        }
    }
    for (node, spans) in tree.nodes.iter_mut().zip(per_node) {
        node.turns = spans
            .into_iter()
            .map(|(start, end, role)| TurnSpan { start, end, role })
            .collect();
    }
}

/// Token accounting: total stored tokens, total per-path tokens, and their
/// ratio (the compute-saving factor of training on the tree once instead of
/// on every path independently).
pub fn tree_stats(tree: &TrajectoryTree) -> TreeStats {
    let tree_tokens = tree.total_tokens();
    let linear_tokens: u64 = tree.leaf_paths.iter().map(|lp| lp.token_len as u64).sum();
    let redundancy_ratio = if tree_tokens == 0 {
        1.0
    } else {
        linear_tokens as f64 / tree_tokens as f64
    };
    TreeStats { tree_tokens, linear_tokens, redundancy_ratio }
}

/// Check every structural invariant and report all violations found.
pub fn validate_tree(tree: &TrajectoryTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = tree.nodes.len();
    let root_set: BTreeSet<NodeId> = tree.roots.iter().copied().collect();

    for node in &tree.nodes {
        match node.parent {
            Some(p) => {
                if p as usize >= n {
                    out.push(Violation::MissingParent { node: node.id, parent: p });
                }
                if root_set.contains(&node.id) {
                    out.push(Violation::RootMarkedWithParent { node: node.id });
                }
            }
            None => {
                if !root_set.contains(&node.id) {
                    out.push(Violation::UnlistedRoot { node: node.id });
                }
            }
        }
    }

    // Cycle check: walk parent chains with a step budget.
    for node in &tree.nodes {
        let mut cur = node.id;
        let mut steps = 0usize;
        loop {
            match tree.nodes.get(cur as usize).and_then(|x| x.parent) {
                Some(p) => {
                    if p == node.id || steps > n {
                        out.push(Violation::CycleDetected { node: node.id });
                        break;
                    }
                    cur = p;
                    steps += 1;
                }
                None => break,
            }
        }
    }
    if out.iter().any(|v| matches!(v, Violation::CycleDetected { .. })) {
        return out; // path walks below would not terminate
    }

    // Empty token lists: only a root with at least two children may be empty.
    for node in &tree.nodes {
        if node.tokens.is_empty() {
            let synthetic_root = node.parent.is_none() && node.children.len() >= 2;
            if !synthetic_root {
                out.push(Violation::EmptyNodeTokens { node: node.id });
            }
        }
    }

    for lp in &tree.leaf_paths {
        if lp.node as usize >= n {
            out.push(Violation::PathEndMissing { call_id: lp.call_id.clone(), node: lp.node });
            continue;
        }
        let tokens = tree.path_tokens(lp.node);
        if tokens.len() != lp.token_len || token_digest(&tokens) != lp.token_digest {
            out.push(Violation::PathReconstructionMismatch { call_id: lp.call_id.clone() });
        }
        // Every turn must land inside a single node of the path.
        let path = tree.path_to(lp.node);
        let mut bounds = Vec::new();
        let mut offset = 0usize;
        for id in &path {
            let len = tree.nodes[*id as usize].len();
            bounds.push((offset, offset + len));
            offset += len;
        }
        for (ti, turn) in lp.turns.iter().enumerate() {
            if turn.end > offset || turn.is_empty() {
                out.push(Violation::TurnOutOfBounds { call_id: lp.call_id.clone(), turn_index: ti });
                continue;
            }
            let inside_one = bounds.iter().any(|&(s, e)| s <= turn.start && turn.end <= e);
            if !inside_one {
                out.push(Violation::TurnStraddlesNode { call_id: lp.call_id.clone(), turn_index: ti });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_tokens(ids: &[u32]) -> Vec<TokenEvent> {
        ids.iter().map(|&id| TokenEvent::generated(id, -0.5 - id as f64 * 0.01)).collect()
    }

    fn call_of(id: &str, ids: &[u32]) -> LinearCall {
        // Single-token turns keep every divergence point on a turn boundary.
        let tokens = gen_tokens(ids);
        let turns = (0..tokens.len()).map(|i| TurnSpan::new(i, i + 1, Role::Assistant)).collect();
        LinearCall::new(id, 100, tokens, turns).unwrap()
    }

    #[test]
    fn two_calls_share_prefix() {
        // [1,2,3,4] and [1,2,5] -> shared [1,2] with children [3,4] and [5].
        let c1 = call_of("a", &[1, 2, 3, 4]);
        let c2 = call_of("b", &[1, 2, 5]);
        let tree = build_tree(&[c1, c2]).unwrap();
        assert_eq!(tree.node_count(), 3);
        let stats = tree_stats(&tree);
        assert_eq!(stats.tree_tokens, 5);
        assert_eq!(stats.linear_tokens, 7);
        assert!((stats.redundancy_ratio - 1.4).abs() < 1e-15);
        assert!(validate_tree(&tree).is_empty());
    }

    #[test]
    fn single_call_is_one_node() {
        let tree = build_tree(&[call_of("only", &[7, 7, 7])]).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.roots.len(), 1);
        let stats = tree_stats(&tree);
        assert_eq!(stats.tree_tokens, 3);
        assert!((stats.redundancy_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eight_branches_off_shared_prompt() {
        // 100-token shared prompt, then 10 distinct generated tokens each.
        let mut calls = Vec::new();
        for b in 0..8u32 {
            let mut tokens: Vec<TokenEvent> = (0..100).map(|i| TokenEvent::prompt(i % 50)).collect();
            for i in 0..10u32 {
                tokens.push(TokenEvent::generated(60 + b, -0.1 - i as f64));
            }
            let turns = vec![TurnSpan::new(100, 110, Role::Assistant)];
            calls.push(LinearCall::new(format!("c{b}"), 128, tokens, turns).unwrap());
        }
        let tree = build_tree(&calls).unwrap();
        let stats = tree_stats(&tree);
        assert_eq!(stats.tree_tokens, 180);
        assert_eq!(stats.linear_tokens, 880);
        // Exhaustive path reconstruction.
        for (lp, call) in tree.leaf_paths.iter().zip(&calls) {
            assert_eq!(tree.path_tokens(lp.node), call.tokens);
        }
        assert!(validate_tree(&tree).is_empty());
    }

    #[test]
    fn different_logprobs_do_not_merge() {
        let t1 = vec![TokenEvent::generated(5, -0.25)];
        let t2 = vec![TokenEvent::generated(5, -0.50)];
        let c1 = LinearCall::new("a", 10, t1, vec![TurnSpan::new(0, 1, Role::Assistant)]).unwrap();
        let c2 = LinearCall::new("b", 10, t2, vec![TurnSpan::new(0, 1, Role::Assistant)]).unwrap();
        let tree = build_tree(&[c1, c2]).unwrap();
        // Synthetic empty root with two children.
        assert_eq!(tree.node_count(), 3);
        let root = tree.node(tree.roots[0]);
        assert!(root.is_empty());
        assert_eq!(root.children().len(), 2);
        assert!(validate_tree(&tree).is_empty());
    }

    #[test]
    fn origin_mismatch_prevents_merge() {
        let c1 = LinearCall::new("a", 10, vec![TokenEvent::prompt(3)], vec![]).unwrap();
        let c2 = LinearCall::new(
            "b",
            10,
            vec![TokenEvent::generated(3, -0.1)],
            vec![TurnSpan::new(0, 1, Role::Assistant)],
        )
        .unwrap();
        let tree = build_tree(&[c1, c2]).unwrap();
        assert_eq!(tree.node(tree.roots[0]).children().len(), 2);
    }

    #[test]
    fn merge_is_cut_at_turn_boundary() {
        // Both calls share [p0, p1, g2, g3(, g4)] bit-exactly but the second
        // diverges two tokens into the assistant turn; the shared segment must
        // stop at the turn start instead of splitting the turn.
        let shared_gen = [(2u32, -0.2), (3u32, -0.3)];
        let mk = |id: &str, tail: &[(u32, f64)]| {
            let mut tokens = vec![TokenEvent::prompt(0), TokenEvent::prompt(1)];
            for (t, lp) in shared_gen.iter().chain(tail) {
                tokens.push(TokenEvent::generated(*t, *lp));
            }
            let turns = vec![TurnSpan::new(2, tokens.len(), Role::Assistant)];
            LinearCall::new(id, 10, tokens, turns).unwrap()
        };
        let c1 = mk("a", &[(4, -0.4)]);
        let c2 = mk("b", &[(5, -0.5)]);
        let tree = build_tree(&[c1.clone(), c2.clone()]).unwrap();
        // Shared node holds only the prompt; both generated runs are intact
        // siblings (they still share [g2, g3] textually, by design).
        let root = tree.node(tree.roots[0]);
        assert_eq!(root.len(), 2);
        assert_eq!(root.children().len(), 2);
        for (lp, call) in tree.leaf_paths.iter().zip([&c1, &c2]) {
            assert_eq!(tree.path_tokens(lp.node), call.tokens);
        }
        assert!(validate_tree(&tree).is_empty());
    }

    #[test]
    fn prefix_call_ends_at_interior_node() {
        // Multi-turn rollouts arrive as prefix chains; the earlier call's path
        // must end exactly at an interior node after a split.
        let mut long = vec![TokenEvent::prompt(0)];
        long.push(TokenEvent::generated(1, -0.1));
        long.push(TokenEvent::prompt(2));
        long.push(TokenEvent::generated(3, -0.3));
        let long_turns = vec![
            TurnSpan::new(1, 2, Role::Assistant),
            TurnSpan::new(2, 3, Role::Tool),
            TurnSpan::new(3, 4, Role::Assistant),
        ];
        let short = LinearCall::new(
            "short",
            10,
            long[..2].to_vec(),
            vec![TurnSpan::new(1, 2, Role::Assistant)],
        )
        .unwrap();
        let long = LinearCall::new("long", 10, long, long_turns).unwrap();

        for order in [vec![short.clone(), long.clone()], vec![long.clone(), short.clone()]] {
            let tree = build_tree(&order).unwrap();
            let stats = tree_stats(&tree);
            assert_eq!(stats.tree_tokens, 4, "prefix chain must share fully");
            assert_eq!(stats.linear_tokens, 6);
            assert!(validate_tree(&tree).is_empty());
            for lp in &tree.leaf_paths {
                let call = order.iter().find(|c| c.call_id == lp.call_id).unwrap();
                assert_eq!(tree.path_tokens(lp.node), call.tokens);
            }
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(build_tree(&[]).unwrap_err(), TreeError::EmptyInput);
    }

    #[test]
    fn inconsistent_vocab_rejected() {
        let c1 = call_of("a", &[1]);
        let mut c2 = call_of("b", &[2]);
        c2.vocab_size = 7;
        match build_tree(&[c1, c2]) {
            Err(TreeError::InconsistentVocab { call_id, .. }) => assert_eq!(call_id, "b"),
            other => panic!("expected InconsistentVocab, got {other:?}"),
        }
    }

    #[test]
    fn validate_flags_self_parent_cycle() {
        let mut tree = TrajectoryTree::from_parts(10, vec![(None, gen_tokens(&[1, 2]))]);
        tree.nodes[0].parent = Some(0);
        let violations = validate_tree(&tree);
        assert!(violations.iter().any(|v| matches!(v, Violation::CycleDetected { node: 0 })));
    }

    #[test]
    fn validate_flags_reconstruction_mismatch() {
        let mut tree = TrajectoryTree::from_parts(10, vec![(None, gen_tokens(&[1, 2, 3]))]);
        tree.nodes[0].tokens[1] = TokenEvent::generated(9, -0.9);
        let violations = validate_tree(&tree);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::PathReconstructionMismatch { .. })));
    }

    #[test]
    fn validate_flags_empty_non_root() {
        let tree = TrajectoryTree::from_parts(
            10,
            vec![(None, gen_tokens(&[1])), (Some(0), Vec::new())],
        );
        let violations = validate_tree(&tree);
        assert!(violations.iter().any(|v| matches!(v, Violation::EmptyNodeTokens { node: 1 })));
    }

    #[test]
    fn well_formed_tree_has_no_violations() {
        let tree = TrajectoryTree::from_parts(
            10,
            vec![
                (None, gen_tokens(&[1, 2])),
                (Some(0), gen_tokens(&[3])),
                (Some(0), gen_tokens(&[4, 5])),
            ],
        );
        assert!(validate_tree(&tree).is_empty());
    }

    #[test]
    fn call_validation_catches_uncovered_generated() {
        let err = LinearCall::new("x", 10, vec![TokenEvent::generated(1, -0.1)], vec![]);
        assert!(matches!(err, Err(CallError::UncoveredGenerated { .. })));
    }

    #[test]
    fn call_validation_catches_positive_logprob() {
        let err = LinearCall::new(
            "x",
            10,
            vec![TokenEvent::generated(1, 0.5)],
            vec![TurnSpan::new(0, 1, Role::Assistant)],
        );
        assert!(matches!(err, Err(CallError::InvalidLogprob { .. })));
    }

    #[test]
    fn task_spec_requires_all_fields() {
        let spec = TaskSpec {
            env_id: "env".into(),
            tools: vec!["bash".into()],
            scaffold: ScaffoldSpec { name: "agent".into(), system_prompt: "be useful".into() },
            instruction: "fix it".into(),
            verifier_id: "tests".into(),
        };
        assert!(spec.validate().is_ok());
        let mut missing = spec.clone();
        missing.instruction.clear();
        assert_eq!(missing.validate().unwrap_err().field, "instruction");
    }
}
