//! Policy-objective kernels and data-curation predicates.
//!
//! Pure numeric functions over per-token log-probabilities:
//!
//! * [`group_advantages`] — group-relative advantages over a rollout group's
//!   rewards, broadcast as a constant to every turn of the trajectory;
//! * [`turn_ratios`] — one importance ratio per interaction turn, the product
//!   of per-token train/rollout probability ratios accumulated in log space;
//! * [`turn_level_objective`] — the clipped surrogate at turn granularity,
//!   with exact per-token gradients through the train log-probabilities;
//! * [`gspo_reference`] / [`grpo_reference`] — the sequence-level and
//!   token-level reductions, kept as independent oracles: the turn-level
//!   objective must equal GSPO when a trajectory is one turn and GRPO when
//!   every turn is one token;
//! * [`opd_loss`] — per-token teacher/student log-probability gap on sampled
//!   tokens (a single-sample reverse-KL surrogate) and the combined loss;
//! * [`pass_at_k_filter`] and [`f2p_p2p_verify`] — the curation predicates.

use crate::trajectory::{Origin, Role, TurnSpan};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// How advantages are normalized within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AdvantageMode {
    /// `(R - mean) / (std + std_floor)` with the population standard
    /// deviation (groups are small and fixed, not sampled from).
    #[default]
    MeanStdNorm,
    /// `R - mean`.
    MeanOnly,
}

/// Whether the batch value averages per-trajectory objectives or pools all
/// turns across the group before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TurnAggregation {
    #[default]
    PerTrajectoryMean,
    PooledTurns,
}

/// Knobs shared by the objective kernels. Field names are the config-file
/// contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub clip_epsilon: f64,
    pub advantage_mode: AdvantageMode,
    pub std_floor: f64,
    pub log_ratio_clamp: f64,
    pub opd_lambda: f64,
    pub icepop_threshold: f64,
    pub turn_aggregation: TurnAggregation,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            advantage_mode: AdvantageMode::MeanStdNorm,
            std_floor: 1e-8,
            log_ratio_clamp: 20.0,
            opd_lambda: 1.0,
            icepop_threshold: std::f64::consts::LN_2,
            turn_aggregation: TurnAggregation::PerTrajectoryMean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(ObjectiveError::BadConfig("clip_epsilon must be in (0, 1)".into()));
        }
        if self.std_floor < 0.0 || self.log_ratio_clamp <= 0.0 {
            return Err(ObjectiveError::BadConfig(
                "std_floor must be >= 0 and log_ratio_clamp > 0".into(),
            ));
        }
        if self.opd_lambda < 0.0 || self.icepop_threshold <= 0.0 {
            return Err(ObjectiveError::BadConfig(
                "opd_lambda must be >= 0 and icepop_threshold > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("group of {got} rewards too small, need at least {need}")]
    GroupTooSmall { got: usize, need: usize },
    #[error("generated token {index} is not covered by any turn")]
    UncoveredGeneratedToken { index: usize },
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("missing test result for {id}")]
    MissingTestResult { id: String },
    #[error("test id {id} appears in both the fail and pass sets")]
    OverlappingTestSets { id: String },
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Group-relative advantages. With `MeanStdNorm` a zero-variance group maps
/// to all-zero advantages rather than amplifying noise through the floor.
pub fn group_advantages(rewards: &[f64], cfg: &ObjectiveConfig) -> Result<Vec<f64>, ObjectiveError> {
    let g = rewards.len();
    let need = match cfg.advantage_mode {
        AdvantageMode::MeanStdNorm => 2,
        AdvantageMode::MeanOnly => 1,
    };
    if g < need {
        return Err(ObjectiveError::GroupTooSmall { got: g, need });
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    match cfg.advantage_mode {
        AdvantageMode::MeanOnly => Ok(rewards.iter().map(|r| r - mean).collect()),
        AdvantageMode::MeanStdNorm => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
            let std = var.sqrt();
            if std == 0.0 {
                return Ok(vec![0.0; g]);
            }
            Ok(rewards.iter().map(|r| (r - mean) / (std + cfg.std_floor)).collect())
        }
    }
}

/// Per-token views of one trajectory used by the objective kernels. All
/// arrays are aligned with the trajectory's token sequence; log-probabilities
/// are present exactly for generated tokens.
#[derive(Debug, Clone)]
pub struct TrajectoryTokens {
    pub origins: Vec<Origin>,
    pub rollout_logprobs: Vec<Option<f64>>,
    pub train_logprobs: Vec<Option<f64>>,
    pub turns: Vec<TurnSpan>,
    /// Optional per-token keep flags (discrepancy clipping); `None` keeps all.
    pub keep: Option<Vec<bool>>,
}

impl TrajectoryTokens {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn check_alignment(&self) -> Result<(), ObjectiveError> {
        let t = self.origins.len();
        if self.rollout_logprobs.len() != t || self.train_logprobs.len() != t {
            return Err(ObjectiveError::AlignmentMismatch(format!(
                "{} origins vs {} rollout vs {} train entries",
                t,
                self.rollout_logprobs.len(),
                self.train_logprobs.len()
            )));
        }
        if let Some(keep) = &self.keep {
            if keep.len() != t {
                return Err(ObjectiveError::AlignmentMismatch(format!(
                    "{} keep flags for {t} tokens",
                    keep.len()
                )));
            }
        }
        for i in 0..t {
            let gen = self.origins[i] == Origin::Generated;
            if gen && (self.rollout_logprobs[i].is_none() || self.train_logprobs[i].is_none()) {
                return Err(ObjectiveError::AlignmentMismatch(format!(
                    "generated token {i} lacks a log-probability"
                )));
            }
        }
        Ok(())
    }

    fn kept(&self, i: usize) -> bool {
        self.keep.as_ref().map_or(true, |k| k[i])
    }

    /// Indices of generated tokens inside assistant turns, turn by turn.
    /// Turns without generated members carry no policy action and are
    /// skipped (they do not count toward N).
    fn assistant_turn_members(&self) -> Result<Vec<Vec<usize>>, ObjectiveError> {
        let mut members = Vec::new();
        for turn in self.turns.iter().filter(|t| t.role == Role::Assistant) {
            let m: Vec<usize> = (turn.start..turn.end)
                .filter(|&i| self.origins[i] == Origin::Generated)
                .collect();
            if !m.is_empty() {
                members.push(m);
            }
        }
        // Every generated token must be covered by exactly one turn.
        let mut covered = vec![false; self.len()];
        for m in &members {
            for &i in m {
                covered[i] = true;
            }
        }
        for i in 0..self.len() {
            if self.origins[i] == Origin::Generated && !covered[i] {
                return Err(ObjectiveError::UncoveredGeneratedToken { index: i });
            }
        }
        Ok(members)
    }
}

/// Per-turn importance ratios of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnRatios {
    /// Clamped log-space values, one per assistant turn.
    pub log_ratios: Vec<f64>,
    /// `exp` of the clamped log values.
    pub ratios: Vec<f64>,
    /// Whether the clamp engaged per turn (freezes that turn's gradient).
    pub clamped: Vec<bool>,
}

/// Per-turn ratio `prod_i train_i / rollout_i` over the turn's kept generated
/// tokens, accumulated in log space and clamped to
/// `[-log_ratio_clamp, +log_ratio_clamp]` before exponentiation.
pub fn turn_ratios(
    traj: &TrajectoryTokens,
    cfg: &ObjectiveConfig,
) -> Result<TurnRatios, ObjectiveError> {
    traj.check_alignment()?;
    let members = traj.assistant_turn_members()?;
    let mut log_ratios = Vec::with_capacity(members.len());
    let mut ratios = Vec::with_capacity(members.len());
    let mut clamped = Vec::with_capacity(members.len());
    for turn in &members {
        let mut log_r = 0.0;
        for &i in turn {
            if traj.kept(i) {
                log_r += traj.train_logprobs[i].unwrap() - traj.rollout_logprobs[i].unwrap();
            }
        }
        let was_clamped = log_r.abs() > cfg.log_ratio_clamp;
        let log_r = log_r.clamp(-cfg.log_ratio_clamp, cfg.log_ratio_clamp);
        log_ratios.push(log_r);
        ratios.push(log_r.exp());
        clamped.push(was_clamped);
    }
    Ok(TurnRatios { log_ratios, ratios, clamped })
}

/// Outcome of the turn-level objective for one trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryObjective {
    pub advantage: f64,
    pub num_turns: usize,
    pub ratios: TurnRatios,
    /// min(r A, clip(r) A) per turn.
    pub turn_values: Vec<f64>,
    /// Whether the clipped branch was strictly smaller (gradient frozen).
    pub clip_active: Vec<bool>,
    /// Mean of `turn_values`.
    pub value: f64,
}

/// Batch outcome: the objective value plus exact per-token gradients through
/// the train log-probabilities (rollout log-probabilities are constants).
#[derive(Debug, Clone)]
pub struct ObjectiveOutcome {
    pub value: f64,
    pub per_trajectory: Vec<TrajectoryObjective>,
    /// Gradient of `value` w.r.t. each trajectory's per-token train
    /// log-probabilities (zero on prompt, dropped, clipped, or clamped
    /// tokens).
    pub token_grads: Vec<Vec<f64>>,
}

/// Turn-level clipped surrogate over a group of trajectories.
///
/// Per trajectory: `(1/N) sum_n min(r_n A, clip(r_n, 1-eps, 1+eps) A)`, with
/// `A` the trajectory's group advantage broadcast to every turn. The batch
/// value averages trajectories (or pooled turns, per config). Gradients flow
/// only where the unclipped branch is active and the log clamp is inert.
pub fn turn_level_objective(
    group: &[TrajectoryTokens],
    rewards: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutcome, ObjectiveError> {
    cfg.validate()?;
    if group.len() != rewards.len() {
        return Err(ObjectiveError::AlignmentMismatch(format!(
            "{} trajectories vs {} rewards",
            group.len(),
            rewards.len()
        )));
    }
    let advantages = group_advantages(rewards, cfg)?;
    let mut per_trajectory = Vec::with_capacity(group.len());
    let mut token_grads = Vec::with_capacity(group.len());

    let mut pooled_sum = 0.0;
    let mut pooled_turns = 0usize;

    for (traj, &adv) in group.iter().zip(&advantages) {
        let ratios = turn_ratios(traj, cfg)?;
        let members = traj.assistant_turn_members()?;
        let n = ratios.ratios.len();
        let mut turn_values = Vec::with_capacity(n);
        let mut clip_active = Vec::with_capacity(n);
        let mut grads = vec![0.0; traj.len()];

        for (t, &r) in ratios.ratios.iter().enumerate() {
            let clipped_r = r.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
            let unclipped = r * adv;
            let clipped = clipped_r * adv;
            let value = unclipped.min(clipped);
            // Ties take the unclipped branch, so within the trust region the
            // gradient equals the unclipped surrogate's.
            let active_clip = clipped < unclipped;
            turn_values.push(value);
            clip_active.push(active_clip);
            if !active_clip && !ratios.clamped[t] && n > 0 {
                // d value / d train_lp_i = r * A / N for kept members.
                let g = r * adv / n as f64;
                for &i in &members[t] {
                    if traj.kept(i) {
                        grads[i] = g;
                    }
                }
            }
        }

        let value = if n == 0 { 0.0 } else { turn_values.iter().sum::<f64>() / n as f64 };
        pooled_sum += turn_values.iter().sum::<f64>();
        pooled_turns += n;
        per_trajectory.push(TrajectoryObjective {
            advantage: adv,
            num_turns: n,
            ratios,
            turn_values,
            clip_active,
            value,
        });
        token_grads.push(grads);
    }

    let g = group.len() as f64;
    let value = match cfg.turn_aggregation {
        TurnAggregation::PerTrajectoryMean => {
            per_trajectory.iter().map(|t| t.value).sum::<f64>() / g
        }
        TurnAggregation::PooledTurns => {
            if pooled_turns == 0 {
                0.0
            } else {
                pooled_sum / pooled_turns as f64
            }
        }
    };

    // Scale per-token gradients by the outer average.
    for (traj_grads, traj) in token_grads.iter_mut().zip(&per_trajectory) {
        let outer = match cfg.turn_aggregation {
            TurnAggregation::PerTrajectoryMean => 1.0 / g,
            TurnAggregation::PooledTurns => {
                if pooled_turns == 0 {
                    0.0
                } else {
                    // Undo the per-trajectory 1/N, apply 1/pooled.
                    traj.num_turns as f64 / pooled_turns as f64
                }
            }
        };
        for x in traj_grads.iter_mut() {
            *x *= outer;
        }
    }

    Ok(ObjectiveOutcome { value, per_trajectory, token_grads })
}

/// Sequence-level reduction: one ratio over all kept generated tokens per
/// trajectory, same clip rule, mean over trajectories. Reduction oracle for
/// the N=1 case.
pub fn gspo_reference(
    group: &[TrajectoryTokens],
    rewards: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    if group.len() != rewards.len() {
        return Err(ObjectiveError::AlignmentMismatch(format!(
            "{} trajectories vs {} rewards",
            group.len(),
            rewards.len()
        )));
    }
    let advantages = group_advantages(rewards, cfg)?;
    let mut total = 0.0;
    for (traj, &adv) in group.iter().zip(&advantages) {
        traj.check_alignment()?;
        let members = traj.assistant_turn_members()?;
        let mut log_r = 0.0;
        for turn in &members {
            for &i in turn {
                if traj.kept(i) {
                    log_r += traj.train_logprobs[i].unwrap() - traj.rollout_logprobs[i].unwrap();
                }
            }
        }
        let r = log_r.clamp(-cfg.log_ratio_clamp, cfg.log_ratio_clamp).exp();
        let clipped = r.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
        total += (r * adv).min(clipped * adv);
    }
    Ok(total / group.len() as f64)
}

/// Token-level reduction: per-token ratio and clip, mean over each
/// trajectory's kept generated tokens, then over trajectories. Reduction
/// oracle for the one-token-per-turn case.
pub fn grpo_reference(
    group: &[TrajectoryTokens],
    rewards: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    if group.len() != rewards.len() {
        return Err(ObjectiveError::AlignmentMismatch(format!(
            "{} trajectories vs {} rewards",
            group.len(),
            rewards.len()
        )));
    }
    let advantages = group_advantages(rewards, cfg)?;
    let mut total = 0.0;
    for (traj, &adv) in group.iter().zip(&advantages) {
        traj.check_alignment()?;
        let members = traj.assistant_turn_members()?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for turn in &members {
            for &i in turn {
                if traj.kept(i) {
                    let log_r =
                        traj.train_logprobs[i].unwrap() - traj.rollout_logprobs[i].unwrap();
                    let r = log_r.clamp(-cfg.log_ratio_clamp, cfg.log_ratio_clamp).exp();
                    let clipped = r.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
                    sum += (r * adv).min(clipped * adv);
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    Ok(total / group.len() as f64)
}

/// On-policy distillation term and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OpdOutcome {
    /// Mean over sampled tokens of `student_lp - teacher_lp`.
    pub value: f64,
    /// d value / d student_lp per token.
    pub grads: Vec<f64>,
    pub sampled_tokens: usize,
}

/// Per-token reverse-KL surrogate on the student's own samples: the mean
/// teacher/student log-probability gap over sampled tokens. Teacher values
/// are constants; gradients flow through the student only.
pub fn opd_loss(
    student_logprobs: &[f64],
    teacher_logprobs: &[f64],
    sampled: &[bool],
    _cfg: &ObjectiveConfig,
) -> Result<OpdOutcome, ObjectiveError> {
    if student_logprobs.len() != teacher_logprobs.len() || student_logprobs.len() != sampled.len()
    {
        return Err(ObjectiveError::AlignmentMismatch(format!(
            "{} student vs {} teacher vs {} sampled entries",
            student_logprobs.len(),
            teacher_logprobs.len(),
            sampled.len()
        )));
    }
    for (i, &t) in teacher_logprobs.iter().enumerate() {
        if sampled[i] && !t.is_finite() {
            return Err(ObjectiveError::AlignmentMismatch(format!(
                "teacher log-probability at {i} is not finite"
            )));
        }
    }
    let m = sampled.iter().filter(|&&s| s).count();
    let mut grads = vec![0.0; sampled.len()];
    if m == 0 {
        return Ok(OpdOutcome { value: 0.0, grads, sampled_tokens: 0 });
    }
    let mut sum = 0.0;
    for i in 0..sampled.len() {
        if sampled[i] {
            sum += student_logprobs[i] - teacher_logprobs[i];
            grads[i] = 1.0 / m as f64;
        }
    }
    Ok(OpdOutcome { value: sum / m as f64, grads, sampled_tokens: m })
}

/// `L_turn - lambda * opd`: the RL surrogate to maximize minus the weighted
/// distillation gap to minimize.
pub fn combined_loss(turn_value: f64, opd_value: f64, cfg: &ObjectiveConfig) -> f64 {
    turn_value - cfg.opd_lambda * opd_value
}

/// K sampled answers against a gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSample {
    pub answers: Vec<String>,
    pub gold: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PassAtKDecision {
    pub r_hat: f64,
    pub correct: usize,
    pub k: usize,
    pub retained: bool,
}

/// Empirical success rate over K attempts; retains exactly the intermediate
/// band `0 < r_hat < 1` (trivial and intractable samples carry no gradient
/// signal).
pub fn pass_at_k_filter(sample: &CurationSample) -> PassAtKDecision {
    let k = sample.answers.len();
    let correct = sample.answers.iter().filter(|a| **a == sample.gold).count();
    let r_hat = if k == 0 { 0.0 } else { correct as f64 / k as f64 };
    PassAtKDecision { r_hat, correct, k, retained: correct > 0 && correct < k }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestStatus {
    Pass,
    Fail,
}

/// Test outcomes of a candidate repair: results over the originally failing
/// set and the originally passing set. The two id sets must be disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcomes {
    pub fail_set_results: BTreeMap<String, TestStatus>,
    pub pass_set_results: BTreeMap<String, TestStatus>,
}

impl TestOutcomes {
    pub fn new(
        fail_set_results: BTreeMap<String, TestStatus>,
        pass_set_results: BTreeMap<String, TestStatus>,
    ) -> Result<Self, ObjectiveError> {
        if let Some(id) = fail_set_results.keys().find(|id| pass_set_results.contains_key(*id)) {
            return Err(ObjectiveError::OverlappingTestSets { id: id.clone() });
        }
        Ok(Self { fail_set_results, pass_set_results })
    }

    /// Build from declared id sets plus a combined result map, failing on
    /// any declared test without a result.
    pub fn from_expected(
        expected_fail: &[String],
        expected_pass: &[String],
        results: &BTreeMap<String, TestStatus>,
    ) -> Result<Self, ObjectiveError> {
        let mut fail_set_results = BTreeMap::new();
        for id in expected_fail {
            let status = results
                .get(id)
                .ok_or_else(|| ObjectiveError::MissingTestResult { id: id.clone() })?;
            fail_set_results.insert(id.clone(), *status);
        }
        let mut pass_set_results = BTreeMap::new();
        for id in expected_pass {
            let status = results
                .get(id)
                .ok_or_else(|| ObjectiveError::MissingTestResult { id: id.clone() })?;
            pass_set_results.insert(id.clone(), *status);
        }
        Self::new(fail_set_results, pass_set_results)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VerifyDecision {
    pub f2p: bool,
    pub p2p: bool,
    pub retained: bool,
    /// The fail set was empty, so fail-to-pass held vacuously.
    pub f2p_vacuous: bool,
    pub p2p_vacuous: bool,
}

/// Fail-to-pass and pass-to-pass verification: the repair is retained only
/// when every originally failing test now passes and no originally passing
/// test regressed. Empty sets hold vacuously and are flagged.
pub fn f2p_p2p_verify(outcomes: &TestOutcomes) -> VerifyDecision {
    let f2p = outcomes.fail_set_results.values().all(|s| *s == TestStatus::Pass);
    let p2p = outcomes.pass_set_results.values().all(|s| *s == TestStatus::Pass);
    VerifyDecision {
        f2p,
        p2p,
        retained: f2p && p2p,
        f2p_vacuous: outcomes.fail_set_results.is_empty(),
        p2p_vacuous: outcomes.pass_set_results.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;

    fn single_turn_traj(train: &[f64], rollout: &[f64]) -> TrajectoryTokens {
        let t = train.len();
        TrajectoryTokens {
            origins: vec![Origin::Generated; t],
            rollout_logprobs: rollout.iter().map(|&x| Some(x)).collect(),
            train_logprobs: train.iter().map(|&x| Some(x)).collect(),
            turns: vec![TurnSpan::new(0, t, Role::Assistant)],
            keep: None,
        }
    }

    fn per_token_turn_traj(train: &[f64], rollout: &[f64]) -> TrajectoryTokens {
        let mut traj = single_turn_traj(train, rollout);
        traj.turns = (0..train.len()).map(|i| TurnSpan::new(i, i + 1, Role::Assistant)).collect();
        traj
    }

    #[test]
    fn advantages_match_direct_evaluation() {
        let cfg = ObjectiveConfig::default();
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0], &cfg).unwrap();
        // Population std 0.5; floor is negligible at 1e-8.
        for (got, want) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn constant_rewards_give_zero_advantages() {
        let cfg = ObjectiveConfig::default();
        let a = group_advantages(&[0.7; 4], &cfg).unwrap();
        assert_eq!(a, vec![0.0; 4]);
    }

    #[test]
    fn advantages_preserve_reward_order() {
        let cfg = ObjectiveConfig::default();
        let mut rng = Lcg64::new(5);
        for _ in 0..50 {
            let rewards: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let adv = group_advantages(&rewards, &cfg).unwrap();
            let mut ra: Vec<usize> = (0..6).collect();
            let mut rb = ra.clone();
            ra.sort_by(|&i, &j| rewards[i].total_cmp(&rewards[j]));
            rb.sort_by(|&i, &j| adv[i].total_cmp(&adv[j]));
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn group_too_small_rejected() {
        let cfg = ObjectiveConfig::default();
        assert!(matches!(
            group_advantages(&[1.0], &cfg),
            Err(ObjectiveError::GroupTooSmall { got: 1, need: 2 })
        ));
        let mean_only =
            ObjectiveConfig { advantage_mode: AdvantageMode::MeanOnly, ..Default::default() };
        assert_eq!(group_advantages(&[1.0], &mean_only).unwrap(), vec![0.0]);
    }

    #[test]
    fn identical_policies_give_unit_ratios() {
        let lps = [-0.5, -1.0, -0.25];
        let traj = single_turn_traj(&lps, &lps);
        let ratios = turn_ratios(&traj, &ObjectiveConfig::default()).unwrap();
        assert_eq!(ratios.ratios, vec![1.0]);
        assert_eq!(ratios.log_ratios, vec![0.0]);
    }

    #[test]
    fn one_token_ln2_gap_doubles_ratio() {
        let traj = single_turn_traj(&[-0.5], &[-0.5 - std::f64::consts::LN_2]);
        let ratios = turn_ratios(&traj, &ObjectiveConfig::default()).unwrap();
        assert!((ratios.ratios[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn turn_ratio_equals_naive_per_token_product() {
        let mut rng = Lcg64::new(9);
        for _ in 0..100 {
            let t = 1 + rng.below(10) as usize;
            let rollout: Vec<f64> = (0..t).map(|_| -rng.uniform(0.01, 3.0)).collect();
            let train: Vec<f64> =
                rollout.iter().map(|&r| (r + rng.uniform(-0.3, 0.3)).min(0.0)).collect();
            let traj = single_turn_traj(&train, &rollout);
            let ratios = turn_ratios(&traj, &ObjectiveConfig::default()).unwrap();
            let naive: f64 =
                train.iter().zip(&rollout).map(|(t, r)| (t - r).exp()).product();
            assert!((ratios.ratios[0] - naive).abs() <= 1e-12 * naive.max(1.0));
        }
    }

    #[test]
    fn uncovered_generated_token_is_an_error() {
        let mut traj = single_turn_traj(&[-0.5, -0.5], &[-0.5, -0.5]);
        traj.turns = vec![TurnSpan::new(0, 1, Role::Assistant)];
        assert!(matches!(
            turn_ratios(&traj, &ObjectiveConfig::default()),
            Err(ObjectiveError::UncoveredGeneratedToken { index: 1 })
        ));
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let cfg = ObjectiveConfig::default();
        let lps = [-0.5, -1.5];
        let group = vec![single_turn_traj(&lps, &lps), single_turn_traj(&lps, &lps)];
        let rewards = [1.0, 0.0];
        let out = turn_level_objective(&group, &rewards, &cfg).unwrap();
        let adv = group_advantages(&rewards, &cfg).unwrap();
        let mean_adv = adv.iter().sum::<f64>() / 2.0;
        assert_eq!(out.value, mean_adv);
        for t in &out.per_trajectory {
            assert!(t.clip_active.iter().all(|&c| !c));
            assert!(t.ratios.ratios.iter().all(|&r| r == 1.0));
        }
    }

    #[test]
    fn clip_freezes_gradient() {
        // r = 1.5, eps = 0.2, A = 1: contribution min(1.5, 1.2) = 1.2 and no
        // gradient through that turn.
        let cfg =
            ObjectiveConfig { advantage_mode: AdvantageMode::MeanOnly, ..Default::default() };
        let rollout = [-1.0];
        let train = [-1.0 + 1.5f64.ln()];
        let group = vec![single_turn_traj(&train, &rollout), single_turn_traj(&[-1.0], &[-1.0])];
        let rewards = [1.5, -0.5]; // advantages [1, -1]
        let out = turn_level_objective(&group, &rewards, &cfg).unwrap();
        let t0 = &out.per_trajectory[0];
        assert!((t0.turn_values[0] - 1.2).abs() < 1e-12);
        assert!(t0.clip_active[0]);
        assert!(out.token_grads[0].iter().all(|&g| g == 0.0));
        assert!(out.token_grads[1].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn single_turn_reduces_to_gspo() {
        let cfg = ObjectiveConfig::default();
        let mut rng = Lcg64::new(21);
        for _ in 0..100 {
            let g = 2 + rng.below(4) as usize;
            let mut group = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..g {
                let t = 1 + rng.below(8) as usize;
                let rollout: Vec<f64> = (0..t).map(|_| -rng.uniform(0.01, 2.0)).collect();
                let train: Vec<f64> =
                    rollout.iter().map(|&r| (r + rng.uniform(-0.2, 0.2)).min(0.0)).collect();
                group.push(single_turn_traj(&train, &rollout));
                rewards.push(rng.uniform(-1.0, 1.0));
            }
            let turn = turn_level_objective(&group, &rewards, &cfg).unwrap().value;
            let gspo = gspo_reference(&group, &rewards, &cfg).unwrap();
            assert!((turn - gspo).abs() <= 1e-12, "{turn} vs {gspo}");
        }
    }

    #[test]
    fn per_token_turns_reduce_to_grpo() {
        let cfg = ObjectiveConfig::default();
        let mut rng = Lcg64::new(22);
        for _ in 0..100 {
            let g = 2 + rng.below(4) as usize;
            let mut group = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..g {
                let t = 1 + rng.below(8) as usize;
                let rollout: Vec<f64> = (0..t).map(|_| -rng.uniform(0.01, 2.0)).collect();
                let train: Vec<f64> =
                    rollout.iter().map(|&r| (r + rng.uniform(-0.2, 0.2)).min(0.0)).collect();
                group.push(per_token_turn_traj(&train, &rollout));
                rewards.push(rng.uniform(-1.0, 1.0));
            }
            let turn = turn_level_objective(&group, &rewards, &cfg).unwrap().value;
            let grpo = grpo_reference(&group, &rewards, &cfg).unwrap();
            assert!((turn - grpo).abs() <= 1e-12, "{turn} vs {grpo}");
        }
    }

    #[test]
    fn one_generated_token_all_objectives_agree() {
        let cfg = ObjectiveConfig::default();
        let group =
            vec![single_turn_traj(&[-0.4], &[-0.5]), single_turn_traj(&[-0.9], &[-0.8])];
        let rewards = [1.0, 0.0];
        let turn = turn_level_objective(&group, &rewards, &cfg).unwrap().value;
        let gspo = gspo_reference(&group, &rewards, &cfg).unwrap();
        let grpo = grpo_reference(&group, &rewards, &cfg).unwrap();
        assert!((turn - gspo).abs() <= 1e-12);
        assert!((turn - grpo).abs() <= 1e-12);
    }

    #[test]
    fn extreme_log_gap_stays_finite() {
        let cfg = ObjectiveConfig::default();
        let group = vec![
            single_turn_traj(&[-1e-9], &[-500.0]),
            single_turn_traj(&[-500.0], &[-1e-9]),
        ];
        let rewards = [1.0, 0.0];
        let v = gspo_reference(&group, &rewards, &cfg).unwrap();
        assert!(v.is_finite());
        let out = turn_level_objective(&group, &rewards, &cfg).unwrap();
        assert!(out.value.is_finite());
        // Clamp engaged: no gradient through the runaway turn.
        assert!(out.per_trajectory[0].ratios.clamped[0]);
        assert!(out.token_grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn opd_zero_when_teacher_equals_student() {
        let lps = [-0.5, -1.0];
        let out = opd_loss(&lps, &lps, &[true, true], &ObjectiveConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn opd_single_token_example() {
        let out = opd_loss(&[-1.0], &[-2.0], &[true], &ObjectiveConfig::default()).unwrap();
        assert_eq!(out.value, 1.0);
        assert_eq!(out.grads, vec![1.0]);
        let combined = combined_loss(0.25, out.value, &ObjectiveConfig::default());
        assert_eq!(combined, 0.25 - 1.0);
    }

    #[test]
    fn opd_mean_matches_direct_recomputation() {
        let mut rng = Lcg64::new(33);
        for _ in 0..50 {
            let t = 1 + rng.below(12) as usize;
            let student: Vec<f64> = (0..t).map(|_| -rng.uniform(0.0, 3.0)).collect();
            let teacher: Vec<f64> = (0..t).map(|_| -rng.uniform(0.0, 3.0)).collect();
            let sampled: Vec<bool> = (0..t).map(|_| rng.next_f64() < 0.7).collect();
            let out =
                opd_loss(&student, &teacher, &sampled, &ObjectiveConfig::default()).unwrap();
            let picked: Vec<f64> = (0..t)
                .filter(|&i| sampled[i])
                .map(|i| student[i] - teacher[i])
                .collect();
            let expected = if picked.is_empty() {
                0.0
            } else {
                picked.iter().sum::<f64>() / picked.len() as f64
            };
            assert!((out.value - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn pass_at_k_retains_only_intermediate_band() {
        let mk = |correct: usize, k: usize| CurationSample {
            answers: (0..k).map(|i| if i < correct { "g".into() } else { "x".into() }).collect(),
            gold: "g".into(),
        };
        let d = pass_at_k_filter(&mk(3, 8));
        assert!((d.r_hat - 0.375).abs() < 1e-15);
        assert!(d.retained);
        assert!(!pass_at_k_filter(&mk(8, 8)).retained);
        assert!(!pass_at_k_filter(&mk(0, 8)).retained);
        for correct in 0..=8 {
            let d = pass_at_k_filter(&mk(correct, 8));
            assert_eq!(d.retained, correct > 0 && correct < 8);
        }
    }

    #[test]
    fn f2p_p2p_truth_table() {
        let mk = |f2p_ok: bool, p2p_ok: bool| {
            let mut fail = BTreeMap::new();
            fail.insert("t1".to_string(), if f2p_ok { TestStatus::Pass } else { TestStatus::Fail });
            let mut pass = BTreeMap::new();
            pass.insert("t2".to_string(), if p2p_ok { TestStatus::Pass } else { TestStatus::Fail });
            TestOutcomes::new(fail, pass).unwrap()
        };
        for (f, p) in [(true, true), (true, false), (false, true), (false, false)] {
            let d = f2p_p2p_verify(&mk(f, p));
            assert_eq!(d.f2p, f);
            assert_eq!(d.p2p, p);
            assert_eq!(d.retained, f && p);
        }
    }

    #[test]
    fn empty_fail_set_is_vacuously_retained_and_flagged() {
        let mut pass = BTreeMap::new();
        pass.insert("t1".to_string(), TestStatus::Pass);
        let outcomes = TestOutcomes::new(BTreeMap::new(), pass).unwrap();
        let d = f2p_p2p_verify(&outcomes);
        assert!(d.retained && d.f2p_vacuous && !d.p2p_vacuous);
    }

    #[test]
    fn missing_declared_test_is_an_error() {
        let results: BTreeMap<String, TestStatus> =
            [("a".to_string(), TestStatus::Pass)].into_iter().collect();
        let err = TestOutcomes::from_expected(
            &["a".to_string(), "b".to_string()],
            &[],
            &results,
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::MissingTestResult { id } if id == "b"));
    }

    #[test]
    fn overlapping_test_sets_rejected() {
        let mut fail = BTreeMap::new();
        fail.insert("t".to_string(), TestStatus::Pass);
        let mut pass = BTreeMap::new();
        pass.insert("t".to_string(), TestStatus::Pass);
        assert!(matches!(
            TestOutcomes::new(fail, pass),
            Err(ObjectiveError::OverlappingTestSets { .. })
        ));
    }

    #[test]
    fn icepop_dropped_tokens_leave_products_and_grads() {
        let cfg =
            ObjectiveConfig { advantage_mode: AdvantageMode::MeanOnly, ..Default::default() };
        let rollout = [-1.0, -1.0];
        let train = [-0.9, -4.0]; // second token has a huge gap
        let mut traj = single_turn_traj(&train, &rollout);
        traj.keep = Some(vec![true, false]);
        let ratios = turn_ratios(&traj, &cfg).unwrap();
        assert!((ratios.log_ratios[0] - 0.1).abs() < 1e-12);
        let group = vec![traj, single_turn_traj(&[-1.0], &[-1.0])];
        let out = turn_level_objective(&group, &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(out.token_grads[0][1], 0.0);
        assert!(out.token_grads[0][0] != 0.0);
    }
}
