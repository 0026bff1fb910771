//! Monte-Carlo log-probability averaging.
//!
//! Mixture-of-experts inference makes estimated log-probabilities noisy:
//! `log pi(a) = log pi*(a) + eps` from stochastic routing, capacity dropping,
//! and numerical variance. None of those exist at desk scale, so the noise is
//! injected synthetically from a seeded additive model, which is exactly the
//! estimation model being studied.
//!
//! Averaging K independent evaluations divides the per-token variance by K
//! ([`mcla_average`]); [`variance_report`] measures that law empirically for
//! both the summed trajectory log-probability and the importance weight, and
//! [`icepop_mask`] drops tokens whose rollout/train discrepancy exceeds a
//! threshold so one bad estimate cannot dominate a turn product.
//!
//! Every draw is a pure function of `(seed, draw_index)`; trials own disjoint
//! substreams and may run in any order or concurrently.

use crate::rng::Lcg64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};
use thiserror::Error;

/// Additive per-token noise on log-probabilities, fully determined by the
/// seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of the noise in nats (for both distributions).
    pub sigma: f64,
    pub distribution: NoiseDistribution,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    /// Zero-mean uniform scaled to standard deviation `sigma`
    /// (half-width `sigma * sqrt(3)`).
    Uniform,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self { sigma, distribution: NoiseDistribution::Gaussian, seed }
    }

    /// The noise value for `draw_index`. Draws with distinct indices are
    /// independent; equal indices reproduce the same value.
    pub fn noise(&self, draw_index: u64) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let mut rng = Lcg64::substream(self.seed, draw_index);
        match self.distribution {
            NoiseDistribution::Gaussian => self.sigma * rng.next_gaussian(),
            NoiseDistribution::Uniform => {
                let half_width = self.sigma * 3f64.sqrt();
                rng.uniform(-half_width, half_width)
            }
        }
    }
}

/// K-fold averaging configuration. Field names are the config-file contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MclaConfig {
    #[serde(rename = "K")]
    pub k: u32,
    pub apply_icepop: bool,
}

impl Default for MclaConfig {
    fn default() -> Self {
        Self { k: 8, apply_icepop: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MclaError {
    #[error("{got} trials is below the minimum {need}")]
    TooFewTrials { got: usize, need: usize },
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("K must be >= 1")]
    ZeroK,
}

/// Draw-index composition for `(trial, fold, token)` triples: a documented
/// linear layout so independent draws never collide.
pub fn draw_index(trial: u64, fold: u32, token: usize, k: u32, tokens: usize) -> u64 {
    (trial * k as u64 + fold as u64) * tokens as u64 + token as u64
}

/// One noisy evaluation: `true_lp + eps`. The result may exceed zero; the
/// noise is additive and unconstrained.
pub fn noisy_logprob(true_lp: f64, model: &NoiseModel, draw_index: u64) -> f64 {
    true_lp + model.noise(draw_index)
}

/// Mean of K independent noisy evaluations of one token, using fold indices
/// `(trial, 0..K)`. Under the Gaussian model its variance is `sigma^2 / K`.
pub fn mcla_average(true_lp: f64, model: &NoiseModel, cfg: &MclaConfig, trial: u64) -> f64 {
    assert!(cfg.k >= 1, "K must be >= 1");
    let mut sum = 0.0;
    for fold in 0..cfg.k {
        sum += noisy_logprob(true_lp, model, draw_index(trial, fold, 0, cfg.k, 1));
    }
    sum / cfg.k as f64
}

/// Averaged log-probabilities for a token sequence within one trial.
pub fn mcla_average_sequence(
    true_lps: &[f64],
    model: &NoiseModel,
    cfg: &MclaConfig,
    trial: u64,
) -> Vec<f64> {
    assert!(cfg.k >= 1, "K must be >= 1");
    let tokens = true_lps.len();
    true_lps
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let mut sum = 0.0;
            for fold in 0..cfg.k {
                sum += noisy_logprob(lp, model, draw_index(trial, fold, i, cfg.k, tokens));
            }
            sum / cfg.k as f64
        })
        .collect()
}

/// Importance weight `exp(rollout_lp - train_lp)`, with the log difference
/// clamped to keep extreme estimates finite.
pub fn importance_weight(rollout_lp: f64, train_lp: f64) -> f64 {
    const LOG_CLAMP: f64 = 20.0;
    (rollout_lp - train_lp).clamp(-LOG_CLAMP, LOG_CLAMP).exp()
}

/// Keep/drop flags: drop a token when the absolute gap between its rollout
/// log-probability and the averaged train estimate exceeds `tau_ip`.
pub fn icepop_mask(
    rollout_lps: &[f64],
    averaged_train_lps: &[f64],
    tau_ip: f64,
) -> Result<Vec<bool>, MclaError> {
    if rollout_lps.len() != averaged_train_lps.len() {
        return Err(MclaError::AlignmentMismatch(format!(
            "{} rollout vs {} averaged entries",
            rollout_lps.len(),
            averaged_train_lps.len()
        )));
    }
    Ok(rollout_lps
        .iter()
        .zip(averaged_train_lps)
        .map(|(r, a)| (r - a).abs() <= tau_ip)
        .collect())
}

/// Monte-Carlo variance measurements with and without averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub sigma: f64,
    pub distribution: NoiseDistribution,
    #[serde(rename = "K")]
    pub k: u32,
    pub tokens: usize,
    pub trials: usize,
    pub seed: u64,
    /// Variance of the summed trajectory log-probability, single draw.
    pub var_raw: f64,
    /// Same with K-fold averaged tokens.
    pub var_mcla: f64,
    /// Variance of the importance weight, single draw.
    pub weight_var_raw: f64,
    /// Same with averaged log-probabilities.
    pub weight_var_mcla: f64,
    /// `var_raw / var_mcla`; `None` when the noise is degenerate.
    pub reduction_factor: Option<f64>,
    /// 95% confidence interval for the reduction factor (variance-ratio
    /// sampling distribution).
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

const MIN_TRIALS: usize = 1000;

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Estimate `Var[sum_t log pi]` and `Var[w]` across trials, for one noisy
/// draw per token versus the K-fold average. Raw draws use fold index 0 of a
/// disjoint trial block so the two estimates never share noise.
pub fn variance_report(
    true_lps: &[f64],
    model: &NoiseModel,
    cfg: &MclaConfig,
    trials: usize,
) -> Result<VarianceReport, MclaError> {
    if cfg.k < 1 {
        return Err(MclaError::ZeroK);
    }
    if trials < MIN_TRIALS {
        return Err(MclaError::TooFewTrials { got: trials, need: MIN_TRIALS });
    }
    let tokens = true_lps.len();
    if tokens == 0 {
        return Err(MclaError::AlignmentMismatch("empty log-probability sequence".into()));
    }
    let true_sum: f64 = true_lps.iter().sum();

    let raw_cfg = MclaConfig { k: 1, apply_icepop: cfg.apply_icepop };
    let mut raw_sums = Vec::with_capacity(trials);
    let mut mcla_sums = Vec::with_capacity(trials);
    let mut raw_weights = Vec::with_capacity(trials);
    let mut mcla_weights = Vec::with_capacity(trials);
    for trial in 0..trials as u64 {
        // Disjoint trial blocks: raw trials live above the averaged ones.
        let raw: f64 = mcla_average_sequence(true_lps, model, &raw_cfg, trials as u64 + trial)
            .iter()
            .sum();
        let avg: f64 = mcla_average_sequence(true_lps, model, cfg, trial).iter().sum();
        raw_sums.push(raw);
        mcla_sums.push(avg);
        // Rollout side uses the noiseless truth; the train side is estimated.
        raw_weights.push(importance_weight(true_sum, raw));
        mcla_weights.push(importance_weight(true_sum, avg));
    }

    let var_raw = sample_variance(&raw_sums);
    let var_mcla = sample_variance(&mcla_sums);
    let weight_var_raw = sample_variance(&raw_weights);
    let weight_var_mcla = sample_variance(&mcla_weights);

    let degenerate = model.sigma == 0.0 || var_mcla == 0.0;
    let (reduction_factor, ci_low, ci_high) = if degenerate {
        (None, None, None)
    } else {
        let ratio = var_raw / var_mcla;
        // Var ratio of two independent sample variances: F(n-1, n-1).
        let df = (trials - 1) as f64;
        let f = FisherSnedecor::new(df, df).expect("valid F distribution");
        let q = f.inverse_cdf(0.975);
        (Some(ratio), Some(ratio / q), Some(ratio * q))
    };

    Ok(VarianceReport {
        sigma: model.sigma,
        distribution: model.distribution,
        k: cfg.k,
        tokens,
        trials,
        seed: model.seed,
        var_raw,
        var_mcla,
        weight_var_raw,
        weight_var_mcla,
        reduction_factor,
        ci_low,
        ci_high,
    })
}

/// Two-sided chi-square band for a sample variance of `trials` observations
/// around a hypothesized true variance, at the given tail mass.
pub fn chi_square_variance_band(true_var: f64, trials: usize, tail: f64) -> (f64, f64) {
    let df = (trials - 1) as f64;
    let chi = ChiSquared::new(df).expect("valid chi-square");
    let lo = chi.inverse_cdf(tail / 2.0);
    let hi = chi.inverse_cdf(1.0 - tail / 2.0);
    (true_var * lo / df, true_var * hi / df)
}
