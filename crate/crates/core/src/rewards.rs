//! Trajectory rewards.
//!
//! Five reward functions, selected through [`RewardSpec`]: the binary
//! outcome reward, two shaping variants that penalise or steer search use,
//! and the OTC and IKEA tool-efficiency rewards.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::TrajectorySummary;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    #[default]
    Outcome,
    Naive {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Awareness {
        #[serde(default = "half")]
        alpha: f64,
        #[serde(default = "half")]
        rho: f64,
    },
    Otc {
        #[serde(default = "unit")]
        alpha: f64,
        #[serde(default = "unit")]
        c: f64,
    },
    Ikea {
        #[serde(default = "default_r_plus")]
        r_plus: f64,
        #[serde(default = "default_r_minus")]
        r_minus: f64,
        #[serde(default = "default_rt_max")]
        rt_max: usize,
    },
}

fn default_lambda() -> f64 {
    0.05
}
fn half() -> f64 {
    0.5
}
fn unit() -> f64 {
    1.0
}
fn default_r_plus() -> f64 {
    0.2
}
fn default_r_minus() -> f64 {
    0.05
}
fn default_rt_max() -> usize {
    3
}

impl RewardSpec {
    pub fn naive() -> Self {
        RewardSpec::Naive { lambda: default_lambda() }
    }

    pub fn awareness() -> Self {
        RewardSpec::Awareness { alpha: 0.5, rho: 0.5 }
    }

    pub fn otc() -> Self {
        RewardSpec::Otc { alpha: 1.0, c: 1.0 }
    }

    pub fn ikea() -> Self {
        RewardSpec::Ikea {
            r_plus: default_r_plus(),
            r_minus: default_r_minus(),
            rt_max: default_rt_max(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::Outcome => "outcome",
            RewardSpec::Naive { .. } => "naive",
            RewardSpec::Awareness { .. } => "awareness",
            RewardSpec::Otc { .. } => "otc",
            RewardSpec::Ikea { .. } => "ikea",
        }
    }

    pub fn needs_solve_rate(&self) -> bool {
        matches!(self, RewardSpec::Awareness { .. })
    }

    pub fn needs_min_calls(&self) -> bool {
        matches!(self, RewardSpec::Otc { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("reward {}: {m}", self.name())));
        match *self {
            RewardSpec::Outcome => Ok(()),
            RewardSpec::Naive { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                bad(format!("lambda must be non-negative, got {lambda}"))
            }
            RewardSpec::Awareness { alpha, .. } if !(alpha >= 0.0 && alpha.is_finite()) => {
                bad(format!("alpha must be non-negative, got {alpha}"))
            }
            RewardSpec::Awareness { rho, .. } if !(0.0..=1.0).contains(&rho) => {
                bad(format!("rho must be in [0,1], got {rho}"))
            }
            RewardSpec::Otc { alpha, c } if !(alpha > 0.0 && c > 0.0 && alpha.is_finite() && c.is_finite()) => {
                bad(format!("alpha and c must be positive, got {alpha} and {c}"))
            }
            RewardSpec::Ikea { r_plus, r_minus, .. } if !(r_plus >= 0.0 && r_minus >= 0.0) => {
                bad(format!("r_plus and r_minus must be non-negative, got {r_plus} and {r_minus}"))
            }
            RewardSpec::Ikea { rt_max: 0, .. } => bad("rt_max must be positive".into()),
            _ => Ok(()),
        }
    }

    pub fn compute(&self, ctx: &RewardContext) -> Result<f64> {
        match *self {
            RewardSpec::Outcome => Ok(outcome_reward(ctx)),
            RewardSpec::Naive { lambda } => Ok(naive_shaping_reward(ctx, lambda)),
            RewardSpec::Awareness { alpha, rho } => awareness_shaping_reward(ctx, alpha, rho),
            RewardSpec::Otc { alpha, c } => otc_reward(ctx, alpha, c),
            RewardSpec::Ikea { r_plus, r_minus, rt_max } => Ok(ikea_reward(ctx, r_plus, r_minus, rt_max)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardContext {
    pub summary: TrajectorySummary,
    /// Frozen pre-training solve rate, for awareness shaping.
    pub solve_rate_p: Option<f64>,
    /// Fewest search calls seen in a correct trajectory for this input.
    pub min_calls_n: Option<usize>,
}

impl RewardContext {
    pub fn new(summary: TrajectorySummary) -> Self {
        Self {
            summary,
            solve_rate_p: None,
            min_calls_n: None,
        }
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn outcome_reward(ctx: &RewardContext) -> f64 {
    indicator(ctx.summary.em)
}

pub fn naive_shaping_reward(ctx: &RewardContext, lambda: f64) -> f64 {
    if ctx.summary.em {
        1.0 - lambda * ctx.summary.m as f64
    } else {
        0.0
    }
}

pub fn awareness_shaping_reward(ctx: &RewardContext, alpha: f64, rho: f64) -> Result<f64> {
    let p = ctx.solve_rate_p.ok_or(Error::MissingRewardInput {
        reward: "awareness",
        missing: "the solve rate p",
    })?;
    let follows_prior = if p < rho {
        ctx.summary.has_search
    } else {
        !ctx.summary.has_search
    };
    Ok(indicator(ctx.summary.em) + alpha * indicator(follows_prior))
}

pub fn otc_f(m: usize, n: usize) -> f64 {
    match (m, n) {
        (0, 0) => 0.0,
        (m, 0) => m as f64,
        (m, n) => 2.0 * (n * m) as f64 / (m + n) as f64,
    }
}

/// The tool-efficiency factor of OTC, before the correctness gate.
pub fn otc_tool_reward(m: usize, n: usize, c: f64) -> f64 {
    let f = otc_f(m, n);
    if n == 0 {
        if m == 0 {
            1.0
        } else {
            (m as f64 * PI / (2.0 * m as f64 + c)).cos()
        }
    } else {
        (f * PI / (2.0 * n as f64)).sin()
    }
}

pub fn otc_reward(ctx: &RewardContext, alpha: f64, c: f64) -> Result<f64> {
    let n = ctx.min_calls_n.ok_or(Error::MissingRewardInput {
        reward: "otc",
        missing: "the minimum call count n",
    })?;
    if !ctx.summary.em {
        return Ok(0.0);
    }
    Ok(alpha * otc_tool_reward(ctx.summary.m, n, c))
}

/// IKEA reward; the retrieval count is clipped at `rt_max`.
pub fn ikea_reward(ctx: &RewardContext, r_plus: f64, r_minus: f64, rt_max: usize) -> f64 {
    if !ctx.summary.format_ok {
        return -1.0;
    }
    let rt = ctx.summary.m.min(rt_max);
    let r_kb = if ctx.summary.em {
        r_plus * (1.0 - rt as f64 / rt_max as f64)
    } else if rt == 0 {
        0.0
    } else {
        r_minus
    };
    indicator(ctx.summary.em) + r_kb
}

/// Running minimum of search calls over correct trajectories, per question.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinCallsTracker {
    min: BTreeMap<String, usize>,
}

impl MinCallsTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, question_id: &str, summary: &TrajectorySummary) {
        if !summary.em {
            return;
        }
        self.min
            .entry(question_id.to_string())
            .and_modify(|n| *n = (*n).min(summary.m))
            .or_insert(summary.m);
    }

    pub fn get(&self, question_id: &str) -> Option<usize> {
        self.min.get(question_id).copied()
    }
}
