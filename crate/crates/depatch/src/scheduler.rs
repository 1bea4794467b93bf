//! Decoupling-variant schedules.
//!
//! The progressive strategy (PDS) splits training into five equal stages
//! with granularity n = 2, 3, 4, 5, 6. Within each stage the decoupling
//! ratio ramps over four equal sub-steps r = 0.2, 0.3, 0.4, 0.5 and resets
//! to 0.2 at the next stage boundary. The fixed-granularity ablations
//! (S_n2, S_n4, S_n6) hold n constant and draw r uniformly from
//! [0.2, 0.5] each epoch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

pub const PDS_N_VALUES: [usize; 5] = [2, 3, 4, 5, 6];
pub const PDS_R_STEPS: [f64; 4] = [0.2, 0.3, 0.4, 0.5];

/// How the granularity n evolves over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StrategyMode {
    /// Progressive decoupling: staged n with cycling r.
    Pds,
    /// Constant granularity (the S_n ablations).
    FixedN { n: usize },
    /// No decoupling at all (vanilla baseline).
    None,
}

/// How the ratio r is chosen within the strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RatioPolicy {
    /// Deterministic ramp (PDS sub-steps, or linear within a custom stage).
    Progressive,
    /// Fresh uniform draw per epoch.
    UniformRandom { lo: f64, hi: f64 },
    /// Constant ratio.
    Fixed { r: f64 },
}

impl RatioPolicy {
    pub fn uniform_default() -> Self {
        RatioPolicy::UniformRandom { lo: 0.2, hi: 0.5 }
    }
}

/// One row of a user-supplied stage table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub epoch_span: usize,
    pub n: usize,
    pub r_start: f64,
    pub r_end: f64,
}

/// Complete schedule specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub mode: StrategyMode,
    pub r_policy: RatioPolicy,
    /// Overrides the built-in stage arithmetic when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_table: Option<Vec<StageRow>>,
}

impl Strategy {
    pub fn pds() -> Self {
        Strategy { mode: StrategyMode::Pds, r_policy: RatioPolicy::Progressive, stage_table: None }
    }

    pub fn fixed_n(n: usize) -> Self {
        Strategy {
            mode: StrategyMode::FixedN { n },
            r_policy: RatioPolicy::uniform_default(),
            stage_table: None,
        }
    }

    pub fn none() -> Self {
        Strategy { mode: StrategyMode::None, r_policy: RatioPolicy::Progressive, stage_table: None }
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategyMode::FixedN { n } = self.mode {
            ensure_arg!(n >= 1, "fixed granularity must be positive");
        }
        if let RatioPolicy::UniformRandom { lo, hi } = self.r_policy {
            ensure_arg!(0.0 <= lo && lo <= hi && hi <= 1.0, "ratio bounds must satisfy 0<=lo<=hi<=1");
        }
        if let RatioPolicy::Fixed { r } = self.r_policy {
            ensure_arg!((0.0..=1.0).contains(&r), "fixed ratio must lie in [0,1]");
        }
        if let Some(table) = &self.stage_table {
            ensure_arg!(!table.is_empty(), "stage table must not be empty");
            for row in table {
                ensure_arg!(row.epoch_span >= 1, "stage spans must be positive");
                ensure_arg!(row.n >= 1, "stage granularity must be positive");
            }
        }
        Ok(())
    }
}

/// The decoupling plan for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskPlan {
    /// No mask this epoch (vanilla training).
    None,
    /// Sample an n x n grid with ratio r.
    Sample { n: usize, r: f64 },
}

impl MaskPlan {
    pub fn n(&self) -> Option<usize> {
        match self {
            MaskPlan::None => None,
            MaskPlan::Sample { n, .. } => Some(*n),
        }
    }

    pub fn r(&self) -> Option<f64> {
        match self {
            MaskPlan::None => None,
            MaskPlan::Sample { r, .. } => Some(*r),
        }
    }
}

/// Scheduler state exposed for manifests and debugging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdsState {
    pub epoch: usize,
    pub plan: MaskPlan,
    pub stage_index: usize,
    pub cycle_index: usize,
}

/// Compute the (n, r) plan for an epoch. The RNG is consulted only by
/// random ratio policies; progressive policies are pure functions of the
/// epoch.
pub fn schedule(
    epoch: usize,
    total_epochs: usize,
    strategy: &Strategy,
    rng: &mut impl Rng,
) -> Result<PdsState> {
    strategy.validate()?;
    ensure_arg!(total_epochs >= 1, "total_epochs must be positive");
    ensure_arg!(epoch < total_epochs, "epoch {epoch} out of range 0..{total_epochs}");

    if matches!(strategy.mode, StrategyMode::None) {
        return Ok(PdsState { epoch, plan: MaskPlan::None, stage_index: 0, cycle_index: 0 });
    }

    if let Some(table) = &strategy.stage_table {
        return schedule_from_table(epoch, table, strategy.r_policy, rng);
    }

    match strategy.mode {
        StrategyMode::Pds => {
            let stages = PDS_N_VALUES.len();
            let stage = (epoch * stages / total_epochs).min(stages - 1);
            let n = PDS_N_VALUES[stage];
            let stage_start = stage_boundary(stage, total_epochs, stages);
            let stage_end = stage_boundary(stage + 1, total_epochs, stages);
            let stage_len = (stage_end - stage_start).max(1);
            let local = epoch - stage_start;
            let (r, cycle) = match strategy.r_policy {
                RatioPolicy::Progressive => {
                    let sub = (local * PDS_R_STEPS.len() / stage_len).min(PDS_R_STEPS.len() - 1);
                    (PDS_R_STEPS[sub], sub)
                }
                RatioPolicy::UniformRandom { lo, hi } => (draw_ratio(lo, hi, rng), local),
                RatioPolicy::Fixed { r } => (r, local),
            };
            Ok(PdsState { epoch, plan: MaskPlan::Sample { n, r }, stage_index: stage, cycle_index: cycle })
        }
        StrategyMode::FixedN { n } => {
            let r = match strategy.r_policy {
                RatioPolicy::Progressive => {
                    // A single implicit stage: ramp over the PDS sub-steps.
                    let sub = (epoch * PDS_R_STEPS.len() / total_epochs).min(PDS_R_STEPS.len() - 1);
                    PDS_R_STEPS[sub]
                }
                RatioPolicy::UniformRandom { lo, hi } => draw_ratio(lo, hi, rng),
                RatioPolicy::Fixed { r } => r,
            };
            Ok(PdsState { epoch, plan: MaskPlan::Sample { n, r }, stage_index: 0, cycle_index: epoch })
        }
        StrategyMode::None => unreachable!(),
    }
}

fn stage_boundary(stage: usize, total: usize, stages: usize) -> usize {
    // ceil-free equal split: boundary k sits at floor(k * total / stages).
    stage * total / stages
}

fn draw_ratio(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn schedule_from_table(
    epoch: usize,
    table: &[StageRow],
    policy: RatioPolicy,
    rng: &mut impl Rng,
) -> Result<PdsState> {
    let mut start = 0usize;
    for (stage, row) in table.iter().enumerate() {
        let end = start + row.epoch_span;
        if epoch < end {
            let local = epoch - start;
            let r = match policy {
                RatioPolicy::Progressive => {
                    if row.epoch_span <= 1 {
                        row.r_start
                    } else {
                        row.r_start
                            + (row.r_end - row.r_start) * local as f64 / (row.epoch_span - 1) as f64
                    }
                }
                RatioPolicy::UniformRandom { lo, hi } => draw_ratio(lo, hi, rng),
                RatioPolicy::Fixed { r } => r,
            };
            return Ok(PdsState {
                epoch,
                plan: MaskPlan::Sample { n: row.n, r },
                stage_index: stage,
                cycle_index: local,
            });
        }
        start = end;
    }
    // Past the table: hold the last row's end state.
    let last = table.last().expect("validated non-empty");
    Ok(PdsState {
        epoch,
        plan: MaskPlan::Sample { n: last.n, r: last.r_end },
        stage_index: table.len() - 1,
        cycle_index: 0,
    })
}

/// One row of a schedule snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub n: Option<usize>,
    pub r: Option<f64>,
}

/// Tabulate the full schedule. Deterministic for progressive policies; for
/// random policies the ratio column is left empty (the draw happens at
/// training time).
pub fn snapshot_schedule(total_epochs: usize, strategy: &Strategy) -> Result<Vec<ScheduleRow>> {
    ensure_arg!(total_epochs >= 1, "total_epochs must be positive");
    strategy.validate()?;
    let random_r = matches!(strategy.r_policy, RatioPolicy::UniformRandom { .. })
        && !matches!(strategy.mode, StrategyMode::None);
    let mut rng = crate::rng::SeedStreams::new(0).stream("schedule-snapshot");
    (0..total_epochs)
        .map(|epoch| {
            let state = schedule(epoch, total_epochs, strategy, &mut rng)?;
            Ok(ScheduleRow {
                epoch,
                n: state.plan.n(),
                r: if random_r { None } else { state.plan.r() },
            })
        })
        .collect()
}
