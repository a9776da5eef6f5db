//! Learning-rate schedules.
//!
//! [`ScheduleConfig`] describes a schedule relative to the training budget;
//! [`ScheduleConfig::resolve`] turns it into an [`LrSchedule`] with absolute
//! step counts. Step decay advances once per epoch; piecewise-linear and
//! one-cycle schedules advance once per optimizer step.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant {
        lr: f64,
    },
    /// `lr` switches to each milestone value once `fraction` of the epochs
    /// have elapsed.
    StepDecay {
        initial: f64,
        milestones: Vec<(f64, f64)>,
    },
    /// Linear interpolation between `(fraction, lr)` knots, held flat
    /// outside them.
    Piecewise {
        points: Vec<(f64, f64)>,
    },
    OneCycle {
        start: f64,
        max: f64,
        end: f64,
        warmup_fraction: f64,
    },
}

impl ScheduleConfig {
    /// Constant rate `lr`.
    pub fn constant(lr: f64) -> Self {
        ScheduleConfig::Constant { lr }
    }

    /// 0.1 for the first half of the budget, linear decay to 0.001 at 90%,
    /// then held at 0.001.
    pub fn parent_default() -> Self {
        ScheduleConfig::Piecewise {
            points: vec![(0.5, 0.1), (0.9, 0.001)],
        }
    }

    /// Warmup 0.001 -> 0.1 over the first 10% of steps, cosine down to 1e-7.
    pub fn child_one_cycle() -> Self {
        ScheduleConfig::OneCycle {
            start: 0.001,
            max: 0.1,
            end: 1e-7,
            warmup_fraction: 0.1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleConfig::Constant { .. } => "constant",
            ScheduleConfig::StepDecay { .. } => "step-decay",
            ScheduleConfig::Piecewise { .. } => "piecewise",
            ScheduleConfig::OneCycle { .. } => "one-cycle",
        }
    }

    pub fn resolve(&self, epochs: usize, steps_per_epoch: usize) -> Result<LrSchedule> {
        let total_steps = epochs * steps_per_epoch;
        let schedule = match self {
            ScheduleConfig::Constant { lr } => LrSchedule::Constant { lr: *lr },
            ScheduleConfig::StepDecay {
                initial,
                milestones,
            } => LrSchedule::StepDecay {
                initial: *initial,
                milestones: milestones
                    .iter()
                    .map(|&(f, lr)| ((f * epochs as f64).round() as usize, lr))
                    .collect(),
            },
            ScheduleConfig::Piecewise { points } => LrSchedule::Piecewise {
                knots: points
                    .iter()
                    .map(|&(f, lr)| (f * total_steps as f64, lr))
                    .collect(),
            },
            ScheduleConfig::OneCycle {
                start,
                max,
                end,
                warmup_fraction,
            } => LrSchedule::OneCycle {
                start: *start,
                max: *max,
                end: *end,
                warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
                total_steps,
            },
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepUnit {
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `(epoch, lr)` milestones, sorted by epoch.
    StepDecay {
        initial: f64,
        milestones: Vec<(usize, f64)>,
    },
    /// `(step, lr)` knots, sorted by step.
    Piecewise {
        knots: Vec<(f64, f64)>,
    },
    OneCycle {
        start: f64,
        max: f64,
        end: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} must be a positive learning rate, got {v}"
        )))
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant { lr } => positive(*lr, "constant lr"),
            LrSchedule::StepDecay {
                initial,
                milestones,
            } => {
                positive(*initial, "initial lr")?;
                for w in milestones.windows(2) {
                    if w[1].0 < w[0].0 {
                        return Err(Error::invalid("step-decay milestones must be sorted"));
                    }
                }
                milestones
                    .iter()
                    .try_for_each(|&(_, lr)| positive(lr, "milestone lr"))
            }
            LrSchedule::Piecewise { knots } => {
                if knots.is_empty() {
                    return Err(Error::invalid("piecewise schedule needs at least one knot"));
                }
                for w in knots.windows(2) {
                    if w[1].0 < w[0].0 {
                        return Err(Error::invalid("piecewise knots must be sorted"));
                    }
                }
                knots
                    .iter()
                    .try_for_each(|&(_, lr)| positive(lr, "knot lr"))
            }
            LrSchedule::OneCycle {
                start,
                max,
                end,
                warmup_steps,
                total_steps,
            } => {
                positive(*start, "one-cycle start")?;
                positive(*max, "one-cycle max")?;
                positive(*end, "one-cycle end")?;
                if warmup_steps > total_steps {
                    return Err(Error::invalid("one-cycle warmup longer than the schedule"));
                }
                Ok(())
            }
        }
    }

    pub fn unit(&self) -> StepUnit {
        match self {
            LrSchedule::Constant { .. } | LrSchedule::StepDecay { .. } => StepUnit::Epoch,
            LrSchedule::Piecewise { .. } | LrSchedule::OneCycle { .. } => StepUnit::Step,
        }
    }

    /// Rate at `step` (epochs or optimizer steps, per [`unit`](Self::unit)).
    /// Steps past the end clamp to the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                initial,
                milestones,
            } => milestones
                .iter()
                .take_while(|(at, _)| *at <= step)
                .last()
                .map_or(*initial, |&(_, lr)| lr),
            LrSchedule::Piecewise { knots } => {
                let s = step as f64;
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if s <= first.0 {
                    return first.1;
                }
                if s >= last.0 {
                    return last.1;
                }
                let i = knots
                    .windows(2)
                    .position(|w| s < w[1].0)
                    .expect("bracketed");
                let (a, b) = (knots[i], knots[i + 1]);
                a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
            }
            LrSchedule::OneCycle {
                start,
                max,
                end,
                warmup_steps,
                total_steps,
            } => {
                let step = step.min(*total_steps);
                if step == *total_steps {
                    return *end;
                }
                if step < *warmup_steps {
                    return start + (max - start) * step as f64 / *warmup_steps as f64;
                }
                let span = (total_steps - warmup_steps) as f64;
                let progress = (step - warmup_steps) as f64 / span;
                end + 0.5 * (max - end) * (1.0 + (PI * progress).cos())
            }
        }
    }
}
