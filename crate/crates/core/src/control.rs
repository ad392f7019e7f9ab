//! KL-weight schedules: a PI controller driven by the sampled KL, plus the
//! open-loop sigmoid and cyclical annealing baselines.

use crate::error::{Error, Result};

/// Gains and set point of the PI controller. Both gains are negative: KL
/// below the set point pushes the weight down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PIConfig {
    /// Desired KL in nats.
    pub setpoint: f64,
    pub kp: f64,
    pub ki: f64,
    /// Steps between controller updates; the weight is held in between.
    pub sample_period: usize,
    /// Freeze the integral while the previous raw output is outside `[0, 1]`.
    pub anti_windup: bool,
}

impl PIConfig {
    pub const DEFAULT_KP: f64 = -0.01;
    pub const DEFAULT_KI: f64 = -0.0001;
    /// Gains for the desk-scale model, where the default ones are too slow
    /// to reach a set point within a few thousand steps.
    pub const DESK_KP: f64 = -0.05;
    pub const DESK_KI: f64 = -0.002;

    pub fn new(setpoint: f64, kp: f64, ki: f64) -> Result<Self> {
        let cfg = PIConfig {
            setpoint,
            kp,
            ki,
            sample_period: 1,
            anti_windup: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default gains at the given set point.
    pub fn with_setpoint(setpoint: f64) -> Result<Self> {
        Self::new(setpoint, Self::DEFAULT_KP, Self::DEFAULT_KI)
    }

    /// Desk gains at the given set point.
    pub fn desk(setpoint: f64) -> Result<Self> {
        Self::new(setpoint, Self::DESK_KP, Self::DESK_KI)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.setpoint.is_finite() && self.setpoint > 0.0) {
            return Err(Error::Config(format!("set point {} must be positive", self.setpoint)));
        }
        if !(self.kp < 0.0 && self.ki < 0.0) {
            return Err(Error::Config(format!(
                "PI gains must be negative, got kp={} ki={}",
                self.kp, self.ki
            )));
        }
        if self.sample_period == 0 {
            return Err(Error::Config("sample period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PIControllerState {
    pub integral: f64,
    /// Unclamped `P + I` of the previous update.
    pub last_raw_w: f64,
    pub step: u64,
}

/// One controller update. Returns the clamped weight and the next state.
pub fn pi_update(state: PIControllerState, observed_kl: f64, cfg: &PIConfig) -> Result<(f64, PIControllerState)> {
    if !observed_kl.is_finite() || observed_kl < 0.0 {
        return Err(Error::Input(format!("observed KL {observed_kl} must be finite and non-negative")));
    }
    let e = cfg.setpoint - observed_kl;
    let p = cfg.kp * e;
    let gate_open = !cfg.anti_windup || (0.0..=1.0).contains(&state.last_raw_w);
    let integral = if gate_open { state.integral + cfg.ki * e } else { state.integral };
    let raw = p + integral;
    let next = PIControllerState {
        integral,
        last_raw_w: raw,
        step: state.step + 1,
    };
    Ok((raw.clamp(0.0, 1.0), next))
}

/// Sigmoid ramp centred on `midpoint` with width `slope` (both in steps).
pub fn cost_anneal_weight(step: u64, midpoint: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (-(step as f64 - midpoint) / slope).exp())
}

/// Repeating linear ramp: `cycles` cycles over `total` steps, each rising
/// to 1 over the first `ratio` of the cycle and then holding.
pub fn cyclical_anneal_weight(step: u64, total: u64, cycles: u64, ratio: f64) -> f64 {
    let period = (total / cycles).max(1);
    let phase = (step % period) as f64 / period as f64;
    (phase / ratio).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchedulerKind {
    Pi(PIConfig),
    CostAnneal { midpoint: f64, slope: f64 },
    Cyclical { total: u64, cycles: u64, ratio: f64 },
    Constant(f64),
}

impl SchedulerKind {
    /// Sigmoid annealing with the slope defaulting to a tenth of the midpoint.
    pub fn cost_anneal(midpoint: f64) -> Self {
        SchedulerKind::CostAnneal {
            midpoint,
            slope: midpoint / 10.0,
        }
    }

    pub fn cyclical(total: u64, cycles: u64) -> Self {
        SchedulerKind::Cyclical {
            total,
            cycles,
            ratio: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Pi(_) => "pi",
            SchedulerKind::CostAnneal { .. } => "cost",
            SchedulerKind::Cyclical { .. } => "cyclical",
            SchedulerKind::Constant(_) => "constant",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            SchedulerKind::Pi(cfg) => cfg.validate(),
            SchedulerKind::CostAnneal { midpoint, slope } => {
                if !(slope > 0.0) || !midpoint.is_finite() {
                    return bad(format!("cost annealing needs slope > 0, got midpoint {midpoint} slope {slope}"));
                }
                Ok(())
            }
            SchedulerKind::Cyclical { total, cycles, ratio } => {
                if total == 0 || cycles == 0 || !(ratio > 0.0 && ratio <= 1.0) {
                    return bad(format!(
                        "cyclical annealing needs total > 0, cycles >= 1, 0 < ratio <= 1; got {total}/{cycles}/{ratio}"
                    ));
                }
                Ok(())
            }
            SchedulerKind::Constant(w) => {
                if !(0.0..=1.0).contains(&w) {
                    return bad(format!("constant weight {w} outside [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

/// Mutable part of a [`Scheduler`], exposed for checkpointing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SchedulerState {
    pub pi: PIControllerState,
    /// Exponentially smoothed KL, if smoothing is on and a sample was seen.
    pub smoothed_kl: Option<f64>,
    /// Weight returned by the last controller update.
    pub held_w: f64,
    /// Calls to [`Scheduler::weight`] so far.
    pub calls: u64,
}

/// A schedule plus its running state.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    /// EMA decay applied to the observed KL before the PI update.
    pub smoothing: Option<f64>,
    pub state: SchedulerState,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Scheduler {
            kind,
            smoothing: None,
            state: SchedulerState::default(),
        })
    }

    pub fn with_smoothing(mut self, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("smoothing decay {decay} outside [0, 1)")));
        }
        self.smoothing = Some(decay);
        Ok(self)
    }

    /// Weight for training step `step` given the KL sampled at that step.
    /// Annealing schedules ignore the KL.
    pub fn weight(&mut self, step: u64, observed_kl: f64) -> Result<f64> {
        let s = &mut self.state;
        let w = match self.kind {
            SchedulerKind::Pi(cfg) => {
                if !observed_kl.is_finite() || observed_kl < 0.0 {
                    return Err(Error::Input(format!("observed KL {observed_kl} must be finite and non-negative")));
                }
                let kl = match self.smoothing {
                    Some(decay) => {
                        let v = s.smoothed_kl.map_or(observed_kl, |prev| decay * prev + (1.0 - decay) * observed_kl);
                        s.smoothed_kl = Some(v);
                        v
                    }
                    None => observed_kl,
                };
                if s.calls.is_multiple_of(cfg.sample_period as u64) {
                    let (w, next) = pi_update(s.pi, kl, &cfg)?;
                    s.pi = next;
                    s.held_w = w;
                }
                s.held_w
            }
            SchedulerKind::CostAnneal { midpoint, slope } => cost_anneal_weight(step, midpoint, slope),
            SchedulerKind::Cyclical { total, cycles, ratio } => cyclical_anneal_weight(step, total, cycles, ratio),
            SchedulerKind::Constant(w) => w,
        };
        s.calls += 1;
        Ok(w)
    }
}

/// First-order stand-in for the training dynamics:
/// `kl' = kl + alpha * (kl_max * (1 - w) - kl)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderPlant {
    pub alpha: f64,
    pub kl_max: f64,
    pub kl: f64,
}

impl Default for FirstOrderPlant {
    fn default() -> Self {
        FirstOrderPlant {
            alpha: 0.05,
            kl_max: 8.0,
            kl: 0.0,
        }
    }
}

impl FirstOrderPlant {
    pub fn respond(&mut self, w: f64) -> f64 {
        self.kl += self.alpha * (self.kl_max * (1.0 - w) - self.kl);
        self.kl
    }
}

/// Runs `steps` closed-loop iterations and returns the KL after each.
pub fn simulate_closed_loop(cfg: &PIConfig, mut plant: FirstOrderPlant, steps: usize) -> Result<Vec<f64>> {
    let mut sched = Scheduler::new(SchedulerKind::Pi(*cfg))?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let w = sched.weight(t as u64, plant.kl)?;
        out.push(plant.respond(w));
    }
    Ok(out)
}
