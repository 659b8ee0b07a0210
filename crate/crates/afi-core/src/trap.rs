//! Memory-trap detection from proprioception.
//!
//! A policy is considered trapped when the end-effector has barely moved
//! over a trailing window while still being far from the target. Both
//! conditions are required: hovering at the goal is fine, and transit is
//! fine, only far-and-frozen fires. Detection is rate-limited by a
//! cooldown and a hard cap on interventions per episode.

use alloc::collections::VecDeque;

use crate::math::Vec3;

/// Slack added to the window lookback so a sample recorded exactly one
/// window ago still qualifies as the reference despite float rounding.
const WINDOW_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrapConfig {
    /// Displacement below this over the window means "not moving".
    pub eps_stuck: f64,
    /// Distance to target above this means "not done".
    pub eps_far: f64,
    /// Trailing window length in seconds.
    pub window: f64,
    /// Minimum seconds between firings.
    pub cooldown: f64,
    /// Hard cap per episode.
    pub max_interventions: usize,
}

impl Default for TrapConfig {
    fn default() -> Self {
        TrapConfig {
            eps_stuck: 0.01,
            eps_far: 0.08,
            window: 2.0,
            cooldown: 4.0,
            max_interventions: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProprioSample {
    pub t: f64,
    pub position: Vec3,
}

/// A detected (or forced) trap, carrying the evidence that fired it.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrapEvent {
    pub t: f64,
    pub position: Vec3,
    /// Oldest in-window sample the displacement was measured against.
    pub reference: Vec3,
    pub displacement: f64,
    pub distance_to_target: f64,
    /// True when injected by a schedule rather than detected.
    pub forced: bool,
}

impl TrapEvent {
    /// Scheduled intervention, bypassing the detector.
    pub fn forced(t: f64, position: Vec3, distance_to_target: f64) -> Self {
        TrapEvent {
            t,
            position,
            reference: position,
            displacement: 0.0,
            distance_to_target,
            forced: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrapDetector {
    cfg: TrapConfig,
    samples: VecDeque<ProprioSample>,
    last_trigger: Option<f64>,
    triggered: usize,
}

impl TrapDetector {
    pub fn new(cfg: TrapConfig) -> Self {
        TrapDetector { cfg, samples: VecDeque::new(), last_trigger: None, triggered: 0 }
    }

    pub fn config(&self) -> &TrapConfig {
        &self.cfg
    }

    pub fn interventions_used(&self) -> usize {
        self.triggered
    }

    /// Record one proprioceptive sample. Timestamps must be nondecreasing.
    /// Samples older than 1.5 windows are dropped; the extra half window
    /// of retention keeps the reference sample safe from eviction.
    pub fn observe(&mut self, t: f64, position: Vec3) {
        if let Some(back) = self.samples.back() {
            debug_assert!(t >= back.t);
        }
        self.samples.push_back(ProprioSample { t, position });
        let horizon = t - 1.5 * self.cfg.window;
        while self.samples.front().is_some_and(|s| s.t < horizon) {
            self.samples.pop_front();
        }
    }

    /// Evaluate the trap criterion at time `t`. Pure: firing state only
    /// changes through `mark_triggered`.
    ///
    /// Requires warmup (buffered span covering a full window), respects
    /// the cooldown and the intervention cap, and fires only when the
    /// displacement against the oldest in-window sample stays under
    /// `eps_stuck` while the target distance exceeds `eps_far`.
    pub fn check(&self, t: f64, distance_to_target: f64) -> Option<TrapEvent> {
        if self.triggered >= self.cfg.max_interventions {
            return None;
        }
        if let Some(last) = self.last_trigger {
            if t - last < self.cfg.cooldown {
                return None;
            }
        }
        let newest = self.samples.back()?;
        let oldest = self.samples.front()?;
        if newest.t - oldest.t < self.cfg.window {
            return None;
        }
        let cutoff = t - self.cfg.window - WINDOW_SLACK;
        let reference = self.samples.iter().find(|s| s.t >= cutoff)?;
        let displacement = newest.position.distance(reference.position);
        if displacement < self.cfg.eps_stuck && distance_to_target > self.cfg.eps_far {
            Some(TrapEvent {
                t,
                position: newest.position,
                reference: reference.position,
                displacement,
                distance_to_target,
                forced: false,
            })
        } else {
            None
        }
    }

    /// Commit a firing: starts the cooldown, counts against the cap, and
    /// clears the sample buffer so post-recovery stillness is not judged
    /// against pre-recovery history.
    pub fn mark_triggered(&mut self, t: f64) {
        self.last_trigger = Some(t);
        self.triggered += 1;
        self.samples.clear();
    }

    pub fn reset(&mut self) {
        self.samples.clear();
        self.last_trigger = None;
        self.triggered = 0;
    }
}
