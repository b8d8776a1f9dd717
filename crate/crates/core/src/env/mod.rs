//! Toy simulators with an explicit observation map `X` and an environment
//! modifier `M`.
//!
//! Both environments keep the full simulator state separate from the
//! normalized observation the networks see. `apply_modifier` inverts the
//! observation map on the attackable features (see [`FeatureMask`]) and
//! writes the result back into the state, followed by `project_to_valid`.

pub mod flappy;
pub mod highway;

use std::io::Write;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use flappy::FlappyState;
pub use highway::HighwayState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Highway,
    Flappy,
}

impl EnvKind {
    pub fn num_actions(self) -> usize {
        match self {
            EnvKind::Highway => highway::NUM_ACTIONS,
            EnvKind::Flappy => flappy::NUM_ACTIONS,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Highway => highway::OBS_DIM,
            EnvKind::Flappy => flappy::OBS_DIM,
        }
    }

    /// Features the environment modifier can realize.
    pub fn feature_mask(self) -> FeatureMask {
        match self {
            EnvKind::Highway => highway::feature_mask(),
            EnvKind::Flappy => flappy::feature_mask(),
        }
    }

    /// Difficulty of the training environment.
    pub fn base_difficulty(self) -> f64 {
        match self {
            EnvKind::Highway => 1.0,
            EnvKind::Flappy => 150.0,
        }
    }

    /// Harder held-out difficulty used to measure robustness.
    pub fn target_difficulty(self) -> f64 {
        match self {
            EnvKind::Highway => 2.0,
            EnvKind::Flappy => 100.0,
        }
    }

    pub fn default_time_limit(self) -> usize {
        match self {
            EnvKind::Highway => 600,
            EnvKind::Flappy => 1000,
        }
    }

    /// Name of the per-episode performance metric.
    pub fn metric_name(self) -> &'static str {
        match self {
            EnvKind::Highway => "distance",
            EnvKind::Flappy => "survived_steps",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Highway => "highway",
            EnvKind::Flappy => "flappy",
        }
    }
}

/// `difficulty` is the traffic density multiplier (highway) or the gap size
/// in pixels (flappy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub difficulty: f64,
    pub time_limit: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn highway(traffic_density: f64, seed: u64) -> Self {
        Self {
            kind: EnvKind::Highway,
            difficulty: traffic_density,
            time_limit: EnvKind::Highway.default_time_limit(),
            seed,
        }
    }

    pub fn flappy(gap_size: f64, seed: u64) -> Self {
        Self {
            kind: EnvKind::Flappy,
            difficulty: gap_size,
            time_limit: EnvKind::Flappy.default_time_limit(),
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_difficulty(self, difficulty: f64) -> Self {
        Self { difficulty, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_limit == 0 {
            return Err(Error::Config("time_limit must be positive".into()));
        }
        let d = self.difficulty;
        match self.kind {
            EnvKind::Highway if !(d.is_finite() && d > 0.0) => Err(Error::Config(format!(
                "traffic density must be positive, got {d}"
            ))),
            EnvKind::Flappy if !(d > 0.0 && d < flappy::SCREEN_HEIGHT) => Err(Error::Config(
                format!("gap size must lie in (0, {}), got {d}", flappy::SCREEN_HEIGHT),
            )),
            _ => Ok(()),
        }
    }
}

/// Normalized feature vector, every entry in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Deref for Observation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Observation {
    fn from(v: Vec<f64>) -> Self {
        Observation(v)
    }
}

/// `true` marks a feature the modifier can write back into the state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMask(pub Vec<bool>);

impl FeatureMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    /// Indices of the attackable features, in order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }

    /// Zeroes `v` on every masked-out coordinate.
    pub fn apply(&self, v: &mut [f64]) {
        for (x, m) in v.iter_mut().zip(&self.0) {
            if !m {
                *x = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalCause {
    Collision,
    Ground,
    TimeLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Meters driven by the ego vehicle (highway); 0 for flappy.
    pub distance_traveled: f64,
    /// Steps survived so far (flappy); elapsed steps for highway.
    pub survived_steps: usize,
    pub terminal: Option<TerminalCause>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Highway(HighwayState),
    Flappy(FlappyState),
}

/// Starts an episode.
pub fn reset(cfg: &EnvConfig) -> Result<(EnvState, Observation)> {
    cfg.validate()?;
    let state = match cfg.kind {
        EnvKind::Highway => EnvState::Highway(HighwayState::reset(cfg)?),
        EnvKind::Flappy => EnvState::Flappy(FlappyState::reset(cfg)),
    };
    let obs = state.observe();
    Ok((state, obs))
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::Highway(_) => EnvKind::Highway,
            EnvState::Flappy(_) => EnvKind::Flappy,
        }
    }

    pub fn step(&self, action: usize) -> Result<(EnvState, StepResult)> {
        match self {
            EnvState::Highway(s) => s.step(action).map(|(s, r)| (EnvState::Highway(s), r)),
            EnvState::Flappy(s) => s.step(action).map(|(s, r)| (EnvState::Flappy(s), r)),
        }
    }

    pub fn observe(&self) -> Observation {
        match self {
            EnvState::Highway(s) => s.observe(),
            EnvState::Flappy(s) => s.observe(),
        }
    }

    /// `M(s, x')`: writes the masked features of `x_adv` into the state and
    /// projects the result back onto the valid state set.
    pub fn apply_modifier(&self, x_adv: &[f64], mask: &FeatureMask) -> Result<EnvState> {
        let kind = self.kind();
        if x_adv.len() != kind.obs_dim() || mask.len() != kind.obs_dim() {
            return Err(Error::Input(format!(
                "modifier expects {} features, got observation {} and mask {}",
                kind.obs_dim(),
                x_adv.len(),
                mask.len()
            )));
        }
        if x_adv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite adversarial observation".into()));
        }
        Ok(match self {
            EnvState::Highway(s) => EnvState::Highway(s.apply_modifier(x_adv, mask)),
            EnvState::Flappy(s) => EnvState::Flappy(s.apply_modifier(x_adv, mask)),
        })
    }

    pub fn project_to_valid(&self) -> EnvState {
        match self {
            EnvState::Highway(s) => EnvState::Highway(s.project_to_valid()),
            EnvState::Flappy(s) => EnvState::Flappy(s.project_to_valid()),
        }
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self {
            EnvState::Highway(s) => s.check_invariants(),
            EnvState::Flappy(s) => s.check_invariants(),
        }
    }

    /// Episode performance metric: meters driven or steps survived.
    pub fn metric(&self) -> f64 {
        match self {
            EnvState::Highway(s) => s.distance_traveled(),
            EnvState::Flappy(s) => s.elapsed_steps as f64,
        }
    }
}

/// One row of a debug episode trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub distance: f64,
}

pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EnvConfig::highway(0.0, 1).validate().is_err());
        assert!(EnvConfig::highway(f64::NAN, 1).validate().is_err());
        assert!(EnvConfig::flappy(0.0, 1).validate().is_err());
        assert!(EnvConfig::flappy(512.0, 1).validate().is_err());
        assert!(EnvConfig::flappy(150.0, 1).validate().is_ok());
        assert!(matches!(reset(&EnvConfig::highway(-1.0, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn modifier_rejects_bad_lengths() {
        let (s, obs) = reset(&EnvConfig::flappy(150.0, 3)).unwrap();
        let mask = EnvKind::Flappy.feature_mask();
        assert!(matches!(s.apply_modifier(&obs[..3], &mask), Err(Error::Input(_))));
        let short = FeatureMask(vec![true; 2]);
        assert!(matches!(s.apply_modifier(&obs, &short), Err(Error::Input(_))));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        let rows = [TraceRow { step: 0, action: 1, reward: 1.0, done: false, distance: 0.0 }];
        write_trace(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,action,reward,done,distance\n0,1,1.0,false,0.0"));
    }
}
