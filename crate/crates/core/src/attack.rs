//! Gradient-based perturbations of the agent's observation and their
//! realization in the environment.
//!
//! Two perturbation kinds:
//!
//! - critic gradient: `eta = -eps * grad V(x) / ||grad V(x)||`, a steepest
//!   descent step on the critic's value;
//! - actor saliency: with `a_d` the dominant logit,
//!   `H[i] = sum_{j != d} dPi_j/dx_i - dPi_d/dx_i` and `eta = eps * H / ||H||`.
//!
//! Two modes: in environment mode the perturbed observation is pushed
//! through the environment modifier, so the simulator really moves to a
//! disturbed state; in observation mode only the agent's input is fooled.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, FeatureMask, Observation};
use crate::nn::{self, FeedForwardNet};
use crate::ppo::{ActorCritic, Disturbance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    CriticGradient,
    ActorSaliency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Environment,
    Observation,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::CriticGradient => "critic_gradient",
            AttackKind::ActorSaliency => "actor_saliency",
        })
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Environment => "environment",
            AttackMode::Observation => "observation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub mode: AttackMode,
    /// L2 budget in normalized observation space.
    pub epsilon: f64,
    /// Realizable features; required in environment mode.
    pub feature_mask: Option<FeatureMask>,
    pub attack_probability: f64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, mode: AttackMode, epsilon: f64, feature_mask: Option<FeatureMask>) -> Self {
        Self {
            kind,
            mode,
            epsilon,
            feature_mask,
            attack_probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::Config("attack_probability must lie in [0, 1]".into()));
        }
        if self.mode == AttackMode::Environment && self.feature_mask.is_none() {
            return Err(Error::Config("environment attacks need a feature mask".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub eta: Vec<f64>,
    /// Set when the gradient (or saliency map) vanished and no attack is made.
    pub degenerate: bool,
}

impl Perturbation {
    pub fn norm(&self) -> f64 {
        nn::l2_norm(&self.eta)
    }

    fn from_direction(mut dir: Vec<f64>, epsilon: f64, mask: Option<&FeatureMask>) -> Result<Self> {
        if let Some(m) = mask {
            if m.len() != dir.len() {
                return Err(Error::Shape(format!(
                    "mask has length {}, observation {}",
                    m.len(),
                    dir.len()
                )));
            }
            m.apply(&mut dir);
        }
        let norm = nn::l2_norm(&dir);
        if !(norm > 0.0 && norm.is_finite()) {
            return Ok(Self {
                eta: vec![0.0; dir.len()],
                degenerate: true,
            });
        }
        let scale = epsilon / norm;
        Ok(Self {
            eta: dir.into_iter().map(|d| d * scale).collect(),
            degenerate: false,
        })
    }
}

/// Saliency map `H` over the actor's logits and the dominant action.
pub fn saliency_map(actor: &FeedForwardNet, x: &[f64]) -> Result<(Vec<f64>, usize)> {
    if actor.output_dim() < 2 {
        return Err(Error::Shape("saliency map needs at least two logits".into()));
    }
    let logits = actor.forward(x)?;
    let dominant = nn::argmax(&logits);
    let cache = actor.forward_cached(x)?;
    // H = sum_j s_j * dPi_j/dx with s_d = -1 and s_j = +1 otherwise
    let mut signs = vec![1.0; logits.len()];
    signs[dominant] = -1.0;
    let h = actor.backward(&cache, &signs, None)?;
    Ok((h, dominant))
}

/// Actor-saliency perturbation.
pub fn eaan_perturbation(
    actor: &FeedForwardNet,
    x: &[f64],
    epsilon: f64,
    mask: Option<&FeatureMask>,
) -> Result<Perturbation> {
    let (h, _) = saliency_map(actor, x)?;
    Perturbation::from_direction(h, epsilon, mask)
}

/// Critic-gradient perturbation.
pub fn eacn_perturbation(
    critic: &FeedForwardNet,
    x: &[f64],
    epsilon: f64,
    mask: Option<&FeatureMask>,
) -> Result<Perturbation> {
    if critic.output_dim() != 1 {
        return Err(Error::Shape("critic must be scalar-valued".into()));
    }
    let grad = critic.input_jacobian(x)?.swap_remove(0);
    let descent = grad.into_iter().map(|g| -g).collect();
    Perturbation::from_direction(descent, epsilon, mask)
}

/// `clamp(x + eta, -1, 1)`; the flag reports whether any entry was clamped.
pub fn craft_adversarial_observation(x: &[f64], eta: &Perturbation) -> (Observation, bool) {
    let mut clamped = false;
    let v = x
        .iter()
        .zip(&eta.eta)
        .map(|(a, e)| {
            let y = a + e;
            let c = y.clamp(-1.0, 1.0);
            clamped |= c != y;
            c
        })
        .collect();
    (Observation(v), clamped)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AttackDiagnostics {
    pub attacked: bool,
    /// Norm of the crafted perturbation.
    pub eta_norm: f64,
    /// `||x_agent - x||`: what actually reached the agent.
    pub effective_norm: f64,
    /// `V(x_agent) - V(x)`.
    pub value_delta: f64,
    /// Change of the dominant action's probability.
    pub prob_delta: f64,
    pub degenerate: bool,
    pub clamped: bool,
}

/// Attacks one step.
///
/// Returns the state the environment continues from, the observation the
/// agent acts on and diagnostics. In environment mode the agent sees the
/// true observation of the disturbed state.
pub fn apply_attack(
    cfg: &AttackConfig,
    agent: &ActorCritic,
    state: &EnvState,
    x: &Observation,
    rng: &mut dyn rand::RngCore,
) -> Result<(EnvState, Observation, AttackDiagnostics)> {
    cfg.validate()?;
    let fire = cfg.attack_probability >= 1.0 || rng.gen::<f64>() < cfg.attack_probability;
    if !fire {
        return Ok((state.clone(), x.clone(), AttackDiagnostics::default()));
    }
    // observation attacks use the full budget unless a mask is configured
    let mask = cfg.feature_mask.as_ref();
    let eta = match cfg.kind {
        AttackKind::CriticGradient => eacn_perturbation(&agent.critic, x, cfg.epsilon, mask)?,
        AttackKind::ActorSaliency => eaan_perturbation(&agent.actor, x, cfg.epsilon, mask)?,
    };
    let mut diag = AttackDiagnostics {
        attacked: true,
        eta_norm: eta.norm(),
        degenerate: eta.degenerate,
        ..Default::default()
    };
    if eta.degenerate {
        return Ok((state.clone(), x.clone(), diag));
    }
    let (x_adv, clamped) = craft_adversarial_observation(x, &eta);
    diag.clamped = clamped;
    let (next_state, agent_obs) = match cfg.mode {
        AttackMode::Environment => {
            let m = mask.ok_or_else(|| Error::Config("environment attacks need a feature mask".into()))?;
            let s = state.apply_modifier(&x_adv, m)?;
            let o = s.observe();
            (s, o)
        }
        AttackMode::Observation => (state.clone(), x_adv),
    };
    let delta: Vec<f64> = agent_obs.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
    diag.effective_norm = nn::l2_norm(&delta);
    diag.value_delta = agent.value(&agent_obs)? - agent.value(x)?;
    let before = nn::softmax(&agent.actor.forward(x)?);
    let after = nn::softmax(&agent.actor.forward(&agent_obs)?);
    let d = nn::argmax(&before);
    diag.prob_delta = after[d] - before[d];
    Ok((next_state, agent_obs, diag))
}

/// Per-rollout attack statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AttackSummary {
    pub steps: u64,
    pub attacked: u64,
    pub degenerate: u64,
    pub clamped: u64,
    pub mean_eta_norm: f64,
    pub mean_value_delta: f64,
}

/// [`Disturbance`] that attacks every visited state.
#[derive(Debug, Clone)]
pub struct AttackHook {
    pub cfg: AttackConfig,
    summary: AttackSummary,
    /// Per-step diagnostics, kept only when enabled.
    pub step_log: Option<Vec<AttackDiagnostics>>,
    /// Set if any observation-mode step changed the environment state.
    pub state_mutated: bool,
}

impl AttackHook {
    pub fn new(cfg: AttackConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            summary: AttackSummary::default(),
            step_log: None,
            state_mutated: false,
        })
    }

    pub fn with_step_log(mut self) -> Self {
        self.step_log = Some(Vec::new());
        self
    }

    /// Statistics since the last call.
    pub fn take_summary(&mut self) -> AttackSummary {
        let mut s = std::mem::take(&mut self.summary);
        let n = s.attacked.saturating_sub(s.degenerate).max(1) as f64;
        s.mean_eta_norm /= n;
        s.mean_value_delta /= n;
        s
    }
}

impl Disturbance for AttackHook {
    fn before_act(
        &mut self,
        agent: &ActorCritic,
        state: &EnvState,
        obs: &Observation,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(EnvState, Observation)> {
        let (s, o, d) = apply_attack(&self.cfg, agent, state, obs, rng)?;
        if self.cfg.mode == AttackMode::Observation && s != *state {
            self.state_mutated = true;
        }
        let sum = &mut self.summary;
        sum.steps += 1;
        if d.attacked {
            sum.attacked += 1;
        }
        if d.degenerate {
            sum.degenerate += 1;
        } else if d.attacked {
            sum.mean_eta_norm += d.eta_norm;
            sum.mean_value_delta += d.value_delta;
        }
        if d.clamped {
            sum.clamped += 1;
        }
        if let Some(log) = &mut self.step_log {
            log.push(d);
        }
        Ok((s, o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvConfig, EnvKind};
    use crate::nn::OutputHead;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(rows: Vec<Vec<f64>>, head: OutputHead) -> FeedForwardNet {
        let d = rows[0].len();
        let k = rows.len();
        FeedForwardNet::from_parts(vec![d, k], vec![rows.concat()], vec![vec![0.0; k]], head).unwrap()
    }

    #[test]
    fn critic_gradient_unit_arithmetic() {
        let critic = linear(vec![vec![3.0, 4.0]], OutputHead::Value);
        let p = eacn_perturbation(&critic, &[0.1, 0.2], 1.0, None).unwrap();
        assert!(!p.degenerate);
        assert!((p.eta[0] + 0.6).abs() < 1e-15 && (p.eta[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_critic_is_degenerate() {
        let critic = linear(vec![vec![0.0, 0.0]], OutputHead::Value);
        let p = eacn_perturbation(&critic, &[0.1, 0.2], 0.5, None).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.eta, vec![0.0, 0.0]);
    }

    #[test]
    fn two_action_saliency_is_weight_difference() {
        let w1 = vec![0.2, -0.4, 0.1];
        let w2 = vec![0.5, 0.3, -0.7];
        let actor = linear(vec![w1.clone(), w2.clone()], OutputHead::Logits);
        // pick x where action 1 dominates
        let x = [1.0, 1.0, -1.0];
        let (h, d) = saliency_map(&actor, &x).unwrap();
        assert_eq!(d, 1);
        for i in 0..3 {
            assert!((h[i] - (w1[i] - w2[i])).abs() < 1e-15);
        }
        // and the mirror case
        let (h, d) = saliency_map(&actor, &[-1.0, -1.0, 1.0]).unwrap();
        assert_eq!(d, 0);
        for i in 0..3 {
            assert!((h[i] - (w2[i] - w1[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_logit_rows_are_degenerate() {
        let w = vec![0.3, -0.2];
        let actor = linear(vec![w.clone(), w], OutputHead::Logits);
        let p = eaan_perturbation(&actor, &[0.5, 0.5], 0.1, None).unwrap();
        assert!(p.degenerate);
    }

    #[test]
    fn masked_perturbation_is_zero_off_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = FeedForwardNet::new(&[6, 16, 1], OutputHead::Value, 1.0, &mut rng).unwrap();
        let mask = EnvKind::Flappy.feature_mask();
        let x = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let p = eacn_perturbation(&critic, &x, 0.05, Some(&mask)).unwrap();
        for (i, e) in p.eta.iter().enumerate() {
            if !mask.get(i) {
                assert_eq!(*e, 0.0);
            }
        }
        assert!((p.norm() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn craft_clamps_and_preserves_interior_norm() {
        let x = [0.95, 0.0];
        let eta = Perturbation { eta: vec![0.1, 0.0], degenerate: false };
        let (x_adv, clamped) = craft_adversarial_observation(&x, &eta);
        assert!(clamped);
        assert_eq!(x_adv.0, vec![1.0, 0.0]);

        let zero = Perturbation { eta: vec![0.0, 0.0], degenerate: true };
        assert_eq!(craft_adversarial_observation(&x, &zero).0 .0, x.to_vec());
    }

    fn flappy_agent() -> (ActorCritic, EnvState, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ac = ActorCritic::categorical(6, 2, &[16, 16], &mut rng).unwrap();
        let (s, o) = env::reset(&EnvConfig::flappy(150.0, 9)).unwrap();
        (ac, s, o)
    }

    #[test]
    fn zero_probability_is_noop() {
        let (ac, s, o) = flappy_agent();
        let mut cfg = AttackConfig::new(
            AttackKind::CriticGradient,
            AttackMode::Environment,
            0.2,
            Some(EnvKind::Flappy.feature_mask()),
        );
        cfg.attack_probability = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s2, o2, d) = apply_attack(&cfg, &ac, &s, &o, &mut rng).unwrap();
        assert_eq!(s2, s);
        assert_eq!(o2, o);
        assert!(!d.attacked);
    }

    #[test]
    fn observation_mode_leaves_state() {
        let (ac, s, o) = flappy_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [AttackKind::CriticGradient, AttackKind::ActorSaliency] {
            let cfg = AttackConfig::new(kind, AttackMode::Observation, 0.1, None);
            let (s2, o2, d) = apply_attack(&cfg, &ac, &s, &o, &mut rng).unwrap();
            assert_eq!(s2, s);
            assert!(d.attacked && !d.degenerate);
            let moved = nn::l2_norm(&o2.iter().zip(o.iter()).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!((moved - d.effective_norm).abs() < 1e-12);
            assert!(moved <= 0.1 + 1e-12);
            assert!(d.clamped || (moved - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn environment_mode_needs_mask() {
        let (ac, s, o) = flappy_agent();
        let cfg = AttackConfig::new(AttackKind::CriticGradient, AttackMode::Environment, 0.1, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(apply_attack(&cfg, &ac, &s, &o, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn environment_mode_realizes_masked_features() {
        let (ac, s, o) = flappy_agent();
        let mask = EnvKind::Flappy.feature_mask();
        let cfg = AttackConfig::new(AttackKind::CriticGradient, AttackMode::Environment, 0.05, Some(mask.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s2, o2, _) = apply_attack(&cfg, &ac, &s, &o, &mut rng).unwrap();
        let eta = eacn_perturbation(&ac.critic, &o, 0.05, Some(&mask)).unwrap();
        let (x_adv, _) = craft_adversarial_observation(&o, &eta);
        for i in mask.active_indices() {
            assert!((o2[i] - x_adv[i]).abs() <= 1e-9);
        }
        assert_eq!(o2, s2.observe());
    }
}
