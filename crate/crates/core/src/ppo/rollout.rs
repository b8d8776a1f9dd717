use rand::Rng;
use serde::Serialize;

use super::{ActorCritic, LossTerms, PpoTrainer, Trajectory};
use crate::env::{self, EnvConfig, EnvState, Observation};
use crate::{Error, Result};

/// Mixes an episode index into a base seed (splitmix64 finalizer).
pub fn episode_seed(base: u64, episode: u64) -> u64 {
    let mut z = base
        .wrapping_add(episode.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hook run between observing a state and letting the agent act on it.
pub trait Disturbance {
    /// Returns the (possibly disturbed) state the environment continues from
    /// and the observation handed to the agent.
    fn before_act(
        &mut self,
        agent: &ActorCritic,
        state: &EnvState,
        obs: &Observation,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(EnvState, Observation)>;

    /// Called with the protagonist's reward once the environment stepped.
    fn after_step(&mut self, _reward: f64, _done: bool) -> Result<()> {
        Ok(())
    }

    /// Called when an episode ends, before the next reset.
    fn on_episode_start(&mut self, _rng: &mut dyn rand::RngCore) {}
}

pub struct NoDisturbance;

impl Disturbance for NoDisturbance {
    fn before_act(
        &mut self,
        _agent: &ActorCritic,
        state: &EnvState,
        obs: &Observation,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<(EnvState, Observation)> {
        Ok((state.clone(), obs.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub episode_return: f64,
    /// Distance traveled (highway) or steps survived (flappy).
    pub metric: f64,
    pub steps: usize,
}

/// A single environment instance kept alive across rollouts.
#[derive(Debug, Clone)]
pub struct EnvRunner {
    cfg: EnvConfig,
    state: EnvState,
    obs: Observation,
    episode: u64,
    episode_return: f64,
    total_steps: u64,
    finished: Vec<EpisodeMetrics>,
    fresh_episode: bool,
}

impl EnvRunner {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let (state, obs) = env::reset(&cfg.with_seed(episode_seed(cfg.seed, 0)))?;
        Ok(Self {
            cfg,
            state,
            obs,
            episode: 0,
            episode_return: 0.0,
            total_steps: 0,
            finished: Vec::new(),
            fresh_episode: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Undisturbed observation of the state the next step starts from.
    pub fn current_observation(&self) -> &Observation {
        &self.obs
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Episodes finished since the last call.
    pub fn take_finished(&mut self) -> Vec<EpisodeMetrics> {
        std::mem::take(&mut self.finished)
    }

    /// Steps the environment `steps` times with `agent` sampling actions.
    pub fn collect<R: Rng>(
        &mut self,
        agent: &ActorCritic,
        steps: usize,
        hook: &mut dyn Disturbance,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut traj = Trajectory::default();
        for _ in 0..steps {
            if self.fresh_episode {
                hook.on_episode_start(rng);
                self.fresh_episode = false;
            }
            let (state, agent_obs) = hook.before_act(agent, &self.state, &self.obs, rng)?;
            let out = agent.act(&agent_obs, rng)?;
            let action = out
                .action
                .discrete()
                .ok_or_else(|| Error::Input("protagonist must use a discrete policy".into()))?;
            let (next, result) = state.step(action)?;
            hook.after_step(result.reward, result.done)?;
            self.total_steps += 1;
            self.episode_return += result.reward;
            traj.push(agent_obs.0, out, result.reward, result.done);
            if result.done {
                self.finished.push(EpisodeMetrics {
                    episode_return: self.episode_return,
                    metric: next.metric(),
                    steps: result.info.survived_steps,
                });
                self.episode += 1;
                self.episode_return = 0.0;
                let (s, o) = env::reset(&self.cfg.with_seed(episode_seed(self.cfg.seed, self.episode)))?;
                self.state = s;
                self.obs = o;
                self.fresh_episode = true;
            } else {
                self.state = next;
                self.obs = result.observation;
            }
        }
        traj.bootstrap_value = agent.value(&self.obs)?;
        Ok(traj)
    }
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_metric: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

impl PpoTrainer {
    /// Collects `total_steps` environment steps in rollouts of
    /// `hp.rollout_length` (the last one possibly shorter), updating after
    /// each rollout.
    pub fn train<R: Rng>(
        &mut self,
        runner: &mut EnvRunner,
        total_steps: u64,
        hook: &mut dyn Disturbance,
        rng: &mut R,
        mut on_update: impl FnMut(&UpdateRecord),
    ) -> Result<()> {
        let mut done = 0u64;
        while done < total_steps {
            let n = (self.hp.rollout_length as u64).min(total_steps - done) as usize;
            let traj = runner.collect(&self.ac, n, hook, rng)?;
            let terms: LossTerms = self.update(&traj, rng)?;
            done += n as u64;
            let eps = runner.take_finished();
            let k = eps.len();
            let mean = |f: fn(&EpisodeMetrics) -> f64| {
                if k == 0 {
                    f64::NAN
                } else {
                    eps.iter().map(f).sum::<f64>() / k as f64
                }
            };
            on_update(&UpdateRecord {
                step: runner.total_steps(),
                episodes: k,
                mean_return: mean(|e| e.episode_return),
                mean_metric: mean(|e| e.metric),
                policy_loss: terms.policy_loss,
                value_loss: terms.value_loss,
                entropy: terms.entropy,
            });
        }
        Ok(())
    }
}

/// Greedy evaluation over `episodes` episodes seeded from `cfg.seed`.
///
/// The hook lets the attack-efficiency experiment disturb evaluation
/// episodes; pass [`NoDisturbance`] for plain evaluation.
pub fn evaluate_policy(
    ac: &ActorCritic,
    cfg: &EnvConfig,
    episodes: usize,
    hook: &mut dyn Disturbance,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<EpisodeMetrics>> {
    if episodes == 0 {
        return Err(Error::Input("episodes must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let ep_cfg = cfg.with_seed(episode_seed(cfg.seed, ep as u64));
        let (mut state, mut obs) = env::reset(&ep_cfg)?;
        hook.on_episode_start(rng);
        let mut ret = 0.0;
        loop {
            let (s, agent_obs) = hook.before_act(ac, &state, &obs, rng)?;
            let action = ac
                .act_greedy(&agent_obs)?
                .discrete()
                .ok_or_else(|| Error::Input("protagonist must use a discrete policy".into()))?;
            let (next, r) = s.step(action)?;
            hook.after_step(r.reward, r.done)?;
            ret += r.reward;
            if r.done {
                out.push(EpisodeMetrics {
                    episode_return: ret,
                    metric: next.metric(),
                    steps: r.info.survived_steps,
                });
                break;
            }
            state = next;
            obs = r.observation;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(seed: u64) -> ActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActorCritic::categorical(EnvKind::Flappy.obs_dim(), 2, &[16], &mut rng).unwrap()
    }

    #[test]
    fn evaluation_is_deterministic_and_sized() {
        let ac = agent(1);
        let cfg = EnvConfig::flappy(150.0, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = evaluate_policy(&ac, &cfg, 200, &mut NoDisturbance, &mut rng).unwrap();
        let b = evaluate_policy(&ac, &cfg, 200, &mut NoDisturbance, &mut rng).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        assert!(evaluate_policy(&ac, &cfg, 0, &mut NoDisturbance, &mut rng).is_err());
    }

    #[test]
    fn collect_continues_across_rollouts() {
        let ac = agent(2);
        let mut runner = EnvRunner::new(EnvConfig::flappy(150.0, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t1 = runner.collect(&ac, 100, &mut NoDisturbance, &mut rng).unwrap();
        let t2 = runner.collect(&ac, 100, &mut NoDisturbance, &mut rng).unwrap();
        assert_eq!(t1.len() + t2.len(), 200);
        assert_eq!(runner.total_steps(), 200);
        let eps = runner.take_finished();
        assert_eq!(eps.iter().map(|e| e.steps).sum::<usize>() <= 200, true);
        let dones = t1.dones.iter().chain(&t2.dones).filter(|d| **d).count();
        assert_eq!(dones, eps.len());
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0), episode_seed(1, 1));
        assert_ne!(episode_seed(1, 0), episode_seed(2, 0));
    }
}
