//! Adversary-agent baselines: RARL, FSP and CO-FSP.
//!
//! The adversary is a Gaussian PPO agent whose squashed action
//! `u in [-1, 1]^k` (one entry per attackable feature) becomes the
//! perturbation `eta = eps * u / max(1, ||u||)`, realized through the same
//! environment modifier as the gradient attacks. FSP adds a supervised
//! model of the adversary's historical actions that is mixed in per episode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvState, FeatureMask, Observation};
use crate::nn::{self, FeedForwardNet, Gradient, OutputHead};
use crate::ppo::{
    ActOutput, ActorCritic, Adam, Disturbance, EnvRunner, NoDisturbance, PpoConfig, PpoTrainer, Trajectory,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryAgent {
    pub policy: ActorCritic,
    pub epsilon: f64,
}

impl AdversaryAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        mask: &FeatureMask,
        epsilon: f64,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let policy = ActorCritic::gaussian(obs_dim, mask.count(), hidden, -0.5, rng)?;
        Ok(Self { policy, epsilon })
    }
}

/// Scatters `eps * u / max(1, ||u||)` onto the mask-true coordinates.
pub fn perturbation_from_action(u: &[f64], epsilon: f64, mask: &FeatureMask) -> Result<Vec<f64>> {
    let active = mask.active_indices();
    if u.len() != active.len() {
        return Err(Error::Config(format!(
            "adversary outputs {} values for {} attackable features",
            u.len(),
            active.len()
        )));
    }
    let scale = epsilon / nn::l2_norm(u).max(1.0);
    let mut eta = vec![0.0; mask.len()];
    for (&i, ui) in active.iter().zip(u) {
        eta[i] = scale * ui;
    }
    Ok(eta)
}

/// Applies a disturbance `u` to `state`; returns the new state and `eta`.
pub fn disturb_with_action(
    state: &EnvState,
    u: &[f64],
    epsilon: f64,
    mask: &FeatureMask,
) -> Result<(EnvState, Vec<f64>)> {
    let eta = perturbation_from_action(u, epsilon, mask)?;
    let x = state.observe();
    let x_adv: Vec<f64> = x.iter().zip(&eta).map(|(a, e)| (a + e).clamp(-1.0, 1.0)).collect();
    Ok((state.apply_modifier(&x_adv, mask)?, eta))
}

/// Samples the adversary's policy and disturbs `state`.
pub fn adversary_disturb(
    adv: &AdversaryAgent,
    state: &EnvState,
    mask: &FeatureMask,
    rng: &mut dyn rand::RngCore,
) -> Result<(EnvState, Vec<f64>, ActOutput)> {
    if adv.policy.action_dim() != mask.count() {
        return Err(Error::Config("adversary output dimension does not match the mask".into()));
    }
    let x = state.observe();
    let out = adv.policy.act(&x, rng)?;
    let u = out.action.squashed().expect("adversary policy is Gaussian").to_vec();
    let (s, eta) = disturb_with_action(state, &u, adv.epsilon, mask)?;
    Ok((s, eta, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooperationConfig {
    /// Weight of the cooperative term, swept over [0, 0.5].
    pub alpha: f64,
    pub cooperative_reward_scale: f64,
}

impl Default for CooperationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            cooperative_reward_scale: 1.0,
        }
    }
}

/// `alpha * R_c - (1 - alpha) * r_p` with `R_c = scale * (1 - ||eta|| / eps)`.
pub fn adversary_reward(r_protagonist: f64, eta_norm: f64, epsilon: f64, coop: &CooperationConfig) -> f64 {
    let cooperative = coop.cooperative_reward_scale * (1.0 - eta_norm / epsilon);
    coop.alpha * cooperative - (1.0 - coop.alpha) * r_protagonist
}

/// Supervised model of the adversary's average historical strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageStrategyModel {
    pub net: FeedForwardNet,
    buffer: Vec<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
    seen: u64,
    opt: Adam,
    pub batch_size: usize,
}

impl AverageStrategyModel {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        capacity: usize,
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let net = FeedForwardNet::new(&sizes, OutputHead::Tanh, 1.0, rng)?;
        let opt = Adam::new(net.num_params(), learning_rate);
        Ok(Self {
            net,
            buffer: Vec::new(),
            capacity: capacity.max(1),
            seen: 0,
            opt,
            batch_size: 256,
        })
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Reservoir-samples `(x, u)` into the fixed-capacity buffer.
    pub fn observe<R: Rng + ?Sized>(&mut self, x: Vec<f64>, u: Vec<f64>, rng: &mut R) {
        self.seen += 1;
        if self.buffer.len() < self.capacity {
            self.buffer.push((x, u));
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.buffer[j as usize] = (x, u);
            }
        }
    }

    pub fn act(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    /// Mean squared error over the whole buffer.
    pub fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for (x, u) in &self.buffer {
            let y = self.net.forward(x)?;
            total += y.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / self.buffer.len().max(1) as f64)
    }

    /// Shuffled minibatch regression toward the stored actions; returns the
    /// buffer loss after each epoch.
    pub fn fsp_update_average_strategy<R: Rng + ?Sized>(&mut self, epochs: usize, rng: &mut R) -> Result<Vec<f64>> {
        if self.buffer.is_empty() {
            return Err(Error::Input("average-strategy buffer is empty".into()));
        }
        let mut order: Vec<usize> = (0..self.buffer.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.batch_size) {
                let mut grad = Gradient::zeros_like(&self.net);
                let n = chunk.len() as f64;
                for &i in chunk {
                    let (x, u) = &self.buffer[i];
                    let cache = self.net.forward_cached(x)?;
                    let up: Vec<f64> = cache.output().iter().zip(u).map(|(y, t)| 2.0 * (y - t) / n).collect();
                    self.net.backward(&cache, &up, Some(&mut grad))?;
                }
                self.opt.step(self.net.params_flat_mut(), grad.flat().iter());
            }
            losses.push(self.loss()?);
        }
        Ok(losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerModel {
    Reinforcement,
    Supervised,
}

/// Per-episode Bernoulli choice between the RL and the SL model.
pub fn fsp_sample_attacker<R: Rng + ?Sized>(rng: &mut R, mix_probability: f64) -> AttackerModel {
    if rng.gen::<f64>() < mix_probability {
        AttackerModel::Reinforcement
    } else {
        AttackerModel::Supervised
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RarlSequential,
    FspSequential,
    CoFspAlternating,
}

impl ScheduleKind {
    fn uses_average_strategy(self) -> bool {
        !matches!(self, ScheduleKind::RarlSequential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Adversary,
    Protagonist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub adversary_steps: u64,
    pub protagonist_steps: u64,
    /// CO-FSP alternation block, environment steps.
    pub block_size: u64,
    pub epsilon: f64,
    pub coop: CooperationConfig,
    pub mix_probability: f64,
    pub buffer_capacity: usize,
    pub sl_epochs: usize,
    pub sl_learning_rate: f64,
    pub adversary_ppo: PpoConfig,
}

impl ScheduleConfig {
    pub fn new(kind: ScheduleKind, adversary_steps: u64, protagonist_steps: u64, epsilon: f64) -> Self {
        Self {
            kind,
            adversary_steps,
            protagonist_steps,
            block_size: 10_000,
            epsilon,
            coop: CooperationConfig::default(),
            mix_probability: 0.5,
            buffer_capacity: 50_000,
            sl_epochs: 2,
            sl_learning_rate: 1e-3,
            adversary_ppo: PpoConfig::default(),
        }
    }
}

/// One contiguous stretch of training of a single agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseLog {
    pub phase: usize,
    pub agent: Role,
    pub start_step: u64,
    pub end_step: u64,
    pub updates: usize,
    pub mean_adversary_reward: f64,
    pub mean_protagonist_reward: f64,
}

pub struct ScheduleOutcome {
    pub protagonist: PpoTrainer,
    pub adversary: PpoTrainer,
    pub average_strategy: Option<AverageStrategyModel>,
    pub log: Vec<PhaseLog>,
}

/// Adversary acting through the environment modifier during rollouts.
struct AdversaryHook<'a> {
    adversary: &'a ActorCritic,
    average: Option<&'a AverageStrategyModel>,
    mask: &'a FeatureMask,
    epsilon: f64,
    coop: CooperationConfig,
    mix_probability: f64,
    /// Collect the adversary's own transitions (adversary is training).
    recording: bool,
    current: AttackerModel,
    pending: Option<(Vec<f64>, ActOutput, f64)>,
    traj: Trajectory,
    sl_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    reward_sum: f64,
    protagonist_reward_sum: f64,
    steps: u64,
}

impl Disturbance for AdversaryHook<'_> {
    fn before_act(
        &mut self,
        _agent: &ActorCritic,
        state: &EnvState,
        obs: &Observation,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(EnvState, Observation)> {
        let (u, out) = match (self.current, self.average) {
            (AttackerModel::Supervised, Some(avg)) => (avg.act(obs)?, None),
            _ => {
                let out = self.adversary.act(obs, rng)?;
                (out.action.squashed().expect("Gaussian adversary").to_vec(), Some(out))
            }
        };
        let (s, eta) = disturb_with_action(state, &u, self.epsilon, self.mask)?;
        if self.recording {
            let out = out.expect("recording adversary always samples its RL policy");
            self.sl_pairs.push((obs.0.clone(), u));
            self.pending = Some((obs.0.clone(), out, nn::l2_norm(&eta)));
        }
        let o = s.observe();
        Ok((s, o))
    }

    fn after_step(&mut self, reward: f64, done: bool) -> Result<()> {
        self.steps += 1;
        self.protagonist_reward_sum += reward;
        if let Some((x, out, eta_norm)) = self.pending.take() {
            let r = adversary_reward(reward, eta_norm, self.epsilon, &self.coop);
            self.reward_sum += r;
            self.traj.push(x, out, r, done);
        }
        Ok(())
    }

    fn on_episode_start(&mut self, rng: &mut dyn rand::RngCore) {
        self.current = if self.recording || self.average.is_none() {
            AttackerModel::Reinforcement
        } else {
            fsp_sample_attacker(rng, self.mix_probability)
        };
    }
}

/// Runs an adversary-agent schedule starting from a pretrained protagonist.
///
/// Sequential schedules train the adversary first against the frozen
/// protagonist, then the protagonist against the frozen adversary.
/// CO-FSP alternates blocks of `block_size` steps, adversary first, until
/// both budgets are spent.
pub fn run_schedule<R: Rng>(
    cfg: &ScheduleConfig,
    protagonist: Option<PpoTrainer>,
    adversary: PpoTrainer,
    env_cfg: &EnvConfig,
    rng: &mut R,
) -> Result<ScheduleOutcome> {
    let mut protagonist =
        protagonist.ok_or_else(|| Error::Config("adversarial schedules need a pretrained protagonist".into()))?;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("adversary epsilon must be positive".into()));
    }
    let mask = env_cfg.kind.feature_mask();
    if adversary.ac.action_dim() != mask.count() {
        return Err(Error::Config("adversary output dimension does not match the mask".into()));
    }
    let mut adversary = adversary;
    let mut runner = EnvRunner::new(*env_cfg)?;
    let mut log = Vec::new();

    if cfg.adversary_steps == 0 {
        // no adversary: plain continuation of the protagonist's training
        let start = runner.total_steps();
        let mut updates = 0;
        protagonist.train(&mut runner, cfg.protagonist_steps, &mut NoDisturbance, rng, |_| updates += 1)?;
        log.push(PhaseLog {
            phase: 0,
            agent: Role::Protagonist,
            start_step: start,
            end_step: runner.total_steps(),
            updates,
            mean_adversary_reward: f64::NAN,
            mean_protagonist_reward: f64::NAN,
        });
        return Ok(ScheduleOutcome { protagonist, adversary, average_strategy: None, log });
    }

    let mut average = if cfg.kind.uses_average_strategy() {
        Some(AverageStrategyModel::new(
            env_cfg.kind.obs_dim(),
            mask.count(),
            &cfg.adversary_ppo.hidden,
            cfg.buffer_capacity,
            cfg.sl_learning_rate,
            rng,
        )?)
    } else {
        None
    };

    let blocks: Vec<(Role, u64)> = match cfg.kind {
        ScheduleKind::RarlSequential | ScheduleKind::FspSequential => vec![
            (Role::Adversary, cfg.adversary_steps),
            (Role::Protagonist, cfg.protagonist_steps),
        ],
        ScheduleKind::CoFspAlternating => {
            let block = cfg.block_size.max(1);
            let (mut adv_left, mut prot_left) = (cfg.adversary_steps, cfg.protagonist_steps);
            let mut v = Vec::new();
            while adv_left > 0 || prot_left > 0 {
                if adv_left > 0 {
                    let n = block.min(adv_left);
                    v.push((Role::Adversary, n));
                    adv_left -= n;
                }
                if prot_left > 0 {
                    let n = block.min(prot_left);
                    v.push((Role::Protagonist, n));
                    prot_left -= n;
                }
            }
            v
        }
    };

    // attacker model of the running episode, carried across rollout chunks
    let mut current = AttackerModel::Reinforcement;
    for (phase, (role, steps)) in blocks.into_iter().enumerate() {
        if steps == 0 {
            continue;
        }
        let start = runner.total_steps();
        let mut done = 0u64;
        let mut updates = 0;
        let (mut adv_reward, mut prot_reward, mut counted) = (0.0, 0.0, 0u64);
        let chunk_len = match role {
            Role::Adversary => cfg.adversary_ppo.rollout_length,
            Role::Protagonist => protagonist.hp.rollout_length,
        } as u64;
        while done < steps {
            let n = chunk_len.min(steps - done) as usize;
            let mut hook = AdversaryHook {
                adversary: &adversary.ac,
                average: average.as_ref(),
                mask: &mask,
                epsilon: cfg.epsilon,
                coop: cfg.coop,
                mix_probability: cfg.mix_probability,
                recording: role == Role::Adversary,
                current: if role == Role::Adversary { AttackerModel::Reinforcement } else { current },
                pending: None,
                traj: Trajectory::default(),
                sl_pairs: Vec::new(),
                reward_sum: 0.0,
                protagonist_reward_sum: 0.0,
                steps: 0,
            };
            let prot_traj = runner.collect(&protagonist.ac, n, &mut hook, rng)?;
            adv_reward += hook.reward_sum;
            prot_reward += hook.protagonist_reward_sum;
            counted += hook.steps;
            current = hook.current;
            let mut adv_traj = std::mem::take(&mut hook.traj);
            let sl_pairs = std::mem::take(&mut hook.sl_pairs);
            drop(hook);
            match role {
                Role::Adversary => {
                    adv_traj.bootstrap_value = adversary.ac.value(runner.current_observation())?;
                    adversary.update(&adv_traj, rng)?;
                    if let Some(avg) = average.as_mut() {
                        for (x, u) in sl_pairs {
                            avg.observe(x, u, rng);
                        }
                        avg.fsp_update_average_strategy(cfg.sl_epochs, rng)?;
                    }
                }
                Role::Protagonist => {
                    protagonist.update(&prot_traj, rng)?;
                }
            }
            runner.take_finished();
            updates += 1;
            done += n as u64;
        }
        let c = counted.max(1) as f64;
        log.push(PhaseLog {
            phase,
            agent: role,
            start_step: start,
            end_step: runner.total_steps(),
            updates,
            mean_adversary_reward: if role == Role::Adversary { adv_reward / c } else { f64::NAN },
            mean_protagonist_reward: prot_reward / c,
        });
    }
    Ok(ScheduleOutcome {
        protagonist,
        adversary,
        average_strategy: average,
        log,
    })
}

/// A trained adversary disturbing a protagonist it no longer learns from.
///
/// Acts with the mean of its policy; with an average-strategy model the
/// attacker is drawn per episode as during training.
pub struct FrozenAdversary<'a> {
    pub adversary: &'a ActorCritic,
    pub average: Option<&'a AverageStrategyModel>,
    pub mask: FeatureMask,
    pub epsilon: f64,
    pub mix_probability: f64,
    current: AttackerModel,
    /// Steps whose state the adversary changed.
    pub disturbed_steps: u64,
}

impl<'a> FrozenAdversary<'a> {
    pub fn new(adversary: &'a ActorCritic, average: Option<&'a AverageStrategyModel>, mask: FeatureMask, epsilon: f64) -> Self {
        Self {
            adversary,
            average,
            mask,
            epsilon,
            mix_probability: 0.5,
            current: AttackerModel::Reinforcement,
            disturbed_steps: 0,
        }
    }
}

impl Disturbance for FrozenAdversary<'_> {
    fn before_act(
        &mut self,
        _agent: &ActorCritic,
        state: &EnvState,
        obs: &Observation,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<(EnvState, Observation)> {
        let u = match (self.current, self.average) {
            (AttackerModel::Supervised, Some(avg)) => avg.act(obs)?,
            _ => self.adversary.act_greedy(obs)?.squashed().expect("Gaussian adversary").to_vec(),
        };
        let (s, _) = disturb_with_action(state, &u, self.epsilon, &self.mask)?;
        if &s != state {
            self.disturbed_steps += 1;
        }
        let o = s.observe();
        Ok((s, o))
    }

    fn on_episode_start(&mut self, rng: &mut dyn rand::RngCore) {
        if self.average.is_some() {
            self.current = fsp_sample_attacker(rng, self.mix_probability);
        }
    }
}
