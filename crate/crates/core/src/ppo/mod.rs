//! Clipped-surrogate PPO with GAE, value regression and an entropy bonus.

mod gae;
mod optim;
mod policy;
mod rollout;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, ByteReader, Gradient};
use crate::{Error, Result};

pub use gae::{compute_gae, normalize};
pub use optim::Adam;
pub use policy::{
    gaussian_entropy, gaussian_log_prob, sample_categorical, ActOutput, Action, ActorCritic, PolicyKind,
    DEFAULT_HIDDEN,
};
pub use rollout::{
    episode_seed, evaluate_policy, Disturbance, EnvRunner, EpisodeMetrics, NoDisturbance, UpdateRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub rollout_length: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 64,
            rollout_length: 2048,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if self.clip_ratio <= 0.0 {
            return Err(Error::Config("clip_ratio must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.minibatch_size == 0 || self.rollout_length == 0 {
            return Err(Error::Config("learning rate, epochs, minibatch and rollout sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Transitions collected under one policy, in time order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic value after the last transition (ignored if it ended an episode).
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, act: ActOutput, reward: f64, done: bool) {
        self.observations.push(obs);
        self.actions.push(act.action);
        self.log_probs.push(act.log_prob);
        self.values.push(act.value);
        self.rewards.push(reward);
        self.dones.push(done);
    }
}

/// Flattened training batch with advantages already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    /// Runs GAE and normalizes the advantages over the whole batch.
    pub fn from_trajectory(traj: &Trajectory, hp: &PpoConfig) -> Self {
        let (mut advantages, returns) = compute_gae(traj, hp.gamma, hp.gae_lambda);
        normalize(&mut advantages);
        Self {
            observations: traj.observations.clone(),
            actions: traj.actions.clone(),
            old_log_probs: traj.log_probs.clone(),
            advantages,
            returns,
        }
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticGradient {
    pub actor: Gradient,
    pub critic: Gradient,
    pub log_std: Vec<f64>,
}

impl ActorCriticGradient {
    pub fn zeros_like(ac: &ActorCritic) -> Self {
        Self {
            actor: Gradient::zeros_like(&ac.actor),
            critic: Gradient::zeros_like(&ac.critic),
            log_std: vec![0.0; ac.log_std.len()],
        }
    }

    fn norm(&self) -> f64 {
        (self.actor.sq_norm() + self.critic.sq_norm() + self.log_std.iter().map(|g| g * g).sum::<f64>()).sqrt()
    }

    fn scale(&mut self, s: f64) {
        self.actor.scale(s);
        self.critic.scale(s);
        self.log_std.iter_mut().for_each(|g| *g *= s);
    }
}

/// Mean loss terms over a minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossTerms {
    pub fn total(&self, hp: &PpoConfig) -> f64 {
        self.policy_loss + hp.value_coef * self.value_loss - hp.entropy_coef * self.entropy
    }

    fn is_finite(&self) -> bool {
        [self.policy_loss, self.value_loss, self.entropy, self.approx_kl].iter().all(|v| v.is_finite())
    }
}

/// Loss terms and exact gradients of
/// `policy_loss + value_coef * value_loss - entropy_coef * entropy`
/// over the samples `idx` of `batch`.
pub fn loss_and_gradient(
    ac: &ActorCritic,
    batch: &Batch,
    idx: &[usize],
    hp: &PpoConfig,
) -> Result<(LossTerms, ActorCriticGradient)> {
    let mut grad = ActorCriticGradient::zeros_like(ac);
    let mut terms = LossTerms::default();
    let n = idx.len() as f64;
    let (lo, hi) = (1.0 - hp.clip_ratio, 1.0 + hp.clip_ratio);
    for &i in idx {
        let x = &batch.observations[i];
        let adv = batch.advantages[i];
        let cache = ac.actor.forward_cached(x)?;
        let out = cache.output();

        // d(log_prob)/d(out), entropy and d(entropy)/d(out)
        let (log_prob, dlogp_dout, entropy, dent_dout, dlogp_dlogstd) = match (ac.kind, &batch.actions[i]) {
            (PolicyKind::Categorical, Action::Discrete(a)) => {
                let logp_all = nn::log_softmax(out);
                let probs: Vec<f64> = logp_all.iter().map(|l| l.exp()).collect();
                let ent: f64 = -probs.iter().zip(&logp_all).map(|(p, l)| p * l).sum::<f64>();
                let dlogp = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == *a { 1.0 - p } else { -p })
                    .collect::<Vec<_>>();
                let dent = probs.iter().zip(&logp_all).map(|(p, l)| -p * (l + ent)).collect::<Vec<_>>();
                (logp_all[*a], dlogp, ent, dent, Vec::new())
            }
            (PolicyKind::Gaussian, Action::Continuous { raw, .. }) => {
                let lp = gaussian_log_prob(out, &ac.log_std, raw);
                let mut dmu = Vec::with_capacity(raw.len());
                let mut dls = Vec::with_capacity(raw.len());
                for ((mu, ls), z) in out.iter().zip(&ac.log_std).zip(raw) {
                    let var = (2.0 * ls).exp();
                    dmu.push((z - mu) / var);
                    dls.push((z - mu) * (z - mu) / var - 1.0);
                }
                let ent = gaussian_entropy(&ac.log_std);
                (lp, dmu, ent, vec![0.0; out.len()], dls)
            }
            _ => return Err(Error::Input("action does not match the policy kind".into())),
        };

        let log_ratio = log_prob - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        terms.policy_loss -= unclipped.min(clipped) / n;
        terms.entropy += entropy / n;
        terms.approx_kl += (ratio - 1.0 - log_ratio) / n;
        let clip_active = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
        if clip_active {
            terms.clip_fraction += 1.0 / n;
        }
        // d(policy_loss)/d(log_prob) for this sample
        let dl_dlogp = if clip_active { 0.0 } else { -adv * ratio / n };
        let upstream: Vec<f64> = dlogp_dout
            .iter()
            .zip(&dent_dout)
            .map(|(dl, de)| dl_dlogp * dl - hp.entropy_coef * de / n)
            .collect();
        ac.actor.backward(&cache, &upstream, Some(&mut grad.actor))?;
        for (g, dls) in grad.log_std.iter_mut().zip(&dlogp_dlogstd) {
            // entropy derivative w.r.t. each log-std is 1
            *g += dl_dlogp * dls - hp.entropy_coef / n;
        }

        let vcache = ac.critic.forward_cached(x)?;
        let v = vcache.output()[0];
        let err = v - batch.returns[i];
        terms.value_loss += err * err / n;
        ac.critic.backward(&vcache, &[hp.value_coef * 2.0 * err / n], Some(&mut grad.critic))?;
    }
    if !terms.is_finite() {
        return Err(Error::Numeric(format!("non-finite PPO loss: {terms:?}")));
    }
    Ok((terms, grad))
}

/// Owns a policy and its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoTrainer {
    pub ac: ActorCritic,
    pub hp: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    log_std_opt: Adam,
}

impl PpoTrainer {
    pub fn new(ac: ActorCritic, hp: PpoConfig) -> Self {
        let lr = hp.learning_rate;
        Self {
            actor_opt: Adam::new(ac.actor.num_params(), lr),
            critic_opt: Adam::new(ac.critic.num_params(), lr),
            log_std_opt: Adam::new(ac.log_std.len(), lr),
            ac,
            hp,
        }
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.actor_opt.steps_taken()
    }

    /// GAE + `epochs` passes of shuffled minibatch updates.
    pub fn update<R: Rng + ?Sized>(&mut self, traj: &Trajectory, rng: &mut R) -> Result<LossTerms> {
        if traj.is_empty() {
            return Err(Error::Input("empty trajectory".into()));
        }
        let batch = Batch::from_trajectory(traj, &self.hp);
        self.update_batch(&batch, rng)
    }

    /// Returns loss terms averaged over every minibatch.
    pub fn update_batch<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<LossTerms> {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut mean = LossTerms::default();
        let mut count = 0.0;
        for _ in 0..self.hp.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.hp.minibatch_size) {
                let (terms, mut grad) = loss_and_gradient(&self.ac, batch, chunk, &self.hp)?;
                let norm = grad.norm();
                if self.hp.max_grad_norm > 0.0 && norm > self.hp.max_grad_norm {
                    grad.scale(self.hp.max_grad_norm / norm);
                }
                self.actor_opt.step(self.ac.actor.params_flat_mut(), grad.actor.flat().iter());
                self.critic_opt.step(self.ac.critic.params_flat_mut(), grad.critic.flat().iter());
                self.log_std_opt.step(self.ac.log_std.iter_mut(), grad.log_std.iter());
                if !self.ac.actor.is_finite() || !self.ac.critic.is_finite() {
                    return Err(Error::Numeric(format!("parameters diverged after update; last loss {terms:?}")));
                }
                mean.policy_loss += terms.policy_loss;
                mean.value_loss += terms.value_loss;
                mean.entropy += terms.entropy;
                mean.approx_kl += terms.approx_kl;
                mean.clip_fraction += terms.clip_fraction;
                count += 1.0;
            }
        }
        mean.policy_loss /= count;
        mean.value_loss /= count;
        mean.entropy /= count;
        mean.approx_kl /= count;
        mean.clip_fraction /= count;
        Ok(mean)
    }

    const MAGIC: &'static [u8; 4] = b"PPO\0";
    const VERSION: u32 = 1;

    /// Policy plus optimizer moments. Hyperparameters travel in the run config.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend(self.ac.to_bytes());
        self.actor_opt.write_bytes(&mut out);
        self.critic_opt.write_bytes(&mut out);
        self.log_std_opt.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8], hp: PpoConfig) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad trainer magic".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported trainer version {version}")));
        }
        let (ac, used) = ActorCritic::from_bytes(r.rest())?;
        r.take(used)?;
        let actor_opt = Adam::read_bytes(&mut r)?;
        let critic_opt = Adam::read_bytes(&mut r)?;
        let log_std_opt = Adam::read_bytes(&mut r)?;
        if !r.rest().is_empty() {
            return Err(Error::Checkpoint("trailing bytes in trainer checkpoint".into()));
        }
        Ok(Self { ac, hp, actor_opt, critic_opt, log_std_opt })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, ac: &ActorCritic, n: usize) -> Trajectory {
        let mut traj = Trajectory::default();
        for t in 0..n {
            let x: Vec<f64> = (0..ac.obs_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let act = ac.act(&x, rng).unwrap();
            traj.push(x, act, rng.gen_range(-1.0..1.0), t % 7 == 6);
        }
        traj.bootstrap_value = 0.3;
        traj
    }

    #[test]
    fn lambda_zero_gives_td_errors() {
        let traj = Trajectory {
            rewards: vec![1.0, 0.5, -0.2],
            values: vec![0.1, 0.4, 0.3],
            dones: vec![false, true, false],
            bootstrap_value: 0.7,
            ..Default::default()
        };
        let g = 0.9;
        let (adv, ret) = compute_gae(&traj, g, 0.0);
        assert_eq!(adv[0], 1.0 + g * 0.4 - 0.1);
        assert_eq!(adv[1], 0.5 - 0.4);
        assert_eq!(adv[2], -0.2 + g * 0.7 - 0.3);
        assert_eq!(ret[0], adv[0] + 0.1);
    }

    #[test]
    fn zero_rewards_and_values_give_zero_advantages() {
        let traj = Trajectory {
            rewards: vec![0.0; 10],
            values: vec![0.0; 10],
            dones: vec![false; 10],
            ..Default::default()
        };
        let (adv, _) = compute_gae(&traj, 0.99, 0.95);
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn zero_advantage_leaves_actor_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ac = ActorCritic::categorical(4, 3, &[8], &mut rng).unwrap();
        let traj = random_traj(&mut rng, &ac, 32);
        let batch = Batch {
            observations: traj.observations.clone(),
            actions: traj.actions.clone(),
            old_log_probs: traj.log_probs.clone(),
            advantages: vec![0.0; 32],
            returns: vec![1.0; 32],
        };
        let hp = PpoConfig { entropy_coef: 0.0, minibatch_size: 8, ..PpoConfig::default() };
        let mut trainer = PpoTrainer::new(ac.clone(), hp);
        trainer.update_batch(&batch, &mut rng).unwrap();
        assert_eq!(trainer.ac.actor, ac.actor);
        assert_ne!(trainer.ac.critic, ac.critic);

        // with an entropy bonus the actor does move
        let hp = PpoConfig { entropy_coef: 0.01, minibatch_size: 8, ..PpoConfig::default() };
        let mut trainer = PpoTrainer::new(ac.clone(), hp);
        trainer.update_batch(&batch, &mut rng).unwrap();
        assert_ne!(trainer.ac.actor, ac.actor);
    }

    #[test]
    fn ratio_one_clipped_equals_unclipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ac = ActorCritic::categorical(4, 3, &[8], &mut rng).unwrap();
        let traj = random_traj(&mut rng, &ac, 20);
        let batch = Batch::from_trajectory(&traj, &PpoConfig::default());
        let idx: Vec<usize> = (0..20).collect();
        let (terms, _) = loss_and_gradient(&ac, &batch, &idx, &PpoConfig::default()).unwrap();
        let unclipped: f64 = -batch.advantages.iter().sum::<f64>() / 20.0;
        assert!((terms.policy_loss - unclipped).abs() < 1e-12);
        assert_eq!(terms.clip_fraction, 0.0);
        assert!(terms.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ac = ActorCritic::categorical(4, 3, &[8], &mut rng).unwrap();
        let traj = random_traj(&mut rng, &ac, 16);
        let mut trainer = PpoTrainer::new(ac, PpoConfig { minibatch_size: 4, ..PpoConfig::default() });
        trainer.update(&traj, &mut rng).unwrap();
        let bytes = trainer.to_bytes();
        let back = PpoTrainer::from_bytes(&bytes, trainer.hp.clone()).unwrap();
        assert_eq!(back, trainer);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(PpoConfig { gamma: 1.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { clip_ratio: 0.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig::default().validate().is_ok());
    }
}
