use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{self, ByteReader, FeedForwardNet, OutputHead};
use crate::{Error, Result};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps the tanh log-det correction finite at saturation.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Softmax over discrete actions.
    Categorical,
    /// Diagonal Gaussian with learned log-std, squashed by `tanh`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    /// `raw` is the pre-squash Gaussian sample, `squashed = tanh(raw)`.
    Continuous { raw: Vec<f64>, squashed: Vec<f64> },
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous { .. } => None,
        }
    }

    pub fn squashed(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous { squashed, .. } => Some(squashed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: FeedForwardNet,
    pub critic: FeedForwardNet,
    pub kind: PolicyKind,
    /// Per-dimension log standard deviation; empty for categorical policies.
    pub log_std: Vec<f64>,
}

/// Hidden sizes used when none are configured.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl ActorCritic {
    pub fn categorical<R: Rng + ?Sized>(
        obs_dim: usize,
        num_actions: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if num_actions < 2 {
            return Err(Error::Config("a categorical policy needs at least 2 actions".into()));
        }
        let actor = FeedForwardNet::new(&sizes(obs_dim, hidden, num_actions), OutputHead::Logits, 0.01, rng)?;
        let critic = FeedForwardNet::new(&sizes(obs_dim, hidden, 1), OutputHead::Value, 1.0, rng)?;
        Ok(Self {
            actor,
            critic,
            kind: PolicyKind::Categorical,
            log_std: Vec::new(),
        })
    }

    pub fn gaussian<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        initial_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let actor = FeedForwardNet::new(&sizes(obs_dim, hidden, action_dim), OutputHead::GaussianMean, 0.01, rng)?;
        let critic = FeedForwardNet::new(&sizes(obs_dim, hidden, 1), OutputHead::Value, 1.0, rng)?;
        Ok(Self {
            actor,
            critic,
            kind: PolicyKind::Gaussian,
            log_std: vec![initial_log_std; action_dim],
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let v = self.critic.forward(x)?[0];
        finite(v, "critic output")
    }

    /// Samples an action from the current policy.
    pub fn act<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<ActOutput> {
        let out = self.actor.forward(x)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite actor output".into()));
        }
        let value = self.value(x)?;
        let (action, log_prob) = match self.kind {
            PolicyKind::Categorical => {
                let probs = nn::softmax(&out);
                let a = sample_categorical(&probs, rng);
                (Action::Discrete(a), nn::log_softmax(&out)[a])
            }
            PolicyKind::Gaussian => {
                let raw: Vec<f64> = out
                    .iter()
                    .zip(&self.log_std)
                    .map(|(mu, ls)| mu + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lp = gaussian_log_prob(&out, &self.log_std, &raw);
                let squashed = raw.iter().map(|z| z.tanh()).collect();
                (Action::Continuous { raw, squashed }, lp)
            }
        };
        Ok(ActOutput {
            action,
            log_prob: finite(log_prob, "log-prob")?,
            value,
        })
    }

    /// Deterministic action: argmax of the logits or `tanh(mean)`.
    pub fn act_greedy(&self, x: &[f64]) -> Result<Action> {
        let out = self.actor.forward(x)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite actor output".into()));
        }
        Ok(match self.kind {
            PolicyKind::Categorical => Action::Discrete(nn::argmax(&out)),
            PolicyKind::Gaussian => Action::Continuous {
                squashed: out.iter().map(|z| z.tanh()).collect(),
                raw: out,
            },
        })
    }

    /// Log-density of `action` under the policy at `x`.
    pub fn log_prob(&self, x: &[f64], action: &Action) -> Result<f64> {
        let out = self.actor.forward(x)?;
        match (self.kind, action) {
            (PolicyKind::Categorical, Action::Discrete(a)) => Ok(nn::log_softmax(&out)[*a]),
            (PolicyKind::Gaussian, Action::Continuous { raw, .. }) => {
                Ok(gaussian_log_prob(&out, &self.log_std, raw))
            }
            _ => Err(Error::Input("action does not match the policy kind".into())),
        }
    }

    const MAGIC: &'static [u8; 4] = b"ACP\0";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(match self.kind {
            PolicyKind::Categorical => 0,
            PolicyKind::Gaussian => 1,
        });
        out.extend_from_slice(&(self.log_std.len() as u32).to_le_bytes());
        for s in &self.log_std {
            out.extend_from_slice(&s.to_bits().to_le_bytes());
        }
        out.extend(self.actor.to_bytes());
        out.extend(self.critic.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad actor-critic magic".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported actor-critic version {version}")));
        }
        let kind = match r.u8()? {
            0 => PolicyKind::Categorical,
            1 => PolicyKind::Gaussian,
            t => return Err(Error::Checkpoint(format!("unknown policy kind {t}"))),
        };
        let n = r.u32()? as usize;
        let log_std = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let (actor, used) = FeedForwardNet::from_bytes(r.rest())?;
        r.take(used)?;
        let (critic, used) = FeedForwardNet::from_bytes(r.rest())?;
        r.take(used)?;
        Ok((Self { actor, critic, kind, log_std }, r.pos))
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Density of `tanh(raw)` where `raw ~ N(mean, exp(log_std)^2)`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], raw: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(raw)
        .map(|((mu, ls), z)| {
            let s = ls.exp();
            let u = (z - mu) / s;
            let t = z.tanh();
            -0.5 * u * u - ls - LOG_SQRT_2PI - (1.0 - t * t + SQUASH_EPS).ln()
        })
        .sum()
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + LOG_SQRT_2PI).sum()
}
