//! Experiment plan, read from a TOML file with every section optional.
//!
//! ```toml
//! [env]
//! kind = "flappy"          # or "highway"
//! base_difficulty = 150.0  # gap size (flappy) / traffic density (highway)
//! target_difficulty = 100.0
//! time_limit = 1000
//! difficulty_grid = [150.0, 137.5, 125.0, 112.5, 100.0]
//!
//! [schedule]
//! pretrain_steps = 75000   # full scale: 1_000_000
//! train_steps = 150000     # full scale: 2_000_000
//! seeds = [0, 1, 2, 3, 4]
//! eval_episodes = 200
//!
//! [attack]
//! epsilon = 0.05
//! epsilon_grid = [0.01, 0.02, 0.05, 0.1, 0.2]
//! attack_probability = 1.0
//!
//! [adversary]
//! alpha = 0.0
//! alpha_grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
//! co_fsp_block = 750       # full scale: 10_000
//!
//! [sweep]
//! methods = ["baseline", "target", "eacn", "eaan", "oacn", "oaan"]
//!
//! [ppo]
//! learning_rate = 3e-4
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, EnvKind};
use crate::ppo::PpoConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    Target,
    Eacn,
    Eaan,
    Oacn,
    Oaan,
    Rarl,
    Fsp,
    CoFsp,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Baseline,
        Method::Target,
        Method::Eacn,
        Method::Eaan,
        Method::Oacn,
        Method::Oaan,
        Method::Rarl,
        Method::Fsp,
        Method::CoFsp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Target => "target",
            Method::Eacn => "eacn",
            Method::Eaan => "eaan",
            Method::Oacn => "oacn",
            Method::Oaan => "oaan",
            Method::Rarl => "rarl",
            Method::Fsp => "fsp",
            Method::CoFsp => "co-fsp",
        }
    }

    /// Gradient attack methods.
    pub fn is_gradient_attack(self) -> bool {
        matches!(self, Method::Eacn | Method::Eaan | Method::Oacn | Method::Oaan)
    }

    /// Adversary-agent methods.
    pub fn is_adversary(self) -> bool {
        matches!(self, Method::Rarl | Method::Fsp | Method::CoFsp)
    }

    /// Whether epsilon is meaningful for this method.
    pub fn uses_epsilon(self) -> bool {
        self.is_gradient_attack() || self.is_adversary()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Desk-scale budgets from the config file.
    Desk,
    /// Full-scale budgets: 1M pretraining and 2M training steps.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::Config(format!("unknown profile '{s}'"))),
        }
    }
}

pub const FULL_PRETRAIN_STEPS: u64 = 1_000_000;
pub const FULL_TRAIN_STEPS: u64 = 2_000_000;
pub const FULL_CO_FSP_BLOCK: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub base_difficulty: Option<f64>,
    pub target_difficulty: Option<f64>,
    pub time_limit: Option<usize>,
    pub difficulty_grid: Option<Vec<f64>>,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::Flappy,
            base_difficulty: None,
            target_difficulty: None,
            time_limit: None,
            difficulty_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub pretrain_steps: u64,
    pub train_steps: u64,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            pretrain_steps: 75_000,
            train_steps: 150_000,
            seeds: vec![0, 1, 2, 3, 4],
            eval_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Budget used by `train` when no `--epsilon` is given.
    pub epsilon: f64,
    pub epsilon_grid: Vec<f64>,
    pub attack_probability: f64,
    /// Rows of the attack-efficiency experiment.
    pub attack_eval_methods: Vec<Method>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            epsilon_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            attack_probability: 1.0,
            attack_eval_methods: vec![Method::Eacn, Method::Eaan, Method::Oacn, Method::Oaan],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub cooperative_reward_scale: f64,
    pub mix_probability: f64,
    pub buffer_capacity: usize,
    /// CO-FSP alternation block in environment steps.
    pub co_fsp_block: u64,
    pub sl_epochs: usize,
    pub sl_learning_rate: f64,
}

impl Default for AdversarySection {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            alpha_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            cooperative_reward_scale: 1.0,
            mix_probability: 0.5,
            buffer_capacity: 50_000,
            // 10k steps per 2M at full scale, same ratio over 150k
            co_fsp_block: 750,
            sl_epochs: 2,
            sl_learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Arms evaluated over the difficulty grid. Gradient methods use
    /// `attack.epsilon`, adversary methods also `adversary.alpha`.
    pub methods: Vec<Method>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Baseline, Method::Target, Method::Eacn, Method::Eaan, Method::Oacn, Method::Oaan],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub env: EnvSection,
    pub schedule: ScheduleSection,
    pub attack: AttackSection,
    pub adversary: AdversarySection,
    pub sweep: SweepSection,
    pub ppo: PpoConfig,
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    /// Default plan for one environment.
    pub fn for_env(kind: EnvKind) -> Self {
        Self {
            env: EnvSection { kind, ..EnvSection::default() },
            ..Self::default()
        }
    }

    pub fn apply_profile(&mut self, profile: Profile) {
        if profile == Profile::Full {
            self.schedule.pretrain_steps = FULL_PRETRAIN_STEPS;
            self.schedule.train_steps = FULL_TRAIN_STEPS;
            self.adversary.co_fsp_block = FULL_CO_FSP_BLOCK;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.schedule.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.attack.epsilon_grid.is_empty() {
            return Err(Error::Config("epsilon_grid must not be empty".into()));
        }
        if self.attack.epsilon_grid.iter().chain([&self.attack.epsilon]).any(|e| !(*e > 0.0)) {
            return Err(Error::Config("epsilons must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attack.attack_probability) {
            return Err(Error::Config("attack_probability must lie in [0, 1]".into()));
        }
        if self.adversary.alpha_grid.iter().chain([&self.adversary.alpha]).any(|a| !(0.0..=0.5).contains(a)) {
            return Err(Error::Config("alpha must lie in [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.adversary.mix_probability) {
            return Err(Error::Config("mix_probability must lie in [0, 1]".into()));
        }
        self.ppo.validate()?;
        self.base_env(0).validate()?;
        self.target_env(0).validate()?;
        for d in self.difficulty_grid() {
            self.base_env(0).with_difficulty(d).validate()?;
        }
        Ok(())
    }

    pub fn kind(&self) -> EnvKind {
        self.env.kind
    }

    pub fn base_difficulty(&self) -> f64 {
        self.env.base_difficulty.unwrap_or(self.env.kind.base_difficulty())
    }

    pub fn target_difficulty(&self) -> f64 {
        self.env.target_difficulty.unwrap_or(self.env.kind.target_difficulty())
    }

    /// Five evenly spaced points from base to target unless configured.
    pub fn difficulty_grid(&self) -> Vec<f64> {
        self.env.difficulty_grid.clone().unwrap_or_else(|| {
            let (a, b) = (self.base_difficulty(), self.target_difficulty());
            (0..5).map(|i| a + (b - a) * i as f64 / 4.0).collect()
        })
    }

    pub fn base_env(&self, seed: u64) -> EnvConfig {
        EnvConfig {
            kind: self.env.kind,
            difficulty: self.base_difficulty(),
            time_limit: self.env.time_limit.unwrap_or(self.env.kind.default_time_limit()),
            seed,
        }
    }

    pub fn target_env(&self, seed: u64) -> EnvConfig {
        self.base_env(seed).with_difficulty(self.target_difficulty())
    }

    /// Short SHA-256 of the resolved plan.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}
