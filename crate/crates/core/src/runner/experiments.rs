//! In-memory experiment operations. Every cell is a pure function of
//! (plan, arm, seed); the CLI layer only adds checkpoint and CSV I/O.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentPlan, Method};
use super::stats::SeedSummary;
use crate::adversary::{run_schedule, FrozenAdversary, PhaseLog, ScheduleConfig, ScheduleKind};
use crate::attack::{AttackConfig, AttackHook, AttackKind, AttackMode, AttackSummary};
use crate::env::{EnvConfig, EnvKind};
use crate::ppo::{
    evaluate_policy, ActorCritic, Disturbance, EnvRunner, NoDisturbance, PpoConfig, PpoTrainer, UpdateRecord,
};
use crate::{Error, Result};

/// Derives an independent seed for one named stream of one cell.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn cell_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// One training arm: a method with its disturbance budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Arm {
    pub method: Method,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Arm {
    /// Control arms ignore epsilon and alpha; they are stored as 0.
    pub fn new(method: Method, epsilon: f64, alpha: f64) -> Self {
        if method.uses_epsilon() {
            Self { method, epsilon, alpha: if method.is_adversary() { alpha } else { 0.0 } }
        } else {
            Self { method, epsilon: 0.0, alpha: 0.0 }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.uses_epsilon() && !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("{} needs a positive epsilon", self.method)));
        }
        if !(0.0..=0.5).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        format!("{}-eps{}-alpha{}", self.method, self.epsilon, self.alpha)
    }
}

/// Attack configuration of a gradient method; `None` for other methods.
pub fn gradient_attack(method: Method, kind: EnvKind, epsilon: f64) -> Option<AttackConfig> {
    let (k, mode) = match method {
        Method::Eacn => (AttackKind::CriticGradient, AttackMode::Environment),
        Method::Eaan => (AttackKind::ActorSaliency, AttackMode::Environment),
        Method::Oacn => (AttackKind::CriticGradient, AttackMode::Observation),
        Method::Oaan => (AttackKind::ActorSaliency, AttackMode::Observation),
        _ => return None,
    };
    let mask = (mode == AttackMode::Environment).then(|| kind.feature_mask());
    Some(AttackConfig::new(k, mode, epsilon, mask))
}

pub fn init_protagonist(plan: &ExperimentPlan, rng: &mut ChaCha8Rng) -> Result<PpoTrainer> {
    let kind = plan.kind();
    let ac = ActorCritic::categorical(kind.obs_dim(), kind.num_actions(), &plan.ppo.hidden, rng)?;
    Ok(PpoTrainer::new(ac, plan.ppo.clone()))
}

fn with_context<T>(r: Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{what}: training diverged: {m}")),
        other => other,
    })
}

/// Continues training `trainer` in `env` for `steps` steps.
fn continue_training(
    trainer: &mut PpoTrainer,
    env: EnvConfig,
    steps: u64,
    hook: &mut dyn Disturbance,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<UpdateRecord>> {
    let mut runner = EnvRunner::new(env)?;
    let mut curve = Vec::new();
    trainer.train(&mut runner, steps, hook, rng, |u| curve.push(*u))?;
    Ok(curve)
}

/// Pretrains the shared protagonist of one seed in the base environment.
pub fn pretrain(plan: &ExperimentPlan, seed: u64) -> Result<(PpoTrainer, Vec<UpdateRecord>)> {
    let mut rng = cell_rng(seed, "pretrain");
    let mut trainer = init_protagonist(plan, &mut rng)?;
    let env = plan.base_env(derive_seed(seed, "pretrain-env"));
    let curve = with_context(
        continue_training(&mut trainer, env, plan.schedule.pretrain_steps, &mut NoDisturbance, &mut rng),
        &format!("pretrain seed {seed}"),
    )?;
    Ok((trainer, curve))
}

/// What an arm actually did during training, checked against its contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmPurity {
    pub train_difficulty: f64,
    /// Steps on which the state or observation was disturbed.
    pub disturbed_steps: u64,
    /// An observation-mode attack changed environment state.
    pub state_mutated: bool,
}

impl ArmPurity {
    pub fn check(&self, plan: &ExperimentPlan, method: Method) -> Result<()> {
        let bad = match method {
            Method::Baseline => self.train_difficulty != plan.base_difficulty() || self.disturbed_steps > 0,
            Method::Target => self.train_difficulty != plan.target_difficulty() || self.disturbed_steps > 0,
            Method::Oacn | Method::Oaan => self.state_mutated,
            _ => false,
        };
        if bad {
            return Err(Error::Config(format!("arm purity violated for {method}: {self:?}")));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub trainer: PpoTrainer,
    /// Protagonist updates; empty for adversary schedules, see `schedule`.
    pub curve: Vec<UpdateRecord>,
    pub purity: ArmPurity,
    pub attack: Option<AttackSummary>,
    pub schedule: Vec<PhaseLog>,
}

/// Steps the adversary of an adversary-agent method trains for.
pub fn adversary_steps(plan: &ExperimentPlan) -> u64 {
    plan.schedule.train_steps
}

fn schedule_config(plan: &ExperimentPlan, arm: &Arm, adversary_steps: u64, protagonist_steps: u64) -> ScheduleConfig {
    let kind = match arm.method {
        Method::Rarl => ScheduleKind::RarlSequential,
        Method::Fsp => ScheduleKind::FspSequential,
        _ => ScheduleKind::CoFspAlternating,
    };
    let a = &plan.adversary;
    let mut cfg = ScheduleConfig::new(kind, adversary_steps, protagonist_steps, arm.epsilon);
    cfg.block_size = a.co_fsp_block;
    cfg.coop.alpha = arm.alpha;
    cfg.coop.cooperative_reward_scale = a.cooperative_reward_scale;
    cfg.mix_probability = a.mix_probability;
    cfg.buffer_capacity = a.buffer_capacity;
    cfg.sl_epochs = a.sl_epochs;
    cfg.sl_learning_rate = a.sl_learning_rate;
    cfg.adversary_ppo = PpoConfig { hidden: plan.ppo.hidden.clone(), ..plan.ppo.clone() };
    cfg
}

fn init_adversary(plan: &ExperimentPlan, rng: &mut ChaCha8Rng) -> Result<PpoTrainer> {
    let kind = plan.kind();
    let ac = ActorCritic::gaussian(kind.obs_dim(), kind.feature_mask().count(), &plan.ppo.hidden, -0.5, rng)?;
    Ok(PpoTrainer::new(ac, plan.ppo.clone()))
}

/// Adversarial (or control) training of one seed from its pretrained agent.
pub fn adversarial_training(plan: &ExperimentPlan, arm: &Arm, pretrained: PpoTrainer, seed: u64) -> Result<TrainOutcome> {
    arm.validate()?;
    let mut rng = cell_rng(seed, &format!("train-{}", arm.tag()));
    let env_seed = derive_seed(seed, "train-env");
    let steps = plan.schedule.train_steps;
    let mut trainer = pretrained;
    let what = format!("{} seed {seed}", arm.tag());
    let outcome = match arm.method {
        Method::Baseline | Method::Target => {
            let env = if arm.method == Method::Target { plan.target_env(env_seed) } else { plan.base_env(env_seed) };
            let curve = with_context(continue_training(&mut trainer, env, steps, &mut NoDisturbance, &mut rng), &what)?;
            TrainOutcome {
                trainer,
                curve,
                purity: ArmPurity { train_difficulty: env.difficulty, disturbed_steps: 0, state_mutated: false },
                attack: None,
                schedule: Vec::new(),
            }
        }
        m if m.is_gradient_attack() => {
            let mut cfg = gradient_attack(m, plan.kind(), arm.epsilon).expect("gradient method");
            cfg.attack_probability = plan.attack.attack_probability;
            let mut hook = AttackHook::new(cfg)?;
            let env = plan.base_env(env_seed);
            let curve = with_context(continue_training(&mut trainer, env, steps, &mut hook, &mut rng), &what)?;
            let summary = hook.take_summary();
            TrainOutcome {
                trainer,
                curve,
                purity: ArmPurity {
                    train_difficulty: env.difficulty,
                    disturbed_steps: summary.attacked - summary.degenerate,
                    state_mutated: hook.state_mutated,
                },
                attack: Some(summary),
                schedule: Vec::new(),
            }
        }
        _ => {
            let adversary = init_adversary(plan, &mut rng)?;
            let cfg = schedule_config(plan, arm, adversary_steps(plan), steps);
            let env = plan.base_env(env_seed);
            let out = with_context(run_schedule(&cfg, Some(trainer), adversary, &env, &mut rng), &what)?;
            TrainOutcome {
                trainer: out.protagonist,
                curve: Vec::new(),
                purity: ArmPurity {
                    train_difficulty: env.difficulty,
                    disturbed_steps: out.log.iter().map(|p| p.end_step - p.start_step).sum(),
                    state_mutated: false,
                },
                attack: None,
                schedule: out.log,
            }
        }
    };
    outcome.purity.check(plan, arm.method)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedEval {
    pub seed: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_metric: f64,
}

/// Greedy evaluation of one seed's agent; episodes are shared across methods.
pub fn evaluate_seed(
    ac: &ActorCritic,
    plan: &ExperimentPlan,
    difficulty: f64,
    episodes: usize,
    seed: u64,
    hook: &mut dyn Disturbance,
) -> Result<SeedEval> {
    let env = plan.base_env(derive_seed(seed, "eval")).with_difficulty(difficulty);
    let mut rng = cell_rng(seed, "eval-rng");
    let eps = evaluate_policy(ac, &env, episodes, hook, &mut rng)?;
    let n = eps.len() as f64;
    Ok(SeedEval {
        seed,
        episodes,
        mean_return: eps.iter().map(|e| e.episode_return).sum::<f64>() / n,
        mean_metric: eps.iter().map(|e| e.metric).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMeta {
    pub method: Method,
    pub epsilon: f64,
    pub alpha: f64,
    pub difficulty: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub per_seed: Vec<SeedEval>,
    pub returns: SeedSummary,
    pub metric: SeedSummary,
    pub warning: Option<String>,
}

impl EvalReport {
    pub fn new(meta: EvalMeta, per_seed: Vec<SeedEval>) -> Result<Self> {
        let r: Vec<f64> = per_seed.iter().map(|s| s.mean_return).collect();
        let m: Vec<f64> = per_seed.iter().map(|s| s.mean_metric).collect();
        let returns = SeedSummary::from_values(&r).ok_or_else(|| Error::Input("no seeds to report".into()))?;
        let metric = SeedSummary::from_values(&m).expect("same length");
        let warning = (per_seed.len() < 2).then(|| "fewer than 2 seeds: confidence interval omitted".to_string());
        Ok(Self { meta, per_seed, returns, metric, warning })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.per_seed.iter().map(|s| s.seed).collect()
    }
}

/// Evaluates one agent per seed at `difficulty` without disturbance.
pub fn run_eval(plan: &ExperimentPlan, arm: &Arm, agents: &[(u64, &ActorCritic)], difficulty: f64) -> Result<EvalReport> {
    let per_seed = agents
        .iter()
        .map(|(seed, ac)| evaluate_seed(ac, plan, difficulty, plan.schedule.eval_episodes, *seed, &mut NoDisturbance))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(
        EvalMeta {
            method: arm.method,
            epsilon: arm.epsilon,
            alpha: arm.alpha,
            difficulty,
            config_hash: plan.config_hash(),
        },
        per_seed,
    )
}

/// Largest mean wins; ties go to the smaller epsilon.
pub fn best_epsilon(rows: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(eps, mean) in rows {
        best = match best {
            Some((be, bm)) if mean < bm || (mean == bm && eps >= be) => Some((be, bm)),
            _ => Some((eps, mean)),
        };
    }
    best.map(|(e, _)| e)
}

pub struct GridResult {
    /// One report per epsilon at the target difficulty.
    pub reports: Vec<EvalReport>,
    pub best: f64,
}

/// Trains and evaluates `method` for every epsilon of the plan's grid.
pub fn epsilon_grid_search(plan: &ExperimentPlan, method: Method, pretrained: &[(u64, PpoTrainer)]) -> Result<GridResult> {
    if plan.attack.epsilon_grid.is_empty() {
        return Err(Error::Config("epsilon grid is empty".into()));
    }
    let mut reports = Vec::new();
    for &eps in &plan.attack.epsilon_grid {
        let arm = Arm::new(method, eps, plan.adversary.alpha);
        let trained = pretrained
            .iter()
            .map(|(seed, t)| Ok((*seed, adversarial_training(plan, &arm, t.clone(), *seed)?.trainer)))
            .collect::<Result<Vec<_>>>()?;
        let agents: Vec<(u64, &ActorCritic)> = trained.iter().map(|(s, t)| (*s, &t.ac)).collect();
        reports.push(run_eval(plan, &arm, &agents, plan.target_difficulty())?);
    }
    let rows: Vec<(f64, f64)> = reports.iter().map(|r| (r.meta.epsilon, r.metric.mean)).collect();
    let best = best_epsilon(&rows).expect("non-empty grid");
    Ok(GridResult { reports, best })
}

/// Method by difficulty matrix of evaluation reports.
pub fn robustness_sweep(plan: &ExperimentPlan, arms: &[(Arm, Vec<(u64, &ActorCritic)>)]) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for (arm, agents) in arms {
        for d in plan.difficulty_grid() {
            out.push(run_eval(plan, arm, agents, d)?);
        }
    }
    Ok(out)
}

/// One row of the attack-efficiency experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackEvalRow {
    pub report: EvalReport,
    /// Observation-mode rows never changed environment state.
    pub state_untouched: bool,
}

/// Adversary trained against a frozen protagonist, for attack evaluation.
pub fn train_adversary_against(plan: &ExperimentPlan, arm: &Arm, protagonist: &PpoTrainer, seed: u64) -> Result<crate::adversary::ScheduleOutcome> {
    arm.validate()?;
    let mut rng = cell_rng(seed, &format!("attack-adversary-{}", arm.tag()));
    let adversary = init_adversary(plan, &mut rng)?;
    let cfg = schedule_config(plan, arm, adversary_steps(plan), 0);
    let env = plan.base_env(derive_seed(seed, "attack-adversary-env"));
    run_schedule(&cfg, Some(protagonist.clone()), adversary, &env, &mut rng)
}

/// Evaluates frozen agents under one attack at the base difficulty.
/// `epsilon == 0` evaluates without any attack.
pub fn attacked_eval(plan: &ExperimentPlan, method: Method, epsilon: f64, agents: &[(u64, &PpoTrainer)]) -> Result<AttackEvalRow> {
    let difficulty = plan.base_difficulty();
    let episodes = plan.schedule.eval_episodes;
    let mut untouched = true;
    let mut per_seed = Vec::new();
    for (seed, trainer) in agents {
        let ac = &trainer.ac;
        let ev = if epsilon == 0.0 || !method.uses_epsilon() {
            evaluate_seed(ac, plan, difficulty, episodes, *seed, &mut NoDisturbance)?
        } else if let Some(mut cfg) = gradient_attack(method, plan.kind(), epsilon) {
            cfg.attack_probability = plan.attack.attack_probability;
            let mut hook = AttackHook::new(cfg)?;
            let ev = evaluate_seed(ac, plan, difficulty, episodes, *seed, &mut hook)?;
            untouched &= !hook.state_mutated;
            ev
        } else {
            let arm = Arm::new(method, epsilon, plan.adversary.alpha);
            let adv = train_adversary_against(plan, &arm, trainer, *seed)?;
            let mut hook = FrozenAdversary::new(&adv.adversary.ac, adv.average_strategy.as_ref(), plan.kind().feature_mask(), epsilon);
            hook.mix_probability = plan.adversary.mix_probability;
            evaluate_seed(ac, plan, difficulty, episodes, *seed, &mut hook)?
        };
        per_seed.push(ev);
    }
    let report = EvalReport::new(
        EvalMeta {
            method,
            epsilon,
            alpha: if method.is_adversary() { plan.adversary.alpha } else { 0.0 },
            difficulty,
            config_hash: plan.config_hash(),
        },
        per_seed,
    )?;
    Ok(AttackEvalRow { report, state_untouched: untouched })
}
