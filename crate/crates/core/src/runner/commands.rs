//! File-backed commands behind the CLI.
//!
//! Layout under `--out`:
//! `checkpoints/<arm>-<key>-seed<S>.ckpt` and `results/<run-id>/...`.
//! Checkpoint keys hash only the settings that shaped the weights, so an
//! edited evaluation setting reuses trained agents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{AdversarySection, EnvSection, ExperimentPlan, Method};
use super::experiments::{self as ex, Arm, EvalReport};
use super::output::{Manifest, RunDir};
use crate::ppo::{ActorCritic, PpoConfig, PpoTrainer};
use crate::{Error, Result};

#[derive(Serialize)]
struct PretrainKey<'a> {
    env: &'a EnvSection,
    ppo: &'a PpoConfig,
    pretrain_steps: u64,
}

#[derive(Serialize)]
struct TrainKey<'a> {
    pretrain: String,
    train_steps: u64,
    attack_probability: f64,
    adversary: &'a AdversarySection,
}

fn short_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))[..12].to_string()
}

fn key_of<T: Serialize>(v: &T) -> String {
    short_hash(&toml::to_string(v).expect("key serializes"))
}

pub struct Context {
    pub plan: ExperimentPlan,
    pub out: PathBuf,
}

impl Context {
    pub fn new(plan: ExperimentPlan, out: impl Into<PathBuf>) -> Result<Self> {
        plan.validate()?;
        Ok(Self { plan, out: out.into() })
    }

    fn seeds(&self) -> &[u64] {
        &self.plan.schedule.seeds
    }

    /// `<command>-<hash of plan and arguments>`.
    pub fn run_id(&self, command: &str, args: &str) -> String {
        let id = short_hash(&format!("{}\n{command} {args}", self.plan.to_toml()));
        format!("{command}-{id}")
    }

    fn pretrain_key(&self) -> String {
        let p = &self.plan;
        key_of(&PretrainKey { env: &p.env, ppo: &p.ppo, pretrain_steps: p.schedule.pretrain_steps })
    }

    fn train_key(&self) -> String {
        let p = &self.plan;
        key_of(&TrainKey {
            pretrain: self.pretrain_key(),
            train_steps: p.schedule.train_steps,
            attack_probability: p.attack.attack_probability,
            adversary: &p.adversary,
        })
    }

    pub fn pretrain_path(&self, seed: u64) -> PathBuf {
        self.out.join("checkpoints").join(format!("pretrain-{}-seed{seed}.ckpt", self.pretrain_key()))
    }

    pub fn arm_path(&self, arm: &Arm, seed: u64) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}-{}-seed{seed}.ckpt", arm.tag(), self.train_key()))
    }

    fn save(&self, path: &Path, t: &PpoTrainer) -> Result<()> {
        fs::create_dir_all(path.parent().expect("checkpoint has a parent"))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, t.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn load(&self, path: &Path, missing: &str) -> Result<PpoTrainer> {
        if !path.exists() {
            return Err(Error::Config(format!("{missing}: {} not found", path.display())));
        }
        PpoTrainer::from_bytes(&fs::read(path)?, self.plan.ppo.clone())
    }

    pub fn load_pretrained(&self, seed: u64) -> Result<PpoTrainer> {
        self.load(&self.pretrain_path(seed), "run `pretrain` first")
    }

    /// Loads a trained arm, training it first if its checkpoint is missing.
    pub fn ensure_trained(&self, arm: &Arm, seed: u64) -> Result<PpoTrainer> {
        let path = self.arm_path(arm, seed);
        if path.exists() {
            return self.load(&path, "");
        }
        let out = ex::adversarial_training(&self.plan, arm, self.load_pretrained(seed)?, seed)?;
        self.save(&path, &out.trainer)?;
        Ok(out.trainer)
    }

    fn finish(&self, run: &RunDir, run_id: &str, command: String) -> Result<PathBuf> {
        let mut files: Vec<String> = fs::read_dir(&run.path)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        files.sort();
        run.write_manifest(&Manifest {
            run_id: run_id.to_string(),
            command,
            config_hash: self.plan.config_hash(),
            seeds: self.seeds().to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            files,
            plan: self.plan.clone(),
        })?;
        Ok(run.path.clone())
    }
}

fn pretrain_arm() -> Arm {
    Arm::new(Method::Baseline, 0.0, 0.0)
}

/// Pretrains one protagonist per seed.
pub fn pretrain(ctx: &Context) -> Result<PathBuf> {
    let id = ctx.run_id("pretrain", "");
    let run = RunDir::create(&ctx.out, &id)?;
    for &seed in ctx.seeds() {
        let (t, curve) = ex::pretrain(&ctx.plan, seed)?;
        ctx.save(&ctx.pretrain_path(seed), &t)?;
        run.append_curve(&pretrain_arm(), "pretrain", seed, &curve)?;
    }
    ctx.finish(&run, &id, "pretrain".into())
}

/// Trains `arm` from every seed's pretrained protagonist.
pub fn train(ctx: &Context, arm: &Arm) -> Result<PathBuf> {
    arm.validate()?;
    let args = arm.tag();
    let id = ctx.run_id("train", &args);
    // fail before creating anything when pretraining is missing
    let pretrained = ctx.seeds().iter().map(|&s| ctx.load_pretrained(s)).collect::<Result<Vec<_>>>()?;
    let run = RunDir::create(&ctx.out, &id)?;
    for (&seed, p) in ctx.seeds().iter().zip(pretrained) {
        let out = ex::adversarial_training(&ctx.plan, arm, p, seed)?;
        ctx.save(&ctx.arm_path(arm, seed), &out.trainer)?;
        run.append_curve(arm, "train", seed, &out.curve)?;
        run.append_train(arm, seed, &out.purity, out.attack.as_ref(), &ctx.plan.config_hash())?;
        if !out.schedule.is_empty() {
            run.append_schedule(arm, seed, &out.schedule)?;
        }
    }
    ctx.finish(&run, &id, format!("train {args}"))
}

fn agents_for(ctx: &Context, arm: &Arm) -> Result<Vec<(u64, PpoTrainer)>> {
    ctx.seeds().iter().map(|&s| Ok((s, ctx.ensure_trained(arm, s)?))).collect()
}

fn refs(v: &[(u64, PpoTrainer)]) -> Vec<(u64, &ActorCritic)> {
    v.iter().map(|(s, t)| (*s, &t.ac)).collect()
}

fn warn(reports: &[EvalReport]) {
    if let Some(w) = reports.iter().find_map(|r| r.warning.as_ref()) {
        eprintln!("warning: {w}");
    }
}

/// Evaluates a trained arm at one difficulty.
pub fn eval(ctx: &Context, arm: &Arm, difficulty: Option<f64>, episodes: Option<usize>) -> Result<PathBuf> {
    arm.validate()?;
    let mut plan = ctx.plan.clone();
    if let Some(n) = episodes {
        if n == 0 {
            return Err(Error::Input("episodes must be at least 1".into()));
        }
        plan.schedule.eval_episodes = n;
    }
    let d = difficulty.unwrap_or(plan.base_difficulty());
    plan.base_env(0).with_difficulty(d).validate()?;
    let args = format!("{} difficulty={d} episodes={}", arm.tag(), plan.schedule.eval_episodes);
    let id = ctx.run_id("eval", &args);
    let agents = agents_for(ctx, arm)?;
    let report = ex::run_eval(&plan, arm, &refs(&agents), d)?;
    warn(std::slice::from_ref(&report));
    let run = RunDir::create(&ctx.out, &id)?;
    run.append_reports("eval.csv", &[report], None)?;
    ctx.finish(&run, &id, format!("eval {args}"))
}

/// Epsilon grid search for one method, scored at the target difficulty.
pub fn grid(ctx: &Context, method: Method) -> Result<PathBuf> {
    if !method.uses_epsilon() {
        return Err(Error::Config(format!("{method} has no epsilon to search")));
    }
    let id = ctx.run_id("grid", method.as_str());
    let mut reports = Vec::new();
    for &eps in &ctx.plan.attack.epsilon_grid {
        let arm = Arm::new(method, eps, ctx.plan.adversary.alpha);
        let agents = agents_for(ctx, &arm)?;
        reports.push(ex::run_eval(&ctx.plan, &arm, &refs(&agents), ctx.plan.target_difficulty())?);
    }
    warn(&reports);
    let rows: Vec<(f64, f64)> = reports.iter().map(|r| (r.meta.epsilon, r.metric.mean)).collect();
    let best = ex::best_epsilon(&rows).expect("non-empty grid");
    let flags = reports.iter().map(|r| (r.meta.epsilon == best).to_string()).collect();
    let run = RunDir::create(&ctx.out, &id)?;
    run.append_reports("grid.csv", &reports, Some(("best", flags)))?;
    ctx.finish(&run, &id, format!("grid {method}"))
}

/// Method by difficulty sweep over the configured arms.
pub fn sweep(ctx: &Context) -> Result<PathBuf> {
    let id = ctx.run_id("sweep", "");
    let arms: Vec<Arm> = ctx
        .plan
        .sweep
        .methods
        .iter()
        .map(|&m| Arm::new(m, ctx.plan.attack.epsilon, ctx.plan.adversary.alpha))
        .collect();
    let trained = arms.iter().map(|a| agents_for(ctx, a)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(Arm, Vec<(u64, &ActorCritic)>)> = arms.iter().zip(&trained).map(|(a, t)| (*a, refs(t))).collect();
    let reports = ex::robustness_sweep(&ctx.plan, &cells)?;
    warn(&reports);
    let run = RunDir::create(&ctx.out, &id)?;
    run.append_reports("sweep.csv", &reports, None)?;
    ctx.finish(&run, &id, "sweep".into())
}

/// Frozen baseline agents under every attack and budget, including 0.
pub fn attack_eval(ctx: &Context) -> Result<PathBuf> {
    let id = ctx.run_id("attack-eval", "");
    let baseline = agents_for(ctx, &Arm::new(Method::Baseline, 0.0, 0.0))?;
    let agents: Vec<(u64, &PpoTrainer)> = baseline.iter().map(|(s, t)| (*s, t)).collect();
    let mut grid = vec![0.0];
    grid.extend(&ctx.plan.attack.epsilon_grid);
    let mut reports = Vec::new();
    let mut untouched = Vec::new();
    for &m in &ctx.plan.attack.attack_eval_methods {
        for &eps in &grid {
            let row = ex::attacked_eval(&ctx.plan, m, eps, &agents)?;
            untouched.push(row.state_untouched.to_string());
            reports.push(row.report);
        }
    }
    warn(&reports);
    let run = RunDir::create(&ctx.out, &id)?;
    run.append_reports("attack_eval.csv", &reports, Some(("state_untouched", untouched)))?;
    ctx.finish(&run, &id, "attack-eval".into())
}
