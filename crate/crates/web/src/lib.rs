//! Browser demo for the flappy environment.
//!
//! Three operations are exported: train an agent in the page, replay one
//! greedy episode under a chosen attack, and compute a seed-level 95%
//! confidence interval. Everything is also callable natively, which is how
//! the tests exercise it.

use envattack::env::{self, EnvConfig, EnvKind, EnvState};
use envattack::ppo::{Disturbance, EnvRunner, NoDisturbance, PpoConfig, PpoTrainer};
use envattack::runner::experiments::{cell_rng, gradient_attack, init_protagonist};
use envattack::runner::{ExperimentPlan, Method, SeedSummary};
use envattack::attack::AttackHook;
use envattack::{Error, Result};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Values per replay frame: bird altitude, four (x, gap center) pairs and
/// the two gap centers the agent perceived.
pub const FRAME_LEN: usize = 11;

#[wasm_bindgen]
pub struct Demo {
    trainer: PpoTrainer,
    runner: EnvRunner,
    rng: ChaCha8Rng,
    last_return: f64,
}

impl Demo {
    pub fn create(seed: u32) -> Result<Demo> {
        let plan = ExperimentPlan::default();
        let mut rng = cell_rng(seed as u64, "web");
        let trainer = init_protagonist(&plan, &mut rng)?;
        let runner = EnvRunner::new(plan.base_env(seed as u64))?;
        Ok(Demo { trainer, runner, rng, last_return: f64::NAN })
    }

    pub fn train_steps(&mut self, steps: u32) -> Result<f64> {
        let mut last = self.last_return;
        let Demo { trainer, runner, rng, .. } = self;
        trainer.train(runner, steps as u64, &mut NoDisturbance, rng, |u| {
            if u.episodes > 0 {
                last = u.mean_return;
            }
        })?;
        self.last_return = last;
        Ok(last)
    }

    /// Replays one greedy episode; the first two values are the gap size
    /// and [`FRAME_LEN`], followed by one frame per step.
    pub fn replay(&self, method: &str, epsilon: f64, gap: f64, episode_seed: u32) -> Result<Vec<f64>> {
        let method: Method = method.parse()?;
        let mut hook: Box<dyn Disturbance> = match method {
            Method::Baseline => Box::new(NoDisturbance),
            m if m.is_gradient_attack() => {
                let cfg = gradient_attack(m, EnvKind::Flappy, epsilon)
                    .ok_or_else(|| Error::Config(format!("{m} has no gradient attack")))?;
                Box::new(AttackHook::new(cfg)?)
            }
            m => return Err(Error::Config(format!("the demo cannot replay {m}"))),
        };
        let cfg = EnvConfig::flappy(gap, episode_seed as u64);
        cfg.validate()?;
        let ac = &self.trainer.ac;
        let mut rng = cell_rng(episode_seed as u64, "web-replay");
        let (mut state, mut obs) = env::reset(&cfg)?;
        let mut out = vec![gap, FRAME_LEN as f64];
        loop {
            let (s, o) = hook.before_act(ac, &state, &obs, &mut rng)?;
            push_frame(&mut out, &s, &o);
            let action = ac
                .act_greedy(&o)?
                .discrete()
                .ok_or_else(|| Error::Input("expected a discrete action".into()))?;
            let (next, r) = s.step(action)?;
            if r.done {
                return Ok(out);
            }
            state = next;
            obs = r.observation;
        }
    }
}

fn push_frame(out: &mut Vec<f64>, s: &EnvState, perceived: &[f64]) {
    let EnvState::Flappy(f) = s else { unreachable!("demo is flappy only") };
    out.push(f.bird.altitude);
    for o in f.obstacles.iter().take(4) {
        out.extend([o.horizontal_pos, o.gap_center]);
    }
    let half = env::flappy::SCREEN_HEIGHT / 2.0;
    out.extend([half + perceived[3] * half, half + perceived[5] * half]);
}

/// `[mean, half_width]` of the Student-t 95% interval; the half width is
/// NaN for a single value and the result is empty for no values.
pub fn interval(values: &[f64]) -> Vec<f64> {
    match SeedSummary::from_values(values) {
        Some(s) => vec![s.mean, s.half_width.unwrap_or(f64::NAN)],
        None => vec![],
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::create(seed).map_err(js)
    }

    /// Trains for `steps` more environment steps and returns the latest
    /// mean episode return (NaN until an episode finishes).
    pub fn train(&mut self, steps: u32) -> std::result::Result<f64, JsError> {
        self.train_steps(steps).map_err(js)
    }

    #[wasm_bindgen(js_name = totalSteps)]
    pub fn total_steps(&self) -> f64 {
        self.runner.total_steps() as f64
    }

    #[wasm_bindgen(js_name = rolloutLength)]
    pub fn rollout_length(&self) -> u32 {
        PpoConfig::default().rollout_length as u32
    }

    pub fn play(&self, method: &str, epsilon: f64, gap: f64, episode_seed: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.replay(method, epsilon, gap, episode_seed).map_err(js)
    }
}

#[wasm_bindgen(js_name = confidenceInterval)]
pub fn confidence_interval(values: Vec<f64>) -> Vec<f64> {
    interval(&values)
}
