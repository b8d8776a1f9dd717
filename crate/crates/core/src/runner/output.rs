//! Result files. Every invocation owns `results/<run-id>/`; files are
//! recreated when the run starts and rows are appended as cells finish, so
//! a repeated invocation reproduces the same bytes.
//!
//! Fixed CSV headers:
//!
//! - `curves.csv`: [`CURVE_HEADER`], one row per PPO update
//! - `train.csv`: [`TRAIN_HEADER`], arm purity and attack statistics per seed
//! - `schedule.csv`: [`SCHEDULE_HEADER`], one row per adversary-schedule phase
//! - `eval.csv`, `sweep.csv`: [`REPORT_HEADER`]
//! - `grid.csv`: [`REPORT_HEADER`] plus `best`
//! - `attack_eval.csv`: [`REPORT_HEADER`] plus `state_untouched`

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiments::{Arm, EvalReport};
use crate::adversary::PhaseLog;
use crate::attack::AttackSummary;
use crate::ppo::UpdateRecord;
use crate::Result;

pub const CURVE_HEADER: &[&str] = &[
    "method", "epsilon", "alpha", "seed", "phase", "step", "episodes", "mean_return", "mean_metric",
    "policy_loss", "value_loss", "entropy",
];

pub const TRAIN_HEADER: &[&str] = &[
    "method", "epsilon", "alpha", "seed", "train_difficulty", "attack_free", "disturbed_steps",
    "state_mutated", "attack_steps", "attacked", "degenerate", "clamped", "mean_eta_norm",
    "mean_value_delta", "config_hash",
];

pub const SCHEDULE_HEADER: &[&str] = &[
    "method", "epsilon", "alpha", "seed", "phase", "agent", "start_step", "end_step", "updates",
    "mean_adversary_reward", "mean_protagonist_reward",
];

pub const REPORT_HEADER: &[&str] = &[
    "method", "epsilon", "alpha", "difficulty", "n_seeds", "seeds", "episodes", "mean_return",
    "return_ci95", "mean_metric", "metric_ci95", "seed_metrics", "config_hash",
];

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<out>/results/<run_id>`, removing files of an earlier
    /// identical run.
    pub fn create(out: &Path, run_id: &str) -> Result<Self> {
        let path = out.join("results").join(run_id);
        if path.exists() {
            fs::remove_dir_all(&path)?;
        }
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    fn append(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path.join(name);
        let fresh = !p.exists();
        let f: File = OpenOptions::new().create(true).append(true).open(&p)?;
        let mut w = csv::Writer::from_writer(f);
        if fresh {
            w.write_record(header)?;
        }
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn append_curve(&self, arm: &Arm, phase: &str, seed: u64, curve: &[UpdateRecord]) -> Result<()> {
        let rows: Vec<Vec<String>> = curve
            .iter()
            .map(|u| {
                vec![
                    arm.method.to_string(),
                    arm.epsilon.to_string(),
                    arm.alpha.to_string(),
                    seed.to_string(),
                    phase.to_string(),
                    u.step.to_string(),
                    u.episodes.to_string(),
                    u.mean_return.to_string(),
                    u.mean_metric.to_string(),
                    u.policy_loss.to_string(),
                    u.value_loss.to_string(),
                    u.entropy.to_string(),
                ]
            })
            .collect();
        self.append("curves.csv", CURVE_HEADER, &rows)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn append_train(
        &self,
        arm: &Arm,
        seed: u64,
        purity: &super::experiments::ArmPurity,
        attack: Option<&AttackSummary>,
        config_hash: &str,
    ) -> Result<()> {
        let a = attack.copied().unwrap_or_default();
        let row = vec![
            arm.method.to_string(),
            arm.epsilon.to_string(),
            arm.alpha.to_string(),
            seed.to_string(),
            purity.train_difficulty.to_string(),
            (purity.disturbed_steps == 0).to_string(),
            purity.disturbed_steps.to_string(),
            purity.state_mutated.to_string(),
            a.steps.to_string(),
            a.attacked.to_string(),
            a.degenerate.to_string(),
            a.clamped.to_string(),
            a.mean_eta_norm.to_string(),
            a.mean_value_delta.to_string(),
            config_hash.to_string(),
        ];
        self.append("train.csv", TRAIN_HEADER, &[row])
    }

    pub fn append_schedule(&self, arm: &Arm, seed: u64, log: &[PhaseLog]) -> Result<()> {
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|p| {
                vec![
                    arm.method.to_string(),
                    arm.epsilon.to_string(),
                    arm.alpha.to_string(),
                    seed.to_string(),
                    p.phase.to_string(),
                    match p.agent {
                        crate::adversary::Role::Adversary => "adversary".into(),
                        crate::adversary::Role::Protagonist => "protagonist".into(),
                    },
                    p.start_step.to_string(),
                    p.end_step.to_string(),
                    p.updates.to_string(),
                    p.mean_adversary_reward.to_string(),
                    p.mean_protagonist_reward.to_string(),
                ]
            })
            .collect();
        self.append("schedule.csv", SCHEDULE_HEADER, &rows)
    }

    /// Appends reports to `name`; `extra` adds one named column.
    pub fn append_reports(&self, name: &str, reports: &[EvalReport], extra: Option<(&str, Vec<String>)>) -> Result<()> {
        let mut header: Vec<&str> = REPORT_HEADER.to_vec();
        if let Some((col, _)) = &extra {
            header.push(col);
        }
        let rows: Vec<Vec<String>> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = report_row(r);
                if let Some((_, vals)) = &extra {
                    row.push(vals[i].clone());
                }
                row
            })
            .collect();
        self.append(name, &header, &rows)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let text = toml::to_string(manifest).map_err(|e| crate::Error::Config(e.to_string()))?;
        fs::write(self.path.join("manifest.toml"), text)?;
        Ok(())
    }
}

pub fn report_row(r: &EvalReport) -> Vec<String> {
    vec![
        r.meta.method.to_string(),
        r.meta.epsilon.to_string(),
        r.meta.alpha.to_string(),
        r.meta.difficulty.to_string(),
        r.per_seed.len().to_string(),
        join(r.seeds()),
        r.per_seed.first().map(|s| s.episodes).unwrap_or(0).to_string(),
        r.returns.mean.to_string(),
        opt(r.returns.half_width),
        r.metric.mean.to_string(),
        opt(r.metric.half_width),
        join(r.per_seed.iter().map(|s| s.mean_metric)),
        r.meta.config_hash.clone(),
    ]
}

/// Run manifest written next to the CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub files: Vec<String>,
    pub plan: super::config::ExperimentPlan,
}
