use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::episode::{run_episode, EpisodeRecord, Outcome, PlannerConfig};
use super::{Scenario, SimError};
use crate::solver::SolveStatus;

/// Decorrelated child seed (SplitMix64 of the pair).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One planner's aggregate over a Monte Carlo batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub episodes: usize,
    pub merge_success_pct: f64,
    pub merge_aborted_pct: f64,
    pub collision_pct: f64,
    pub timeout_pct: f64,
    pub failed_pct: f64,
    pub solver_calls: usize,
    pub converged_pct: f64,
    pub max_time_pct: f64,
    pub infeasible_pct: f64,
    pub avg_cost: f64,
    pub avg_solve_time_ms: f64,
    pub std_solve_time_ms: f64,
    /// Steps whose warmstart cost exceeded the shifted previous solution's.
    pub upper_bound_violations: usize,
}

impl MetricsRow {
    pub fn from_episodes(variant: &str, episodes: &[EpisodeRecord]) -> Self {
        let pct = |n: usize, d: usize| {
            if d == 0 {
                0.0
            } else {
                100.0 * n as f64 / d as f64
            }
        };
        let n = episodes.len();
        let count = |o: Outcome| episodes.iter().filter(|e| e.outcome == o).count();
        let steps: Vec<_> = episodes.iter().flat_map(|e| &e.steps).collect();
        let calls = steps.len();
        let status = |st: SolveStatus| steps.iter().filter(|s| s.status == st).count();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let costs: Vec<f64> = steps.iter().map(|s| s.cost).collect();
        let times: Vec<f64> = steps.iter().map(|s| 1e3 * s.solve_time_s).collect();
        let t_mean = mean(&times);
        let t_var = mean(
            &times
                .iter()
                .map(|t| (t - t_mean).powi(2))
                .collect::<Vec<_>>(),
        );
        let violations = steps
            .iter()
            .filter(|s| {
                s.warmstart
                    .previous_cost
                    .is_some_and(|p| s.warmstart.guess_cost > p)
            })
            .count();
        Self {
            variant: variant.to_string(),
            episodes: n,
            merge_success_pct: pct(count(Outcome::MergeSuccess), n),
            merge_aborted_pct: pct(count(Outcome::MergeAborted), n),
            collision_pct: pct(count(Outcome::Collision), n),
            timeout_pct: pct(count(Outcome::TimeoutOk), n),
            failed_pct: pct(count(Outcome::Failed), n),
            solver_calls: calls,
            converged_pct: pct(status(SolveStatus::Success), calls),
            max_time_pct: pct(status(SolveStatus::MaxTimeExceeded), calls),
            infeasible_pct: pct(status(SolveStatus::ConvergedToInfeasible), calls),
            avg_cost: mean(&costs),
            avg_solve_time_ms: t_mean,
            std_solve_time_ms: t_var.sqrt(),
            upper_bound_violations: violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: String,
    /// SHA-256 of the scenario template and planner configurations.
    pub config_hash: String,
    pub seed: u64,
    pub runs: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, variant: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,config_hash,seed,runs,variant,episodes,merge_success_pct,merge_aborted_pct,collision_pct,\
             timeout_pct,failed_pct,solver_calls,converged_pct,max_time_pct,infeasible_pct,avg_cost,\
             avg_solve_time_ms,std_solve_time_ms,upper_bound_violations\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{},{:.2},{:.2},{:.2},{:.4},{:.3},{:.3},{}\n",
                self.scenario,
                self.config_hash,
                self.seed,
                self.runs,
                r.variant,
                r.episodes,
                r.merge_success_pct,
                r.merge_aborted_pct,
                r.collision_pct,
                r.timeout_pct,
                r.failed_pct,
                r.solver_calls,
                r.converged_pct,
                r.max_time_pct,
                r.infeasible_pct,
                r.avg_cost,
                r.avg_solve_time_ms,
                r.std_solve_time_ms,
                r.upper_bound_violations
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub fn config_hash(base: &Scenario, planners: &[PlannerConfig]) -> String {
    let text = serde_json::to_string(&(base, planners)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub table: MetricsTable,
    /// Episodes per planner, in run order.
    pub episodes: Vec<Vec<EpisodeRecord>>,
}

/// Samples `n_runs` scenarios from `base` and runs every planner on each
/// (paired comparison). Runs execute in parallel; results are ordered.
pub fn monte_carlo(
    base: &Scenario,
    n_runs: usize,
    seed: u64,
    planners: &[PlannerConfig],
) -> Result<MonteCarloResult, SimError> {
    if n_runs == 0 {
        return Err(SimError::InvalidScenario(
            "n_runs must be at least 1".into(),
        ));
    }
    base.validate()?;
    let per_run: Vec<Result<Vec<EpisodeRecord>, SimError>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let scn = base.sample(sub_seed(seed, i));
            planners.iter().map(|p| run_episode(&scn, p)).collect()
        })
        .collect();
    let mut episodes: Vec<Vec<EpisodeRecord>> = vec![Vec::with_capacity(n_runs); planners.len()];
    for run in per_run {
        for (j, ep) in run?.into_iter().enumerate() {
            episodes[j].push(ep);
        }
    }
    let rows = planners
        .iter()
        .zip(&episodes)
        .map(|(p, eps)| MetricsRow::from_episodes(p.variant.name(), eps))
        .collect();
    Ok(MonteCarloResult {
        table: MetricsTable {
            scenario: base.name.clone(),
            config_hash: config_hash(base, planners),
            seed,
            runs: n_runs,
            rows,
        },
        episodes,
    })
}
