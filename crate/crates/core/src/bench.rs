//! Benchmark harness behind the `mpcc-bench` binary: run configuration,
//! scenario loading, the three experiments and artifact files.
//!
//! Every emitted table or report carries the configuration hash and the
//! master seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    config_hash, monte_carlo, run_episode, EpisodeRecord, MetricsTable, Outcome, PlannerConfig,
    PlannerVariant, Scenario, SimError,
};
use crate::solver::SolveStatus;
use crate::warmstart::{homotopy_signature, PassSide};

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "MPCC_BENCH_OUT";

const BUNDLED: [(&str, &str); 3] = [
    ("merge", include_str!("../scenarios/merge.json")),
    ("overtake", include_str!("../scenarios/overtake.json")),
    ("crossing", include_str!("../scenarios/crossing.json")),
];

/// Text of a scenario shipped with the crate (`merge`, `overtake`, `crossing`).
pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{source_name}: invalid value for `{key}`: {message}")]
    ConfigParse {
        source_name: String,
        key: String,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown experiment `{0}` (expected exp1, exp2 or exp3)")]
    UnknownExperiment(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl BenchError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn invalid(key: &str, message: impl Into<String>) -> Self {
        BenchError::ConfigParse {
            source_name: "run config".into(),
            key: key.into(),
            message: message.into(),
        }
    }

    /// Configuration mistakes exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::ConfigParse { .. } | BenchError::UnknownExperiment(_) => 2,
            _ => 1,
        }
    }
}

/// Parses JSON, reporting the dotted path of the offending key on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(
    text: &str,
    source_name: &str,
) -> Result<T, BenchError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        BenchError::ConfigParse {
            source_name: source_name.to_string(),
            key: if key == "." { "<root>".into() } else { key },
            message: e.into_inner().to_string(),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantChoice {
    Baseline,
    LearningAided,
    Both,
}

impl VariantChoice {
    pub fn variants(&self) -> Vec<PlannerVariant> {
        match self {
            VariantChoice::Baseline => vec![PlannerVariant::Baseline],
            VariantChoice::LearningAided => vec![PlannerVariant::LearningAided],
            VariantChoice::Both => vec![PlannerVariant::Baseline, PlannerVariant::LearningAided],
        }
    }
}

impl FromStr for VariantChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(VariantChoice::Baseline),
            "learning_aided" => Ok(VariantChoice::LearningAided),
            "both" => Ok(VariantChoice::Both),
            other => Err(format!(
                "unknown variant `{other}` (expected baseline, learning_aided or both)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario file, or the name of a bundled scenario.
    pub scenario: String,
    pub variant: VariantChoice,
    /// Monte Carlo runs; `None` means one run for `run` and the
    /// experiment's own default otherwise.
    pub runs: Option<usize>,
    pub seed: u64,
    pub t_max_s: f64,
    /// Posterior samples per mode.
    pub samples: usize,
    /// Softmin temperature.
    pub lambda: f64,
    /// Maximum number of prediction modes.
    pub modes: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = PlannerConfig::new(PlannerVariant::LearningAided);
        Self {
            scenario: "merge".into(),
            variant: VariantChoice::Both,
            runs: None,
            seed: 7,
            t_max_s: base.solver.t_max_s,
            samples: base.refinement.samples,
            lambda: base.refinement.lambda,
            modes: base.prediction.modes,
            out_dir: PathBuf::from("mpcc-bench-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: RunConfig = parse_json(text, "run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            BenchError::ConfigParse { key, message, .. } => BenchError::ConfigParse {
                source_name: path.display().to_string(),
                key,
                message,
            },
            other => other,
        })
    }

    /// Pretty JSON with a trailing newline; `from_json` reads it back exactly.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.runs == Some(0) {
            return Err(BenchError::invalid("runs", "must be at least 1"));
        }
        if !(self.t_max_s.is_finite() && self.t_max_s > 0.0) {
            return Err(BenchError::invalid("t_max_s", "must be positive"));
        }
        if self.samples == 0 {
            return Err(BenchError::invalid("samples", "must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(BenchError::invalid("lambda", "must be positive"));
        }
        if self.modes == 0 {
            return Err(BenchError::invalid("modes", "must be at least 1"));
        }
        Ok(())
    }

    /// Planner configuration for `variant` with this config's overrides.
    pub fn planner(&self, variant: PlannerVariant) -> PlannerConfig {
        let mut p = PlannerConfig::new(variant);
        p.solver.t_max_s = self.t_max_s;
        p.refinement.samples = self.samples;
        p.refinement.lambda = self.lambda;
        p.prediction.modes = self.modes;
        p
    }

    pub fn planners(&self) -> Vec<PlannerConfig> {
        self.variant
            .variants()
            .into_iter()
            .map(|v| self.planner(v))
            .collect()
    }
}

/// Loads a scenario from a file, falling back to the bundled scenario of
/// that name. Neither existing is an I/O error naming the path.
pub fn load_scenario(spec: &str) -> Result<Scenario, BenchError> {
    let path = Path::new(spec);
    let (text, source_name) = match fs::read_to_string(path) {
        Ok(t) => (t, spec.to_string()),
        Err(e) => match bundled_scenario(spec) {
            Some(t) => (t.to_string(), format!("bundled scenario `{spec}`")),
            None => return Err(BenchError::io(path, e)),
        },
    };
    let scn: Scenario = parse_json(&text, &source_name)?;
    scn.validate()?;
    Ok(scn)
}

fn write(path: &Path, contents: &str) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}

/// Episode log with a comment line identifying its origin.
pub fn episode_csv(ep: &EpisodeRecord, hash: &str) -> String {
    format!(
        "# scenario={} variant={} seed={} config_hash={}\n{}",
        ep.scenario,
        ep.variant.name(),
        ep.seed,
        hash,
        ep.to_csv()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub table: MetricsTable,
    /// Outcome of every episode, per variant, in run order.
    pub outcomes: Vec<(String, Vec<Outcome>)>,
    pub files: Vec<PathBuf>,
}

/// Runs the configured scenario (`runs` Monte Carlo samples, default 1) and
/// writes `metrics.csv`, `metrics.json`, one CSV per episode and
/// `summary.json` into the output directory.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, BenchError> {
    config.validate()?;
    let scn = load_scenario(&config.scenario)?;
    let planners = config.planners();
    let runs = config.runs.unwrap_or(1);
    let mc = monte_carlo(&scn, runs, config.seed, &planners)?;
    let hash = mc.table.config_hash.clone();
    let out = &config.out_dir;

    let mut files = vec![out.join("metrics.csv"), out.join("metrics.json")];
    write(&files[0], &mc.table.to_csv())?;
    write(&files[1], &mc.table.to_json())?;
    let mut outcomes = Vec::new();
    for (p, eps) in planners.iter().zip(&mc.episodes) {
        for (i, ep) in eps.iter().enumerate() {
            let f = out
                .join("episodes")
                .join(format!("run{i:03}_{}.csv", p.variant.name()));
            write(&f, &episode_csv(ep, &hash))?;
            files.push(f);
        }
        outcomes.push((
            p.variant.name().to_string(),
            eps.iter().map(|e| e.outcome).collect(),
        ));
    }
    let summary = RunSummary {
        config: config.clone(),
        scenario: scn.name.clone(),
        config_hash: hash,
        seed: config.seed,
        table: mc.table,
        outcomes,
        files,
    };
    let path = out.join("summary.json");
    write(
        &path,
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Oncoming-traffic overtake: distinct local optima.
    Exp1,
    /// Crossing obstacle revealed mid-episode.
    Exp2,
    /// Monte Carlo highway merge.
    Exp3,
}

impl Experiment {
    pub fn scenario(&self) -> &'static str {
        match self {
            Experiment::Exp1 => "overtake",
            Experiment::Exp2 => "crossing",
            Experiment::Exp3 => "merge",
        }
    }

    pub fn default_runs(&self) -> usize {
        match self {
            Experiment::Exp3 => 50,
            _ => 1,
        }
    }
}

impl FromStr for Experiment {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp1" => Ok(Experiment::Exp1),
            "exp2" => Ok(Experiment::Exp2),
            "exp3" => Ok(Experiment::Exp3),
            other => Err(BenchError::UnknownExperiment(other.to_string())),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
        };
        f.write_str(s)
    }
}

/// Per-variant result of the overtake experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OvertakeRow {
    pub variant: String,
    /// Solution of the first planning step.
    pub first_status: SolveStatus,
    pub first_cost: f64,
    /// Pass side of the first solution relative to each forecast obstacle.
    pub first_signature: Vec<PassSide>,
    pub outcome: Outcome,
    pub mean_cost: f64,
    pub min_ttc_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OvertakeReport {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<OvertakeRow>,
    /// `(t, min TTC per variant)`; `None` once an episode has ended or when
    /// nothing is closing in.
    pub ttc: Vec<(f64, Vec<Option<f64>>)>,
}

impl OvertakeReport {
    pub fn row(&self, variant: &str) -> Option<&OvertakeRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn ttc_csv(&self) -> String {
        let mut out = format!("# seed={} config_hash={}\nt_s", self.seed, self.config_hash);
        for r in &self.rows {
            out.push_str(&format!(",ttc_{}_s", r.variant));
        }
        out.push('\n');
        for (t, vals) in &self.ttc {
            out.push_str(&format!("{t:.2}"));
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.3}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-variant result of the crossing experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingRow {
    pub variant: String,
    /// Status of the first solve at or after the event.
    pub post_event_status: Option<SolveStatus>,
    pub post_event_fallback: Option<bool>,
    pub outcome: Outcome,
    pub collided: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingReport {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub t_event_s: Option<f64>,
    pub rows: Vec<CrossingRow>,
}

impl CrossingReport {
    pub fn row(&self, variant: &str) -> Option<&CrossingRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentReport {
    Exp1(OvertakeReport),
    Exp2(CrossingReport),
    Exp3(MetricsTable),
}

impl ExperimentReport {
    /// Human-readable summary.
    pub fn summary(&self) -> String {
        match self {
            ExperimentReport::Exp1(r) => {
                let mut s = format!(
                    "exp1 {} seed={} config_hash={}\n",
                    r.scenario, r.seed, r.config_hash
                );
                for row in &r.rows {
                    s.push_str(&format!(
                        "  {:<15} first solve {:<24} cost {:>10.2} signature {:?}  outcome {:?}  min TTC {}\n",
                        row.variant,
                        row.first_status.name(),
                        row.first_cost,
                        row.first_signature,
                        row.outcome,
                        row.min_ttc_s.map(|t| format!("{t:.2} s")).unwrap_or_else(|| "-".into())
                    ));
                }
                s
            }
            ExperimentReport::Exp2(r) => {
                let mut s = format!(
                    "exp2 {} seed={} config_hash={} event at {}\n",
                    r.scenario,
                    r.seed,
                    r.config_hash,
                    r.t_event_s
                        .map(|t| format!("{t:.2} s"))
                        .unwrap_or_else(|| "-".into())
                );
                for row in &r.rows {
                    s.push_str(&format!(
                        "  {:<15} post-event solve {:<24} outcome {:?}\n",
                        row.variant,
                        row.post_event_status.map(|st| st.name()).unwrap_or("-"),
                        row.outcome
                    ));
                }
                s
            }
            ExperimentReport::Exp3(t) => t.to_csv(),
        }
    }
}

fn episodes_for(
    config: &RunConfig,
    scn: &Scenario,
) -> Result<(Vec<EpisodeRecord>, String), BenchError> {
    let planners = config.planners();
    let hash = config_hash(scn, &planners);
    let eps = planners
        .iter()
        .map(|p| run_episode(scn, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((eps, hash))
}

fn overtake_report(scn: &Scenario, eps: &[EpisodeRecord], hash: String) -> OvertakeReport {
    let rows = eps
        .iter()
        .map(|ep| {
            let first = &ep.steps[0];
            let mean_cost = ep.steps.iter().map(|s| s.cost).sum::<f64>() / ep.steps.len() as f64;
            OvertakeRow {
                variant: ep.variant.name().to_string(),
                first_status: first.status,
                first_cost: first.cost,
                first_signature: homotopy_signature(&first.solution, &first.forecasts),
                outcome: ep.outcome,
                mean_cost,
                min_ttc_s: ep.steps.iter().filter_map(|s| s.min_ttc_s).reduce(f64::min),
            }
        })
        .collect();
    let longest = eps.iter().map(|e| e.steps.len()).max().unwrap_or(0);
    let ttc = (0..longest)
        .map(|k| {
            let t = k as f64 * scn.vehicle.sample_time_s;
            (
                t,
                eps.iter()
                    .map(|e| e.steps.get(k).and_then(|s| s.min_ttc_s))
                    .collect(),
            )
        })
        .collect();
    OvertakeReport {
        scenario: scn.name.clone(),
        config_hash: hash,
        seed: scn.seed,
        rows,
        ttc,
    }
}

fn crossing_report(scn: &Scenario, eps: &[EpisodeRecord], hash: String) -> CrossingReport {
    let t_event_s = scn.events.iter().map(|e| e.t_s).reduce(f64::min);
    let rows = eps
        .iter()
        .map(|ep| {
            let post = t_event_s.and_then(|t| ep.step_at(t));
            CrossingRow {
                variant: ep.variant.name().to_string(),
                post_event_status: post.map(|s| s.status),
                post_event_fallback: post.map(|s| s.fallback),
                outcome: ep.outcome,
                collided: ep.collided(),
            }
        })
        .collect();
    CrossingReport {
        scenario: scn.name.clone(),
        config_hash: hash,
        seed: scn.seed,
        t_event_s,
        rows,
    }
}

/// Runs one experiment on its bundled scenario. `config.scenario` is
/// ignored; the seed and planner overrides apply. Artifacts go to
/// `<out_dir>/<experiment>/`.
pub fn cmd_experiment(exp: Experiment, config: &RunConfig) -> Result<ExperimentReport, BenchError> {
    config.validate()?;
    let base = load_scenario(exp.scenario())?;
    let dir = config.out_dir.join(exp.to_string());
    let report = match exp {
        Experiment::Exp1 | Experiment::Exp2 => {
            let scn = base.sample(config.seed);
            let (eps, hash) = episodes_for(config, &scn)?;
            for ep in &eps {
                write(
                    &dir.join(format!("{}.csv", ep.variant.name())),
                    &episode_csv(ep, &hash),
                )?;
            }
            if exp == Experiment::Exp1 {
                let r = overtake_report(&scn, &eps, hash);
                write(&dir.join("ttc.csv"), &r.ttc_csv())?;
                ExperimentReport::Exp1(r)
            } else {
                ExperimentReport::Exp2(crossing_report(&scn, &eps, hash))
            }
        }
        Experiment::Exp3 => {
            let planners = config.planners();
            let runs = config.runs.unwrap_or(exp.default_runs());
            let mc = monte_carlo(&base, runs, config.seed, &planners)?;
            write(&dir.join("metrics.csv"), &mc.table.to_csv())?;
            for (p, eps) in planners.iter().zip(&mc.episodes) {
                for (i, ep) in eps.iter().enumerate() {
                    let f = dir
                        .join("episodes")
                        .join(format!("run{i:03}_{}.csv", p.variant.name()));
                    write(&f, &episode_csv(ep, &mc.table.config_hash))?;
                }
            }
            ExperimentReport::Exp3(mc.table)
        }
    };
    write(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}
