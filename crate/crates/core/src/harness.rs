//! Experiment configuration, multi-seed orchestration and report output.
//!
//! Every run writes under `<out>/<experiment name>/<timestamp>/`:
//!
//! ```text
//! manifest.json
//! <agent>/aggregate.csv
//! <agent>/summary.json
//! <agent>/seed-<n>/{curves.csv, cycles.csv, traces.csv, final_params.json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::exact::{discounted_values, flat_average_reward, evaluate, values_json, FlatPolicy};
use crate::hierarchy::{ActorParams, Hierarchy, HierarchySpec};
use crate::learner::{train, LearnerConfig, Mode, RunRecord, StepSchedule};
use crate::mdp::{
    build_delivery_grid, build_trap_chain_with, DeliveryGrid, DeliveryGridSpec, TabularMdp, TrapChainSpec,
    TRAP_BLUE, TRAP_RED, TRAP_START,
};

pub const OUT_ENV: &str = "AVGOPT_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EnvironmentConfig {
    TrapChain(TrapChainSpec),
    DeliveryGrid(DeliveryGridSpec),
    /// An MDP document on disk.
    Custom { path: PathBuf },
}

/// A compiled environment plus whatever is needed to read its cycles.
pub struct Environment {
    pub mdp: TabularMdp,
    pub grid: Option<DeliveryGrid>,
    pub start_state: Option<usize>,
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvironmentConfig::TrapChain(spec) => Ok(Environment {
                mdp: build_trap_chain_with(spec)?,
                grid: None,
                start_state: Some(TRAP_START),
            }),
            EnvironmentConfig::DeliveryGrid(spec) => {
                let grid = build_delivery_grid(spec)?;
                Ok(Environment {
                    mdp: grid.mdp.clone(),
                    start_state: Some(grid.start_state()),
                    grid: Some(grid),
                })
            }
            EnvironmentConfig::Custom { path } => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read MDP document {}: {e}", path.display())))?;
                Ok(Environment {
                    mdp: TabularMdp::from_json(&text)?,
                    grid: None,
                    start_state: None,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub depth: usize,
    #[serde(default)]
    pub options_per_level: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub mode: Mode,
    /// Overrides the experiment-wide learner schedule.
    #[serde(default)]
    pub schedule: Option<StepSchedule>,
}

impl AgentConfig {
    pub fn name(&self) -> String {
        self.mode.short_name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentConfig,
    pub hierarchy: HierarchyConfig,
    pub agents: Vec<AgentConfig>,
    /// Shared learner settings; `mode` is taken from each agent and `seed`
    /// is the first seed.
    pub learner: LearnerConfig,
    pub n_seeds: usize,
    /// Fraction of the run used for final-window statistics.
    pub final_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // The grid's pickup rewards sit ten or more steps past the junctions;
        // a critic on the generic schedule has not propagated them by the end
        // of a run, so the critic runs near step 1 for the first ~10⁵ steps.
        let grid_schedule = StepSchedule {
            a0: 0.5,
            b0: 300.0,
            eta0: 0.1,
            p_a: 0.6,
            p_b: 0.51,
            ..StepSchedule::default()
        };
        ExperimentConfig {
            name: "delivery-grid".into(),
            environment: EnvironmentConfig::DeliveryGrid(DeliveryGridSpec::default()),
            hierarchy: HierarchyConfig {
                depth: 2,
                options_per_level: vec![2],
            },
            agents: vec![
                AgentConfig {
                    mode: Mode::AverageReward,
                    schedule: None,
                },
                AgentConfig {
                    mode: Mode::Discounted { gamma: 0.9 },
                    schedule: Some(StepSchedule { a0: 2.0, ..grid_schedule }),
                },
            ],
            learner: LearnerConfig {
                schedule: grid_schedule,
                ..LearnerConfig::default()
            },
            n_seeds: 5,
            final_fraction: 0.1,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("no agents configured".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name `{}` is not a plain directory name", self.name)));
        }
        if !(self.final_fraction > 0.0 && self.final_fraction <= 1.0) {
            return Err(Error::Config("final_fraction must lie in (0, 1]".into()));
        }
        let mut names = Vec::new();
        for agent in &self.agents {
            self.learner_config(agent, 0).validate()?;
            if names.contains(&agent.name()) {
                return Err(Error::Config(format!("two agents named `{}`", agent.name())));
            }
            names.push(agent.name());
        }
        if let EnvironmentConfig::Custom { path } = &self.environment {
            if !path.exists() {
                return Err(Error::Config(format!("MDP document {} does not exist", path.display())));
            }
        }
        HierarchySpec::new(self.hierarchy.depth, self.hierarchy.options_per_level.clone(), 1)?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.learner.seed + i).collect()
    }

    pub fn learner_config(&self, agent: &AgentConfig, seed: u64) -> LearnerConfig {
        let mut cfg = self.learner.clone();
        cfg.mode = agent.mode;
        cfg.seed = seed;
        if let Some(s) = agent.schedule {
            cfg.schedule = s;
        }
        cfg
    }

    pub fn build_hierarchy(&self, mdp: &TabularMdp) -> Result<Hierarchy> {
        let spec = HierarchySpec::new(
            self.hierarchy.depth,
            self.hierarchy.options_per_level.clone(),
            mdp.n_actions(),
        )?;
        Hierarchy::tabular(spec, mdp.n_states())
    }
}

/// `--out`, then the config, then `$AVGOPT_OUT`, then `runs`.
pub fn resolve_out_root(cli: Option<&Path>, config: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// `git describe` of the working tree, or the crate version outside git.
pub fn version_string() -> String {
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match describe {
        Some(d) => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Decimal with 10 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (9 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (9.99…→10.0); one fewer decimal
    // restores the count.
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    if digits.trim_start_matches('0').len() > 10 && decimals > 0 {
        format!("{x:.*}", decimals - 1)
    } else {
        s
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

pub fn write_curves(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "cycle", "reward_per_cycle_or_window", "jhat"])?;
    for p in &record.curves {
        w.write_record([p.step.to_string(), p.cycle.to_string(), fmt_sig(p.value), fmt_sig(p.j_hat)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cycles(record: &RunRecord, grid: Option<&DeliveryGrid>, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["cycle", "end_step", "length", "reward", "route"])?;
    for c in &record.cycles {
        let route = grid
            .and_then(|g| g.route_of(c.end_state))
            .map(|r| format!("{r:?}"))
            .unwrap_or_default();
        w.write_record([
            c.cycle.to_string(),
            c.end_step.to_string(),
            c.length.to_string(),
            fmt_sig(c.reward),
            route,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the traced parameters named in `ids` (all recorded ones when
/// empty) as `step,param_id,value` rows.
pub fn trace_report(record: &RunRecord, ids: &[String], path: &Path) -> Result<usize> {
    let recorded: Vec<&str> = {
        let mut v: Vec<&str> = record.traces.iter().map(|t| t.param_id.as_str()).collect();
        v.dedup();
        let mut seen = Vec::new();
        for id in v {
            if !seen.contains(&id) {
                seen.push(id);
            }
        }
        seen
    };
    for id in ids {
        if !recorded.contains(&id.as_str()) {
            return Err(Error::Config(format!("parameter {id} was not traced in this run")));
        }
    }
    let mut w = csv_writer(path)?;
    w.write_record(["step", "param_id", "value"])?;
    let mut rows = 0;
    for t in &record.traces {
        if ids.is_empty() || ids.contains(&t.param_id) {
            w.write_record([t.step.to_string(), t.param_id.clone(), fmt_sig(t.value)])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

fn final_params_json(record: &RunRecord) -> serde_json::Value {
    json!({
        "mode": record.mode,
        "seed": record.seed,
        "steps": record.steps,
        "params": record.final_params.snapshot_json(),
        "critic": record.final_critic,
    })
}

/// Reads `final_params.json` (or a bare parameter snapshot) for `hierarchy`.
pub fn load_params(path: &Path, hierarchy: &Hierarchy) -> Result<ActorParams> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let snapshot = if value.get("params").is_some() { &value["params"] } else { &value };
    ActorParams::from_snapshot_json(hierarchy.layout(), snapshot)
}

/// Per-step mean and standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateCurve {
    pub agent: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub jhat_mean: Vec<f64>,
    pub jhat_std: Vec<f64>,
    pub seeds: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn parse_field(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Config(format!("bad CSV number `{s}`: {e}")))
}

/// Aggregates the `curves.csv` files of the given seed directories.
/// Entries that are not finite (a seed before its first cycle) are left out
/// of that row's statistics.
pub fn aggregate_from_csv(agent: &str, seed_dirs: &[PathBuf]) -> Result<AggregateCurve> {
    let mut columns: Vec<Vec<(u64, f64, f64)>> = Vec::new();
    for dir in seed_dirs {
        let mut r = csv::Reader::from_path(dir.join("curves.csv"))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let step: u64 = rec[0].parse().map_err(|_| Error::Config(format!("bad step `{}`", &rec[0])))?;
            rows.push((step, parse_field(&rec[2])?, parse_field(&rec[3])?));
        }
        columns.push(rows);
    }
    let len = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != len) {
        return Err(Error::Config(format!("{agent}: seeds recorded curves of different lengths")));
    }
    let mut out = AggregateCurve {
        agent: agent.into(),
        steps: Vec::with_capacity(len),
        mean: Vec::with_capacity(len),
        std: Vec::with_capacity(len),
        jhat_mean: Vec::with_capacity(len),
        jhat_std: Vec::with_capacity(len),
        seeds: seed_dirs.len(),
    };
    for i in 0..len {
        let step = columns[0][i].0;
        if columns.iter().any(|c| c[i].0 != step) {
            return Err(Error::Config(format!("{agent}: step columns disagree at row {i}")));
        }
        let (m, s) = mean_std(&columns.iter().map(|c| c[i].1).collect::<Vec<_>>());
        let (jm, js) = mean_std(&columns.iter().map(|c| c[i].2).collect::<Vec<_>>());
        out.steps.push(step);
        out.mean.push(m);
        out.std.push(s);
        out.jhat_mean.push(jm);
        out.jhat_std.push(js);
    }
    Ok(out)
}

pub fn write_aggregate(curve: &AggregateCurve, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "mean", "std", "jhat_mean", "jhat_std"])?;
    for i in 0..curve.steps.len() {
        w.write_record([
            curve.steps[i].to_string(),
            fmt_sig(curve.mean[i]),
            fmt_sig(curve.std[i]),
            fmt_sig(curve.jhat_mean[i]),
            fmt_sig(curve.jhat_std[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final-window statistics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub dir: PathBuf,
    /// Mean reward per cycle over cycles ending in the final window.
    pub final_cycle_reward: Option<f64>,
    pub final_cycles: usize,
    pub final_j_hat: f64,
    /// Exact gain of the final parameters, when the chain is unichain.
    pub exact_j: Option<f64>,
    /// Final-window cycle counts per route (delivery grid only).
    pub route_counts: BTreeMap<String, usize>,
    pub modal_route: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentSummary {
    pub agent: String,
    pub mode: Mode,
    pub seeds: Vec<SeedSummary>,
    pub failures: Vec<(u64, String)>,
    /// Mean over surviving seeds of the final-window reward per cycle.
    pub mean_final_cycle_reward: Option<f64>,
    /// Most frequent route over all final-window cycles of all seeds.
    pub modal_route: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub agents: Vec<AgentSummary>,
    pub aggregates: Vec<AggregateCurve>,
}

impl ExperimentResult {
    pub fn agent(&self, name: &str) -> Option<&AgentSummary> {
        self.agents.iter().find(|a| a.agent == name)
    }
}

fn modal(counts: &BTreeMap<String, usize>) -> Option<String> {
    counts
        .iter()
        .filter(|(_, n)| **n > 0)
        .max_by_key(|(_, n)| **n)
        .map(|(k, _)| k.clone())
}

fn summarize_seed(
    env: &Environment,
    hierarchy: &Hierarchy,
    record: &RunRecord,
    fraction: f64,
    dir: PathBuf,
) -> SeedSummary {
    let cutoff = (record.steps as f64 * (1.0 - fraction)) as u64;
    let tail: Vec<_> = record.cycles.iter().filter(|c| c.end_step >= cutoff).collect();
    let mut route_counts = BTreeMap::new();
    if let Some(grid) = &env.grid {
        for c in &tail {
            if let Some(r) = grid.route_of(c.end_state) {
                *route_counts.entry(format!("{r:?}")).or_insert(0) += 1;
            }
        }
    }
    SeedSummary {
        seed: record.seed,
        dir,
        final_cycle_reward: record.final_cycle_reward(fraction),
        final_cycles: tail.len(),
        final_j_hat: record.final_critic.j_hat,
        exact_j: evaluate(&env.mdp, hierarchy, &record.final_params).ok().map(|e| e.values.j),
        modal_route: modal(&route_counts),
        route_counts,
    }
}

/// Runs every (agent, seed) pair, concurrently, writes all artifacts and
/// aggregates each agent's curves from the per-seed CSVs.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    let env = config.environment.build()?;
    let hierarchy = config.build_hierarchy(&env.mdp)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f").to_string();
    let dir = out_root.join(&config.name).join(stamp);
    fs::create_dir_all(&dir)?;

    let seeds = config.seeds();
    let jobs: Vec<(usize, u64)> = (0..config.agents.len())
        .flat_map(|a| seeds.iter().map(move |s| (a, *s)))
        .collect();
    let outcomes: Vec<(usize, u64, Result<SeedSummary>)> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let agent = &config.agents[a];
            let mut cfg = config.learner_config(agent, seed);
            if cfg.start_state.is_none() {
                cfg.start_state = env.start_state;
            }
            let seed_dir = dir.join(agent.name()).join(format!("seed-{seed}"));
            let result = (|| {
                fs::create_dir_all(&seed_dir)?;
                let record = train(&env.mdp, &hierarchy, &cfg)?;
                write_curves(&record, &seed_dir.join("curves.csv"))?;
                write_cycles(&record, env.grid.as_ref(), &seed_dir.join("cycles.csv"))?;
                trace_report(&record, &[], &seed_dir.join("traces.csv"))?;
                fs::write(
                    seed_dir.join("final_params.json"),
                    serde_json::to_string_pretty(&final_params_json(&record))?,
                )?;
                Ok(summarize_seed(&env, &hierarchy, &record, config.final_fraction, seed_dir.clone()))
            })();
            (a, seed, result)
        })
        .collect();

    let mut agents = Vec::new();
    let mut aggregates = Vec::new();
    for (a, agent) in config.agents.iter().enumerate() {
        let mut summaries = Vec::new();
        let mut failures = Vec::new();
        for (_, seed, res) in outcomes.iter().filter(|(i, _, _)| *i == a) {
            match res {
                Ok(s) => summaries.push(s.clone()),
                Err(e) => failures.push((*seed, e.to_string())),
            }
        }
        if !failures.is_empty() {
            eprintln!(
                "warning: {} of {} {} runs failed; aggregating the rest",
                failures.len(),
                seeds.len(),
                agent.name()
            );
        }
        let agent_dir = dir.join(agent.name());
        let seed_dirs: Vec<PathBuf> = summaries.iter().map(|s| s.dir.clone()).collect();
        let curve = aggregate_from_csv(&agent.name(), &seed_dirs)?;
        write_aggregate(&curve, &agent_dir.join("aggregate.csv"))?;
        let finals: Vec<f64> = summaries.iter().filter_map(|s| s.final_cycle_reward).collect();
        let mut pooled = BTreeMap::new();
        for s in &summaries {
            for (k, n) in &s.route_counts {
                *pooled.entry(k.clone()).or_insert(0) += n;
            }
        }
        let summary = AgentSummary {
            agent: agent.name(),
            mode: agent.mode,
            mean_final_cycle_reward: if finals.is_empty() {
                None
            } else {
                Some(finals.iter().sum::<f64>() / finals.len() as f64)
            },
            modal_route: modal(&pooled),
            seeds: summaries,
            failures,
        };
        fs::write(agent_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        agents.push(summary);
        aggregates.push(curve);
    }

    let manifest = json!({
        "name": config.name,
        "version": version_string(),
        "created": chrono::Local::now().to_rfc3339(),
        "seeds": seeds,
        "config": config,
        "agents": agents.iter().map(|a| json!({
            "agent": a.agent,
            "completed": a.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
            "failed": a.failures,
        })).collect::<Vec<_>>(),
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentResult { dir, agents, aggregates })
}

/// Discounted values of the two committed trap-chain policies at one `γ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrapRow {
    pub gamma: f64,
    pub v_red: f64,
    pub v_blue: f64,
    pub v_red_closed_form: f64,
    pub v_blue_closed_form: f64,
    /// Discounted preference at the start state.
    pub chosen_at_start: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrapReport {
    pub rows: Vec<TrapRow>,
    pub gain_red: f64,
    pub gain_blue: f64,
}

impl TrapReport {
    pub fn max_closed_form_error(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [(r.v_red - r.v_red_closed_form).abs(), (r.v_blue - r.v_blue_closed_form).abs()])
            .fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>14} {:>14} {:>14} {:>14}  start\n",
            "gamma", "v_R(S11)", "closed form", "v_B(S21)", "closed form"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>14.10} {:>14.10} {:>14.10} {:>14.10}  {}\n",
                r.gamma, r.v_red, r.v_red_closed_form, r.v_blue, r.v_blue_closed_form, r.chosen_at_start
            ));
        }
        out.push_str(&format!(
            "gain per step: red {:.6}, blue {:.6}\n",
            self.gain_red, self.gain_blue
        ));
        out
    }
}

/// Discounted and average-reward comparison of the two committed trap-chain
/// policies over `gammas`.
pub fn trap_analyze(spec: &TrapChainSpec, gammas: &[f64]) -> Result<TrapReport> {
    let mdp = build_trap_chain_with(spec)?;
    let ns = mdp.n_states();
    let red = FlatPolicy::deterministic(&vec![TRAP_RED; ns], 2);
    let blue = FlatPolicy::deterministic(&vec![TRAP_BLUE; ns], 2);
    let mut rows = Vec::new();
    for &g in gammas {
        let vr = discounted_values(&mdp, &red, g)?;
        let vb = discounted_values(&mdp, &blue, g)?;
        let g4 = 1.0 - g.powi(4);
        let start_red = mdp.reward(TRAP_START, TRAP_RED) + g * vr[TrapChainSpec::red_state(0)];
        let start_blue = mdp.reward(TRAP_START, TRAP_BLUE) + g * vb[TrapChainSpec::blue_state(0)];
        rows.push(TrapRow {
            gamma: g,
            v_red: vr[TrapChainSpec::red_state(0)],
            v_blue: vb[TrapChainSpec::blue_state(0)],
            v_red_closed_form: g * (2.0 - g) / g4,
            v_blue_closed_form: 1.0 / g4,
            chosen_at_start: if start_blue > start_red { "blue" } else { "red" }.into(),
        });
    }
    Ok(TrapReport {
        rows,
        gain_red: flat_average_reward(&mdp, &red)?,
        gain_blue: flat_average_reward(&mdp, &blue)?,
    })
}

/// Exact-evaluation tables of `params` (zeros when absent) as JSON.
pub fn eval_report(config: &ExperimentConfig, params: Option<&Path>) -> Result<serde_json::Value> {
    let env = config.environment.build()?;
    let hierarchy = config.build_hierarchy(&env.mdp)?;
    let params = match params {
        Some(p) => load_params(p, &hierarchy)?,
        None => hierarchy.init_params(config.learner.bound),
    };
    let e = evaluate(&env.mdp, &hierarchy, &params)?;
    Ok(values_json(&env.mdp, &hierarchy, &e.values, &e.advantage))
}

/// A base experiment and lists of values for dotted config paths
/// (e.g. `"learner.schedule.a0": [0.01, 0.1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: BTreeMap<String, Vec<serde_json::Value>>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read sweep config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every combination of the grid applied to the base, named
    /// `<base>-<i>`.
    pub fn expand(&self) -> Result<Vec<(BTreeMap<String, serde_json::Value>, ExperimentConfig)>> {
        let keys: Vec<&String> = self.grid.keys().collect();
        let mut combos: Vec<Vec<&serde_json::Value>> = vec![Vec::new()];
        for k in &keys {
            let values = &self.grid[*k];
            if values.is_empty() {
                return Err(Error::Config(format!("sweep key {k} has no values")));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        let base = serde_json::to_value(&self.base)?;
        combos
            .into_iter()
            .enumerate()
            .map(|(i, combo)| {
                let mut doc = base.clone();
                let mut assignment = BTreeMap::new();
                for (k, v) in keys.iter().zip(combo) {
                    set_path(&mut doc, k, v.clone())?;
                    assignment.insert((*k).clone(), v.clone());
                }
                let mut cfg: ExperimentConfig = serde_json::from_value(doc)
                    .map_err(|e| Error::Config(format!("sweep point {i}: {e}")))?;
                cfg.name = format!("{}-{i}", self.base.name);
                cfg.validate()?;
                Ok((assignment, cfg))
            })
            .collect()
    }
}

fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("sweep path {path}: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("sweep path {path}: no field `{part}`")))?;
    }
    Ok(())
}
