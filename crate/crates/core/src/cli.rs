//! Command-line front end. Every subcommand is also callable as a function.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregation::{cluster, isolate, Isolation, StackGrouping, StackSnapshot};
use crate::diagnosis::{dual_phase_replay, ReplayOutcome};
use crate::error::{ConfigError, Error, Result};
use crate::recovery::{default_was_scales, size_pool, was_table, RestartPolicy, WasTable};
use crate::report::{ettr_csv, render_was, SimReport};
use crate::scenario::{self, ScenarioConfig};
use crate::simkernel::run;
use crate::topology::{BackupPlan, MachineId, ParallelTopology};

/// Probability mass given to a catastrophic multi-machine eviction in WAS.
pub const CATASTROPHIC_WEIGHT: f64 = 0.01;

#[derive(Debug, Parser)]
#[command(name = "robustsim", version, about = "Fault-tolerance simulator for 3D-parallel training jobs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its report.
    Simulate(SimulateArgs),
    /// Locate a faulty machine with two replay rounds.
    ReplayLocate {
        /// Machines in the job.
        #[arg(long)]
        z: usize,
        /// Machines per horizontal group.
        #[arg(long)]
        m: usize,
        #[arg(long)]
        faulty: MachineId,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the checkpoint backup peer of every rank.
    PlanBackup {
        #[command(flatten)]
        topo: TopoArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warm standby pool size covering the eviction count quantile.
    SizeStandby {
        /// Machines in the job.
        #[arg(long)]
        n: u64,
        /// Per-machine failure probability over the provisioning window.
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 0.99)]
        q: f64,
    },
    /// Cluster a stack snapshot and print the machines to evict.
    AnalyzeStacks {
        /// Snapshot fixture (JSON).
        snapshot: PathBuf,
        #[command(flatten)]
        topo: TopoArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare restart policies: WAS per scale, plus one run per policy.
    Sweep(SweepArgs),
    /// Pretty-print a saved report.
    Report {
        report: PathBuf,
        /// Also write the ETTR series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List bundled scenarios, or dump one as JSON.
    Scenarios { name: Option<String> },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    pub config: String,
    /// Report destination (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the restart policy.
    #[arg(long)]
    pub policy: Option<RestartPolicy>,
    /// Writes the ETTR series as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: String,
    /// Policies to compare; repeat or comma-separate. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub policy: Vec<RestartPolicy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct TopoArgs {
    #[arg(long)]
    pub tp: usize,
    #[arg(long)]
    pub pp: usize,
    #[arg(long)]
    pub dp: usize,
    /// Defaults to one TP group per machine.
    #[arg(long)]
    pub ranks_per_machine: Option<usize>,
}

impl TopoArgs {
    pub fn topology(&self) -> Result<ParallelTopology> {
        Ok(ParallelTopology::new(
            self.tp,
            self.pp,
            self.dp,
            self.ranks_per_machine.unwrap_or(self.tp),
        )?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A bundled scenario name or a path to a scenario file.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig> {
    if scenario::BUNDLED.contains(&spec) {
        return Ok(scenario::bundled(spec)?);
    }
    ScenarioConfig::load(spec)
}

pub fn cmd_simulate(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<SimReport> {
    let report = run(cfg)?;
    if let Some(path) = out {
        write_file(path, &report.to_json())?;
        info!("report written to {}", path.display());
    }
    Ok(report)
}

pub fn cmd_replay_locate(z: usize, m: usize, faulty: MachineId) -> Result<ReplayOutcome> {
    Ok(dual_phase_replay(z, m, faulty)?)
}

pub fn cmd_plan_backup(topo: &ParallelTopology) -> Result<BackupPlan> {
    Ok(topo.backup_plan()?)
}

pub fn render_backup(topo: &ParallelTopology, plan: &BackupPlan) -> String {
    let mut out = format!("strategy {:?}\n rank  machine ->  peer  machine\n", plan.strategy);
    for r in 0..topo.rank_count() {
        let p = plan.peer_of(r);
        let _ = writeln!(
            out,
            "{:>5} {:>8} -> {:>5} {:>8}",
            r,
            r / topo.ranks_per_machine,
            p,
            p / topo.ranks_per_machine
        );
    }
    out
}

pub fn cmd_size_standby(n: u64, p: f64, q: f64) -> Result<u64> {
    let bad = |what: &str| Error::Usage(format!("{what} must lie in [0, 1]"));
    if !(0.0..=1.0).contains(&p) {
        return Err(bad("p"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(bad("q"));
    }
    Ok(size_pool(n, p, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackAnalysis {
    pub grouping: StackGrouping,
    pub isolation: Isolation,
}

pub fn cmd_analyze_stacks(snapshot: &Path, topo: &ParallelTopology) -> Result<StackAnalysis> {
    let snap: StackSnapshot = serde_json::from_str(&read_file(snapshot)?)?;
    let grouping = cluster(&snap).map_err(|e| Error::Usage(e.to_string()))?;
    let isolation = isolate(&grouping, topo).map_err(|e| Error::Usage(e.to_string()))?;
    Ok(StackAnalysis { grouping, isolation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: RestartPolicy,
    pub ettr: f64,
    pub wall_clock_s: f64,
    pub failover_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario: String,
    pub was: WasTable,
    pub runs: Vec<PolicyRun>,
}

/// WAS at the default scales, and the scenario simulated once per policy.
/// Runs execute on separate threads; results keep the policy order.
pub fn cmd_sweep(cfg: &ScenarioConfig, policies: &[RestartPolicy]) -> Result<SweepReport> {
    cfg.validate()?;
    let policies: Vec<RestartPolicy> = if policies.is_empty() {
        RestartPolicy::ALL.to_vec()
    } else {
        let mut seen = BTreeSet::new();
        policies.iter().copied().filter(|p| seen.insert(*p)).collect()
    };
    let r = &cfg.recovery;
    let was = was_table(
        &default_was_scales(r.fail_prob),
        &policies,
        r.quantile,
        CATASTROPHIC_WEIGHT,
        &r.restart,
    );
    let results: Vec<Result<SimReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&policy| {
                let mut c = cfg.clone();
                c.recovery.policy = policy;
                s.spawn(move || run(&c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut runs = Vec::new();
    for (policy, res) in policies.iter().zip(results) {
        let rep = res?;
        runs.push(PolicyRun {
            policy: *policy,
            ettr: rep.ettr,
            wall_clock_s: rep.wall_clock_s,
            failover_s: rep
                .time_by_class_s
                .get(&crate::simkernel::SegmentClass::Failover)
                .copied()
                .unwrap_or(0.0),
        });
    }
    Ok(SweepReport {
        scenario: cfg.name.clone(),
        was,
        runs,
    })
}

pub fn render_sweep(s: &SweepReport) -> String {
    let mut out = format!("WAS ({:.0}% catastrophic mass)\n", 100.0 * s.was.catastrophic_weight);
    out.push_str(&render_was(&s.was));
    let _ = writeln!(out, "\nscenario {}", s.scenario);
    let _ = writeln!(out, "{:>11} {:>8} {:>12} {:>11}", "policy", "ETTR", "wall (s)", "failover (s)");
    for r in &s.runs {
        let _ = writeln!(
            out,
            "{:>11} {:>8.4} {:>12.0} {:>11.1}",
            r.policy.to_string(),
            r.ettr,
            r.wall_clock_s,
            r.failover_s
        );
    }
    out
}

pub fn cmd_report(path: &Path) -> Result<SimReport> {
    Ok(SimReport::from_json(&read_file(path)?)?)
}

fn apply_overrides(cfg: &mut ScenarioConfig, seed: Option<u64>, policy: Option<RestartPolicy>) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(policy) = policy {
        cfg.recovery.policy = policy;
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

/// Runs a parsed command and returns what should go to stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg = load_scenario(&a.config)?;
            apply_overrides(&mut cfg, a.seed, a.policy);
            let report = cmd_simulate(&cfg, a.out.as_deref())?;
            if let Some(csv) = &a.csv {
                write_file(csv, &ettr_csv(&report))?;
            }
            Ok(report.render_text())
        }
        Command::ReplayLocate { z, m, faulty, out } => {
            let o = cmd_replay_locate(z, m, faulty)?;
            if let Some(path) = out {
                write_file(&path, &to_json(&o))?;
            }
            Ok(format!(
                "groups of {} x {}: horizontal {} vertical {}\nsuspects {:?}\n",
                o.plan.m, o.plan.n, o.horizontal, o.vertical, o.suspects
            ))
        }
        Command::PlanBackup { topo, out } => {
            let t = topo.topology()?;
            let plan = cmd_plan_backup(&t)?;
            if let Some(path) = out {
                write_file(&path, &to_json(&plan))?;
            }
            Ok(render_backup(&t, &plan))
        }
        Command::SizeStandby { n, p, q } => Ok(format!("{}\n", cmd_size_standby(n, p, q)?)),
        Command::AnalyzeStacks { snapshot, topo, out } => {
            let a = cmd_analyze_stacks(&snapshot, &topo.topology()?)?;
            if let Some(path) = out {
                write_file(&path, &to_json(&a))?;
            }
            let group = a.isolation.group.map_or_else(|| "none".to_string(), |g| g.to_string());
            Ok(format!(
                "outliers {:?}\ngroup {}\nevict {:?}\n",
                a.grouping.outliers, group, a.isolation.machines
            ))
        }
        Command::Sweep(a) => {
            let mut cfg = load_scenario(&a.config)?;
            apply_overrides(&mut cfg, a.seed, None);
            let s = cmd_sweep(&cfg, &a.policy)?;
            if let Some(path) = a.out {
                write_file(&path, &to_json(&s))?;
            }
            Ok(render_sweep(&s))
        }
        Command::Report { report, csv } => {
            let r = cmd_report(&report)?;
            if let Some(path) = csv {
                write_file(&path, &ettr_csv(&r))?;
            }
            Ok(r.render_text())
        }
        Command::Scenarios { name } => match name {
            None => Ok(scenario::BUNDLED.iter().map(|n| format!("{n}\n")).collect()),
            Some(n) => Ok(scenario::bundled(&n)?.to_json() + "\n"),
        },
    }
}

/// Process exit status for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(ConfigError::Invalid(_) | ConfigError::Parse(_) | ConfigError::UnknownBundled(_))
        | Error::Usage(_)
        | Error::Topology(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}
