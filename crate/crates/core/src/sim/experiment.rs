use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{AttackMode, DefenseArm, ExperimentConfig, TopologyArm};
use super::convergence::{detect_convergence, ConvergenceResult};
use super::engine::{DetectionStats, RoundMetrics, Simulation, Traces};
use crate::adversary::RoleMap;
use crate::rng::derive_seed;
use crate::{Error, Result};

pub const ROUNDS_HEADER: &str = "run,round,epc_accuracy,selected,accepted,flagged,blocked";
pub const SUMMARY_HEADER: &str = "arm,mean,var,epsilon,converged_round";

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub arm: String,
    pub mean: f64,
    pub var: f64,
    pub epsilon: f64,
    pub converged_round: Option<u32>,
}

impl SummaryRow {
    pub fn to_row(&self) -> String {
        let round = self.converged_round.map_or_else(|| "inf".to_string(), |r| r.to_string());
        format!("{},{},{},{},{}", self.arm, self.mean, self.var, self.epsilon, round)
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_err = |reason: String| Error::Parse { line: line_no, reason };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str, name: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{name}: {e}")));
        let converged_round = match fields[4] {
            "inf" => None,
            s => Some(s.parse::<u32>().map_err(|e| parse_err(format!("converged_round: {e}")))?),
        };
        Ok(Self {
            arm: fields[0].to_string(),
            mean: num(fields[1], "mean")?,
            var: num(fields[2], "var")?,
            epsilon: num(fields[3], "epsilon")?,
            converged_round,
        })
    }
}

/// Parse a `summary.csv` body (header optional).
pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && l.trim() != SUMMARY_HEADER)
        .map(|(i, l)| SummaryRow::parse(l, i + 1))
        .collect()
}

/// Everything a single run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub config: ExperimentConfig,
    pub metrics: Vec<RoundMetrics>,
    pub convergence: Vec<ConvergenceResult>,
    pub detection: DetectionStats,
    pub roles: RoleMap,
    pub traces: Traces,
}

impl RunResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.epc_accuracy).collect()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.epc_accuracy)
    }

    pub fn converged_round(&self, epsilon: f64) -> Option<u32> {
        self.convergence
            .iter()
            .find(|c| c.epsilon == epsilon)
            .map_or_else(|| detect_convergence(&self.accuracies(), epsilon).converged_round, |c| c.converged_round)
    }

    /// Rows for `rounds.csv`, without header.
    pub fn rounds_rows(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            writeln!(
                out,
                "{},{},{:.6},{},{},{},{}",
                self.name, m.round, m.epc_accuracy, m.selected, m.accepted, m.flagged, m.blocked
            )
            .expect("write to string");
        }
        out
    }

    /// One summary row per configured ε, labelled with the attack grid point.
    pub fn summary(&self, mean: f64, var: f64) -> Vec<SummaryRow> {
        self.convergence
            .iter()
            .map(|c| SummaryRow {
                arm: self.config.arm_label(),
                mean,
                var,
                epsilon: c.epsilon,
                converged_round: c.converged_round,
            })
            .collect()
    }

    fn own_summary(&self) -> Vec<SummaryRow> {
        self.summary(self.config.attack.noise_mean, self.config.attack.noise_var)
    }

    /// Resolved config, role map and derived seeds.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "arm": self.config.arm_label(),
            "config": self.config,
            "roles": self.roles,
            "seeds": seeds(self.config.seed),
        })
    }
}

fn seeds(master: u64) -> BTreeMap<&'static str, u64> {
    ["dataset", "partition", "init", "roles"]
        .into_iter()
        .map(|label| (label, derive_seed(master, label, &[])))
        .chain(std::iter::once(("master", master)))
        .collect()
}

/// Run `config.max_rounds` rounds and detect convergence for every ε.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    run_named(config.name.clone(), config)
}

fn run_named(name: String, config: &ExperimentConfig) -> Result<RunResult> {
    let mut sim = Simulation::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.max_rounds as usize);
    for _ in 0..config.max_rounds {
        metrics.push(sim.run_round()?);
    }
    let accuracies: Vec<f64> = metrics.iter().map(|m| m.epc_accuracy).collect();
    let convergence = config.epsilons.iter().map(|&e| detect_convergence(&accuracies, e)).collect();
    Ok(RunResult {
        name,
        config: config.clone(),
        metrics,
        convergence,
        detection: sim.detection().clone(),
        roles: sim.roles().clone(),
        traces: sim.traces().clone(),
    })
}

fn write_traces(dir: &Path, runs: &[&RunResult]) -> Result<()> {
    let mut mobility = String::from("run,round,vehicle,lane,position,speed\n");
    let mut clusters = String::from("run,round,vehicle,role,head\n");
    let mut security = String::from("run,round,evaluator,vehicle,event,value\n");
    for run in runs {
        for (out, body) in [
            (&mut mobility, &run.traces.mobility),
            (&mut clusters, &run.traces.clusters),
            (&mut security, &run.traces.security),
        ] {
            for line in body.lines() {
                writeln!(out, "{},{line}", run.name).expect("write to string");
            }
        }
    }
    fs::write(dir.join("mobility.csv"), mobility)?;
    fs::write(dir.join("clusters.csv"), clusters)?;
    fs::write(dir.join("security.csv"), security)?;
    Ok(())
}

/// Write `rounds.csv`, `summary.csv`, `manifest.json` and, with `traces`,
/// the mobility, cluster and security logs.
pub fn write_run(result: &RunResult, dir: &Path, traces: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("rounds.csv"), format!("{ROUNDS_HEADER}\n{}", result.rounds_rows()))?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for row in result.own_summary() {
        summary.push_str(&row.to_row());
        summary.push('\n');
    }
    fs::write(dir.join("summary.csv"), summary)?;
    let manifest = serde_json::to_string_pretty(&result.manifest()).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    if traces {
        write_traces(dir, &[result])?;
    }
    Ok(())
}

/// Attack grid. Each cell runs the four comparison arms.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            means: vec![0.0, 1.0, 2.0],
            vars: vec![0.1, 0.2, 0.3],
        }
    }
}

/// The four compared arms, in output order.
pub const ARMS: [&str; 4] = ["cbhfl-no-attack", "cbhfl+proposed", "no-clustering+proposed", "cosdefense"];

/// Config for `arm` at one grid point, derived from `base`. The attack kind
/// comes from `base` (continuous if `base` has none).
pub fn arm_config(base: &ExperimentConfig, arm: &str, mean: f64, var: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.attack.noise_mean = mean;
    c.attack.noise_var = var;
    if c.attack.mode == AttackMode::None {
        c.attack.mode = AttackMode::Continuous;
    }
    let (topology, defense) = match arm {
        "cbhfl-no-attack" => {
            c.attack.mode = AttackMode::None;
            (TopologyArm::Cbhfl, DefenseArm::None)
        }
        "cbhfl+proposed" => (TopologyArm::Cbhfl, DefenseArm::Proposed),
        "cbhfl+none" => (TopologyArm::Cbhfl, DefenseArm::None),
        "no-clustering+proposed" => (TopologyArm::NoClustering, DefenseArm::Proposed),
        "no-clustering+none" => (TopologyArm::NoClustering, DefenseArm::None),
        "cosdefense" => (TopologyArm::NoClustering, DefenseArm::CosDefense),
        other => return Err(Error::config("arm", format!("unknown arm `{other}`"))),
    };
    c.topology.arm = topology;
    c.defense.arm = defense;
    c.name = format!("{arm}/m{mean}/v{var}");
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

/// Run every arm at every grid point. Cells run in parallel; output order
/// (and content) does not depend on scheduling. The no-attack arm does not
/// depend on the grid point, so it runs once and is reported in every cell.
pub fn run_grid(base: &ExperimentConfig, spec: &GridSpec) -> Result<GridResult> {
    let baseline = arm_config(base, ARMS[0], 0.0, 0.0)?;
    let mut jobs = vec![(baseline.name.clone(), baseline)];
    let mut cells = Vec::new();
    for &mean in &spec.means {
        for &var in &spec.vars {
            cells.push((mean, var));
            for arm in &ARMS[1..] {
                let c = arm_config(base, arm, mean, var)?;
                jobs.push((c.name.clone(), c));
            }
        }
    }
    let runs: Vec<RunResult> = jobs
        .into_par_iter()
        .map(|(name, c)| run_named(name, &c))
        .collect::<Result<_>>()?;

    let mut summary = Vec::new();
    for (k, &(mean, var)) in cells.iter().enumerate() {
        let mut rows: Vec<SummaryRow> = runs[0].summary(mean, var);
        for run in &runs[1 + 3 * k..4 + 3 * k] {
            rows.extend(run.summary(mean, var));
        }
        // ε-major within a cell, matching the table layout
        rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        summary.extend(rows);
    }
    Ok(GridResult { runs, summary })
}

pub fn write_grid(grid: &GridResult, dir: &Path, traces: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rounds = format!("{ROUNDS_HEADER}\n");
    for run in &grid.runs {
        rounds.push_str(&run.rounds_rows());
    }
    fs::write(dir.join("rounds.csv"), rounds)?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for row in &grid.summary {
        summary.push_str(&row.to_row());
        summary.push('\n');
    }
    fs::write(dir.join("summary.csv"), summary)?;
    let manifest: Vec<serde_json::Value> = grid.runs.iter().map(RunResult::manifest).collect();
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    if traces {
        write_traces(dir, &grid.runs.iter().collect::<Vec<_>>())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_rows_round_trip() {
        let rows = vec![
            SummaryRow { arm: "cbhfl+proposed".into(), mean: 2.0, var: 0.3, epsilon: 0.1, converged_round: Some(17) },
            SummaryRow { arm: "cosdefense".into(), mean: 2.0, var: 0.3, epsilon: 0.01, converged_round: None },
        ];
        let text: String = std::iter::once(SUMMARY_HEADER.to_string())
            .chain(rows.iter().map(SummaryRow::to_row))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(text.contains("cosdefense,2,0.3,0.01,inf"));
        assert_eq!(parse_summary(&text).unwrap(), rows);
    }

    #[test]
    fn malformed_summary_names_the_line() {
        let err = parse_summary("arm,mean,var,epsilon,converged_round\ncbhfl,1,0.1,0.1,soon").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_summary("a,b").is_err());
    }

    #[test]
    fn arm_configs() {
        let base = ExperimentConfig::default();
        let c = arm_config(&base, "cosdefense", 1.0, 0.2).unwrap();
        assert_eq!(c.topology.arm, TopologyArm::NoClustering);
        assert_eq!(c.attack.mode, AttackMode::Continuous);
        assert_eq!((c.attack.noise_mean, c.attack.noise_var), (1.0, 0.2));
        assert_eq!(c.arm_label(), "cosdefense");
        for arm in ARMS {
            assert_eq!(arm_config(&base, arm, 0.0, 0.1).unwrap().arm_label(), arm);
        }
        assert!(arm_config(&base, "krum", 0.0, 0.1).is_err());
    }
}
