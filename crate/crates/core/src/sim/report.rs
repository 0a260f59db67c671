use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::experiment::SummaryRow;

pub const PROPOSED: &str = "cbhfl+proposed";
pub const BASELINES: [&str; 2] = ["no-clustering+proposed", "cosdefense"];

/// Grid cell key: noise mean, noise variance and ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub mean: f64,
    pub var: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Verdict {
    /// `cbhfl+proposed` converged no later than every baseline.
    Holds,
    /// These baselines converged strictly earlier.
    Violated(Vec<String>),
    /// An arm is missing from the cell.
    Incomparable(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellComparison {
    pub cell: Cell,
    /// Arms from fastest to slowest; unconverged last, ties by name.
    pub ordering: Vec<(String, Option<u32>)>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ArmStats {
    /// Mean converged round over cells where the arm converged.
    pub mean_converged: Option<f64>,
    pub converged: usize,
    pub unconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    pub cells: Vec<CellComparison>,
    pub violations: usize,
    pub incomparable: usize,
    pub arms: BTreeMap<String, ArmStats>,
}

fn rank(r: Option<u32>) -> u64 {
    r.map_or(u64::MAX, u64::from)
}

/// For every (mean, var, ε) cell, order the arms by converged round
/// (unconverged = +∞) and check that `cbhfl+proposed` is no slower than
/// each baseline. Unconverged runs are left out of the per-arm means and
/// counted separately.
pub fn compare_arms(summaries: &[SummaryRow]) -> TrendReport {
    let mut cells: Vec<(Cell, BTreeMap<String, Option<u32>>)> = Vec::new();
    for row in summaries {
        let cell = Cell {
            mean: row.mean,
            var: row.var,
            epsilon: row.epsilon,
        };
        let slot = match cells.iter().position(|(c, _)| *c == cell) {
            Some(i) => i,
            None => {
                cells.push((cell, BTreeMap::new()));
                cells.len() - 1
            }
        };
        cells[slot].1.insert(row.arm.clone(), row.converged_round);
    }

    let mut arms: BTreeMap<String, ArmStats> = BTreeMap::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for row in summaries {
        let stats = arms.entry(row.arm.clone()).or_default();
        match row.converged_round {
            Some(r) => {
                stats.converged += 1;
                *sums.entry(row.arm.clone()).or_default() += f64::from(r);
            }
            None => stats.unconverged += 1,
        }
    }
    for (arm, stats) in &mut arms {
        if stats.converged > 0 {
            stats.mean_converged = Some(sums[arm] / stats.converged as f64);
        }
    }

    let comparisons: Vec<CellComparison> = cells
        .into_iter()
        .map(|(cell, rounds)| {
            let mut ordering: Vec<(String, Option<u32>)> = rounds.iter().map(|(a, r)| (a.clone(), *r)).collect();
            ordering.sort_by(|a, b| rank(a.1).cmp(&rank(b.1)).then_with(|| a.0.cmp(&b.0)));
            let missing: Vec<String> = std::iter::once(PROPOSED)
                .chain(BASELINES)
                .filter(|a| !rounds.contains_key(*a))
                .map(String::from)
                .collect();
            let verdict = if !missing.is_empty() {
                Verdict::Incomparable(missing)
            } else {
                let ours = rank(rounds[PROPOSED]);
                let beaten: Vec<String> = BASELINES
                    .iter()
                    .filter(|b| rank(rounds[**b]) < ours)
                    .map(|b| b.to_string())
                    .collect();
                if beaten.is_empty() {
                    Verdict::Holds
                } else {
                    Verdict::Violated(beaten)
                }
            };
            CellComparison { cell, ordering, verdict }
        })
        .collect();

    TrendReport {
        violations: comparisons.iter().filter(|c| matches!(c.verdict, Verdict::Violated(_))).count(),
        incomparable: comparisons.iter().filter(|c| matches!(c.verdict, Verdict::Incomparable(_))).count(),
        cells: comparisons,
        arms,
    }
}

impl fmt::Display for TrendReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |r: Option<u32>| r.map_or_else(|| "inf".to_string(), |r| r.to_string());
        for c in &self.cells {
            let order: Vec<String> = c.ordering.iter().map(|(a, r)| format!("{a}={}", show(*r))).collect();
            let verdict = match &c.verdict {
                Verdict::Holds => "ok".to_string(),
                Verdict::Violated(b) => format!("VIOLATED by {}", b.join(", ")),
                Verdict::Incomparable(m) => format!("incomparable, missing {}", m.join(", ")),
            };
            writeln!(
                f,
                "mean {} var {} eps {}: {} [{verdict}]",
                c.cell.mean,
                c.cell.var,
                c.cell.epsilon,
                order.join(" < ")
            )?;
        }
        for (arm, s) in &self.arms {
            let mean = s.mean_converged.map_or_else(|| "-".to_string(), |m| format!("{m:.1}"));
            writeln!(f, "{arm}: mean converged round {mean} over {} cells, {} unconverged", s.converged, s.unconverged)?;
        }
        write!(f, "violations: {}, incomparable cells: {}", self.violations, self.incomparable)
    }
}
