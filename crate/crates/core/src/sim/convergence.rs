use serde::{Deserialize, Serialize};

/// First round whose trailing three-round accuracy window spans less than ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub epsilon: f64,
    /// 1-based round index, `None` if the series never settles.
    pub converged_round: Option<u32>,
}

impl ConvergenceResult {
    /// Round as written to CSV: the number, or `inf`.
    pub fn render(&self) -> String {
        self.converged_round.map_or_else(|| "inf".to_string(), |r| r.to_string())
    }
}

/// `accuracies[0]` is round 1. Converged at the smallest `r >= 3` with
/// `max - min` of rounds `r-2..=r` below `epsilon`.
pub fn detect_convergence(accuracies: &[f64], epsilon: f64) -> ConvergenceResult {
    let converged_round = accuracies
        .windows(3)
        .position(|w| {
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo < epsilon
        })
        .map(|i| i as u32 + 3);
    ConvergenceResult {
        epsilon,
        converged_round,
    }
}
