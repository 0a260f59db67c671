//! Comparison arms: the CosDefense filter and the flat topology where every
//! vehicle is a direct client of the EPC.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::model::{cosine_similarity, ParamVector};
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosDefenseConfig {
    /// Clients scoring above `mean + deviation_multiplier * std` are excluded.
    pub deviation_multiplier: f64,
}

impl Default for CosDefenseConfig {
    fn default() -> Self {
        Self {
            deviation_multiplier: 1.0,
        }
    }
}

impl CosDefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.deviation_multiplier >= 0.0 && self.deviation_multiplier.is_finite()) {
            return Err(Error::config("defense.deviation_multiplier", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterResult {
    pub kept: Vec<VehicleId>,
    pub excluded: Vec<VehicleId>,
    /// Last-layer cosine score per client.
    pub scores: BTreeMap<VehicleId, f64>,
}

/// Score each update by the cosine similarity of its last-layer slice with
/// the global model's last layer, and exclude clients scoring more than
/// `deviation_multiplier` population standard deviations above the mean.
///
/// Fewer than two updates leave the filter inert. A zero last-layer slice
/// scores 0.
pub fn cosdefense_filter(
    global: &ParamVector,
    updates: &BTreeMap<VehicleId, Vec<f64>>,
    config: &CosDefenseConfig,
) -> FilterResult {
    let range = global.last_layer_range();
    let reference = &global.values[range.clone()];
    let scores: BTreeMap<VehicleId, f64> = updates
        .iter()
        .map(|(&c, u)| (c, cosine_similarity(reference, &u[range.clone()]).unwrap_or(0.0)))
        .collect();
    if scores.len() < 2 {
        log::debug!("cosdefense: {} update(s), filter inert", scores.len());
        return FilterResult {
            kept: scores.keys().copied().collect(),
            excluded: Vec::new(),
            scores,
        };
    }
    let n = scores.len() as f64;
    let mean = scores.values().sum::<f64>() / n;
    let std = (scores.values().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mean + config.deviation_multiplier * std;
    let (excluded, kept): (Vec<VehicleId>, Vec<VehicleId>) =
        scores.keys().copied().partition(|c| std > 0.0 && scores[c] > threshold);
    FilterResult { kept, excluded, scores }
}

/// Every vehicle becomes a direct client of the EPC; there are no cluster heads.
pub fn no_clustering_topology(vehicles: &BTreeSet<VehicleId>) -> ClusterAssignment {
    ClusterAssignment::all_free(vehicles.iter().copied())
}
