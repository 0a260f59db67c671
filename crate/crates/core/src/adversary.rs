//! Attacker and unreliable-vehicle roles, and the additive Gaussian-noise
//! poisoning attack.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Attack only at `start_round`.
    SingleRound,
    /// Attack at every round from `start_round` on.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackPolicy {
    pub kind: AttackKind,
    pub start_round: u32,
    pub noise_mean: f64,
    /// Variance of the noise; the standard deviation is its square root.
    pub noise_var: f64,
}

impl AttackPolicy {
    pub fn continuous(noise_mean: f64, noise_var: f64) -> Self {
        Self {
            kind: AttackKind::Continuous,
            start_round: 10,
            noise_mean,
            noise_var,
        }
    }

    pub fn single_round(noise_mean: f64, noise_var: f64) -> Self {
        Self {
            kind: AttackKind::SingleRound,
            ..Self::continuous(noise_mean, noise_var)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::config("attack.noise_var", "variance must be finite and non-negative"));
        }
        if !self.noise_mean.is_finite() {
            return Err(Error::config("attack.noise_mean", "must be finite"));
        }
        if self.start_round < 1 {
            return Err(Error::config("attack.start_round", "rounds start at 1"));
        }
        Ok(())
    }
}

pub fn attack_active(policy: &AttackPolicy, round: u32) -> bool {
    match policy.kind {
        AttackKind::SingleRound => round == policy.start_round,
        AttackKind::Continuous => round >= policy.start_round,
    }
}

/// Copy of `values` with i.i.d. `N(mean, var)` noise added to every entry.
pub fn poison<R: Rng>(values: &[f64], policy: &AttackPolicy, rng: &mut R) -> Vec<f64> {
    if policy.noise_var == 0.0 {
        return values.iter().map(|v| v + policy.noise_mean).collect();
    }
    let noise = Normal::new(policy.noise_mean, policy.noise_var.sqrt()).expect("validated variance");
    values.iter().map(|v| v + noise.sample(rng)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    pub attackers: BTreeSet<VehicleId>,
    /// Unreliable vehicles and their packet drop probability.
    pub unreliable: BTreeMap<VehicleId, f64>,
}

impl RoleMap {
    pub fn is_attacker(&self, v: VehicleId) -> bool {
        self.attackers.contains(&v)
    }
}

/// `floor(attacker_fraction * n)` attackers and `floor(unreliable_fraction * n)`
/// unreliable vehicles, disjoint, drawn uniformly with `seed`.
pub fn assign_roles(
    vehicles: &[VehicleId],
    attacker_fraction: f64,
    unreliable_fraction: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<RoleMap> {
    for (field, f) in [
        ("attack.attacker_fraction", attacker_fraction),
        ("attack.unreliable_fraction", unreliable_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(field, "fraction must lie in [0, 1]"));
        }
    }
    if attacker_fraction + unreliable_fraction > 1.0 {
        return Err(Error::config(
            "attack.unreliable_fraction",
            "attacker and unreliable fractions sum to more than 1",
        ));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::config("attack.drop_prob", "must lie in [0, 1)"));
    }
    let n = vehicles.len() as f64;
    // Small epsilon so that e.g. 0.2 * 25 counts as 5, not 4.999...
    let n_attackers = (attacker_fraction * n + 1e-9).floor() as usize;
    let n_unreliable = (unreliable_fraction * n + 1e-9).floor() as usize;

    let mut pool = vehicles.to_vec();
    pool.sort_unstable();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let attackers = pool[..n_attackers].iter().copied().collect();
    let unreliable = pool[n_attackers..n_attackers + n_unreliable]
        .iter()
        .map(|&v| (v, drop_prob))
        .collect();
    Ok(RoleMap { attackers, unreliable })
}
