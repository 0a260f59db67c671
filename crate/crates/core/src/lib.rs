//! Deterministic simulator of secure cluster-based hierarchical federated
//! learning (HFL) over a vehicular network.
//!
//! Vehicles drive on a closed two-lane ring, form one-hop clusters, and train
//! a small MLP on non-IID local data. Cluster heads (CHs) vet their members'
//! updates with reliability-scored client selection and cosine-similarity
//! anomaly detection; the core network (EPC) vets the cluster models the same
//! way before global aggregation.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`model`] | dataset, non-IID partitioning, MLP training, FedAvg, cosine similarity |
//! | [`mobility`] | arrivals, ring kinematics, disk neighbors, HELLO packets, lossy channel |
//! | [`clustering`] | suitability metric, greedy CH election, cluster maintenance |
//! | [`security`] | reliability records, client selection, block state machine, CH/EPC rounds |
//! | [`adversary`] | attacker/unreliable role assignment, Gaussian-noise poisoning |
//! | [`baselines`] | CosDefense filter and the flat (no-clustering) topology |
//! | [`sim`] | round orchestration, convergence detection, experiment grid, outputs |
// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod baselines;
pub mod clustering;
pub mod error;
pub mod mobility;
pub mod model;
pub mod rng;
pub mod security;
pub mod sim;

pub use error::{Error, Result};

/// Identifier of a vehicle. Ids are dense, assigned in arrival order.
pub type VehicleId = u32;
