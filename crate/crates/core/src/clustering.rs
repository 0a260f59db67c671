//! One-hop clustering with greedy cluster-head election.
//!
//! Each vehicle's suitability mixes how closely its speed matches its
//! neighbors' with how stable the local models around it are. The best
//! unassigned vehicle becomes a cluster head (CH) and absorbs its unassigned
//! neighbors as cluster members (CMs). Maintenance keeps every CH and every
//! CM link that is still in range, and only re-clusters the vehicles that
//! lost their CH.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::mobility::{Adjacency, HelloPacket, MAX_SPEED, MIN_SPEED};
use crate::{Error, Result, VehicleId};

/// Normalizer for relative speed: the spread of admissible speeds.
pub const SPEED_SPREAD: f64 = MAX_SPEED - MIN_SPEED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterRole {
    Head,
    Member { head: VehicleId },
    /// Not in any cluster; talks to the EPC directly.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityScore {
    pub vehicle: VehicleId,
    pub speed_term: f64,
    pub similarity_term: f64,
    pub combined: f64,
}

impl SuitabilityScore {
    pub fn new(vehicle: VehicleId, speed_term: f64, similarity_term: f64, alpha: f64) -> Self {
        Self {
            vehicle,
            speed_term,
            similarity_term,
            combined: alpha * speed_term + (1.0 - alpha) * similarity_term,
        }
    }
}

/// Score a vehicle from its own HELLO packet and those of its neighbors.
///
/// `speed_term = 1 - mean|Δspeed| / 25`. Pairwise model similarity between a
/// vehicle and a neighbor is approximated by the mean of their two HELLO
/// model-similarity summaries; `similarity_term` averages that over neighbors.
/// An isolated vehicle scores `speed_term = 1`, `similarity_term = 0`.
pub fn suitability(own: &HelloPacket, neighbors: &[&HelloPacket], alpha: f64) -> SuitabilityScore {
    if neighbors.is_empty() {
        return SuitabilityScore::new(own.sender, 1.0, 0.0, alpha);
    }
    let n = neighbors.len() as f64;
    let rel_speed = neighbors.iter().map(|h| (own.velocity - h.velocity).abs()).sum::<f64>() / n;
    let speed_term = (1.0 - rel_speed / SPEED_SPREAD).clamp(0.0, 1.0);
    let similarity_term = neighbors
        .iter()
        .map(|h| 0.5 * (own.model_similarity + h.model_similarity))
        .sum::<f64>()
        / n;
    SuitabilityScore::new(own.sender, speed_term, similarity_term.clamp(-1.0, 1.0), alpha)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    roles: BTreeMap<VehicleId, ClusterRole>,
    members: BTreeMap<VehicleId, BTreeSet<VehicleId>>,
}

impl ClusterAssignment {
    /// Every vehicle `Free`, i.e. a direct client of the EPC.
    pub fn all_free(vehicles: impl IntoIterator<Item = VehicleId>) -> Self {
        Self {
            roles: vehicles.into_iter().map(|v| (v, ClusterRole::Free)).collect(),
            members: BTreeMap::new(),
        }
    }

    pub fn role(&self, vehicle: VehicleId) -> Option<ClusterRole> {
        self.roles.get(&vehicle).copied()
    }

    pub fn roles(&self) -> &BTreeMap<VehicleId, ClusterRole> {
        &self.roles
    }

    pub fn heads(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.members.keys().copied()
    }

    pub fn members_of(&self, head: VehicleId) -> Option<&BTreeSet<VehicleId>> {
        self.members.get(&head)
    }

    pub fn clusters(&self) -> &BTreeMap<VehicleId, BTreeSet<VehicleId>> {
        &self.members
    }

    pub fn free(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.roles
            .iter()
            .filter(|(_, r)| matches!(r, ClusterRole::Free))
            .map(|(v, _)| *v)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// CH id the vehicle reports to; a CH reports to itself.
    pub fn connector(&self, vehicle: VehicleId) -> Option<VehicleId> {
        match self.roles.get(&vehicle)? {
            ClusterRole::Head => Some(vehicle),
            ClusterRole::Member { head } => Some(*head),
            ClusterRole::Free => None,
        }
    }

    fn make_head(&mut self, v: VehicleId) {
        self.roles.insert(v, ClusterRole::Head);
        self.members.entry(v).or_default();
    }

    fn attach(&mut self, v: VehicleId, head: VehicleId) {
        self.roles.insert(v, ClusterRole::Member { head });
        self.members.entry(head).or_default().insert(v);
    }

    /// Check the one-hop invariant and that roles and member sets agree.
    pub fn validate(&self, adjacency: &Adjacency) -> Result<()> {
        for (&v, role) in &self.roles {
            match role {
                ClusterRole::Head => {
                    if !self.members.contains_key(&v) {
                        return Err(Error::Contract(format!("CH {v} has no member set")));
                    }
                }
                ClusterRole::Member { head } => {
                    if self.roles.get(head) != Some(&ClusterRole::Head) {
                        return Err(Error::Contract(format!("CM {v} points at non-CH {head}")));
                    }
                    if !self.members[head].contains(&v) {
                        return Err(Error::Contract(format!("CM {v} missing from CH {head}")));
                    }
                    if !adjacency.get(&v).is_some_and(|n| n.contains(head)) {
                        return Err(Error::Contract(format!("CM {v} is not one hop from CH {head}")));
                    }
                }
                ClusterRole::Free => {}
            }
        }
        for (head, members) in &self.members {
            if self.roles.get(head) != Some(&ClusterRole::Head) {
                return Err(Error::Contract(format!("member set for non-CH {head}")));
            }
            for m in members {
                if self.roles.get(m) != Some(&ClusterRole::Member { head: *head }) {
                    return Err(Error::Contract(format!("{m} listed under CH {head} but not its CM")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub round: u32,
    pub vehicle: VehicleId,
    /// `None` when the vehicle just arrived.
    pub from: Option<ClusterRole>,
    /// `None` when the vehicle left.
    pub to: Option<ClusterRole>,
}

fn score_of(scores: &BTreeMap<VehicleId, f64>, v: VehicleId) -> f64 {
    scores.get(&v).copied().unwrap_or(f64::NEG_INFINITY)
}

/// Higher score first, then lower id.
fn by_score(scores: &BTreeMap<VehicleId, f64>) -> impl Fn(&VehicleId, &VehicleId) -> Ordering + '_ {
    move |a, b| {
        score_of(scores, *b)
            .partial_cmp(&score_of(scores, *a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    }
}

fn elect(
    assignment: &mut ClusterAssignment,
    mut unassigned: BTreeSet<VehicleId>,
    adjacency: &Adjacency,
    scores: &BTreeMap<VehicleId, f64>,
) {
    let mut order: Vec<VehicleId> = unassigned.iter().copied().collect();
    order.sort_by(by_score(scores));
    for head in order {
        if !unassigned.remove(&head) {
            continue;
        }
        assignment.make_head(head);
        if let Some(ns) = adjacency.get(&head) {
            for &n in ns {
                if unassigned.remove(&n) {
                    assignment.attach(n, head);
                }
            }
        }
    }
}

/// Greedy election from scratch over every vehicle in `adjacency`.
pub fn form_clusters(adjacency: &Adjacency, scores: &BTreeMap<VehicleId, f64>) -> ClusterAssignment {
    let mut assignment = ClusterAssignment::default();
    elect(&mut assignment, adjacency.keys().copied().collect(), adjacency, scores);
    assignment
}

/// Update last round's clusters for the current topology.
///
/// Existing CHs stay CHs; CMs still in range of their CH stay put. A CM that
/// lost its CH (and any newly arrived vehicle) joins the best-scoring CH in
/// range, or else takes part in a greedy election among the remaining free
/// vehicles. Every role change is reported as a [`ChurnEvent`].
pub fn maintain_clusters(
    previous: &ClusterAssignment,
    adjacency: &Adjacency,
    scores: &BTreeMap<VehicleId, f64>,
    round: u32,
) -> (ClusterAssignment, Vec<ChurnEvent>) {
    let mut next = ClusterAssignment::default();
    let present = |v: &VehicleId| adjacency.contains_key(v);

    for head in previous.heads().filter(present) {
        next.make_head(head);
    }
    let mut free = BTreeSet::new();
    for &v in adjacency.keys() {
        match previous.role(v) {
            Some(ClusterRole::Head) => {}
            Some(ClusterRole::Member { head })
                if next.role(head) == Some(ClusterRole::Head) && adjacency[&v].contains(&head) =>
            {
                next.attach(v, head);
            }
            _ => {
                free.insert(v);
            }
        }
    }

    let heads: Vec<VehicleId> = next.heads().collect();
    for v in free.clone() {
        let best = heads
            .iter()
            .copied()
            .filter(|h| adjacency[&v].contains(h))
            .min_by(by_score(scores));
        if let Some(head) = best {
            next.attach(v, head);
            free.remove(&v);
        }
    }
    elect(&mut next, free, adjacency, scores);

    let mut events = Vec::new();
    for &v in adjacency.keys() {
        let (from, to) = (previous.role(v), next.role(v));
        if from != to {
            events.push(ChurnEvent { round, vehicle: v, from, to });
        }
    }
    for (&v, &role) in previous.roles() {
        if !present(&v) {
            events.push(ChurnEvent { round, vehicle: v, from: Some(role), to: None });
        }
    }
    (next, events)
}
