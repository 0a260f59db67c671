//! Vehicle arrivals, kinematics on a closed two-lane ring, disk-range
//! neighbor discovery, HELLO packets and a lossy channel.
//!
//! Lane 0 drives in the direction of increasing position, lane 1 the other
//! way. Positions are meters along the ring; both lanes share the coordinate.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterRole;
use crate::{Error, Result, VehicleId};

pub const MIN_SPEED: f64 = 10.0;
pub const MAX_SPEED: f64 = 35.0;

pub type Adjacency = BTreeMap<VehicleId, BTreeSet<VehicleId>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track {
    /// Ring circumference in meters.
    pub length: f64,
    pub lanes: u8,
}

impl Default for Track {
    fn default() -> Self {
        Self {
            length: 4000.0,
            lanes: 2,
        }
    }
}

impl Track {
    /// Shortest distance along the ring.
    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(self.length);
        d.min(self.length - d)
    }

    pub fn wrap(&self, position: f64) -> f64 {
        let p = position.rem_euclid(self.length);
        // rem_euclid can round up to `length` for tiny negative inputs
        if p >= self.length {
            0.0
        } else {
            p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub position: f64,
    pub lane: u8,
    pub speed: f64,
    pub arrival_round: u32,
    pub attacker: bool,
    pub unreliable: bool,
}

impl VehicleState {
    pub fn heading(&self) -> Heading {
        if self.lane.is_multiple_of(2) {
            Heading::Forward
        } else {
            Heading::Backward
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arrivals {
    pub vehicles: Vec<VehicleState>,
    /// Arrivals discarded because the population cap was reached.
    pub truncated: usize,
}

/// Poisson(`rate`) new vehicles, truncated so the population never exceeds
/// `cap`. New ids start at `next_id`. Speeds are uniform in `[10, 35]` m/s,
/// lane and position uniform.
pub fn spawn_arrivals<R: Rng>(
    rate: f64,
    round: u32,
    cap: usize,
    present: usize,
    next_id: VehicleId,
    track: &Track,
    rng: &mut R,
) -> Arrivals {
    let drawn = if rate > 0.0 {
        Poisson::new(rate).map_or(0, |p| p.sample(rng) as usize)
    } else {
        0
    };
    let room = cap.saturating_sub(present);
    let admitted = drawn.min(room);
    let truncated = drawn - admitted;
    if truncated > 0 {
        log::debug!("round {round}: population cap {cap} reached, dropped {truncated} arrivals");
    }
    let vehicles = (0..admitted)
        .map(|k| VehicleState {
            id: next_id + k as VehicleId,
            position: rng.random_range(0.0..track.length),
            lane: rng.random_range(0..track.lanes.max(1)),
            speed: rng.random_range(MIN_SPEED..=MAX_SPEED),
            arrival_round: round,
            attacker: false,
            unreliable: false,
        })
        .collect();
    Arrivals {
        vehicles,
        truncated,
    }
}

/// Advance every vehicle by `speed * dt` along its heading, then perturb its
/// speed with Gaussian jitter (clipped to 3 std) and clip to `[10, 35]`.
pub fn step_mobility<R: Rng>(
    states: &mut [VehicleState],
    dt: f64,
    jitter_std: f64,
    track: &Track,
    rng: &mut R,
) {
    let jitter = (jitter_std > 0.0).then(|| Normal::new(0.0, jitter_std).expect("finite std"));
    for v in states.iter_mut() {
        let step = v.speed * dt;
        let moved = match v.heading() {
            Heading::Forward => v.position + step,
            Heading::Backward => v.position - step,
        };
        v.position = track.wrap(moved);
        if let Some(j) = &jitter {
            let dv = j.sample(rng).clamp(-3.0 * jitter_std, 3.0 * jitter_std);
            v.speed = (v.speed + dv).clamp(MIN_SPEED, MAX_SPEED);
        }
    }
}

/// Remove each vehicle independently with probability `prob`; returns the
/// ids that left. Unused by the default scenario.
pub fn depart<R: Rng>(states: &mut Vec<VehicleState>, prob: f64, rng: &mut R) -> Vec<VehicleId> {
    if prob <= 0.0 {
        return Vec::new();
    }
    let mut gone = Vec::new();
    states.retain(|v| {
        let leave = rng.random::<f64>() < prob;
        if leave {
            gone.push(v.id);
        }
        !leave
    });
    gone
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Disk communication range in meters.
    pub comm_range: f64,
    /// Per-sender drop probability; absent vehicles are reliable.
    pub drop_prob: BTreeMap<VehicleId, f64>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            comm_range: 100.0,
            drop_prob: BTreeMap::new(),
        }
    }
}

impl ChannelModel {
    pub fn new(comm_range: f64) -> Result<Self> {
        if !(comm_range > 0.0) {
            return Err(Error::config("comm_range", "must be positive"));
        }
        Ok(Self {
            comm_range,
            drop_prob: BTreeMap::new(),
        })
    }

    pub fn drop_probability(&self, sender: VehicleId) -> f64 {
        self.drop_prob.get(&sender).copied().unwrap_or(0.0)
    }
}

/// Symmetric, irreflexive neighbor sets: ring distance `<= comm_range`.
pub fn neighbors(states: &[VehicleState], channel: &ChannelModel, track: &Track) -> Adjacency {
    let mut adj: Adjacency = states.iter().map(|v| (v.id, BTreeSet::new())).collect();
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            if a.id != b.id && track.distance(a.position, b.position) <= channel.comm_range {
                adj.get_mut(&a.id).expect("present").insert(b.id);
                adj.get_mut(&b.id).expect("present").insert(a.id);
            }
        }
    }
    adj
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Vehicle(VehicleId),
    Epc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery<M> {
    Delivered(M),
    Dropped,
}

impl<M> Delivery<M> {
    pub fn delivered(self) -> Option<M> {
        match self {
            Delivery::Delivered(m) => Some(m),
            Delivery::Dropped => None,
        }
    }
}

/// Send `message` from `sender` to `receiver`. The message is lost with the
/// sender's drop probability, one independent draw per call. Vehicle-to-vehicle
/// sends require the two to be neighbors.
pub fn transmit<M, R: Rng>(
    message: M,
    sender: VehicleId,
    receiver: Endpoint,
    channel: &ChannelModel,
    adjacency: &Adjacency,
    rng: &mut R,
) -> Result<Delivery<M>> {
    if let Endpoint::Vehicle(to) = receiver {
        if to == sender {
            return Err(Error::Contract(format!("vehicle {sender} cannot transmit to itself")));
        }
        let linked = adjacency.get(&sender).is_some_and(|n| n.contains(&to));
        if !linked {
            return Err(Error::Contract(format!(
                "vehicles {sender} and {to} are not neighbors"
            )));
        }
    }
    let p = channel.drop_probability(sender);
    if rng.random::<f64>() < p {
        Ok(Delivery::Dropped)
    } else {
        Ok(Delivery::Delivered(message))
    }
}

/// Beacon each vehicle broadcasts to its neighbors every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloPacket {
    pub sender: VehicleId,
    pub direction: Heading,
    pub location: f64,
    pub lane: u8,
    pub velocity: f64,
    pub clustering_state: ClusterRole,
    /// Vehicle connecting the sender to its cluster (its CH, or itself when CH).
    pub connector: Option<VehicleId>,
    /// Cosine similarity of the sender's current vs. previous local parameters.
    pub model_similarity: f64,
    /// Mean |speed difference| to current neighbors, m/s.
    pub avg_rel_speed: f64,
}

/// Mean absolute speed difference between `vehicle` and its neighbors (0 when isolated).
pub fn avg_relative_speed(
    vehicle: &VehicleState,
    neighbor_ids: &BTreeSet<VehicleId>,
    states: &BTreeMap<VehicleId, &VehicleState>,
) -> f64 {
    let diffs: Vec<f64> = neighbor_ids
        .iter()
        .filter_map(|n| states.get(n))
        .map(|n| (vehicle.speed - n.speed).abs())
        .collect();
    if diffs.is_empty() {
        0.0
    } else {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }
}

pub fn hello_packet(
    vehicle: &VehicleState,
    neighbor_ids: &BTreeSet<VehicleId>,
    states: &BTreeMap<VehicleId, &VehicleState>,
    clustering_state: ClusterRole,
    connector: Option<VehicleId>,
    model_similarity: f64,
) -> HelloPacket {
    HelloPacket {
        sender: vehicle.id,
        direction: vehicle.heading(),
        location: vehicle.position,
        lane: vehicle.lane,
        velocity: vehicle.speed,
        clustering_state,
        connector,
        model_similarity,
        avg_rel_speed: avg_relative_speed(vehicle, neighbor_ids, states),
    }
}

/// One `round,vehicle,lane,position,speed` line per vehicle.
pub fn trace_rows(round: u32, states: &[VehicleState]) -> String {
    states
        .iter()
        .map(|v| format!("{round},{},{},{:.3},{:.3}\n", v.id, v.lane, v.position, v.speed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn vehicle(id: VehicleId, position: f64, speed: f64) -> VehicleState {
        VehicleState {
            id,
            position,
            lane: 0,
            speed,
            arrival_round: 0,
            attacker: false,
            unreliable: false,
        }
    }

    #[test]
    fn zero_rate_spawns_nothing() {
        let mut rng = stream(1, "t", &[]);
        let a = spawn_arrivals(0.0, 1, 25, 0, 0, &Track::default(), &mut rng);
        assert!(a.vehicles.is_empty());
        assert_eq!(a.truncated, 0);
    }

    #[test]
    fn cap_truncates_arrivals() {
        let mut rng = stream(1, "t", &[]);
        let mut truncated = 0;
        for round in 0..20 {
            let a = spawn_arrivals(5.0, round, 25, 25, 25, &Track::default(), &mut rng);
            assert!(a.vehicles.is_empty());
            truncated += a.truncated;
        }
        assert!(truncated > 0);
    }

    #[test]
    fn arrivals_follow_the_rate() {
        let mut rng = stream(3, "arrivals", &[]);
        let track = Track::default();
        let total: usize = (0..1000)
            .map(|r| spawn_arrivals(3.0, r, usize::MAX, 0, 0, &track, &mut rng).vehicles.len())
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((2.7..=3.3).contains(&mean), "mean arrivals {mean}");
    }

    #[test]
    fn spawned_vehicles_are_in_bounds() {
        let mut rng = stream(5, "t", &[]);
        let track = Track::default();
        let a = spawn_arrivals(50.0, 4, 1000, 0, 10, &track, &mut rng);
        for (k, v) in a.vehicles.iter().enumerate() {
            assert_eq!(v.id, 10 + k as VehicleId);
            assert_eq!(v.arrival_round, 4);
            assert!((MIN_SPEED..=MAX_SPEED).contains(&v.speed));
            assert!((0.0..track.length).contains(&v.position));
            assert!(v.lane < 2);
        }
    }

    #[test]
    fn linear_motion_without_jitter() {
        let track = Track::default();
        let mut rng = stream(0, "t", &[]);
        let mut states = vec![vehicle(0, 100.0, 20.0)];
        step_mobility(&mut states, 1.0, 0.0, &track, &mut rng);
        assert_eq!(states[0].position, 120.0);
        assert_eq!(states[0].speed, 20.0);

        states[0].position = 3990.0;
        step_mobility(&mut states, 1.0, 0.0, &track, &mut rng);
        assert!((states[0].position - 10.0).abs() < 1e-9);

        let mut back = vec![VehicleState { lane: 1, ..vehicle(1, 5.0, 20.0) }];
        step_mobility(&mut back, 1.0, 0.0, &track, &mut rng);
        assert!((back[0].position - 3985.0).abs() < 1e-9);
    }

    #[test]
    fn jittered_speeds_stay_in_bounds() {
        let track = Track::default();
        let mut rng = stream(9, "mobility", &[]);
        let mut states: Vec<_> = (0..20).map(|i| vehicle(i, i as f64 * 150.0, if i % 2 == 0 { 10.0 } else { 35.0 })).collect();
        for _ in 0..100 {
            step_mobility(&mut states, 1.0, 2.0, &track, &mut rng);
            for v in &states {
                assert!((MIN_SPEED..=MAX_SPEED).contains(&v.speed));
                assert!((0.0..track.length).contains(&v.position));
            }
        }
    }

    #[test]
    fn neighbors_by_distance() {
        let track = Track::default();
        let ch = ChannelModel::default();
        let adj = neighbors(&[vehicle(0, 0.0, 20.0), vehicle(1, 50.0, 20.0), vehicle(2, 200.0, 20.0)], &ch, &track);
        assert!(adj[&0].contains(&1));
        assert!(!adj[&0].contains(&2));
        assert!(!adj[&1].contains(&2)); // 150 m apart
        // wrap-around
        let adj = neighbors(&[vehicle(0, 3970.0, 20.0), vehicle(1, 40.0, 20.0)], &ch, &track);
        assert!(adj[&0].contains(&1));
    }

    #[test]
    fn adjacency_symmetric_and_irreflexive() {
        let track = Track::default();
        let ch = ChannelModel::default();
        for seed in 0..20 {
            let mut rng = stream(seed, "placement", &[]);
            let states = spawn_arrivals(40.0, 0, 1000, 0, 0, &track, &mut rng).vehicles;
            let adj = neighbors(&states, &ch, &track);
            for (a, ns) in &adj {
                assert!(!ns.contains(a));
                for b in ns {
                    assert!(adj[b].contains(a));
                }
            }
        }
    }

    #[test]
    fn transmit_contracts() {
        let track = Track::default();
        let ch = ChannelModel::default();
        let adj = neighbors(&[vehicle(0, 0.0, 20.0), vehicle(1, 500.0, 20.0)], &ch, &track);
        let mut rng = stream(0, "t", &[]);
        assert!(matches!(transmit((), 0, Endpoint::Vehicle(0), &ch, &adj, &mut rng), Err(Error::Contract(_))));
        assert!(matches!(transmit((), 0, Endpoint::Vehicle(1), &ch, &adj, &mut rng), Err(Error::Contract(_))));
        // The EPC is always reachable.
        assert_eq!(transmit(7, 0, Endpoint::Epc, &ch, &adj, &mut rng).unwrap(), Delivery::Delivered(7));
    }

    #[test]
    fn reliable_sender_always_delivers() {
        let ch = ChannelModel::default();
        let adj = Adjacency::new();
        let mut rng = stream(0, "t", &[]);
        for _ in 0..1000 {
            assert!(matches!(transmit((), 3, Endpoint::Epc, &ch, &adj, &mut rng).unwrap(), Delivery::Delivered(())));
        }
    }

    #[test]
    fn empirical_drop_rate_matches() {
        let mut ch = ChannelModel::default();
        let p = 1.0 - 0.3;
        ch.drop_prob.insert(4, p);
        let adj = Adjacency::new();
        let mut rng = stream(11, "channel", &[]);
        let dropped = (0..10_000)
            .filter(|_| transmit((), 4, Endpoint::Epc, &ch, &adj, &mut rng).unwrap() == Delivery::Dropped)
            .count();
        let rate = dropped as f64 / 10_000.0;
        assert!((rate - p).abs() <= 0.02, "drop rate {rate}");
    }

    #[test]
    fn hello_reports_relative_speed() {
        let a = vehicle(0, 0.0, 20.0);
        let b = vehicle(1, 10.0, 26.0);
        let c = vehicle(2, 20.0, 18.0);
        let states: BTreeMap<_, _> = [(0, &a), (1, &b), (2, &c)].into_iter().collect();
        let hello = hello_packet(&a, &[1, 2].into_iter().collect(), &states, ClusterRole::Free, None, 0.9);
        assert_eq!(hello.avg_rel_speed, 4.0);
        assert_eq!(hello.direction, Heading::Forward);
        let alone = hello_packet(&a, &BTreeSet::new(), &states, ClusterRole::Free, None, 0.0);
        assert_eq!(alone.avg_rel_speed, 0.0);
    }
}
