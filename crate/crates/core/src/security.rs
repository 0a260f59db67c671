//! Reliability-scored client selection and cosine-similarity anomaly
//! detection.
//!
//! Every vehicle carries a [`ReliabilityRecord`] in its vehicle information
//! base (VIB). A cluster head vets its members' updates with [`ch_round`];
//! the EPC vets the cluster heads' aggregated models with [`epc_round`].
//!
//! Metrics, with `i` the number of rounds the record has been observed:
//!
//! ```text
//! historical_accuracy = total_accuracy / i
//! contribution_freq   = total_contributions / i
//! anomaly_record      = total_anomalous / i
//! reliability_score   = wa * historical_accuracy + wf * contribution_freq - wn * anomaly_record
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::cosine_similarity;
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecurityConfig {
    pub accuracy_weight: f64,
    pub frequency_weight: f64,
    pub anomaly_weight: f64,
    /// Fraction of a cluster's members examined each round, in `(0, 1]`.
    pub selected_client_percentage: f64,
    /// Rounds a flagged vehicle is skipped before it is reassessed.
    pub unblock_time: u32,
    /// Updates whose cosine similarity to the previous one falls below this are anomalous.
    pub similarity_threshold: f64,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        Self {
            accuracy_weight: 1.0,
            frequency_weight: 1.0,
            anomaly_weight: 1.0,
            selected_client_percentage: 0.75,
            unblock_time: 5,
            similarity_threshold: 0.5,
        }
    }
}

impl SecurityConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("security.accuracy_weight", self.accuracy_weight),
            ("security.frequency_weight", self.frequency_weight),
            ("security.anomaly_weight", self.anomaly_weight),
        ];
        for (field, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(field, "weights must be finite and non-negative"));
            }
        }
        if weights.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::config("security.accuracy_weight", "at least one weight must be positive"));
        }
        let pct = self.selected_client_percentage;
        if !(pct > 0.0 && pct <= 1.0) {
            return Err(Error::config("security.selected_client_percentage", "must lie in (0, 1]"));
        }
        if !self.similarity_threshold.is_finite() {
            return Err(Error::config("security.similarity_threshold", "must be finite"));
        }
        Ok(())
    }
}

/// Per-vehicle reliability bookkeeping held in the VIB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRecord {
    pub vehicle: VehicleId,
    pub total_accuracy: f64,
    pub total_contributions: u32,
    pub total_anomalous: u32,
    pub block_flag: bool,
    pub block_duration: u32,
    /// Last accepted update (CH tier) or model (EPC tier); the reference for
    /// the next anomaly test.
    #[serde(skip)]
    pub last_update: Option<Vec<f64>>,
    pub reliability_score: f64,
    pub rounds_observed: u32,
}

impl ReliabilityRecord {
    pub fn new(vehicle: VehicleId) -> Self {
        Self {
            vehicle,
            total_accuracy: 0.0,
            total_contributions: 0,
            total_anomalous: 0,
            block_flag: false,
            block_duration: 0,
            last_update: None,
            reliability_score: 0.0,
            rounds_observed: 0,
        }
    }
}

/// Records keyed by vehicle. Records travel with the vehicle when it changes cluster.
pub type RecordBook = BTreeMap<VehicleId, ReliabilityRecord>;

fn per_round(total: f64, rounds: u32) -> f64 {
    if rounds == 0 {
        0.0
    } else {
        total / f64::from(rounds)
    }
}

/// Mean accuracy of accepted contributions over all observed rounds; missed
/// rounds count as zero. 0 for a record never observed.
pub fn historical_accuracy(record: &ReliabilityRecord) -> f64 {
    per_round(record.total_accuracy, record.rounds_observed)
}

pub fn contribution_freq(record: &ReliabilityRecord) -> f64 {
    per_round(f64::from(record.total_contributions), record.rounds_observed)
}

pub fn anomaly_record(record: &ReliabilityRecord) -> f64 {
    per_round(f64::from(record.total_anomalous), record.rounds_observed)
}

/// Weighted score from the raw counters; stored back into the record.
pub fn reliability_score(record: &mut ReliabilityRecord, config: &SecurityConfig) -> f64 {
    let score = config.accuracy_weight * historical_accuracy(record)
        + config.frequency_weight * contribution_freq(record)
        - config.anomaly_weight * anomaly_record(record);
    record.reliability_score = score;
    score
}

/// Top `ceil(pct * n)` (at least one) records by stored score, descending,
/// ties to the lower vehicle id.
pub fn select_clients(records: &[&ReliabilityRecord], config: &SecurityConfig) -> Vec<VehicleId> {
    if records.is_empty() {
        return Vec::new();
    }
    let mut ranked: Vec<&ReliabilityRecord> = records.to_vec();
    ranked.sort_by(|a, b| {
        b.reliability_score
            .partial_cmp(&a.reliability_score)
            .unwrap_or(Ordering::Equal)
            .then(a.vehicle.cmp(&b.vehicle))
    });
    let n = records.len();
    // Guard against 0.75 * 4 evaluating to 3.0000000000000004.
    let wanted = ((config.selected_client_percentage * n as f64) - 1e-9).ceil() as usize;
    ranked.truncate(wanted.clamp(1, n));
    ranked.into_iter().map(|r| r.vehicle).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockDecision {
    Participate,
    Skip,
}

/// Block state machine, applied once each time a vehicle is considered.
///
/// A blocked vehicle is skipped (and its block duration advanced) until the
/// duration reaches `unblock_time`; then the flag is cleared and it participates.
pub fn check_block(record: &mut ReliabilityRecord, config: &SecurityConfig) -> BlockDecision {
    if record.block_flag {
        if record.block_duration < config.unblock_time {
            record.block_duration += 1;
            return BlockDecision::Skip;
        }
        record.block_flag = false;
    }
    BlockDecision::Participate
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Benign,
    Anomalous,
}

/// Cosine test of `current` against the previous accepted vector.
///
/// No previous vector means a first contribution, which is benign. A zero
/// vector on either side has no defined similarity and is anomalous.
pub fn anomaly_test(current: &[f64], previous: Option<&[f64]>, config: &SecurityConfig) -> Verdict {
    let Some(previous) = previous else {
        return Verdict::Benign;
    };
    if previous.len() != current.len() {
        return Verdict::Anomalous;
    }
    match cosine_similarity(current, previous) {
        Some(s) if s >= config.similarity_threshold => Verdict::Benign,
        _ => Verdict::Anomalous,
    }
}

/// Who performed a vetting round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Evaluator {
    ClusterHead(VehicleId),
    Epc,
}

impl fmt::Display for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Evaluator::ClusterHead(h) => write!(f, "ch{h}"),
            Evaluator::Epc => f.write_str("epc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Selected,
    /// Blocked and still serving its penalty.
    Skipped,
    /// Block flag cleared; the vehicle is reassessed this round.
    Unblocked,
    /// Selected and eligible, but nothing arrived.
    Missed,
    Flagged,
    Accepted { accuracy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityEvent {
    pub round: u32,
    pub evaluator: Evaluator,
    pub vehicle: VehicleId,
    pub kind: EventKind,
}

impl SecurityEvent {
    /// `round,evaluator,vehicle,event,value`
    pub fn to_row(&self) -> String {
        let (name, value) = match self.kind {
            EventKind::Selected => ("selected", String::new()),
            EventKind::Skipped => ("skipped", String::new()),
            EventKind::Unblocked => ("unblocked", String::new()),
            EventKind::Missed => ("missed", String::new()),
            EventKind::Flagged => ("flagged", String::new()),
            EventKind::Accepted { accuracy } => ("accepted", format!("{accuracy:.6}")),
        };
        format!("{},{},{},{},{}", self.round, self.evaluator, self.vehicle, name, value)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundOutcome {
    /// Vehicles examined this round, in examination order.
    pub selected: Vec<VehicleId>,
    /// Selected, unblocked, delivered and benign; in examination order.
    pub accepted: Vec<VehicleId>,
    pub flagged: Vec<VehicleId>,
    pub skipped: Vec<VehicleId>,
    pub events: Vec<SecurityEvent>,
}

struct Vetting<'a, F> {
    records: &'a mut RecordBook,
    received: &'a BTreeMap<VehicleId, Vec<f64>>,
    evaluator: Evaluator,
    round: u32,
    config: &'a SecurityConfig,
    accuracy: F,
    outcome: RoundOutcome,
}

impl<F: FnMut(VehicleId, &[f64]) -> f64> Vetting<'_, F> {
    fn event(&mut self, vehicle: VehicleId, kind: EventKind) {
        self.outcome.events.push(SecurityEvent {
            round: self.round,
            evaluator: self.evaluator,
            vehicle,
            kind,
        });
    }

    fn examine(&mut self, vehicle: VehicleId, reference: Reference<'_>) {
        self.outcome.selected.push(vehicle);
        self.event(vehicle, EventKind::Selected);
        let record = self.records.get_mut(&vehicle).expect("record created before vetting");
        let was_blocked = record.block_flag;
        if check_block(record, self.config) == BlockDecision::Skip {
            self.outcome.skipped.push(vehicle);
            self.event(vehicle, EventKind::Skipped);
            return;
        }
        if was_blocked {
            self.event(vehicle, EventKind::Unblocked);
        }
        let Some(current) = self.received.get(&vehicle) else {
            self.event(vehicle, EventKind::Missed);
            return;
        };
        let record = self.records.get_mut(&vehicle).expect("record exists");
        let verdict = match (record.last_update.as_deref(), reference) {
            (Some(previous), _) => anomaly_test(current, Some(previous), self.config),
            (None, Reference::None) => anomaly_test(current, None, self.config),
            (None, Reference::Model(model)) => anomaly_test(current, Some(model), self.config),
            (None, Reference::UpdateFrom(base)) => {
                let implied: Vec<f64> = base.iter().zip(current).map(|(b, g)| b + g).collect();
                anomaly_test(&implied, Some(base), self.config)
            }
        };
        match verdict {
            Verdict::Anomalous => {
                record.block_flag = true;
                record.block_duration = 0;
                record.total_anomalous += 1;
                self.outcome.flagged.push(vehicle);
                self.event(vehicle, EventKind::Flagged);
            }
            Verdict::Benign => {
                let acc = (self.accuracy)(vehicle, current);
                let record = self.records.get_mut(&vehicle).expect("record exists");
                record.total_contributions += 1;
                record.total_accuracy += acc;
                record.last_update = Some(current.clone());
                self.outcome.accepted.push(vehicle);
                self.event(vehicle, EventKind::Accepted { accuracy: acc });
            }
        }
    }
}

/// What to compare a vehicle's first vetted vector with.
#[derive(Debug, Clone, Copy)]
enum Reference<'a> {
    /// Nothing: the first contribution is benign.
    None,
    /// The vector is a model; compare it with this model directly.
    Model(&'a [f64]),
    /// The vector is an update applied to this model; compare `model + update` with `model`.
    UpdateFrom(&'a [f64]),
}

fn prepare(records: &mut RecordBook, vehicles: &[VehicleId]) {
    for &v in vehicles {
        records.entry(v).or_insert_with(|| ReliabilityRecord::new(v));
    }
}

fn finish(records: &mut RecordBook, vehicles: &[VehicleId], config: &SecurityConfig) {
    for v in vehicles {
        reliability_score(records.get_mut(v).expect("record exists"), config);
    }
}

/// Members examined this round: the top `selected_client_percentage` of
/// `members` by stored score (members without a record score 0).
pub fn cluster_selection(records: &RecordBook, members: &[VehicleId], config: &SecurityConfig) -> Vec<VehicleId> {
    let view: Vec<ReliabilityRecord> = members
        .iter()
        .map(|&v| ReliabilityRecord {
            reliability_score: records.get(&v).map_or(0.0, |r| r.reliability_score),
            ..ReliabilityRecord::new(v)
        })
        .collect();
    select_clients(&view.iter().collect::<Vec<_>>(), config)
}

/// Dynamic client selection and anomaly detection at a cluster head.
///
/// * members without a record get a fresh one (score 0);
/// * the top `selected_client_percentage` by stored score are examined
///   (see [`cluster_selection`]);
/// * every member's `rounds_observed` advances;
/// * each examined member goes through [`check_block`], then, if its update
///   arrived, [`anomaly_test`] against its last accepted update. Anomalous
///   updates set the block flag and restart the block clock; benign ones are
///   accepted, their accuracy (from `accuracy`, evaluated on the member's
///   updated model) is accumulated and they become the new reference;
/// * a member with no accepted update yet is tested in parameter space:
///   `base + update` against `base`, the model it trained from. Without a
///   `base` the first contribution is benign;
/// * scores are recomputed for every member.
///
/// Returns the accepted members in examination order.
#[allow(clippy::too_many_arguments)]
pub fn ch_round<F>(
    records: &mut RecordBook,
    members: &[VehicleId],
    received: &BTreeMap<VehicleId, Vec<f64>>,
    base: Option<&[f64]>,
    evaluator: Evaluator,
    round: u32,
    config: &SecurityConfig,
    accuracy: F,
) -> RoundOutcome
where
    F: FnMut(VehicleId, &[f64]) -> f64,
{
    let selected = cluster_selection(records, members, config);
    prepare(records, members);
    for v in members {
        records.get_mut(v).expect("record exists").rounds_observed += 1;
    }
    let mut vetting = Vetting {
        records,
        received,
        evaluator,
        round,
        config,
        accuracy,
        outcome: RoundOutcome::default(),
    };
    let reference = base.map_or(Reference::None, Reference::UpdateFrom);
    for &v in &selected {
        vetting.examine(v, reference);
    }
    let outcome = vetting.outcome;
    finish(records, members, config);
    outcome
}

/// Anomaly detection for cluster heads at the EPC.
///
/// Same bookkeeping as [`ch_round`] with two differences: there is no
/// selection step (every CH is examined, in id order), and the test compares
/// the CH's aggregated model with the last model accepted from it. A CH the
/// EPC has never accepted from is compared with `fallback`, the global model
/// the EPC broadcast last round.
pub fn epc_round<F>(
    records: &mut RecordBook,
    heads: &[VehicleId],
    received: &BTreeMap<VehicleId, Vec<f64>>,
    fallback: Option<&[f64]>,
    round: u32,
    config: &SecurityConfig,
    accuracy: F,
) -> RoundOutcome
where
    F: FnMut(VehicleId, &[f64]) -> f64,
{
    prepare(records, heads);
    let mut order = heads.to_vec();
    order.sort_unstable();
    order.dedup();
    for v in &order {
        records.get_mut(v).expect("record exists").rounds_observed += 1;
    }
    let mut vetting = Vetting {
        records,
        received,
        evaluator: Evaluator::Epc,
        round,
        config,
        accuracy,
        outcome: RoundOutcome::default(),
    };
    let reference = fallback.map_or(Reference::None, Reference::Model);
    for &v in &order {
        vetting.examine(v, reference);
    }
    let outcome = vetting.outcome;
    finish(records, &order, config);
    outcome
}
